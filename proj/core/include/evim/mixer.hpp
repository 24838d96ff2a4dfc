#pragma once

// Global token mixers built on state space duality.
//
//   ssd_causal_*   causal SSD, as a masked L×L matrix or as a recurrent scan
//   ncssd          non-causal SSD: one shared N×D hidden state
//   ncssd_layer    the projection-heavy baseline layer (gate and output
//                  projection applied to all L tokens)
//   hsm_ssd_layer  hidden-state-mixer SSD: gate and projections applied to
//                  the N×D hidden state, then broadcast back through C
//
// The layer code is generic over the value type X, which is Tensor<T> for
// inference or ad::Var<T> when recording for differentiation.

#include <array>
#include <cstdint>
#include <string>
#include <type_traits>

#include "evim/autodiff.hpp"
#include "evim/ops.hpp"
#include "evim/tensor.hpp"

namespace evim {

template <class X>
inline constexpr bool is_tensor_v = false;
template <class T>
inline constexpr bool is_tensor_v<Tensor<T>> = true;

struct Grid {
  std::size_t height = 1;
  std::size_t width = 1;
  std::size_t tokens() const { return height * width; }
  friend bool operator==(const Grid&, const Grid&) = default;
};

/// Most-square factorization height x width of `tokens` with height <= width.
Grid grid_for_tokens(std::size_t tokens);

enum class HeadMode {
  single_state_wise,  ///< Δ, â per state: importance A ∈ R^{L×N}
  single_scalar_a,    ///< one Δ per token and scalar â: A ∈ R^{L×1}
  multi_head,         ///< per-head Δ, â over channel groups; B, C shared
};

struct MixerConfig {
  std::size_t tokens = 1;    // L
  std::size_t states = 1;    // N
  std::size_t channels = 1;  // D
  HeadMode head_mode = HeadMode::single_state_wise;
  std::size_t heads = 1;  // multi_head only

  /// Number of columns of Δ and â: N, 1 or the head count.
  std::size_t decay_groups() const;
  void validate() const;
};

template <class X>
struct MixerParams {
  X w_bcd;     // D × (2N + G): columns are [B̂ | C | Δ_raw]
  X dt_bias;   // G, added to Δ_raw before softplus
  X log_a;     // G, â = -exp(log_a)
  X k_b;       // 3×3×N depthwise kernel on B̂
  X k_c;       // 3×3×N depthwise kernel on C
  X w_in;      // D×D
  X w_z;       // D×D
  X w_out;     // D×D
  X ln_gamma;  // D
  X ln_beta;   // D
  X layer_scale;  // D, applied by the enclosing block
  X k_x;       // 3×3×D on x, NC-SSD baseline only (may be empty)
};

/// Calls f(name, member) for every non-empty parameter in a fixed order.
template <class X, class F>
void for_each_param(MixerParams<X>& p, F&& f);
template <class X, class F>
void for_each_param(const MixerParams<X>& p, F&& f);

struct MixerOptions {
  bool layer_norm = true;
  bool dwconv = true;
  /// Anything but single_state_wise takes the grouped (Tensor-only) reduction.
  HeadMode head_mode = HeadMode::single_state_wise;
};

template <class X>
struct ProjectedStates {
  X b_hat;  // L×N
  X c;      // L×N
  X delta;  // L×G, bias included
};

template <class X>
struct Discretized {
  X a;  // L×G decay in (0, 1]
  X b;  // L×N input weight Δ⊙B̂
};

template <class X>
struct MixerOutput {
  X x_out;  // L×D
  X h;      // N×D hidden state after the mixer
};

// Layer phases, in execution order. Leading batch axes pass through.

template <class X>
ProjectedStates<X> project_states(const X& x, const MixerParams<X>& p);
template <class X>
ProjectedStates<X> conv_states(const ProjectedStates<X>& s, const MixerParams<X>& p, Grid grid);
/// Δ = softplus(delta); A = exp(Δ·â); B = Δ⊙B̂.
template <class X>
Discretized<X> discretize(const X& delta, const X& log_a, const X& b_hat);
/// h_in = (A⊙B)ᵀ x for state-wise A.
template <class X>
X reduce_states(const Discretized<X>& d, const X& x);
/// (h, z) = (h_in·W_in, h_in·W_z).
template <class X>
std::array<X, 2> hidden_linear(const X& h_in, const MixerParams<X>& p);
/// (h ⊙ silu(z))·W_out.
template <class X>
X gate_project(const X& h, const X& z, const MixerParams<X>& p);
/// x_out = C·h.
template <class X>
X expand_tokens(const X& c, const X& h);

/// HSM-SSD from the state reduction onward, with the reduction weights
/// (A⊙B, L×N) and C supplied directly.
template <class X>
MixerOutput<X> hsm_mix(const X& x, const X& ab, const X& c, const MixerParams<X>& p);
/// NC-SSD baseline from the same point: x and z are token projections and the
/// gate/output projection run on all L tokens.
template <class X>
X ncssd_mix(const X& x, const X& ab, const X& c, const MixerParams<X>& p);

template <class X>
MixerOutput<X> hsm_ssd_layer(const X& x_in, const MixerParams<X>& p, Grid grid, const MixerOptions& opts = {});
template <class X>
X ncssd_layer(const X& x_in, const MixerParams<X>& p, Grid grid, const MixerOptions& opts = {});

// Reference operators (Tensor only) -------------------------------------------

/// Causal SSD as y = (M ⊙ C·Bᵀ)·x with the cumulative-product mask M.
template <class T>
Tensor<T> ssd_causal_matrix(const Tensor<T>& x, const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& c);
/// Causal SSD as the recurrence h_t = a_t·h_{t-1} + B_tᵀ x_t, y_t = C_t·h_t.
template <class T>
Tensor<T> ssd_causal_scan(const Tensor<T>& x, const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& c);
/// Recurrence with per-state decays A: [L×N] (diagonal state transition).
template <class T>
Tensor<T> selective_scan(const Tensor<T>& x, const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& c);

template <class T>
struct NcssdResult {
  Tensor<T> y;  // L×D
  Tensor<T> h;  // N×D
};

/// Non-causal SSD. `weights` is a per-token scalar a ([L] or [L×1]) or
/// state-wise A ([L×N]); h = (weights ⊙ B)ᵀ x and y = C·h.
template <class T>
NcssdResult<T> ncssd(const Tensor<T>& x, const Tensor<T>& weights, const Tensor<T>& b, const Tensor<T>& c);

/// Causal counterpart of ncssd_layer: the global sum is replaced by the
/// selective scan with per-state decays.
template <class T>
Tensor<T> causal_ssd_layer(const Tensor<T>& x_in, const MixerParams<Tensor<T>>& p, Grid grid,
                           const MixerOptions& opts = {});

template <class T>
struct AttentionParams {
  Tensor<T> w_q, w_k, w_v, w_o;  // D×D each
};

/// Plain softmax attention with an explicit L×L score matrix.
template <class T>
Tensor<T> attention_ref(const Tensor<T>& x, const AttentionParams<T>& p);

// Construction and cost model -------------------------------------------------

template <class T>
MixerParams<Tensor<T>> init_mixer_params(const MixerConfig& cfg, Rng& rng, bool with_x_conv = false);
template <class T>
AttentionParams<T> init_attention_params(std::size_t channels, Rng& rng);

/// Phase labels follow the HSM-SSD layer's execution order.
enum class Phase { proj_bcd, dwconv, discretize, state_reduce, hsm_linear1, hsm_gate_linear2, out_project };
inline constexpr std::array<Phase, 7> kPhases = {Phase::proj_bcd,    Phase::dwconv,           Phase::discretize,
                                                 Phase::state_reduce, Phase::hsm_linear1, Phase::hsm_gate_linear2,
                                                 Phase::out_project};
const char* phase_name(Phase phase);
/// Matrix-multiplication phases; the rest are memory-bound elementwise work.
bool is_matmul_phase(Phase phase);

/// Multiply-accumulates of one HSM-SSD layer, per phase.
std::array<std::uint64_t, 7> mixer_phase_macs(const MixerConfig& cfg);
/// Σ of mixer_phase_macs: 3LND + 18LN + 2LN + LND + 3ND² + LND for the
/// state-wise head mode.
std::uint64_t flops_of_mixer(const MixerConfig& cfg);
std::uint64_t flops_of_ncssd_layer(const MixerConfig& cfg);
std::uint64_t flops_of_attention(std::size_t tokens, std::size_t channels);
std::uint64_t mixer_param_count(const MixerConfig& cfg);

// for_each_param ---------------------------------------------------------------

namespace detail {

template <class P, class F>
void visit_mixer(P& p, F&& f) {
  auto visit = [&](const char* name, auto& member) {
    if (!member.empty()) f(name, member);
  };
  visit("w_bcd", p.w_bcd);
  visit("dt_bias", p.dt_bias);
  visit("log_a", p.log_a);
  visit("k_b", p.k_b);
  visit("k_c", p.k_c);
  visit("w_in", p.w_in);
  visit("w_z", p.w_z);
  visit("w_out", p.w_out);
  visit("ln_gamma", p.ln_gamma);
  visit("ln_beta", p.ln_beta);
  visit("layer_scale", p.layer_scale);
  visit("k_x", p.k_x);
}

}  // namespace detail

template <class X, class F>
void for_each_param(MixerParams<X>& p, F&& f) {
  detail::visit_mixer(p, f);
}

template <class X, class F>
void for_each_param(const MixerParams<X>& p, F&& f) {
  detail::visit_mixer(p, f);
}

}  // namespace evim
