#pragma once

// Dense neural primitives over Tensor<T>. Feature maps are channels-last
// ([..., H, W, C]) and sequences token-major ([..., L, D]); any leading axes
// are treated as a batch. Every reduction runs in a fixed loop order, so a
// given input produces bit-identical output on every call.

#include <cstdint>
#include <span>
#include <vector>

#include "evim/tensor.hpp"

namespace evim {

inline constexpr double kLayerNormEps = 1e-6;
inline constexpr double kBatchNormEps = 1e-5;

/// The tensor core never spawns threads. Benchmarks check this before timing.
constexpr int tensor_core_threads() { return 1; }

/// Multiply-accumulate counter fed by the arithmetic kernels (matmuls,
/// convolutions and the discretization map). Elementwise maps, norms and
/// pooling are not counted, matching the analytic FLOPs convention.
std::uint64_t& mac_counter();

class MacScope {
 public:
  MacScope() : start_(mac_counter()) {}
  std::uint64_t count() const { return mac_counter() - start_; }

 private:
  std::uint64_t start_;
};

// Linear algebra ----------------------------------------------------------

/// a: [..., M, K]; b: [K, P] (shared) or [..., K, P] with a's leading axes.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// aᵀ·b over the last two axes: a [..., L, N], b [..., L, D] -> [..., N, D].
template <class T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b);
/// a·bᵀ over the last two axes: a [..., M, K], b [..., P, K] -> [..., M, P].
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> transpose(const Tensor<T>& x);

// Elementwise ---------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> scale(const Tensor<T>& x, T s);
/// x + v broadcast along the last axis.
template <class T>
Tensor<T> add_lastdim(const Tensor<T>& x, const Tensor<T>& v);
/// x ⊙ v broadcast along the last axis.
template <class T>
Tensor<T> mul_lastdim(const Tensor<T>& x, const Tensor<T>& v);
/// x [..., R, C] scaled per row-group by s [..., C].
template <class T>
Tensor<T> mul_rows(const Tensor<T>& x, const Tensor<T>& s);

template <class T>
Tensor<T> relu(const Tensor<T>& x);
template <class T>
Tensor<T> sigmoid(const Tensor<T>& x);
template <class T>
Tensor<T> silu(const Tensor<T>& x);
template <class T>
Tensor<T> softplus(const Tensor<T>& x);
/// Softmax along the last axis, max-subtracted.
template <class T>
Tensor<T> softmax(const Tensor<T>& x);

// Convolutions ----------------------------------------------------------------

/// Depthwise 3x3 correlation, zero padding 1, stride 1 or 2 (output extents
/// ceil(H/stride) x ceil(W/stride)). x: [..., H, W, C], k: [3, 3, C].
template <class T>
Tensor<T> dwconv3x3(const Tensor<T>& x, const Tensor<T>& k, int stride = 1);
template <class T>
Tensor<T> dwconv3x3(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& bias, int stride = 1);
/// Dense 3x3 convolution, zero padding 1. x: [..., H, W, Cin], w: [3, 3, Cin, Cout].
template <class T>
Tensor<T> conv3x3(const Tensor<T>& x, const Tensor<T>& w, int stride = 1);
/// Per-pixel linear map. x: [..., Cin], w: [Cin, Cout], bias: [Cout].
template <class T>
Tensor<T> pwconv(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);

// Normalization ---------------------------------------------------------------

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     double eps = kLayerNormEps);
template <class T>
Tensor<T> batch_norm_infer(const Tensor<T>& x, const Tensor<T>& mean, const Tensor<T>& var,
                           const Tensor<T>& gamma, const Tensor<T>& beta, double eps = kBatchNormEps);
/// Training-mode batch norm: statistics over every axis but the last. The
/// biased batch mean/variance are written to `batch_mean`/`batch_var`.
template <class T>
Tensor<T> batch_norm_train(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps,
                           Tensor<T>* batch_mean, Tensor<T>* batch_var);

// Shape and reduction -----------------------------------------------------------

/// Mean over the second-to-last axis: [..., R, C] -> [..., C].
template <class T>
Tensor<T> mean_rows(const Tensor<T>& x);
template <class T>
Tensor<T> slice_lastdim(const Tensor<T>& x, std::size_t begin, std::size_t count);
template <class T>
Tensor<T> concat_lastdim(const std::vector<Tensor<T>>& parts);
/// Σ_s w[s]·zs[s]; all zs share one shape, w: [S].
template <class T>
Tensor<T> weighted_sum(const std::vector<Tensor<T>>& zs, const Tensor<T>& w);
template <class T>
Tensor<T> sum(const Tensor<T>& x);
/// Mean softmax cross-entropy. logits: [B, c] (or [c] for a single sample).
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

// Discretization map ---------------------------------------------------------

/// Per-step decay A = exp(softplus(delta) * -exp(log_a)); log_a broadcasts
/// over the last axis of delta. Counts one MAC per output element.
template <class T>
Tensor<T> ssm_decay(const Tensor<T>& delta, const Tensor<T>& log_a);
/// Input weight B = softplus(delta) ⊙ b_hat. delta's last axis equals
/// b_hat's (state-wise step) or is 1 (one step per token).
template <class T>
Tensor<T> ssm_input_weight(const Tensor<T>& delta, const Tensor<T>& b_hat);

// Comparison helpers ------------------------------------------------------------

template <class T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b);
/// max |a-b| / max|b|: error relative to the reference's scale.
template <class T>
double max_rel_diff(const Tensor<T>& a, const Tensor<T>& b);

}  // namespace evim
