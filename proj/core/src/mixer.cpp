#include "evim/mixer.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace evim {

namespace {

[[noreturn]] void fail(const std::string& op, const std::string& detail) {
  throw ContractViolation(op + ": " + detail);
}

std::size_t leading(const Shape& s, std::size_t tail) {
  std::size_t n = 1;
  for (std::size_t i = 0; i + tail < s.size(); ++i) n *= s[i];
  return n;
}

// [..., L, C] -> [..., H, W, C]
Shape to_grid(const Shape& s, Grid grid) {
  Shape out(s.begin(), s.end() - 2);
  out.insert(out.end(), {grid.height, grid.width, s.back()});
  return out;
}

template <class X>
void require_tokens(const X& x, Grid grid, const char* op) {
  if (x.rank() < 2 || x.dim(-2) != grid.tokens())
    fail(op, "grid " + std::to_string(grid.height) + "x" + std::to_string(grid.width) + " does not match tokens of " +
                 to_string(x.shape()));
}

template <class X>
X spatial_conv(const X& x, const X& k, Grid grid) {
  return reshape(dwconv3x3(reshape(x, to_grid(x.shape(), grid)), k, 1), x.shape());
}

template <class X>
std::size_t groups_of(const MixerParams<X>& p) {
  return p.log_a.size();
}

// h_in[n, d] = Σ_t w[t, g(d)]·B̂[t, n]·x[t, d] with w = A ⊙ softplus(delta) and
// channel group g(d) = d / (D / G). Covers the scalar-a (G = 1) and multi-head
// modes, whose decay does not broadcast elementwise against B̂.
template <class T>
Tensor<T> grouped_reduce(const Tensor<T>& delta, const Tensor<T>& log_a, const Tensor<T>& b_hat,
                         const Tensor<T>& x) {
  const std::size_t l = x.dim(-2), d = x.dim(-1), n = b_hat.dim(-1), g = log_a.size();
  if (d % g != 0) fail("grouped_reduce", "channels not divisible by head count");
  const std::size_t width = d / g, batch = leading(x.shape(), 2);
  const Tensor<T> a = ssm_decay(delta, log_a);
  const Tensor<T> step = softplus(delta);
  Shape out_shape(x.shape().begin(), x.shape().end() - 2);
  out_shape.insert(out_shape.end(), {n, d});
  Tensor<T> h(out_shape);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < l; ++t)
      for (std::size_t j = 0; j < n; ++j) {
        const T bh = b_hat[(b * l + t) * n + j];
        for (std::size_t c = 0; c < d; ++c) {
          const std::size_t i = (b * l + t) * g + c / width;
          h[(b * n + j) * d + c] += a[i] * step[i] * bh * x[(b * l + t) * d + c];
        }
      }
  mac_counter() += batch * (l * g + l * n * g + l * n * d);
  return h;
}

template <class T>
Tensor<T> as_column(const Tensor<T>& a, std::size_t l, const char* op) {
  if (a.size() != l || (a.rank() == 2 && a.dim(1) != 1) || a.rank() > 2)
    fail(op, "scalar decay " + to_string(a.shape()) + " does not match " + std::to_string(l) + " tokens");
  return a.reshape({l});
}

template <class T>
void require_sequence(const Tensor<T>& x, const Tensor<T>& b, const Tensor<T>& c, const char* op) {
  if (x.rank() != 2 || b.rank() != 2 || b.shape() != c.shape() || b.dim(0) != x.dim(0))
    fail(op, "expected x [L,D], B and C [L,N]; got " + to_string(x.shape()) + ", " + to_string(b.shape()) + ", " +
                 to_string(c.shape()));
}

// Shared tail of the NC-SSD layer: h = abᵀ·xp, y = C·h, (y ⊙ silu(z))·W_out.
template <class X>
X ncssd_core(const X& xp, const X& z, const X& ab, const X& c, const MixerParams<X>& p) {
  const X y = matmul(c, matmul_tn(ab, xp));
  return matmul(mul(y, silu(z)), p.w_out);
}

}  // namespace

Grid grid_for_tokens(std::size_t tokens) {
  if (tokens == 0) fail("grid_for_tokens", "zero tokens");
  std::size_t h = static_cast<std::size_t>(std::sqrt(static_cast<double>(tokens)));
  while (h > 1 && tokens % h != 0) --h;
  while ((h + 1) * (h + 1) <= tokens && tokens % (h + 1) == 0) ++h;
  return {h, tokens / h};
}

std::size_t MixerConfig::decay_groups() const {
  switch (head_mode) {
    case HeadMode::single_state_wise:
      return states;
    case HeadMode::single_scalar_a:
      return 1;
    case HeadMode::multi_head:
      return heads;
  }
  return states;
}

void MixerConfig::validate() const {
  if (tokens < 1 || states < 1 || channels < 1)
    fail("MixerConfig", "L, N and D must be >= 1 (L=" + std::to_string(tokens) + ", N=" + std::to_string(states) +
                            ", D=" + std::to_string(channels) + ")");
  if (head_mode == HeadMode::multi_head && (heads < 1 || channels % heads != 0))
    fail("MixerConfig", "head count " + std::to_string(heads) + " must divide D=" + std::to_string(channels));
}

// Phases -------------------------------------------------------------------------

template <class X>
ProjectedStates<X> project_states(const X& x, const MixerParams<X>& p) {
  const std::size_t g = groups_of(p);
  const std::size_t n = (p.w_bcd.dim(-1) - g) / 2;
  const X bcd = matmul(x, p.w_bcd);
  return {slice_lastdim(bcd, 0, n), slice_lastdim(bcd, n, n), add_lastdim(slice_lastdim(bcd, 2 * n, g), p.dt_bias)};
}

template <class X>
ProjectedStates<X> conv_states(const ProjectedStates<X>& s, const MixerParams<X>& p, Grid grid) {
  require_tokens(s.b_hat, grid, "conv_states");
  return {spatial_conv(s.b_hat, p.k_b, grid), spatial_conv(s.c, p.k_c, grid), s.delta};
}

template <class X>
Discretized<X> discretize(const X& delta, const X& log_a, const X& b_hat) {
  return {ssm_decay(delta, log_a), ssm_input_weight(delta, b_hat)};
}

template <class X>
X reduce_states(const Discretized<X>& d, const X& x) {
  if (d.a.shape() != d.b.shape())
    fail("reduce_states", "state-wise decay " + to_string(d.a.shape()) + " must match B " + to_string(d.b.shape()));
  return matmul_tn(mul(d.a, d.b), x);
}

template <class X>
std::array<X, 2> hidden_linear(const X& h_in, const MixerParams<X>& p) {
  return {matmul(h_in, p.w_in), matmul(h_in, p.w_z)};
}

template <class X>
X gate_project(const X& h, const X& z, const MixerParams<X>& p) {
  return matmul(mul(h, silu(z)), p.w_out);
}

template <class X>
X expand_tokens(const X& c, const X& h) {
  return matmul(c, h);
}

template <class X>
MixerOutput<X> hsm_mix(const X& x, const X& ab, const X& c, const MixerParams<X>& p) {
  const X h_in = matmul_tn(ab, x);
  const auto [h, z] = hidden_linear(h_in, p);
  const X mixed = gate_project(h, z, p);
  return {expand_tokens(c, mixed), mixed};
}

template <class X>
X ncssd_mix(const X& x, const X& ab, const X& c, const MixerParams<X>& p) {
  return ncssd_core(matmul(x, p.w_in), matmul(x, p.w_z), ab, c, p);
}

template <class X>
MixerOutput<X> hsm_ssd_layer(const X& x_in, const MixerParams<X>& p, Grid grid, const MixerOptions& opts) {
  require_tokens(x_in, grid, "hsm_ssd_layer");
  const X x = opts.layer_norm ? layer_norm(x_in, p.ln_gamma, p.ln_beta) : x_in;
  ProjectedStates<X> s = project_states(x, p);
  if (opts.dwconv) s = conv_states(s, p, grid);
  X h_in;
  if (opts.head_mode == HeadMode::single_state_wise) {
    h_in = reduce_states(discretize(s.delta, p.log_a, s.b_hat), x);
  } else if constexpr (is_tensor_v<X>) {
    h_in = grouped_reduce(s.delta, p.log_a, s.b_hat, x);
  } else {
    fail("hsm_ssd_layer", "only the state-wise head mode is differentiable");
  }
  const auto [h, z] = hidden_linear(h_in, p);
  const X mixed = gate_project(h, z, p);
  return {expand_tokens(s.c, mixed), mixed};
}

template <class X>
X ncssd_layer(const X& x_in, const MixerParams<X>& p, Grid grid, const MixerOptions& opts) {
  require_tokens(x_in, grid, "ncssd_layer");
  const X x = opts.layer_norm ? layer_norm(x_in, p.ln_gamma, p.ln_beta) : x_in;
  const ProjectedStates<X> s = project_states(x, p);
  X xp = matmul(x, p.w_in);
  const X z = matmul(x, p.w_z);
  if (groups_of(p) != s.b_hat.dim(-1)) fail("ncssd_layer", "requires the state-wise head mode");
  Discretized<X> d = discretize(s.delta, p.log_a, s.b_hat);
  X c = s.c;
  if (opts.dwconv) {
    d.b = spatial_conv(d.b, p.k_b, grid);
    c = spatial_conv(c, p.k_c, grid);
    if (!p.k_x.empty()) xp = spatial_conv(xp, p.k_x, grid);
  }
  return ncssd_core(xp, z, mul(d.a, d.b), c, p);
}

// Reference operators ------------------------------------------------------------

template <class T>
Tensor<T> ssd_causal_matrix(const Tensor<T>& x, const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& c) {
  require_sequence(x, b, c, "ssd_causal_matrix");
  const std::size_t l = x.dim(0);
  const Tensor<T> av = as_column(a, l, "ssd_causal_matrix");
  Tensor<T> m = matmul_nt(c, b);  // C·Bᵀ, [L, L]
  for (std::size_t i = 0; i < l; ++i) {
    T decay = T(1);  // Π_{k=j+1..i} a_k
    for (std::size_t j = i + 1; j-- > 0;) {
      m[i * l + j] *= decay;
      decay *= av[j];
    }
    for (std::size_t j = i + 1; j < l; ++j) m[i * l + j] = T(0);
  }
  return matmul(m, x);
}

template <class T>
Tensor<T> ssd_causal_scan(const Tensor<T>& x, const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& c) {
  require_sequence(x, b, c, "ssd_causal_scan");
  const std::size_t l = x.dim(0);
  const Tensor<T> av = as_column(a, l, "ssd_causal_scan");
  Tensor<T> per_state({l, b.dim(1)});
  for (std::size_t t = 0; t < l; ++t)
    for (std::size_t j = 0; j < b.dim(1); ++j) per_state[t * b.dim(1) + j] = av[t];
  return selective_scan(x, per_state, b, c);
}

template <class T>
Tensor<T> selective_scan(const Tensor<T>& x, const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& c) {
  require_sequence(x, b, c, "selective_scan");
  if (a.shape() != b.shape()) fail("selective_scan", "decay " + to_string(a.shape()) + " must match B");
  const std::size_t l = x.dim(0), d = x.dim(1), n = b.dim(1);
  Tensor<T> h({n, d});
  Tensor<T> y({l, d});
  for (std::size_t t = 0; t < l; ++t) {
    for (std::size_t j = 0; j < n; ++j) {
      const T at = a[t * n + j], bt = b[t * n + j];
      for (std::size_t k = 0; k < d; ++k) h[j * d + k] = at * h[j * d + k] + bt * x[t * d + k];
    }
    for (std::size_t j = 0; j < n; ++j) {
      const T ct = c[t * n + j];
      for (std::size_t k = 0; k < d; ++k) y[t * d + k] += ct * h[j * d + k];
    }
  }
  mac_counter() += 3 * l * n * d;
  return y;
}

template <class T>
NcssdResult<T> ncssd(const Tensor<T>& x, const Tensor<T>& weights, const Tensor<T>& b, const Tensor<T>& c) {
  require_sequence(x, b, c, "ncssd");
  const std::size_t l = x.dim(0), n = b.dim(1);
  Tensor<T> ab = b;
  if (weights.shape() == b.shape()) {
    ab = mul(weights, b);
  } else {
    const Tensor<T> av = as_column(weights, l, "ncssd");
    for (std::size_t t = 0; t < l; ++t)
      for (std::size_t j = 0; j < n; ++j) ab[t * n + j] *= av[t];
  }
  Tensor<T> h = matmul_tn(ab, x);
  Tensor<T> y = matmul(c, h);
  return {std::move(y), std::move(h)};
}

template <class T>
Tensor<T> causal_ssd_layer(const Tensor<T>& x_in, const MixerParams<Tensor<T>>& p, Grid grid,
                           const MixerOptions& opts) {
  require_tokens(x_in, grid, "causal_ssd_layer");
  if (x_in.rank() != 2) fail("causal_ssd_layer", "expects a single [L, D] sequence");
  const Tensor<T> x = opts.layer_norm ? layer_norm(x_in, p.ln_gamma, p.ln_beta) : x_in;
  const ProjectedStates<Tensor<T>> s = project_states(x, p);
  if (groups_of(p) != s.b_hat.dim(-1)) fail("causal_ssd_layer", "requires the state-wise head mode");
  Tensor<T> xp = matmul(x, p.w_in);
  const Tensor<T> z = matmul(x, p.w_z);
  Discretized<Tensor<T>> d = discretize(s.delta, p.log_a, s.b_hat);
  Tensor<T> c = s.c;
  if (opts.dwconv) {
    d.b = spatial_conv(d.b, p.k_b, grid);
    c = spatial_conv(c, p.k_c, grid);
    if (!p.k_x.empty()) xp = spatial_conv(xp, p.k_x, grid);
  }
  return matmul(mul(selective_scan(xp, d.a, d.b, c), silu(z)), p.w_out);
}

template <class T>
Tensor<T> attention_ref(const Tensor<T>& x, const AttentionParams<T>& p) {
  if (x.rank() != 2) fail("attention_ref", "expects [L, D], got " + to_string(x.shape()));
  const Tensor<T> q = matmul(x, p.w_q), k = matmul(x, p.w_k), v = matmul(x, p.w_v);
  const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(x.dim(1)));
  const Tensor<T> weights = softmax(scale(matmul_nt(q, k), inv_sqrt_d));
  return matmul(matmul(weights, v), p.w_o);
}

// Construction -------------------------------------------------------------------

template <class T>
MixerParams<Tensor<T>> init_mixer_params(const MixerConfig& cfg, Rng& rng, bool with_x_conv) {
  cfg.validate();
  const std::size_t n = cfg.states, d = cfg.channels, g = cfg.decay_groups();
  const double w_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double k_std = 1.0 / 3.0;
  MixerParams<Tensor<T>> p;
  p.w_bcd = rng.normal_tensor<T>({d, 2 * n + g}, w_std);
  // softplus(dt_bias) is log-uniform in [1e-3, 1e-1].
  p.dt_bias = Tensor<T>({g});
  for (auto& v : p.dt_bias.data()) {
    const double step = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
    v = static_cast<T>(step + std::log(-std::expm1(-step)));
  }
  p.log_a = Tensor<T>({g});
  for (auto& v : p.log_a.data()) v = static_cast<T>(std::log(rng.uniform(1.0, 16.0)));
  p.k_b = rng.normal_tensor<T>({3, 3, n}, k_std);
  p.k_c = rng.normal_tensor<T>({3, 3, n}, k_std);
  p.w_in = rng.normal_tensor<T>({d, d}, w_std);
  p.w_z = rng.normal_tensor<T>({d, d}, w_std);
  p.w_out = rng.normal_tensor<T>({d, d}, w_std);
  p.ln_gamma = Tensor<T>::full({d}, T(1));
  p.ln_beta = Tensor<T>::zeros({d});
  p.layer_scale = Tensor<T>::full({d}, T(1e-5));
  if (with_x_conv) p.k_x = rng.normal_tensor<T>({3, 3, d}, k_std);
  return p;
}

template <class T>
AttentionParams<T> init_attention_params(std::size_t channels, Rng& rng) {
  const double w_std = 1.0 / std::sqrt(static_cast<double>(channels));
  AttentionParams<T> p;
  p.w_q = rng.normal_tensor<T>({channels, channels}, w_std);
  p.w_k = rng.normal_tensor<T>({channels, channels}, w_std);
  p.w_v = rng.normal_tensor<T>({channels, channels}, w_std);
  p.w_o = rng.normal_tensor<T>({channels, channels}, w_std);
  return p;
}

// Cost model ---------------------------------------------------------------------

const char* phase_name(Phase phase) {
  switch (phase) {
    case Phase::proj_bcd:
      return "proj_bcd";
    case Phase::dwconv:
      return "dwconv";
    case Phase::discretize:
      return "discretize";
    case Phase::state_reduce:
      return "state_reduce";
    case Phase::hsm_linear1:
      return "hsm_linear1";
    case Phase::hsm_gate_linear2:
      return "hsm_gate_linear2";
    case Phase::out_project:
      return "out_project";
  }
  return "?";
}

bool is_matmul_phase(Phase phase) {
  return phase == Phase::proj_bcd || phase == Phase::state_reduce || phase == Phase::hsm_linear1 ||
         phase == Phase::hsm_gate_linear2 || phase == Phase::out_project;
}

std::array<std::uint64_t, 7> mixer_phase_macs(const MixerConfig& cfg) {
  cfg.validate();
  const std::uint64_t l = cfg.tokens, n = cfg.states, d = cfg.channels, g = cfg.decay_groups();
  const bool state_wise = cfg.head_mode == HeadMode::single_state_wise;
  return {
      l * d * (2 * n + g),
      2 * 9 * l * n,
      state_wise ? 2 * l * n : l * g,
      state_wise ? l * n * d : l * g + l * n * g + l * n * d,
      2 * n * d * d,
      n * d * d,
      l * n * d,
  };
}

std::uint64_t flops_of_mixer(const MixerConfig& cfg) {
  std::uint64_t total = 0;
  for (auto m : mixer_phase_macs(cfg)) total += m;
  return total;
}

std::uint64_t flops_of_ncssd_layer(const MixerConfig& cfg) {
  cfg.validate();
  const std::uint64_t l = cfg.tokens, n = cfg.states, d = cfg.channels;
  return 3 * l * n * d       // B̂, C, Δ
         + 2 * l * d * d     // x, z
         + 2 * l * n         // discretize
         + 9 * l * (2 * n + d)  // DWConv on B, C, x
         + 2 * l * n * d     // h, C·h
         + l * d * d;        // W_out
}

std::uint64_t flops_of_attention(std::size_t tokens, std::size_t channels) {
  const std::uint64_t l = tokens, d = channels;
  return 4 * l * d * d + 2 * l * l * d;
}

std::uint64_t mixer_param_count(const MixerConfig& cfg) {
  cfg.validate();
  const std::uint64_t n = cfg.states, d = cfg.channels, g = cfg.decay_groups();
  return d * (2 * n + g) + 2 * g + 2 * 9 * n + 3 * d * d + 3 * d;
}

// Instantiation --------------------------------------------------------------------

#define EVIM_INSTANTIATE_MIXER_GENERIC(X)                                                                    \
  template ProjectedStates<X> project_states(const X&, const MixerParams<X>&);                              \
  template ProjectedStates<X> conv_states(const ProjectedStates<X>&, const MixerParams<X>&, Grid);          \
  template Discretized<X> discretize(const X&, const X&, const X&);                                         \
  template X reduce_states(const Discretized<X>&, const X&);                                                \
  template std::array<X, 2> hidden_linear(const X&, const MixerParams<X>&);                                 \
  template X gate_project(const X&, const X&, const MixerParams<X>&);                                       \
  template X expand_tokens(const X&, const X&);                                                             \
  template MixerOutput<X> hsm_mix(const X&, const X&, const X&, const MixerParams<X>&);                     \
  template X ncssd_mix(const X&, const X&, const X&, const MixerParams<X>&);                                \
  template MixerOutput<X> hsm_ssd_layer(const X&, const MixerParams<X>&, Grid, const MixerOptions&);        \
  template X ncssd_layer(const X&, const MixerParams<X>&, Grid, const MixerOptions&);

#define EVIM_INSTANTIATE_MIXER_TENSOR(T)                                                                     \
  template Tensor<T> ssd_causal_matrix(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&); \
  template Tensor<T> ssd_causal_scan(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);   \
  template Tensor<T> selective_scan(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);    \
  template NcssdResult<T> ncssd(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);        \
  template Tensor<T> causal_ssd_layer(const Tensor<T>&, const MixerParams<Tensor<T>>&, Grid,                    \
                                      const MixerOptions&);                                                     \
  template Tensor<T> attention_ref(const Tensor<T>&, const AttentionParams<T>&);                                \
  template MixerParams<Tensor<T>> init_mixer_params(const MixerConfig&, Rng&, bool);                            \
  template AttentionParams<T> init_attention_params(std::size_t, Rng&);

EVIM_INSTANTIATE_MIXER_GENERIC(Tensor<float>)
EVIM_INSTANTIATE_MIXER_GENERIC(Tensor<double>)
EVIM_INSTANTIATE_MIXER_GENERIC(ad::Var<float>)
EVIM_INSTANTIATE_MIXER_GENERIC(ad::Var<double>)
EVIM_INSTANTIATE_MIXER_TENSOR(float)
EVIM_INSTANTIATE_MIXER_TENSOR(double)

}  // namespace evim
