#include "evim/verify.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

#include "evim/mixer.hpp"
#include "evim/train.hpp"

namespace evim::verify {

namespace {

// Instance seeds are derived so suites at different base seeds do not overlap.
std::uint64_t instance_seed(std::uint64_t base, std::uint64_t i) { return base * 1000003ULL + i; }

MixerParams<Tensor<double>> random_params(std::size_t l, std::size_t n, std::size_t d, Rng& rng) {
  MixerConfig cfg{l, n, d};
  auto p = init_mixer_params<double>(cfg, rng);
  p.ln_gamma = rng.uniform_tensor<double>({d}, 0.5, 1.5);
  p.ln_beta = rng.normal_tensor<double>({d}, 0.1);
  p.dt_bias = rng.normal_tensor<double>({n});
  return p;
}

Tensor<double> permute_rows(const Tensor<double>& x, const std::vector<std::size_t>& perm) {
  Tensor<double> out(x.shape());
  const std::size_t w = x.dim(1);
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = x[perm[i] * w + j];
  return out;
}

// State weights A⊙B in the layer's own form, from random Δ and B̂.
Tensor<double> random_state_weights(Rng& rng, std::size_t l, std::size_t n) {
  const auto d = discretize(rng.normal_tensor<double>({l, n}), rng.normal_tensor<double>({n}, 0.5),
                            rng.normal_tensor<double>({l, n}));
  return mul(d.a, d.b);
}

}  // namespace

double equivalence_error(std::uint64_t seed, std::size_t tokens, std::size_t channels) {
  Rng rng(seed);
  const auto p = random_params(tokens, tokens, channels, rng);
  const auto x = rng.normal_tensor<double>({tokens, channels});
  Tensor<double> c({tokens, tokens});
  for (std::size_t i = 0; i < tokens; ++i) c[i * tokens + i] = rng.normal();
  const auto id = Tensor<double>::identity(tokens);
  return max_rel_diff(hsm_mix(x, id, c, p).x_out, ncssd_mix(x, id, c, p));
}

double factorization_error(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t l = 4 + rng.below(13), n = 1 + rng.below(8), d = 2 + rng.below(15), e = 2 + rng.below(15);
  const auto ab = random_state_weights(rng, l, n);
  const auto x = rng.normal_tensor<double>({l, d});
  const auto w = rng.normal_tensor<double>({d, e});
  return max_rel_diff(matmul_tn(ab, matmul(x, w)), matmul(matmul_tn(ab, x), w));
}

double linearity_error(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t l = 4 + rng.below(13), n = 1 + rng.below(8), d = 2 + rng.below(15);
  const auto ab = random_state_weights(rng, l, n);
  const auto x = rng.normal_tensor<double>({l, d}), y = rng.normal_tensor<double>({l, d});
  const double alpha = rng.normal();
  const double additive = max_rel_diff(matmul_tn(ab, add(x, y)), add(matmul_tn(ab, x), matmul_tn(ab, y)));
  const double homogeneous = max_rel_diff(matmul_tn(ab, scale(x, alpha)), scale(matmul_tn(ab, x), alpha));
  return std::max(additive, homogeneous);
}

double causal_forms_error(std::uint64_t seed) {
  Rng rng(seed);
  double worst = 0;
  for (std::size_t l = 1; l <= 16; ++l) {
    const std::size_t n = 1 + rng.below(8), d = 1 + rng.below(8);
    const auto x = rng.normal_tensor<double>({l, d});
    const auto a = rng.uniform_tensor<double>({l}, 0.0, 1.0);
    const auto b = rng.normal_tensor<double>({l, n}), c = rng.normal_tensor<double>({l, n});
    worst = std::max(worst, max_rel_diff(ssd_causal_matrix(x, a, b, c), ssd_causal_scan(x, a, b, c)));
  }
  return worst;
}

PermutationError permutation_error(std::uint64_t seed) {
  Rng rng(seed);
  const Grid grid{4, 4};
  const std::size_t l = grid.tokens(), n = 4, d = 8;
  const MixerOptions no_conv{.layer_norm = true, .dwconv = false};
  const auto p = random_params(l, n, d, rng);
  const auto x = rng.normal_tensor<double>({l, d});
  std::vector<std::size_t> perm(l);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = l - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
  const auto base = hsm_ssd_layer(x, p, grid, no_conv);
  const auto moved = hsm_ssd_layer(permute_rows(x, perm), p, grid, no_conv);
  return {max_rel_diff(moved.h, base.h), max_rel_diff(moved.x_out, permute_rows(base.x_out, perm))};
}

GradcheckSummary gradcheck_suite(std::uint64_t seed) {
  GradcheckSummary s;
  for (const auto& g : gradcheck_primitives(seed)) {
    if (g.result.max_rel_error >= s.primitives) {
      s.primitives = g.result.max_rel_error;
      s.worst_primitive = g.name;
    }
  }
  s.mixer = gradcheck_mixer(MixerConfig{6, 4, 8}, seed).max_rel_error;
  s.beta_shift = fusion_shift_derivative(seed);
  return s;
}

std::vector<PropertyLine> run_suite(const std::string& suite, std::uint64_t seed) {
  if (suite != "all" && suite != "prop1" && suite != "gradcheck" && suite != "invariants")
    throw std::invalid_argument("unknown suite '" + suite + "' (expected all, prop1, gradcheck or invariants)");
  std::vector<PropertyLine> lines;
  auto add_line = [&](std::string name, double measured, double tol) {
    lines.push_back({std::move(name), measured, tol, measured <= tol});
  };
  const bool all = suite == "all";
  if (all || suite == "prop1") {
    double worst = 0;
    for (std::uint64_t i = 0; i < 100; ++i)
      for (std::size_t l : {4, 8})
        for (std::size_t d : {8, 16}) worst = std::max(worst, equivalence_error(instance_seed(seed, i), l, d));
    add_line("hidden_state_mixing_equals_token_mixing", worst, 1e-10);
  }
  if (all || suite == "invariants") {
    double fact = 0, lin = 0, causal = 0, perm_h = 0, perm_x = 0;
    for (std::uint64_t i = 0; i < 100; ++i) {
      fact = std::max(fact, factorization_error(instance_seed(seed, i)));
      lin = std::max(lin, linearity_error(instance_seed(seed, i)));
      causal = std::max(causal, causal_forms_error(instance_seed(seed, i)));
    }
    for (std::uint64_t i = 0; i < 50; ++i) {
      const auto e = permutation_error(instance_seed(seed, i));
      perm_h = std::max(perm_h, e.hidden);
      perm_x = std::max(perm_x, e.output);
    }
    add_line("state_reduction_factorization", fact, 1e-12);
    add_line("state_reduction_linearity", lin, 1e-12);
    add_line("causal_matrix_equals_scan", causal, 1e-10);
    add_line("permutation_hidden_invariant", perm_h, 1e-12);
    add_line("permutation_output_equivariant", perm_x, 1e-12);
  }
  if (all || suite == "gradcheck") {
    const auto g = gradcheck_suite(seed);
    add_line("gradcheck_primitives(worst=" + g.worst_primitive + ")", g.primitives, 1e-6);
    add_line("gradcheck_hsm_ssd_layer", g.mixer, 1e-4);
    add_line("fusion_beta_shift_invariance", g.beta_shift, 1e-8);
  }
  return lines;
}

}  // namespace evim::verify
