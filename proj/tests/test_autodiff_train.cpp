#include <cmath>
#include <set>

#include "doctest.h"
#include "evim/train.hpp"
#include "evim/verify.hpp"

using namespace evim;
using ad::Tape;
using ad::Var;

namespace {

bool all_finite(const Tensor<double>& t) {
  for (double v : t.data())
    if (!std::isfinite(v)) return false;
  return true;
}

ModelConfig tiny(std::size_t classes = 2) {
  ModelConfig c = mini_m1_config(classes);
  c.blocks = {1, 1, 1};
  c.height = c.width = 32;
  c.states = {4, 4, 1};
  return c;
}

}  // namespace

TEST_CASE("tape basics") {
  SUBCASE("identity leaf receives the seed") {
    Tape<double> tape;
    const auto x = tape.leaf(Tensor<double>::of({1, -2, 3}));
    tape.backward(x, Tensor<double>::of({0.5, 0.25, -1}));
    CHECK(tape.grad(x) == Tensor<double>::of({0.5, 0.25, -1}));
  }
  SUBCASE("linear map: dL/dx = R Wᵀ, dL/dW = xᵀ R") {
    Rng rng(1);
    const auto xv = rng.normal_tensor<double>({3, 4}), wv = rng.normal_tensor<double>({4, 2});
    const auto r = rng.normal_tensor<double>({3, 2});
    Tape<double> tape;
    const auto x = tape.leaf(xv), w = tape.leaf(wv);
    tape.backward(matmul(x, w), r);
    const auto gx = tape.grad(x), gw = tape.grad(w);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t k = 0; k < 4; ++k) {
        double e = 0;
        for (std::size_t j = 0; j < 2; ++j) e += r[i * 2 + j] * wv[k * 2 + j];
        CHECK(gx[i * 4 + k] == doctest::Approx(e).epsilon(1e-14));
      }
    for (std::size_t k = 0; k < 4; ++k)
      for (std::size_t j = 0; j < 2; ++j) {
        double e = 0;
        for (std::size_t i = 0; i < 3; ++i) e += xv[i * 4 + k] * r[i * 2 + j];
        CHECK(gw[k * 2 + j] == doctest::Approx(e).epsilon(1e-14));
      }
  }
  SUBCASE("fan-out accumulates") {
    Tape<double> tape;
    const auto x = tape.leaf(Tensor<double>::of({2, 3}));
    tape.backward(mul(x, x), Tensor<double>::of({1, 1}));
    CHECK(tape.grad(x) == Tensor<double>::of({4, 6}));
  }
  SUBCASE("constants get no gradient and a tape is single-use") {
    Tape<double> tape;
    const auto x = tape.leaf(Tensor<double>::of({1})), c = tape.constant(Tensor<double>::of({5}));
    const auto y = mul(x, c);
    tape.backward(y, Tensor<double>::of({1}));
    CHECK(tape.grad(x)[0] == 5.0);
    CHECK_THROWS_AS(tape.backward(y, Tensor<double>::of({1})), ContractViolation);
  }
  SUBCASE("seed shape must match") {
    Tape<double> tape;
    const auto x = tape.leaf(Tensor<double>::of({1, 2}));
    CHECK_THROWS_AS(tape.backward(x, Tensor<double>::of({1})), ContractViolation);
  }
}

TEST_CASE("primitive gradchecks") {
  for (std::uint64_t seed : {0, 1, 2}) {
    const auto checks = gradcheck_primitives(seed);
    CHECK(checks.size() >= 30);
    for (const auto& g : checks) {
      INFO(g.name << " seed " << seed);
      CHECK(g.result.coordinates > 0);
      CHECK(g.result.max_rel_error <= 1e-6);
    }
  }
}

TEST_CASE("gradcheck catches a wrong derivative") {
  // relu's derivative applied to silu's forward: the check must notice.
  ad::TapeFn<double> broken = [](Tape<double>& t, std::span<const Var<double>> v) {
    const std::size_t id = v[0].id();
    return t.record("broken_silu", silu(v[0].value()), {v[0]}, [id](Tape<double>& tp, const Tensor<double>& g) {
      Tensor<double> d(g.shape());
      const auto& x = tp.value(id);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] = x[i] > 0 ? g[i] : 0.0;
      tp.accumulate(id, d);
    });
  };
  Rng rng(3);
  CHECK(ad::gradcheck(broken, {rng.normal_tensor<double>({3, 4})}, 0).max_rel_error > 1e-2);
}

TEST_CASE("mixer gradcheck") {
  CHECK(gradcheck_mixer(MixerConfig{6, 4, 8}, 0).max_rel_error <= 1e-4);
  CHECK(gradcheck_mixer(MixerConfig{9, 3, 5}, 1).max_rel_error <= 1e-4);
  CHECK(gradcheck_mixer(MixerConfig{4, 2, 6}, 2, {.layer_norm = false, .dwconv = false}).max_rel_error <= 1e-4);
}

TEST_CASE("saturated gate keeps finite gradients") {
  Rng rng(4);
  const MixerConfig cfg{6, 4, 8};
  const Grid grid = grid_for_tokens(cfg.tokens);
  auto p = init_mixer_params<double>(cfg, rng);
  const auto xv = rng.normal_tensor<double>({cfg.tokens, cfg.channels});

  for (auto& v : p.w_z.data()) v *= 1e4;
  Tape<double> tape;
  const auto q = leafify(tape, p);
  const auto out = hsm_ssd_layer(tape.constant(xv), q, grid);
  tape.backward(out.x_out, Tensor<double>::full(out.x_out.shape(), 1.0));
  CHECK(all_finite(tape.grad(q.w_out)));
  CHECK(all_finite(tape.grad(q.w_z)));
}

TEST_CASE("zero layer scale leaves the mixer branch differentiable") {
  // Fusion off: otherwise the stage hidden state reaches the logits directly.
  ModelConfig mc = tiny();
  mc.msf = false;
  Rng rng(5);
  auto w = init_model<double>(mc, rng);
  auto& blk = w.stages[0][0];
  blk.mixer.layer_scale = Tensor<double>::zeros(blk.mixer.layer_scale.shape());
  Tape<double> tape;
  const auto vw = leafify(tape, w);
  const auto img = rng.normal_tensor<double>({2, mc.height, mc.width, 3});
  const auto out = model_forward(tape.constant(img), vw, mc, {.training = true});
  const std::vector<int> labels{0, 1};
  tape.backward(cross_entropy(out.logits, labels), Tensor<double>::of({1}));
  const auto& m = vw.stages[0][0].mixer;
  // Parameters behind a zero scale get zero gradient; the scale itself does not.
  for (const Var<double>* v : {&m.w_bcd, &m.w_in, &m.w_out, &m.k_b}) {
    const auto g = tape.grad(*v);
    CHECK(all_finite(g));
    for (double x : g.data()) CHECK(x == 0.0);
  }
  const auto g_ls = tape.grad(m.layer_scale);
  CHECK(all_finite(g_ls));
  double mag = 0;
  for (double x : g_ls.data()) mag += std::abs(x);
  CHECK(mag > 0);
}

TEST_CASE("fusion head shift invariance") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) CHECK(fusion_shift_derivative(seed) <= 1e-8);
}

TEST_CASE("leafify mirrors the parameter set") {
  const ModelConfig mc = tiny();
  Rng rng(6);
  const auto w = init_model<float>(mc, rng);
  Tape<float> tape;
  const auto vw = leafify(tape, w);
  std::vector<std::string> a, b;
  for_each_param(w, [&](const std::string& n, const Tensor<float>&) { a.push_back(n); });
  for_each_param(vw, [&](const std::string& n, const Var<float>&) { b.push_back(n); });
  CHECK(a == b);
  std::size_t buffers = 0;
  for_each_buffer(vw, [&](const std::string&, const Tensor<float>&) { ++buffers; });
  CHECK(buffers > 0);
}

TEST_CASE("toy dataset") {
  const ModelConfig mc = mini_m1_config();
  const ToyDataset data(mc, 0);
  const auto labels = ToyDataset::balanced_labels(6, 2);
  CHECK(labels == std::vector<int>{0, 1, 0, 1, 0, 1});
  Rng rng(1);
  const auto x = data.images<float>(rng, labels);
  CHECK(x.shape() == Shape{6, 128, 128, 3});
  // The generator is linearly separable by construction.
  CHECK(data.oracle_accuracy(7, 200) >= 0.99);
  const ToyDataset hard(mc, 0, 0.0, 1.0);
  CHECK(hard.oracle_accuracy(7, 400) < 0.65);
  ModelConfig odd = mc;
  odd.height = 40;
  CHECK_THROWS_AS(ToyDataset(odd, 0), ContractViolation);
}

TEST_CASE("train_toy contracts") {
  const ModelConfig mc = tiny();
  SUBCASE("zero learning rate gives a constant loss") {
    const auto r = train_toy<double>(mc, {.steps = 4, .train_size = 4, .eval_size = 4, .lr = 0.0});
    REQUIRE(r.curve.size() == 4);
    for (const auto& s : r.curve) CHECK(s.loss == r.curve[0].loss);
  }
  SUBCASE("bit-reproducible per seed") {
    const TrainConfig tc{.steps = 3, .train_size = 4, .eval_size = 4, .lr = 0.05, .seed = 3};
    const auto a = train_toy<float>(mc, tc), b = train_toy<float>(mc, tc);
    for (std::size_t i = 0; i < a.curve.size(); ++i) CHECK(a.curve[i].loss == b.curve[i].loss);
    CHECK(a.final_accuracy == b.final_accuracy);
  }
  SUBCASE("fusion weights sum to one every step") {
    const auto r = train_toy<float>(mc, {.steps = 5, .train_size = 4, .eval_size = 4, .lr = 0.05});
    CHECK(r.max_beta_sum_error <= 1e-6);
    for (const auto& s : r.curve) CHECK(std::abs(s.beta_sum - 1.0) <= 1e-6);
  }
  SUBCASE("loss decreases with or without fusion") {
    for (bool msf : {true, false}) {
      const auto r = train_toy<float>(mc, {.steps = 20, .train_size = 8, .eval_size = 8, .lr = 0.05, .msf = msf});
      CHECK_FALSE(r.diverged);
      CHECK(r.curve.back().loss < r.curve.front().loss);
    }
  }
  SUBCASE("divergence is reported with its step") {
    const auto r = train_toy<float>(mc, {.steps = 50, .train_size = 4, .eval_size = 4, .lr = 1e12});
    CHECK(r.diverged);
    CHECK(r.diverged_step == r.curve.back().step);
    CHECK_FALSE(std::isfinite(r.curve.back().loss));
  }
  SUBCASE("bad arguments") {
    CHECK_THROWS_AS(train_toy<float>(mc, {.steps = 0}), ContractViolation);
    CHECK_THROWS_AS(train_toy<float>(mc, {.steps = 1, .lr = -1}), ContractViolation);
  }
}

TEST_CASE("verify suites") {
  CHECK_THROWS_AS(verify::run_suite("", 0), std::invalid_argument);
  CHECK_THROWS_AS(verify::run_suite("nope", 0), std::invalid_argument);
  std::set<std::string> names;
  for (const auto& line : verify::run_suite("invariants", 1)) {
    INFO(line.name << " = " << line.measured);
    CHECK(line.pass);
    names.insert(line.name);
  }
  CHECK(names.size() == 5);
  const auto prop = verify::run_suite("prop1", 2);
  REQUIRE(prop.size() == 1);
  CHECK(prop[0].pass);
}
