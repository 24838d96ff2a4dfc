#include <algorithm>
#include <cmath>
#include <map>

#include "doctest.h"
#include "evim/model.hpp"

using namespace evim;

namespace {

ModelConfig mini(std::size_t res = 32) {
  ModelConfig c;
  c.variant_name = "mini";
  c.blocks = {1, 1, 1};
  c.channels = {16, 24, 32};
  c.states = {4, 4, 1};
  c.height = c.width = res;
  c.num_classes = 3;
  return c;
}

template <class T>
void zero_layer_scales(ModelWeights<Tensor<T>>& w) {
  for (auto& stage : w.stages)
    for (auto& b : stage) {
      for (Tensor<T>* t : {&b.ls_dw1, &b.ls_dw2, &b.ls_ffn, &b.mixer.layer_scale}) *t = Tensor<T>::zeros(t->shape());
    }
}

// Randomizes BN statistics and layer scales so every branch matters.
template <class T>
void perturb(ModelWeights<Tensor<T>>& w, Rng& rng) {
  for_each_param(w, [&](const std::string& name, Tensor<T>& t) {
    if (name.find("layer_scale") != std::string::npos) t = rng.uniform_tensor<T>(t.shape(), 0.1, 0.5);
    if (name.find("bn.beta") != std::string::npos) t = rng.normal_tensor<T>(t.shape(), 0.1);
  });
  for_each_buffer(w, [&](const std::string& name, Tensor<T>& t) {
    t = name.find("var") != std::string::npos ? rng.uniform_tensor<T>(t.shape(), 0.5, 2.0)
                                              : rng.normal_tensor<T>(t.shape(), 0.1);
  });
}

Tensor<double> bn_ref(const Tensor<double>& x, const BatchNorm<Tensor<double>>& bn) {
  return batch_norm_infer(x, bn.running_mean, bn.running_var, bn.gamma, bn.beta);
}

}  // namespace

TEST_CASE("presets") {
  const auto m1 = ModelConfig::preset("M1");
  CHECK(m1.blocks == std::array<std::size_t, 3>{2, 2, 2});
  CHECK(m1.channels == std::array<std::size_t, 3>{128, 192, 320});
  CHECK(m1.states == std::array<std::size_t, 3>{49, 25, 9});
  CHECK(ModelConfig::preset("M2").channels == std::array<std::size_t, 3>{128, 256, 512});
  CHECK(ModelConfig::preset("M3").channels == std::array<std::size_t, 3>{224, 320, 512});
  const auto m4 = ModelConfig::preset("M4");
  CHECK(m4.blocks == std::array<std::size_t, 3>{3, 4, 2});
  CHECK(m4.states == std::array<std::size_t, 3>{64, 32, 16});
  CHECK(m4.height == 256);
  CHECK_THROWS_AS(ModelConfig::preset("M5"), ContractViolation);

  const auto g = m1.stage_grids();
  CHECK(g[0] == Grid{14, 14});
  CHECK(g[1] == Grid{7, 7});
  CHECK(g[2] == Grid{4, 4});
  const auto g4 = ModelConfig::preset("M4").stage_grids();
  CHECK(g4[0] == Grid{16, 16});
  CHECK(g4[2] == Grid{4, 4});
}

TEST_CASE("stem") {
  Rng rng(1);
  SUBCASE("toy input") {
    const auto cfg = mini(32);
    const auto w = init_model<float>(cfg, rng);
    CHECK(stem_forward(rng.normal_tensor<float>({32, 32, 3}), w.stem).shape() == Shape{2, 2, 16});
    CHECK_THROWS_AS(stem_forward(Tensor<float>({40, 32, 3}), w.stem), ContractViolation);
  }
  SUBCASE("M1 at 224 and M4 at 256") {
    const auto m1 = init_model<float>(ModelConfig::preset("M1"), rng);
    CHECK(stem_forward(rng.normal_tensor<float>({224, 224, 3}), m1.stem).shape() == Shape{14, 14, 128});
    auto m4 = ModelConfig::preset("M4");
    m4.blocks = {0, 0, 0};
    const auto w4 = init_model<float>(m4, rng);
    CHECK(stem_forward(rng.normal_tensor<float>({256, 256, 3}), w4.stem).shape() == Shape{16, 16, 224});
  }
}

TEST_CASE("block") {
  Rng rng(2);
  auto cfg = mini(64);  // stage 1 on a 4x4 grid
  cfg.channels = {8, 16, 16};
  cfg.states = {4, 4, 4};
  auto w = init_model<double>(cfg, rng);
  perturb(w, rng);
  const auto& blk = w.stages[0][0];
  const auto x = rng.normal_tensor<double>({4, 4, 8});

  SUBCASE("composition oracle") {
    auto step = add(x, mul_lastdim(bn_ref(dwconv3x3(x, blk.dw1.weight), blk.dw1.bn), blk.ls_dw1));
    const auto m = hsm_ssd_layer(step.reshape({16, 8}), blk.mixer, Grid{4, 4});
    step = add(step, mul_lastdim(m.x_out, blk.mixer.layer_scale).reshape({4, 4, 8}));
    step = add(step, mul_lastdim(bn_ref(dwconv3x3(step, blk.dw2.weight), blk.dw2.bn), blk.ls_dw2));
    const auto hid = relu(bn_ref(pwconv(step, blk.ffn1.weight, Tensor<double>::zeros({32})), blk.ffn1.bn));
    const auto ffn = bn_ref(pwconv(hid, blk.ffn2.weight, Tensor<double>::zeros({8})), blk.ffn2.bn);
    step = add(step, mul_lastdim(ffn, blk.ls_ffn));
    const auto [y, h] = block_forward(x, blk);
    CHECK(max_rel_diff(y, step) <= 1e-12);
    CHECK(max_rel_diff(h, m.h) <= 1e-12);
  }
  SUBCASE("zero layer scales make the block the identity") {
    zero_layer_scales(w);
    const auto [y, h] = block_forward(x, w.stages[0][0]);
    CHECK(y == x);
    CHECK(h.shape() == Shape{4, 8});
  }
}

TEST_CASE("downsample") {
  Rng rng(3);
  const auto w = init_model<float>(ModelConfig::preset("M1"), rng);
  CHECK(downsample_forward(rng.normal_tensor<float>({14, 14, 128}), w.down[0]).shape() == Shape{7, 7, 192});
  CHECK(downsample_forward(rng.normal_tensor<float>({7, 7, 192}), w.down[1]).shape() == Shape{4, 4, 320});

  auto cfg = mini();
  cfg.channels = {16, 16, 16};
  const auto same = init_model<float>(cfg, rng);
  CHECK(downsample_forward(rng.normal_tensor<float>({8, 8, 16}), same.down[0]).shape() == Shape{4, 4, 16});

  std::uint64_t numel = 0, analytic = 0;
  for_each_param(w, [&](const std::string& name, const Tensor<float>& t) {
    if (name.rfind("stage1.down.", 0) == 0) numel += t.size();
  });
  for (const auto& r : cost_breakdown(ModelConfig::preset("M1")))
    if (r.section == "down1") analytic += r.params;
  CHECK(numel == analytic);
}

TEST_CASE("analytic parameter count equals the constructed model") {
  Rng rng(4);
  for (const char* name : {"M1", "M2", "M3", "M4"}) {
    const auto cfg = ModelConfig::preset(name);
    const auto w = init_model<float>(cfg, rng);
    std::uint64_t numel = 0;
    for_each_param(w, [&](const std::string&, const Tensor<float>& t) { numel += t.size(); });
    CHECK(numel == count_params(cfg));
  }
  auto no_msf = mini();
  no_msf.msf = false;
  const auto w = init_model<float>(no_msf, rng);
  std::uint64_t numel = 0;
  for_each_param(w, [&](const std::string&, const Tensor<float>& t) { numel += t.size(); });
  CHECK(numel == count_params(no_msf));
}

TEST_CASE("weight names are unique and canonical") {
  Rng rng(5);
  const auto w = init_model<float>(ModelConfig::preset("M4"), rng);
  std::map<std::string, int> seen;
  for_each_param(w, [&](const std::string& name, const Tensor<float>&) { ++seen[name]; });
  for_each_buffer(w, [&](const std::string& name, const Tensor<float>&) { ++seen[name]; });
  for (const auto& [name, count] : seen) CHECK_MESSAGE(count == 1, name);
  CHECK(seen.count("stage2.block4.mixer.w_bcd") == 1);
  CHECK(seen.count("stage3.block2.ffn.fc2.bn.running_var") == 1);
  CHECK(seen.count("stem.conv1.weight") == 1);
  CHECK(seen.count("head.beta") == 1);
}

TEST_CASE("full M1 forward at 224") {
  Rng rng(6);
  const auto cfg = ModelConfig::preset("M1");
  const auto w = init_model<float>(cfg, rng);
  const auto img = rng.normal_tensor<float>({224, 224, 3});
  MacScope scope;
  const auto out = model_forward(img, w, cfg);
  CHECK(scope.count() == count_flops(cfg));
  CHECK(out.logits.shape() == Shape{1000});
  CHECK(out.hidden[0].h.shape() == Shape{49, 128});
  CHECK(out.hidden[1].h.shape() == Shape{25, 192});
  CHECK(out.hidden[2].h.shape() == Shape{9, 320});
  CHECK(out.feature.shape() == Shape{4, 4, 320});
}

TEST_CASE("fusion head") {
  Rng rng(7);
  auto cfg = mini();
  cfg.num_classes = 2;
  auto w = init_model<double>(cfg, rng);
  perturb(w, rng);
  const auto img = rng.normal_tensor<double>({32, 32, 3});

  SUBCASE("uniform beta averages the four heads") {
    const auto out = model_forward(img, w, cfg);
    for (std::size_t c = 0; c < 2; ++c) {
      double avg = 0;
      for (const auto& z : out.stage_logits) avg += z[c] / 4;
      CHECK(out.logits[c] == doctest::Approx(avg).epsilon(1e-14));
    }
  }
  SUBCASE("hand-computed convex combination") {
    w.head.beta = Tensor<double>::of({0.3, -1.2, 2.0, 0.1});
    const auto out = model_forward(img, w, cfg);
    double e[4], total = 0;
    for (int s = 0; s < 4; ++s) total += e[s] = std::exp(w.head.beta[s]);
    for (std::size_t c = 0; c < 2; ++c) {
      double z = 0, lo = 1e300, hi = -1e300;
      for (int s = 0; s < 4; ++s) {
        z += e[s] / total * out.stage_logits[s][c];
        lo = std::min(lo, out.stage_logits[s][c]);
        hi = std::max(hi, out.stage_logits[s][c]);
      }
      CHECK(std::abs(out.logits[c] - z) <= 1e-12);
      CHECK(out.logits[c] >= lo);
      CHECK(out.logits[c] <= hi);
    }
    const auto weights = fusion_weights(w.head);
    double sum = 0;
    for (auto v : weights.data()) sum += v;
    CHECK(std::abs(sum - 1) <= 1e-15);
  }
  SUBCASE("saturated beta selects one head") {
    for (std::size_t k = 0; k < 4; ++k) {
      w.head.beta = Tensor<double>::zeros({4});
      w.head.beta[k] = 800;
      const auto out = model_forward(img, w, cfg);
      for (std::size_t c = 0; c < 2; ++c) CHECK(out.logits[c] == doctest::Approx(out.stage_logits[k][c]));
    }
  }
  SUBCASE("per-stage logits come from mean hidden states") {
    const auto out = model_forward(img, w, cfg);
    const auto& head = w.head.heads[2];
    const auto pooled = mean_rows(out.hidden[1].h).reshape({1, 24});
    const auto z = add_lastdim(matmul(layer_norm(pooled, head.ln_gamma, head.ln_beta), head.weight), head.bias);
    CHECK(max_rel_diff(out.stage_logits[2], z.reshape({2})) <= 1e-14);
  }
}

TEST_CASE("single-class model") {
  Rng rng(8);
  auto cfg = mini();
  cfg.num_classes = 1;
  const auto w = init_model<double>(cfg, rng);
  const auto out = model_forward(rng.normal_tensor<double>({32, 32, 3}), w, cfg);
  CHECK(out.logits.shape() == Shape{1});
  const auto weights = fusion_weights(w.head);
  double sum = 0;
  for (auto v : weights.data()) sum += v;
  CHECK(sum == doctest::Approx(1.0));
}

TEST_CASE("zero layer scales leave only stem and downsamplers") {
  Rng rng(9);
  const auto cfg = mini(64);
  auto w = init_model<double>(cfg, rng);
  perturb(w, rng);
  zero_layer_scales(w);
  const auto img = rng.normal_tensor<double>({64, 64, 3});
  const auto out = model_forward(img, w, cfg);
  auto x = stem_forward(img, w.stem);
  x = downsample_forward(downsample_forward(x, w.down[0]), w.down[1]);
  CHECK(out.feature == x);
  for (std::size_t s = 0; s < 3; ++s) CHECK(out.hidden[s].h.shape() == Shape{cfg.states[s], cfg.channels[s]});
}

TEST_CASE("batch forward equals per-sample forward; determinism") {
  Rng rng(10);
  const auto cfg = mini();
  auto w = init_model<double>(cfg, rng);
  perturb(w, rng);
  const auto a = rng.normal_tensor<double>({32, 32, 3}), b = rng.normal_tensor<double>({32, 32, 3});
  Tensor<double> batch({2, 32, 32, 3});
  std::copy(a.data().begin(), a.data().end(), batch.data().begin());
  std::copy(b.data().begin(), b.data().end(), batch.data().begin() + a.size());
  const auto out = model_forward(batch, w, cfg);
  const auto ob = model_forward(b, w, cfg);
  CHECK(out.logits.shape() == Shape{2, 3});
  for (std::size_t c = 0; c < 3; ++c) CHECK(out.logits[3 + c] == doctest::Approx(ob.logits[c]).epsilon(1e-12));
  CHECK(model_forward(b, w, cfg).logits == ob.logits);
}

TEST_CASE("training-mode batch norm updates running statistics") {
  Rng rng(11);
  const auto cfg = mini();
  auto w = init_model<double>(cfg, rng);
  const auto img = rng.normal_tensor<double>({4, 32, 32, 3});
  const auto before = w.stem[0].bn.running_mean;
  const auto conv = conv3x3(img, w.stem[0].weight, 2);
  Tensor<double> mean, var;
  batch_norm_train(conv, w.stem[0].bn.gamma, w.stem[0].bn.beta, kBatchNormEps, &mean, &var);
  model_forward(img, w, cfg, ForwardContext{.training = true, .bn_momentum = 0.1});
  for (std::size_t i = 0; i < mean.size(); ++i) {
    CHECK(w.stem[0].bn.running_mean[i] == doctest::Approx(0.9 * before[i] + 0.1 * mean[i]));
    CHECK(w.stem[0].bn.running_var[i] == doctest::Approx(0.9 + 0.1 * var[i]));
  }
}

TEST_CASE("analytic counts") {
  SUBCASE("empty stages collapse to stem, downsamplers and head") {
    auto cfg = mini();
    cfg.blocks = {0, 0, 0};
    std::uint64_t expected = 0;
    for (const auto& r : cost_breakdown(cfg)) {
      CHECK((r.section == "stem" || r.section.rfind("down", 0) == 0 || r.section == "head"));
      expected += r.params;
    }
    CHECK(count_params(cfg) == expected);
    Rng rng(12);
    const auto w = init_model<double>(cfg, rng);
    MacScope scope;
    const auto out = model_forward(rng.normal_tensor<double>({32, 32, 3}), w, cfg);
    CHECK(scope.count() == count_flops(cfg));
    CHECK(out.logits.shape() == Shape{3});
  }
  SUBCASE("affine in resolution squared") {
    for (const char* name : {"M1", "M2", "M3", "M4"}) {
      auto cfg = ModelConfig::preset(name);
      const auto base = count_flops(cfg);
      cfg.height *= 2;
      cfg.width *= 2;
      CHECK(count_flops(cfg) < 4 * base);
    }
  }
}
