#include "evim/model.hpp"

#include <cmath>
#include <string>

namespace evim {

namespace {

[[noreturn]] void fail(const std::string& op, const std::string& detail) {
  throw ContractViolation(op + ": " + detail);
}

std::size_t half_up(std::size_t n) { return (n + 1) / 2; }

Shape replace_tail(const Shape& s, std::size_t drop, std::initializer_list<std::size_t> tail) {
  Shape out(s.begin(), s.end() - static_cast<std::ptrdiff_t>(drop));
  out.insert(out.end(), tail);
  return out;
}

template <class X>
X apply_bn(const X& x, const BatchNorm<X>& bn, const ForwardContext& ctx) {
  using S = scalar_of_t<X>;
  if (!ctx.training) return batch_norm_infer(x, bn.running_mean, bn.running_var, bn.gamma, bn.beta);
  Tensor<S> mean, var;
  X y = batch_norm_train(x, bn.gamma, bn.beta, kBatchNormEps, &mean, &var);
  const S m = static_cast<S>(ctx.bn_momentum);
  for (std::size_t i = 0; i < mean.size(); ++i) {
    bn.running_mean[i] = (S(1) - m) * bn.running_mean[i] + m * mean[i];
    bn.running_var[i] = (S(1) - m) * bn.running_var[i] + m * var[i];
  }
  return y;
}

template <class X>
X conv_bn(const X& x, const ConvBN<X>& c, const ForwardContext& ctx, int stride = 1) {
  X y;
  switch (c.weight.rank()) {
    case 4:
      y = conv3x3(x, c.weight, stride);
      break;
    case 3:
      y = dwconv3x3(x, c.weight, stride);
      break;
    default:
      y = matmul(x, c.weight);
  }
  return apply_bn(y, c.bn, ctx);
}

template <class X>
X residual(const X& x, const X& branch, const X& layer_scale) {
  return add(x, mul_lastdim(branch, layer_scale));
}

template <class X>
X classify(const X& pooled, const Classifier<X>& c) {
  // pooled: [..., D] -> [..., 1, D] so the projection sees a matrix.
  Shape row = pooled.shape();
  row.insert(row.end() - 1, 1);
  const X z = add_lastdim(matmul(layer_norm(reshape(pooled, row), c.ln_gamma, c.ln_beta), c.weight), c.bias);
  return reshape(z, replace_tail(pooled.shape(), 1, {c.weight.dim(1)}));
}

template <class X>
X tokens_of(const X& x) {
  const Shape& s = x.shape();
  return reshape(x, replace_tail(s, 3, {s[s.size() - 3] * s[s.size() - 2], s.back()}));
}

template <class T>
BatchNorm<Tensor<T>> init_bn(std::size_t c) {
  return {Tensor<T>::full({c}, T(1)), Tensor<T>::zeros({c}), Tensor<T>::zeros({c}), Tensor<T>::full({c}, T(1))};
}

template <class T>
ConvBN<Tensor<T>> init_conv(Shape shape, std::size_t fan_in, Rng& rng) {
  const std::size_t out = shape.back();
  return {rng.normal_tensor<T>(std::move(shape), std::sqrt(2.0 / static_cast<double>(fan_in))), init_bn<T>(out)};
}

template <class T>
Classifier<Tensor<T>> init_classifier(std::size_t d, std::size_t classes, Rng& rng) {
  return {Tensor<T>::full({d}, T(1)), Tensor<T>::zeros({d}),
          rng.normal_tensor<T>({d, classes}, 1.0 / std::sqrt(static_cast<double>(d))), Tensor<T>::zeros({classes})};
}

}  // namespace

// Configuration ------------------------------------------------------------------

ModelConfig ModelConfig::preset(std::string_view name) {
  ModelConfig c;
  c.variant_name = std::string(name);
  if (name == "M1") {
    c.channels = {128, 192, 320};
  } else if (name == "M2") {
    c.channels = {128, 256, 512};
  } else if (name == "M3") {
    c.channels = {224, 320, 512};
  } else if (name == "M4") {
    c.blocks = {3, 4, 2};
    c.channels = {224, 320, 512};
    c.states = {64, 32, 16};
    c.height = c.width = 256;
  } else {
    fail("ModelConfig::preset", "unknown variant '" + std::string(name) + "' (expected M1..M4)");
  }
  return c;
}

void ModelConfig::validate() const {
  if (height == 0 || width == 0 || height % 16 != 0 || width % 16 != 0)
    fail("ModelConfig", "resolution " + std::to_string(height) + "x" + std::to_string(width) +
                            " must be a positive multiple of 16");
  for (std::size_t s = 0; s < 3; ++s) {
    if (channels[s] < 1 || states[s] < 1) fail("ModelConfig", "channels and states must be >= 1");
  }
  if (channels[0] % 8 != 0) fail("ModelConfig", "first-stage width must be divisible by 8 for the stem schedule");
  if (num_classes < 1) fail("ModelConfig", "num_classes must be >= 1");
}

std::array<Grid, 3> ModelConfig::stage_grids() const {
  std::array<Grid, 3> g;
  g[0] = {height / 16, width / 16};
  for (std::size_t s = 1; s < 3; ++s) g[s] = {half_up(g[s - 1].height), half_up(g[s - 1].width)};
  return g;
}

std::array<std::size_t, 4> ModelConfig::stem_channels() const {
  const std::size_t d = channels[0];
  return {d / 8, d / 4, d / 2, d};
}

// Initialization -------------------------------------------------------------------

template <class T>
ModelWeights<Tensor<T>> init_model(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  ModelWeights<Tensor<T>> w;
  const auto grids = cfg.stage_grids();
  std::size_t cin = 3;
  const auto stem = cfg.stem_channels();
  for (std::size_t i = 0; i < 4; ++i) {
    w.stem[i] = init_conv<T>({3, 3, cin, stem[i]}, 9 * cin, rng);
    cin = stem[i];
  }
  for (std::size_t s = 0; s < 3; ++s) {
    const std::size_t d = cfg.channels[s], hid = kFfnExpansion * d;
    const auto scale = Tensor<T>::full({d}, T(kLayerScaleInit));
    for (std::size_t b = 0; b < cfg.blocks[s]; ++b) {
      BlockWeights<Tensor<T>> blk;
      blk.dw1 = init_conv<T>({3, 3, d}, 9, rng);
      blk.mixer = init_mixer_params<T>(MixerConfig{grids[s].tokens(), cfg.states[s], d}, rng);
      blk.dw2 = init_conv<T>({3, 3, d}, 9, rng);
      blk.ffn1 = init_conv<T>({d, hid}, d, rng);
      blk.ffn2 = init_conv<T>({hid, d}, hid, rng);
      blk.ls_dw1 = blk.ls_dw2 = blk.ls_ffn = scale;
      w.stages[s].push_back(std::move(blk));
    }
    if (s < 2) {
      const std::size_t out = cfg.channels[s + 1], h = cfg.downsample_hidden(s), r = h / kSeReduction;
      auto& dn = w.down[s];
      dn.expand = init_conv<T>({d, h}, d, rng);
      dn.dw = init_conv<T>({3, 3, h}, 9, rng);
      dn.se_w1 = rng.normal_tensor<T>({h, r}, std::sqrt(2.0 / static_cast<double>(h)));
      dn.se_b1 = Tensor<T>::zeros({r});
      dn.se_w2 = rng.normal_tensor<T>({r, h}, 1.0 / std::sqrt(static_cast<double>(r)));
      dn.se_b2 = Tensor<T>::zeros({h});
      dn.project = init_conv<T>({h, out}, h, rng);
    }
  }
  w.head.heads[0] = init_classifier<T>(cfg.channels[2], cfg.num_classes, rng);
  if (cfg.msf) {
    for (std::size_t s = 0; s < 3; ++s) w.head.heads[s + 1] = init_classifier<T>(cfg.channels[s], cfg.num_classes, rng);
    w.head.beta = Tensor<T>::zeros({4});
  }
  return w;
}

// Forward ---------------------------------------------------------------------------

template <class X>
X stem_forward(const X& img, const std::array<ConvBN<X>, 4>& stem, const ForwardContext& ctx) {
  if (img.rank() < 3 || img.dim(-1) != 3)
    fail("stem_forward", "expected an [..., H, W, 3] image, got " + to_string(img.shape()));
  if (img.dim(-3) % 16 != 0 || img.dim(-2) % 16 != 0)
    fail("stem_forward", "image extents " + to_string(img.shape()) + " must be divisible by 16");
  X x = img;
  for (const auto& c : stem) x = relu(conv_bn(x, c, ctx, 2));
  return x;
}

template <class X>
std::array<X, 2> block_forward(const X& x_in, const BlockWeights<X>& w, const ForwardContext& ctx) {
  const Shape map_shape = x_in.shape();
  const Grid grid{x_in.dim(-3), x_in.dim(-2)};
  X x = residual(x_in, conv_bn(x_in, w.dw1, ctx), w.ls_dw1);
  X tokens = tokens_of(x);
  const MixerOutput<X> m = hsm_ssd_layer(tokens, w.mixer, grid);
  tokens = residual(tokens, m.x_out, w.mixer.layer_scale);
  x = reshape(tokens, map_shape);
  x = residual(x, conv_bn(x, w.dw2, ctx), w.ls_dw2);
  const X ffn = conv_bn(relu(conv_bn(x, w.ffn1, ctx)), w.ffn2, ctx);
  return {residual(x, ffn, w.ls_ffn), m.h};
}

template <class X>
X downsample_forward(const X& x, const DownsampleWeights<X>& w, const ForwardContext& ctx) {
  if (x.rank() < 3) fail("downsample_forward", "expected an [..., H, W, C] map, got " + to_string(x.shape()));
  const X e = conv_bn(relu(conv_bn(x, w.expand, ctx)), w.dw, ctx, 2);
  const X tokens = tokens_of(e);
  Shape row = tokens.shape();
  row[row.size() - 2] = 1;
  const X pooled = reshape(mean_rows(tokens), row);
  const X squeeze = relu(add_lastdim(matmul(pooled, w.se_w1), w.se_b1));
  const X gate = sigmoid(add_lastdim(matmul(squeeze, w.se_w2), w.se_b2));
  const Shape gate_shape(row.begin(), row.end() - 2);
  Shape flat_gate = gate_shape;
  flat_gate.push_back(gate.dim(-1));
  const X excited = reshape(mul_rows(tokens, reshape(gate, flat_gate)), e.shape());
  return conv_bn(excited, w.project, ctx);
}

template <class X>
std::pair<X, std::array<X, 4>> msf_fuse(const std::array<StageHidden<X>, 3>& hidden, const X& feature,
                                        const FusionHead<X>& head) {
  std::array<X, 4> z;
  z[0] = classify(mean_rows(tokens_of(feature)), head.heads[0]);
  for (std::size_t s = 0; s < 3; ++s) z[s + 1] = classify(mean_rows(hidden[s].h), head.heads[s + 1]);
  X fused = weighted_sum(std::vector<X>(z.begin(), z.end()), softmax(head.beta));
  return {std::move(fused), std::move(z)};
}

template <class X>
ModelOutput<X> model_forward(const X& img, const ModelWeights<X>& w, const ModelConfig& cfg,
                             const ForwardContext& ctx) {
  cfg.validate();
  ModelOutput<X> out;
  if (img.rank() < 3 || img.dim(-3) != cfg.height || img.dim(-2) != cfg.width)
    fail("model_forward", "image " + to_string(img.shape()) + " does not match configured resolution " +
                              std::to_string(cfg.height) + "x" + std::to_string(cfg.width));
  X x = stem_forward(img, w.stem, ctx);
  for (std::size_t s = 0; s < 3; ++s) {
    if (w.stages[s].size() != cfg.blocks[s]) fail("model_forward", "block count does not match the config");
    if (w.stages[s].empty()) {
      // Empty stage: the hidden state is undefined, report zeros.
      Shape hs(x.shape().begin(), x.shape().end() - 3);
      hs.insert(hs.end(), {cfg.states[s], cfg.channels[s]});
      if constexpr (is_tensor_v<X>) {
        out.hidden[s].h = X::zeros(hs);
      } else {
        out.hidden[s].h = img.tape()->constant(Tensor<scalar_of_t<X>>::zeros(hs));
      }
    }
    for (const auto& blk : w.stages[s]) {
      auto [y, h] = block_forward(x, blk, ctx);
      x = std::move(y);
      out.hidden[s].h = std::move(h);
    }
    if (s < 2) x = downsample_forward(x, w.down[s], ctx);
  }
  if (cfg.msf) {
    auto [fused, z] = msf_fuse(out.hidden, x, w.head);
    out.logits = std::move(fused);
    out.stage_logits = std::move(z);
  } else {
    out.stage_logits[0] = classify(mean_rows(tokens_of(x)), w.head.heads[0]);
    out.logits = out.stage_logits[0];
  }
  out.feature = std::move(x);
  return out;
}

// Analytic counts ---------------------------------------------------------------------

std::vector<CostEntry> cost_breakdown(const ModelConfig& cfg) {
  cfg.validate();
  std::vector<CostEntry> rows;
  const auto grids = cfg.stage_grids();
  auto bn = [](std::uint64_t c) { return 2 * c; };

  std::uint64_t h = cfg.height, wd = cfg.width, cin = 3;
  const auto stem = cfg.stem_channels();
  for (std::size_t i = 0; i < 4; ++i) {
    h = half_up(h), wd = half_up(wd);
    const std::uint64_t c = stem[i];
    rows.push_back({"stem", "conv" + std::to_string(i + 1), 9 * cin * c + bn(c), h * wd * 9 * cin * c});
    cin = c;
  }
  for (std::size_t s = 0; s < 3; ++s) {
    const std::string section = "stage" + std::to_string(s + 1);
    const std::uint64_t d = cfg.channels[s], l = grids[s].tokens(), hid = kFfnExpansion * d;
    const MixerConfig mc{grids[s].tokens(), cfg.states[s], cfg.channels[s]};
    for (std::size_t b = 0; b < cfg.blocks[s]; ++b) {
      const std::string blk = "block" + std::to_string(b + 1) + ".";
      rows.push_back({section, blk + "dw1", 9 * d + bn(d) + d, 9 * l * d});
      rows.push_back({section, blk + "mixer", mixer_param_count(mc), flops_of_mixer(mc)});
      rows.push_back({section, blk + "dw2", 9 * d + bn(d) + d, 9 * l * d});
      rows.push_back({section, blk + "ffn", 2 * d * hid + bn(hid) + bn(d) + d, 2 * l * d * hid});
    }
    if (s < 2) {
      const std::uint64_t out = cfg.channels[s + 1], e = cfg.downsample_hidden(s), r = e / kSeReduction;
      const std::uint64_t l_out = grids[s + 1].tokens();
      const std::string down = "down" + std::to_string(s + 1);
      rows.push_back({down, "expand", d * e + bn(e), l * d * e});
      rows.push_back({down, "dw", 9 * e + bn(e), 9 * l_out * e});
      rows.push_back({down, "se", e * r + r + r * e + e, 2 * e * r});
      rows.push_back({down, "project", e * out + bn(out), l_out * e * out});
    }
  }
  const std::uint64_t c = cfg.num_classes;
  auto classifier = [&](std::uint64_t d) { return bn(d) + d * c + c; };
  rows.push_back({"head", "z0", classifier(cfg.channels[2]), cfg.channels[2] * c});
  if (cfg.msf) {
    for (std::size_t s = 0; s < 3; ++s)
      rows.push_back({"head", "z" + std::to_string(s + 1), classifier(cfg.channels[s]), cfg.channels[s] * c});
    rows.push_back({"head", "beta", 4, 0});
  }
  return rows;
}

std::uint64_t count_params(const ModelConfig& cfg) {
  std::uint64_t total = 0;
  for (const auto& r : cost_breakdown(cfg)) total += r.params;
  return total;
}

std::uint64_t count_flops(const ModelConfig& cfg) {
  std::uint64_t total = 0;
  for (const auto& r : cost_breakdown(cfg)) total += r.macs;
  return total;
}

// Instantiation ----------------------------------------------------------------------

#define EVIM_INSTANTIATE_MODEL(X)                                                                            \
  template X stem_forward(const X&, const std::array<ConvBN<X>, 4>&, const ForwardContext&);                \
  template std::array<X, 2> block_forward(const X&, const BlockWeights<X>&, const ForwardContext&);         \
  template X downsample_forward(const X&, const DownsampleWeights<X>&, const ForwardContext&);              \
  template std::pair<X, std::array<X, 4>> msf_fuse(const std::array<StageHidden<X>, 3>&, const X&,          \
                                                   const FusionHead<X>&);                                   \
  template ModelOutput<X> model_forward(const X&, const ModelWeights<X>&, const ModelConfig&,               \
                                        const ForwardContext&);

EVIM_INSTANTIATE_MODEL(Tensor<float>)
EVIM_INSTANTIATE_MODEL(Tensor<double>)
EVIM_INSTANTIATE_MODEL(ad::Var<float>)
EVIM_INSTANTIATE_MODEL(ad::Var<double>)

template ModelWeights<Tensor<float>> init_model(const ModelConfig&, Rng&);
template ModelWeights<Tensor<double>> init_model(const ModelConfig&, Rng&);

}  // namespace evim
