#pragma once

// The EfficientViM backbone: a 16x stem, three stages of blocks with
// downsampling between them, and a fusion head over per-stage hidden states.
//
// Feature maps are [..., H, W, C]; any leading axes are a batch. Weight
// structs are templated on the value type so one forward serves inference
// (Tensor<T>) and recording (ad::Var<T>).

#include <array>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "evim/mixer.hpp"

namespace evim {

struct ModelConfig {
  std::string variant_name = "custom";
  std::array<std::size_t, 3> blocks{2, 2, 2};
  std::array<std::size_t, 3> channels{128, 192, 320};
  std::array<std::size_t, 3> states{49, 25, 9};
  std::size_t height = 224;
  std::size_t width = 224;
  std::size_t num_classes = 1000;
  bool msf = true;  // fused head over stage hidden states; off = pooled head only

  /// "M1".."M4" at their reference resolutions (224 for M1-M3, 256 for M4).
  static ModelConfig preset(std::string_view name);
  void validate() const;
  /// Token grid of each stage: stem output (H/16, W/16), then ceil-halved.
  std::array<Grid, 3> stage_grids() const;
  std::array<std::size_t, 4> stem_channels() const;
  /// Hidden width of the downsampler leaving stage s (0 or 1).
  std::size_t downsample_hidden(std::size_t s) const { return 4 * channels[s + 1]; }
};

inline constexpr std::size_t kFfnExpansion = 4;
inline constexpr std::size_t kSeReduction = 4;
inline constexpr double kLayerScaleInit = 1e-5;

template <class X>
struct BatchNorm {
  X gamma, beta;
  // Buffers, not parameters. Training-mode forwards update them in place.
  mutable Tensor<scalar_of_t<X>> running_mean, running_var;
};

/// A bias-free convolution followed by batch norm. The weight's shape selects
/// the kind: [3,3,Cin,Cout] dense, [3,3,C] depthwise, [Cin,Cout] pointwise.
template <class X>
struct ConvBN {
  X weight;
  BatchNorm<X> bn;
};

template <class X>
struct BlockWeights {
  ConvBN<X> dw1;
  MixerParams<X> mixer;
  ConvBN<X> dw2;
  ConvBN<X> ffn1, ffn2;
  X ls_dw1, ls_dw2, ls_ffn;  // the mixer's scale lives in mixer.layer_scale
};

template <class X>
struct DownsampleWeights {
  ConvBN<X> expand, dw, project;
  X se_w1, se_b1, se_w2, se_b2;
};

template <class X>
struct Classifier {
  X ln_gamma, ln_beta, weight, bias;
};

template <class X>
struct FusionHead {
  /// heads[0] reads the pooled final feature map; heads[s] stage s's hidden
  /// state. Without fusion only heads[0] is populated.
  std::array<Classifier<X>, 4> heads;
  X beta;  // [4], empty without fusion
};

template <class X>
struct ModelWeights {
  std::array<ConvBN<X>, 4> stem;
  std::array<std::vector<BlockWeights<X>>, 3> stages;
  std::array<DownsampleWeights<X>, 2> down;
  FusionHead<X> head;
};

template <class X>
struct StageHidden {
  X h;  // [..., N_s, D_s] from the last block of the stage
};

template <class X>
struct ModelOutput {
  X logits;  // [..., c]
  std::array<StageHidden<X>, 3> hidden;
  std::array<X, 4> stage_logits;  // z^(0..3); only [0] without fusion
  X feature;                      // final feature map [..., H3, W3, D3]
};

struct ForwardContext {
  bool training = false;  // batch statistics and running-average updates
  double bn_momentum = 0.1;
};

// Parameter and buffer traversal in a fixed order with canonical names.
template <class X, class F>
void for_each_param(ModelWeights<X>& w, F&& f);
template <class X, class F>
void for_each_param(const ModelWeights<X>& w, F&& f);
/// Visits BN running statistics (name, Tensor<S>&).
template <class X, class F>
void for_each_buffer(const ModelWeights<X>& w, F&& f);

template <class T>
ModelWeights<Tensor<T>> init_model(const ModelConfig& cfg, Rng& rng);

template <class X>
X stem_forward(const X& img, const std::array<ConvBN<X>, 4>& stem, const ForwardContext& ctx = {});
template <class X>
std::array<X, 2> block_forward(const X& x, const BlockWeights<X>& w, const ForwardContext& ctx = {});
template <class X>
X downsample_forward(const X& x, const DownsampleWeights<X>& w, const ForwardContext& ctx = {});
/// Softmax(β)-weighted sum of the per-stage logits. Also returns the four
/// logit vectors z^(0..3).
template <class X>
std::pair<X, std::array<X, 4>> msf_fuse(const std::array<StageHidden<X>, 3>& hidden, const X& feature,
                                        const FusionHead<X>& head);
template <class X>
ModelOutput<X> model_forward(const X& img, const ModelWeights<X>& w, const ModelConfig& cfg,
                             const ForwardContext& ctx = {});

/// Softmax of the fusion weights β.
template <class T>
Tensor<T> fusion_weights(const FusionHead<Tensor<T>>& head) {
  return softmax(head.beta);
}

// Analytic counts --------------------------------------------------------------

struct CostEntry {
  std::string section;  // stem, stage1..3, down1, down2, head
  std::string name;     // sublayer within the section
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
};

/// Walks the architecture in forward order. MACs follow the tensor-core
/// convention: convolutions, matmuls and the discretization map.
std::vector<CostEntry> cost_breakdown(const ModelConfig& cfg);
std::uint64_t count_params(const ModelConfig& cfg);
std::uint64_t count_flops(const ModelConfig& cfg);

// for_each_param / for_each_buffer ------------------------------------------------

namespace detail {

inline std::string block_prefix(std::size_t stage, std::size_t block) {
  return "stage" + std::to_string(stage + 1) + ".block" + std::to_string(block + 1) + ".";
}

template <class C, class F>
void visit_conv_bn(const std::string& prefix, C& c, F& f) {
  f(prefix + "weight", c.weight);
  f(prefix + "bn.gamma", c.bn.gamma);
  f(prefix + "bn.beta", c.bn.beta);
}

template <class W, class F>
void visit_model(W& w, F& f) {
  auto visit = [&](const std::string& name, auto& t) {
    if (!t.empty()) f(name, t);
  };
  for (std::size_t i = 0; i < 4; ++i) visit_conv_bn("stem.conv" + std::to_string(i + 1) + ".", w.stem[i], visit);
  for (std::size_t s = 0; s < 3; ++s) {
    for (std::size_t b = 0; b < w.stages[s].size(); ++b) {
      auto& blk = w.stages[s][b];
      const std::string p = block_prefix(s, b);
      visit_conv_bn(p + "dw1.", blk.dw1, visit);
      visit(p + "dw1.layer_scale", blk.ls_dw1);
      for_each_param(blk.mixer, [&](const char* name, auto& t) { visit(p + "mixer." + name, t); });
      visit_conv_bn(p + "dw2.", blk.dw2, visit);
      visit(p + "dw2.layer_scale", blk.ls_dw2);
      visit_conv_bn(p + "ffn.fc1.", blk.ffn1, visit);
      visit_conv_bn(p + "ffn.fc2.", blk.ffn2, visit);
      visit(p + "ffn.layer_scale", blk.ls_ffn);
    }
    if (s < 2) {
      auto& d = w.down[s];
      const std::string p = "stage" + std::to_string(s + 1) + ".down.";
      visit_conv_bn(p + "expand.", d.expand, visit);
      visit_conv_bn(p + "dw.", d.dw, visit);
      visit(p + "se.w1", d.se_w1);
      visit(p + "se.b1", d.se_b1);
      visit(p + "se.w2", d.se_w2);
      visit(p + "se.b2", d.se_b2);
      visit_conv_bn(p + "project.", d.project, visit);
    }
  }
  for (std::size_t s = 0; s < 4; ++s) {
    auto& c = w.head.heads[s];
    const std::string p = "head.z" + std::to_string(s) + ".";
    visit(p + "ln_gamma", c.ln_gamma);
    visit(p + "ln_beta", c.ln_beta);
    visit(p + "weight", c.weight);
    visit(p + "bias", c.bias);
  }
  visit("head.beta", w.head.beta);
}

}  // namespace detail

template <class X, class F>
void for_each_param(ModelWeights<X>& w, F&& f) {
  detail::visit_model(w, f);
}

template <class X, class F>
void for_each_param(const ModelWeights<X>& w, F&& f) {
  detail::visit_model(w, f);
}

template <class X, class F>
void for_each_buffer(const ModelWeights<X>& w, F&& f) {
  auto bn = [&](const std::string& prefix, const ConvBN<X>& c) {
    f(prefix + "bn.running_mean", c.bn.running_mean);
    f(prefix + "bn.running_var", c.bn.running_var);
  };
  for (std::size_t i = 0; i < 4; ++i) bn("stem.conv" + std::to_string(i + 1) + ".", w.stem[i]);
  for (std::size_t s = 0; s < 3; ++s) {
    for (std::size_t b = 0; b < w.stages[s].size(); ++b) {
      const auto& blk = w.stages[s][b];
      const std::string p = detail::block_prefix(s, b);
      bn(p + "dw1.", blk.dw1);
      bn(p + "dw2.", blk.dw2);
      bn(p + "ffn.fc1.", blk.ffn1);
      bn(p + "ffn.fc2.", blk.ffn2);
    }
    if (s < 2) {
      const std::string p = "stage" + std::to_string(s + 1) + ".down.";
      bn(p + "expand.", w.down[s].expand);
      bn(p + "dw.", w.down[s].dw);
      bn(p + "project.", w.down[s].project);
    }
  }
}

}  // namespace evim
