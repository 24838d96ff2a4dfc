#include "evim/train.hpp"

#include <cmath>
#include <functional>
#include <limits>

namespace evim {

namespace {

using ad::Tape;
using ad::Var;
using VarD = Var<double>;
using Inputs = std::span<const VarD>;

template <class T>
Var<T> leaf_or_empty(Tape<T>& tape, const Tensor<T>& t) {
  return t.empty() ? Var<T>() : tape.leaf(t);
}

template <class T>
ConvBN<Var<T>> leafify_conv(Tape<T>& tape, const ConvBN<Tensor<T>>& c) {
  return {tape.leaf(c.weight),
          {tape.leaf(c.bn.gamma), tape.leaf(c.bn.beta), c.bn.running_mean, c.bn.running_var}};
}

template <class T>
Classifier<Var<T>> leafify_classifier(Tape<T>& tape, const Classifier<Tensor<T>>& c) {
  return {leaf_or_empty(tape, c.ln_gamma), leaf_or_empty(tape, c.ln_beta), leaf_or_empty(tape, c.weight),
          leaf_or_empty(tape, c.bias)};
}

// Pushes values away from the kink of relu so central differences stay exact.
Tensor<double> away_from_zero(Tensor<double> x) {
  for (auto& v : x.data()) v += v >= 0 ? 0.1 : -0.1;
  return x;
}

}  // namespace

template <class T>
MixerParams<Var<T>> leafify(Tape<T>& tape, const MixerParams<Tensor<T>>& p) {
  MixerParams<Var<T>> v;
  v.w_bcd = leaf_or_empty(tape, p.w_bcd);
  v.dt_bias = leaf_or_empty(tape, p.dt_bias);
  v.log_a = leaf_or_empty(tape, p.log_a);
  v.k_b = leaf_or_empty(tape, p.k_b);
  v.k_c = leaf_or_empty(tape, p.k_c);
  v.w_in = leaf_or_empty(tape, p.w_in);
  v.w_z = leaf_or_empty(tape, p.w_z);
  v.w_out = leaf_or_empty(tape, p.w_out);
  v.ln_gamma = leaf_or_empty(tape, p.ln_gamma);
  v.ln_beta = leaf_or_empty(tape, p.ln_beta);
  v.layer_scale = leaf_or_empty(tape, p.layer_scale);
  v.k_x = leaf_or_empty(tape, p.k_x);
  return v;
}

template <class T>
ModelWeights<Var<T>> leafify(Tape<T>& tape, const ModelWeights<Tensor<T>>& w) {
  ModelWeights<Var<T>> v;
  for (std::size_t i = 0; i < 4; ++i) v.stem[i] = leafify_conv(tape, w.stem[i]);
  for (std::size_t s = 0; s < 3; ++s) {
    for (const auto& b : w.stages[s]) {
      BlockWeights<Var<T>> vb;
      vb.dw1 = leafify_conv(tape, b.dw1);
      vb.mixer = leafify(tape, b.mixer);
      vb.dw2 = leafify_conv(tape, b.dw2);
      vb.ffn1 = leafify_conv(tape, b.ffn1);
      vb.ffn2 = leafify_conv(tape, b.ffn2);
      vb.ls_dw1 = tape.leaf(b.ls_dw1);
      vb.ls_dw2 = tape.leaf(b.ls_dw2);
      vb.ls_ffn = tape.leaf(b.ls_ffn);
      v.stages[s].push_back(std::move(vb));
    }
    if (s < 2) {
      const auto& d = w.down[s];
      auto& vd = v.down[s];
      vd.expand = leafify_conv(tape, d.expand);
      vd.dw = leafify_conv(tape, d.dw);
      vd.project = leafify_conv(tape, d.project);
      vd.se_w1 = tape.leaf(d.se_w1);
      vd.se_b1 = tape.leaf(d.se_b1);
      vd.se_w2 = tape.leaf(d.se_w2);
      vd.se_b2 = tape.leaf(d.se_b2);
    }
  }
  for (std::size_t s = 0; s < 4; ++s) v.head.heads[s] = leafify_classifier(tape, w.head.heads[s]);
  v.head.beta = leaf_or_empty(tape, w.head.beta);
  return v;
}

// Gradient checks -------------------------------------------------------------------

std::vector<NamedGradcheck> gradcheck_primitives(std::uint64_t seed) {
  Rng rng(seed);
  auto n = [&](Shape s, double sd = 1.0) { return rng.normal_tensor<double>(std::move(s), sd); };
  struct Case {
    const char* name;
    ad::TapeFn<double> f;
    std::vector<Tensor<double>> inputs;
  };
  static const int labels[] = {2, 0, 1};
  std::vector<Case> cases = {
      {"matmul", [](Tape<double>&, Inputs v) { return matmul(v[0], v[1]); }, {n({3, 4}), n({4, 2})}},
      {"matmul_shared_weight", [](Tape<double>&, Inputs v) { return matmul(v[0], v[1]); },
       {n({2, 3, 4}), n({4, 2})}},
      {"matmul_batched", [](Tape<double>&, Inputs v) { return matmul(v[0], v[1]); }, {n({2, 3, 4}), n({2, 4, 2})}},
      {"matmul_tn", [](Tape<double>&, Inputs v) { return matmul_tn(v[0], v[1]); }, {n({5, 3}), n({5, 4})}},
      {"matmul_nt", [](Tape<double>&, Inputs v) { return matmul_nt(v[0], v[1]); }, {n({3, 4}), n({5, 4})}},
      {"add", [](Tape<double>&, Inputs v) { return add(v[0], v[1]); }, {n({3, 4}), n({3, 4})}},
      {"sub", [](Tape<double>&, Inputs v) { return sub(v[0], v[1]); }, {n({3, 4}), n({3, 4})}},
      {"mul", [](Tape<double>&, Inputs v) { return mul(v[0], v[1]); }, {n({3, 4}), n({3, 4})}},
      {"scale", [](Tape<double>&, Inputs v) { return scale(v[0], 1.7); }, {n({3, 4})}},
      {"add_lastdim", [](Tape<double>&, Inputs v) { return add_lastdim(v[0], v[1]); }, {n({2, 3, 4}), n({4})}},
      {"mul_lastdim", [](Tape<double>&, Inputs v) { return mul_lastdim(v[0], v[1]); }, {n({2, 3, 4}), n({4})}},
      {"mul_rows", [](Tape<double>&, Inputs v) { return mul_rows(v[0], v[1]); }, {n({2, 3, 4}), n({2, 4})}},
      {"relu", [](Tape<double>&, Inputs v) { return relu(v[0]); }, {away_from_zero(n({3, 4}))}},
      {"sigmoid", [](Tape<double>&, Inputs v) { return sigmoid(v[0]); }, {n({3, 4}, 2.0)}},
      {"silu", [](Tape<double>&, Inputs v) { return silu(v[0]); }, {n({3, 4}, 2.0)}},
      {"softplus", [](Tape<double>&, Inputs v) { return softplus(v[0]); }, {n({3, 4}, 2.0)}},
      {"softmax", [](Tape<double>&, Inputs v) { return softmax(v[0]); }, {n({3, 5}, 2.0)}},
      {"dwconv3x3", [](Tape<double>&, Inputs v) { return dwconv3x3(v[0], v[1], 1); }, {n({4, 5, 2}), n({3, 3, 2})}},
      {"dwconv3x3_stride2", [](Tape<double>&, Inputs v) { return dwconv3x3(v[0], v[1], 2); },
       {n({5, 4, 2}), n({3, 3, 2})}},
      {"conv3x3", [](Tape<double>&, Inputs v) { return conv3x3(v[0], v[1], 1); }, {n({4, 4, 2}), n({3, 3, 2, 3})}},
      {"conv3x3_stride2", [](Tape<double>&, Inputs v) { return conv3x3(v[0], v[1], 2); },
       {n({2, 5, 4, 2}), n({3, 3, 2, 3})}},
      {"layer_norm", [](Tape<double>&, Inputs v) { return layer_norm(v[0], v[1], v[2]); },
       {n({3, 5}), n({5}), n({5})}},
      {"batch_norm_infer",
       [](Tape<double>&, Inputs v) {
         return batch_norm_infer(v[0], Tensor<double>::of({0.1, -0.3, 0.2}), Tensor<double>::of({0.5, 1.5, 2.0}),
                                 v[1], v[2]);
       },
       {n({2, 2, 3}), n({3}), n({3})}},
      {"batch_norm_train",
       [](Tape<double>&, Inputs v) { return batch_norm_train<double>(v[0], v[1], v[2], kBatchNormEps, nullptr, nullptr); },
       {n({2, 3, 3}), n({3}), n({3})}},
      {"mean_rows", [](Tape<double>&, Inputs v) { return mean_rows(v[0]); }, {n({2, 3, 4})}},
      {"slice_lastdim", [](Tape<double>&, Inputs v) { return slice_lastdim(v[0], 1, 2); }, {n({3, 4})}},
      {"reshape", [](Tape<double>&, Inputs v) { return reshape(v[0], Shape{4, 3}); }, {n({3, 4})}},
      {"weighted_sum",
       [](Tape<double>&, Inputs v) { return weighted_sum(std::vector<VarD>{v[0], v[1], v[2]}, v[3]); },
       {n({2, 3}), n({2, 3}), n({2, 3}), n({3})}},
      {"sum", [](Tape<double>&, Inputs v) { return sum(v[0]); }, {n({3, 4})}},
      {"cross_entropy", [](Tape<double>&, Inputs v) { return cross_entropy(v[0], labels); }, {n({3, 4}, 2.0)}},
      {"ssm_decay", [](Tape<double>&, Inputs v) { return ssm_decay(v[0], v[1]); }, {n({4, 3}), n({3})}},
      {"ssm_input_weight", [](Tape<double>&, Inputs v) { return ssm_input_weight(v[0], v[1]); },
       {n({4, 3}), n({4, 3})}},
      {"ssm_input_weight_scalar_step", [](Tape<double>&, Inputs v) { return ssm_input_weight(v[0], v[1]); },
       {n({4, 1}), n({4, 3})}},
  };
  std::vector<NamedGradcheck> out;
  for (std::size_t i = 0; i < cases.size(); ++i)
    out.push_back({cases[i].name, ad::gradcheck(cases[i].f, cases[i].inputs, seed + i)});
  return out;
}

ad::GradcheckResult gradcheck_mixer(const MixerConfig& cfg, std::uint64_t seed, const MixerOptions& opts,
                                    double param_scale) {
  cfg.validate();
  Rng rng(seed);
  auto p = init_mixer_params<double>(cfg, rng);
  p.ln_gamma = rng.uniform_tensor<double>({cfg.channels}, 0.5, 1.5);
  p.ln_beta = rng.normal_tensor<double>({cfg.channels}, 0.1);
  p.dt_bias = rng.normal_tensor<double>({cfg.decay_groups()});
  for (Tensor<double>* t : {&p.w_in, &p.w_z, &p.w_out})
    for (auto& v : t->data()) v *= param_scale;
  std::vector<Tensor<double>> inputs{rng.normal_tensor<double>({cfg.tokens, cfg.channels})};
  for_each_param(p, [&](const char*, const Tensor<double>& t) { inputs.push_back(t); });
  const Grid grid = grid_for_tokens(cfg.tokens);
  auto f = [&](Tape<double>&, Inputs v) {
    MixerParams<VarD> q;
    std::size_t i = 1;
    for_each_param(p, [&](const char* name, const Tensor<double>&) {
      const std::string key = name;
      VarD& dst = key == "w_bcd"      ? q.w_bcd
                  : key == "dt_bias"  ? q.dt_bias
                  : key == "log_a"    ? q.log_a
                  : key == "k_b"      ? q.k_b
                  : key == "k_c"      ? q.k_c
                  : key == "w_in"     ? q.w_in
                  : key == "w_z"      ? q.w_z
                  : key == "w_out"    ? q.w_out
                  : key == "ln_gamma" ? q.ln_gamma
                  : key == "ln_beta"  ? q.ln_beta
                  : key == "layer_scale" ? q.layer_scale
                                         : q.k_x;
      dst = v[i++];
    });
    return hsm_ssd_layer(v[0], q, grid, opts).x_out;
  };
  return ad::gradcheck(f, inputs, seed ^ 0x5eedULL);
}

double fusion_shift_derivative(std::uint64_t seed) {
  Rng rng(seed);
  const std::array<std::size_t, 3> d{6, 8, 10}, nstates{4, 3, 2};
  const std::size_t classes = 3;
  std::array<Tensor<double>, 3> hidden;
  for (std::size_t s = 0; s < 3; ++s) hidden[s] = rng.normal_tensor<double>({nstates[s], d[s]});
  const auto feature = rng.normal_tensor<double>({2, 2, d[2]});
  FusionHead<Tensor<double>> head;
  for (std::size_t s = 0; s < 4; ++s) {
    const std::size_t w = s == 0 ? d[2] : d[s - 1];
    head.heads[s] = {rng.uniform_tensor<double>({w}, 0.5, 1.5), rng.normal_tensor<double>({w}, 0.1),
                     rng.normal_tensor<double>({w, classes}), rng.normal_tensor<double>({classes})};
  }
  head.beta = rng.normal_tensor<double>({4});

  double worst = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    Tape<double> tape;
    FusionHead<VarD> vh;
    for (std::size_t s = 0; s < 4; ++s) vh.heads[s] = leafify_classifier(tape, head.heads[s]);
    vh.beta = tape.leaf(head.beta);
    std::array<StageHidden<VarD>, 3> vhid;
    for (std::size_t s = 0; s < 3; ++s) vhid[s].h = tape.constant(hidden[s]);
    const auto [z, parts] = msf_fuse(vhid, tape.constant(feature), vh);
    auto seed_grad = Tensor<double>::zeros(Shape{classes});
    seed_grad[c] = 1;
    tape.backward(z, seed_grad);
    double along_ones = 0;
    const Tensor<double> g_beta = tape.grad(vh.beta);
    for (auto g : g_beta.data()) along_ones += g;
    worst = std::max(worst, std::abs(along_ones));
  }
  return worst;
}

// Toy training ------------------------------------------------------------------------

ModelConfig mini_m1_config(std::size_t num_classes) {
  ModelConfig c;
  c.variant_name = "mini-M1";
  c.blocks = {2, 2, 2};
  c.channels = {16, 24, 32};
  c.states = {16, 8, 4};
  c.height = c.width = 128;
  c.num_classes = num_classes;
  return c;
}

ToyDataset::ToyDataset(const ModelConfig& cfg, std::uint64_t seed, double margin, double noise)
    : height_(cfg.height), width_(cfg.width), margin_(margin), noise_(noise) {
  if (height_ % 16 != 0 || width_ % 16 != 0) throw ContractViolation("ToyDataset: resolution must divide by 16");
  Rng rng(seed ^ 0xda7aULL);
  pattern_.resize((height_ / 16) * (width_ / 16) * 3);
  for (auto& v : pattern_) v = rng.uniform() < 0.5 ? -1.0 : 1.0;
}

std::vector<int> ToyDataset::balanced_labels(std::size_t n, std::size_t classes) {
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % classes);
  return labels;
}

template <class T>
Tensor<T> ToyDataset::images(Rng& rng, std::span<const int> labels) const {
  Tensor<T> out({labels.size(), height_, width_, 3});
  const std::size_t pw = width_ / 16;
  std::size_t k = 0;
  for (int label : labels) {
    const double sign = label == 0 ? -1.0 : 1.0;
    for (std::size_t y = 0; y < height_; ++y)
      for (std::size_t x = 0; x < width_; ++x)
        for (std::size_t c = 0; c < 3; ++c) {
          const double mean = sign * margin_ * pattern_[((y / 16) * pw + x / 16) * 3 + c];
          out[k++] = static_cast<T>(mean + noise_ * rng.normal());
        }
  }
  return out;
}

double ToyDataset::oracle_accuracy(std::uint64_t seed, std::size_t samples) const {
  Rng rng(seed);
  const auto labels = balanced_labels(samples, 2);
  const auto x = images<double>(rng, labels);
  const std::size_t per = height_ * width_ * 3, pw = width_ / 16;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < samples; ++i) {
    double score = 0;
    for (std::size_t y = 0; y < height_; ++y)
      for (std::size_t xx = 0; xx < width_; ++xx)
        for (std::size_t c = 0; c < 3; ++c)
          score += x[i * per + (y * width_ + xx) * 3 + c] * pattern_[((y / 16) * pw + xx / 16) * 3 + c];
    correct += (score > 0) == (labels[i] == 1);
  }
  return static_cast<double>(correct) / static_cast<double>(samples);
}

template <class T>
TrainResult train_toy(const ModelConfig& model_cfg, const TrainConfig& tc) {
  if (tc.steps < 1) throw ContractViolation("train_toy: steps must be >= 1");
  if (!(tc.lr >= 0)) throw ContractViolation("train_toy: learning rate must be non-negative");
  ModelConfig cfg = model_cfg;
  cfg.msf = tc.msf;
  Rng rng(tc.seed);
  ModelWeights<Tensor<T>> w = init_model<T>(cfg, rng);
  const ToyDataset data(cfg, tc.seed, tc.margin, tc.noise);
  const auto train_labels = ToyDataset::balanced_labels(tc.train_size, cfg.num_classes);
  const auto train_x = data.images<T>(rng, train_labels);

  std::vector<Tensor<T>> velocity;
  for_each_param(w, [&](const std::string&, const Tensor<T>& t) { velocity.push_back(Tensor<T>::zeros(t.shape())); });

  auto accuracy = [&](const Tensor<T>& logits, std::span<const int> labels) {
    const std::size_t c = logits.dim(-1);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < c; ++j)
        if (logits[i * c + j] > logits[i * c + best]) best = j;
      correct += static_cast<int>(best) == labels[i];
    }
    return static_cast<double>(correct) / static_cast<double>(labels.size());
  };

  TrainResult result;
  const ForwardContext train_ctx{.training = true, .bn_momentum = 0.1};
  for (std::size_t step = 0; step < tc.steps; ++step) {
    Tape<T> tape;
    const ModelWeights<Var<T>> vw = leafify(tape, w);
    const auto out = model_forward(tape.constant(train_x), vw, cfg, train_ctx);
    const Var<T> loss = cross_entropy(out.logits, train_labels);
    StepRecord rec{step, static_cast<double>(loss.value()[0]), accuracy(out.logits.value(), train_labels), 1.0};
    if (cfg.msf) {
      const auto beta_hat = softmax(vw.head.beta.value());
      double s = 0;
      for (auto v : beta_hat.data()) s += v;
      rec.beta_sum = s;
      result.max_beta_sum_error = std::max(result.max_beta_sum_error, std::abs(s - 1));
    }
    result.curve.push_back(rec);
    if (!std::isfinite(rec.loss)) {
      result.diverged = true;
      result.diverged_step = step;
      return result;
    }
    tape.backward(loss, Tensor<T>::full({1}, T(1)));

    // Running statistics were updated on the recorded copy.
    std::vector<Tensor<T>*> dst;
    for_each_buffer(w, [&](const std::string&, Tensor<T>& t) { dst.push_back(&t); });
    std::size_t bi = 0;
    for_each_buffer(vw, [&](const std::string&, const Tensor<T>& t) { *dst[bi++] = t; });

    std::vector<Tensor<T>> grads;
    for_each_param(vw, [&](const std::string&, const Var<T>& v) { grads.push_back(tape.grad(v)); });
    std::size_t pi = 0;
    const T lr = static_cast<T>(tc.lr), mom = static_cast<T>(tc.momentum);
    for_each_param(w, [&](const std::string&, Tensor<T>& t) {
      Tensor<T>& vel = velocity[pi];
      const Tensor<T>& g = grads[pi];
      for (std::size_t k = 0; k < t.size(); ++k) {
        vel[k] = mom * vel[k] + g[k];
        t[k] -= lr * vel[k];
      }
      ++pi;
    });
  }

  Rng eval_rng(tc.seed ^ 0xe7a1ULL);
  const auto eval_labels = ToyDataset::balanced_labels(tc.eval_size, cfg.num_classes);
  const auto eval_x = data.images<T>(eval_rng, eval_labels);
  result.final_accuracy = accuracy(model_forward(eval_x, w, cfg).logits, eval_labels);
  return result;
}

template MixerParams<Var<float>> leafify(Tape<float>&, const MixerParams<Tensor<float>>&);
template MixerParams<Var<double>> leafify(Tape<double>&, const MixerParams<Tensor<double>>&);
template ModelWeights<Var<float>> leafify(Tape<float>&, const ModelWeights<Tensor<float>>&);
template ModelWeights<Var<double>> leafify(Tape<double>&, const ModelWeights<Tensor<double>>&);
template Tensor<float> ToyDataset::images(Rng&, std::span<const int>) const;
template Tensor<double> ToyDataset::images(Rng&, std::span<const int>) const;
template TrainResult train_toy<float>(const ModelConfig&, const TrainConfig&);
template TrainResult train_toy<double>(const ModelConfig&, const TrainConfig&);

}  // namespace evim
