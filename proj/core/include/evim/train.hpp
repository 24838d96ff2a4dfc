#pragma once

// Gradient checks and the toy training loop.

#include <cstdint>
#include <string>
#include <vector>

#include "evim/autodiff.hpp"
#include "evim/model.hpp"

namespace evim {

/// Copies every parameter onto `tape` as a gradient-requiring leaf. BN
/// buffers are copied by value.
template <class T>
ModelWeights<ad::Var<T>> leafify(ad::Tape<T>& tape, const ModelWeights<Tensor<T>>& w);
template <class T>
MixerParams<ad::Var<T>> leafify(ad::Tape<T>& tape, const MixerParams<Tensor<T>>& p);

struct NamedGradcheck {
  std::string name;
  ad::GradcheckResult result;
};

/// Finite-difference check of every differentiable primitive on small random
/// inputs (f64, central differences with step 1e-5).
std::vector<NamedGradcheck> gradcheck_primitives(std::uint64_t seed);

/// Gradient of sum(x_out ⊙ R) through hsm_ssd_layer with respect to the input
/// and every MixerParams leaf. `cfg` should be small (L <= 16, N <= 8, D <= 16).
ad::GradcheckResult gradcheck_mixer(const MixerConfig& cfg, std::uint64_t seed, const MixerOptions& opts = {},
                                    double param_scale = 1.0);

/// Directional derivative of the fused logits along β + t·𝟙, per class,
/// reduced to the largest magnitude. Zero by softmax shift invariance.
double fusion_shift_derivative(std::uint64_t seed);

// Toy training --------------------------------------------------------------------

/// mini-M1: widths [16,24,32], states [16,8,4], 128x128 input (8x8 stem output).
ModelConfig mini_m1_config(std::size_t num_classes = 2);

/// Images whose 16x16 patches are filled with class-conditional Gaussian
/// noise: pixel = class_sign · margin · u[patch, channel] + noise, with the
/// sign pattern u fixed by the seed.
class ToyDataset {
 public:
  ToyDataset(const ModelConfig& cfg, std::uint64_t seed, double margin = 1.0, double noise = 1.0);

  template <class T>
  Tensor<T> images(Rng& rng, std::span<const int> labels) const;
  /// Balanced labels 0,1,0,1,... of length n.
  static std::vector<int> balanced_labels(std::size_t n, std::size_t classes);
  /// Accuracy of the ideal linear rule sign(<x, u>) on fresh samples.
  double oracle_accuracy(std::uint64_t seed, std::size_t samples) const;

 private:
  std::size_t height_, width_;
  double margin_, noise_;
  std::vector<double> pattern_;  // [H/16, W/16, 3] signs
};

struct TrainConfig {
  std::size_t steps = 500;
  std::size_t train_size = 16;  // fixed full-batch training set
  std::size_t eval_size = 128;
  double lr = 0.05;
  double momentum = 0.9;
  double margin = 1.0;  // generator class separation per pixel
  double noise = 1.0;   // generator per-pixel noise std
  std::uint64_t seed = 0;
  bool msf = true;
};

struct StepRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double accuracy = 0.0;  // on the training batch
  double beta_sum = 1.0;  // Σ softmax(β), 1 without fusion
};

struct TrainResult {
  std::vector<StepRecord> curve;
  double final_accuracy = 0.0;  // held-out, inference-mode BN
  bool diverged = false;
  std::size_t diverged_step = 0;
  double max_beta_sum_error = 0.0;
};

/// SGD with momentum on softmax cross-entropy. Deterministic given the seed.
template <class T>
TrainResult train_toy(const ModelConfig& cfg, const TrainConfig& tc);

}  // namespace evim
