#pragma once

// Reverse-mode differentiation over the tensor-core primitives.
//
// A Tape records every operation applied to Vars in creation order, which is
// a topological order by construction (inputs always precede outputs).
// backward() walks the tape in reverse and accumulates gradients. The Var
// overloads below mirror the Tensor overloads in ops.hpp one for one, so the
// mixer and backbone code is written once and instantiated for both.

#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "evim/ops.hpp"
#include "evim/tensor.hpp"

namespace evim::ad {

template <class T>
class Tape;

template <class T>
class Var {
 public:
  using value_type = T;

  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool empty() const { return tape_ == nullptr; }
  Tape<T>* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rank() const { return value().rank(); }
  std::size_t dim(int axis) const { return value().dim(axis); }
  std::size_t size() const { return value().size(); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <class T>
class Tape {
 public:
  /// Receives the gradient of the node's output; pushes contributions to the
  /// node's inputs through Tape::accumulate.
  using BackwardFn = std::function<void(Tape& tape, const Tensor<T>& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = true);
  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }
  Var<T> record(const char* op, Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn backward);
  Var<T> record(const char* op, Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn backward);

  /// Seeds d(output) with `seed` and propagates to every node that requires
  /// a gradient. May be called once per tape.
  void backward(const Var<T>& output, const Tensor<T>& seed);

  const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  /// Gradient accumulated at `v`; zeros of v's shape if nothing reached it.
  Tensor<T> grad(const Var<T>& v) const;
  void accumulate(std::size_t id, const Tensor<T>& contribution);

  std::size_t size() const { return nodes_.size(); }
  const std::string& op(std::size_t id) const { return nodes_[id].op; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_[id].inputs; }

 private:
  struct Node {
    std::string op;
    Tensor<T> value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  std::deque<Node> nodes_;
  std::vector<Tensor<T>> grads_;
  bool consumed_ = false;
};

template <class T>
const Tensor<T>& Var<T>::value() const {
  if (!tape_) throw ContractViolation("ad::Var: empty variable");
  return tape_->value(id_);
}

template <class T>
void backward(Tape<T>& tape, const Var<T>& output, const Tensor<T>& seed) {
  tape.backward(output, seed);
}

// Primitive set. Each mirrors the Tensor overload of the same name.

template <class T> Var<T> matmul(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> matmul_tn(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> matmul_nt(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> scale(const Var<T>& x, T s);
template <class T> Var<T> add_lastdim(const Var<T>& x, const Var<T>& v);
template <class T> Var<T> mul_lastdim(const Var<T>& x, const Var<T>& v);
template <class T> Var<T> mul_rows(const Var<T>& x, const Var<T>& s);
template <class T> Var<T> relu(const Var<T>& x);
template <class T> Var<T> sigmoid(const Var<T>& x);
template <class T> Var<T> silu(const Var<T>& x);
template <class T> Var<T> softplus(const Var<T>& x);
template <class T> Var<T> softmax(const Var<T>& x);
template <class T> Var<T> dwconv3x3(const Var<T>& x, const Var<T>& k, int stride = 1);
template <class T> Var<T> conv3x3(const Var<T>& x, const Var<T>& w, int stride = 1);
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, double eps = kLayerNormEps);
template <class T>
Var<T> batch_norm_infer(const Var<T>& x, const Tensor<T>& mean, const Tensor<T>& var, const Var<T>& gamma,
                        const Var<T>& beta, double eps = kBatchNormEps);
template <class T>
Var<T> batch_norm_train(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, double eps, Tensor<T>* batch_mean,
                        Tensor<T>* batch_var);
template <class T> Var<T> mean_rows(const Var<T>& x);
template <class T> Var<T> slice_lastdim(const Var<T>& x, std::size_t begin, std::size_t count);
template <class T> Var<T> reshape(const Var<T>& x, Shape shape);
template <class T> Var<T> weighted_sum(const std::vector<Var<T>>& zs, const Var<T>& w);
template <class T> Var<T> sum(const Var<T>& x);
template <class T> Var<T> cross_entropy(const Var<T>& logits, std::span<const int> labels);
/// Per-step decay A = exp(softplus(delta) * -exp(log_a)), log_a broadcast on the last axis.
template <class T> Var<T> ssm_decay(const Var<T>& delta, const Var<T>& log_a);
/// Input weight B = softplus(delta) ⊙ b_hat; delta's last axis is b_hat's or 1.
template <class T> Var<T> ssm_input_weight(const Var<T>& delta, const Var<T>& b_hat);

// Finite-difference checking ------------------------------------------------

/// Builds an output from leaves on a fresh tape.
template <class T>
using TapeFn = std::function<Var<T>(Tape<T>& tape, std::span<const Var<T>> inputs)>;

struct GradcheckResult {
  double max_rel_error = 0.0;  ///< max |analytic - fd| / max(1, |fd|)
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  std::size_t coordinates = 0;
};

/// Compares reverse-mode gradients of the scalar loss sum(f(x) ⊙ R), with R a
/// fixed random projection, against central differences with step `eps`.
/// Only inputs flagged in `check` (default: all) are perturbed.
GradcheckResult gradcheck(const TapeFn<double>& f, const std::vector<Tensor<double>>& inputs, std::uint64_t seed,
                          double eps = 1e-5, const std::vector<bool>& check = {});

}  // namespace evim::ad

namespace evim {

template <class X>
struct scalar_of;
template <class T>
struct scalar_of<Tensor<T>> {
  using type = T;
};
template <class T>
struct scalar_of<ad::Var<T>> {
  using type = T;
};
template <class X>
using scalar_of_t = typename scalar_of<X>::type;

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  return x.reshape(std::move(shape));
}

}  // namespace evim
