#include "evim/autodiff.hpp"

#include <algorithm>
#include <cmath>

namespace evim::ad {

// Tape ------------------------------------------------------------------------

template <class T>
Var<T> Tape<T>::leaf(Tensor<T> value, bool requires_grad) {
  nodes_.push_back(Node{requires_grad ? "leaf" : "constant", std::move(value), {}, {}, requires_grad});
  return Var<T>(this, nodes_.size() - 1);
}

template <class T>
Var<T> Tape<T>::record(const char* op, Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn backward) {
  return record(op, std::move(value), std::vector<Var<T>>(inputs), std::move(backward));
}

template <class T>
Var<T> Tape<T>::record(const char* op, Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn backward) {
  Node node{op, std::move(value), {}, std::move(backward), false};
  for (const auto& in : inputs) {
    if (in.tape() != this) throw ContractViolation(std::string(op) + ": operand belongs to a different tape");
    node.inputs.push_back(in.id());
    node.requires_grad = node.requires_grad || nodes_[in.id()].requires_grad;
  }
  if (!node.requires_grad) node.backward = nullptr;
  nodes_.push_back(std::move(node));
  return Var<T>(this, nodes_.size() - 1);
}

template <class T>
void Tape<T>::accumulate(std::size_t id, const Tensor<T>& contribution) {
  if (!nodes_[id].requires_grad) return;
  if (contribution.shape() != nodes_[id].value.shape())
    throw ContractViolation("backward: gradient " + to_string(contribution.shape()) + " for node '" +
                            nodes_[id].op + "' of shape " + to_string(nodes_[id].value.shape()));
  Tensor<T>& g = grads_[id];
  if (g.empty()) {
    g = contribution;
  } else {
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += contribution[i];
  }
}

template <class T>
void Tape<T>::backward(const Var<T>& output, const Tensor<T>& seed) {
  if (output.tape() != this) throw ContractViolation("backward: output belongs to a different tape");
  if (seed.shape() != output.shape())
    throw ContractViolation("backward: seed " + to_string(seed.shape()) + " does not match output " +
                            to_string(output.shape()));
  if (consumed_) throw ContractViolation("backward: tape already consumed");
  consumed_ = true;
  grads_.assign(nodes_.size(), Tensor<T>());
  accumulate(output.id(), seed);
  for (std::size_t id = output.id() + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (!node.backward || grads_[id].empty()) continue;
    node.backward(*this, grads_[id]);
  }
}

template <class T>
Tensor<T> Tape<T>::grad(const Var<T>& v) const {
  if (v.id() < grads_.size() && !grads_[v.id()].empty()) return grads_[v.id()];
  return Tensor<T>(nodes_[v.id()].value.shape());
}

template class Tape<float>;
template class Tape<double>;

namespace {

std::size_t leading(const Shape& s, std::size_t tail) {
  std::size_t n = 1;
  for (std::size_t i = 0; i + tail < s.size(); ++i) n *= s[i];
  return n;
}

template <class T>
const Tensor<T>& val(Tape<T>& t, const Var<T>& v) {
  return t.value(v.id());
}

template <class T>
Tape<T>& tape_of(const Var<T>& a) {
  if (a.empty()) throw ContractViolation("ad: empty variable used as operand");
  return *a.tape();
}

// Σ over all axes but the last.
template <class T>
Tensor<T> reduce_to_lastdim(const Tensor<T>& g) {
  const std::size_t c = g.dim(-1);
  Tensor<T> out({c});
  for (std::size_t i = 0; i < g.size(); ++i) out[i % c] += g[i];
  return out;
}

// Collapses all leading axes of a [..., R, C] tensor into rows.
template <class T>
Tensor<T> rows_view(const Tensor<T>& x) {
  return x.reshape({x.size() / x.dim(-1), x.dim(-1)});
}

template <class T, class F>
Tensor<T> zip(const Tensor<T>& a, const Tensor<T>& b, F f) {
  Tensor<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

template <class T>
T sigmoid_scalar(T v) {
  return T(1) / (T(1) + std::exp(-v));
}

template <class T>
T softplus_scalar(T v) {
  return std::max(v, T(0)) + std::log1p(std::exp(-std::abs(v)));
}

// Gradient kernels of the 3x3 convolutions. They retrace the forward loop
// nest and scatter, which keeps the summation order fixed.
template <class T>
void dwconv3x3_backward(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& g, int stride, Tensor<T>* dx,
                        Tensor<T>* dk) {
  const std::size_t h = x.dim(-3), w = x.dim(-2), c = x.dim(-1);
  const std::size_t ho = g.dim(-3), wo = g.dim(-2);
  const std::size_t s = static_cast<std::size_t>(stride);
  const std::size_t batch = leading(x.shape(), 3);
  if (dx) *dx = Tensor<T>(x.shape());
  if (dk) *dk = Tensor<T>(k.shape());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const T* go = g.data().data() + ((b * ho + oy) * wo + ox) * c;
        for (std::size_t ky = 0; ky < 3; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * s + ky) - 1;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t kx = 0; kx < 3; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * s + kx) - 1;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            const std::size_t xoff = ((b * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)) * c;
            const std::size_t koff = (ky * 3 + kx) * c;
            for (std::size_t ch = 0; ch < c; ++ch) {
              if (dx) (*dx)[xoff + ch] += go[ch] * k[koff + ch];
              if (dk) (*dk)[koff + ch] += go[ch] * x[xoff + ch];
            }
          }
        }
      }
}

template <class T>
void conv3x3_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& g, int stride, Tensor<T>* dx,
                      Tensor<T>* dw) {
  const std::size_t h = x.dim(-3), wd = x.dim(-2), cin = x.dim(-1), cout = w.dim(3);
  const std::size_t ho = g.dim(-3), wo = g.dim(-2);
  const std::size_t s = static_cast<std::size_t>(stride);
  const std::size_t batch = leading(x.shape(), 3);
  if (dx) *dx = Tensor<T>(x.shape());
  if (dw) *dw = Tensor<T>(w.shape());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const T* go = g.data().data() + ((b * ho + oy) * wo + ox) * cout;
        for (std::size_t ky = 0; ky < 3; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * s + ky) - 1;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t kx = 0; kx < 3; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * s + kx) - 1;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
            const std::size_t xoff =
                ((b * h + static_cast<std::size_t>(iy)) * wd + static_cast<std::size_t>(ix)) * cin;
            const std::size_t woff = (ky * 3 + kx) * cin * cout;
            for (std::size_t ci = 0; ci < cin; ++ci) {
              const T* wrow = w.data().data() + woff + ci * cout;
              if (dx) {
                T acc = 0;
                for (std::size_t co = 0; co < cout; ++co) acc += go[co] * wrow[co];
                (*dx)[xoff + ci] += acc;
              }
              if (dw) {
                const T xv = x[xoff + ci];
                T* dwrow = dw->data().data() + woff + ci * cout;
                for (std::size_t co = 0; co < cout; ++co) dwrow[co] += xv * go[co];
              }
            }
          }
        }
      }
}

// Layer-norm input gradient per row: (1/σ)(dx̂ - mean(dx̂) - x̂·mean(dx̂ ⊙ x̂)).
template <class T>
Tensor<T> layer_norm_input_grad(const Tensor<T>& xhat, const Tensor<T>& dxhat, const std::vector<T>& inv,
                                std::size_t d) {
  const std::size_t rows = xhat.size() / d;
  Tensor<T> dx(xhat.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    T m1 = 0, m2 = 0;
    for (std::size_t j = 0; j < d; ++j) {
      m1 += dxhat[r * d + j];
      m2 += dxhat[r * d + j] * xhat[r * d + j];
    }
    m1 /= static_cast<T>(d);
    m2 /= static_cast<T>(d);
    for (std::size_t j = 0; j < d; ++j)
      dx[r * d + j] = inv[r] * (dxhat[r * d + j] - m1 - xhat[r * d + j] * m2);
  }
  return dx;
}

}  // namespace

// Linear algebra ----------------------------------------------------------------

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  Tape<T>& t = tape_of(a);
  Tensor<T> out = evim::matmul(val(t, a), val(t, b));
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("matmul", std::move(out), {a, b}, [ia, ib](Tape<T>& tp, const Tensor<T>& g) {
    const Tensor<T>& av = tp.value(ia);
    const Tensor<T>& bv = tp.value(ib);
    const bool shared = bv.rank() == 2 && av.rank() > 2;
    if (tp.requires_grad(ia)) {
      if (shared)
        tp.accumulate(ia, evim::matmul_nt(rows_view(g), bv).reshape(av.shape()));
      else
        tp.accumulate(ia, evim::matmul_nt(g, bv));
    }
    if (tp.requires_grad(ib)) {
      if (shared)
        tp.accumulate(ib, evim::matmul_tn(rows_view(av), rows_view(g)));
      else
        tp.accumulate(ib, evim::matmul_tn(av, g));
    }
  });
}

template <class T>
Var<T> matmul_tn(const Var<T>& a, const Var<T>& b) {
  Tape<T>& t = tape_of(a);
  Tensor<T> out = evim::matmul_tn(val(t, a), val(t, b));
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("matmul_tn", std::move(out), {a, b}, [ia, ib](Tape<T>& tp, const Tensor<T>& g) {
    if (tp.requires_grad(ia)) tp.accumulate(ia, evim::matmul_nt(tp.value(ib), g));
    if (tp.requires_grad(ib)) tp.accumulate(ib, evim::matmul(tp.value(ia), g));
  });
}

template <class T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  Tape<T>& t = tape_of(a);
  Tensor<T> out = evim::matmul_nt(val(t, a), val(t, b));
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("matmul_nt", std::move(out), {a, b}, [ia, ib](Tape<T>& tp, const Tensor<T>& g) {
    if (tp.requires_grad(ia)) tp.accumulate(ia, evim::matmul(g, tp.value(ib)));
    if (tp.requires_grad(ib)) tp.accumulate(ib, evim::matmul_tn(g, tp.value(ia)));
  });
}

// Elementwise -------------------------------------------------------------------

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  Tape<T>& t = tape_of(a);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("add", evim::add(val(t, a), val(t, b)), {a, b}, [ia, ib](Tape<T>& tp, const Tensor<T>& g) {
    tp.accumulate(ia, g);
    tp.accumulate(ib, g);
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  Tape<T>& t = tape_of(a);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("sub", evim::sub(val(t, a), val(t, b)), {a, b}, [ia, ib](Tape<T>& tp, const Tensor<T>& g) {
    tp.accumulate(ia, g);
    tp.accumulate(ib, evim::scale(g, T(-1)));
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  Tape<T>& t = tape_of(a);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("mul", evim::mul(val(t, a), val(t, b)), {a, b}, [ia, ib](Tape<T>& tp, const Tensor<T>& g) {
    if (tp.requires_grad(ia)) tp.accumulate(ia, evim::mul(g, tp.value(ib)));
    if (tp.requires_grad(ib)) tp.accumulate(ib, evim::mul(g, tp.value(ia)));
  });
}

template <class T>
Var<T> scale(const Var<T>& x, T s) {
  Tape<T>& t = tape_of(x);
  const std::size_t ix = x.id();
  return t.record("scale", evim::scale(val(t, x), s), {x},
                  [ix, s](Tape<T>& tp, const Tensor<T>& g) { tp.accumulate(ix, evim::scale(g, s)); });
}

template <class T>
Var<T> add_lastdim(const Var<T>& x, const Var<T>& v) {
  Tape<T>& t = tape_of(x);
  const std::size_t ix = x.id(), iv = v.id();
  return t.record("add_lastdim", evim::add_lastdim(val(t, x), val(t, v)), {x, v},
                  [ix, iv](Tape<T>& tp, const Tensor<T>& g) {
                    tp.accumulate(ix, g);
                    if (tp.requires_grad(iv)) tp.accumulate(iv, reduce_to_lastdim(g));
                  });
}

template <class T>
Var<T> mul_lastdim(const Var<T>& x, const Var<T>& v) {
  Tape<T>& t = tape_of(x);
  const std::size_t ix = x.id(), iv = v.id();
  return t.record("mul_lastdim", evim::mul_lastdim(val(t, x), val(t, v)), {x, v},
                  [ix, iv](Tape<T>& tp, const Tensor<T>& g) {
                    if (tp.requires_grad(ix)) tp.accumulate(ix, evim::mul_lastdim(g, tp.value(iv)));
                    if (tp.requires_grad(iv)) tp.accumulate(iv, reduce_to_lastdim(evim::mul(g, tp.value(ix))));
                  });
}

template <class T>
Var<T> mul_rows(const Var<T>& x, const Var<T>& s) {
  Tape<T>& t = tape_of(x);
  const std::size_t ix = x.id(), is = s.id();
  return t.record("mul_rows", evim::mul_rows(val(t, x), val(t, s)), {x, s}, [ix, is](Tape<T>& tp, const Tensor<T>& g) {
    if (tp.requires_grad(ix)) tp.accumulate(ix, evim::mul_rows(g, tp.value(is)));
    if (tp.requires_grad(is)) {
      const Tensor<T> gx = evim::mul(g, tp.value(ix));
      const std::size_t r = gx.dim(-2), c = gx.dim(-1), batch = gx.size() / (r * c);
      Tensor<T> ds(tp.value(is).shape());
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) ds[b * c + j] += gx[(b * r + i) * c + j];
      tp.accumulate(is, ds);
    }
  });
}

template <class T>
Var<T> relu(const Var<T>& x) {
  Tape<T>& t = tape_of(x);
  const std::size_t ix = x.id();
  return t.record("relu", evim::relu(val(t, x)), {x}, [ix](Tape<T>& tp, const Tensor<T>& g) {
    tp.accumulate(ix, zip(g, tp.value(ix), [](T gv, T xv) { return xv > T(0) ? gv : T(0); }));
  });
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
  Tape<T>& t = tape_of(x);
  const std::size_t ix = x.id();
  return t.record("sigmoid", evim::sigmoid(val(t, x)), {x}, [ix](Tape<T>& tp, const Tensor<T>& g) {
    tp.accumulate(ix, zip(g, tp.value(ix), [](T gv, T xv) {
                    const T s = sigmoid_scalar(xv);
                    return gv * s * (T(1) - s);
                  }));
  });
}

template <class T>
Var<T> silu(const Var<T>& x) {
  Tape<T>& t = tape_of(x);
  const std::size_t ix = x.id();
  return t.record("silu", evim::silu(val(t, x)), {x}, [ix](Tape<T>& tp, const Tensor<T>& g) {
    tp.accumulate(ix, zip(g, tp.value(ix), [](T gv, T xv) {
                    const T s = sigmoid_scalar(xv);
                    return gv * s * (T(1) + xv * (T(1) - s));
                  }));
  });
}

template <class T>
Var<T> softplus(const Var<T>& x) {
  Tape<T>& t = tape_of(x);
  const std::size_t ix = x.id();
  return t.record("softplus", evim::softplus(val(t, x)), {x}, [ix](Tape<T>& tp, const Tensor<T>& g) {
    tp.accumulate(ix, zip(g, tp.value(ix), [](T gv, T xv) { return gv * sigmoid_scalar(xv); }));
  });
}

template <class T>
Var<T> softmax(const Var<T>& x) {
  Tape<T>& t = tape_of(x);
  const std::size_t ix = x.id();
  return t.record("softmax", evim::softmax(val(t, x)), {x}, [ix](Tape<T>& tp, const Tensor<T>& g) {
    const Tensor<T> y = evim::softmax(tp.value(ix));
    const std::size_t c = y.dim(-1), rows = y.size() / c;
    Tensor<T> dx(y.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (std::size_t j = 0; j < c; ++j) dot += g[r * c + j] * y[r * c + j];
      for (std::size_t j = 0; j < c; ++j) dx[r * c + j] = y[r * c + j] * (g[r * c + j] - dot);
    }
    tp.accumulate(ix, dx);
  });
}

// Convolutions ----------------------------------------------------------------

template <class T>
Var<T> dwconv3x3(const Var<T>& x, const Var<T>& k, int stride) {
  Tape<T>& t = tape_of(x);
  const std::size_t ix = x.id(), ik = k.id();
  return t.record("dwconv3x3", evim::dwconv3x3(val(t, x), val(t, k), stride), {x, k},
                  [ix, ik, stride](Tape<T>& tp, const Tensor<T>& g) {
                    Tensor<T> dx, dk;
                    dwconv3x3_backward(tp.value(ix), tp.value(ik), g, stride, tp.requires_grad(ix) ? &dx : nullptr,
                                       tp.requires_grad(ik) ? &dk : nullptr);
                    if (!dx.empty()) tp.accumulate(ix, dx);
                    if (!dk.empty()) tp.accumulate(ik, dk);
                  });
}

template <class T>
Var<T> conv3x3(const Var<T>& x, const Var<T>& w, int stride) {
  Tape<T>& t = tape_of(x);
  const std::size_t ix = x.id(), iw = w.id();
  return t.record("conv3x3", evim::conv3x3(val(t, x), val(t, w), stride), {x, w},
                  [ix, iw, stride](Tape<T>& tp, const Tensor<T>& g) {
                    Tensor<T> dx, dw;
                    conv3x3_backward(tp.value(ix), tp.value(iw), g, stride, tp.requires_grad(ix) ? &dx : nullptr,
                                     tp.requires_grad(iw) ? &dw : nullptr);
                    if (!dx.empty()) tp.accumulate(ix, dx);
                    if (!dw.empty()) tp.accumulate(iw, dw);
                  });
}

// Normalization ---------------------------------------------------------------

template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, double eps) {
  Tape<T>& t = tape_of(x);
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  return t.record(
      "layer_norm", evim::layer_norm(val(t, x), val(t, gamma), val(t, beta), eps), {x, gamma, beta},
      [ix, ig, ib, eps](Tape<T>& tp, const Tensor<T>& g) {
        const Tensor<T>& xv = tp.value(ix);
        const Tensor<T>& gv = tp.value(ig);
        const std::size_t d = xv.dim(-1), rows = xv.size() / d;
        // Recompute x̂ and 1/σ per row.
        Tensor<T> xhat(xv.shape());
        std::vector<T> inv(rows);
        for (std::size_t r = 0; r < rows; ++r) {
          T mean = 0, var = 0;
          for (std::size_t j = 0; j < d; ++j) mean += xv[r * d + j];
          mean /= static_cast<T>(d);
          for (std::size_t j = 0; j < d; ++j) var += (xv[r * d + j] - mean) * (xv[r * d + j] - mean);
          var /= static_cast<T>(d);
          inv[r] = T(1) / std::sqrt(var + static_cast<T>(eps));
          for (std::size_t j = 0; j < d; ++j) xhat[r * d + j] = (xv[r * d + j] - mean) * inv[r];
        }
        if (tp.requires_grad(ig)) tp.accumulate(ig, reduce_to_lastdim(evim::mul(g, xhat)));
        if (tp.requires_grad(ib)) tp.accumulate(ib, reduce_to_lastdim(g));
        if (tp.requires_grad(ix)) tp.accumulate(ix, layer_norm_input_grad(xhat, evim::mul_lastdim(g, gv), inv, d));
      });
}

template <class T>
Var<T> batch_norm_infer(const Var<T>& x, const Tensor<T>& mean, const Tensor<T>& var, const Var<T>& gamma,
                        const Var<T>& beta, double eps) {
  Tape<T>& t = tape_of(x);
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  std::vector<T> inv(var.size());
  for (std::size_t j = 0; j < var.size(); ++j) inv[j] = T(1) / std::sqrt(var[j] + static_cast<T>(eps));
  return t.record("batch_norm_infer",
                  evim::batch_norm_infer(val(t, x), mean, var, val(t, gamma), val(t, beta), eps), {x, gamma, beta},
                  [ix, ig, ib, mean, inv](Tape<T>& tp, const Tensor<T>& g) {
                    const Tensor<T>& xv = tp.value(ix);
                    const Tensor<T>& gv = tp.value(ig);
                    const std::size_t c = xv.dim(-1);
                    Tensor<T> dx = g, dg({c});
                    for (std::size_t i = 0; i < g.size(); ++i) {
                      const std::size_t j = i % c;
                      dx[i] = g[i] * gv[j] * inv[j];
                      dg[j] += g[i] * (xv[i] - mean[j]) * inv[j];
                    }
                    if (tp.requires_grad(ix)) tp.accumulate(ix, dx);
                    if (tp.requires_grad(ig)) tp.accumulate(ig, dg);
                    if (tp.requires_grad(ib)) tp.accumulate(ib, reduce_to_lastdim(g));
                  });
}

template <class T>
Var<T> batch_norm_train(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, double eps, Tensor<T>* batch_mean,
                        Tensor<T>* batch_var) {
  Tape<T>& t = tape_of(x);
  Tensor<T> mean, var;
  Tensor<T> out = evim::batch_norm_train(val(t, x), val(t, gamma), val(t, beta), eps, &mean, &var);
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  std::vector<T> inv(var.size());
  for (std::size_t j = 0; j < var.size(); ++j) inv[j] = T(1) / std::sqrt(var[j] + static_cast<T>(eps));
  if (batch_mean) *batch_mean = mean;
  if (batch_var) *batch_var = var;
  return t.record("batch_norm_train", std::move(out), {x, gamma, beta},
                  [ix, ig, ib, mean, inv](Tape<T>& tp, const Tensor<T>& g) {
                    const Tensor<T>& xv = tp.value(ix);
                    const Tensor<T>& gv = tp.value(ig);
                    const std::size_t c = xv.dim(-1), rows = xv.size() / c;
                    Tensor<T> xhat(xv.shape());
                    for (std::size_t i = 0; i < xv.size(); ++i) xhat[i] = (xv[i] - mean[i % c]) * inv[i % c];
                    if (tp.requires_grad(ig)) tp.accumulate(ig, reduce_to_lastdim(evim::mul(g, xhat)));
                    if (tp.requires_grad(ib)) tp.accumulate(ib, reduce_to_lastdim(g));
                    if (!tp.requires_grad(ix)) return;
                    std::vector<T> m1(c, T(0)), m2(c, T(0));
                    for (std::size_t i = 0; i < g.size(); ++i) {
                      const T dxh = g[i] * gv[i % c];
                      m1[i % c] += dxh;
                      m2[i % c] += dxh * xhat[i];
                    }
                    Tensor<T> dx(xv.shape());
                    for (std::size_t i = 0; i < g.size(); ++i) {
                      const std::size_t j = i % c;
                      const T dxh = g[i] * gv[j];
                      dx[i] = inv[j] * (dxh - m1[j] / static_cast<T>(rows) - xhat[i] * m2[j] / static_cast<T>(rows));
                    }
                    tp.accumulate(ix, dx);
                  });
}

// Shape and reduction -----------------------------------------------------------

template <class T>
Var<T> mean_rows(const Var<T>& x) {
  Tape<T>& t = tape_of(x);
  const std::size_t ix = x.id();
  return t.record("mean_rows", evim::mean_rows(val(t, x)), {x}, [ix](Tape<T>& tp, const Tensor<T>& g) {
    const Tensor<T>& xv = tp.value(ix);
    const std::size_t r = xv.dim(-2), c = xv.dim(-1), batch = xv.size() / (r * c);
    Tensor<T> dx(xv.shape());
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) dx[(b * r + i) * c + j] = g[b * c + j] / static_cast<T>(r);
    tp.accumulate(ix, dx);
  });
}

template <class T>
Var<T> slice_lastdim(const Var<T>& x, std::size_t begin, std::size_t count) {
  Tape<T>& t = tape_of(x);
  const std::size_t ix = x.id();
  return t.record("slice_lastdim", evim::slice_lastdim(val(t, x), begin, count), {x},
                  [ix, begin, count](Tape<T>& tp, const Tensor<T>& g) {
                    const Tensor<T>& xv = tp.value(ix);
                    const std::size_t c = xv.dim(-1), rows = xv.size() / c;
                    Tensor<T> dx(xv.shape());
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t j = 0; j < count; ++j) dx[r * c + begin + j] = g[r * count + j];
                    tp.accumulate(ix, dx);
                  });
}

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tape<T>& t = tape_of(x);
  const std::size_t ix = x.id();
  return t.record("reshape", val(t, x).reshape(std::move(shape)), {x}, [ix](Tape<T>& tp, const Tensor<T>& g) {
    tp.accumulate(ix, g.reshape(tp.value(ix).shape()));
  });
}

template <class T>
Var<T> weighted_sum(const std::vector<Var<T>>& zs, const Var<T>& w) {
  if (zs.empty()) throw ContractViolation("weighted_sum: no inputs");
  Tape<T>& t = tape_of(w);
  std::vector<Tensor<T>> values;
  std::vector<Var<T>> inputs;
  std::vector<std::size_t> ids;
  for (const auto& z : zs) {
    values.push_back(val(t, z));
    inputs.push_back(z);
    ids.push_back(z.id());
  }
  inputs.push_back(w);
  const std::size_t iw = w.id();
  return t.record("weighted_sum", evim::weighted_sum(values, val(t, w)), inputs,
                  [ids, iw](Tape<T>& tp, const Tensor<T>& g) {
                    const Tensor<T>& wv = tp.value(iw);
                    Tensor<T> dw(wv.shape());
                    for (std::size_t s = 0; s < ids.size(); ++s) {
                      const Tensor<T>& z = tp.value(ids[s]);
                      for (std::size_t i = 0; i < g.size(); ++i) dw[s] += g[i] * z[i];
                      if (tp.requires_grad(ids[s])) tp.accumulate(ids[s], evim::scale(g, wv[s]));
                    }
                    if (tp.requires_grad(iw)) tp.accumulate(iw, dw);
                  });
}

template <class T>
Var<T> sum(const Var<T>& x) {
  Tape<T>& t = tape_of(x);
  const std::size_t ix = x.id();
  return t.record("sum", evim::sum(val(t, x)), {x}, [ix](Tape<T>& tp, const Tensor<T>& g) {
    tp.accumulate(ix, Tensor<T>(tp.value(ix).shape(), g[0]));
  });
}

template <class T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> labels) {
  Tape<T>& t = tape_of(logits);
  const std::size_t il = logits.id();
  std::vector<int> ys(labels.begin(), labels.end());
  return t.record("cross_entropy", evim::cross_entropy(val(t, logits), labels), {logits},
                  [il, ys](Tape<T>& tp, const Tensor<T>& g) {
                    Tensor<T> p = evim::softmax(tp.value(il));
                    const std::size_t c = p.dim(-1), rows = p.size() / c;
                    for (std::size_t r = 0; r < rows; ++r) p[r * c + static_cast<std::size_t>(ys[r])] -= T(1);
                    tp.accumulate(il, evim::scale(p, g[0] / static_cast<T>(rows)));
                  });
}

template <class T>
Var<T> ssm_decay(const Var<T>& delta, const Var<T>& log_a) {
  Tape<T>& t = tape_of(delta);
  const std::size_t id = delta.id(), ia = log_a.id();
  return t.record("ssm_decay", evim::ssm_decay(val(t, delta), val(t, log_a)), {delta, log_a},
                  [id, ia](Tape<T>& tp, const Tensor<T>& g) {
                    const Tensor<T>& dv = tp.value(id);
                    const Tensor<T>& la = tp.value(ia);
                    const std::size_t n = la.size();
                    Tensor<T> dd(dv.shape()), dla(la.shape());
                    for (std::size_t i = 0; i < dv.size(); ++i) {
                      const T rate = std::exp(la[i % n]);
                      const T step = softplus_scalar(dv[i]);
                      const T a = std::exp(-step * rate);
                      // dA/dδ = -A·rate·σ(δ); dA/dλ = -A·step·rate.
                      dd[i] = -g[i] * a * rate * sigmoid_scalar(dv[i]);
                      dla[i % n] += -g[i] * a * step * rate;
                    }
                    if (tp.requires_grad(id)) tp.accumulate(id, dd);
                    if (tp.requires_grad(ia)) tp.accumulate(ia, dla);
                  });
}

template <class T>
Var<T> ssm_input_weight(const Var<T>& delta, const Var<T>& b_hat) {
  Tape<T>& t = tape_of(delta);
  const std::size_t id = delta.id(), ib = b_hat.id();
  return t.record("ssm_input_weight", evim::ssm_input_weight(val(t, delta), val(t, b_hat)), {delta, b_hat},
                  [id, ib](Tape<T>& tp, const Tensor<T>& g) {
                    const Tensor<T>& dv = tp.value(id);
                    const Tensor<T>& bv = tp.value(ib);
                    const std::size_t n = bv.dim(-1);
                    const bool per_state = dv.dim(-1) == n;
                    Tensor<T> dd(dv.shape()), db(bv.shape());
                    for (std::size_t i = 0; i < bv.size(); ++i) {
                      const std::size_t k = per_state ? i : i / n;
                      db[i] = g[i] * softplus_scalar(dv[k]);
                      dd[k] += g[i] * bv[i] * sigmoid_scalar(dv[k]);
                    }
                    if (tp.requires_grad(id)) tp.accumulate(id, dd);
                    if (tp.requires_grad(ib)) tp.accumulate(ib, db);
                  });
}

#define EVIM_INSTANTIATE_AD(T)                                                                              \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                                     \
  template Var<T> matmul_tn(const Var<T>&, const Var<T>&);                                                  \
  template Var<T> matmul_nt(const Var<T>&, const Var<T>&);                                                  \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                        \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                                        \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                                        \
  template Var<T> scale(const Var<T>&, T);                                                                  \
  template Var<T> add_lastdim(const Var<T>&, const Var<T>&);                                                \
  template Var<T> mul_lastdim(const Var<T>&, const Var<T>&);                                                \
  template Var<T> mul_rows(const Var<T>&, const Var<T>&);                                                   \
  template Var<T> relu(const Var<T>&);                                                                      \
  template Var<T> sigmoid(const Var<T>&);                                                                   \
  template Var<T> silu(const Var<T>&);                                                                      \
  template Var<T> softplus(const Var<T>&);                                                                  \
  template Var<T> softmax(const Var<T>&);                                                                   \
  template Var<T> dwconv3x3(const Var<T>&, const Var<T>&, int);                                             \
  template Var<T> conv3x3(const Var<T>&, const Var<T>&, int);                                               \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, double);                          \
  template Var<T> batch_norm_infer(const Var<T>&, const Tensor<T>&, const Tensor<T>&, const Var<T>&,        \
                                   const Var<T>&, double);                                                  \
  template Var<T> batch_norm_train(const Var<T>&, const Var<T>&, const Var<T>&, double, Tensor<T>*,         \
                                   Tensor<T>*);                                                             \
  template Var<T> mean_rows(const Var<T>&);                                                                 \
  template Var<T> slice_lastdim(const Var<T>&, std::size_t, std::size_t);                                   \
  template Var<T> reshape(const Var<T>&, Shape);                                                            \
  template Var<T> weighted_sum(const std::vector<Var<T>>&, const Var<T>&);                                  \
  template Var<T> sum(const Var<T>&);                                                                       \
  template Var<T> cross_entropy(const Var<T>&, std::span<const int>);                                       \
  template Var<T> ssm_decay(const Var<T>&, const Var<T>&);                                                  \
  template Var<T> ssm_input_weight(const Var<T>&, const Var<T>&);

EVIM_INSTANTIATE_AD(float)
EVIM_INSTANTIATE_AD(double)

#undef EVIM_INSTANTIATE_AD

// Finite differences --------------------------------------------------------------

GradcheckResult gradcheck(const TapeFn<double>& f, const std::vector<Tensor<double>>& inputs, std::uint64_t seed,
                          double eps, const std::vector<bool>& check) {
  auto selected = [&](std::size_t i) { return check.empty() || check[i]; };
  auto evaluate = [&](const std::vector<Tensor<double>>& xs, const Tensor<double>* projection,
                      std::vector<Tensor<double>>* grads) -> std::pair<double, Shape> {
    Tape<double> tape;
    std::vector<Var<double>> leaves;
    for (std::size_t i = 0; i < xs.size(); ++i) leaves.push_back(tape.leaf(xs[i], selected(i)));
    Var<double> out = f(tape, leaves);
    const Shape shape = out.shape();
    if (!projection) return {0.0, shape};
    double loss = 0;
    for (std::size_t i = 0; i < projection->size(); ++i) loss += out.value()[i] * (*projection)[i];
    if (grads) {
      tape.backward(out, *projection);
      for (const auto& leaf : leaves) grads->push_back(tape.grad(leaf));
    }
    return {loss, shape};
  };

  Rng rng(seed);
  const Shape out_shape = evaluate(inputs, nullptr, nullptr).second;
  const Tensor<double> projection = rng.normal_tensor<double>(out_shape);
  std::vector<Tensor<double>> analytic;
  evaluate(inputs, &projection, &analytic);

  GradcheckResult result;
  std::vector<Tensor<double>> xs = inputs;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (!selected(i)) continue;
    for (std::size_t k = 0; k < xs[i].size(); ++k) {
      const double orig = xs[i][k];
      xs[i][k] = orig + eps;
      const double up = evaluate(xs, &projection, nullptr).first;
      xs[i][k] = orig - eps;
      const double down = evaluate(xs, &projection, nullptr).first;
      xs[i][k] = orig;
      const double fd = (up - down) / (2 * eps);
      const double err = std::abs(analytic[i][k] - fd) / std::max(1.0, std::abs(fd));
      ++result.coordinates;
      if (err > result.max_rel_error || std::isnan(err)) {
        result.max_rel_error = std::isnan(err) ? std::numeric_limits<double>::infinity() : err;
        result.worst_input = i;
        result.worst_index = k;
      }
    }
  }
  return result;
}

}  // namespace evim::ad
