#include "evim/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace evim {

std::uint64_t& mac_counter() {
  thread_local std::uint64_t count = 0;
  return count;
}

namespace {

[[noreturn]] void fail(const std::string& op, const std::string& detail) {
  throw ContractViolation(op + ": " + detail);
}

template <class T>
void require_rank(const Tensor<T>& x, std::size_t min_rank, const char* op) {
  if (x.rank() < min_rank)
    fail(op, "expected rank >= " + std::to_string(min_rank) + ", got " + to_string(x.shape()));
}

std::size_t leading(const Shape& s, std::size_t tail) {
  std::size_t n = 1;
  for (std::size_t i = 0; i + tail < s.size(); ++i) n *= s[i];
  return n;
}

bool same_leading(const Shape& a, std::size_t a_tail, const Shape& b, std::size_t b_tail) {
  if (a.size() - a_tail != b.size() - b_tail) return false;
  return std::equal(a.begin(), a.end() - static_cast<std::ptrdiff_t>(a_tail), b.begin());
}

Shape with_tail(const Shape& s, std::size_t drop, std::initializer_list<std::size_t> tail) {
  Shape out(s.begin(), s.end() - static_cast<std::ptrdiff_t>(drop));
  out.insert(out.end(), tail);
  return out;
}

template <class T, class F>
Tensor<T> map(const Tensor<T>& x, F f) {
  Tensor<T> out = x;
  for (auto& v : out.data()) v = f(v);
  return out;
}

template <class T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) fail(op, "shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
}

template <class T>
void require_lastdim_vector(const Tensor<T>& x, const Tensor<T>& v, const char* op) {
  if (v.rank() != 1 || v.dim(0) != x.dim(-1))
    fail(op, "vector " + to_string(v.shape()) + " does not match last axis of " + to_string(x.shape()));
}

}  // namespace

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(-2), k = a.dim(-1), p = b.dim(-1);
  const bool shared = b.rank() == 2;
  if (b.dim(-2) != k || (!shared && !same_leading(a.shape(), 2, b.shape(), 2)))
    fail("matmul", "incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  const std::size_t batch = leading(a.shape(), 2);
  Tensor<T> out(with_tail(a.shape(), 2, {m, p}));
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.data().data();
  for (std::size_t n = 0; n < batch; ++n) {
    const T* an = pa + n * m * k;
    const T* bn = shared ? pb : pb + n * k * p;
    T* on = po + n * m * p;
    for (std::size_t i = 0; i < m; ++i) {
      T* row = on + i * p;
      for (std::size_t kk = 0; kk < k; ++kk) {
        const T av = an[i * k + kk];
        const T* brow = bn + kk * p;
        for (std::size_t j = 0; j < p; ++j) row[j] += av * brow[j];
      }
    }
  }
  mac_counter() += batch * m * k * p;
  return out;
}

template <class T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 2, "matmul_tn");
  require_rank(b, 2, "matmul_tn");
  const std::size_t l = a.dim(-2), n = a.dim(-1), d = b.dim(-1);
  if (b.dim(-2) != l || !same_leading(a.shape(), 2, b.shape(), 2))
    fail("matmul_tn", "incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  const std::size_t batch = leading(a.shape(), 2);
  Tensor<T> out(with_tail(a.shape(), 2, {n, d}));
  for (std::size_t s = 0; s < batch; ++s) {
    const T* as = a.data().data() + s * l * n;
    const T* bs = b.data().data() + s * l * d;
    T* os = out.data().data() + s * n * d;
    for (std::size_t t = 0; t < l; ++t) {
      const T* brow = bs + t * d;
      for (std::size_t i = 0; i < n; ++i) {
        const T av = as[t * n + i];
        T* orow = os + i * d;
        for (std::size_t j = 0; j < d; ++j) orow[j] += av * brow[j];
      }
    }
  }
  mac_counter() += batch * l * n * d;
  return out;
}

template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  const std::size_t m = a.dim(-2), k = a.dim(-1), p = b.dim(-2);
  if (b.dim(-1) != k || !same_leading(a.shape(), 2, b.shape(), 2))
    fail("matmul_nt", "incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  const std::size_t batch = leading(a.shape(), 2);
  Tensor<T> out(with_tail(a.shape(), 2, {m, p}));
  for (std::size_t s = 0; s < batch; ++s) {
    const T* as = a.data().data() + s * m * k;
    const T* bs = b.data().data() + s * p * k;
    T* os = out.data().data() + s * m * p;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < p; ++j) {
        T acc = 0;
        for (std::size_t kk = 0; kk < k; ++kk) acc += as[i * k + kk] * bs[j * k + kk];
        os[i * p + j] = acc;
      }
  }
  mac_counter() += batch * m * k * p;
  return out;
}

template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
  require_rank(x, 2, "transpose");
  const std::size_t r = x.dim(-2), c = x.dim(-1);
  const std::size_t batch = leading(x.shape(), 2);
  Tensor<T> out(with_tail(x.shape(), 2, {c, r}));
  for (std::size_t s = 0; s < batch; ++s)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[s * r * c + j * r + i] = x[s * r * c + i * c + j];
  return out;
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "add");
  Tensor<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "sub");
  Tensor<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "mul");
  Tensor<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return map(x, [s](T v) { return v * s; });
}

template <class T>
Tensor<T> add_lastdim(const Tensor<T>& x, const Tensor<T>& v) {
  require_lastdim_vector(x, v, "add_lastdim");
  Tensor<T> out = x;
  const std::size_t c = v.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += v[i % c];
  return out;
}

template <class T>
Tensor<T> mul_lastdim(const Tensor<T>& x, const Tensor<T>& v) {
  require_lastdim_vector(x, v, "mul_lastdim");
  Tensor<T> out = x;
  const std::size_t c = v.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= v[i % c];
  return out;
}

template <class T>
Tensor<T> mul_rows(const Tensor<T>& x, const Tensor<T>& s) {
  require_rank(x, 2, "mul_rows");
  if (s.dim(-1) != x.dim(-1) || !same_leading(x.shape(), 2, s.shape(), 1))
    fail("mul_rows", "scale " + to_string(s.shape()) + " does not match " + to_string(x.shape()));
  const std::size_t r = x.dim(-2), c = x.dim(-1), batch = leading(x.shape(), 2);
  Tensor<T> out = x;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[(b * r + i) * c + j] *= s[b * c + j];
  return out;
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return map(x, [](T v) { return v > T(0) ? v : T(0); });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return map(x, [](T v) { return T(1) / (T(1) + std::exp(-v)); });
}

template <class T>
Tensor<T> silu(const Tensor<T>& x) {
  return map(x, [](T v) { return v / (T(1) + std::exp(-v)); });
}

template <class T>
Tensor<T> softplus(const Tensor<T>& x) {
  // log(1 + e^v) without overflow: max(v, 0) + log1p(e^-|v|).
  return map(x, [](T v) { return std::max(v, T(0)) + std::log1p(std::exp(-std::abs(v))); });
}

template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
  const std::size_t c = x.dim(-1);
  const std::size_t rows = x.size() / c;
  Tensor<T> out = x;
  for (std::size_t r = 0; r < rows; ++r) {
    T* row = out.data().data() + r * c;
    const T mx = *std::max_element(row, row + c);
    T total = 0;
    for (std::size_t j = 0; j < c; ++j) {
      row[j] = std::exp(row[j] - mx);
      total += row[j];
    }
    for (std::size_t j = 0; j < c; ++j) row[j] /= total;
  }
  return out;
}

template <class T>
Tensor<T> dwconv3x3(const Tensor<T>& x, const Tensor<T>& k, int stride) {
  require_rank(x, 3, "dwconv3x3");
  if (stride != 1 && stride != 2) fail("dwconv3x3", "stride must be 1 or 2");
  const std::size_t h = x.dim(-3), w = x.dim(-2), c = x.dim(-1);
  if (k.shape() != Shape{3, 3, c})
    fail("dwconv3x3", "kernel " + to_string(k.shape()) + " does not match input " + to_string(x.shape()));
  const std::size_t s = static_cast<std::size_t>(stride);
  const std::size_t ho = (h + s - 1) / s, wo = (w + s - 1) / s;
  const std::size_t batch = leading(x.shape(), 3);
  Tensor<T> out(with_tail(x.shape(), 3, {ho, wo, c}));
  for (std::size_t b = 0; b < batch; ++b) {
    const T* xb = x.data().data() + b * h * w * c;
    T* ob = out.data().data() + b * ho * wo * c;
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        T* o = ob + (oy * wo + ox) * c;
        for (std::size_t ky = 0; ky < 3; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * s + ky) - 1;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t kx = 0; kx < 3; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * s + kx) - 1;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            const T* xi = xb + (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * c;
            const T* kk = k.data().data() + (ky * 3 + kx) * c;
            for (std::size_t ch = 0; ch < c; ++ch) o[ch] += xi[ch] * kk[ch];
          }
        }
      }
  }
  mac_counter() += batch * ho * wo * c * 9;
  return out;
}

template <class T>
Tensor<T> dwconv3x3(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& bias, int stride) {
  return add_lastdim(dwconv3x3(x, k, stride), bias);
}

template <class T>
Tensor<T> conv3x3(const Tensor<T>& x, const Tensor<T>& w, int stride) {
  require_rank(x, 3, "conv3x3");
  if (stride != 1 && stride != 2) fail("conv3x3", "stride must be 1 or 2");
  const std::size_t h = x.dim(-3), wd = x.dim(-2), cin = x.dim(-1);
  if (w.rank() != 4 || w.dim(0) != 3 || w.dim(1) != 3 || w.dim(2) != cin)
    fail("conv3x3", "weight " + to_string(w.shape()) + " does not match input " + to_string(x.shape()));
  const std::size_t cout = w.dim(3);
  const std::size_t s = static_cast<std::size_t>(stride);
  const std::size_t ho = (h + s - 1) / s, wo = (wd + s - 1) / s;
  const std::size_t batch = leading(x.shape(), 3);
  Tensor<T> out(with_tail(x.shape(), 3, {ho, wo, cout}));
  for (std::size_t b = 0; b < batch; ++b) {
    const T* xb = x.data().data() + b * h * wd * cin;
    T* ob = out.data().data() + b * ho * wo * cout;
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        T* o = ob + (oy * wo + ox) * cout;
        for (std::size_t ky = 0; ky < 3; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * s + ky) - 1;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t kx = 0; kx < 3; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * s + kx) - 1;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
            const T* xi = xb + (static_cast<std::size_t>(iy) * wd + static_cast<std::size_t>(ix)) * cin;
            const T* wk = w.data().data() + (ky * 3 + kx) * cin * cout;
            for (std::size_t ci = 0; ci < cin; ++ci) {
              const T xv = xi[ci];
              const T* wrow = wk + ci * cout;
              for (std::size_t co = 0; co < cout; ++co) o[co] += xv * wrow[co];
            }
          }
        }
      }
  }
  mac_counter() += batch * ho * wo * cout * cin * 9;
  return out;
}

template <class T>
Tensor<T> pwconv(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  if (w.rank() != 2 || w.dim(0) != x.dim(-1))
    fail("pwconv", "weight " + to_string(w.shape()) + " does not match input " + to_string(x.shape()));
  const std::size_t tokens = x.size() / x.dim(-1);
  Tensor<T> flat = x.reshape({tokens, x.dim(-1)});
  Shape out_shape = x.shape();
  out_shape.back() = w.dim(1);
  return add_lastdim(matmul(flat, w), bias).reshape(std::move(out_shape));
}

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps) {
  require_lastdim_vector(x, gamma, "layer_norm");
  require_lastdim_vector(x, beta, "layer_norm");
  if (!(eps > 0)) fail("layer_norm", "eps must be positive");
  const std::size_t d = x.dim(-1), rows = x.size() / d;
  Tensor<T> out = x;
  for (std::size_t r = 0; r < rows; ++r) {
    T* row = out.data().data() + r * d;
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<T>(d);
    const T inv = T(1) / std::sqrt(var + static_cast<T>(eps));
    for (std::size_t j = 0; j < d; ++j) row[j] = (row[j] - mean) * inv * gamma[j] + beta[j];
  }
  return out;
}

template <class T>
Tensor<T> batch_norm_infer(const Tensor<T>& x, const Tensor<T>& mean, const Tensor<T>& var, const Tensor<T>& gamma,
                           const Tensor<T>& beta, double eps) {
  for (const Tensor<T>* v : {&mean, &var, &gamma, &beta}) require_lastdim_vector(x, *v, "batch_norm_infer");
  for (auto v : var.data())
    if (v < T(0)) fail("batch_norm_infer", "negative variance");
  if (!(eps >= 0)) fail("batch_norm_infer", "eps must be non-negative");
  const std::size_t c = x.dim(-1);
  std::vector<T> a(c), b(c);
  for (std::size_t j = 0; j < c; ++j) {
    a[j] = gamma[j] / std::sqrt(var[j] + static_cast<T>(eps));
    b[j] = beta[j] - mean[j] * a[j];
  }
  Tensor<T> out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] * a[i % c] + b[i % c];
  return out;
}

template <class T>
Tensor<T> batch_norm_train(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps,
                           Tensor<T>* batch_mean, Tensor<T>* batch_var) {
  require_lastdim_vector(x, gamma, "batch_norm_train");
  require_lastdim_vector(x, beta, "batch_norm_train");
  const std::size_t c = x.dim(-1), rows = x.size() / c;
  Tensor<T> mean({c}), var({c});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) mean[j] += x[r * c + j];
  for (std::size_t j = 0; j < c; ++j) mean[j] /= static_cast<T>(rows);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) {
      const T d = x[r * c + j] - mean[j];
      var[j] += d * d;
    }
  for (std::size_t j = 0; j < c; ++j) var[j] /= static_cast<T>(rows);
  Tensor<T> out = batch_norm_infer(x, mean, var, gamma, beta, eps);
  if (batch_mean) *batch_mean = std::move(mean);
  if (batch_var) *batch_var = std::move(var);
  return out;
}

template <class T>
Tensor<T> mean_rows(const Tensor<T>& x) {
  require_rank(x, 2, "mean_rows");
  const std::size_t r = x.dim(-2), c = x.dim(-1), batch = leading(x.shape(), 2);
  Shape shape(x.shape().begin(), x.shape().end() - 2);
  shape.push_back(c);
  Tensor<T> out(std::move(shape));
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[b * c + j] += x[(b * r + i) * c + j];
    for (std::size_t j = 0; j < c; ++j) out[b * c + j] /= static_cast<T>(r);
  }
  return out;
}

template <class T>
Tensor<T> slice_lastdim(const Tensor<T>& x, std::size_t begin, std::size_t count) {
  const std::size_t c = x.dim(-1);
  if (count == 0 || begin + count > c)
    fail("slice_lastdim", "range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                              ") exceeds last axis of " + to_string(x.shape()));
  Shape shape = x.shape();
  shape.back() = count;
  Tensor<T> out(std::move(shape));
  const std::size_t rows = x.size() / c;
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(x.data().data() + r * c + begin, count, out.data().data() + r * count);
  return out;
}

template <class T>
Tensor<T> concat_lastdim(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) fail("concat_lastdim", "no inputs");
  Shape shape = parts[0].shape();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != shape.size() || !std::equal(shape.begin(), shape.end() - 1, p.shape().begin()))
      fail("concat_lastdim", "leading axes differ: " + to_string(shape) + " vs " + to_string(p.shape()));
    total += p.dim(-1);
  }
  const std::size_t rows = parts[0].size() / parts[0].dim(-1);
  shape.back() = total;
  Tensor<T> out(std::move(shape));
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t col = 0;
    for (const auto& p : parts) {
      const std::size_t c = p.dim(-1);
      std::copy_n(p.data().data() + r * c, c, out.data().data() + r * total + col);
      col += c;
    }
  }
  return out;
}

template <class T>
Tensor<T> weighted_sum(const std::vector<Tensor<T>>& zs, const Tensor<T>& w) {
  if (zs.empty() || w.rank() != 1 || w.size() != zs.size())
    fail("weighted_sum", "need one weight per input, got " + to_string(w.shape()) + " for " +
                             std::to_string(zs.size()) + " inputs");
  Tensor<T> out(zs[0].shape());
  for (std::size_t s = 0; s < zs.size(); ++s) {
    require_same(zs[s], zs[0], "weighted_sum");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += w[s] * zs[s][i];
  }
  return out;
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (auto v : x.data()) acc += v;
  return Tensor<T>({1}, acc);
}

template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  const std::size_t c = logits.dim(-1), rows = logits.size() / c;
  if (labels.size() != rows)
    fail("cross_entropy", std::to_string(labels.size()) + " labels for logits " + to_string(logits.shape()));
  T loss = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const int y = labels[r];
    if (y < 0 || static_cast<std::size_t>(y) >= c) fail("cross_entropy", "label out of range");
    // log-softmax evaluated directly for accuracy when p is tiny.
    const T* row = logits.data().data() + r * c;
    const T mx = *std::max_element(row, row + c);
    T total = 0;
    for (std::size_t j = 0; j < c; ++j) total += std::exp(row[j] - mx);
    loss -= row[y] - mx - std::log(total);
  }
  return Tensor<T>({1}, loss / static_cast<T>(rows));
}

template <class T>
Tensor<T> ssm_decay(const Tensor<T>& delta, const Tensor<T>& log_a) {
  require_lastdim_vector(delta, log_a, "ssm_decay");
  const std::size_t g = log_a.size();
  Tensor<T> out = softplus(delta);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(-out[i] * std::exp(log_a[i % g]));
  mac_counter() += out.size();
  return out;
}

template <class T>
Tensor<T> ssm_input_weight(const Tensor<T>& delta, const Tensor<T>& b_hat) {
  const std::size_t n = b_hat.dim(-1);
  const std::size_t g = delta.dim(-1);
  if (delta.rank() != b_hat.rank() || (g != n && g != 1) ||
      !std::equal(delta.shape().begin(), delta.shape().end() - 1, b_hat.shape().begin()))
    fail("ssm_input_weight", "step " + to_string(delta.shape()) + " does not match " + to_string(b_hat.shape()));
  const Tensor<T> step = softplus(delta);
  Tensor<T> out = b_hat;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= g == n ? step[i] : step[i / n];
  mac_counter() += out.size();
  return out;
}

template <class T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "max_abs_diff");
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

template <class T>
double max_rel_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double scale = 0;
  for (auto v : b.data()) scale = std::max(scale, std::abs(static_cast<double>(v)));
  return max_abs_diff(a, b) / std::max(scale, std::numeric_limits<double>::min());
}

#define EVIM_INSTANTIATE_OPS(T)                                                                             \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> matmul_tn(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> matmul_nt(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> transpose(const Tensor<T>&);                                                           \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                               \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                               \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                               \
  template Tensor<T> scale(const Tensor<T>&, T);                                                            \
  template Tensor<T> add_lastdim(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> mul_lastdim(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> mul_rows(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> relu(const Tensor<T>&);                                                                \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                             \
  template Tensor<T> silu(const Tensor<T>&);                                                                \
  template Tensor<T> softplus(const Tensor<T>&);                                                            \
  template Tensor<T> softmax(const Tensor<T>&);                                                             \
  template Tensor<T> dwconv3x3(const Tensor<T>&, const Tensor<T>&, int);                                    \
  template Tensor<T> dwconv3x3(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int);                  \
  template Tensor<T> conv3x3(const Tensor<T>&, const Tensor<T>&, int);                                      \
  template Tensor<T> pwconv(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);              \
  template Tensor<T> batch_norm_infer(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                      const Tensor<T>&, double);                                            \
  template Tensor<T> batch_norm_train(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double,         \
                                      Tensor<T>*, Tensor<T>*);                                              \
  template Tensor<T> mean_rows(const Tensor<T>&);                                                           \
  template Tensor<T> slice_lastdim(const Tensor<T>&, std::size_t, std::size_t);                             \
  template Tensor<T> concat_lastdim(const std::vector<Tensor<T>>&);                                            \
  template Tensor<T> weighted_sum(const std::vector<Tensor<T>>&, const Tensor<T>&); \
  template Tensor<T> ssm_decay(const Tensor<T>&, const Tensor<T>&); \
  template Tensor<T> ssm_input_weight(const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> sum(const Tensor<T>&);                                                                 \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const int>);                                 \
  template double max_abs_diff(const Tensor<T>&, const Tensor<T>&);                                         \
  template double max_rel_diff(const Tensor<T>&, const Tensor<T>&);

EVIM_INSTANTIATE_OPS(float)
EVIM_INSTANTIATE_OPS(double)

#undef EVIM_INSTANTIATE_OPS

}  // namespace evim
