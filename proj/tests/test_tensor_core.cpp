#include <cmath>
#include <vector>

#include "doctest.h"
#include "evim/ops.hpp"
#include "evim/tensor.hpp"

using namespace evim;

namespace {

template <class T>
Tensor<T> naive_matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), p = b.dim(1);
  Tensor<T> out({m, p});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < p; ++j) {
      double acc = 0;
      for (std::size_t t = 0; t < k; ++t) acc += double(a.at({i, t})) * double(b.at({t, j}));
      out.at({i, j}) = static_cast<T>(acc);
    }
  return out;
}

// Direct zero-padded sliding window; `dense` selects full channel mixing.
Tensor<double> sliding_conv(const Tensor<double>& x, const Tensor<double>& w, int stride, bool dense) {
  const long h = long(x.dim(0)), wd = long(x.dim(1));
  const std::size_t cin = x.dim(2), cout = dense ? w.dim(3) : cin;
  const std::size_t ho = (h + stride - 1) / stride, wo = (wd + stride - 1) / stride;
  Tensor<double> out({ho, wo, cout});
  for (std::size_t i = 0; i < ho; ++i)
    for (std::size_t j = 0; j < wo; ++j)
      for (std::size_t co = 0; co < cout; ++co) {
        double acc = 0;
        for (long di = 0; di < 3; ++di)
          for (long dj = 0; dj < 3; ++dj) {
            const long y = long(i) * stride + di - 1, xx = long(j) * stride + dj - 1;
            if (y < 0 || xx < 0 || y >= h || xx >= wd) continue;
            if (dense) {
              for (std::size_t ci = 0; ci < cin; ++ci)
                acc += x.at({std::size_t(y), std::size_t(xx), ci}) * w.at({std::size_t(di), std::size_t(dj), ci, co});
            } else {
              acc += x.at({std::size_t(y), std::size_t(xx), co}) * w.at({std::size_t(di), std::size_t(dj), co});
            }
          }
        out.at({i, j, co}) = acc;
      }
  return out;
}

}  // namespace

TEST_CASE("tensor shape contract") {
  Tensor<float> t({2, 3, 4});
  CHECK(t.size() == 24);
  CHECK(t.offset({1, 2, 3}) == 1 * 12 + 2 * 4 + 3);
  CHECK_THROWS_AS(Tensor<float>({2, 0}), ContractViolation);
  CHECK_THROWS_AS(Tensor<float>(Shape{}), ContractViolation);
  CHECK_THROWS_AS(Tensor<float>({2, 2}, std::vector<float>{1, 2, 3}), ContractViolation);
  CHECK_THROWS_AS(t.reshape({5, 5}), ContractViolation);
  CHECK(t.reshape({6, 4}).shape() == Shape{6, 4});
  CHECK(dtype_of<double>() == DType::f64);
}

TEST_CASE("matmul") {
  const auto i2 = Tensor<double>::identity(2);
  const Tensor<double> v({2, 1}, {5, 6});
  CHECK(matmul(i2, v) == v);
  const Tensor<double> a({2, 2}, {1, 2, 3, 4});
  CHECK(matmul(a, v) == Tensor<double>({2, 1}, {17, 39}));

  Rng rng(11);
  const auto x = rng.normal_tensor<float>({7, 5});
  const auto w = rng.normal_tensor<float>({5, 3});
  CHECK(max_rel_diff(matmul(x, w), naive_matmul(x, w)) <= 1e-6);

  SUBCASE("identity is exact on both sides") {
    const auto y = rng.normal_tensor<double>({4, 6});
    CHECK(matmul(Tensor<double>::identity(4), y) == y);
    CHECK(matmul(y, Tensor<double>::identity(6)) == y);
  }
  SUBCASE("transposed variants match explicit transposes") {
    const auto p = rng.normal_tensor<double>({6, 3});
    const auto q = rng.normal_tensor<double>({6, 4});
    CHECK(max_abs_diff(matmul_tn(p, q), naive_matmul(transpose(p), q)) <= 1e-12);
    const auto r = rng.normal_tensor<double>({5, 3});
    CHECK(max_abs_diff(matmul_nt(p, r), naive_matmul(p, transpose(r))) <= 1e-12);
  }
  SUBCASE("batched operands") {
    const auto p = rng.normal_tensor<double>({2, 3, 4});
    const auto q = rng.normal_tensor<double>({2, 4, 5});
    const auto out = matmul(p, q);
    for (std::size_t b = 0; b < 2; ++b) {
      Tensor<double> pb({3, 4}), qb({4, 5});
      for (std::size_t i = 0; i < 12; ++i) pb[i] = p[b * 12 + i];
      for (std::size_t i = 0; i < 20; ++i) qb[i] = q[b * 20 + i];
      const auto ref = naive_matmul(pb, qb);
      for (std::size_t i = 0; i < 15; ++i) CHECK(out[b * 15 + i] == doctest::Approx(ref[i]).epsilon(1e-12));
    }
  }
  SUBCASE("shape mismatch names both shapes") {
    try {
      matmul(Tensor<double>({2, 3}), Tensor<double>({4, 2}));
      FAIL("expected a contract violation");
    } catch (const ContractViolation& e) {
      const std::string msg = e.what();
      CHECK(msg.find("[2x3]") != std::string::npos);
      CHECK(msg.find("[4x2]") != std::string::npos);
    }
  }
  SUBCASE("mac counter") {
    MacScope scope;
    matmul(rng.normal_tensor<double>({7, 5}), rng.normal_tensor<double>({5, 3}));
    CHECK(scope.count() == 7 * 5 * 3);
  }
}

TEST_CASE("dwconv3x3") {
  Rng rng(3);
  const auto x = rng.normal_tensor<double>({5, 6, 2});
  Tensor<double> delta({3, 3, 2});
  delta.at({1, 1, 0}) = delta.at({1, 1, 1}) = 1;
  CHECK(dwconv3x3(x, delta) == x);

  const auto counts = dwconv3x3(Tensor<double>::full({4, 4, 1}, 1), Tensor<double>::full({3, 3, 1}, 1));
  CHECK(counts.at({1, 1, 0}) == 9);
  CHECK(counts.at({0, 0, 0}) == 4);
  CHECK(counts.at({0, 1, 0}) == 6);

  const auto xs = rng.normal_tensor<double>({5, 5, 2});
  const auto k = rng.normal_tensor<double>({3, 3, 2});
  CHECK(max_rel_diff(dwconv3x3(xs, k), sliding_conv(xs, k, 1, false)) <= 1e-6);
  CHECK(max_rel_diff(dwconv3x3(xs, k, 2), sliding_conv(xs, k, 2, false)) <= 1e-12);
  CHECK(dwconv3x3(Tensor<double>({7, 7, 2}), k, 2).shape() == Shape{4, 4, 2});

  const auto bias = Tensor<double>::of({0.5, -1});
  const auto with_bias = dwconv3x3(xs, k, bias);
  const auto plain = dwconv3x3(xs, k);
  for (std::size_t i = 0; i < plain.size(); ++i) CHECK(with_bias[i] == plain[i] + bias[i % 2]);

  CHECK_THROWS_AS(dwconv3x3(xs, Tensor<double>({3, 3, 3})), ContractViolation);
}

TEST_CASE("conv3x3 matches the sliding-window oracle") {
  Rng rng(4);
  const auto x = rng.normal_tensor<double>({7, 6, 3});
  const auto w = rng.normal_tensor<double>({3, 3, 3, 4});
  CHECK(max_rel_diff(conv3x3(x, w, 1), sliding_conv(x, w, 1, true)) <= 1e-12);
  CHECK(max_rel_diff(conv3x3(x, w, 2), sliding_conv(x, w, 2, true)) <= 1e-12);
  MacScope scope;
  conv3x3(x, w, 2);
  CHECK(scope.count() == 4 * 3 * 9 * 3 * 4);
}

TEST_CASE("pwconv") {
  Rng rng(5);
  const auto x = rng.normal_tensor<double>({3, 4, 5});
  CHECK(pwconv(x, Tensor<double>::identity(5), Tensor<double>::zeros({5})) == x);
  const auto s = rng.normal_tensor<double>({2, 2, 1});
  const auto affine = pwconv(s, Tensor<double>({1, 1}, {2}), Tensor<double>::of({1}));
  for (std::size_t i = 0; i < s.size(); ++i) CHECK(affine[i] == 2 * s[i] + 1);

  const auto w = rng.normal_tensor<double>({5, 3});
  const auto bias = rng.normal_tensor<double>({3});
  CHECK(pwconv(x, w, bias) == add_lastdim(matmul(x.reshape({12, 5}), w), bias).reshape({3, 4, 3}));
}

TEST_CASE("layer_norm") {
  const auto ones = Tensor<double>::full({2}, 1), zeros = Tensor<double>::zeros({2});
  CHECK(layer_norm(Tensor<double>::full({1, 2}, 3.0), ones, zeros) == Tensor<double>::zeros({1, 2}));
  const auto unit = layer_norm(Tensor<double>({1, 2}, {1, -1}), ones, zeros, 1e-300);
  CHECK(unit[0] == doctest::Approx(1).epsilon(1e-15));
  CHECK(unit[1] == doctest::Approx(-1).epsilon(1e-15));

  Rng rng(6);
  const std::size_t d = 17;
  const auto x = rng.normal_tensor<double>({4, d}, 3.0);
  const auto y = layer_norm(x, Tensor<double>::full({d}, 1), Tensor<double>::zeros({d}));
  for (std::size_t r = 0; r < 4; ++r) {
    double mean = 0, var = 0;
    for (std::size_t c = 0; c < d; ++c) mean += y[r * d + c];
    mean /= d;
    for (std::size_t c = 0; c < d; ++c) var += (y[r * d + c] - mean) * (y[r * d + c] - mean);
    var /= d;
    CHECK(std::abs(mean) <= 1e-6);
    CHECK(std::abs(var - 1) <= 1e-4);
  }
}

TEST_CASE("batch_norm_infer") {
  Rng rng(7);
  const auto x = rng.normal_tensor<double>({3, 3, 4});
  const auto zeros = Tensor<double>::zeros({4}), ones = Tensor<double>::full({4}, 1);
  CHECK(batch_norm_infer(x, zeros, ones, ones, zeros, 0.0) == x);
  const auto beta = rng.normal_tensor<double>({4});
  const auto flat = batch_norm_infer(x, zeros, ones, zeros, beta);
  for (std::size_t i = 0; i < flat.size(); ++i) CHECK(flat[i] == beta[i % 4]);
  CHECK_THROWS_AS(batch_norm_infer(x, zeros, Tensor<double>::full({4}, -1), ones, zeros), ContractViolation);

  SUBCASE("folding into the preceding conv") {
    const auto img = rng.normal_tensor<double>({6, 5, 3});
    const auto w = rng.normal_tensor<double>({3, 3, 3, 4});
    const auto mean = rng.normal_tensor<double>({4});
    const auto var = rng.uniform_tensor<double>({4}, 0.5, 2.0);
    const auto gamma = rng.normal_tensor<double>({4});
    const auto shift = rng.normal_tensor<double>({4});
    const auto ref = batch_norm_infer(conv3x3(img, w), mean, var, gamma, shift);
    Tensor<double> wf = w, bias({4});
    for (std::size_t co = 0; co < 4; ++co) {
      const double s = gamma[co] / std::sqrt(var[co] + kBatchNormEps);
      for (std::size_t i = co; i < wf.size(); i += 4) wf[i] *= s;
      bias[co] = shift[co] - mean[co] * s;
    }
    CHECK(max_rel_diff(add_lastdim(conv3x3(img, wf), bias), ref) <= 1e-5);
  }
}

TEST_CASE("batch_norm_train reports biased statistics") {
  const Tensor<double> x({4, 1}, {1, 2, 3, 6});
  Tensor<double> mean, var;
  const auto y = batch_norm_train(x, Tensor<double>::of({1}), Tensor<double>::of({0}), 0.0, &mean, &var);
  CHECK(mean[0] == 3);
  CHECK(var[0] == doctest::Approx(3.5));
  CHECK(y[3] == doctest::Approx(3 / std::sqrt(3.5)));
}

TEST_CASE("activations") {
  CHECK(silu(Tensor<double>::of({0}))[0] == 0);
  CHECK(relu(Tensor<double>::of({-3}))[0] == 0);
  CHECK(silu(Tensor<double>::of({1}))[0] == doctest::Approx(1 / (1 + std::exp(-1.0))).epsilon(1e-15));
  CHECK(silu(Tensor<double>::of({1}))[0] == doctest::Approx(0.731059).epsilon(1e-6));
  CHECK(softplus(Tensor<double>::of({800}))[0] == 800);
  CHECK(softplus(Tensor<double>::of({0}))[0] == doctest::Approx(std::log(2.0)));

  const auto uniform = softmax(Tensor<double>::full({5}, 2.5));
  for (auto v : uniform.data()) CHECK(v == doctest::Approx(0.2));

  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const auto v = rng.normal_tensor<double>({9}, 10.0);
    const auto p = softmax(v);
    double total = 0;
    for (auto e : p.data()) {
      CHECK(e > 0);
      CHECK(e < 1);
      total += e;
    }
    CHECK(std::abs(total - 1) <= 1e-6);
    Tensor<double> shifted = v;
    for (auto& e : shifted.data()) e += 123.0;
    CHECK(max_abs_diff(softmax(shifted), p) <= 1e-6);
  }
}

TEST_CASE("reductions and helpers") {
  const Tensor<double> x({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(mean_rows(x) == Tensor<double>::of({2.5, 3.5, 4.5}));
  CHECK(slice_lastdim(x, 1, 2) == Tensor<double>({2, 2}, {2, 3, 5, 6}));
  CHECK(concat_lastdim<double>({slice_lastdim(x, 0, 1), slice_lastdim(x, 1, 2)}) == x);
  CHECK(sum(x)[0] == 21);
  CHECK(weighted_sum<double>({x, scale(x, 2.0)}, Tensor<double>::of({0.5, 0.25})) == x);
  CHECK(mul_rows(x, Tensor<double>::of({1, 0, 2})) == Tensor<double>({2, 3}, {1, 0, 6, 4, 0, 12}));

  const Tensor<double> logits({2, 2}, {0, 0, 10, -10});
  const int labels[] = {0, 0};
  const double expected = (std::log(2.0) + std::log1p(std::exp(-20.0))) / 2;
  CHECK(cross_entropy(logits, labels)[0] == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("reductions are bit-stable across calls") {
  Rng rng(9);
  const auto a = rng.normal_tensor<float>({33, 65});
  const auto b = rng.normal_tensor<float>({65, 17});
  CHECK(matmul(a, b) == matmul(a, b));
}

TEST_CASE("rng is reproducible") {
  Rng a(42), b(42), c(43);
  const auto x = a.normal_tensor<double>({16});
  CHECK(x == b.normal_tensor<double>({16}));
  CHECK_FALSE(x == c.normal_tensor<double>({16}));
  for (int i = 0; i < 1000; ++i) {
    const double u = a.uniform();
    CHECK((u >= 0 && u < 1));
  }
}
