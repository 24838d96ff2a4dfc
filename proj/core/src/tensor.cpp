#include "evim/tensor.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace evim {

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t numel(const Shape& shape) {
  if (shape.empty()) return 0;
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

const char* dtype_name(DType dtype) { return dtype == DType::f32 ? "f32" : "f64"; }

namespace {

void check_extents(const Shape& shape) {
  if (shape.empty()) throw ContractViolation("tensor: rank must be >= 1");
  for (auto e : shape)
    if (e == 0) throw ContractViolation("tensor: zero extent in shape " + to_string(shape));
}

}  // namespace

template <class T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)) {
  check_extents(shape_);
  data_.assign(numel(shape_), fill);
}

template <class T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_extents(shape_);
  if (data_.size() != numel(shape_))
    throw ContractViolation("tensor: data length " + std::to_string(data_.size()) +
                            " does not match shape " + to_string(shape_));
}

template <class T>
Tensor<T> Tensor<T>::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t.data_[i * n + i] = T(1);
  return t;
}

template <class T>
std::size_t Tensor<T>::dim(int axis) const {
  const int r = static_cast<int>(shape_.size());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r)
    throw ContractViolation("tensor: axis " + std::to_string(axis) + " out of range for " + to_string(shape_));
  return shape_[static_cast<std::size_t>(a)];
}

template <class T>
std::size_t Tensor<T>::offset(std::initializer_list<std::size_t> index) const {
  if (index.size() != shape_.size())
    throw ContractViolation("tensor: index rank does not match " + to_string(shape_));
  std::size_t off = 0;
  std::size_t k = 0;
  for (auto i : index) {
    if (i >= shape_[k]) throw ContractViolation("tensor: index out of range for " + to_string(shape_));
    off = off * shape_[k] + i;
    ++k;
  }
  return off;
}

template <class T>
T& Tensor<T>::at(std::initializer_list<std::size_t> index) {
  return data_[offset(index)];
}

template <class T>
const T& Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  return data_[offset(index)];
}

template <class T>
Tensor<T> Tensor<T>::reshape(Shape shape) const& {
  Tensor copy = *this;
  return std::move(copy).reshape(std::move(shape));
}

template <class T>
Tensor<T> Tensor<T>::reshape(Shape shape) && {
  check_extents(shape);
  if (numel(shape) != data_.size())
    throw ContractViolation("reshape: cannot view " + to_string(shape_) + " as " + to_string(shape));
  shape_ = std::move(shape);
  return std::move(*this);
}

template class Tensor<float>;
template class Tensor<double>;

template <class T>
void expect_shape(const Tensor<T>& t, const Shape& expected, const char* what) {
  if (t.shape() != expected)
    throw ContractViolation(std::string(what) + ": expected shape " + to_string(expected) + ", got " +
                            to_string(t.shape()));
}

template void expect_shape(const Tensor<float>&, const Shape&, const char*);
template void expect_shape(const Tensor<double>&, const Shape&, const char*);

// xoshiro256** seeded through splitmix64.
Rng::Rng(std::uint64_t seed) {
  std::uint64_t x = seed;
  for (auto& s : state_) {
    x += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    s = z ^ (z >> 31);
  }
}

std::uint64_t Rng::next_u64() {
  auto rotl = [](std::uint64_t v, int k) { return (v << k) | (v >> (64 - k)); };
  const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
  const std::uint64_t t = state_[1] << 17;
  state_[2] ^= state_[0];
  state_[3] ^= state_[1];
  state_[1] ^= state_[2];
  state_[0] ^= state_[3];
  state_[2] ^= t;
  state_[3] = rotl(state_[3], 45);
  return result;
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

std::size_t Rng::below(std::size_t n) { return static_cast<std::size_t>(next_u64() % n); }

}  // namespace evim
