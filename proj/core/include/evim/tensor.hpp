#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace evim {

using Shape = std::vector<std::size_t>;

/// Raised when an operation is called with arguments that break its shape or
/// value contract. The message names the operation and the offending shapes.
class ContractViolation : public std::invalid_argument {
 public:
  explicit ContractViolation(const std::string& what) : std::invalid_argument(what) {}
};

std::string to_string(const Shape& shape);
std::size_t numel(const Shape& shape);

enum class DType : std::uint32_t { f32 = 0, f64 = 1 };

template <class T>
inline constexpr bool is_supported_scalar_v = std::is_same_v<T, float> || std::is_same_v<T, double>;

template <class T>
constexpr DType dtype_of() {
  static_assert(is_supported_scalar_v<T>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

const char* dtype_name(DType dtype);

/// Dense row-major tensor with value semantics. Rank is at least one; the
/// default-constructed tensor is an "absent" placeholder (rank 0, no data)
/// used for optional parameters.
template <class T>
class Tensor {
  static_assert(is_supported_scalar_v<T>, "Tensor supports float and double only");

 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, T value) { return Tensor(std::move(shape), value); }
  static Tensor identity(std::size_t n);
  static Tensor of(std::initializer_list<T> values) {
    return Tensor(Shape{values.size()}, std::vector<T>(values));
  }

  bool empty() const { return shape_.empty(); }
  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  /// Extent of axis `axis`; negative values count from the back.
  std::size_t dim(int axis) const;
  std::size_t size() const { return data_.size(); }

  std::span<const T> data() const& { return data_; }
  std::span<T> data() & { return data_; }
  std::span<const T> data() && = delete;  // would dangle
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t flat) { return data_[flat]; }
  const T& operator[](std::size_t flat) const { return data_[flat]; }

  T& at(std::initializer_list<std::size_t> index);
  const T& at(std::initializer_list<std::size_t> index) const;
  std::size_t offset(std::initializer_list<std::size_t> index) const;

  Tensor reshape(Shape shape) const&;
  Tensor reshape(Shape shape) &&;

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

/// Throws ContractViolation unless `t` has exactly `expected` as its shape.
template <class T>
void expect_shape(const Tensor<T>& t, const Shape& expected, const char* what);

/// Portable seeded generator. Distribution code is local so sequences do not
/// depend on the standard library implementation.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  std::size_t below(std::size_t n);

  template <class T>
  Tensor<T> normal_tensor(Shape shape, double stddev = 1.0) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(stddev * normal());
    return t;
  }
  template <class T>
  Tensor<T> uniform_tensor(Shape shape, double lo, double hi) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(uniform(lo, hi));
    return t;
  }

 private:
  std::uint64_t state_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace evim
