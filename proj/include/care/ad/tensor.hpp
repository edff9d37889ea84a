#pragma once

#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "care/error.hpp"

namespace care::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Dense row-major array. The value type of every graph node.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), values_(shape_size(shape_), fill) {
    check_extents();
  }

  BasicTensor(Shape shape, std::vector<T> values)
      : shape_(std::move(shape)), values_(std::move(values)) {
    check_extents();
    if (values_.size() != shape_size(shape_)) {
      throw UsageError("tensor: " + std::to_string(values_.size()) +
                       " values do not fill shape " + shape_str(shape_));
    }
  }

  static BasicTensor scalar(T v) { return BasicTensor({1}, std::vector<T>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  std::span<T> values() noexcept { return values_; }
  std::span<const T> values() const noexcept { return values_; }
  T* data() noexcept { return values_.data(); }
  const T* data() const noexcept { return values_.data(); }

  T& operator[](std::size_t i) { return values_[i]; }
  const T& operator[](std::size_t i) const { return values_[i]; }

  // Rank-2 element access.
  T& at(std::size_t r, std::size_t c) { return values_[r * shape_[1] + c]; }
  const T& at(std::size_t r, std::size_t c) const {
    return values_[r * shape_[1] + c];
  }

  void fill(T v) { std::fill(values_.begin(), values_.end(), v); }

  BasicTensor reshaped(Shape shape) const {
    if (shape_size(shape) != size()) {
      throw UsageError("reshape: " + shape_str(shape_) + " -> " +
                       shape_str(shape));
    }
    return BasicTensor(std::move(shape), values_);
  }

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(values_.begin(), values_.end());
    return BasicTensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const BasicTensor&, const BasicTensor&) = default;

 private:
  void check_extents() const {
    for (std::size_t e : shape_) {
      if (e == 0) throw UsageError("tensor: zero extent in " + shape_str(shape_));
    }
  }

  Shape shape_;
  std::vector<T> values_;
};

using Tensor = BasicTensor<float>;

// A trainable value plus its accumulated gradient.
template <typename T>
struct Parameter {
  BasicTensor<T> value;
  BasicTensor<T> grad;

  Parameter() = default;
  explicit Parameter(BasicTensor<T> v)
      : value(std::move(v)), grad(value.shape(), T{0}) {}

  void zero_grad() { grad.fill(T{0}); }
};

}  // namespace care::ad
