#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "edue/error.hpp"

namespace edue {

// Extents of a rank-4 tensor laid out as (batch, channels, height, width).
struct Shape {
  std::size_t n = 1, c = 1, h = 1, w = 1;

  [[nodiscard]] constexpr std::size_t numel() const { return n * c * h * w; }
  [[nodiscard]] constexpr std::size_t plane() const { return h * w; }
  constexpr bool operator==(const Shape&) const = default;

  [[nodiscard]] std::string str() const {
    std::ostringstream os;
    os << '(' << n << ',' << c << ',' << h << ',' << w << ')';
    return os.str();
  }
};

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw ShapeError(std::string(op) + ": " + a.str() + " vs " + b.str());
}

// Dense row-major tensor. `grad` is allocated iff `requires_grad` is set.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : shape_(shape), data_(shape.numel(), fill) {
    set_requires_grad(requires_grad);
  }
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.numel())
      throw ShapeError("data length " + std::to_string(data_.size()) + " does not match " +
                       shape_.str());
    set_requires_grad(requires_grad);
  }

  [[nodiscard]] const Shape& shape() const { return shape_; }
  [[nodiscard]] std::size_t numel() const { return data_.size(); }
  [[nodiscard]] std::size_t size() const { return data_.size(); }

  [[nodiscard]] std::span<T> data() & { return data_; }
  [[nodiscard]] std::span<const T> data() const& { return data_; }
  std::span<const T> data() const&& = delete;  // would dangle
  [[nodiscard]] const std::vector<T>& vec() const { return data_; }
  std::vector<T>& vec() { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
    return data_[index(n, c, y, x)];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return data_[index(n, c, y, x)];
  }

  [[nodiscard]] bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool on) {
    requires_grad_ = on;
    if (on)
      grad_.assign(data_.size(), T(0));
    else
      grad_.clear();
  }
  [[nodiscard]] std::span<T> grad() { return grad_; }
  [[nodiscard]] std::span<const T> grad() const { return grad_; }
  void zero_grad() { std::fill(grad_.begin(), grad_.end(), T(0)); }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  // One (c, h, w) slab from the batch axis, as a batch-of-one tensor.
  [[nodiscard]] Tensor slice(std::size_t n) const {
    const std::size_t len = shape_.c * shape_.plane();
    Shape s{1, shape_.c, shape_.h, shape_.w};
    return Tensor(s, std::vector<T>(data_.begin() + n * len, data_.begin() + (n + 1) * len));
  }

  [[nodiscard]] bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <class U>
  [[nodiscard]] Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

 private:
  [[nodiscard]] std::size_t index(std::size_t n, std::size_t c, std::size_t y,
                                  std::size_t x) const {
    return ((n * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }

  Shape shape_{1, 1, 1, 1};
  std::vector<T> data_ = std::vector<T>(1, T(0));
  bool requires_grad_ = false;
  std::vector<T> grad_;
};

// Concatenate batch-of-one tensors along the batch axis.
template <class T>
Tensor<T> batch_of(std::span<const Tensor<T>* const> items) {
  if (items.empty()) throw ShapeError("batch_of: empty input");
  Shape s = items.front()->shape();
  if (s.n != 1) throw ShapeError("batch_of: items must have batch extent 1, got " + s.str());
  std::vector<T> data;
  data.reserve(s.numel() * items.size());
  for (const auto* t : items) {
    require_same_shape(t->shape(), s, "batch_of");
    data.insert(data.end(), t->vec().begin(), t->vec().end());
  }
  s.n = items.size();
  return Tensor<T>(s, std::move(data));
}

template <class T>
double sum_of(const Tensor<T>& t) {
  double acc = 0.0;
  for (T v : t.data()) acc += static_cast<double>(v);
  return acc;
}

}  // namespace edue
