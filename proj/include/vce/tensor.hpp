#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace vce {

/// NCHW extent of a dense 4-D tensor.
struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  constexpr std::size_t numel() const noexcept {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  constexpr std::size_t plane() const noexcept { return static_cast<std::size_t>(h) * w; }

  friend constexpr bool operator==(const Shape&, const Shape&) = default;
};

inline std::string to_string(const Shape& s) {
  return std::to_string(s.n) + "x" + std::to_string(s.c) + "x" + std::to_string(s.h) + "x" +
         std::to_string(s.w);
}

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

inline void expect_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (!(a == b)) {
    throw ShapeError(std::string(what) + ": shape mismatch " + to_string(a) + " vs " +
                     to_string(b));
  }
}

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T{0}) : shape_(s), data_(s.numel(), fill) {}
  Tensor(Shape s, std::vector<T> data) : shape_(s), data_(std::move(data)) {
    if (data_.size() != shape_.numel()) {
      throw ShapeError("Tensor: data size does not match shape " + to_string(s));
    }
  }

  static Tensor scalar(T v) { return Tensor(Shape{1, 1, 1, 1}, v); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> span() noexcept { return data_; }
  std::span<const T> span() const noexcept { return data_; }
  const std::vector<T>& vec() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& operator()(int n, int c, int h, int w) noexcept { return data_[offset(n, c, h, w)]; }
  const T& operator()(int n, int c, int h, int w) const noexcept {
    return data_[offset(n, c, h, w)];
  }

  T* plane(int n, int c) noexcept { return data_.data() + offset(n, c, 0, 0); }
  const T* plane(int n, int c) const noexcept { return data_.data() + offset(n, c, 0, 0); }

  T item() const {
    if (data_.size() != 1) throw ShapeError("Tensor::item on non-scalar " + to_string(shape_));
    return data_[0];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape s) const {
    if (s.numel() != numel()) throw ShapeError("Tensor::reshaped: element count differs");
    return Tensor(s, data_);
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  /// Copies batch element `n` into a 1×C×H×W tensor.
  Tensor slice_batch(int n) const {
    Shape s{1, shape_.c, shape_.h, shape_.w};
    auto first = data_.begin() + static_cast<std::ptrdiff_t>(offset(n, 0, 0, 0));
    return Tensor(s, std::vector<T>(first, first + static_cast<std::ptrdiff_t>(s.numel())));
  }

 private:
  std::size_t offset(int n, int c, int h, int w) const noexcept {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }

  Shape shape_{};
  std::vector<T> data_;
};

/// Stacks equally shaped 1×C×H×W tensors along the batch axis.
template <class T>
Tensor<T> stack_batch(std::span<const Tensor<T>> items) {
  if (items.empty()) throw ShapeError("stack_batch: no items");
  Shape s = items[0].shape();
  s.n = 0;
  std::vector<T> data;
  for (const auto& t : items) {
    if (t.shape().c != s.c || t.shape().h != s.h || t.shape().w != s.w) {
      throw ShapeError("stack_batch: inconsistent item shapes");
    }
    s.n += t.shape().n;
    data.insert(data.end(), t.vec().begin(), t.vec().end());
  }
  return Tensor<T>(s, std::move(data));
}

}  // namespace vce
