#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "vce/tensor.hpp"

namespace vce {

/// Row-major single-channel 2-D image.
template <class T>
class Image {
 public:
  using value_type = T;

  Image() = default;
  Image(int rows, int cols, T fill = T{0}) : rows_(rows), cols_(cols) {
    if (rows < 0 || cols < 0) throw std::invalid_argument("Image: negative extent");
    px_.assign(static_cast<std::size_t>(rows) * cols, fill);
  }
  Image(int rows, int cols, std::vector<T> px) : rows_(rows), cols_(cols), px_(std::move(px)) {
    if (px_.size() != static_cast<std::size_t>(rows) * cols) {
      throw std::invalid_argument("Image: pixel count does not match extent");
    }
  }

  int rows() const noexcept { return rows_; }
  int cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return px_.size(); }
  bool empty() const noexcept { return px_.empty(); }
  bool square() const noexcept { return rows_ == cols_; }

  T& operator()(int r, int c) noexcept { return px_[static_cast<std::size_t>(r) * cols_ + c]; }
  const T& operator()(int r, int c) const noexcept {
    return px_[static_cast<std::size_t>(r) * cols_ + c];
  }
  T& operator[](std::size_t i) noexcept { return px_[i]; }
  const T& operator[](std::size_t i) const noexcept { return px_[i]; }

  T* data() noexcept { return px_.data(); }
  const T* data() const noexcept { return px_.data(); }
  std::span<const T> pixels() const noexcept { return px_; }
  std::span<T> pixels() noexcept { return px_; }
  const std::vector<T>& vec() const noexcept { return px_; }

  template <class U>
  Image<U> cast() const {
    return Image<U>(rows_, cols_, std::vector<U>(px_.begin(), px_.end()));
  }

  friend bool operator==(const Image&, const Image&) = default;

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<T> px_;
};

using ImageF = Image<float>;
using ImageD = Image<double>;

template <class T, class U>
void expect_same_dims(const Image<T>& a, const Image<U>& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(what) + ": dimension mismatch " +
                                std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                                " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()));
  }
}

/// Wraps an image as a 1×1×H×W tensor.
template <class T, class U>
Tensor<T> to_tensor(const Image<U>& img) {
  return Tensor<T>(Shape{1, 1, img.rows(), img.cols()},
                   std::vector<T>(img.vec().begin(), img.vec().end()));
}

/// Extracts channel `c` of batch element `n`.
template <class T, class U>
Image<T> to_image(const Tensor<U>& t, int n = 0, int c = 0) {
  const U* p = t.plane(n, c);
  return Image<T>(t.shape().h, t.shape().w, std::vector<T>(p, p + t.shape().plane()));
}

}  // namespace vce
