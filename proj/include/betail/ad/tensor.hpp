#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace betail::ad {

/// Error raised by tensor ops: shape mismatches, domain violations and
/// non-finite results. The message names the op and the shapes involved.
class TensorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Row-major shape of rank 0..3. Rank 0 is a scalar.
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<int> dims);
  explicit Shape(std::span<const int> dims);

  int rank() const { return rank_; }
  int operator[](int i) const { return dims_[static_cast<std::size_t>(i)]; }
  std::size_t numel() const;

  // Last dimension (1 for scalars) and product of the leading ones.
  int cols() const { return rank_ == 0 ? 1 : dims_[rank_ - 1]; }
  std::size_t rows() const { return numel() / static_cast<std::size_t>(cols()); }

  std::vector<int> dims() const { return {dims_.begin(), dims_.begin() + rank_}; }
  std::string str() const;

  friend bool operator==(const Shape& a, const Shape& b) {
    if (a.rank_ != b.rank_) return false;
    for (int i = 0; i < a.rank_; ++i) {
      if (a.dims_[i] != b.dims_[i]) return false;
    }
    return true;
  }

 private:
  std::array<int, 3> dims_{};
  int rank_ = 0;
};

/// Dense contiguous tensor. T is float for training and double for
/// gradient checking.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(shape), data_(shape.numel(), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.numel()) {
      throw TensorError("Tensor: buffer of " + std::to_string(data_.size()) +
                        " elements does not match shape " + shape_.str());
    }
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::size_t rows() const { return shape_.rows(); }
  int cols() const { return shape_.cols(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& at(std::size_t r, std::size_t c) { return data_[r * static_cast<std::size_t>(cols()) + c]; }
  const T& at(std::size_t r, std::size_t c) const {
    return data_[r * static_cast<std::size_t>(cols()) + c];
  }
  T item() const;

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  Tensor reshaped(Shape shape) const;

 private:
  Shape shape_;
  std::vector<T> data_;
};

template <typename T>
T Tensor<T>::item() const {
  if (data_.size() != 1) {
    throw TensorError("item: tensor of shape " + shape_.str() + " is not a scalar");
  }
  return data_[0];
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
  if (shape.numel() != data_.size()) {
    throw TensorError("reshape: " + shape_.str() + " -> " + shape.str());
  }
  return Tensor(shape, data_);
}

}  // namespace betail::ad
