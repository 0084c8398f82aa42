#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "adseg/error.hpp"

namespace adseg {

using Real = double;
using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major array of reals. Extents are positive; a rank-0 tensor
/// holds a single scalar.
class Tensor {
 public:
  Tensor() : data_(1, Real{0}) {}

  explicit Tensor(Shape shape, Real fill = Real{0}) : shape_(std::move(shape)) {
    check_extents();
    data_.assign(shape_size(shape_), fill);
  }

  Tensor(Shape shape, std::vector<Real> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (data_.size() != shape_size(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor scalar(Real v) { return Tensor(Shape{}, std::vector<Real>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  std::vector<Real>& data() { return data_; }
  const std::vector<Real>& data() const { return data_; }
  Real* ptr() { return data_.data(); }
  const Real* ptr() const { return data_.data(); }

  Real& operator[](std::size_t i) { return data_[i]; }
  Real operator[](std::size_t i) const { return data_[i]; }

  Real& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  Real at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  Real& at(std::size_t c, std::size_t i, std::size_t j) {
    return data_[(c * shape_[1] + i) * shape_[2] + j];
  }
  Real at(std::size_t c, std::size_t i, std::size_t j) const {
    return data_[(c * shape_[1] + i) * shape_[2] + j];
  }

  Real item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](Real v) { return std::isfinite(v); });
  }

  Real sum() const {
    Real s = 0;
    for (Real v : data_) s += v;
    return s;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_extents() const {
    for (std::size_t e : shape_) {
      if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape_));
    }
  }

  Shape shape_;
  std::vector<Real> data_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
  }
}

/// Channel slice [first, first+count) of a [C,H,W] tensor.
inline Tensor slice_channels(const Tensor& t, std::size_t first, std::size_t count) {
  require_rank(t, 3, "slice_channels");
  if (first + count > t.dim(0) || count == 0) throw ShapeError("slice_channels: range out of bounds");
  const std::size_t plane = t.dim(1) * t.dim(2);
  std::vector<Real> out(t.data().begin() + static_cast<std::ptrdiff_t>(first * plane),
                        t.data().begin() + static_cast<std::ptrdiff_t>((first + count) * plane));
  return Tensor({count, t.dim(1), t.dim(2)}, std::move(out));
}

}  // namespace adseg
