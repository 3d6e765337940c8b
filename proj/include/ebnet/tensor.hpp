#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <ostream>

#include "ebnet/errors.hpp"

namespace ebnet {

using Index = Eigen::Index;

struct Shape4 {
  Index n = 0;
  Index c = 0;
  Index h = 0;
  Index w = 0;

  Index count() const { return n * c * h * w; }
  Index plane() const { return h * w; }
  Index sample_size() const { return c * h * w; }
  bool live() const { return n >= 1 && c >= 1 && h >= 1 && w >= 1; }

  friend bool operator==(const Shape4&, const Shape4&) = default;
};

inline std::ostream& operator<<(std::ostream& os, const Shape4& s) {
  return os << '(' << s.n << ',' << s.c << ',' << s.h << ',' << s.w << ')';
}

template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using MatMap = Eigen::Map<Mat<Scalar>>;

template <typename Scalar>
using ConstMatMap = Eigen::Map<const Mat<Scalar>>;

/// Real-valued NCHW tensor, row-major, with an optional gradient buffer of
/// identical length.
template <typename Scalar>
class Tensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Tensor() = default;
  explicit Tensor(Shape4 shape) : shape_(shape), values_(Array::Zero(shape.count())) {}
  Tensor(Shape4 shape, Scalar fill) : shape_(shape), values_(Array::Constant(shape.count(), fill)) {}
  Tensor(Shape4 shape, Array values) : shape_(shape), values_(std::move(values)) {
    if (values_.size() != shape_.count()) throw ShapeError("tensor values do not match shape");
  }

  const Shape4& shape() const { return shape_; }
  Index size() const { return values_.size(); }
  bool empty() const { return values_.size() == 0; }

  Array& values() { return values_; }
  const Array& values() const { return values_; }
  Scalar* data() { return values_.data(); }
  const Scalar* data() const { return values_.data(); }

  Scalar& operator[](Index i) { return values_[i]; }
  Scalar operator[](Index i) const { return values_[i]; }

  Scalar& at(Index n, Index c, Index h, Index w) {
    return values_[((n * shape_.c + c) * shape_.h + h) * shape_.w + w];
  }
  Scalar at(Index n, Index c, Index h, Index w) const {
    return values_[((n * shape_.c + c) * shape_.h + h) * shape_.w + w];
  }

  Scalar* sample(Index n) { return values_.data() + n * shape_.sample_size(); }
  const Scalar* sample(Index n) const { return values_.data() + n * shape_.sample_size(); }

  /// (c, h*w) view of one sample.
  MatMap<Scalar> sample_matrix(Index n) { return MatMap<Scalar>(sample(n), shape_.c, shape_.plane()); }
  ConstMatMap<Scalar> sample_matrix(Index n) const {
    return ConstMatMap<Scalar>(sample(n), shape_.c, shape_.plane());
  }

  bool has_grad() const { return grad_.has_value(); }
  Array& grad() {
    if (!grad_) grad_ = Array::Zero(values_.size());
    return *grad_;
  }
  const std::optional<Array>& maybe_grad() const { return grad_; }
  void zero_grad() {
    if (grad_) grad_->setZero();
  }
  void drop_grad() { grad_.reset(); }

  void reshape(Shape4 shape) {
    if (shape.count() != values_.size()) throw ShapeError("reshape changes element count");
    shape_ = shape;
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, values_.template cast<Other>());
  }

 private:
  Shape4 shape_{};
  Array values_;
  std::optional<Array> grad_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace ebnet
