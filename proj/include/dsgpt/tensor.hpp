#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dsgpt {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible operand shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A forward op produced NaN or Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense n-dimensional array stored as a row-major matrix whose columns are
/// the last axis and whose rows are the flattened leading axes.
template <typename Scalar>
class Tensor {
 public:
  using Matrix = MatrixX<Scalar>;

  Tensor() : Tensor(Shape{1}) {}

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    check_shape();
    value_ = Matrix::Zero(rows_of(shape_), shape_.back());
  }

  Tensor(Shape shape, std::span<const Scalar> values) : Tensor(std::move(shape)) {
    if (values.size() != size()) {
      throw DimensionError("tensor " + to_string(shape_) + " needs " + std::to_string(size()) +
                           " values, got " + std::to_string(values.size()));
    }
    std::copy(values.begin(), values.end(), value_.data());
  }

  Tensor(Shape shape, std::initializer_list<Scalar> values)
      : Tensor(std::move(shape), std::span<const Scalar>(values.begin(), values.size())) {}

  Tensor(Shape shape, Matrix values) : shape_(std::move(shape)), value_(std::move(values)) {
    check_shape();
    if (value_.rows() != static_cast<Eigen::Index>(rows_of(shape_)) ||
        value_.cols() != static_cast<Eigen::Index>(shape_.back())) {
      throw DimensionError("matrix " + std::to_string(value_.rows()) + "x" +
                           std::to_string(value_.cols()) + " does not fit tensor " +
                           to_string(shape_));
    }
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return static_cast<std::size_t>(value_.size()); }

  Matrix& value() { return value_; }
  const Matrix& value() const { return value_; }

  std::span<Scalar> data() { return {value_.data(), size()}; }
  std::span<const Scalar> data() const { return {value_.data(), size()}; }

  Scalar& operator[](std::size_t i) { return value_.data()[i]; }
  Scalar operator[](std::size_t i) const { return value_.data()[i]; }

  bool requires_grad() const { return requires_grad_; }

  Tensor& set_requires_grad(bool on) {
    requires_grad_ = on;
    if (on && !grad_) grad_ = Matrix::Zero(value_.rows(), value_.cols());
    return *this;
  }

  bool has_grad() const { return grad_.has_value(); }

  Matrix& grad() {
    if (!grad_) throw Error("tensor has no gradient buffer");
    return *grad_;
  }
  const Matrix& grad() const {
    if (!grad_) throw Error("tensor has no gradient buffer");
    return *grad_;
  }

  void zero_grad() {
    if (grad_) grad_->setZero();
  }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> out(shape_, value_.template cast<Other>().eval());
    out.set_requires_grad(requires_grad_);
    return out;
  }

 private:
  static std::size_t rows_of(const Shape& shape) {
    return shape.size() <= 1 ? 1 : shape_size(shape) / shape.back();
  }

  void check_shape() const {
    if (shape_.empty()) throw DimensionError("tensor shape must have at least one extent");
    for (auto extent : shape_) {
      if (extent == 0) throw DimensionError("tensor extents must be positive: " + to_string(shape_));
    }
  }

  Shape shape_;
  Matrix value_;
  std::optional<Matrix> grad_;
  bool requires_grad_ = false;
};

}  // namespace dsgpt
