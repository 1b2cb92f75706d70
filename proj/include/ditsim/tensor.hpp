#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace ditsim {

/// Thrown when an operation receives arguments that violate its shape or
/// value contract.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

/// Dense row-major n-dimensional array.
///
/// Storage is a flat contiguous buffer; `array()` exposes it as an Eigen
/// array so elementwise arithmetic can use Eigen expressions. Reductions whose
/// summation order matters for bit-exactness are written as explicit loops in
/// kernels.hpp instead.
template <typename Scalar>
class DenseTensor {
 public:
  using value_type = Scalar;
  using ArrayMap = Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>;
  using ConstArrayMap =
      Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>;

  DenseTensor() = default;

  explicit DenseTensor(Shape shape, Scalar fill = Scalar(0))
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

  DenseTensor(Shape shape, std::vector<Scalar> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size()) {
      throw ContractError("tensor data length " + std::to_string(data_.size()) +
                          " does not match shape " + shape_string(shape_));
    }
  }

  /// Builds a rank-2 tensor from nested rows.
  static DenseTensor from_rows(
      std::initializer_list<std::initializer_list<Scalar>> rows) {
    const std::size_t m = rows.size();
    const std::size_t n = m ? rows.begin()->size() : 0;
    std::vector<Scalar> data;
    data.reserve(m * n);
    for (const auto& row : rows) {
      if (row.size() != n) throw ContractError("ragged rows");
      data.insert(data.end(), row.begin(), row.end());
    }
    return DenseTensor({m, n}, std::move(data));
  }

  static DenseTensor vector(std::initializer_list<Scalar> values) {
    return DenseTensor({values.size()}, std::vector<Scalar>(values));
  }

  static DenseTensor identity(std::size_t n) {
    DenseTensor out({n, n});
    for (std::size_t i = 0; i < n; ++i) out(i, i) = Scalar(1);
    return out;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  std::size_t bytes() const { return data_.size() * sizeof(Scalar); }
  bool empty() const { return data_.empty(); }

  /// Rows and columns of a rank-2 tensor.
  std::size_t rows() const { return shape_.at(0); }
  std::size_t cols() const { return shape_.at(1); }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::span<Scalar> flat() { return data_; }
  std::span<const Scalar> flat() const { return data_; }
  const std::vector<Scalar>& storage() const { return data_; }

  Scalar& operator[](std::size_t i) { return data_[i]; }
  const Scalar& operator[](std::size_t i) const { return data_[i]; }

  Scalar& operator()(std::size_t r, std::size_t c) {
    return data_[r * shape_[1] + c];
  }
  const Scalar& operator()(std::size_t r, std::size_t c) const {
    return data_[r * shape_[1] + c];
  }
  Scalar& operator()(std::size_t a, std::size_t b, std::size_t c) {
    return data_[(a * shape_[1] + b) * shape_[2] + c];
  }
  const Scalar& operator()(std::size_t a, std::size_t b, std::size_t c) const {
    return data_[(a * shape_[1] + b) * shape_[2] + c];
  }

  std::span<Scalar> row(std::size_t r) {
    const std::size_t n = shape_[1];
    return {data_.data() + r * n, n};
  }
  std::span<const Scalar> row(std::size_t r) const {
    const std::size_t n = shape_[1];
    return {data_.data() + r * n, n};
  }

  ArrayMap array() { return ArrayMap(data_.data(), Eigen::Index(data_.size())); }
  ConstArrayMap array() const {
    return ConstArrayMap(data_.data(), Eigen::Index(data_.size()));
  }

  DenseTensor reshaped(Shape shape) const {
    return DenseTensor(std::move(shape), data_);
  }

  bool all_finite() const {
    for (Scalar v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  /// Bitwise equality of shape and every element.
  friend bool operator==(const DenseTensor& a, const DenseTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<Scalar> data_;
};

using Tensor = DenseTensor<double>;

}  // namespace ditsim
