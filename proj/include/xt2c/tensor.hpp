#pragma once

#include "xt2c/errors.hpp"

#include <Eigen/Core>

#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace xt2c {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::string shape_string(std::span<const std::size_t> shape);

// Dense row-major array with an optional gradient accumulator. Rank-1
// tensors are viewed as a single row when a matrix view is requested.
template <typename T>
class Tensor {
 public:
  using Scalar = T;
  using MatrixMap = Eigen::Map<Matrix<T>>;
  using ConstMatrixMap = Eigen::Map<const Matrix<T>>;

  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape, T fill = T(0))
      : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

  Tensor(std::vector<std::size_t> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != element_count(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string(shape_));
    }
  }

  static Tensor from_matrix(const Matrix<T>& m) {
    Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
    std::copy(m.data(), m.data() + m.size(), t.data_.begin());
    return t;
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  Eigen::Index rows() const {
    if (shape_.empty()) return 1;
    return shape_.size() == 1 ? 1 : static_cast<Eigen::Index>(shape_[0]);
  }
  Eigen::Index cols() const {
    if (shape_.empty()) return 1;
    if (shape_.size() == 1) return static_cast<Eigen::Index>(shape_[0]);
    return static_cast<Eigen::Index>(data_.size() / shape_[0]);
  }

  MatrixMap matrix() { return MatrixMap(data_.data(), rows(), cols()); }
  ConstMatrixMap matrix() const { return ConstMatrixMap(data_.data(), rows(), cols()); }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool on) {
    requires_grad_ = on;
    if (!on) grad_.clear();
  }

  bool has_grad() const { return !grad_.empty(); }
  std::span<T> grad() {
    ensure_grad();
    return grad_;
  }
  std::span<const T> grad() const { return grad_; }
  MatrixMap grad_matrix() {
    ensure_grad();
    return MatrixMap(grad_.data(), rows(), cols());
  }
  void zero_grad() { std::fill(grad_.begin(), grad_.end(), T(0)); }
  void clear_grad() { grad_.clear(); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  static std::size_t element_count(const std::vector<std::size_t>& shape) {
    for (std::size_t s : shape) {
      if (s == 0) throw DimensionError("tensor shape entries must be positive: " + shape_string(shape));
    }
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }

  void ensure_grad() {
    if (grad_.size() != data_.size()) grad_.assign(data_.size(), T(0));
  }

  std::vector<std::size_t> shape_;
  std::vector<T> data_;
  std::vector<T> grad_;
  bool requires_grad_ = false;
};

}  // namespace xt2c
