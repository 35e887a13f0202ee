#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "twinseq/core/errors.hpp"

namespace twinseq {

// Dense row-major matrix. Vectors are 1 x n rows.
template <typename Scalar>
class Matrix {
 public:
  using value_type = Scalar;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, Scalar fill = Scalar(0))
      : rows_(rows), cols_(cols), values_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<Scalar> values)
      : rows_(rows), cols_(cols), values_(std::move(values)) {
    if (values_.size() != rows_ * cols_) {
      throw ShapeError("matrix value count " + std::to_string(values_.size()) +
                       " does not match " + std::to_string(rows_) + "x" +
                       std::to_string(cols_));
    }
  }
  Matrix(std::initializer_list<std::initializer_list<Scalar>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    values_.reserve(rows_ * cols_);
    for (const auto& row : rows) {
      if (row.size() != cols_) throw ShapeError("ragged matrix literal");
      values_.insert(values_.end(), row.begin(), row.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = Scalar(1);
    return m;
  }

  static Matrix row_vector(std::span<const Scalar> values) {
    return Matrix(1, values.size(), std::vector<Scalar>(values.begin(), values.end()));
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }
  bool same_shape(const Matrix& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  Scalar& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
  Scalar operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }
  Scalar& operator[](std::size_t i) { return values_[i]; }
  Scalar operator[](std::size_t i) const { return values_[i]; }

  Scalar* data() { return values_.data(); }
  const Scalar* data() const { return values_.data(); }
  std::span<Scalar> row(std::size_t r) { return {values_.data() + r * cols_, cols_}; }
  std::span<const Scalar> row(std::size_t r) const {
    return {values_.data() + r * cols_, cols_};
  }
  std::span<Scalar> values() { return values_; }
  std::span<const Scalar> values() const { return values_; }

  void fill(Scalar v) { std::fill(values_.begin(), values_.end(), v); }

  Matrix transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
  }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(),
                       [](Scalar v) { return std::isfinite(v); });
  }

  template <typename Other>
  Matrix<Other> cast() const {
    std::vector<Other> out(values_.begin(), values_.end());
    return Matrix<Other>(rows_, cols_, std::move(out));
  }

  // Bitwise value equality (same shape, identical entries).
  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.values_ == b.values_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<Scalar> values_;
};

template <typename Scalar>
Scalar max_abs_difference(const Matrix<Scalar>& a, const Matrix<Scalar>& b) {
  if (!a.same_shape(b)) throw ShapeError("max_abs_difference: shape mismatch");
  Scalar worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

inline std::string shape_string(std::size_t rows, std::size_t cols) {
  return std::to_string(rows) + "x" + std::to_string(cols);
}

template <typename Scalar>
std::string shape_string(const Matrix<Scalar>& m) {
  return shape_string(m.rows(), m.cols());
}

}  // namespace twinseq
