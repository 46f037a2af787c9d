#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "uat/rng.hpp"

namespace uat {

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept {
    return data_[r * cols_ + c];
  }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  bool same_shape(const Matrix& o) const noexcept {
    return rows_ == o.rows_ && cols_ == o.cols_;
  }
  bool all_finite() const noexcept;
  std::string shape_string() const;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// a · b.
Matrix matmul(const Matrix& a, const Matrix& b);
/// a · bᵀ.
Matrix matmul_bt(const Matrix& a, const Matrix& b);
/// aᵀ · b.
Matrix matmul_at(const Matrix& a, const Matrix& b);

Matrix transpose(const Matrix& m);
Matrix add(const Matrix& a, const Matrix& b);
void add_inplace(Matrix& a, const Matrix& b);
void add_row_inplace(Matrix& m, std::span<const double> row);
Matrix hadamard(const Matrix& a, const Matrix& b);
void scale_inplace(Matrix& m, double s);

/// Row-wise softmax stabilized by row-max subtraction. Entries equal to
/// -inf are allowed (masked keys) as long as each row has a finite entry.
Matrix softmax_rows(const Matrix& m);

/// Softmax of a single vector.
std::vector<double> softmax(std::span<const double> logits);

/// Inverted-dropout mask: kept entries are multiplied by `scale`.
struct DropoutMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  double rate = 0.0;
  double scale = 1.0;
  std::vector<unsigned char> keep;

  /// Multiplier for entry (r, c): scale if kept, else 0.
  double factor(std::size_t r, std::size_t c) const noexcept {
    return keep[r * cols + c] ? scale : 0.0;
  }
  void apply(Matrix& m) const;

  friend bool operator==(const DropoutMask&, const DropoutMask&) = default;
};

/// Draws one Bernoulli(1 - rate) keep flag per entry from `rng`.
/// Throws kInvalidArgument unless 0 <= rate < 1.
DropoutMask sample_dropout_mask(RngStream& rng, std::size_t rows, std::size_t cols,
                                double rate);

/// Entrywise population standard deviation across samples.
/// A single sample yields the zero matrix.
Matrix column_std(std::span<const Matrix> samples);

}  // namespace uat
