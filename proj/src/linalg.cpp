#include "uat/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>

#include "uat/error.hpp"

namespace uat {

namespace {

void require_finite(const Matrix& m, const char* op) {
  if (!m.all_finite()) {
    throw Error(ErrorCode::kNumerical, fmt::format("{}: non-finite entry in result", op));
  }
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (!a.same_shape(b)) {
    throw Error(ErrorCode::kDimensionMismatch,
                fmt::format("{}: shapes {} and {} differ", op, a.shape_string(),
                            b.shape_string()));
  }
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw Error(ErrorCode::kDimensionMismatch,
                fmt::format("matrix {}x{} given {} values", rows_, cols_, data_.size()));
  }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ == 0 ? 0 : rows.begin()->size();
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) {
      throw Error(ErrorCode::kDimensionMismatch, "ragged matrix literal");
    }
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

bool Matrix::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

std::string Matrix::shape_string() const { return fmt::format("{}x{}", rows_, cols_); }

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw Error(ErrorCode::kDimensionMismatch,
                fmt::format("matmul: {} x {}", a.shape_string(), b.shape_string()));
  }
  Matrix out(a.rows(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* o = out.row(i).data();
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      const double* brow = b.row(k).data();
      for (std::size_t j = 0; j < n; ++j) o[j] += aik * brow[j];
    }
  }
  require_finite(out, "matmul");
  return out;
}

Matrix matmul_bt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw Error(ErrorCode::kDimensionMismatch,
                fmt::format("matmul_bt: {} x {}^T", a.shape_string(), b.shape_string()));
  }
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* arow = a.row(i).data();
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const double* brow = b.row(j).data();
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += arow[k] * brow[k];
      out(i, j) = s;
    }
  }
  require_finite(out, "matmul_bt");
  return out;
}

Matrix matmul_at(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw Error(ErrorCode::kDimensionMismatch,
                fmt::format("matmul_at: {}^T x {}", a.shape_string(), b.shape_string()));
  }
  Matrix out(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const double* brow = b.row(k).data();
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = a(k, i);
      double* o = out.row(i).data();
      for (std::size_t j = 0; j < b.cols(); ++j) o[j] += aki * brow[j];
    }
  }
  require_finite(out, "matmul_at");
  return out;
}

Matrix transpose(const Matrix& m) {
  Matrix out(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(j, i) = m(i, j);
  return out;
}

Matrix add(const Matrix& a, const Matrix& b) {
  Matrix out = a;
  add_inplace(out, b);
  return out;
}

void add_inplace(Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "add");
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < ad.size(); ++i) ad[i] += bd[i];
}

void add_row_inplace(Matrix& m, std::span<const double> row) {
  if (row.size() != m.cols()) {
    throw Error(ErrorCode::kDimensionMismatch,
                fmt::format("add_row: row of {} onto {}", row.size(), m.shape_string()));
  }
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += row[j];
  }
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "hadamard");
  Matrix out = a;
  auto od = out.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] *= bd[i];
  return out;
}

void scale_inplace(Matrix& m, double s) {
  for (double& v : m.data()) v *= s;
}

std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> out(logits.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : logits) mx = std::max(mx, v);
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

Matrix softmax_rows(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const auto p = softmax(m.row(i));
    std::copy(p.begin(), p.end(), out.row(i).begin());
  }
  require_finite(out, "softmax_rows");
  return out;
}

void DropoutMask::apply(Matrix& m) const {
  if (m.rows() != rows || m.cols() != cols) {
    throw Error(ErrorCode::kDimensionMismatch,
                fmt::format("dropout mask {}x{} applied to {}", rows, cols, m.shape_string()));
  }
  auto d = m.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = keep[i] ? d[i] * scale : 0.0;
}

DropoutMask sample_dropout_mask(RngStream& rng, std::size_t rows, std::size_t cols,
                                double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw Error(ErrorCode::kInvalidArgument,
                fmt::format("dropout rate {} outside [0, 1)", rate));
  }
  DropoutMask mask;
  mask.rows = rows;
  mask.cols = cols;
  mask.rate = rate;
  mask.scale = 1.0 / (1.0 - rate);
  mask.keep.assign(rows * cols, 1);
  if (rate > 0.0) {
    for (auto& k : mask.keep) k = rng.uniform() >= rate ? 1 : 0;
  }
  return mask;
}

Matrix column_std(std::span<const Matrix> samples) {
  if (samples.empty()) {
    throw Error(ErrorCode::kEmptyInput, "column_std: no samples");
  }
  const Matrix& first = samples.front();
  for (const Matrix& s : samples) require_same_shape(first, s, "column_std");

  // Welford updates: identical samples give exactly zero spread.
  Matrix mean = first;
  Matrix m2(first.rows(), first.cols());
  auto md = mean.data();
  auto m2d = m2.data();
  for (std::size_t k = 1; k < samples.size(); ++k) {
    auto sd = samples[k].data();
    const double n = static_cast<double>(k + 1);
    for (std::size_t i = 0; i < md.size(); ++i) {
      const double delta = sd[i] - md[i];
      md[i] += delta / n;
      m2d[i] += delta * (sd[i] - md[i]);
    }
  }
  const double n = static_cast<double>(samples.size());
  for (double& v : m2d) v = std::sqrt(std::max(v, 0.0) / n);
  return m2;
}

}  // namespace uat
