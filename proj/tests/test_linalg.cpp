#include <doctest.h>

#include <cmath>
#include <vector>

#include "uat/error.hpp"
#include "uat/linalg.hpp"

using namespace uat;

namespace {

Matrix random_matrix(RngStream& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  Matrix m(r, c);
  for (double& v : m.data()) v = (rng.uniform() * 2.0 - 1.0) * scale;
  return m;
}

Matrix naive_product(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      out(i, j) = s;
    }
  return out;
}

}  // namespace

TEST_CASE("matmul hand cases") {
  const Matrix id{{1, 0}, {0, 1}};
  const Matrix b{{3, 4}, {5, 6}};
  CHECK(matmul(id, b) == b);
  CHECK(matmul(Matrix{{1, 2}}, Matrix{{3}, {4}}) == Matrix{{11}});
}

TEST_CASE("matmul matches triple loop oracle") {
  RngStream rng(7);
  const Matrix a = random_matrix(rng, 5, 7);
  const Matrix b = random_matrix(rng, 7, 3);
  const Matrix got = matmul(a, b);
  const Matrix want = naive_product(a, b);
  for (std::size_t i = 0; i < got.size(); ++i) CHECK(std::abs(got.data()[i] - want.data()[i]) <= 1e-12);

  // Transposed variants agree with explicit transposes.
  const Matrix c = random_matrix(rng, 3, 7);
  const Matrix bt = matmul_bt(a, c);
  const Matrix bt_ref = naive_product(a, transpose(c));
  for (std::size_t i = 0; i < bt.size(); ++i) CHECK(std::abs(bt.data()[i] - bt_ref.data()[i]) <= 1e-12);
  const Matrix d = random_matrix(rng, 5, 4);
  const Matrix at = matmul_at(a, d);
  const Matrix at_ref = naive_product(transpose(a), d);
  for (std::size_t i = 0; i < at.size(); ++i) CHECK(std::abs(at.data()[i] - at_ref.data()[i]) <= 1e-12);
}

TEST_CASE("matmul dimension mismatch names both shapes") {
  try {
    (void)matmul(Matrix(2, 3), Matrix(2, 3));
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kDimensionMismatch);
    const std::string msg = e.what();
    CHECK(msg.find("2x3 x 2x3") != std::string::npos);
  }
}

TEST_CASE("matmul is associative on random triples") {
  RngStream rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.below(6), m = 1 + rng.below(6), p = 1 + rng.below(6),
                      q = 1 + rng.below(6);
    const Matrix a = random_matrix(rng, n, m), b = random_matrix(rng, m, p),
                 c = random_matrix(rng, p, q);
    const Matrix left = matmul(matmul(a, b), c);
    const Matrix right = matmul(a, matmul(b, c));
    double scale = 0.0;
    for (double v : left.data()) scale = std::max(scale, std::abs(v));
    for (std::size_t i = 0; i < left.size(); ++i) {
      CHECK(std::abs(left.data()[i] - right.data()[i]) <= 1e-9 * std::max(1.0, scale));
    }
  }
}

TEST_CASE("softmax_rows examples") {
  const Matrix half = softmax_rows(Matrix{{0, 0}});
  CHECK(half(0, 0) == doctest::Approx(0.5));
  CHECK(half(0, 1) == doctest::Approx(0.5));

  const Matrix s = softmax_rows(Matrix{{1, 0.5}});
  // e / (e + e^0.5)
  CHECK(s(0, 0) == doctest::Approx(0.6225).epsilon(1e-3));
  CHECK(s(0, 1) == doctest::Approx(0.3775).epsilon(1e-3));

  const Matrix big = softmax_rows(Matrix{{1000, 999}});
  CHECK(big.all_finite());
  CHECK(big(0, 0) + big(0, 1) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one on random inputs") {
  RngStream rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const Matrix m = random_matrix(rng, 1 + rng.below(8), 1 + rng.below(8), 50.0);
    const Matrix s = softmax_rows(m);
    for (std::size_t i = 0; i < s.rows(); ++i) {
      double sum = 0.0;
      for (double v : s.row(i)) {
        CHECK(v >= 0.0);
        sum += v;
      }
      CHECK(std::abs(sum - 1.0) <= 1e-9);
    }
  }
}

TEST_CASE("dropout mask degenerate rate keeps everything") {
  RngStream rng(1);
  const DropoutMask m = sample_dropout_mask(rng, 4, 5, 0.0);
  CHECK(m.scale == 1.0);
  for (auto k : m.keep) CHECK(k == 1);
}

TEST_CASE("dropout mask rejects invalid rates") {
  RngStream rng(1);
  CHECK_THROWS_AS(sample_dropout_mask(rng, 2, 2, 1.0), Error);
  CHECK_THROWS_AS(sample_dropout_mask(rng, 2, 2, -0.1), Error);
}

TEST_CASE("dropout mask keep fraction and scale") {
  RngStream rng(99);
  const DropoutMask m = sample_dropout_mask(rng, 100, 100, 0.3);
  CHECK(m.scale == 1.0 / (1.0 - 0.3));
  double kept = 0.0;
  for (auto k : m.keep) kept += k;
  CHECK(std::abs(kept / 10000.0 - 0.70) <= 0.02);
}

TEST_CASE("dropout mask is a pure function of seed and counter") {
  RngStream a(1234, 17), b(1234, 17);
  const DropoutMask ma = sample_dropout_mask(a, 6, 9, 0.25);
  const DropoutMask mb = sample_dropout_mask(b, 6, 9, 0.25);
  CHECK(ma == mb);
  CHECK(a.counter() == b.counter());
  RngStream c(1235, 17);
  CHECK_FALSE(sample_dropout_mask(c, 6, 9, 0.25) == ma);
}

TEST_CASE("inverted dropout is unbiased") {
  RngStream rng(5);
  const Matrix x = random_matrix(rng, 1, 8, 2.0);
  std::vector<double> mean(8, 0.0);
  constexpr int kMasks = 10000;
  for (int i = 0; i < kMasks; ++i) {
    Matrix y = x;
    sample_dropout_mask(rng, 1, 8, 0.3).apply(y);
    for (std::size_t j = 0; j < 8; ++j) mean[j] += y(0, j) / kMasks;
  }
  for (std::size_t j = 0; j < 8; ++j) CHECK(std::abs(mean[j] - x(0, j)) <= 0.02 * std::abs(x(0, j)) + 1e-3);
}

TEST_CASE("column_std examples") {
  const Matrix a{{1.5, -2}, {0.25, 7}};
  const std::vector<Matrix> same{a, a};
  CHECK(column_std(same) == Matrix(2, 2));

  const std::vector<Matrix> pair{Matrix{{0}}, Matrix{{2}}};
  CHECK(column_std(pair)(0, 0) == doctest::Approx(1.0).epsilon(1e-15));

  const std::vector<Matrix> single{a};
  CHECK(column_std(single) == Matrix(2, 2));

  const std::vector<Matrix> bad{Matrix(1, 2), Matrix(2, 1)};
  CHECK_THROWS_AS(column_std(bad), Error);
}

TEST_CASE("column_std matches two-pass population formula") {
  RngStream rng(21);
  std::vector<Matrix> samples;
  for (int i = 0; i < 9; ++i) samples.push_back(random_matrix(rng, 3, 4));
  const Matrix s = column_std(samples);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 4; ++c) {
      double mean = 0.0;
      for (const auto& m : samples) mean += m(r, c) / 9.0;
      double var = 0.0;
      for (const auto& m : samples) var += (m(r, c) - mean) * (m(r, c) - mean) / 9.0;
      CHECK(std::abs(s(r, c) - std::sqrt(var)) <= 1e-12);
    }
}
