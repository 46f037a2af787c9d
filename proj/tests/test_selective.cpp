#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <vector>

#include "uat/error.hpp"
#include "uat/rng.hpp"
#include "uat/selective.hpp"

using namespace uat;

namespace {

PredictionRecord rec(std::uint64_t id, double conf, bool correct) {
  PredictionRecord r;
  r.example_id = id;
  r.predicted_class = 0;
  r.label = correct ? 0 : 1;
  r.confidence = conf;
  return r;
}

// AURC with records taken in the given order (no sorting).
double aurc_in_order(const std::vector<PredictionRecord>& rs) {
  double total = 0.0;
  for (std::size_t k = 1; k <= rs.size(); ++k) {
    double wrong = 0.0;
    for (std::size_t i = 0; i < k; ++i) wrong += rs[i].correct() ? 0.0 : 1.0;
    total += wrong / k;
  }
  return total / rs.size();
}

std::vector<PredictionRecord> random_records(RngStream& rng, std::size_t n) {
  std::vector<PredictionRecord> rs;
  for (std::size_t i = 0; i < n; ++i) {
    // Coarse confidences so ties occur.
    const double c = static_cast<double>(1 + rng.below(20)) / 20.0;
    rs.push_back(rec(rng.below(1000000), c, rng.uniform() < c));
  }
  return rs;
}

void shuffle(RngStream& rng, std::vector<PredictionRecord>& v) {
  for (std::size_t i = v.size() - 1; i > 0; --i) std::swap(v[i], v[rng.below(i + 1)]);
}

}  // namespace

TEST_CASE("coverage at threshold") {
  const std::vector<PredictionRecord> rs{rec(0, 0.95, true), rec(1, 0.85, false),
                                         rec(2, 0.75, true), rec(3, 0.6, true)};
  CHECK(coverage_at_threshold(rs, 0.5).coverage == 1.0);
  const auto at8 = coverage_at_threshold(rs, 0.8);
  CHECK(at8.coverage == 0.5);
  REQUIRE(at8.selective_accuracy);
  CHECK(*at8.selective_accuracy == 0.5);
  const auto at1 = coverage_at_threshold(rs, 1.0);
  CHECK(at1.coverage == 0.0);
  CHECK_FALSE(at1.selective_accuracy.has_value());
  CHECK_THROWS_AS(coverage_at_threshold(rs, 0.0), Error);
  CHECK_THROWS_AS(coverage_at_threshold(rs, 1.2), Error);
}

TEST_CASE("coverage is nonincreasing in tau") {
  RngStream rng(12);
  const auto rs = random_records(rng, 200);
  double prev = 2.0;
  for (int i = 1; i <= 100; ++i) {
    const double c = coverage_at_threshold(rs, i / 100.0).coverage;
    CHECK(c <= prev);
    prev = c;
  }
}

TEST_CASE("risk coverage hand examples") {
  std::vector<PredictionRecord> rs{rec(0, 0.9, true), rec(1, 0.8, false), rec(2, 0.7, true)};
  const auto curve = risk_coverage(rs);
  REQUIRE(curve.points.size() == 3);
  CHECK(curve.points[0].risk == 0.0);
  CHECK(curve.points[1].risk == 0.5);
  CHECK(curve.points[2].risk == doctest::Approx(1.0 / 3.0));
  CHECK(std::abs(curve.aurc - 0.2778) <= 1e-4);

  for (auto& r : rs) r.label = r.predicted_class;
  CHECK(risk_coverage(rs).aurc == 0.0);
  for (auto& r : rs) r.label = r.predicted_class + 1;
  CHECK(risk_coverage(rs).aurc == 1.0);
  CHECK_THROWS_AS(risk_coverage(std::vector<PredictionRecord>{}), Error);
}

TEST_CASE("AURC matches a brute-force prefix sweep") {
  RngStream rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    auto rs = random_records(rng, 1 + rng.below(100));
    const auto curve = risk_coverage(rs);
    auto sorted = rs;
    std::stable_sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
      return a.confidence != b.confidence ? a.confidence > b.confidence : a.example_id < b.example_id;
    });
    CHECK(std::abs(curve.aurc - aurc_in_order(sorted)) <= 1e-12);
    CHECK(std::abs(curve.aurc - aurc_from_points(curve.points)) <= 1e-12);
    for (std::size_t k = 1; k < curve.points.size(); ++k) {
      CHECK(curve.points[k].coverage > curve.points[k - 1].coverage);
      CHECK(curve.points[k].risk >= 0.0);
      CHECK(curve.points[k].risk <= 1.0);
    }
    // Input order does not matter.
    shuffle(rng, rs);
    CHECK(risk_coverage(rs).aurc == curve.aurc);
  }
}

TEST_CASE("correctness ranking is optimal") {
  RngStream rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    auto rs = random_records(rng, 40);
    auto oracle = rs;
    std::stable_partition(oracle.begin(), oracle.end(), [](const auto& r) { return r.correct(); });
    const double best = aurc_in_order(oracle);
    for (int p = 0; p < 100; ++p) {
      shuffle(rng, rs);
      CHECK(best <= aurc_in_order(rs) + 1e-15);
    }
  }
}

TEST_CASE("informative confidence beats random ranking") {
  RngStream rng(19);
  std::vector<PredictionRecord> rs;
  for (std::uint64_t i = 0; i < 500; ++i) {
    const double c = 0.34 + 0.66 * rng.uniform();
    rs.push_back(rec(i, c, rng.uniform() < c));
  }
  const double ranked = risk_coverage(rs).aurc;
  double random_mean = 0.0;
  for (int p = 0; p < 20; ++p) {
    shuffle(rng, rs);
    random_mean += aurc_in_order(rs) / 20.0;
  }
  CHECK(ranked + 0.01 < random_mean);
}

TEST_CASE("threshold selection") {
  const std::vector<PredictionRecord> val{rec(0, 0.55, true), rec(1, 0.91, true),
                                          rec(2, 0.73, false), rec(3, 0.66, true)};
  CHECK(select_thresholds(val, ThresholdPolicy::fixed()) == std::vector<double>{0.9, 0.8, 0.7});
  const auto full = select_thresholds(val, ThresholdPolicy::coverage_targets({1.0}));
  CHECK(full == std::vector<double>{0.55});
  const auto half = select_thresholds(val, ThresholdPolicy::coverage_targets({0.5}));
  CHECK(half == std::vector<double>{0.73});
  CHECK(coverage_at_threshold(val, half[0]).coverage == 0.5);
  CHECK_THROWS_AS(select_thresholds(val, ThresholdPolicy::coverage_targets({0.0})), Error);
  CHECK_THROWS_AS(select_thresholds(std::vector<PredictionRecord>{}, ThresholdPolicy::fixed()), Error);
}

TEST_CASE("thresholds round-trip bitwise") {
  const auto dir = std::filesystem::temp_directory_path() / "uat_selective_test";
  const std::vector<double> taus{0.1 + 0.2, 1.0 / 3.0, 0.9};
  save_thresholds(dir / "thresholds.json", taus);
  const auto back = load_thresholds(dir / "thresholds.json");
  CHECK(back == taus);
  std::filesystem::remove_all(dir);
}
