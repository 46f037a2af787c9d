#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "uat/predictions.hpp"

namespace uat {

struct CoverageResult {
  double coverage = 0.0;
  /// Absent when no record clears the threshold.
  std::optional<double> selective_accuracy;
  std::size_t accepted = 0;
};

/// Accepts records with confidence >= tau. tau must lie in (0, 1].
CoverageResult coverage_at_threshold(std::span<const PredictionRecord> records, double tau);

struct RiskCoveragePoint {
  double coverage = 0.0;
  double risk = 0.0;
};

struct RiskCoverageCurve {
  std::vector<RiskCoveragePoint> points;
  double aurc = 0.0;
  std::map<double, double> coverage_at;
};

/// Sorts by confidence (descending, ties by example_id) and sweeps every
/// acceptance prefix. AURC is the mean risk over the N prefixes.
RiskCoverageCurve risk_coverage(std::span<const PredictionRecord> records,
                                std::span<const double> thresholds = {});

double aurc_from_points(std::span<const RiskCoveragePoint> points);

inline const std::vector<double> kDefaultThresholds{0.9, 0.8, 0.7};

struct ThresholdPolicy {
  enum class Kind { kFixed, kCoverageTarget };
  Kind kind = Kind::kFixed;
  std::vector<double> values{kDefaultThresholds};

  static ThresholdPolicy fixed(std::vector<double> taus = kDefaultThresholds);
  static ThresholdPolicy coverage_targets(std::vector<double> targets);
};

/// Thresholds chosen on validation records only. For a coverage target c,
/// tau is the ceil(c*N)-th largest validation confidence.
std::vector<double> select_thresholds(std::span<const PredictionRecord> validation,
                                      const ThresholdPolicy& policy);

void save_thresholds(const std::filesystem::path& path, std::span<const double> taus);
std::vector<double> load_thresholds(const std::filesystem::path& path);

void to_json(nlohmann::json& j, const RiskCoverageCurve& c);

/// Writes coverage,risk rows.
void write_curve_csv(const std::filesystem::path& path, const RiskCoverageCurve& curve);

}  // namespace uat
