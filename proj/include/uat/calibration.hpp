#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "uat/predictions.hpp"

namespace uat {

inline constexpr std::size_t kDefaultBins = 15;

struct ReliabilityBin {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;
  double confidence_sum = 0.0;
  std::size_t correct = 0;

  double mean_confidence() const noexcept { return count ? confidence_sum / count : 0.0; }
  double accuracy() const noexcept { return count ? static_cast<double>(correct) / count : 0.0; }
};

struct CalibrationReport {
  double ece = 0.0;
  std::size_t num_bins = kDefaultBins;
  std::size_t count = 0;
  std::vector<ReliabilityBin> bins;
  double accuracy_overall = 0.0;
  std::optional<double> temperature;
};

/// Bin k (0-based) owns (k/K, (k+1)/K]; bin 0 also owns 0.
std::size_t bin_index(double confidence, std::size_t num_bins);

/// Expected calibration error over fixed-width confidence bins.
/// Throws kEmptyInput for an empty record list.
CalibrationReport compute_ece(std::span<const PredictionRecord> records,
                              std::size_t num_bins = kDefaultBins);

/// Recomputes the bin-weighted gap from a report's bins.
double ece_from_bins(const CalibrationReport& report);

/// Merges reports over disjoint shards (bins are additive).
CalibrationReport merge_reports(std::span<const CalibrationReport> shards);

/// Mean negative log-likelihood of softmax(mean_logits / T) at the true labels.
double mean_nll(std::span<const PredictionRecord> records, double temperature);

/// Scalar temperature minimizing validation NLL, searched over
/// log T in [-3, 3]. Needs mean_logits, N >= 2 and two distinct labels.
double fit_temperature(std::span<const PredictionRecord> validation);

/// Recomputes mean_probs and confidence from softmax(mean_logits / T).
/// predicted_class is kept as is.
std::vector<PredictionRecord> apply_temperature(std::span<const PredictionRecord> records,
                                                double temperature);

struct ShiftMetrics {
  double delta_ece = 0.0;
  double robustness = 0.0;
};

/// delta = ECE_ood - ECE_id, robustness = mean of the two.
ShiftMetrics shift_metrics(const CalibrationReport& id, const CalibrationReport& ood);

/// Maps classes onto coarser groups (e.g. 3-way to binary) by summing
/// probabilities; confidence and prediction are re-derived on the groups.
std::vector<PredictionRecord> collapse_labels(std::span<const PredictionRecord> records,
                                              std::span<const std::size_t> group_of);

void to_json(nlohmann::json& j, const CalibrationReport& r);

/// CSV with columns bin,lo,hi,count,mean_confidence,accuracy.
void write_bins_csv(const std::filesystem::path& path, const CalibrationReport& report);

}  // namespace uat
