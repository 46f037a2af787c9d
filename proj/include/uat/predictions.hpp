#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "uat/linalg.hpp"
#include "uat/mcinfer.hpp"

namespace uat {

/// One line of a prediction dump. The JSON field names are
/// example_id, label, mean_probs, mean_logits, predicted_class, confidence,
/// predictive_variance, token_uncertainty and (optionally) per_pass_logits.
struct PredictionRecord {
  std::uint64_t example_id = 0;
  std::size_t label = 0;
  std::vector<double> mean_probs;
  std::vector<double> mean_logits;
  std::size_t predicted_class = 0;
  double confidence = 0.0;
  double predictive_variance = 0.0;
  std::vector<double> token_uncertainty;
  std::optional<Matrix> per_pass_logits;

  bool correct() const noexcept { return predicted_class == label; }

  friend bool operator==(const PredictionRecord&, const PredictionRecord&) = default;
};

PredictionRecord make_record(std::uint64_t example_id, std::size_t label,
                             const McOutcome& outcome, bool keep_passes = false);

void write_predictions(std::ostream& out, std::span<const PredictionRecord> records);
void write_predictions(const std::filesystem::path& path,
                       std::span<const PredictionRecord> records);

/// Parses a dump. Malformed lines throw kFormat naming the 1-based line.
/// Only example_id, label, predicted_class and confidence are mandatory.
std::vector<PredictionRecord> read_predictions(std::istream& in);
std::vector<PredictionRecord> read_predictions(const std::filesystem::path& path);

}  // namespace uat
