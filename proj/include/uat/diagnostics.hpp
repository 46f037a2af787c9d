#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "uat/encoder.hpp"

namespace uat {

struct LayerVarianceReport {
  /// Index 0 is the embedding, 1..L the encoder blocks.
  std::vector<double> per_layer_variance;
  /// Empty when the contributions sum to zero (see zero_total).
  std::vector<double> normalized;
  bool zero_total = false;
  double total_variance = 0.0;
  /// total_variance minus the sum of per-layer contributions.
  double residual = 0.0;
  /// Monte Carlo standard error of each per-layer estimate.
  std::vector<double> standard_error;
  std::size_t outer_samples = 0;
  std::size_t inner_samples = 0;
  /// Class whose probability is decomposed (deterministic prediction).
  std::size_t target_class = 0;
};

struct DecompositionOptions {
  std::size_t outer = 16;
  std::size_t inner = 16;
  /// Which dropout sites are live. Only mode and components/layer are used;
  /// seeds and pass indices are assigned by the estimator.
  StochasticityPlan scope = StochasticityPlan::all_layers(0, 0);
  /// Fixed token uncertainty applied in every pass; empty means unmodulated.
  std::vector<double> token_uncertainty;
};

/// Nested Monte Carlo estimate of each layer's share of the variance of the
/// predicted-class probability. For layer l, `outer` draws of the stochastic
/// prefix h^(l-1) are taken; for each, `inner` draws vary only layer l's
/// masks with every other layer's masks held fixed. V^(l) is the mean over
/// outer draws of the (n-1) variance over inner draws. The total comes from
/// a separate all-stochastic run of outer*inner passes.
LayerVarianceReport estimate_layer_variance(std::span<const TokenId> tokens,
                                            const EncoderWeights& weights,
                                            const EncoderConfig& config, std::uint64_t seed,
                                            const DecompositionOptions& options);

/// v / sum(v). Returns nullopt when the sum is zero.
std::optional<std::vector<double>> normalize_contributions(std::span<const double> v);

std::string layer_label(std::size_t layer_index, std::size_t num_layers);

/// Columns layer_index,component_label,variance,normalized. A trailing
/// output row (no dropout in the classifier head) is always zero.
void write_layer_variance_csv(const std::filesystem::path& path,
                              const LayerVarianceReport& report);

}  // namespace uat
