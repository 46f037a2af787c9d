#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "uat/encoder.hpp"

namespace uat {

/// Counts forward work done by run_mc_inference. Tests use it to check
/// that uncertainty estimation needs no passes beyond the M prediction
/// passes.
struct PassCounter {
  std::size_t embeddings = 0;
  std::size_t encoder_passes = 0;
};

struct McOutcome {
  Matrix per_pass_logits;  // M x classes
  std::vector<double> mean_probs;
  std::vector<double> mean_logits;
  /// Population variance across passes of each class probability.
  std::vector<double> class_variance;
  /// class_variance at the predicted class.
  double predictive_variance = 0.0;
  std::size_t predicted_class = 0;
  double confidence = 0.0;
  std::vector<double> token_uncertainty;
  std::size_t pass_count = 0;
};

/// Running per-token uncertainty: the mean over embedding dimensions of the
/// population standard deviation of each coordinate across the samples
/// added so far.
class TokenUncertaintyAccumulator {
 public:
  void add(const Matrix& embedding);
  std::size_t count() const noexcept { return count_; }
  std::vector<double> current() const;

 private:
  std::size_t count_ = 0;
  Matrix mean_;
  Matrix m2_;
};

/// U(x_j) from a list of embedding samples (T x d each).
std::vector<double> token_uncertainty_running(std::span<const Matrix> samples);

/// Monte Carlo inference with uncertainty-weighted attention. Each of the
/// config.mc_samples passes draws fresh masks, embeds once, folds that
/// embedding into the running uncertainty, and runs the encoder modulated by
/// the updated estimate. Deterministic in (tokens, weights, config, seed).
McOutcome run_mc_inference(std::span<const TokenId> tokens, const EncoderWeights& weights,
                           const EncoderConfig& config, std::uint64_t seed,
                           PassCounter* counter = nullptr);

/// Single deterministic pass reported in the same shape (M = 1, no dropout).
McOutcome run_deterministic(std::span<const TokenId> tokens, const EncoderWeights& weights,
                            const EncoderConfig& config, PassCounter* counter = nullptr);

/// Aggregates per-pass logits (rows) into an outcome; token_uncertainty is
/// left empty.
McOutcome aggregate_passes(const Matrix& per_pass_logits);

/// -Σ p log p (natural log), with 0 log 0 = 0.
double predictive_entropy(std::span<const double> probs);

std::size_t argmax(std::span<const double> v);

}  // namespace uat
