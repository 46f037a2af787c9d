#pragma once

#include <span>
#include <vector>

#include "uat/encoder.hpp"

namespace uat {

/// Cross-entropy of softmax(logits) against `label` for one sequence.
double cross_entropy_loss(std::span<const TokenId> tokens, std::size_t label,
                          const EncoderWeights& weights, const EncoderConfig& config,
                          const StochasticityPlan& plan,
                          std::span<const double> token_uncertainty = {});

/// Same loss, and accumulates its exact gradient into `grads` (shaped like
/// `weights`, e.g. from EncoderWeights::zeros). Dropout masks are drawn from
/// `plan` exactly as in `forward`, so a fixed plan gives a smooth objective.
double cross_entropy_gradient(std::span<const TokenId> tokens, std::size_t label,
                              const EncoderWeights& weights, const EncoderConfig& config,
                              const StochasticityPlan& plan,
                              std::span<const double> token_uncertainty,
                              EncoderWeights& grads);

}  // namespace uat
