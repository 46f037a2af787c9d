#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "uat/encoder.hpp"
#include "uat/task.hpp"

namespace uat {

struct TrainConfig {
  std::size_t epochs = 6;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  /// Dropout at the model config's rates during training.
  bool dropout = true;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct TrainResult {
  EncoderWeights weights;
  /// Mean training loss per epoch (with dropout), plus the loss of the
  /// initial weights at index 0 (deterministic pass).
  std::vector<double> epoch_loss;
  double initial_loss = 0.0;
  double final_loss = 0.0;  // deterministic pass over the training set
};

/// Minibatch Adam on cross-entropy. Shuffling, initialization and dropout
/// streams all derive from `seed`; gradients are summed in example order, so
/// the result is bit-reproducible. Throws kNumerical on a non-finite loss.
TrainResult train_encoder(const std::vector<Example>& train, const EncoderConfig& config,
                          const TrainConfig& train_config, std::uint64_t seed);

/// Mean deterministic cross-entropy.
double mean_loss(const std::vector<Example>& rows, const EncoderWeights& weights,
                 const EncoderConfig& config);

/// Deterministic accuracy.
double accuracy(const std::vector<Example>& rows, const EncoderWeights& weights,
                const EncoderConfig& config);

/// Checkpoint: JSON with the model config and every named tensor.
void save_checkpoint(const std::filesystem::path& path, const EncoderConfig& config,
                     const EncoderWeights& weights);
std::pair<EncoderConfig, EncoderWeights> load_checkpoint(const std::filesystem::path& path);

}  // namespace uat
