#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "uat/linalg.hpp"
#include "uat/rng.hpp"

namespace uat {

using TokenId = std::uint32_t;

/// Keys holding this id are masked out of attention.
inline constexpr TokenId kPadToken = 0;
/// Position 0 of every sequence; the classifier reads its final hidden state.
inline constexpr TokenId kClsToken = 1;

struct EncoderConfig {
  std::size_t vocab_size = 64;
  std::size_t max_seq_len = 16;
  std::size_t num_layers = 4;
  std::size_t num_heads = 4;
  std::size_t model_dim = 32;
  std::size_t ff_dim = 64;
  std::size_t num_classes = 3;
  double dropout_embedding = 0.1;
  double dropout_attention = 0.2;
  double dropout_ffn = 0.3;
  double lambda = 0.5;
  std::size_t mc_samples = 5;

  std::size_t head_dim() const noexcept { return model_dim / num_heads; }

  /// Throws kInvalidConfig on any violated invariant.
  void validate() const;

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);

struct LayerNormParams {
  std::vector<double> gain;
  std::vector<double> bias;
  friend bool operator==(const LayerNormParams&, const LayerNormParams&) = default;
};

struct LayerWeights {
  Matrix wq, wk, wv, wo;  // d x d, applied as x · W
  std::vector<double> bq, bk, bv, bo;
  LayerNormParams ln_attention;
  Matrix ff_in;   // d x ff
  std::vector<double> ff_in_bias;
  Matrix ff_out;  // ff x d
  std::vector<double> ff_out_bias;
  LayerNormParams ln_ffn;
  friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

/// All trainable parameters. Uncertainty modulation adds none.
struct EncoderWeights {
  Matrix token_embedding;     // vocab x d
  Matrix position_embedding;  // max_seq_len x d
  LayerNormParams ln_embedding;
  std::vector<LayerWeights> layers;
  Matrix classifier;  // d x classes
  std::vector<double> classifier_bias;

  /// Zero-valued weights with the shapes `config` requires.
  static EncoderWeights zeros(const EncoderConfig& config);
  /// Seeded random initialization.
  static EncoderWeights initialize(const EncoderConfig& config, std::uint64_t seed);

  /// Throws kDimensionMismatch if any tensor disagrees with `config`.
  void check_compatible(const EncoderConfig& config) const;
  bool all_finite() const;
  std::size_t parameter_count() const;

  /// Visits every parameter tensor in a fixed order as (name, values).
  void for_each_tensor(const std::function<void(const std::string&, std::span<double>)>& fn);
  void for_each_tensor(
      const std::function<void(const std::string&, std::span<const double>)>& fn) const;

  friend bool operator==(const EncoderWeights&, const EncoderWeights&) = default;
};

enum class Component : std::uint8_t { kEmbedding = 0, kAttention = 1, kFeedForward = 2 };

/// Which dropout sites are live for one forward pass, and the random
/// streams feeding them. Layer 0 is the embedding; layers 1..L are encoder
/// blocks.
struct StochasticityPlan {
  enum class Mode { kDeterministic, kAllLayers, kSingleLayer, kComponentSubset };

  Mode mode = Mode::kDeterministic;
  std::uint64_t seed = 0;
  std::uint64_t pass = 0;
  std::size_t layer = 0;
  std::array<bool, 3> components{true, true, true};
  /// Optional per-layer pass index (size L+1). When set, layer l draws its
  /// masks as if it were pass `layer_pass[l]`, which lets a caller freeze
  /// or resample one layer's noise independently of the others.
  std::vector<std::uint64_t> layer_pass;

  static StochasticityPlan deterministic();
  static StochasticityPlan all_layers(std::uint64_t seed, std::uint64_t pass);
  static StochasticityPlan single_layer(std::size_t layer, std::uint64_t seed,
                                        std::uint64_t pass);
  static StochasticityPlan component_subset(std::array<bool, 3> components,
                                            std::uint64_t seed, std::uint64_t pass);

  bool active(std::size_t layer_index, Component c) const noexcept;
  RngStream stream(std::size_t layer_index, Component c, std::size_t head = 0) const noexcept;
};

struct ForwardTrace {
  /// h^(0) (embedding output after dropout) through h^(L).
  std::vector<Matrix> hidden;
  /// attention[l][h]: post-softmax weights of encoder layer l+1, head h.
  std::vector<std::vector<Matrix>> attention;
  std::vector<double> logits;
};

/// Scaled dot-product logits q · kᵀ / sqrt(head_dim).
Matrix attention_logits(const Matrix& q, const Matrix& k, std::size_t head_dim);

/// Multiplies column j of `a` by exp(-lambda · U_j).
Matrix modulate_logits(const Matrix& a, std::span<const double> token_uncertainty,
                       double lambda);

/// Token + position embedding, layer norm, then embedding dropout per plan.
Matrix embed(std::span<const TokenId> tokens, const EncoderWeights& weights,
             const EncoderConfig& config, const StochasticityPlan& plan);

/// One post-norm encoder block (1-based `layer`). `attention_out`, when
/// given, receives the per-head attention weights.
Matrix encode_layer(const Matrix& x, std::size_t layer, std::span<const TokenId> tokens,
                    const EncoderWeights& weights, const EncoderConfig& config,
                    const StochasticityPlan& plan, std::span<const double> token_uncertainty,
                    std::vector<Matrix>* attention_out = nullptr);

/// Classification head on the CLS (position 0) hidden state.
std::vector<double> classify(const Matrix& hidden, const EncoderWeights& weights);

/// Layers 1..L plus classifier on an already-computed embedding `z`.
/// An empty `token_uncertainty` means no modulation.
ForwardTrace encode(const Matrix& z, std::span<const TokenId> tokens,
                    const EncoderWeights& weights, const EncoderConfig& config,
                    const StochasticityPlan& plan,
                    std::span<const double> token_uncertainty = {});

ForwardTrace forward(std::span<const TokenId> tokens, const EncoderWeights& weights,
                     const EncoderConfig& config, const StochasticityPlan& plan,
                     std::span<const double> token_uncertainty = {});

/// Validates token ids and length against `config`.
void check_tokens(std::span<const TokenId> tokens, const EncoderConfig& config);

}  // namespace uat
