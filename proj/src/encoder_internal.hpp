#pragma once

// Forward-pass tape shared by the encoder and its gradient code.

#include <vector>

#include "uat/encoder.hpp"

namespace uat::detail {

inline constexpr double kLayerNormEps = 1e-5;

struct LayerNormTape {
  Matrix normalized;  // x-hat, before gain and bias
  std::vector<double> inv_std;
};

struct DropoutSite {
  bool applied = false;
  DropoutMask mask;
};

struct LayerTape {
  Matrix input;
  Matrix q, k, v;
  std::vector<Matrix> weights;          // per head, post-softmax
  std::vector<Matrix> weights_dropped;  // per head, after attention dropout
  std::vector<DropoutSite> attention_dropout;
  Matrix context;
  LayerNormTape ln_attention;
  Matrix attention_norm;  // output of the first layer norm
  Matrix ff_pre;          // before GELU
  Matrix ff_act;          // after GELU
  DropoutSite ffn_dropout;
  LayerNormTape ln_ffn;
};

struct ForwardTape {
  LayerNormTape ln_embedding;
  DropoutSite embedding_dropout;
  std::vector<LayerTape> layers;
  Matrix final_hidden;
};

Matrix layer_norm(const Matrix& x, const LayerNormParams& p, LayerNormTape* tape);

double gelu(double x) noexcept;
double gelu_grad(double x) noexcept;

Matrix embed_taped(std::span<const TokenId> tokens, const EncoderWeights& weights,
                   const EncoderConfig& config, const StochasticityPlan& plan,
                   ForwardTape* tape);

Matrix encode_layer_taped(const Matrix& x, std::size_t layer, std::span<const TokenId> tokens,
                          const EncoderWeights& weights, const EncoderConfig& config,
                          const StochasticityPlan& plan,
                          std::span<const double> token_uncertainty,
                          std::vector<Matrix>* attention_out, LayerTape* tape);

}  // namespace uat::detail
