#include "uat/encoder_grad.hpp"

#include <cmath>

#include <fmt/format.h>

#include "encoder_internal.hpp"
#include "uat/error.hpp"

namespace uat {

namespace {

using detail::DropoutSite;
using detail::ForwardTape;
using detail::LayerNormTape;
using detail::LayerTape;

void accumulate(std::span<double> dst, std::span<const double> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void accumulate_colsum(std::span<double> dst, const Matrix& m) {
  for (std::size_t i = 0; i < m.rows(); ++i) accumulate(dst, m.row(i));
}

void undo_dropout(Matrix& grad, const DropoutSite& site) {
  if (site.applied) site.mask.apply(grad);
}

/// Gradient of y = gain * x_hat + bias with respect to x, given dL/dy.
Matrix layer_norm_backward(const Matrix& dy, const LayerNormTape& tape,
                           const LayerNormParams& params, LayerNormParams& grads) {
  const std::size_t n = dy.cols();
  Matrix dx(dy.rows(), n);
  std::vector<double> dxhat(n);
  for (std::size_t i = 0; i < dy.rows(); ++i) {
    const auto xhat = tape.normalized.row(i);
    double mean_dxhat = 0.0;
    double mean_dxhat_xhat = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      grads.gain[j] += dy(i, j) * xhat[j];
      grads.bias[j] += dy(i, j);
      dxhat[j] = dy(i, j) * params.gain[j];
      mean_dxhat += dxhat[j];
      mean_dxhat_xhat += dxhat[j] * xhat[j];
    }
    mean_dxhat /= static_cast<double>(n);
    mean_dxhat_xhat /= static_cast<double>(n);
    for (std::size_t j = 0; j < n; ++j) {
      dx(i, j) = tape.inv_std[i] * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
    }
  }
  return dx;
}

/// Backprop through x · W + b; returns dL/dx.
Matrix linear_backward(const Matrix& x, const Matrix& dy, const Matrix& w, Matrix& dw,
                       std::span<double> db) {
  add_inplace(dw, matmul_at(x, dy));
  accumulate_colsum(db, dy);
  return matmul_bt(dy, w);
}

Matrix layer_backward(const Matrix& dout, const LayerTape& tape, const LayerWeights& w,
                      LayerWeights& g, std::span<const double> mult,
                      const EncoderConfig& config) {
  const std::size_t seq = dout.rows();
  const std::size_t dk = config.head_dim();
  const double root = std::sqrt(static_cast<double>(dk));

  // Second residual block: out = LN(y1 + dropout(ff_out)).
  Matrix dres2 = layer_norm_backward(dout, tape.ln_ffn, w.ln_ffn, g.ln_ffn);
  Matrix dy1 = dres2;
  Matrix dff_out = dres2;
  undo_dropout(dff_out, tape.ffn_dropout);
  Matrix dff_act = linear_backward(tape.ff_act, dff_out, w.ff_out, g.ff_out, g.ff_out_bias);
  for (std::size_t i = 0; i < dff_act.size(); ++i) {
    dff_act.data()[i] *= detail::gelu_grad(tape.ff_pre.data()[i]);
  }
  add_inplace(dy1, linear_backward(tape.attention_norm, dff_act, w.ff_in, g.ff_in, g.ff_in_bias));

  // First residual block: y1 = LN(x + context · Wo + bo).
  Matrix dres1 = layer_norm_backward(dy1, tape.ln_attention, w.ln_attention, g.ln_attention);
  Matrix dx = dres1;
  const Matrix dcontext = linear_backward(tape.context, dres1, w.wo, g.wo, g.bo);

  Matrix dq(seq, config.model_dim), dk_all(seq, config.model_dim), dv(seq, config.model_dim);
  for (std::size_t h = 0; h < config.num_heads; ++h) {
    const std::size_t off = h * dk;
    const Matrix& alpha = tape.weights[h];
    const Matrix& alpha_dropped = tape.weights_dropped[h];

    // context_h = alpha_dropped · v_h
    Matrix dalpha(seq, seq);
    for (std::size_t i = 0; i < seq; ++i) {
      for (std::size_t j = 0; j < seq; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < dk; ++c) s += dcontext(i, off + c) * tape.v(j, off + c);
        dalpha(i, j) = s;
      }
    }
    for (std::size_t j = 0; j < seq; ++j) {
      for (std::size_t c = 0; c < dk; ++c) {
        double s = 0.0;
        for (std::size_t i = 0; i < seq; ++i) s += alpha_dropped(i, j) * dcontext(i, off + c);
        dv(j, off + c) += s;
      }
    }
    undo_dropout(dalpha, tape.attention_dropout[h]);

    // Softmax, then modulation: logits_ij = raw_ij * mult_j.
    Matrix draw(seq, seq);
    for (std::size_t i = 0; i < seq; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < seq; ++j) dot += alpha(i, j) * dalpha(i, j);
      for (std::size_t j = 0; j < seq; ++j) {
        draw(i, j) = alpha(i, j) * (dalpha(i, j) - dot) * mult[j] / root;
      }
    }
    for (std::size_t i = 0; i < seq; ++i) {
      for (std::size_t j = 0; j < seq; ++j) {
        const double gij = draw(i, j);
        if (gij == 0.0) continue;
        for (std::size_t c = 0; c < dk; ++c) {
          dq(i, off + c) += gij * tape.k(j, off + c);
          dk_all(j, off + c) += gij * tape.q(i, off + c);
        }
      }
    }
  }

  add_inplace(dx, linear_backward(tape.input, dq, w.wq, g.wq, g.bq));
  add_inplace(dx, linear_backward(tape.input, dk_all, w.wk, g.wk, g.bk));
  add_inplace(dx, linear_backward(tape.input, dv, w.wv, g.wv, g.bv));
  return dx;
}

struct TapedForward {
  ForwardTape tape;
  std::vector<double> logits;
};

TapedForward run_taped(std::span<const TokenId> tokens, const EncoderWeights& weights,
                       const EncoderConfig& config, const StochasticityPlan& plan,
                       std::span<const double> token_uncertainty) {
  TapedForward out;
  out.tape.layers.resize(config.num_layers);
  Matrix h = detail::embed_taped(tokens, weights, config, plan, &out.tape);
  for (std::size_t l = 1; l <= config.num_layers; ++l) {
    h = detail::encode_layer_taped(h, l, tokens, weights, config, plan, token_uncertainty,
                                   nullptr, &out.tape.layers[l - 1]);
  }
  out.logits = classify(h, weights);
  out.tape.final_hidden = std::move(h);
  return out;
}

double nll(std::span<const double> logits, std::size_t label) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double s = 0.0;
  for (double v : logits) s += std::exp(v - mx);
  return -(logits[label] - mx - std::log(s));
}

void check_label(std::size_t label, const EncoderConfig& config) {
  if (label >= config.num_classes) {
    throw Error(ErrorCode::kInvalidArgument,
                fmt::format("label {} outside {} classes", label, config.num_classes));
  }
}

}  // namespace

double cross_entropy_loss(std::span<const TokenId> tokens, std::size_t label,
                          const EncoderWeights& weights, const EncoderConfig& config,
                          const StochasticityPlan& plan,
                          std::span<const double> token_uncertainty) {
  check_label(label, config);
  const ForwardTrace trace = forward(tokens, weights, config, plan, token_uncertainty);
  return nll(trace.logits, label);
}

double cross_entropy_gradient(std::span<const TokenId> tokens, std::size_t label,
                              const EncoderWeights& weights, const EncoderConfig& config,
                              const StochasticityPlan& plan,
                              std::span<const double> token_uncertainty,
                              EncoderWeights& grads) {
  check_label(label, config);
  if (!token_uncertainty.empty() && token_uncertainty.size() != tokens.size()) {
    throw Error(ErrorCode::kDimensionMismatch, "token uncertainty length mismatch");
  }
  const TapedForward fwd = run_taped(tokens, weights, config, plan, token_uncertainty);
  const double loss = nll(fwd.logits, label);

  std::vector<double> dlogits = softmax(fwd.logits);
  dlogits[label] -= 1.0;

  // Classifier reads position 0 only.
  const std::size_t seq = tokens.size();
  const std::size_t d = config.model_dim;
  Matrix dh(seq, d);
  const auto cls = fwd.tape.final_hidden.row(0);
  for (std::size_t k = 0; k < d; ++k) {
    for (std::size_t c = 0; c < dlogits.size(); ++c) {
      grads.classifier(k, c) += cls[k] * dlogits[c];
      dh(0, k) += weights.classifier(k, c) * dlogits[c];
    }
  }
  accumulate(grads.classifier_bias, dlogits);

  std::vector<double> mult(seq, 1.0);
  if (!token_uncertainty.empty()) {
    for (std::size_t j = 0; j < seq; ++j) mult[j] = std::exp(-config.lambda * token_uncertainty[j]);
  }
  for (std::size_t l = config.num_layers; l >= 1; --l) {
    dh = layer_backward(dh, fwd.tape.layers[l - 1], weights.layers[l - 1], grads.layers[l - 1],
                        mult, config);
  }

  undo_dropout(dh, fwd.tape.embedding_dropout);
  const Matrix de =
      layer_norm_backward(dh, fwd.tape.ln_embedding, weights.ln_embedding, grads.ln_embedding);
  for (std::size_t t = 0; t < seq; ++t) {
    accumulate(grads.token_embedding.row(tokens[t]), de.row(t));
    accumulate(grads.position_embedding.row(t), de.row(t));
  }
  return loss;
}

}  // namespace uat
