#include "uat/encoder.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "encoder_internal.hpp"
#include "uat/error.hpp"

namespace uat {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw Error(ErrorCode::kInvalidConfig, msg);
}

bool valid_rate(double r) { return r >= 0.0 && r < 1.0; }

Matrix columns(const Matrix& m, std::size_t start, std::size_t count) {
  Matrix out(m.rows(), count);
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t c = 0; c < count; ++c) out(i, c) = m(i, start + c);
  return out;
}

void set_columns(Matrix& dst, const Matrix& src, std::size_t start) {
  for (std::size_t i = 0; i < src.rows(); ++i)
    for (std::size_t c = 0; c < src.cols(); ++c) dst(i, start + c) = src(i, c);
}

Matrix linear(const Matrix& x, const Matrix& w, std::span<const double> b) {
  Matrix y = matmul(x, w);
  add_row_inplace(y, b);
  return y;
}

void fill_normal(Matrix& m, RngStream& rng, double stddev) {
  for (double& v : m.data()) v = rng.normal() * stddev;
}

double rate_for(const EncoderConfig& c, Component comp) {
  switch (comp) {
    case Component::kEmbedding: return c.dropout_embedding;
    case Component::kAttention: return c.dropout_attention;
    case Component::kFeedForward: return c.dropout_ffn;
  }
  return 0.0;
}

/// Applies dropout in place when the plan activates the site with a
/// nonzero rate; records the mask for backprop.
void maybe_dropout(Matrix& m, const EncoderConfig& config, const StochasticityPlan& plan,
                   std::size_t layer, Component comp, std::size_t head,
                   detail::DropoutSite* site) {
  const double rate = rate_for(config, comp);
  if (rate <= 0.0 || !plan.active(layer, comp)) return;
  RngStream rng = plan.stream(layer, comp, head);
  DropoutMask mask = sample_dropout_mask(rng, m.rows(), m.cols(), rate);
  mask.apply(m);
  if (site != nullptr) {
    site->applied = true;
    site->mask = std::move(mask);
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

void EncoderConfig::validate() const {
  require(vocab_size >= 2, "vocab_size must be at least 2 (pad and cls)");
  require(max_seq_len >= 1, "max_seq_len must be positive");
  require(num_layers >= 1, "num_layers must be positive");
  require(num_heads >= 1, "num_heads must be positive");
  require(model_dim >= 1 && model_dim % num_heads == 0,
          fmt::format("model_dim {} not divisible by num_heads {}", model_dim, num_heads));
  require(ff_dim >= 1, "ff_dim must be positive");
  require(num_classes >= 2, "num_classes must be at least 2");
  require(valid_rate(dropout_embedding) && valid_rate(dropout_attention) &&
              valid_rate(dropout_ffn),
          "dropout rates must lie in [0, 1)");
  require(lambda >= 0.0 && std::isfinite(lambda), "lambda must be finite and nonnegative");
  require(mc_samples >= 1, "mc_samples must be at least 1");
}

void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size},
                     {"max_seq_len", c.max_seq_len},
                     {"num_layers", c.num_layers},
                     {"num_heads", c.num_heads},
                     {"model_dim", c.model_dim},
                     {"ff_dim", c.ff_dim},
                     {"num_classes", c.num_classes},
                     {"dropout_embedding", c.dropout_embedding},
                     {"dropout_attention", c.dropout_attention},
                     {"dropout_ffn", c.dropout_ffn},
                     {"lambda", c.lambda},
                     {"mc_samples", c.mc_samples}};
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
  EncoderConfig d;
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
  c.num_layers = j.value("num_layers", d.num_layers);
  c.num_heads = j.value("num_heads", d.num_heads);
  c.model_dim = j.value("model_dim", d.model_dim);
  c.ff_dim = j.value("ff_dim", d.ff_dim);
  c.num_classes = j.value("num_classes", d.num_classes);
  c.dropout_embedding = j.value("dropout_embedding", d.dropout_embedding);
  c.dropout_attention = j.value("dropout_attention", d.dropout_attention);
  c.dropout_ffn = j.value("dropout_ffn", d.dropout_ffn);
  c.lambda = j.value("lambda", d.lambda);
  c.mc_samples = j.value("mc_samples", d.mc_samples);
}

// ---------------------------------------------------------------------------
// Weights

EncoderWeights EncoderWeights::zeros(const EncoderConfig& config) {
  config.validate();
  const std::size_t d = config.model_dim;
  EncoderWeights w;
  w.token_embedding = Matrix(config.vocab_size, d);
  w.position_embedding = Matrix(config.max_seq_len, d);
  w.ln_embedding = {std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
  w.layers.resize(config.num_layers);
  for (auto& l : w.layers) {
    l.wq = l.wk = l.wv = l.wo = Matrix(d, d);
    l.bq = l.bk = l.bv = l.bo = std::vector<double>(d, 0.0);
    l.ln_attention = {std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
    l.ff_in = Matrix(d, config.ff_dim);
    l.ff_in_bias.assign(config.ff_dim, 0.0);
    l.ff_out = Matrix(config.ff_dim, d);
    l.ff_out_bias.assign(d, 0.0);
    l.ln_ffn = {std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
  }
  w.classifier = Matrix(d, config.num_classes);
  w.classifier_bias.assign(config.num_classes, 0.0);
  return w;
}

EncoderWeights EncoderWeights::initialize(const EncoderConfig& config, std::uint64_t seed) {
  EncoderWeights w = zeros(config);
  RngStream rng(derive_key(seed, {0x1417}));
  const double d = static_cast<double>(config.model_dim);
  const double ff = static_cast<double>(config.ff_dim);
  fill_normal(w.token_embedding, rng, 1.0);
  fill_normal(w.position_embedding, rng, 0.5);
  w.ln_embedding.gain.assign(config.model_dim, 1.0);
  for (auto& l : w.layers) {
    for (Matrix* m : {&l.wq, &l.wk, &l.wv, &l.wo}) fill_normal(*m, rng, 1.0 / std::sqrt(d));
    fill_normal(l.ff_in, rng, 1.0 / std::sqrt(d));
    fill_normal(l.ff_out, rng, 1.0 / std::sqrt(ff));
    l.ln_attention.gain.assign(config.model_dim, 1.0);
    l.ln_ffn.gain.assign(config.model_dim, 1.0);
  }
  fill_normal(w.classifier, rng, 1.0 / std::sqrt(d));
  return w;
}

void EncoderWeights::check_compatible(const EncoderConfig& config) const {
  const EncoderWeights ref = zeros(config);
  bool ok = layers.size() == ref.layers.size();
  std::vector<std::size_t> mine, theirs;
  for_each_tensor([&](const std::string&, std::span<const double> v) { mine.push_back(v.size()); });
  ref.for_each_tensor(
      [&](const std::string&, std::span<const double> v) { theirs.push_back(v.size()); });
  ok = ok && mine == theirs && token_embedding.cols() == config.model_dim &&
       classifier.cols() == config.num_classes;
  if (!ok) {
    throw Error(ErrorCode::kDimensionMismatch,
                fmt::format("weights do not match config (vocab {}, d {}, layers {}, classes {})",
                            config.vocab_size, config.model_dim, config.num_layers,
                            config.num_classes));
  }
}

bool EncoderWeights::all_finite() const {
  bool ok = true;
  for_each_tensor([&](const std::string&, std::span<const double> v) {
    for (double x : v) ok = ok && std::isfinite(x);
  });
  return ok;
}

std::size_t EncoderWeights::parameter_count() const {
  std::size_t n = 0;
  for_each_tensor([&](const std::string&, std::span<const double> v) { n += v.size(); });
  return n;
}

namespace {

template <typename W, typename Fn>
void visit_tensors(W& w, Fn&& fn) {
  fn("token_embedding", w.token_embedding.data());
  fn("position_embedding", w.position_embedding.data());
  fn("ln_embedding.gain", std::span(w.ln_embedding.gain));
  fn("ln_embedding.bias", std::span(w.ln_embedding.bias));
  for (std::size_t i = 0; i < w.layers.size(); ++i) {
    auto& l = w.layers[i];
    const std::string p = fmt::format("layers.{}.", i + 1);
    fn(p + "wq", l.wq.data());
    fn(p + "bq", std::span(l.bq));
    fn(p + "wk", l.wk.data());
    fn(p + "bk", std::span(l.bk));
    fn(p + "wv", l.wv.data());
    fn(p + "bv", std::span(l.bv));
    fn(p + "wo", l.wo.data());
    fn(p + "bo", std::span(l.bo));
    fn(p + "ln_attention.gain", std::span(l.ln_attention.gain));
    fn(p + "ln_attention.bias", std::span(l.ln_attention.bias));
    fn(p + "ff_in", l.ff_in.data());
    fn(p + "ff_in_bias", std::span(l.ff_in_bias));
    fn(p + "ff_out", l.ff_out.data());
    fn(p + "ff_out_bias", std::span(l.ff_out_bias));
    fn(p + "ln_ffn.gain", std::span(l.ln_ffn.gain));
    fn(p + "ln_ffn.bias", std::span(l.ln_ffn.bias));
  }
  fn("classifier", w.classifier.data());
  fn("classifier_bias", std::span(w.classifier_bias));
}

}  // namespace

void EncoderWeights::for_each_tensor(
    const std::function<void(const std::string&, std::span<double>)>& fn) {
  visit_tensors(*this, [&](const std::string& n, auto s) { fn(n, std::span<double>(s)); });
}

void EncoderWeights::for_each_tensor(
    const std::function<void(const std::string&, std::span<const double>)>& fn) const {
  visit_tensors(*this,
                [&](const std::string& n, auto s) { fn(n, std::span<const double>(s)); });
}

// ---------------------------------------------------------------------------
// Stochasticity plan

StochasticityPlan StochasticityPlan::deterministic() { return {}; }

StochasticityPlan StochasticityPlan::all_layers(std::uint64_t seed, std::uint64_t pass) {
  StochasticityPlan p;
  p.mode = Mode::kAllLayers;
  p.seed = seed;
  p.pass = pass;
  return p;
}

StochasticityPlan StochasticityPlan::single_layer(std::size_t layer, std::uint64_t seed,
                                                  std::uint64_t pass) {
  StochasticityPlan p = all_layers(seed, pass);
  p.mode = Mode::kSingleLayer;
  p.layer = layer;
  return p;
}

StochasticityPlan StochasticityPlan::component_subset(std::array<bool, 3> components,
                                                      std::uint64_t seed,
                                                      std::uint64_t pass) {
  StochasticityPlan p = all_layers(seed, pass);
  p.mode = Mode::kComponentSubset;
  p.components = components;
  return p;
}

bool StochasticityPlan::active(std::size_t layer_index, Component c) const noexcept {
  switch (mode) {
    case Mode::kDeterministic: return false;
    case Mode::kAllLayers: return true;
    case Mode::kSingleLayer: return layer_index == layer;
    case Mode::kComponentSubset: return components[static_cast<std::size_t>(c)];
  }
  return false;
}

RngStream StochasticityPlan::stream(std::size_t layer_index, Component c,
                                    std::size_t head) const noexcept {
  const std::uint64_t p = layer_index < layer_pass.size() ? layer_pass[layer_index] : pass;
  return RngStream(derive_key(seed, {p, layer_index, static_cast<std::uint64_t>(c), head}));
}

// ---------------------------------------------------------------------------
// Attention primitives

Matrix attention_logits(const Matrix& q, const Matrix& k, std::size_t head_dim) {
  if (q.cols() != k.cols() || head_dim == 0) {
    throw Error(ErrorCode::kDimensionMismatch,
                fmt::format("attention_logits: q {} k {} head_dim {}", q.shape_string(),
                            k.shape_string(), head_dim));
  }
  Matrix a = matmul_bt(q, k);
  const double root = std::sqrt(static_cast<double>(head_dim));
  for (double& v : a.data()) v /= root;
  return a;
}

Matrix modulate_logits(const Matrix& a, std::span<const double> token_uncertainty,
                       double lambda) {
  if (token_uncertainty.size() != a.cols()) {
    throw Error(ErrorCode::kDimensionMismatch,
                fmt::format("modulate_logits: {} uncertainties for {} logits",
                            token_uncertainty.size(), a.shape_string()));
  }
  if (!(lambda >= 0.0)) {
    throw Error(ErrorCode::kInvalidArgument, fmt::format("lambda {} is negative", lambda));
  }
  std::vector<double> mult(a.cols());
  for (std::size_t j = 0; j < a.cols(); ++j) {
    const double u = token_uncertainty[j];
    if (!(u >= 0.0) || !std::isfinite(u)) {
      throw Error(ErrorCode::kInvalidArgument,
                  fmt::format("token uncertainty {} at key {} is not a finite nonnegative value",
                              u, j));
    }
    mult[j] = std::exp(-lambda * u);
  }
  Matrix out = a;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] *= mult[j];
  }
  return out;
}

void check_tokens(std::span<const TokenId> tokens, const EncoderConfig& config) {
  if (tokens.empty()) throw Error(ErrorCode::kEmptyInput, "empty token sequence");
  if (tokens.size() > config.max_seq_len) {
    throw Error(ErrorCode::kInvalidArgument,
                fmt::format("sequence length {} exceeds max_seq_len {}", tokens.size(),
                            config.max_seq_len));
  }
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    if (tokens[t] >= config.vocab_size) {
      throw Error(ErrorCode::kOutOfVocabulary,
                  fmt::format("token id {} at position {} outside vocabulary of {}", tokens[t],
                              t, config.vocab_size));
    }
  }
}

// ---------------------------------------------------------------------------
// Forward pass

namespace detail {

double gelu(double x) noexcept { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_grad(double x) noexcept {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

Matrix layer_norm(const Matrix& x, const LayerNormParams& p, LayerNormTape* tape) {
  const std::size_t n = x.cols();
  Matrix out(x.rows(), n);
  if (tape != nullptr) {
    tape->normalized = Matrix(x.rows(), n);
    tape->inv_std.assign(x.rows(), 0.0);
  }
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto r = x.row(i);
    double mean = 0.0;
    for (double v : r) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : r) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < n; ++j) {
      const double xhat = (r[j] - mean) * inv;
      out(i, j) = xhat * p.gain[j] + p.bias[j];
      if (tape != nullptr) tape->normalized(i, j) = xhat;
    }
    if (tape != nullptr) tape->inv_std[i] = inv;
  }
  return out;
}

Matrix embed_taped(std::span<const TokenId> tokens, const EncoderWeights& weights,
                   const EncoderConfig& config, const StochasticityPlan& plan,
                   ForwardTape* tape) {
  check_tokens(tokens, config);
  const std::size_t d = config.model_dim;
  Matrix e(tokens.size(), d);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const auto tok = weights.token_embedding.row(tokens[t]);
    const auto pos = weights.position_embedding.row(t);
    for (std::size_t k = 0; k < d; ++k) e(t, k) = tok[k] + pos[k];
  }
  Matrix z = layer_norm(e, weights.ln_embedding, tape ? &tape->ln_embedding : nullptr);
  maybe_dropout(z, config, plan, 0, Component::kEmbedding, 0,
                tape ? &tape->embedding_dropout : nullptr);
  return z;
}

Matrix encode_layer_taped(const Matrix& x, std::size_t layer, std::span<const TokenId> tokens,
                          const EncoderWeights& weights, const EncoderConfig& config,
                          const StochasticityPlan& plan,
                          std::span<const double> token_uncertainty,
                          std::vector<Matrix>* attention_out, LayerTape* tape) {
  const LayerWeights& w = weights.layers.at(layer - 1);
  const std::size_t seq = x.rows();
  const std::size_t dk = config.head_dim();

  Matrix q = linear(x, w.wq, w.bq);
  Matrix k = linear(x, w.wk, w.bk);
  Matrix v = linear(x, w.wv, w.bv);

  const std::vector<double> zero_u(token_uncertainty.empty() ? seq : 0, 0.0);
  const std::span<const double> u = token_uncertainty.empty() ? std::span(zero_u)
                                                              : token_uncertainty;

  if (tape != nullptr) {
    tape->input = x;
    tape->weights.clear();
    tape->weights_dropped.clear();
    tape->attention_dropout.assign(config.num_heads, {});
  }
  if (attention_out != nullptr) attention_out->clear();

  Matrix context(seq, config.model_dim);
  for (std::size_t h = 0; h < config.num_heads; ++h) {
    const Matrix qh = columns(q, h * dk, dk);
    const Matrix kh = columns(k, h * dk, dk);
    const Matrix vh = columns(v, h * dk, dk);
    Matrix logits = modulate_logits(attention_logits(qh, kh, dk), u, config.lambda);
    // Padding is masked after modulation so -inf never enters the product.
    for (std::size_t j = 0; j < seq; ++j) {
      if (tokens[j] != kPadToken) continue;
      for (std::size_t i = 0; i < seq; ++i) logits(i, j) = -std::numeric_limits<double>::infinity();
    }
    Matrix alpha = softmax_rows(logits);
    if (attention_out != nullptr) attention_out->push_back(alpha);
    Matrix alpha_dropped = alpha;
    maybe_dropout(alpha_dropped, config, plan, layer, Component::kAttention, h,
                  tape ? &tape->attention_dropout[h] : nullptr);
    set_columns(context, matmul(alpha_dropped, vh), h * dk);
    if (tape != nullptr) {
      tape->weights.push_back(std::move(alpha));
      tape->weights_dropped.push_back(std::move(alpha_dropped));
    }
  }

  Matrix residual = linear(context, w.wo, w.bo);
  add_inplace(residual, x);
  Matrix y1 = layer_norm(residual, w.ln_attention, tape ? &tape->ln_attention : nullptr);

  Matrix ff_pre = linear(y1, w.ff_in, w.ff_in_bias);
  Matrix ff_act = ff_pre;
  for (double& val : ff_act.data()) val = gelu(val);
  Matrix ff_out = linear(ff_act, w.ff_out, w.ff_out_bias);
  maybe_dropout(ff_out, config, plan, layer, Component::kFeedForward, 0,
                tape ? &tape->ffn_dropout : nullptr);
  add_inplace(ff_out, y1);
  Matrix out = layer_norm(ff_out, w.ln_ffn, tape ? &tape->ln_ffn : nullptr);

  if (tape != nullptr) {
    tape->q = std::move(q);
    tape->k = std::move(k);
    tape->v = std::move(v);
    tape->context = std::move(context);
    tape->attention_norm = std::move(y1);
    tape->ff_pre = std::move(ff_pre);
    tape->ff_act = std::move(ff_act);
  }
  if (!out.all_finite()) {
    throw Error(ErrorCode::kNumerical, fmt::format("non-finite hidden state at layer {}", layer));
  }
  return out;
}

}  // namespace detail

Matrix embed(std::span<const TokenId> tokens, const EncoderWeights& weights,
             const EncoderConfig& config, const StochasticityPlan& plan) {
  return detail::embed_taped(tokens, weights, config, plan, nullptr);
}

Matrix encode_layer(const Matrix& x, std::size_t layer, std::span<const TokenId> tokens,
                    const EncoderWeights& weights, const EncoderConfig& config,
                    const StochasticityPlan& plan, std::span<const double> token_uncertainty,
                    std::vector<Matrix>* attention_out) {
  if (layer < 1 || layer > weights.layers.size()) {
    throw Error(ErrorCode::kInvalidArgument, fmt::format("no encoder layer {}", layer));
  }
  if (x.rows() != tokens.size() || x.cols() != config.model_dim) {
    throw Error(ErrorCode::kDimensionMismatch,
                fmt::format("layer input {} for {} tokens", x.shape_string(), tokens.size()));
  }
  if (!token_uncertainty.empty() && token_uncertainty.size() != tokens.size()) {
    throw Error(ErrorCode::kDimensionMismatch,
                fmt::format("{} uncertainties for {} tokens", token_uncertainty.size(),
                            tokens.size()));
  }
  return detail::encode_layer_taped(x, layer, tokens, weights, config, plan, token_uncertainty,
                                    attention_out, nullptr);
}

std::vector<double> classify(const Matrix& hidden, const EncoderWeights& weights) {
  const auto cls = hidden.row(0);
  std::vector<double> logits = weights.classifier_bias;
  for (std::size_t k = 0; k < cls.size(); ++k) {
    const auto wrow = weights.classifier.row(k);
    for (std::size_t c = 0; c < logits.size(); ++c) logits[c] += cls[k] * wrow[c];
  }
  return logits;
}

ForwardTrace encode(const Matrix& z, std::span<const TokenId> tokens,
                    const EncoderWeights& weights, const EncoderConfig& config,
                    const StochasticityPlan& plan, std::span<const double> token_uncertainty) {
  ForwardTrace trace;
  trace.hidden.reserve(config.num_layers + 1);
  trace.attention.resize(config.num_layers);
  trace.hidden.push_back(z);
  for (std::size_t l = 1; l <= config.num_layers; ++l) {
    trace.hidden.push_back(encode_layer(trace.hidden.back(), l, tokens, weights, config, plan,
                                        token_uncertainty, &trace.attention[l - 1]));
  }
  trace.logits = classify(trace.hidden.back(), weights);
  return trace;
}

ForwardTrace forward(std::span<const TokenId> tokens, const EncoderWeights& weights,
                     const EncoderConfig& config, const StochasticityPlan& plan,
                     std::span<const double> token_uncertainty) {
  return encode(embed(tokens, weights, config, plan), tokens, weights, config, plan,
                token_uncertainty);
}

}  // namespace uat
