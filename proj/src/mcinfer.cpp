#include "uat/mcinfer.hpp"

#include <cmath>

#include <fmt/format.h>

#include "uat/error.hpp"

namespace uat {

void TokenUncertaintyAccumulator::add(const Matrix& embedding) {
  if (count_ == 0) {
    mean_ = embedding;
    m2_ = Matrix(embedding.rows(), embedding.cols());
    count_ = 1;
    return;
  }
  if (!embedding.same_shape(mean_)) {
    throw Error(ErrorCode::kDimensionMismatch,
                fmt::format("embedding sample {} does not match {}", embedding.shape_string(),
                            mean_.shape_string()));
  }
  ++count_;
  const double n = static_cast<double>(count_);
  auto md = mean_.data();
  auto m2d = m2_.data();
  const auto xd = embedding.data();
  for (std::size_t i = 0; i < md.size(); ++i) {
    const double delta = xd[i] - md[i];
    md[i] += delta / n;
    m2d[i] += delta * (xd[i] - md[i]);
  }
}

std::vector<double> TokenUncertaintyAccumulator::current() const {
  std::vector<double> u(m2_.rows(), 0.0);
  if (count_ == 0) return u;
  const double n = static_cast<double>(count_);
  for (std::size_t j = 0; j < m2_.rows(); ++j) {
    double s = 0.0;
    for (double v : m2_.row(j)) s += std::sqrt(std::max(v, 0.0) / n);
    u[j] = s / static_cast<double>(m2_.cols());
  }
  return u;
}

std::vector<double> token_uncertainty_running(std::span<const Matrix> samples) {
  const Matrix sd = column_std(samples);
  std::vector<double> u(sd.rows(), 0.0);
  for (std::size_t j = 0; j < sd.rows(); ++j) {
    double s = 0.0;
    for (double v : sd.row(j)) s += v;
    u[j] = s / static_cast<double>(sd.cols());
  }
  return u;
}

std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

McOutcome aggregate_passes(const Matrix& per_pass_logits) {
  const std::size_t passes = per_pass_logits.rows();
  const std::size_t classes = per_pass_logits.cols();
  if (passes == 0) throw Error(ErrorCode::kEmptyInput, "no passes to aggregate");

  McOutcome out;
  out.per_pass_logits = per_pass_logits;
  out.pass_count = passes;
  out.mean_probs.assign(classes, 0.0);
  out.mean_logits.assign(classes, 0.0);
  out.class_variance.assign(classes, 0.0);

  Matrix probs(passes, classes);
  for (std::size_t m = 0; m < passes; ++m) {
    const auto p = softmax(per_pass_logits.row(m));
    for (std::size_t c = 0; c < classes; ++c) {
      probs(m, c) = p[c];
      out.mean_probs[c] += p[c];
      out.mean_logits[c] += per_pass_logits(m, c);
    }
  }
  const double n = static_cast<double>(passes);
  for (std::size_t c = 0; c < classes; ++c) {
    out.mean_probs[c] /= n;
    out.mean_logits[c] /= n;
  }
  for (std::size_t m = 0; m < passes; ++m)
    for (std::size_t c = 0; c < classes; ++c) {
      const double dev = probs(m, c) - out.mean_probs[c];
      out.class_variance[c] += dev * dev / n;
    }
  out.predicted_class = argmax(out.mean_probs);
  out.confidence = out.mean_probs[out.predicted_class];
  out.predictive_variance = out.class_variance[out.predicted_class];
  return out;
}

McOutcome run_mc_inference(std::span<const TokenId> tokens, const EncoderWeights& weights,
                           const EncoderConfig& config, std::uint64_t seed,
                           PassCounter* counter) {
  if (config.mc_samples == 0) {
    throw Error(ErrorCode::kInvalidConfig, "mc_samples must be at least 1");
  }
  config.validate();

  Matrix logits(config.mc_samples, config.num_classes);
  TokenUncertaintyAccumulator running;
  std::vector<double> u;
  for (std::size_t m = 0; m < config.mc_samples; ++m) {
    const auto plan = StochasticityPlan::all_layers(seed, m);
    const Matrix z = embed(tokens, weights, config, plan);
    if (counter != nullptr) ++counter->embeddings;
    running.add(z);
    u = running.current();
    const ForwardTrace trace = encode(z, tokens, weights, config, plan, u);
    if (counter != nullptr) ++counter->encoder_passes;
    std::copy(trace.logits.begin(), trace.logits.end(), logits.row(m).begin());
  }
  McOutcome out = aggregate_passes(logits);
  out.token_uncertainty = std::move(u);
  return out;
}

McOutcome run_deterministic(std::span<const TokenId> tokens, const EncoderWeights& weights,
                            const EncoderConfig& config, PassCounter* counter) {
  const auto plan = StochasticityPlan::deterministic();
  const Matrix z = embed(tokens, weights, config, plan);
  const ForwardTrace trace = encode(z, tokens, weights, config, plan);
  if (counter != nullptr) {
    ++counter->embeddings;
    ++counter->encoder_passes;
  }
  Matrix logits(1, config.num_classes);
  std::copy(trace.logits.begin(), trace.logits.end(), logits.row(0).begin());
  McOutcome out = aggregate_passes(logits);
  out.token_uncertainty.assign(tokens.size(), 0.0);
  return out;
}

double predictive_entropy(std::span<const double> probs) {
  double h = 0.0;
  for (double p : probs)
    if (p > 0.0) h -= p * std::log(p);
  return h;
}

}  // namespace uat
