#include "uat/diagnostics.hpp"

#include <cmath>
#include <fstream>

#include <fmt/format.h>

#include "uat/error.hpp"
#include "uat/mcinfer.hpp"

namespace uat {

namespace {

// Welford, so identical samples give exactly zero.
double sample_variance(std::span<const double> v) {
  double mean = 0.0;
  double m2 = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double delta = v[i] - mean;
    mean += delta / static_cast<double>(i + 1);
    m2 += delta * (v[i] - mean);
  }
  return m2 / static_cast<double>(v.size() - 1);
}

bool layer_has_noise(const StochasticityPlan& plan, const EncoderConfig& config,
                     std::size_t layer) {
  if (layer == 0) return plan.active(0, Component::kEmbedding) && config.dropout_embedding > 0.0;
  return (plan.active(layer, Component::kAttention) && config.dropout_attention > 0.0) ||
         (plan.active(layer, Component::kFeedForward) && config.dropout_ffn > 0.0);
}

struct Estimator {
  std::span<const TokenId> tokens;
  const EncoderWeights& weights;
  const EncoderConfig& config;
  std::span<const double> u;
  std::size_t target = 0;

  StochasticityPlan plan_for(const StochasticityPlan& scope, std::uint64_t seed,
                             std::uint64_t frozen) const {
    StochasticityPlan p = scope;
    p.seed = seed;
    p.pass = frozen;
    p.layer_pass.assign(config.num_layers + 1, frozen);
    return p;
  }

  Matrix run_layers(Matrix x, std::size_t from, std::size_t to,
                    const StochasticityPlan& plan) const {
    for (std::size_t l = from; l <= to; ++l) {
      x = encode_layer(x, l, tokens, weights, config, plan, u);
    }
    return x;
  }

  double target_probability(const Matrix& top) const {
    return softmax(classify(top, weights))[target];
  }
};

}  // namespace

LayerVarianceReport estimate_layer_variance(std::span<const TokenId> tokens,
                                            const EncoderWeights& weights,
                                            const EncoderConfig& config, std::uint64_t seed,
                                            const DecompositionOptions& options) {
  if (options.outer < 2 || options.inner < 2) {
    throw Error(ErrorCode::kInvalidConfig,
                fmt::format("decomposition needs outer >= 2 and inner >= 2 (got {} and {})",
                            options.outer, options.inner));
  }
  config.validate();
  check_tokens(tokens, config);
  if (!options.token_uncertainty.empty() && options.token_uncertainty.size() != tokens.size()) {
    throw Error(ErrorCode::kDimensionMismatch,
                fmt::format("{} uncertainties for {} tokens", options.token_uncertainty.size(),
                            tokens.size()));
  }

  const std::size_t L = config.num_layers;
  const std::size_t inner = options.inner;
  Estimator est{tokens, weights, config, options.token_uncertainty, 0};
  {
    const auto det = StochasticityPlan::deterministic();
    const Matrix z = embed(tokens, weights, config, det);
    est.target = argmax(softmax(classify(est.run_layers(z, 1, L, det), weights)));
  }

  // Pass ids: outer draw o owns o*(inner+1); its inner draws follow it.
  const auto frozen_id = [&](std::size_t o) { return static_cast<std::uint64_t>(o * (inner + 1)); };
  const auto inner_id = [&](std::size_t o, std::size_t j) { return frozen_id(o) + 1 + j; };

  LayerVarianceReport report;
  report.outer_samples = options.outer;
  report.inner_samples = inner;
  report.target_class = est.target;
  report.per_layer_variance.assign(L + 1, 0.0);
  report.standard_error.assign(L + 1, 0.0);

  std::vector<double> probs(inner);
  std::vector<double> group_var(options.outer);
  for (std::size_t layer = 0; layer <= L; ++layer) {
    if (!layer_has_noise(options.scope, config, layer)) continue;
    for (std::size_t o = 0; o < options.outer; ++o) {
      const StochasticityPlan frozen = est.plan_for(options.scope, seed, frozen_id(o));
      // The prefix h^(layer-1) is shared by every inner draw.
      Matrix prefix;
      if (layer > 0) prefix = est.run_layers(embed(tokens, weights, config, frozen), 1, layer - 1, frozen);
      for (std::size_t j = 0; j < inner; ++j) {
        StochasticityPlan plan = frozen;
        plan.layer_pass[layer] = inner_id(o, j);
        Matrix h = layer == 0 ? embed(tokens, weights, config, plan)
                              : encode_layer(prefix, layer, tokens, weights, config, plan, est.u);
        h = est.run_layers(std::move(h), layer + 1, L, plan);
        probs[j] = est.target_probability(h);
      }
      group_var[o] = sample_variance(probs);
    }
    double mean = 0.0;
    for (double v : group_var) mean += v;
    mean /= static_cast<double>(options.outer);
    report.per_layer_variance[layer] = mean;
    report.standard_error[layer] =
        std::sqrt(sample_variance(group_var) / static_cast<double>(options.outer));
  }

  // Total: every live site resampled on each pass, same key schedule.
  std::vector<double> all;
  all.reserve(options.outer * inner);
  for (std::size_t o = 0; o < options.outer; ++o) {
    for (std::size_t j = 0; j < inner; ++j) {
      const StochasticityPlan plan = est.plan_for(options.scope, seed, inner_id(o, j));
      all.push_back(est.target_probability(
          est.run_layers(embed(tokens, weights, config, plan), 1, L, plan)));
    }
  }
  report.total_variance = sample_variance(all);

  double sum = 0.0;
  for (double v : report.per_layer_variance) sum += v;
  report.residual = report.total_variance - sum;
  if (auto n = normalize_contributions(report.per_layer_variance)) {
    report.normalized = std::move(*n);
  } else {
    report.zero_total = true;
  }
  return report;
}

std::optional<std::vector<double>> normalize_contributions(std::span<const double> v) {
  double sum = 0.0;
  for (double x : v) {
    if (x < 0.0 || !std::isfinite(x)) {
      throw Error(ErrorCode::kInvalidArgument,
                  fmt::format("contribution {} is negative or not finite", x));
    }
    sum += x;
  }
  if (sum == 0.0) return std::nullopt;
  std::vector<double> out(v.begin(), v.end());
  for (double& x : out) x /= sum;
  return out;
}

std::string layer_label(std::size_t layer_index, std::size_t num_layers) {
  if (layer_index == 0) return "embedding";
  if (layer_index > num_layers) return "output";
  return fmt::format("encoder_{}", layer_index);
}

void write_layer_variance_csv(const std::filesystem::path& path,
                              const LayerVarianceReport& report) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, fmt::format("cannot write {}", path.string()));
  const std::size_t L = report.per_layer_variance.size() - 1;
  out << "layer_index,component_label,variance,normalized\n";
  for (std::size_t l = 0; l <= L; ++l) {
    const double n = report.zero_total ? 0.0 : report.normalized[l];
    out << fmt::format("{},{},{},{}\n", l, layer_label(l, L), report.per_layer_variance[l], n);
  }
  out << fmt::format("{},{},0,0\n", L + 1, layer_label(L + 1, L));
}

}  // namespace uat
