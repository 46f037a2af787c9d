#include "uat/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "uat/error.hpp"
#include "uat/mcinfer.hpp"

namespace uat {

using nlohmann::json;

namespace {

constexpr std::array<std::pair<MethodKind, const char*>, 6> kMethodNames{{
    {MethodKind::kBaselineDeterministic, "baseline_deterministic"},
    {MethodKind::kMcUniform, "mc_uniform"},
    {MethodKind::kMcComponent, "mc_component"},
    {MethodKind::kUatLite, "uat_lite"},
    {MethodKind::kTempScaling, "temp_scaling"},
    {MethodKind::kDeepEnsemble, "deep_ensemble"},
}};

EncoderConfig with_rates(EncoderConfig c, std::array<double, 3> rates, double lambda,
                         std::size_t m) {
  c.dropout_embedding = rates[0];
  c.dropout_attention = rates[1];
  c.dropout_ffn = rates[2];
  c.lambda = lambda;
  c.mc_samples = m;
  return c;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

McOutcome predict_one(const MethodConfig& method, std::span<const EncoderWeights> members,
                      const EncoderConfig& config, const Example& ex, std::uint64_t seed,
                      PassCounter* counter) {
  const std::uint64_t key = derive_key(seed, {ex.id});
  switch (method.kind) {
    case MethodKind::kBaselineDeterministic:
    case MethodKind::kTempScaling:
      return run_deterministic(ex.tokens, members[0], config, counter);
    case MethodKind::kMcUniform: {
      const double p = method.uniform_rate;
      return run_mc_inference(ex.tokens, members[0], with_rates(config, {p, p, p}, 0.0, method.mc_samples),
                              key, counter);
    }
    case MethodKind::kMcComponent:
      return run_mc_inference(ex.tokens, members[0],
                              with_rates(config, method.rates, 0.0, method.mc_samples), key, counter);
    case MethodKind::kUatLite:
      return run_mc_inference(ex.tokens, members[0],
                              with_rates(config, method.rates, method.lambda, method.mc_samples),
                              key, counter);
    case MethodKind::kDeepEnsemble: {
      Matrix logits(method.ensemble_size, config.num_classes);
      for (std::size_t k = 0; k < method.ensemble_size; ++k) {
        const auto one = run_deterministic(ex.tokens, members[k], config, counter);
        std::copy(one.mean_logits.begin(), one.mean_logits.end(), logits.row(k).begin());
      }
      McOutcome out = aggregate_passes(logits);
      out.token_uncertainty.assign(ex.tokens.size(), 0.0);
      return out;
    }
  }
  throw Error(ErrorCode::kInvalidArgument, "unknown method");
}

void check_members(const MethodConfig& method, std::span<const EncoderWeights> members) {
  const std::size_t need = method.kind == MethodKind::kDeepEnsemble ? method.ensemble_size : 1;
  if (need == 0) throw Error(ErrorCode::kInvalidConfig, "deep_ensemble needs at least one member");
  if (members.size() < need) {
    throw Error(ErrorCode::kInvalidArgument,
                fmt::format("{} needs {} trained model(s), got {}", method.label(), need,
                            members.size()));
  }
}

}  // namespace

std::string to_string(MethodKind k) {
  for (const auto& [kind, name] : kMethodNames)
    if (kind == k) return name;
  return "?";
}

MethodKind method_kind_from_string(const std::string& s) {
  for (const auto& [kind, name] : kMethodNames)
    if (s == name) return kind;
  throw Error(ErrorCode::kInvalidConfig, fmt::format("unknown method '{}'", s));
}

std::size_t MethodConfig::passes() const {
  switch (kind) {
    case MethodKind::kBaselineDeterministic:
    case MethodKind::kTempScaling: return 1;
    case MethodKind::kDeepEnsemble: return ensemble_size;
    default: return mc_samples;
  }
}

MethodConfig MethodConfig::baseline() { return {}; }

MethodConfig MethodConfig::mc_uniform(double p, std::size_t m) {
  MethodConfig c;
  c.kind = MethodKind::kMcUniform;
  c.uniform_rate = p;
  c.mc_samples = m;
  return c;
}

MethodConfig MethodConfig::mc_component(std::array<double, 3> rates, std::size_t m) {
  MethodConfig c;
  c.kind = MethodKind::kMcComponent;
  c.rates = rates;
  c.mc_samples = m;
  return c;
}

MethodConfig MethodConfig::uat_lite(double lambda, std::size_t m, std::array<double, 3> rates) {
  MethodConfig c;
  c.kind = MethodKind::kUatLite;
  c.lambda = lambda;
  c.mc_samples = m;
  c.rates = rates;
  return c;
}

MethodConfig MethodConfig::temp_scaling(MethodKind base) {
  MethodConfig c;
  c.kind = MethodKind::kTempScaling;
  c.temperature_base = base;
  return c;
}

MethodConfig MethodConfig::deep_ensemble(std::size_t k) {
  MethodConfig c;
  c.kind = MethodKind::kDeepEnsemble;
  c.ensemble_size = k;
  return c;
}

void to_json(json& j, const MethodConfig& m) {
  j = json{{"method", to_string(m.kind)}, {"name", m.label()}};
  switch (m.kind) {
    case MethodKind::kMcUniform:
      j["uniform_rate"] = m.uniform_rate;
      j["mc_samples"] = m.mc_samples;
      break;
    case MethodKind::kMcComponent:
      j["rates"] = m.rates;
      j["mc_samples"] = m.mc_samples;
      break;
    case MethodKind::kUatLite:
      j["rates"] = m.rates;
      j["mc_samples"] = m.mc_samples;
      j["lambda"] = m.lambda;
      break;
    case MethodKind::kTempScaling: j["base"] = to_string(m.temperature_base); break;
    case MethodKind::kDeepEnsemble: j["ensemble_size"] = m.ensemble_size; break;
    default: break;
  }
}

void from_json(const json& j, MethodConfig& m) {
  m = MethodConfig{};
  m.kind = method_kind_from_string(j.at("method").get<std::string>());
  m.name = j.value("name", std::string{});
  m.uniform_rate = j.value("uniform_rate", m.uniform_rate);
  if (j.contains("rates")) m.rates = j.at("rates").get<std::array<double, 3>>();
  m.lambda = j.value("lambda", m.lambda);
  m.mc_samples = j.value("mc_samples", m.mc_samples);
  if (j.contains("base")) m.temperature_base = method_kind_from_string(j.at("base").get<std::string>());
  m.ensemble_size = j.value("ensemble_size", m.ensemble_size);
  if (m.kind == MethodKind::kTempScaling &&
      (m.temperature_base == MethodKind::kTempScaling ||
       m.temperature_base == MethodKind::kDeepEnsemble)) {
    throw Error(ErrorCode::kInvalidConfig, "temp_scaling base must be a single-model method");
  }
}

std::vector<MethodConfig> default_roster() {
  return {MethodConfig::baseline(),     MethodConfig::mc_uniform(),
          MethodConfig::mc_component(), MethodConfig::uat_lite(),
          MethodConfig::temp_scaling(), MethodConfig::deep_ensemble()};
}

std::vector<PredictionRecord> predict(const MethodConfig& method,
                                      std::span<const EncoderWeights> members,
                                      const EncoderConfig& config,
                                      const std::vector<Example>& rows, std::uint64_t seed) {
  check_members(method, members);
  MethodConfig base = method;
  if (method.kind == MethodKind::kTempScaling) base.kind = method.temperature_base;
  std::vector<PredictionRecord> out;
  out.reserve(rows.size());
  for (const auto& ex : rows) {
    out.push_back(make_record(ex.id, ex.label, predict_one(base, members, config, ex, seed, nullptr)));
  }
  return out;
}

MethodOutputs run_method_predictions(const MethodConfig& method,
                                     std::span<const EncoderWeights> members,
                                     const EncoderConfig& config, const Dataset& data,
                                     std::uint64_t seed) {
  MethodOutputs out;
  out.val = predict(method, members, config, data.val, seed);
  out.test_id = predict(method, members, config, data.test_id, seed);
  out.test_ood = predict(method, members, config, data.test_ood, seed);
  if (method.kind == MethodKind::kTempScaling) {
    const double t = fit_temperature(out.val);
    out.temperature = t;
    out.val = apply_temperature(out.val, t);
    out.test_id = apply_temperature(out.test_id, t);
    out.test_ood = apply_temperature(out.test_ood, t);
  }
  return out;
}

ResultRow evaluate_outputs(const std::string& method, std::uint64_t seed,
                           const MethodOutputs& outputs, const EvalSettings& settings) {
  ResultRow row;
  row.method = method;
  row.seed = seed;
  const auto id = compute_ece(outputs.test_id, settings.bins);
  const auto ood = compute_ece(outputs.test_ood, settings.bins);
  row.ece = id.ece;
  row.accuracy = id.accuracy_overall;
  row.ece_ood = ood.ece;
  const auto shift = shift_metrics(id, ood);
  row.delta_ece = shift.delta_ece;
  row.robustness = shift.robustness;
  const auto curve = risk_coverage(outputs.test_id, settings.thresholds);
  row.aurc = curve.aurc;
  row.coverage_at = curve.coverage_at;
  row.temperature = outputs.temperature;
  return row;
}

void to_json(json& j, const ResultRow& r) {
  json cov = json::array();
  for (const auto& [tau, c] : r.coverage_at) cov.push_back({tau, c});
  j = json{{"method", r.method},       {"seed", r.seed},
           {"ece", r.ece},             {"accuracy", r.accuracy},
           {"aurc", r.aurc},           {"coverage_at", std::move(cov)},
           {"ece_ood", r.ece_ood},     {"delta_ece", r.delta_ece},
           {"robustness", r.robustness}, {"wall_time", r.wall_time}};
  if (r.temperature) j["temperature"] = *r.temperature;
}

void from_json(const json& j, ResultRow& r) {
  r.method = j.at("method").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.ece = j.at("ece").get<double>();
  r.accuracy = j.at("accuracy").get<double>();
  r.aurc = j.at("aurc").get<double>();
  r.coverage_at.clear();
  for (const auto& pair : j.at("coverage_at")) r.coverage_at[pair.at(0).get<double>()] = pair.at(1).get<double>();
  r.ece_ood = j.at("ece_ood").get<double>();
  r.delta_ece = j.at("delta_ece").get<double>();
  r.robustness = j.at("robustness").get<double>();
  r.wall_time = j.value("wall_time", 0.0);
  if (j.contains("temperature")) r.temperature = j.at("temperature").get<double>();
}

MetricSummary summarize(std::span<const double> values) {
  MetricSummary s;
  if (values.empty()) return s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

std::vector<AggregateRow> aggregate(std::span<const ResultRow> rows) {
  std::vector<std::string> order;
  for (const auto& r : rows)
    if (std::find(order.begin(), order.end(), r.method) == order.end()) order.push_back(r.method);

  std::vector<AggregateRow> out;
  for (const auto& m : order) {
    std::vector<double> ece, acc, aurc, delta, rob;
    std::map<double, std::vector<double>> cov;
    for (const auto& r : rows) {
      if (r.method != m) continue;
      ece.push_back(r.ece);
      acc.push_back(r.accuracy);
      aurc.push_back(r.aurc);
      delta.push_back(r.delta_ece);
      rob.push_back(r.robustness);
      for (const auto& [tau, c] : r.coverage_at) cov[tau].push_back(c);
    }
    AggregateRow a;
    a.method = m;
    a.seeds = ece.size();
    a.ece = summarize(ece);
    a.accuracy = summarize(acc);
    a.aurc = summarize(aurc);
    a.delta_ece = summarize(delta);
    a.robustness = summarize(rob);
    for (const auto& [tau, v] : cov) a.coverage_at[tau] = summarize(v);
    out.push_back(std::move(a));
  }
  return out;
}

std::vector<AblationRow> run_ablation(const EncoderWeights& weights, const EncoderConfig& config,
                                      const Dataset& data, std::uint64_t seed,
                                      const MethodConfig& uat, const EvalSettings& settings) {
  const std::span<const EncoderWeights> one(&weights, 1);
  MethodConfig sampling = uat;
  sampling.kind = MethodKind::kUatLite;
  sampling.lambda = 0.0;
  MethodConfig modulated = sampling;
  modulated.lambda = uat.lambda;

  std::vector<AblationRow> rows;
  const auto add = [&](const std::string& arm, const std::vector<PredictionRecord>& test) {
    const auto report = compute_ece(test, settings.bins);
    rows.push_back({arm, seed, report.ece, report.accuracy_overall});
  };
  add(kAblationArms[0], predict(MethodConfig::baseline(), one, config, data.test_id, seed));
  add(kAblationArms[1], predict(sampling, one, config, data.test_id, seed));
  const auto modulated_test = predict(modulated, one, config, data.test_id, seed);
  add(kAblationArms[2], modulated_test);
  const double t = fit_temperature(predict(modulated, one, config, data.val, seed));
  add(kAblationArms[3], apply_temperature(modulated_test, t));
  return rows;
}

SensitivityCell run_sensitivity_cell(const EncoderWeights& weights, const EncoderConfig& config,
                                     const Dataset& data, std::uint64_t seed,
                                     const MethodConfig& uat, double lambda,
                                     std::size_t mc_samples, const EvalSettings& settings) {
  MethodConfig m = uat;
  m.kind = MethodKind::kUatLite;
  m.lambda = lambda;
  m.mc_samples = mc_samples;
  const auto report =
      compute_ece(predict(m, std::span(&weights, 1), config, data.test_id, seed), settings.bins);
  return {lambda, mc_samples, report.ece, report.accuracy_overall};
}

SensitivityTable summarize_sensitivity(std::vector<SensitivityCell> cells) {
  if (cells.empty()) throw Error(ErrorCode::kEmptyInput, "sensitivity grid is empty");
  SensitivityTable t;
  t.cells = std::move(cells);
  std::vector<double> ece;
  for (const auto& c : t.cells) ece.push_back(c.ece);
  const auto s = summarize(ece);
  t.mean = s.mean;
  t.std = s.std;
  t.min = *std::min_element(ece.begin(), ece.end());
  t.max = *std::max_element(ece.begin(), ece.end());
  t.range = t.max - t.min;
  return t;
}

SensitivityTable run_sensitivity(const EncoderWeights& weights, const EncoderConfig& config,
                                 const Dataset& data, std::uint64_t seed, const MethodConfig& uat,
                                 std::span<const double> lambdas,
                                 std::span<const std::size_t> samples,
                                 const EvalSettings& settings) {
  std::vector<SensitivityCell> cells;
  for (double l : lambdas)
    for (std::size_t m : samples)
      cells.push_back(run_sensitivity_cell(weights, config, data, seed, uat, l, m, settings));
  return summarize_sensitivity(std::move(cells));
}

EfficiencyResult measure_efficiency(const MethodConfig& method,
                                    std::span<const EncoderWeights> members,
                                    const EncoderConfig& config,
                                    const std::vector<Example>& rows, std::size_t warmup,
                                    std::size_t runs) {
  check_members(method, members);
  if (rows.empty()) throw Error(ErrorCode::kEmptyInput, "measure_efficiency: no examples");
  if (runs == 0) throw Error(ErrorCode::kInvalidArgument, "measure_efficiency: zero runs");
  MethodConfig base = method;
  if (method.kind == MethodKind::kTempScaling) base.kind = method.temperature_base;

  double sink = 0.0;
  for (std::size_t i = 0; i < warmup; ++i) {
    sink += predict_one(base, members, config, rows[i % rows.size()], 0, nullptr).confidence;
  }
  std::vector<double> times;
  times.reserve(runs);
  PassCounter counter;
  for (std::size_t i = 0; i < runs; ++i) {
    PassCounter one;
    const auto t0 = std::chrono::steady_clock::now();
    sink += predict_one(base, members, config, rows[i % rows.size()], i, &one).confidence;
    times.push_back(seconds_since(t0));
    if (i == 0) counter = one;
  }
  if (!std::isfinite(sink)) throw Error(ErrorCode::kNumerical, "non-finite output while timing");
  const auto s = summarize(times);
  return {method.label(), s.mean, s.std, counter.encoder_passes};
}

}  // namespace uat
