#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "uat/calibration.hpp"
#include "uat/encoder.hpp"
#include "uat/predictions.hpp"
#include "uat/selective.hpp"
#include "uat/task.hpp"

namespace uat {

enum class MethodKind {
  kBaselineDeterministic,
  kMcUniform,
  kMcComponent,
  kUatLite,
  kTempScaling,
  kDeepEnsemble,
};

std::string to_string(MethodKind k);
MethodKind method_kind_from_string(const std::string& s);

struct MethodConfig {
  MethodKind kind = MethodKind::kBaselineDeterministic;
  /// Label used in tables and file names; defaults to the kind's name.
  std::string name;
  double uniform_rate = 0.1;
  std::array<double, 3> rates{0.1, 0.2, 0.3};  // embedding, attention, ffn
  double lambda = 0.5;
  std::size_t mc_samples = 5;
  /// Which method's logits temperature scaling rescales.
  MethodKind temperature_base = MethodKind::kBaselineDeterministic;
  std::size_t ensemble_size = 5;

  std::string label() const { return name.empty() ? to_string(kind) : name; }
  /// Forward passes per example.
  std::size_t passes() const;

  static MethodConfig baseline();
  static MethodConfig mc_uniform(double p = 0.1, std::size_t m = 5);
  static MethodConfig mc_component(std::array<double, 3> rates = {0.1, 0.2, 0.3}, std::size_t m = 5);
  static MethodConfig uat_lite(double lambda = 0.5, std::size_t m = 5,
                               std::array<double, 3> rates = {0.1, 0.2, 0.3});
  static MethodConfig temp_scaling(MethodKind base = MethodKind::kBaselineDeterministic);
  static MethodConfig deep_ensemble(std::size_t k = 5);
};

void to_json(nlohmann::json& j, const MethodConfig& m);
void from_json(const nlohmann::json& j, MethodConfig& m);

/// The six-method roster.
std::vector<MethodConfig> default_roster();

/// Predictions for one split. Stochastic methods seed example e with
/// derive_key(seed, {e.id}), so methods that share rates and seed share
/// dropout masks. `members` needs ensemble_size entries for deep_ensemble and
/// at least one otherwise.
std::vector<PredictionRecord> predict(const MethodConfig& method,
                                      std::span<const EncoderWeights> members,
                                      const EncoderConfig& config,
                                      const std::vector<Example>& rows, std::uint64_t seed);

struct MethodOutputs {
  std::vector<PredictionRecord> val, test_id, test_ood;
  std::optional<double> temperature;
};

/// Predicts on val, test_id and test_ood. Temperature (temp_scaling only) is
/// fitted on val and then applied to all three.
MethodOutputs run_method_predictions(const MethodConfig& method,
                                     std::span<const EncoderWeights> members,
                                     const EncoderConfig& config, const Dataset& data,
                                     std::uint64_t seed);

struct EvalSettings {
  std::size_t bins = kDefaultBins;
  std::vector<double> thresholds = kDefaultThresholds;
};

struct ResultRow {
  std::string method;
  std::uint64_t seed = 0;
  double ece = 0.0;
  double accuracy = 0.0;
  double aurc = 0.0;
  std::map<double, double> coverage_at;
  double ece_ood = 0.0;
  double delta_ece = 0.0;
  double robustness = 0.0;
  std::optional<double> temperature;
  /// Seconds spent predicting; not part of any reproducibility check.
  double wall_time = 0.0;
};

void to_json(nlohmann::json& j, const ResultRow& r);
void from_json(const nlohmann::json& j, ResultRow& r);

/// Metrics on test_id, with the OOD split feeding the shift metrics.
ResultRow evaluate_outputs(const std::string& method, std::uint64_t seed,
                           const MethodOutputs& outputs, const EvalSettings& settings);

struct MetricSummary {
  double mean = 0.0;
  double std = 0.0;  // sample std over seeds; 0 for a single seed
};

struct AggregateRow {
  std::string method;
  std::size_t seeds = 0;
  MetricSummary ece, accuracy, aurc, delta_ece, robustness;
  std::map<double, MetricSummary> coverage_at;
};

MetricSummary summarize(std::span<const double> values);

/// One aggregate row per method, in first-appearance order.
std::vector<AggregateRow> aggregate(std::span<const ResultRow> rows);

struct AblationRow {
  std::string arm;
  std::uint64_t seed = 0;
  double ece = 0.0;
  double accuracy = 0.0;
};

inline const std::vector<std::string> kAblationArms{"baseline", "embedding_uncertainty",
                                                    "attention_modulation", "full"};

/// Four inference-time arms on the same weights: deterministic baseline;
/// MC sampling with lambda=0; lambda>0 modulation; modulation followed by
/// temperature fitted on validation.
std::vector<AblationRow> run_ablation(const EncoderWeights& weights, const EncoderConfig& config,
                                      const Dataset& data, std::uint64_t seed,
                                      const MethodConfig& uat, const EvalSettings& settings);

struct SensitivityCell {
  double lambda = 0.0;
  std::size_t mc_samples = 0;
  double ece = 0.0;
  double accuracy = 0.0;
};

struct SensitivityTable {
  std::vector<SensitivityCell> cells;  // lambda-major
  double mean = 0.0, std = 0.0, min = 0.0, max = 0.0, range = 0.0;  // over cell ECE
};

inline const std::vector<double> kSensitivityLambdas{0.1, 0.5, 1.0};
inline const std::vector<std::size_t> kSensitivitySamples{3, 5, 10};

SensitivityCell run_sensitivity_cell(const EncoderWeights& weights, const EncoderConfig& config,
                                     const Dataset& data, std::uint64_t seed,
                                     const MethodConfig& uat, double lambda,
                                     std::size_t mc_samples, const EvalSettings& settings);

SensitivityTable run_sensitivity(const EncoderWeights& weights, const EncoderConfig& config,
                                 const Dataset& data, std::uint64_t seed, const MethodConfig& uat,
                                 std::span<const double> lambdas,
                                 std::span<const std::size_t> samples,
                                 const EvalSettings& settings);

SensitivityTable summarize_sensitivity(std::vector<SensitivityCell> cells);

struct EfficiencyResult {
  std::string method;
  double mean_latency = 0.0;  // seconds per example
  double std_latency = 0.0;
  std::size_t passes = 0;
};

/// Times `runs` single-example inferences after `warmup` untimed ones,
/// cycling through `rows`. `passes` is counted, not assumed.
EfficiencyResult measure_efficiency(const MethodConfig& method,
                                    std::span<const EncoderWeights> members,
                                    const EncoderConfig& config,
                                    const std::vector<Example>& rows, std::size_t warmup = 50,
                                    std::size_t runs = 200);

}  // namespace uat
