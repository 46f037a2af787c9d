#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "uat/bench.hpp"
#include "uat/trainer.hpp"

namespace uat {

inline constexpr const char* kToolVersion = "0.1.0";

/// Declares a full experiment. Stored as JSON; every field has a default.
struct ExperimentManifest {
  SyntheticTaskSpec task;
  EncoderConfig model;
  TrainConfig train;
  std::vector<MethodConfig> methods = default_roster();
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  /// Train one checkpoint (from the first seed) and reuse it for every seed.
  bool shared_checkpoint = false;
  EvalSettings eval;
  bool ablation = true;
  bool sensitivity = true;
  std::vector<double> sensitivity_lambdas = kSensitivityLambdas;
  std::vector<std::size_t> sensitivity_samples = kSensitivitySamples;
  bool efficiency = false;
  std::size_t efficiency_warmup = 50;
  std::size_t efficiency_runs = 200;
};

void to_json(nlohmann::json& j, const ExperimentManifest& m);
void from_json(const nlohmann::json& j, ExperimentManifest& m);
ExperimentManifest load_manifest(const std::filesystem::path& path);

/// Writes manifest.json into `dir`: command, config path, resolved config,
/// seeds, tool version, timestamp and output directory.
void write_run_manifest(const std::filesystem::path& dir, const std::string& command,
                        const std::string& config_path, const nlohmann::json& resolved,
                        const std::vector<std::uint64_t>& seeds);

struct ExperimentOptions {
  std::size_t threads = 1;
  /// Progress messages; may be empty.
  std::function<void(const std::string&)> log;
};

struct ExperimentSummary {
  std::vector<ResultRow> rows;  // seed-major, roster order
  std::vector<AggregateRow> aggregate;
  std::vector<AblationRow> ablation;
  std::vector<SensitivityTable> sensitivity;  // one per seed
  std::vector<EfficiencyResult> efficiency;
  std::size_t cells_computed = 0;
  std::size_t cells_reused = 0;
  std::size_t checkpoints_trained = 0;
};

/// generate -> train -> methods -> ablation/sensitivity -> aggregate.
/// Finished checkpoints and (seed, method) cells found under `out_dir` are
/// reused. Numerical outputs do not depend on options.threads. A failing
/// stage throws an Error whose message starts with "stage '<name>'".
ExperimentSummary run_experiment(const ExperimentManifest& manifest,
                                 const std::filesystem::path& out_dir,
                                 const ExperimentOptions& options = {});

/// Re-reads the manifest stored in a run directory and runs it into `out_dir`.
ExperimentSummary rerun_from_manifest(const std::filesystem::path& run_dir,
                                      const std::filesystem::path& out_dir,
                                      const ExperimentOptions& options = {});

/// Runs fn(0..n-1) on up to `threads` workers. The first exception is
/// rethrown after all workers stop.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

}  // namespace uat
