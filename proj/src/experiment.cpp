#include "uat/experiment.hpp"

#include <atomic>
#include <chrono>
#include <ctime>
#include <exception>
#include <fstream>
#include <mutex>
#include <thread>

#include <fmt/format.h>

#include "uat/error.hpp"

namespace uat {

namespace fs = std::filesystem;
using nlohmann::json;

void to_json(json& j, const ExperimentManifest& m) {
  json eval{{"bins", m.eval.bins}, {"thresholds", m.eval.thresholds}};
  j = json{{"task", m.task},
           {"model", m.model},
           {"train", m.train},
           {"methods", m.methods},
           {"seeds", m.seeds},
           {"shared_checkpoint", m.shared_checkpoint},
           {"eval", std::move(eval)},
           {"ablation", m.ablation},
           {"sensitivity", m.sensitivity},
           {"sensitivity_lambdas", m.sensitivity_lambdas},
           {"sensitivity_samples", m.sensitivity_samples},
           {"efficiency", m.efficiency},
           {"efficiency_warmup", m.efficiency_warmup},
           {"efficiency_runs", m.efficiency_runs}};
}

void from_json(const json& j, ExperimentManifest& m) {
  m = ExperimentManifest{};
  if (j.contains("task")) m.task = j.at("task").get<SyntheticTaskSpec>();
  if (j.contains("model")) m.model = j.at("model").get<EncoderConfig>();
  if (j.contains("train")) m.train = j.at("train").get<TrainConfig>();
  if (j.contains("methods")) m.methods = j.at("methods").get<std::vector<MethodConfig>>();
  if (j.contains("seeds")) m.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  m.shared_checkpoint = j.value("shared_checkpoint", m.shared_checkpoint);
  if (j.contains("eval")) {
    m.eval.bins = j.at("eval").value("bins", m.eval.bins);
    m.eval.thresholds = j.at("eval").value("thresholds", m.eval.thresholds);
  }
  m.ablation = j.value("ablation", m.ablation);
  m.sensitivity = j.value("sensitivity", m.sensitivity);
  m.sensitivity_lambdas = j.value("sensitivity_lambdas", m.sensitivity_lambdas);
  m.sensitivity_samples = j.value("sensitivity_samples", m.sensitivity_samples);
  m.efficiency = j.value("efficiency", m.efficiency);
  m.efficiency_warmup = j.value("efficiency_warmup", m.efficiency_warmup);
  m.efficiency_runs = j.value("efficiency_runs", m.efficiency_runs);
  m.model = encoder_config_for(m.task, m.model);
  if (m.seeds.empty()) throw Error(ErrorCode::kInvalidConfig, "manifest declares no seeds");
  if (m.methods.empty()) throw Error(ErrorCode::kInvalidConfig, "manifest declares no methods");
  for (std::size_t a = 0; a < m.methods.size(); ++a)
    for (std::size_t b = a + 1; b < m.methods.size(); ++b)
      if (m.methods[a].label() == m.methods[b].label()) {
        throw Error(ErrorCode::kInvalidConfig,
                    fmt::format("method name '{}' appears twice", m.methods[a].label()));
      }
}

ExperimentManifest load_manifest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, fmt::format("cannot read {}", path.string()));
  try {
    return json::parse(in).get<ExperimentManifest>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kFormat, fmt::format("{}: {}", path.string(), e.what()));
  }
}

void write_run_manifest(const fs::path& dir, const std::string& command,
                        const std::string& config_path, const json& resolved,
                        const std::vector<std::uint64_t>& seeds) {
  fs::create_directories(dir);
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", &tm);
  const json j{{"command", command},
               {"config_path", config_path},
               {"config", resolved},
               {"seeds", seeds},
               {"tool_version", kToolVersion},
               {"timestamp", stamp},
               {"output_dir", fs::absolute(dir).string()}};
  std::ofstream out(dir / "manifest.json", std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, fmt::format("cannot write {}", (dir / "manifest.json").string()));
  out << j.dump(2) << '\n';
}

void parallel_for(std::size_t n, std::size_t threads,
                  const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (;;) {
        {
          std::lock_guard lock(error_mutex);
          if (first) return;
        }
        const std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!first) first = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (first) std::rethrow_exception(first);
}

namespace {

// Write to a sibling temp file, then rename, so a crash never leaves a
// half-written file behind that a resumed run would trust.
void write_atomically(const fs::path& path, const std::function<void(const fs::path&)>& writer) {
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  writer(tmp);
  fs::rename(tmp, path);
}

void write_json(const fs::path& path, const json& j) {
  write_atomically(path, [&](const fs::path& p) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw Error(ErrorCode::kIo, fmt::format("cannot write {}", p.string()));
    out << j.dump(2) << '\n';
  });
}

json read_json(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, fmt::format("cannot read {}", path.string()));
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kFormat, fmt::format("{}: {}", path.string(), e.what()));
  }
}

template <typename Fn>
auto stage(const std::string& name, Fn&& fn) {
  try {
    return fn();
  } catch (const Error& e) {
    throw Error(e.code(), fmt::format("stage '{}': {}", name, e.what()));
  } catch (const std::exception& e) {
    throw Error(ErrorCode::kIo, fmt::format("stage '{}': {}", name, e.what()));
  }
}

std::uint64_t member_seed(std::uint64_t seed, std::size_t member) {
  return member == 0 ? seed : derive_key(seed, {member});
}

std::string format_tau(double tau) { return fmt::format("{}", tau); }

class Runner {
 public:
  Runner(const ExperimentManifest& m, fs::path out, const ExperimentOptions& o)
      : m_(m), out_(std::move(out)), opt_(o) {}

  ExperimentSummary run() {
    check_out_dir();
    const Dataset data = stage("generate", [&] { return generate(); });
    stage("train", [&] { train(data); return 0; });
    const auto members = stage("load", [&] { return load_members(); });
    stage("methods", [&] { run_cells(data, members); return 0; });
    stage("aggregate", [&] { collect(); return 0; });
    if (m_.efficiency) stage("efficiency", [&] { efficiency(data, members); return 0; });
    return std::move(summary_);
  }

 private:
  const ExperimentManifest& m_;
  fs::path out_;
  const ExperimentOptions& opt_;
  ExperimentSummary summary_;
  std::mutex log_mutex_;
  std::atomic<std::size_t> computed_{0}, reused_{0}, trained_{0};

  void log(const std::string& msg) {
    if (!opt_.log) return;
    std::lock_guard lock(log_mutex_);
    opt_.log(msg);
  }

  std::size_t members_per_seed() const {
    std::size_t k = 1;
    for (const auto& meth : m_.methods)
      if (meth.kind == MethodKind::kDeepEnsemble) k = std::max(k, meth.ensemble_size);
    return k;
  }

  std::uint64_t checkpoint_seed(std::uint64_t seed) const {
    return m_.shared_checkpoint ? m_.seeds.front() : seed;
  }

  fs::path checkpoint_path(std::uint64_t seed, std::size_t member) const {
    return out_ / "checkpoints" / fmt::format("seed{}_member{}.json", checkpoint_seed(seed), member);
  }

  void check_out_dir() {
    const json resolved = m_;
    const fs::path manifest = out_ / "manifest.json";
    if (fs::exists(manifest)) {
      const json old = read_json(manifest);
      if (old.value("config", json{}) != resolved) {
        throw Error(ErrorCode::kInvalidConfig,
                    fmt::format("{} belongs to a different experiment", out_.string()));
      }
      return;
    }
    write_run_manifest(out_, "experiment", "", resolved, m_.seeds);
  }

  Dataset generate() {
    const fs::path dir = out_ / "data";
    if (fs::exists(dir / "test_ood.jsonl")) {
      log("generate: reusing data/");
      return read_dataset(dir);
    }
    log("generate: writing data/");
    const Dataset d = generate_task(m_.task);
    fs::create_directories(dir);
    for (Split s : kAllSplits) {
      write_atomically(dir / (to_string(s) + ".jsonl"),
                       [&](const fs::path& p) { write_split(p, s, d.split(s)); });
    }
    return d;
  }

  void train(const Dataset& data) {
    std::vector<std::pair<std::uint64_t, std::size_t>> jobs;
    for (std::uint64_t s : m_.seeds) {
      for (std::size_t k = 0; k < members_per_seed(); ++k) {
        const std::pair job{checkpoint_seed(s), k};
        if (std::find(jobs.begin(), jobs.end(), job) == jobs.end()) jobs.push_back(job);
      }
    }
    parallel_for(jobs.size(), opt_.threads, [&](std::size_t i) {
      const auto [seed, member] = jobs[i];
      const fs::path path = checkpoint_path(seed, member);
      if (fs::exists(path)) return;
      log(fmt::format("train: seed {} member {}", seed, member));
      const auto result = train_encoder(data.train, m_.model, m_.train, member_seed(seed, member));
      write_atomically(path, [&](const fs::path& p) { save_checkpoint(p, m_.model, result.weights); });
      ++trained_;
    });
    summary_.checkpoints_trained = trained_;
  }

  std::map<std::uint64_t, std::vector<EncoderWeights>> load_members() {
    std::map<std::uint64_t, std::vector<EncoderWeights>> out;
    for (std::uint64_t s : m_.seeds) {
      auto& list = out[s];
      for (std::size_t k = 0; k < members_per_seed(); ++k) {
        auto [config, weights] = load_checkpoint(checkpoint_path(s, k));
        if (!(config == m_.model)) {
          throw Error(ErrorCode::kInvalidConfig,
                      fmt::format("{} was trained with a different model config",
                                  checkpoint_path(s, k).string()));
        }
        list.push_back(std::move(weights));
      }
    }
    return out;
  }

  fs::path cell_path(const std::string& label, std::uint64_t seed) const {
    return out_ / "cells" / fmt::format("{}_seed{}.json", label, seed);
  }

  // Wall-clock time lives outside the cells so reruns compare byte for byte.
  fs::path timing_path(const std::string& label, std::uint64_t seed) const {
    return out_ / "timing" / fmt::format("{}_seed{}.json", label, seed);
  }

  void run_cells(const Dataset& data, const std::map<std::uint64_t, std::vector<EncoderWeights>>& members) {
    struct Job {
      enum Kind { kMethod, kAblation, kSensitivity } kind;
      std::uint64_t seed;
      std::size_t index;  // method index or sensitivity cell index
    };
    std::vector<Job> jobs;
    const std::size_t grid = m_.sensitivity_lambdas.size() * m_.sensitivity_samples.size();
    for (std::uint64_t s : m_.seeds) {
      for (std::size_t i = 0; i < m_.methods.size(); ++i) jobs.push_back({Job::kMethod, s, i});
      if (m_.ablation) jobs.push_back({Job::kAblation, s, 0});
      if (m_.sensitivity)
        for (std::size_t c = 0; c < grid; ++c) jobs.push_back({Job::kSensitivity, s, c});
    }
    const MethodConfig uat = uat_reference();

    parallel_for(jobs.size(), opt_.threads, [&](std::size_t i) {
      const Job& job = jobs[i];
      const auto& ws = members.at(job.seed);
      switch (job.kind) {
        case Job::kMethod: {
          const MethodConfig& meth = m_.methods[job.index];
          const fs::path cell = cell_path(meth.label(), job.seed);
          if (fs::exists(cell)) {
            ++reused_;
            return;
          }
          log(fmt::format("methods: {} seed {}", meth.label(), job.seed));
          const auto t0 = std::chrono::steady_clock::now();
          const auto outputs = run_method_predictions(meth, ws, m_.model, data, job.seed);
          const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
          const std::string stem = fmt::format("{}_seed{}", meth.label(), job.seed);
          for (const auto& [split, recs] :
               {std::pair{"val", &outputs.val}, {"test_id", &outputs.test_id}, {"test_ood", &outputs.test_ood}}) {
            write_atomically(out_ / "predictions" / fmt::format("{}_{}.jsonl", stem, split),
                             [&](const fs::path& p) { write_predictions(p, *recs); });
          }
          const auto row = evaluate_outputs(meth.label(), job.seed, outputs, m_.eval);
          json calib = compute_ece(outputs.test_id, m_.eval.bins);
          if (outputs.temperature) calib["temperature"] = *outputs.temperature;
          write_json(out_ / "reports" / (stem + "_calibration.json"), calib);
          const auto curve = risk_coverage(outputs.test_id, m_.eval.thresholds);
          write_atomically(out_ / "reports" / (stem + "_risk_coverage.csv"),
                           [&](const fs::path& p) { write_curve_csv(p, curve); });
          write_atomically(out_ / "reports" / (stem + "_bins.csv"), [&](const fs::path& p) {
            write_bins_csv(p, compute_ece(outputs.test_id, m_.eval.bins));
          });
          write_json(timing_path(meth.label(), job.seed), json{{"wall_time", wall}});
          json cell_json = row;
          cell_json.erase("wall_time");
          write_json(cell, cell_json);
          ++computed_;
          return;
        }
        case Job::kAblation: {
          const fs::path cell = out_ / "cells" / fmt::format("ablation_seed{}.json", job.seed);
          if (fs::exists(cell)) {
            ++reused_;
            return;
          }
          log(fmt::format("ablation: seed {}", job.seed));
          const auto rows = run_ablation(ws[0], m_.model, data, job.seed, uat, m_.eval);
          json j = json::array();
          for (const auto& r : rows) j.push_back({{"arm", r.arm}, {"ece", r.ece}, {"accuracy", r.accuracy}});
          write_json(cell, j);
          ++computed_;
          return;
        }
        case Job::kSensitivity: {
          const double lambda = m_.sensitivity_lambdas[job.index / m_.sensitivity_samples.size()];
          const std::size_t mc = m_.sensitivity_samples[job.index % m_.sensitivity_samples.size()];
          const fs::path cell =
              out_ / "cells" / fmt::format("sensitivity_seed{}_lambda{}_m{}.json", job.seed, lambda, mc);
          if (fs::exists(cell)) {
            ++reused_;
            return;
          }
          log(fmt::format("sensitivity: seed {} lambda {} M {}", job.seed, lambda, mc));
          const auto c = run_sensitivity_cell(ws[0], m_.model, data, job.seed, uat, lambda, mc, m_.eval);
          write_json(cell, {{"lambda", c.lambda}, {"mc_samples", c.mc_samples}, {"ece", c.ece},
                            {"accuracy", c.accuracy}});
          ++computed_;
          return;
        }
      }
    });
    summary_.cells_computed = computed_;
    summary_.cells_reused = reused_;
  }

  MethodConfig uat_reference() const {
    for (const auto& meth : m_.methods)
      if (meth.kind == MethodKind::kUatLite) return meth;
    MethodConfig u = MethodConfig::uat_lite(m_.model.lambda, m_.model.mc_samples);
    u.rates = {m_.model.dropout_embedding, m_.model.dropout_attention, m_.model.dropout_ffn};
    return u;
  }

  void collect() {
    for (std::uint64_t s : m_.seeds)
      for (const auto& meth : m_.methods) {
        auto row = read_json(cell_path(meth.label(), s)).get<ResultRow>();
        if (fs::exists(timing_path(meth.label(), s)))
          row.wall_time = read_json(timing_path(meth.label(), s)).at("wall_time").get<double>();
        summary_.rows.push_back(std::move(row));
      }
    summary_.aggregate = aggregate(summary_.rows);

    if (m_.ablation) {
      for (std::uint64_t s : m_.seeds) {
        for (const auto& r : read_json(out_ / "cells" / fmt::format("ablation_seed{}.json", s))) {
          summary_.ablation.push_back(
              {r.at("arm").get<std::string>(), s, r.at("ece").get<double>(), r.at("accuracy").get<double>()});
        }
      }
    }
    if (m_.sensitivity) {
      for (std::uint64_t s : m_.seeds) {
        std::vector<SensitivityCell> cells;
        for (double l : m_.sensitivity_lambdas) {
          for (std::size_t mc : m_.sensitivity_samples) {
            const json c = read_json(out_ / "cells" / fmt::format("sensitivity_seed{}_lambda{}_m{}.json", s, l, mc));
            cells.push_back({l, mc, c.at("ece").get<double>(), c.at("accuracy").get<double>()});
          }
        }
        summary_.sensitivity.push_back(summarize_sensitivity(std::move(cells)));
      }
    }
    write_tables();
  }

  void write_csv(const fs::path& path, const std::string& content) {
    write_atomically(path, [&](const fs::path& p) {
      std::ofstream out(p, std::ios::binary);
      if (!out) throw Error(ErrorCode::kIo, fmt::format("cannot write {}", p.string()));
      out << content;
    });
  }

  void write_tables() {
    const fs::path t = out_ / "tables";
    std::string cov_head;
    for (double tau : m_.eval.thresholds) cov_head += ",coverage@" + format_tau(tau);

    std::string results = "method,seed,ece,accuracy,aurc" + cov_head + ",ece_ood,delta_ece,robustness,temperature\n";
    std::string timing = "method,seed,wall_time\n";
    for (const auto& r : summary_.rows) {
      results += fmt::format("{},{},{},{},{}", r.method, r.seed, r.ece, r.accuracy, r.aurc);
      for (double tau : m_.eval.thresholds) results += fmt::format(",{}", r.coverage_at.at(tau));
      results += fmt::format(",{},{},{},{}\n", r.ece_ood, r.delta_ece, r.robustness,
                             r.temperature ? fmt::format("{}", *r.temperature) : "");
      timing += fmt::format("{},{},{}\n", r.method, r.seed, r.wall_time);
    }
    write_csv(t / "results.csv", results);
    write_csv(t / "timing.csv", timing);

    std::string agg = "method,seeds,ece_mean,ece_std,accuracy_mean,accuracy_std,aurc_mean,aurc_std";
    for (double tau : m_.eval.thresholds) {
      agg += fmt::format(",coverage@{}_mean,coverage@{}_std", format_tau(tau), format_tau(tau));
    }
    agg += ",delta_ece_mean,delta_ece_std,robustness_mean,robustness_std\n";
    for (const auto& a : summary_.aggregate) {
      agg += fmt::format("{},{},{},{},{},{},{},{}", a.method, a.seeds, a.ece.mean, a.ece.std,
                         a.accuracy.mean, a.accuracy.std, a.aurc.mean, a.aurc.std);
      for (double tau : m_.eval.thresholds) {
        agg += fmt::format(",{},{}", a.coverage_at.at(tau).mean, a.coverage_at.at(tau).std);
      }
      agg += fmt::format(",{},{},{},{}\n", a.delta_ece.mean, a.delta_ece.std, a.robustness.mean,
                         a.robustness.std);
    }
    write_csv(t / "aggregate.csv", agg);

    if (m_.ablation) {
      std::string s = "arm,seed,ece,accuracy\n";
      for (const auto& r : summary_.ablation) s += fmt::format("{},{},{},{}\n", r.arm, r.seed, r.ece, r.accuracy);
      write_csv(t / "ablation.csv", s);
    }
    if (m_.sensitivity) {
      std::string cells = "seed,lambda,mc_samples,ece,accuracy\n";
      std::string sum = "seed,mean,std,min,max,range\n";
      for (std::size_t i = 0; i < m_.seeds.size(); ++i) {
        const auto& tab = summary_.sensitivity[i];
        for (const auto& c : tab.cells) {
          cells += fmt::format("{},{},{},{},{}\n", m_.seeds[i], c.lambda, c.mc_samples, c.ece, c.accuracy);
        }
        sum += fmt::format("{},{},{},{},{},{}\n", m_.seeds[i], tab.mean, tab.std, tab.min, tab.max, tab.range);
      }
      write_csv(t / "sensitivity.csv", cells);
      write_csv(t / "sensitivity_summary.csv", sum);
    }

    json summary = json::array();
    for (const auto& a : summary_.aggregate) {
      summary.push_back({{"method", a.method},
                         {"seeds", a.seeds},
                         {"ece", {a.ece.mean, a.ece.std}},
                         {"accuracy", {a.accuracy.mean, a.accuracy.std}},
                         {"aurc", {a.aurc.mean, a.aurc.std}},
                         {"delta_ece", {a.delta_ece.mean, a.delta_ece.std}},
                         {"robustness", {a.robustness.mean, a.robustness.std}}});
    }
    write_json(out_ / "reports" / "summary.json", summary);
  }

  void efficiency(const Dataset& data, const std::map<std::uint64_t, std::vector<EncoderWeights>>& members) {
    const auto& ws = members.at(m_.seeds.front());
    std::string s = "method,mean_latency,std_latency,passes\n";
    for (const auto& meth : m_.methods) {
      log(fmt::format("efficiency: {}", meth.label()));
      const auto r = measure_efficiency(meth, ws, m_.model, data.test_id, m_.efficiency_warmup,
                                        m_.efficiency_runs);
      summary_.efficiency.push_back(r);
      s += fmt::format("{},{},{},{}\n", r.method, r.mean_latency, r.std_latency, r.passes);
    }
    write_csv(out_ / "tables" / "efficiency.csv", s);
  }
};

}  // namespace

ExperimentSummary run_experiment(const ExperimentManifest& manifest, const fs::path& out_dir,
                                 const ExperimentOptions& options) {
  return Runner(manifest, out_dir, options).run();
}

ExperimentSummary rerun_from_manifest(const fs::path& run_dir, const fs::path& out_dir,
                                      const ExperimentOptions& options) {
  const json j = read_json(run_dir / "manifest.json");
  ExperimentManifest m;
  try {
    m = j.at("config").get<ExperimentManifest>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kFormat, fmt::format("{}: {}", (run_dir / "manifest.json").string(), e.what()));
  }
  return run_experiment(m, out_dir, options);
}

}  // namespace uat
