#include "uat/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "uat/bench.hpp"
#include "uat/calibration.hpp"
#include "uat/diagnostics.hpp"
#include "uat/experiment.hpp"
#include "uat/mcinfer.hpp"
#include "uat/selective.hpp"
#include "uat/trainer.hpp"

namespace uat {

namespace fs = std::filesystem;
using nlohmann::json;

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kIo: return kExitIo;
    case ErrorCode::kNumerical: return kExitNumerical;
    case ErrorCode::kFormat:
    case ErrorCode::kOutOfVocabulary:
    case ErrorCode::kDimensionMismatch: return kExitFormat;
    case ErrorCode::kEmptyInput:
    case ErrorCode::kInvalidArgument:
    case ErrorCode::kInvalidConfig: return kExitFailure;
  }
  return kExitFailure;
}

namespace {

std::string absolute(const std::string& p) { return fs::absolute(p).lexically_normal().string(); }

json read_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, fmt::format("cannot read {}", path));
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kFormat, fmt::format("{}: {}", path, e.what()));
  }
}

void write_json_file(const fs::path& path, const json& j) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, fmt::format("cannot write {}", path.string()));
  out << j.dump(2) << '\n';
}

// Normalized argument list that `rerun` replays with a new --out.
struct Replay {
  std::vector<std::string> argv;
  void add(const std::string& flag, const std::string& value) {
    argv.push_back(flag);
    argv.push_back(value);
  }
  void add(const std::string& flag, double value) { add(flag, fmt::format("{}", value)); }
  void add(const std::string& flag, std::uint64_t value) { add(flag, std::to_string(value)); }
  void flag(const std::string& f) { argv.push_back(f); }
};

void finish(const std::string& out_dir, const std::string& command, const std::string& config,
            json resolved, const Replay& replay, std::vector<std::uint64_t> seeds) {
  resolved["argv"] = replay.argv;
  write_run_manifest(out_dir, command, config, resolved, seeds);
}

struct InferFlags {
  std::string mode = "uat";
  double lambda = 0.5;
  std::size_t mc_samples = 5;
  double dropout_emb = 0.1;
  double dropout_att = 0.2;
  double dropout_ffn = 0.3;
  std::uint64_t seed = 0;
  CLI::Option* attach(CLI::App* cmd) {
    cmd->add_option("--mode", mode, "baseline, mc or uat")
        ->check(CLI::IsMember({"baseline", "mc", "uat"}))
        ->capture_default_str();
    cmd->add_option("--lambda", lambda, "attention damping strength")->capture_default_str();
    auto* mc = cmd->add_option("--mc-samples", mc_samples, "Monte Carlo passes")->capture_default_str();
    cmd->add_option("--dropout-emb", dropout_emb)->capture_default_str();
    cmd->add_option("--dropout-att", dropout_att)->capture_default_str();
    cmd->add_option("--dropout-ffn", dropout_ffn)->capture_default_str();
    cmd->add_option("--seed", seed, "inference seed")->capture_default_str();
    return mc;
  }

  MethodConfig method() const {
    if (mode == "baseline") return MethodConfig::baseline();
    MethodConfig m = mode == "mc" ? MethodConfig::mc_component({dropout_emb, dropout_att, dropout_ffn}, mc_samples)
                                  : MethodConfig::uat_lite(lambda, mc_samples, {dropout_emb, dropout_att, dropout_ffn});
    return m;
  }

  void record(Replay& r) const {
    r.add("--mode", mode);
    r.add("--lambda", lambda);
    r.add("--mc-samples", static_cast<std::uint64_t>(mc_samples));
    r.add("--dropout-emb", dropout_emb);
    r.add("--dropout-att", dropout_att);
    r.add("--dropout-ffn", dropout_ffn);
    r.add("--seed", seed);
  }

  json resolved() const {
    return json{{"mode", mode},
                {"lambda", mode == "uat" ? lambda : 0.0},
                {"mc_samples", mode == "baseline" ? 1 : mc_samples},
                {"rates", {dropout_emb, dropout_att, dropout_ffn}},
                {"seed", seed}};
  }
};

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw Error(ErrorCode::kInvalidArgument, fmt::format("cannot parse '{}' as a number", item));
    }
  }
  return out;
}

class Cli {
 public:
  Cli(std::ostream& out, std::ostream& err) : out_(out), err_(err) {}

  int run(const std::vector<std::string>& args) {
    CLI::App app{"Uncertainty-weighted attention lab", "uat-lab"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kToolVersion);

    auto* gen = app.add_subcommand("generate", "Generate a synthetic task");
    gen->add_option("--config", gen_config_, "task spec JSON")->required();
    gen->add_option("--out", out_dir_, "output directory")->required();

    auto* train = app.add_subcommand("train", "Train an encoder on a generated task");
    train->add_option("--data", data_, "directory written by generate")->required();
    train->add_option("--config", train_config_, "JSON with optional 'model' and 'train' sections");
    train->add_option("--seed", seed_, "training seed")->capture_default_str();
    train->add_option("--out", out_dir_)->required();

    auto* infer = app.add_subcommand("infer", "Write a prediction dump");
    infer->add_option("--weights", weights_, "checkpoint")->required();
    infer->add_option("--data", data_, "split JSONL")->required();
    infer_mc_ = infer_.attach(infer);
    infer->add_flag("--keep-passes", keep_passes_, "store per-pass logits");
    infer->add_option("--out", out_dir_)->required();

    auto* dec = app.add_subcommand("decompose", "Layer-wise variance decomposition");
    dec->add_option("--weights", weights_)->required();
    dec->add_option("--data", data_, "split JSONL")->required();
    dec->add_option("--index", index_, "row of the split to analyse")->capture_default_str();
    dec->add_option("--outer", outer_)->capture_default_str();
    dec->add_option("--inner", inner_)->capture_default_str();
    dec->add_option("--layer", only_layer_, "confine dropout to this layer (0 = embedding)");
    dec->add_flag("--no-modulation", no_modulation_, "skip the uncertainty weighting");
    dec->add_option("--seed", seed_)->capture_default_str();
    dec->add_option("--out", out_dir_)->required();

    auto* met = app.add_subcommand("metrics", "Calibration and selective-prediction reports");
    met->add_option("--predictions", predictions_, "prediction dump")->required();
    met->add_option("--ood", ood_, "paired out-of-distribution dump");
    met->add_option("--bins", bins_)->capture_default_str();
    met->add_option("--thresholds", thresholds_, "comma-separated")->capture_default_str();
    met->add_option("--fit-temperature", val_dump_, "validation dump to fit a temperature on");
    met->add_option("--out", out_dir_)->required();

    auto* exp = app.add_subcommand("experiment", "Run a full experiment manifest");
    exp->add_option("--manifest", manifest_)->required();
    exp->add_option("--out", out_dir_)->required();
    exp->add_option("--threads", threads_)->capture_default_str();
    exp->add_flag("--quiet", quiet_);

    auto* eff = app.add_subcommand("bench-efficiency", "Per-example latency");
    eff->add_option("--weights", weights_)->required();
    eff->add_option("--data", data_, "split JSONL")->required();
    infer_.attach(eff);
    eff->add_option("--warmup", warmup_)->capture_default_str();
    eff->add_option("--runs", runs_)->capture_default_str();
    eff->add_option("--out", out_dir_)->required();

    auto* rerun = app.add_subcommand("rerun", "Reproduce a run directory from its manifest");
    rerun->add_option("--from", from_, "existing run directory")->required();
    rerun->add_option("--out", out_dir_)->required();
    rerun->add_option("--threads", threads_)->capture_default_str();

    try {
      std::vector<std::string> reversed(args.rbegin(), args.rend());
      app.parse(reversed);
    } catch (const CLI::ParseError& e) {
      const int code = app.exit(e, out_, err_);
      return code == 0 ? kExitOk : kExitUsage;
    }

    try {
      if (gen->parsed()) return generate();
      if (train->parsed()) return do_train();
      if (infer->parsed()) return do_infer();
      if (dec->parsed()) return decompose();
      if (met->parsed()) return metrics();
      if (exp->parsed()) return experiment();
      if (eff->parsed()) return efficiency();
      if (rerun->parsed()) return do_rerun();
    } catch (const Error& e) {
      err_ << "error [" << to_string(e.code()) << "]: " << e.what() << '\n';
      return exit_code_for(e.code());
    } catch (const std::exception& e) {
      err_ << "error: " << e.what() << '\n';
      return kExitFailure;
    }
    return kExitUsage;
  }

 private:
  std::ostream& out_;
  std::ostream& err_;
  std::string gen_config_, train_config_, data_, weights_, out_dir_, predictions_, ood_, val_dump_,
      manifest_, from_;
  std::string thresholds_ = "0.9,0.8,0.7";
  std::uint64_t seed_ = 1;
  std::size_t index_ = 0, outer_ = 16, inner_ = 16, bins_ = kDefaultBins, threads_ = 1;
  std::size_t warmup_ = 50, runs_ = 200;
  std::optional<std::size_t> only_layer_;
  bool keep_passes_ = false, no_modulation_ = false, quiet_ = false;
  InferFlags infer_;
  CLI::Option* infer_mc_ = nullptr;

  int generate() {
    const auto spec = read_json_file(gen_config_).get<SyntheticTaskSpec>();
    const Dataset d = generate_task(spec);
    write_dataset(out_dir_, d);
    Replay r;
    r.add("--config", absolute(gen_config_));
    finish(out_dir_, "generate", absolute(gen_config_), json{{"task", spec}}, r, {spec.seed});
    out_ << fmt::format("wrote {} train, {} val, {} test_id, {} test_ood examples to {}\n",
                        d.train.size(), d.val.size(), d.test_id.size(), d.test_ood.size(), out_dir_);
    return kExitOk;
  }

  int do_train() {
    json cfg = train_config_.empty() ? json::object() : read_json_file(train_config_);
    const Dataset d = read_dataset(data_);
    EncoderConfig model = cfg.contains("model") ? cfg.at("model").get<EncoderConfig>() : EncoderConfig{};
    const TrainConfig tc = cfg.contains("train") ? cfg.at("train").get<TrainConfig>() : TrainConfig{};
    // Size the model to the data's task when a generate manifest is present.
    const fs::path gen_manifest = fs::path(data_) / "manifest.json";
    if (fs::exists(gen_manifest)) {
      const json g = read_json_file(gen_manifest.string());
      if (g.contains("config") && g["config"].contains("task")) {
        model = encoder_config_for(g["config"]["task"].get<SyntheticTaskSpec>(), model);
      }
    }
    const auto result = train_encoder(d.train, model, tc, seed_);
    save_checkpoint(fs::path(out_dir_) / "checkpoint.json", model, result.weights);
    const json summary{{"initial_loss", result.initial_loss},
                       {"final_loss", result.final_loss},
                       {"epoch_loss", result.epoch_loss},
                       {"val_accuracy", accuracy(d.val, result.weights, model)}};
    write_json_file(fs::path(out_dir_) / "training.json", summary);
    Replay r;
    r.add("--data", absolute(data_));
    if (!train_config_.empty()) r.add("--config", absolute(train_config_));
    r.add("--seed", seed_);
    finish(out_dir_, "train", train_config_.empty() ? "" : absolute(train_config_),
           json{{"model", model}, {"train", tc}}, r, {seed_});
    out_ << fmt::format("loss {:.4f} -> {:.4f}, val accuracy {:.4f}\n", result.initial_loss,
                        result.final_loss, summary["val_accuracy"].get<double>());
    return kExitOk;
  }

  int do_infer() {
    if (infer_.mode == "baseline" && infer_mc_->count() > 0) {
      err_ << "warning: --mc-samples is ignored in baseline mode\n";
    }
    auto [config, weights] = load_checkpoint(weights_);
    const auto rows = read_split(data_);
    const MethodConfig method = infer_.method();
    std::vector<PredictionRecord> records;
    const std::span one(&weights, 1);
    if (keep_passes_ && method.kind != MethodKind::kBaselineDeterministic) {
      // Same per-example seeding as predict(), with the passes retained.
      EncoderConfig c = config;
      c.dropout_embedding = method.rates[0];
      c.dropout_attention = method.rates[1];
      c.dropout_ffn = method.rates[2];
      c.lambda = method.kind == MethodKind::kUatLite ? method.lambda : 0.0;
      c.mc_samples = method.mc_samples;
      for (const auto& ex : rows) {
        records.push_back(make_record(ex.id, ex.label,
                                      run_mc_inference(ex.tokens, weights, c, derive_key(infer_.seed, {ex.id})),
                                      true));
      }
    } else {
      records = predict(method, one, config, rows, infer_.seed);
    }
    write_predictions(fs::path(out_dir_) / "predictions.jsonl", records);
    Replay r;
    r.add("--weights", absolute(weights_));
    r.add("--data", absolute(data_));
    infer_.record(r);
    if (keep_passes_) r.flag("--keep-passes");
    finish(out_dir_, "infer", "", infer_.resolved(), r, {infer_.seed});
    out_ << fmt::format("wrote {} predictions\n", records.size());
    return kExitOk;
  }

  int decompose() {
    auto [config, weights] = load_checkpoint(weights_);
    const auto rows = read_split(data_);
    if (index_ >= rows.size()) {
      throw Error(ErrorCode::kInvalidArgument,
                  fmt::format("--index {} but {} has {} rows", index_, data_, rows.size()));
    }
    const auto& ex = rows[index_];
    DecompositionOptions opt;
    opt.outer = outer_;
    opt.inner = inner_;
    if (only_layer_) opt.scope = StochasticityPlan::single_layer(*only_layer_, 0, 0);
    if (!no_modulation_) opt.token_uncertainty = run_mc_inference(ex.tokens, weights, config, seed_).token_uncertainty;
    const auto rep = estimate_layer_variance(ex.tokens, weights, config, seed_, opt);
    write_layer_variance_csv(fs::path(out_dir_) / "layer_variance.csv", rep);
    write_json_file(fs::path(out_dir_) / "layer_variance.json",
                    json{{"per_layer_variance", rep.per_layer_variance},
                         {"normalized", rep.normalized},
                         {"zero_total", rep.zero_total},
                         {"total_variance", rep.total_variance},
                         {"residual", rep.residual},
                         {"standard_error", rep.standard_error},
                         {"outer_samples", rep.outer_samples},
                         {"inner_samples", rep.inner_samples},
                         {"target_class", rep.target_class},
                         {"example_id", ex.id}});
    Replay r;
    r.add("--weights", absolute(weights_));
    r.add("--data", absolute(data_));
    r.add("--index", static_cast<std::uint64_t>(index_));
    r.add("--outer", static_cast<std::uint64_t>(outer_));
    r.add("--inner", static_cast<std::uint64_t>(inner_));
    if (only_layer_) r.add("--layer", static_cast<std::uint64_t>(*only_layer_));
    if (no_modulation_) r.flag("--no-modulation");
    r.add("--seed", seed_);
    finish(out_dir_, "decompose", "", json{{"outer", outer_}, {"inner", inner_}}, r, {seed_});
    out_ << fmt::format("total variance {:.6g}, residual {:.6g}\n", rep.total_variance, rep.residual);
    return kExitOk;
  }

  int metrics() {
    const auto thresholds = parse_list(thresholds_);
    auto records = read_predictions(fs::path(predictions_));
    std::optional<std::vector<PredictionRecord>> ood;
    if (!ood_.empty()) ood = read_predictions(fs::path(ood_));
    std::optional<double> temperature;
    if (!val_dump_.empty()) {
      temperature = fit_temperature(read_predictions(fs::path(val_dump_)));
      records = apply_temperature(records, *temperature);
      if (ood) ood = apply_temperature(*ood, *temperature);
    }
    const fs::path dir(out_dir_);
    auto report = compute_ece(records, bins_);
    report.temperature = temperature;
    json calib = report;
    write_json_file(dir / "calibration.json", calib);
    write_bins_csv(dir / "bins.csv", report);
    const auto curve = risk_coverage(records, thresholds);
    write_curve_csv(dir / "risk_coverage.csv", curve);
    json sel = curve;
    if (ood) {
      const auto ood_report = compute_ece(*ood, bins_);
      const auto shift = shift_metrics(report, ood_report);
      write_json_file(dir / "shift.json", json{{"ece_id", report.ece},
                                               {"ece_ood", ood_report.ece},
                                               {"delta_ece", shift.delta_ece},
                                               {"robustness", shift.robustness}});
    }
    write_json_file(dir / "selective.json", sel);
    Replay r;
    r.add("--predictions", absolute(predictions_));
    if (!ood_.empty()) r.add("--ood", absolute(ood_));
    r.add("--bins", static_cast<std::uint64_t>(bins_));
    r.add("--thresholds", thresholds_);
    if (!val_dump_.empty()) r.add("--fit-temperature", absolute(val_dump_));
    finish(out_dir_, "metrics", "", json{{"bins", bins_}, {"thresholds", thresholds}}, r, {});
    out_ << fmt::format("ECE {:.4f} (bins {}), accuracy {:.4f}, AURC {:.4f}\n", report.ece, bins_,
                        report.accuracy_overall, curve.aurc);
    return kExitOk;
  }

  int experiment() {
    const auto manifest = load_manifest(manifest_);
    ExperimentOptions opt;
    opt.threads = threads_;
    if (!quiet_) opt.log = [this](const std::string& s) { err_ << s << '\n'; };
    const auto summary = run_experiment(manifest, out_dir_, opt);
    for (const auto& a : summary.aggregate) {
      out_ << fmt::format("{:<24} ECE {:.4f} ± {:.4f}  acc {:.4f} ± {:.4f}  AURC {:.4f}\n", a.method,
                          a.ece.mean, a.ece.std, a.accuracy.mean, a.accuracy.std, a.aurc.mean);
    }
    return kExitOk;
  }

  int efficiency() {
    auto [config, weights] = load_checkpoint(weights_);
    const auto rows = read_split(data_);
    const auto r = measure_efficiency(infer_.method(), std::span(&weights, 1), config, rows, warmup_, runs_);
    write_json_file(fs::path(out_dir_) / "efficiency.json",
                    json{{"method", r.method},
                         {"mean_latency", r.mean_latency},
                         {"std_latency", r.std_latency},
                         {"passes", r.passes},
                         {"warmup", warmup_},
                         {"runs", runs_}});
    Replay rp;
    rp.add("--weights", absolute(weights_));
    rp.add("--data", absolute(data_));
    infer_.record(rp);
    rp.add("--warmup", static_cast<std::uint64_t>(warmup_));
    rp.add("--runs", static_cast<std::uint64_t>(runs_));
    finish(out_dir_, "bench-efficiency", "", infer_.resolved(), rp, {infer_.seed});
    out_ << fmt::format("{}: {:.3f} ms ± {:.3f} per example, {} passes\n", r.method,
                        r.mean_latency * 1e3, r.std_latency * 1e3, r.passes);
    return kExitOk;
  }

  int do_rerun() {
    const json m = read_json_file((fs::path(from_) / "manifest.json").string());
    const std::string command = m.at("command").get<std::string>();
    if (command == "experiment") {
      ExperimentOptions opt;
      opt.threads = threads_;
      rerun_from_manifest(from_, out_dir_, opt);
      return kExitOk;
    }
    auto argv = m.at("config").at("argv").get<std::vector<std::string>>();
    argv.insert(argv.begin(), command);
    argv.push_back("--out");
    argv.push_back(out_dir_);
    return run_cli(argv, out_, err_);
  }
};

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  return Cli(out, err).run(args);
}

}  // namespace uat
