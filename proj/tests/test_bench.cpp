#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "uat/bench.hpp"
#include "uat/error.hpp"
#include "uat/experiment.hpp"
#include "uat/mcinfer.hpp"
#include "uat/trainer.hpp"

using namespace uat;
namespace fs = std::filesystem;

namespace {

SyntheticTaskSpec tiny_spec(double ambiguity = 0.3) {
  SyntheticTaskSpec s;
  s.ambiguity_fraction = ambiguity;
  s.num_train = 600;
  s.num_val = 120;
  s.num_test = 120;
  return s;
}

EncoderConfig tiny_model(const SyntheticTaskSpec& s) {
  EncoderConfig c = encoder_config_for(s);
  c.num_layers = 2;
  c.model_dim = 16;
  c.ff_dim = 32;
  c.num_heads = 2;
  return c;
}

// One trained model shared by the method tests.
struct Fixture {
  SyntheticTaskSpec spec = tiny_spec();
  Dataset data = generate_task(spec);
  EncoderConfig config = tiny_model(spec);
  EncoderWeights weights = [&] {
    TrainConfig tc;
    tc.epochs = 2;
    return train_encoder(data.train, config, tc, 4).weights;
  }();
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("zero learning rate leaves weights unchanged") {
  const auto s = tiny_spec();
  const auto d = generate_task(s);
  const auto c = tiny_model(s);
  TrainConfig tc;
  tc.epochs = 1;
  tc.learning_rate = 0.0;
  const auto r = train_encoder(std::vector(d.train.begin(), d.train.begin() + 64), c, tc, 9);
  const auto init = EncoderWeights::initialize(c, derive_key(9, {0x696e6974ULL}));
  CHECK(r.weights == init);
}

TEST_CASE("training lowers the loss and is reproducible") {
  const auto& f = fixture();
  TrainConfig tc;
  tc.epochs = 2;
  const auto a = train_encoder(f.data.train, f.config, tc, 4);
  CHECK(a.final_loss < a.initial_loss);
  CHECK(a.weights == f.weights);
}

TEST_CASE("clear task is learned") {
  const auto s = tiny_spec(0.0);
  auto big = s;
  big.num_train = 1200;
  const auto d = generate_task(big);
  const auto c = encoder_config_for(s);
  TrainConfig tc;
  tc.epochs = 5;
  const auto r = train_encoder(d.train, c, tc, 2);
  CHECK(accuracy(d.train, r.weights, c) >= 0.98);
  CHECK(accuracy(d.test_id, r.weights, c) >= 0.95);
}

TEST_CASE("empty training set is an error") {
  const auto c = tiny_model(tiny_spec());
  CHECK_THROWS_AS(train_encoder({}, c, TrainConfig{}, 1), Error);
}

TEST_CASE("checkpoint round trip") {
  const auto& f = fixture();
  const auto path = fs::temp_directory_path() / "uat_bench_ckpt" / "w.json";
  save_checkpoint(path, f.config, f.weights);
  const auto [c, w] = load_checkpoint(path);
  CHECK(c == f.config);
  CHECK(w == f.weights);
  fs::remove_all(path.parent_path());
}

TEST_CASE("method configs round trip through JSON") {
  for (const auto& m : default_roster()) {
    const nlohmann::json j = m;
    const auto back = j.get<MethodConfig>();
    CHECK(back.kind == m.kind);
    CHECK(back.label() == m.label());
    CHECK(back.passes() == m.passes());
  }
  CHECK_THROWS_AS(nlohmann::json({{"method", "nope"}}).get<MethodConfig>(), Error);
}

TEST_CASE("baseline is deterministic") {
  const auto& f = fixture();
  const std::span one(&f.weights, 1);
  const auto a = run_method_predictions(MethodConfig::baseline(), one, f.config, f.data, 1);
  const auto b = run_method_predictions(MethodConfig::baseline(), one, f.config, f.data, 2);
  const auto ra = evaluate_outputs("b", 1, a, {});
  const auto rb = evaluate_outputs("b", 1, b, {});
  CHECK(ra.ece == rb.ece);
  CHECK(ra.aurc == rb.aurc);
  CHECK(a.test_id == b.test_id);
}

TEST_CASE("uat_lite with lambda 0 equals mc_component") {
  const auto& f = fixture();
  const std::span one(&f.weights, 1);
  const auto u = run_method_predictions(MethodConfig::uat_lite(0.0), one, f.config, f.data, 7);
  const auto m = run_method_predictions(MethodConfig::mc_component(), one, f.config, f.data, 7);
  CHECK(u.test_id == m.test_id);
  CHECK(evaluate_outputs("u", 7, u, {}).ece == evaluate_outputs("m", 7, m, {}).ece);
  const auto u5 = run_method_predictions(MethodConfig::uat_lite(0.5), one, f.config, f.data, 7);
  CHECK_FALSE(u5.test_id == m.test_id);
}

TEST_CASE("single-member ensemble is the baseline") {
  const auto& f = fixture();
  const std::span one(&f.weights, 1);
  const auto e = predict(MethodConfig::deep_ensemble(1), one, f.config, f.data.test_id, 3);
  const auto b = predict(MethodConfig::baseline(), one, f.config, f.data.test_id, 3);
  REQUIRE(e.size() == b.size());
  for (std::size_t i = 0; i < e.size(); ++i) {
    CHECK(e[i].mean_probs == b[i].mean_probs);
    CHECK(e[i].confidence == b[i].confidence);
  }
  CHECK_THROWS_AS(predict(MethodConfig::deep_ensemble(3), one, f.config, f.data.test_id, 3), Error);
}

TEST_CASE("temperature and thresholds never read test labels") {
  const auto& f = fixture();
  const std::span one(&f.weights, 1);
  Dataset scrambled = f.data;
  for (auto& ex : scrambled.test_id) ex.label = (ex.label + 1) % f.spec.num_classes;
  for (auto& ex : scrambled.test_ood) ex.label = (ex.label + 2) % f.spec.num_classes;
  const auto a = run_method_predictions(MethodConfig::temp_scaling(), one, f.config, f.data, 5);
  const auto b = run_method_predictions(MethodConfig::temp_scaling(), one, f.config, scrambled, 5);
  REQUIRE(a.temperature);
  CHECK(*a.temperature == *b.temperature);
  const auto policy = ThresholdPolicy::coverage_targets({0.9, 0.5});
  CHECK(select_thresholds(a.val, policy) == select_thresholds(b.val, policy));
}

TEST_CASE("aggregate recomputes from rows") {
  std::vector<ResultRow> rows;
  for (std::uint64_t s = 1; s <= 4; ++s) {
    ResultRow r;
    r.method = s % 2 ? "a" : "b";
    r.seed = s;
    r.ece = 0.1 * s;
    r.accuracy = 0.5 + 0.01 * s;
    r.coverage_at[0.9] = 0.2 * s;
    rows.push_back(r);
  }
  const auto agg = aggregate(rows);
  REQUIRE(agg.size() == 2);
  CHECK(agg[0].method == "a");
  CHECK(std::abs(agg[0].ece.mean - 0.2) <= 1e-12);
  CHECK(std::abs(agg[0].ece.std - std::sqrt(0.02)) <= 1e-12);
  CHECK(std::abs(agg[1].coverage_at.at(0.9).mean - 0.6) <= 1e-12);
  const std::vector<double> one{3.0};
  CHECK(summarize(one).std == 0.0);
}

TEST_CASE("ablation has four arms on shared weights") {
  const auto& f = fixture();
  const auto rows = run_ablation(f.weights, f.config, f.data, 3, MethodConfig::uat_lite(), {});
  REQUIRE(rows.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) CHECK(rows[i].arm == kAblationArms[i]);
  const auto base = predict(MethodConfig::baseline(), std::span(&f.weights, 1), f.config, f.data.test_id, 3);
  CHECK(rows[0].ece == compute_ece(base).ece);
  CHECK(rows[2].ece != rows[0].ece);
}

TEST_CASE("sensitivity grid") {
  const auto& f = fixture();
  auto small = f.data;
  small.test_id.resize(40);
  const auto t = run_sensitivity(f.weights, f.config, small, 3, MethodConfig::uat_lite(),
                                 kSensitivityLambdas, kSensitivitySamples, {});
  REQUIRE(t.cells.size() == 9);
  CHECK(t.cells[0].lambda == 0.1);
  CHECK(t.cells[0].mc_samples == 3);
  CHECK(t.cells[8].lambda == 1.0);
  CHECK(t.cells[8].mc_samples == 10);
  CHECK(t.range == doctest::Approx(t.max - t.min));
  const auto again = run_sensitivity_cell(f.weights, f.config, small, 3, MethodConfig::uat_lite(),
                                          t.cells[4].lambda, t.cells[4].mc_samples, {});
  CHECK(again.ece == t.cells[4].ece);
  CHECK(again.accuracy == t.cells[4].accuracy);
}

TEST_CASE("efficiency counts passes") {
  const auto& f = fixture();
  const std::span one(&f.weights, 1);
  CHECK(measure_efficiency(MethodConfig::baseline(), one, f.config, f.data.test_id, 2, 5).passes == 1);
  CHECK(measure_efficiency(MethodConfig::uat_lite(0.5, 10), one, f.config, f.data.test_id, 2, 5).passes == 10);
  std::vector<EncoderWeights> three(3, f.weights);
  CHECK(measure_efficiency(MethodConfig::deep_ensemble(3), three, f.config, f.data.test_id, 1, 3).passes == 3);
}

TEST_CASE("experiment runs, resumes and reproduces across thread counts") {
  ExperimentManifest m;
  m.task = tiny_spec();
  m.task.num_train = 200;
  m.task.num_val = 40;
  m.task.num_test = 40;
  m.model = tiny_model(m.task);
  m.train.epochs = 1;
  m.methods = default_roster();
  m.methods.back().ensemble_size = 2;
  m.seeds = {1, 2};
  m.shared_checkpoint = true;
  m.sensitivity_lambdas = {0.5};
  m.sensitivity_samples = {3};

  const auto root = fs::temp_directory_path() / "uat_experiment_test";
  fs::remove_all(root);
  const auto s1 = run_experiment(m, root / "a", {.threads = 1});
  CHECK(s1.rows.size() == 12);
  CHECK(s1.aggregate.size() == 6);
  CHECK(s1.ablation.size() == 8);
  CHECK(s1.checkpoints_trained == 2);
  CHECK(fs::exists(root / "a" / "manifest.json"));
  // Shared checkpoint: the deterministic baseline cannot vary by seed.
  CHECK(s1.aggregate[0].method == "baseline_deterministic");
  CHECK(s1.aggregate[0].ece.std == 0.0);

  // Resume: drop one cell and rerun.
  fs::remove(root / "a" / "cells" / "uat_lite_seed2.json");
  const auto s2 = run_experiment(m, root / "a", {.threads = 1});
  CHECK(s2.cells_computed == 1);
  CHECK(s2.checkpoints_trained == 0);
  CHECK(slurp(root / "a" / "tables" / "results.csv").size() > 0);

  const auto s3 = rerun_from_manifest(root / "a", root / "b", {.threads = 3});
  for (const char* f : {"tables/results.csv", "tables/aggregate.csv", "tables/ablation.csv",
                        "tables/sensitivity.csv", "predictions/uat_lite_seed2_test_ood.jsonl",
                        "checkpoints/seed1_member1.json", "data/train.jsonl"}) {
    CHECK_MESSAGE(slurp(root / "a" / f) == slurp(root / "b" / f), f);
  }

  // A different experiment may not reuse the directory.
  m.seeds = {1, 2, 3};
  CHECK_THROWS_AS(run_experiment(m, root / "a"), Error);
  fs::remove_all(root);
}

TEST_CASE("identity shift gives no systematic ECE gap") {
  std::vector<double> deltas;
  for (std::uint64_t seed = 1; seed <= 6; ++seed) {
    auto s = tiny_spec();
    s.shift_fraction = 0.0;
    s.seed = seed;
    s.num_train = 300;
    s.num_test = 300;
    const auto d = generate_task(s);
    const auto c = tiny_model(s);
    TrainConfig tc;
    tc.epochs = 1;
    const auto w = train_encoder(d.train, c, tc, seed).weights;
    const auto out = run_method_predictions(MethodConfig::baseline(), std::span(&w, 1), c, d, seed);
    deltas.push_back(evaluate_outputs("baseline", seed, out, {}).delta_ece);
  }
  const auto s = summarize(deltas);
  const double stderr_ = s.std / std::sqrt(static_cast<double>(deltas.size()));
  CHECK(std::abs(s.mean) <= 2.0 * stderr_);
}
