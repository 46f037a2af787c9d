#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "uat/cli.hpp"
#include "uat/predictions.hpp"

using namespace uat;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

struct Workspace {
  fs::path root = fs::temp_directory_path() / "uat_cli_test";
  Workspace() {
    fs::remove_all(root);
    fs::create_directories(root);
  }
  ~Workspace() { fs::remove_all(root); }
  std::string operator/(const std::string& s) const { return (root / s).string(); }
};

void write_file(const std::string& path, const std::string& text) { std::ofstream(path) << text; }

}  // namespace

TEST_CASE("usage errors exit with code 2") {
  Workspace ws;
  CHECK(cli({}).code == kExitUsage);
  CHECK(cli({"generate", "--out", ws / "x"}).code == kExitUsage);
  CHECK(cli({"nonsense"}).code == kExitUsage);
  CHECK(cli({"--help"}).code == kExitOk);
}

TEST_CASE("error codes map to distinct exit statuses") {
  CHECK(exit_code_for(ErrorCode::kIo) == kExitIo);
  CHECK(exit_code_for(ErrorCode::kNumerical) == kExitNumerical);
  CHECK(exit_code_for(ErrorCode::kFormat) == kExitFormat);
  CHECK(exit_code_for(ErrorCode::kInvalidConfig) == kExitFailure);
}

TEST_CASE("end to end pipeline and reruns") {
  Workspace ws;
  write_file(ws / "task.json", R"({"num_train":300,"num_val":80,"num_test":80,"seed":5})");
  write_file(ws / "train.json", R"({"model":{"model_dim":16,"num_heads":2,"ff_dim":32,"num_layers":2},"train":{"epochs":1}})");

  REQUIRE(cli({"generate", "--config", ws / "task.json", "--out", ws / "data"}).code == 0);
  for (const char* f : {"train.jsonl", "val.jsonl", "test_id.jsonl", "test_ood.jsonl", "manifest.json"})
    CHECK(fs::exists(fs::path(ws / "data") / f));

  REQUIRE(cli({"rerun", "--from", ws / "data", "--out", ws / "data2"}).code == 0);
  for (const char* f : {"train.jsonl", "val.jsonl", "test_id.jsonl", "test_ood.jsonl"})
    CHECK(slurp(fs::path(ws / "data") / f) == slurp(fs::path(ws / "data2") / f));

  REQUIRE(cli({"train", "--data", ws / "data", "--config", ws / "train.json", "--seed", "2", "--out", ws / "ck"}).code ==
          0);
  const std::string ckpt = ws / "ck/checkpoint.json";
  const std::string val = ws / "data/val.jsonl";

  REQUIRE(cli({"infer", "--weights", ckpt, "--data", val, "--mode", "uat", "--lambda", "0", "--out", ws / "u0"}).code ==
          0);
  REQUIRE(cli({"infer", "--weights", ckpt, "--data", val, "--mode", "mc", "--out", ws / "mc"}).code == 0);
  CHECK(slurp(ws / "u0/predictions.jsonl") == slurp(ws / "mc/predictions.jsonl"));

  const auto warned = cli({"infer", "--weights", ckpt, "--data", val, "--mode", "baseline", "--mc-samples", "4",
                           "--out", ws / "base"});
  CHECK(warned.code == 0);
  CHECK(warned.err.find("ignored") != std::string::npos);
  for (const auto& r : read_predictions(fs::path(ws / "base/predictions.jsonl"))) CHECK(r.predictive_variance == 0.0);

  REQUIRE(cli({"infer", "--weights", ckpt, "--data", val, "--mode", "uat", "--seed", "9", "--out", ws / "u"}).code ==
          0);
  REQUIRE(cli({"rerun", "--from", ws / "u", "--out", ws / "u_again"}).code == 0);
  CHECK(slurp(ws / "u/predictions.jsonl") == slurp(ws / "u_again/predictions.jsonl"));

  const auto met = cli({"metrics", "--predictions", ws / "u/predictions.jsonl", "--bins", "7", "--fit-temperature",
                        ws / "mc/predictions.jsonl", "--out", ws / "m"});
  REQUIRE(met.code == 0);
  CHECK(slurp(ws / "m/calibration.json").find("\"num_bins\": 7") != std::string::npos);
  CHECK(fs::exists(fs::path(ws / "m/risk_coverage.csv")));
  CHECK(fs::exists(fs::path(ws / "m/manifest.json")));

  REQUIRE(cli({"decompose", "--weights", ckpt, "--data", val, "--outer", "3", "--inner", "3", "--out", ws / "d"})
              .code == 0);
  CHECK(slurp(ws / "d/layer_variance.csv").rfind("layer_index,component_label,variance,normalized", 0) == 0);
}

TEST_CASE("malformed dumps and missing files report their class") {
  Workspace ws;
  write_file(ws / "bad.jsonl", "{\"example_id\": 1}\nnot json\n");
  const auto bad = cli({"metrics", "--predictions", ws / "bad.jsonl", "--out", ws / "m"});
  CHECK(bad.code == kExitFormat);
  CHECK(bad.err.find("line 1") != std::string::npos);
  CHECK(cli({"metrics", "--predictions", ws / "absent.jsonl", "--out", ws / "m"}).code == kExitIo);
  write_file(ws / "t.json", R"({"seq_len":3})");
  CHECK(cli({"generate", "--config", ws / "t.json", "--out", ws / "g"}).code == kExitFailure);
}
