#include "uat/predictions.hpp"

#include <cmath>
#include <fstream>
#include <string>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "uat/error.hpp"

namespace uat {

using nlohmann::json;

PredictionRecord make_record(std::uint64_t example_id, std::size_t label,
                             const McOutcome& outcome, bool keep_passes) {
  PredictionRecord r;
  r.example_id = example_id;
  r.label = label;
  r.mean_probs = outcome.mean_probs;
  r.mean_logits = outcome.mean_logits;
  r.predicted_class = outcome.predicted_class;
  r.confidence = outcome.confidence;
  r.predictive_variance = outcome.predictive_variance;
  r.token_uncertainty = outcome.token_uncertainty;
  if (keep_passes) r.per_pass_logits = outcome.per_pass_logits;
  return r;
}

namespace {

json record_to_json(const PredictionRecord& r) {
  json j{{"example_id", r.example_id},
         {"label", r.label},
         {"mean_probs", r.mean_probs},
         {"mean_logits", r.mean_logits},
         {"predicted_class", r.predicted_class},
         {"confidence", r.confidence},
         {"predictive_variance", r.predictive_variance},
         {"token_uncertainty", r.token_uncertainty}};
  if (r.per_pass_logits) {
    json rows = json::array();
    for (std::size_t m = 0; m < r.per_pass_logits->rows(); ++m) {
      const auto row = r.per_pass_logits->row(m);
      rows.push_back(std::vector<double>(row.begin(), row.end()));
    }
    j["per_pass_logits"] = std::move(rows);
  }
  return j;
}

[[noreturn]] void fail(std::size_t line, const std::string& what) {
  throw Error(ErrorCode::kFormat, fmt::format("prediction dump line {}: {}", line, what));
}

PredictionRecord record_from_json(const json& j, std::size_t line) {
  if (!j.is_object()) fail(line, "expected a JSON object");
  for (const char* key : {"example_id", "label", "predicted_class", "confidence"}) {
    if (!j.contains(key)) fail(line, fmt::format("missing field '{}'", key));
  }
  PredictionRecord r;
  try {
    r.example_id = j.at("example_id").get<std::uint64_t>();
    r.label = j.at("label").get<std::size_t>();
    r.predicted_class = j.at("predicted_class").get<std::size_t>();
    r.confidence = j.at("confidence").get<double>();
    if (j.contains("mean_probs")) r.mean_probs = j.at("mean_probs").get<std::vector<double>>();
    if (j.contains("mean_logits")) r.mean_logits = j.at("mean_logits").get<std::vector<double>>();
    r.predictive_variance = j.value("predictive_variance", 0.0);
    if (j.contains("token_uncertainty")) {
      r.token_uncertainty = j.at("token_uncertainty").get<std::vector<double>>();
    }
    if (j.contains("per_pass_logits")) {
      const auto rows = j.at("per_pass_logits").get<std::vector<std::vector<double>>>();
      const std::size_t cols = rows.empty() ? 0 : rows.front().size();
      std::vector<double> flat;
      for (const auto& row : rows) {
        if (row.size() != cols) fail(line, "ragged per_pass_logits");
        flat.insert(flat.end(), row.begin(), row.end());
      }
      r.per_pass_logits = Matrix(rows.size(), cols, std::move(flat));
    }
  } catch (const json::exception& e) {
    fail(line, e.what());
  }

  if (!(r.confidence > 0.0 && r.confidence <= 1.0)) {
    fail(line, fmt::format("confidence {} outside (0, 1]", r.confidence));
  }
  if (!r.mean_probs.empty()) {
    double sum = 0.0;
    for (double p : r.mean_probs) {
      if (!(p >= 0.0 && p <= 1.0)) fail(line, "mean_probs entry outside [0, 1]");
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-6) fail(line, fmt::format("mean_probs sum to {}", sum));
    if (r.predicted_class >= r.mean_probs.size()) fail(line, "predicted_class out of range");
    if (r.label >= r.mean_probs.size()) fail(line, "label out of range");
  }
  if (!r.mean_logits.empty() && !r.mean_probs.empty() &&
      r.mean_logits.size() != r.mean_probs.size()) {
    fail(line, "mean_logits and mean_probs differ in length");
  }
  return r;
}

}  // namespace

void write_predictions(std::ostream& out, std::span<const PredictionRecord> records) {
  for (const auto& r : records) out << record_to_json(r).dump() << '\n';
}

void write_predictions(const std::filesystem::path& path,
                       std::span<const PredictionRecord> records) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, fmt::format("cannot write {}", path.string()));
  write_predictions(out, records);
  if (!out) throw Error(ErrorCode::kIo, fmt::format("write failed for {}", path.string()));
}

std::vector<PredictionRecord> read_predictions(std::istream& in) {
  std::vector<PredictionRecord> records;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      fail(line, e.what());
    }
    records.push_back(record_from_json(j, line));
  }
  return records;
}

std::vector<PredictionRecord> read_predictions(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, fmt::format("cannot read {}", path.string()));
  return read_predictions(in);
}

}  // namespace uat
