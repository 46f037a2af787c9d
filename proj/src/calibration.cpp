#include "uat/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <boost/math/tools/minima.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "uat/error.hpp"

namespace uat {

std::size_t bin_index(double confidence, std::size_t num_bins) {
  const double k = static_cast<double>(num_bins);
  if (confidence <= 0.0) return 0;
  auto idx = static_cast<std::size_t>(std::ceil(confidence * k));
  idx = std::clamp<std::size_t>(idx, 1, num_bins) - 1;
  // Settle rounding at the edges against the edges themselves.
  while (idx > 0 && confidence <= static_cast<double>(idx) / k) --idx;
  while (idx + 1 < num_bins && confidence > static_cast<double>(idx + 1) / k) ++idx;
  return idx;
}

CalibrationReport compute_ece(std::span<const PredictionRecord> records, std::size_t num_bins) {
  if (records.empty()) throw Error(ErrorCode::kEmptyInput, "compute_ece: no records");
  if (num_bins == 0) throw Error(ErrorCode::kInvalidArgument, "compute_ece: zero bins");

  CalibrationReport report;
  report.num_bins = num_bins;
  report.count = records.size();
  report.bins.resize(num_bins);
  for (std::size_t k = 0; k < num_bins; ++k) {
    report.bins[k].lo = static_cast<double>(k) / static_cast<double>(num_bins);
    report.bins[k].hi = static_cast<double>(k + 1) / static_cast<double>(num_bins);
  }
  std::size_t correct = 0;
  for (const auto& r : records) {
    auto& bin = report.bins[bin_index(r.confidence, num_bins)];
    ++bin.count;
    bin.confidence_sum += r.confidence;
    if (r.correct()) {
      ++bin.correct;
      ++correct;
    }
  }
  report.accuracy_overall = static_cast<double>(correct) / static_cast<double>(records.size());
  report.ece = ece_from_bins(report);
  return report;
}

double ece_from_bins(const CalibrationReport& report) {
  std::size_t n = 0;
  for (const auto& b : report.bins) n += b.count;
  if (n == 0) return 0.0;
  double ece = 0.0;
  for (const auto& b : report.bins) {
    if (b.count == 0) continue;
    ece += static_cast<double>(b.count) / static_cast<double>(n) *
           std::abs(b.accuracy() - b.mean_confidence());
  }
  return ece;
}

CalibrationReport merge_reports(std::span<const CalibrationReport> shards) {
  if (shards.empty()) throw Error(ErrorCode::kEmptyInput, "merge_reports: no shards");
  CalibrationReport out = shards.front();
  std::size_t correct = 0;
  for (const auto& b : out.bins) correct += b.correct;
  for (std::size_t s = 1; s < shards.size(); ++s) {
    if (shards[s].num_bins != out.num_bins) {
      throw Error(ErrorCode::kInvalidArgument, "merge_reports: bin counts differ");
    }
    for (std::size_t k = 0; k < out.num_bins; ++k) {
      out.bins[k].count += shards[s].bins[k].count;
      out.bins[k].confidence_sum += shards[s].bins[k].confidence_sum;
      out.bins[k].correct += shards[s].bins[k].correct;
      correct += shards[s].bins[k].correct;
    }
    out.count += shards[s].count;
  }
  out.accuracy_overall = static_cast<double>(correct) / static_cast<double>(out.count);
  out.ece = ece_from_bins(out);
  return out;
}

namespace {

double log_softmax_at(std::span<const double> logits, double temperature, std::size_t index) {
  double mx = logits[0] / temperature;
  for (double v : logits) mx = std::max(mx, v / temperature);
  double s = 0.0;
  for (double v : logits) s += std::exp(v / temperature - mx);
  return logits[index] / temperature - mx - std::log(s);
}

void require_logits(std::span<const PredictionRecord> records, const char* op) {
  for (const auto& r : records) {
    if (r.mean_logits.empty()) {
      throw Error(ErrorCode::kInvalidArgument,
                  fmt::format("{}: example {} has no mean_logits", op, r.example_id));
    }
  }
}

}  // namespace

double mean_nll(std::span<const PredictionRecord> records, double temperature) {
  if (records.empty()) throw Error(ErrorCode::kEmptyInput, "mean_nll: no records");
  double total = 0.0;
  for (const auto& r : records) total -= log_softmax_at(r.mean_logits, temperature, r.label);
  return total / static_cast<double>(records.size());
}

double fit_temperature(std::span<const PredictionRecord> validation) {
  if (validation.size() < 2) {
    throw Error(ErrorCode::kInvalidArgument, "fit_temperature: need at least two records");
  }
  require_logits(validation, "fit_temperature");
  std::set<std::size_t> labels;
  for (const auto& r : validation) labels.insert(r.label);
  if (labels.size() < 2) {
    throw Error(ErrorCode::kInvalidArgument, "fit_temperature: labels are all identical");
  }

  const auto objective = [&](double log_t) { return mean_nll(validation, std::exp(log_t)); };
  // 2^-22 relative precision on log T is finer than the 1e-6 tolerance.
  const auto [best_log_t, best_nll] = boost::math::tools::brent_find_minima(objective, -3.0, 3.0, 22);

  // Never return something worse than leaving the logits alone.
  if (!(best_nll <= objective(0.0))) return 1.0;
  return std::exp(best_log_t);
}

std::vector<PredictionRecord> apply_temperature(std::span<const PredictionRecord> records,
                                                double temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw Error(ErrorCode::kInvalidArgument,
                fmt::format("temperature {} must be positive and finite", temperature));
  }
  require_logits(records, "apply_temperature");
  std::vector<PredictionRecord> out(records.begin(), records.end());
  for (auto& r : out) {
    std::vector<double> scaled(r.mean_logits.size());
    for (std::size_t c = 0; c < scaled.size(); ++c) scaled[c] = r.mean_logits[c] / temperature;
    r.mean_probs = softmax(scaled);
    r.confidence = r.mean_probs[r.predicted_class];
  }
  return out;
}

ShiftMetrics shift_metrics(const CalibrationReport& id, const CalibrationReport& ood) {
  if (id.num_bins != ood.num_bins) {
    throw Error(ErrorCode::kInvalidArgument,
                fmt::format("shift_metrics: ID uses {} bins, OOD uses {}", id.num_bins,
                            ood.num_bins));
  }
  return {ood.ece - id.ece, 0.5 * (id.ece + ood.ece)};
}

std::vector<PredictionRecord> collapse_labels(std::span<const PredictionRecord> records,
                                              std::span<const std::size_t> group_of) {
  std::size_t groups = 0;
  for (std::size_t g : group_of) groups = std::max(groups, g + 1);
  std::vector<PredictionRecord> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    if (r.mean_probs.size() != group_of.size() || r.label >= group_of.size()) {
      throw Error(ErrorCode::kDimensionMismatch,
                  fmt::format("collapse_labels: example {} has {} classes, map has {}",
                              r.example_id, r.mean_probs.size(), group_of.size()));
    }
    PredictionRecord c = r;
    c.mean_probs.assign(groups, 0.0);
    for (std::size_t k = 0; k < group_of.size(); ++k) c.mean_probs[group_of[k]] += r.mean_probs[k];
    c.mean_logits.resize(groups);
    for (std::size_t g = 0; g < groups; ++g) c.mean_logits[g] = std::log(c.mean_probs[g]);
    c.label = group_of[r.label];
    c.predicted_class = argmax(c.mean_probs);
    c.confidence = c.mean_probs[c.predicted_class];
    c.per_pass_logits.reset();
    out.push_back(std::move(c));
  }
  return out;
}

void to_json(nlohmann::json& j, const CalibrationReport& r) {
  nlohmann::json bins = nlohmann::json::array();
  for (const auto& b : r.bins) {
    bins.push_back({{"lo", b.lo},
                    {"hi", b.hi},
                    {"count", b.count},
                    {"mean_confidence", b.mean_confidence()},
                    {"accuracy", b.accuracy()}});
  }
  j = nlohmann::json{{"ece", r.ece},
                     {"num_bins", r.num_bins},
                     {"count", r.count},
                     {"accuracy", r.accuracy_overall},
                     {"bins", std::move(bins)}};
  if (r.temperature) j["temperature"] = *r.temperature;
}

void write_bins_csv(const std::filesystem::path& path, const CalibrationReport& report) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, fmt::format("cannot write {}", path.string()));
  out << "bin,lo,hi,count,mean_confidence,accuracy\n";
  for (std::size_t k = 0; k < report.bins.size(); ++k) {
    const auto& b = report.bins[k];
    out << fmt::format("{},{},{},{},{},{}\n", k, b.lo, b.hi, b.count, b.mean_confidence(),
                       b.accuracy());
  }
}

}  // namespace uat
