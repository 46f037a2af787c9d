#include "uat/selective.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "uat/error.hpp"

namespace uat {

CoverageResult coverage_at_threshold(std::span<const PredictionRecord> records, double tau) {
  if (!(tau > 0.0 && tau <= 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, fmt::format("threshold {} outside (0, 1]", tau));
  }
  if (records.empty()) throw Error(ErrorCode::kEmptyInput, "coverage_at_threshold: no records");
  CoverageResult out;
  std::size_t correct = 0;
  for (const auto& r : records) {
    if (r.confidence < tau) continue;
    ++out.accepted;
    if (r.correct()) ++correct;
  }
  out.coverage = static_cast<double>(out.accepted) / static_cast<double>(records.size());
  if (out.accepted > 0) {
    out.selective_accuracy = static_cast<double>(correct) / static_cast<double>(out.accepted);
  }
  return out;
}

RiskCoverageCurve risk_coverage(std::span<const PredictionRecord> records,
                                std::span<const double> thresholds) {
  if (records.empty()) throw Error(ErrorCode::kEmptyInput, "risk_coverage: no records");
  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (records[a].confidence != records[b].confidence) {
      return records[a].confidence > records[b].confidence;
    }
    return records[a].example_id < records[b].example_id;
  });

  RiskCoverageCurve curve;
  curve.points.reserve(records.size());
  const double n = static_cast<double>(records.size());
  std::size_t errors = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    if (!records[order[k]].correct()) ++errors;
    const double accepted = static_cast<double>(k + 1);
    curve.points.push_back({accepted / n, static_cast<double>(errors) / accepted});
  }
  curve.aurc = aurc_from_points(curve.points);
  for (double tau : thresholds) curve.coverage_at[tau] = coverage_at_threshold(records, tau).coverage;
  return curve;
}

double aurc_from_points(std::span<const RiskCoveragePoint> points) {
  if (points.empty()) return 0.0;
  double s = 0.0;
  for (const auto& p : points) s += p.risk;
  return s / static_cast<double>(points.size());
}

ThresholdPolicy ThresholdPolicy::fixed(std::vector<double> taus) {
  return {Kind::kFixed, std::move(taus)};
}

ThresholdPolicy ThresholdPolicy::coverage_targets(std::vector<double> targets) {
  return {Kind::kCoverageTarget, std::move(targets)};
}

std::vector<double> select_thresholds(std::span<const PredictionRecord> validation,
                                      const ThresholdPolicy& policy) {
  if (validation.empty()) throw Error(ErrorCode::kEmptyInput, "select_thresholds: no records");
  if (policy.kind == ThresholdPolicy::Kind::kFixed) {
    for (double t : policy.values) {
      if (!(t > 0.0 && t <= 1.0)) {
        throw Error(ErrorCode::kInvalidArgument, fmt::format("threshold {} outside (0, 1]", t));
      }
    }
    return policy.values;
  }

  std::vector<double> conf;
  conf.reserve(validation.size());
  for (const auto& r : validation) conf.push_back(r.confidence);
  std::sort(conf.begin(), conf.end(), std::greater<>());
  std::vector<double> taus;
  for (double target : policy.values) {
    if (!(target > 0.0 && target <= 1.0)) {
      throw Error(ErrorCode::kInvalidArgument,
                  fmt::format("coverage target {} is infeasible", target));
    }
    const auto k = static_cast<std::size_t>(std::ceil(target * static_cast<double>(conf.size())));
    taus.push_back(conf[std::clamp<std::size_t>(k, 1, conf.size()) - 1]);
  }
  return taus;
}

void save_thresholds(const std::filesystem::path& path, std::span<const double> taus) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, fmt::format("cannot write {}", path.string()));
  // Hex bit patterns keep the reload exact alongside the readable values.
  nlohmann::json j{{"thresholds", std::vector<double>(taus.begin(), taus.end())}};
  std::vector<std::string> bits;
  for (double t : taus) {
    std::uint64_t u;
    std::memcpy(&u, &t, sizeof u);
    bits.push_back(fmt::format("{:016x}", u));
  }
  j["bits"] = bits;
  out << j.dump(2) << '\n';
}

std::vector<double> load_thresholds(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, fmt::format("cannot read {}", path.string()));
  try {
    const auto j = nlohmann::json::parse(in);
    if (j.contains("bits")) {
      std::vector<double> taus;
      for (const auto& s : j.at("bits").get<std::vector<std::string>>()) {
        const std::uint64_t u = std::stoull(s, nullptr, 16);
        double t;
        std::memcpy(&t, &u, sizeof t);
        taus.push_back(t);
      }
      return taus;
    }
    return j.at("thresholds").get<std::vector<double>>();
  } catch (const std::exception& e) {
    throw Error(ErrorCode::kFormat, fmt::format("{}: {}", path.string(), e.what()));
  }
}

void to_json(nlohmann::json& j, const RiskCoverageCurve& c) {
  j = nlohmann::json{{"aurc", c.aurc}};
  for (const auto& [tau, cov] : c.coverage_at) j[fmt::format("coverage@{}", tau)] = cov;
}

void write_curve_csv(const std::filesystem::path& path, const RiskCoverageCurve& curve) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, fmt::format("cannot write {}", path.string()));
  out << "coverage,risk\n";
  for (const auto& p : curve.points) out << fmt::format("{},{}\n", p.coverage, p.risk);
}

}  // namespace uat
