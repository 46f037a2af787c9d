#include "uat/trainer.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "uat/encoder_grad.hpp"
#include "uat/error.hpp"
#include "uat/mcinfer.hpp"

namespace uat {

using nlohmann::json;

void to_json(json& j, const TrainConfig& c) {
  j = json{{"epochs", c.epochs},       {"batch_size", c.batch_size},
           {"learning_rate", c.learning_rate}, {"beta1", c.beta1},
           {"beta2", c.beta2},         {"epsilon", c.epsilon},
           {"dropout", c.dropout}};
}

void from_json(const json& j, TrainConfig& c) {
  TrainConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.epsilon = j.value("epsilon", d.epsilon);
  c.dropout = j.value("dropout", d.dropout);
}

double mean_loss(const std::vector<Example>& rows, const EncoderWeights& weights,
                 const EncoderConfig& config) {
  if (rows.empty()) throw Error(ErrorCode::kEmptyInput, "mean_loss: no examples");
  const auto plan = StochasticityPlan::deterministic();
  double total = 0.0;
  for (const auto& ex : rows) total += cross_entropy_loss(ex.tokens, ex.label, weights, config, plan);
  return total / static_cast<double>(rows.size());
}

double accuracy(const std::vector<Example>& rows, const EncoderWeights& weights,
                const EncoderConfig& config) {
  if (rows.empty()) throw Error(ErrorCode::kEmptyInput, "accuracy: no examples");
  const auto plan = StochasticityPlan::deterministic();
  std::size_t hits = 0;
  for (const auto& ex : rows) {
    if (argmax(forward(ex.tokens, weights, config, plan).logits) == ex.label) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(rows.size());
}

namespace {

std::vector<std::span<double>> tensors(EncoderWeights& w) {
  std::vector<std::span<double>> out;
  w.for_each_tensor([&](const std::string&, std::span<double> v) { out.push_back(v); });
  return out;
}

}  // namespace

TrainResult train_encoder(const std::vector<Example>& train, const EncoderConfig& config,
                          const TrainConfig& tc, std::uint64_t seed) {
  if (train.empty()) throw Error(ErrorCode::kEmptyInput, "train_encoder: no training examples");
  if (tc.batch_size == 0) throw Error(ErrorCode::kInvalidConfig, "batch_size must be positive");
  if (!(tc.learning_rate >= 0.0)) throw Error(ErrorCode::kInvalidConfig, "learning_rate must be >= 0");
  config.validate();

  TrainResult result;
  result.weights = EncoderWeights::initialize(config, derive_key(seed, {0x696e6974ULL}));
  result.initial_loss = mean_loss(train, result.weights, config);

  EncoderWeights grads = EncoderWeights::zeros(config);
  EncoderWeights m1 = EncoderWeights::zeros(config);
  EncoderWeights m2 = EncoderWeights::zeros(config);
  auto w_t = tensors(result.weights);
  auto g_t = tensors(grads);
  auto m1_t = tensors(m1);
  auto m2_t = tensors(m2);

  const std::uint64_t dropout_seed = derive_key(seed, {0x64726f70ULL});
  std::vector<std::size_t> order(train.size());
  std::uint64_t step = 0;
  std::uint64_t draw = 0;
  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    RngStream shuffle(derive_key(seed, {0x73687566ULL, epoch}));
    for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[shuffle.below(i + 1)]);

    double epoch_total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
      const std::size_t end = std::min(order.size(), start + tc.batch_size);
      for (auto g : g_t) std::fill(g.begin(), g.end(), 0.0);
      double batch_loss = 0.0;
      for (std::size_t b = start; b < end; ++b) {
        const Example& ex = train[order[b]];
        const auto plan = tc.dropout ? StochasticityPlan::all_layers(dropout_seed, draw++)
                                     : StochasticityPlan::deterministic();
        batch_loss += cross_entropy_gradient(ex.tokens, ex.label, result.weights, config, plan, {}, grads);
      }
      if (!std::isfinite(batch_loss)) {
        throw Error(ErrorCode::kNumerical,
                    fmt::format("training diverged: loss {} at epoch {}, step {}", batch_loss,
                                epoch, step));
      }
      epoch_total += batch_loss;

      ++step;
      const double n = static_cast<double>(end - start);
      const double bc1 = 1.0 - std::pow(tc.beta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(tc.beta2, static_cast<double>(step));
      for (std::size_t t = 0; t < w_t.size(); ++t) {
        for (std::size_t i = 0; i < w_t[t].size(); ++i) {
          const double g = g_t[t][i] / n;
          m1_t[t][i] = tc.beta1 * m1_t[t][i] + (1.0 - tc.beta1) * g;
          m2_t[t][i] = tc.beta2 * m2_t[t][i] + (1.0 - tc.beta2) * g * g;
          const double update = (m1_t[t][i] / bc1) / (std::sqrt(m2_t[t][i] / bc2) + tc.epsilon);
          w_t[t][i] -= tc.learning_rate * update;
        }
      }
    }
    result.epoch_loss.push_back(epoch_total / static_cast<double>(train.size()));
  }
  if (!result.weights.all_finite()) {
    throw Error(ErrorCode::kNumerical, "training produced non-finite weights");
  }
  result.final_loss = mean_loss(train, result.weights, config);
  return result;
}

void save_checkpoint(const std::filesystem::path& path, const EncoderConfig& config,
                     const EncoderWeights& weights) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  json tensors_j = json::object();
  weights.for_each_tensor([&](const std::string& name, std::span<const double> v) {
    tensors_j[name] = std::vector<double>(v.begin(), v.end());
  });
  const json j{{"config", config}, {"tensors", std::move(tensors_j)}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, fmt::format("cannot write {}", path.string()));
  out << j.dump() << '\n';
  if (!out) throw Error(ErrorCode::kIo, fmt::format("write failed for {}", path.string()));
}

std::pair<EncoderConfig, EncoderWeights> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, fmt::format("cannot read {}", path.string()));
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kFormat, fmt::format("{}: {}", path.string(), e.what()));
  }
  EncoderConfig config;
  EncoderWeights weights;
  try {
    config = j.at("config").get<EncoderConfig>();
    config.validate();
    weights = EncoderWeights::zeros(config);
    const auto& t = j.at("tensors");
    weights.for_each_tensor([&](const std::string& name, std::span<double> v) {
      const auto values = t.at(name).get<std::vector<double>>();
      if (values.size() != v.size()) {
        throw Error(ErrorCode::kFormat, fmt::format("{}: tensor {} has {} values, expected {}",
                                                    path.string(), name, values.size(), v.size()));
      }
      std::copy(values.begin(), values.end(), v.begin());
    });
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kFormat, fmt::format("{}: {}", path.string(), e.what()));
  }
  return {config, std::move(weights)};
}

}  // namespace uat
