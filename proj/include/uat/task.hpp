#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "uat/encoder.hpp"

namespace uat {

/// Majority-vote classification over class-indicative tokens.
///
/// Vocabulary layout: 0 pad, 1 CLS, then `indicative_per_class` primary
/// forms per class, then one held-out alias per primary form (never seen
/// in training), then neutral filler up to vocab_size.
struct SyntheticTaskSpec {
  std::size_t vocab_size = 64;
  std::size_t seq_len = 16;  // including CLS
  std::size_t num_classes = 3;
  std::size_t indicative_per_class = 4;
  /// Fraction of examples whose winning count is within 1 of a tie.
  double ambiguity_fraction = 0.3;
  /// Fraction of primary forms replaced by their alias in the OOD split.
  /// Zero gives an identity shift.
  double shift_fraction = 0.5;
  std::size_t num_train = 4000;
  std::size_t num_val = 1000;
  std::size_t num_test = 1000;
  std::uint64_t seed = 1;

  void validate() const;
  TokenId primary_token(std::size_t cls, std::size_t k) const;
  TokenId alias_token(std::size_t cls, std::size_t k) const;
  TokenId first_neutral() const;

  friend bool operator==(const SyntheticTaskSpec&, const SyntheticTaskSpec&) = default;
};

void to_json(nlohmann::json& j, const SyntheticTaskSpec& s);
void from_json(const nlohmann::json& j, SyntheticTaskSpec& s);

enum class Split : std::uint8_t { kTrain = 0, kVal = 1, kTestId = 2, kTestOod = 3 };
inline constexpr std::array<Split, 4> kAllSplits{Split::kTrain, Split::kVal, Split::kTestId,
                                                 Split::kTestOod};
std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct Example {
  std::uint64_t id = 0;
  std::vector<TokenId> tokens;
  std::size_t label = 0;
  bool ambiguous = false;

  friend bool operator==(const Example&, const Example&) = default;
};

struct Dataset {
  std::vector<Example> train, val, test_id, test_ood;

  const std::vector<Example>& split(Split s) const;
  std::vector<Example>& split(Split s);
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Bit-exact in the spec. Every example is drawn from its own stream keyed
/// by (seed, split, index), so splits never share draws.
Dataset generate_task(const SyntheticTaskSpec& spec);

/// Majority class by indicative-token count (aliases count for their class).
/// Ties go to the lowest class index.
std::size_t majority_class(const SyntheticTaskSpec& spec, std::span<const TokenId> tokens);

/// JSON lines {id, tokens, label, split, ambiguous}.
void write_split(const std::filesystem::path& path, Split split, const std::vector<Example>& rows);
std::vector<Example> read_split(const std::filesystem::path& path);

/// Writes/reads train.jsonl, val.jsonl, test_id.jsonl, test_ood.jsonl.
void write_dataset(const std::filesystem::path& dir, const Dataset& data);
Dataset read_dataset(const std::filesystem::path& dir);

/// Encoder config sized to the task.
EncoderConfig encoder_config_for(const SyntheticTaskSpec& spec, EncoderConfig base = {});

}  // namespace uat
