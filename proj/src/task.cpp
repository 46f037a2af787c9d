#include "uat/task.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "uat/error.hpp"

namespace uat {

using nlohmann::json;

void SyntheticTaskSpec::validate() const {
  const auto bad = [](const std::string& what) { throw Error(ErrorCode::kInvalidConfig, what); };
  if (num_classes < 2) bad("task needs at least two classes");
  if (indicative_per_class < 1) bad("indicative_per_class must be at least 1");
  if (first_neutral() >= vocab_size) {
    bad(fmt::format("vocab_size {} leaves no room for neutral tokens (need more than {})",
                    vocab_size, first_neutral()));
  }
  // Clear examples need a margin of 2 plus one token per rival class.
  if (seq_len < 2 + num_classes + 2) {
    bad(fmt::format("seq_len {} is too short for {} classes", seq_len, num_classes));
  }
  if (!(ambiguity_fraction >= 0.0 && ambiguity_fraction <= 1.0)) {
    bad("ambiguity_fraction must lie in [0, 1]");
  }
  if (!(shift_fraction >= 0.0 && shift_fraction <= 1.0)) bad("shift_fraction must lie in [0, 1]");
  if (num_train == 0 || num_val == 0 || num_test == 0) bad("every split needs examples");
}

TokenId SyntheticTaskSpec::primary_token(std::size_t cls, std::size_t k) const {
  return static_cast<TokenId>(2 + cls * indicative_per_class + k);
}

TokenId SyntheticTaskSpec::alias_token(std::size_t cls, std::size_t k) const {
  return static_cast<TokenId>(2 + (num_classes + cls) * indicative_per_class + k);
}

TokenId SyntheticTaskSpec::first_neutral() const {
  return static_cast<TokenId>(2 + 2 * num_classes * indicative_per_class);
}

void to_json(json& j, const SyntheticTaskSpec& s) {
  j = json{{"vocab_size", s.vocab_size},
           {"seq_len", s.seq_len},
           {"num_classes", s.num_classes},
           {"indicative_per_class", s.indicative_per_class},
           {"ambiguity_fraction", s.ambiguity_fraction},
           {"shift_fraction", s.shift_fraction},
           {"num_train", s.num_train},
           {"num_val", s.num_val},
           {"num_test", s.num_test},
           {"seed", s.seed}};
}

void from_json(const json& j, SyntheticTaskSpec& s) {
  SyntheticTaskSpec d;
  s.vocab_size = j.value("vocab_size", d.vocab_size);
  s.seq_len = j.value("seq_len", d.seq_len);
  s.num_classes = j.value("num_classes", d.num_classes);
  s.indicative_per_class = j.value("indicative_per_class", d.indicative_per_class);
  s.ambiguity_fraction = j.value("ambiguity_fraction", d.ambiguity_fraction);
  s.shift_fraction = j.value("shift_fraction", d.shift_fraction);
  s.num_train = j.value("num_train", d.num_train);
  s.num_val = j.value("num_val", d.num_val);
  s.num_test = j.value("num_test", d.num_test);
  s.seed = j.value("seed", d.seed);
}

std::string to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTestId: return "test_id";
    case Split::kTestOod: return "test_ood";
  }
  return "?";
}

Split split_from_string(const std::string& s) {
  for (Split sp : kAllSplits)
    if (to_string(sp) == s) return sp;
  throw Error(ErrorCode::kFormat, fmt::format("unknown split '{}'", s));
}

const std::vector<Example>& Dataset::split(Split s) const {
  switch (s) {
    case Split::kTrain: return train;
    case Split::kVal: return val;
    case Split::kTestId: return test_id;
    case Split::kTestOod: return test_ood;
  }
  return train;
}

std::vector<Example>& Dataset::split(Split s) {
  return const_cast<std::vector<Example>&>(std::as_const(*this).split(s));
}

namespace {

std::vector<std::size_t> class_counts(const SyntheticTaskSpec& spec,
                                      std::span<const TokenId> tokens) {
  std::vector<std::size_t> counts(spec.num_classes, 0);
  const TokenId first = spec.primary_token(0, 0);
  for (TokenId t : tokens) {
    if (t < first || t >= spec.first_neutral()) continue;
    counts[((t - first) / spec.indicative_per_class) % spec.num_classes]++;
  }
  return counts;
}

Example draw_example(const SyntheticTaskSpec& spec, RngStream& rng, std::uint64_t id) {
  const std::size_t max_content = spec.seq_len - 1;
  const std::size_t min_content = std::max<std::size_t>(spec.num_classes + 2, max_content / 2);
  const std::size_t content = min_content + rng.below(max_content - min_content + 1);
  const std::size_t classes = spec.num_classes;

  Example ex;
  ex.id = id;
  ex.label = rng.below(classes);
  ex.ambiguous = rng.uniform() < spec.ambiguity_fraction;

  // Counts per class: the label wins by `margin`; the strongest rival sits at
  // `rival`, every other class at most rival - (ambiguous ? 1 : 0).
  std::vector<std::size_t> counts(classes, 0);
  const std::size_t margin = ex.ambiguous ? rng.below(2) : 2 + rng.below(2);
  const std::size_t budget = content - margin;  // tokens left after the margin
  // Keep the total indicative count within the content length.
  const std::size_t max_rival = std::max<std::size_t>(1, budget / classes);
  const std::size_t rival = 1 + rng.below(max_rival);
  std::size_t other = (ex.label + 1 + rng.below(classes - 1)) % classes;
  counts[ex.label] = rival + margin;
  counts[other] = rival;
  for (std::size_t c = 0; c < classes; ++c) {
    if (c == ex.label || c == other) continue;
    counts[c] = rng.below(rival);  // strictly below the rival
  }

  std::vector<TokenId> body;
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t i = 0; i < counts[c]; ++i)
      body.push_back(spec.primary_token(c, rng.below(spec.indicative_per_class)));
  const std::size_t neutral = spec.vocab_size - spec.first_neutral();
  while (body.size() < content) body.push_back(spec.first_neutral() + static_cast<TokenId>(rng.below(neutral)));
  for (std::size_t i = body.size() - 1; i > 0; --i) std::swap(body[i], body[rng.below(i + 1)]);

  ex.tokens.reserve(content + 1);
  ex.tokens.push_back(kClsToken);
  ex.tokens.insert(ex.tokens.end(), body.begin(), body.end());
  return ex;
}

std::vector<Example> draw_split(const SyntheticTaskSpec& spec, Split split, std::size_t n) {
  std::vector<Example> rows;
  rows.reserve(n);
  const auto s = static_cast<std::uint64_t>(split);
  for (std::size_t i = 0; i < n; ++i) {
    RngStream rng(derive_key(spec.seed, {s, i}));
    rows.push_back(draw_example(spec, rng, (s << 32) | i));
  }
  return rows;
}

}  // namespace

std::size_t majority_class(const SyntheticTaskSpec& spec, std::span<const TokenId> tokens) {
  const auto counts = class_counts(spec, tokens);
  return static_cast<std::size_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

Dataset generate_task(const SyntheticTaskSpec& spec) {
  spec.validate();
  Dataset d;
  d.train = draw_split(spec, Split::kTrain, spec.num_train);
  d.val = draw_split(spec, Split::kVal, spec.num_val);
  d.test_id = draw_split(spec, Split::kTestId, spec.num_test);
  d.test_ood = draw_split(spec, Split::kTestOod, spec.num_test);

  // Remap a fixed subset of primary forms to their aliases.
  RngStream pick(derive_key(spec.seed, {0x5348494654ULL}));
  const std::size_t total = spec.num_classes * spec.indicative_per_class;
  std::vector<std::size_t> forms(total);
  for (std::size_t i = 0; i < total; ++i) forms[i] = i;
  for (std::size_t i = total - 1; i > 0; --i) std::swap(forms[i], forms[pick.below(i + 1)]);
  const auto shifted = static_cast<std::size_t>(std::llround(spec.shift_fraction * total));
  std::vector<TokenId> remap(spec.vocab_size);
  for (std::size_t t = 0; t < remap.size(); ++t) remap[t] = static_cast<TokenId>(t);
  for (std::size_t i = 0; i < shifted; ++i) {
    const std::size_t cls = forms[i] / spec.indicative_per_class;
    const std::size_t k = forms[i] % spec.indicative_per_class;
    remap[spec.primary_token(cls, k)] = spec.alias_token(cls, k);
  }
  for (auto& ex : d.test_ood)
    for (auto& t : ex.tokens) t = remap[t];
  return d;
}

void write_split(const std::filesystem::path& path, Split split,
                 const std::vector<Example>& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, fmt::format("cannot write {}", path.string()));
  for (const auto& ex : rows) {
    out << json{{"id", ex.id},
                {"tokens", ex.tokens},
                {"label", ex.label},
                {"split", to_string(split)},
                {"ambiguous", ex.ambiguous}}
               .dump()
        << '\n';
  }
}

std::vector<Example> read_split(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, fmt::format("cannot read {}", path.string()));
  std::vector<Example> rows;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = json::parse(text);
      Example ex;
      ex.id = j.at("id").get<std::uint64_t>();
      ex.tokens = j.at("tokens").get<std::vector<TokenId>>();
      ex.label = j.at("label").get<std::size_t>();
      ex.ambiguous = j.value("ambiguous", false);
      rows.push_back(std::move(ex));
    } catch (const json::exception& e) {
      throw Error(ErrorCode::kFormat,
                  fmt::format("{} line {}: {}", path.string(), line, e.what()));
    }
  }
  return rows;
}

void write_dataset(const std::filesystem::path& dir, const Dataset& data) {
  for (Split s : kAllSplits) write_split(dir / (to_string(s) + ".jsonl"), s, data.split(s));
}

Dataset read_dataset(const std::filesystem::path& dir) {
  Dataset d;
  for (Split s : kAllSplits) d.split(s) = read_split(dir / (to_string(s) + ".jsonl"));
  return d;
}

EncoderConfig encoder_config_for(const SyntheticTaskSpec& spec, EncoderConfig base) {
  base.vocab_size = spec.vocab_size;
  base.max_seq_len = spec.seq_len;
  base.num_classes = spec.num_classes;
  return base;
}

}  // namespace uat
