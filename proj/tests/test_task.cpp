#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <set>

#include "uat/error.hpp"
#include "uat/task.hpp"

using namespace uat;

namespace {

SyntheticTaskSpec small_spec() {
  SyntheticTaskSpec s;
  s.num_train = 300;
  s.num_val = 100;
  s.num_test = 100;
  return s;
}

std::vector<std::size_t> counts(const SyntheticTaskSpec& s, const std::vector<TokenId>& tokens) {
  std::vector<std::size_t> c(s.num_classes, 0);
  for (std::size_t cls = 0; cls < s.num_classes; ++cls)
    for (std::size_t k = 0; k < s.indicative_per_class; ++k)
      for (TokenId t : tokens)
        if (t == s.primary_token(cls, k) || t == s.alias_token(cls, k)) ++c[cls];
  return c;
}

}  // namespace

TEST_CASE("vocabulary layout") {
  const SyntheticTaskSpec s;
  CHECK(s.primary_token(0, 0) == 2);
  CHECK(s.primary_token(2, 3) == 13);
  CHECK(s.alias_token(0, 0) == 14);
  CHECK(s.first_neutral() == 26);
}

TEST_CASE("infeasible specs are rejected") {
  SyntheticTaskSpec s = small_spec();
  s.seq_len = 5;
  CHECK_THROWS_AS(generate_task(s), Error);
  s = small_spec();
  s.vocab_size = 20;
  CHECK_THROWS_AS(generate_task(s), Error);
  s = small_spec();
  s.ambiguity_fraction = 1.5;
  CHECK_THROWS_AS(generate_task(s), Error);
}

TEST_CASE("generation is bit-exact and seed dependent") {
  const auto a = generate_task(small_spec());
  const auto b = generate_task(small_spec());
  CHECK(a == b);
  auto other = small_spec();
  other.seed = 2;
  CHECK_FALSE(generate_task(other) == a);
}

TEST_CASE("labels follow the majority rule") {
  auto s = small_spec();
  s.ambiguity_fraction = 0.4;
  const auto d = generate_task(s);
  std::size_t ambiguous = 0;
  for (const auto& ex : d.train) {
    CHECK(ex.tokens.front() == kClsToken);
    CHECK(ex.tokens.size() <= s.seq_len);
    const auto c = counts(s, ex.tokens);
    const std::size_t top = *std::max_element(c.begin(), c.end());
    CHECK(c[ex.label] == top);
    std::vector<std::size_t> sorted = c;
    std::sort(sorted.rbegin(), sorted.rend());
    const std::size_t margin = sorted[0] - sorted[1];
    if (ex.ambiguous) {
      ++ambiguous;
      CHECK(margin <= 1);
    } else {
      CHECK(margin >= 2);
      CHECK(majority_class(s, ex.tokens) == ex.label);
    }
  }
  CHECK(ambiguous > 80);
  CHECK(ambiguous < 160);
}

TEST_CASE("zero ambiguity gives clear examples only") {
  auto s = small_spec();
  s.ambiguity_fraction = 0.0;
  for (const auto& ex : generate_task(s).train) CHECK_FALSE(ex.ambiguous);
}

TEST_CASE("splits are disjoint by id and the OOD split uses aliases") {
  const auto s = small_spec();
  const auto d = generate_task(s);
  std::set<std::uint64_t> ids;
  for (Split sp : kAllSplits)
    for (const auto& ex : d.split(sp)) CHECK(ids.insert(ex.id).second);

  bool alias_in_ood = false;
  for (const auto& ex : d.test_ood)
    for (TokenId t : ex.tokens) alias_in_ood |= (t >= s.alias_token(0, 0) && t < s.first_neutral());
  CHECK(alias_in_ood);
  for (const auto& ex : d.train)
    for (TokenId t : ex.tokens) CHECK_FALSE((t >= s.alias_token(0, 0) && t < s.first_neutral()));
  // Remapping keeps every label's evidence.
  for (const auto& ex : d.test_ood) {
    const auto c = counts(s, ex.tokens);
    CHECK(c[ex.label] == *std::max_element(c.begin(), c.end()));
  }
}

TEST_CASE("identity shift draws OOD from the ID distribution") {
  auto s = small_spec();
  s.shift_fraction = 0.0;
  const auto d = generate_task(s);
  for (const auto& ex : d.test_ood)
    for (TokenId t : ex.tokens) CHECK_FALSE((t >= s.alias_token(0, 0) && t < s.first_neutral()));
}

TEST_CASE("dataset files round trip") {
  const auto d = generate_task(small_spec());
  const auto dir = std::filesystem::temp_directory_path() / "uat_task_test";
  write_dataset(dir, d);
  CHECK(read_dataset(dir) == d);
  std::filesystem::remove_all(dir);
}
