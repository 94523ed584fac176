#include <doctest.h>

#include <numeric>
#include <set>

#include "ntlab/dataset.hpp"

using namespace ntlab;

namespace {

std::uint64_t total(const std::vector<Interval>& v) {
  return std::accumulate(v.begin(), v.end(), std::uint64_t(0), [](auto s, const Interval& i) { return s + i.size(); });
}

}  // namespace

TEST_CASE("split of 1000 words") {
  const SplitPlan p = make_split(1000);
  for (std::size_t k = 0; k < 10; ++k) {
    CHECK(p.chunks[k].chunk == Interval{100 * k, 100 * (k + 1)});
    CHECK(p.chunks[k].train == Interval{100 * k, 100 * k + 75});
    CHECK(p.chunks[k].holdout == Interval{100 * k + 75, 100 * (k + 1)});
  }
  CHECK(total(p.train()) == 750);
  CHECK(total(p.validation()) == 225);
  CHECK(p.test().size() == 25);
  // Words 976..1000 in one-based numbering.
  CHECK(p.test() == Interval{975, 1000});
  CHECK(p.validation().size() == 9);
}

TEST_CASE("split of 40 words and too-small corpora") {
  const SplitPlan p = make_split(40);
  for (const auto& c : p.chunks) {
    CHECK(c.chunk.size() == 4);
    CHECK(c.train.size() == 3);
    CHECK(c.holdout.size() == 1);
  }
  CHECK_THROWS_AS(make_split(39), std::invalid_argument);
}

TEST_CASE("split intervals partition the corpus") {
  for (std::uint64_t n : {40u, 41u, 99u, 1000u, 12345u, 999983u}) {
    const SplitPlan p = make_split(n);
    std::vector<Interval> all = p.train();
    for (auto i : p.validation()) all.push_back(i);
    all.push_back(p.test());
    std::sort(all.begin(), all.end(), [](auto a, auto b) { return a.begin < b.begin; });
    std::uint64_t at = 0;
    for (auto i : all) {
      CHECK(i.begin == at);
      CHECK(i.size() > 0);
      at = i.end;
    }
    CHECK(at == n);
    CHECK(p.test().end == n);
    CHECK(SplitPlan::from_json(p.to_json()).chunks[3].train == p.chunks[3].train);
  }
}

TEST_CASE("region text joins words") {
  const std::vector<std::string_view> words{"10", "10", "1100", "10", "1010"};
  CHECK(region_text(words, {{0, 2}, {3, 5}}) == "10 10 10 1010");
  CHECK(region_text(words, {}).empty());
}

TEST_CASE("windowing") {
  TokenSeq t(2050);
  std::iota(t.begin(), t.end(), 0u);
  CHECK(window(t, 1024).size() == 2);
  CHECK(window(TokenSeq(1023), 1024).empty());
  TokenSeq three(3 * 16);
  std::iota(three.begin(), three.end(), 0u);
  const auto s = window(three, 16);
  REQUIRE(s.size() == 3);
  TokenSeq cat;
  for (const auto& x : s) cat.insert(cat.end(), x.begin(), x.end());
  CHECK(cat == three);
  const auto overlapping = window(t, 1024, 512);
  CHECK(overlapping.size() == 3);
  CHECK(overlapping[1][0] == 512);
  CHECK_THROWS(window(t, 1024, 0));
}

TEST_CASE("masked count rounds half to even") {
  CHECK(masked_count(0.15, 1024) == 154);
  CHECK(masked_count(0.5, 5) == 2);
  CHECK(masked_count(0.5, 7) == 4);
  CHECK(masked_count(0.1, 5) == 0);
  CHECK(masked_count(0.0, 1024) == 0);
}

TEST_CASE("mask_sentence structure and action frequencies") {
  Rng rng(11);
  const std::size_t d = 64;
  std::array<std::size_t, 3> freq{};
  std::size_t positions = 0;
  while (positions < 100000) {
    Sentence s(1024);
    for (auto& t : s) t = TokenId(rng.uniform_index(d));
    const MaskedSentence m = mask_sentence(s, 0.15, d, TokenId(d), rng);
    REQUIRE(m.positions.size() == 154);
    REQUIRE(m.actions.size() == 154);
    REQUIRE(std::set<std::uint32_t>(m.positions.begin(), m.positions.end()).size() == 154);
    REQUIRE(std::is_sorted(m.positions.begin(), m.positions.end()));
    CHECK(m.original == s);
    std::set<std::uint32_t> masked(m.positions.begin(), m.positions.end());
    for (std::uint32_t i = 0; i < s.size(); ++i)
      if (!masked.count(i)) REQUIRE(m.input[i] == s[i]);
    for (std::size_t k = 0; k < m.positions.size(); ++k) {
      const auto pos = m.positions[k];
      freq[std::size_t(m.actions[k])]++;
      switch (m.actions[k]) {
        case MaskAction::kMaskToken: REQUIRE(m.input[pos] == d); break;
        case MaskAction::kRandomToken:
          REQUIRE(m.input[pos] != s[pos]);
          REQUIRE(m.input[pos] < d);
          break;
        case MaskAction::kUnchanged: REQUIRE(m.input[pos] == s[pos]); break;
      }
    }
    positions += m.positions.size();
  }
  CHECK(std::abs(double(freq[0]) / double(positions) - 0.75) < 0.01);
  CHECK(std::abs(double(freq[1]) / double(positions) - 0.15) < 0.01);
  CHECK(std::abs(double(freq[2]) / double(positions) - 0.10) < 0.01);
}

TEST_CASE("p_m of zero is the identity") {
  Rng rng(3);
  const Sentence s{1, 2, 3, 4, 5, 6};
  const auto m = mask_sentence(s, 0.0, 8, 8, rng);
  CHECK(m.input == s);
  CHECK(m.positions.empty());
  CHECK(m.actions.empty());
  CHECK_THROWS(mask_sentence(s, 1.0, 8, 8, rng));
}

TEST_CASE("masking is reproducible from the seed") {
  const Sentence s(256, 5);
  Rng a(99), b(99);
  const auto ma = mask_sentence(s, 0.3, 64, 64, a);
  const auto mb = mask_sentence(s, 0.3, 64, 64, b);
  CHECK(ma.input == mb.input);
  CHECK(ma.positions == mb.positions);
}

TEST_CASE("batch stream") {
  BatchStream stream(10, 4, Rng(5));
  CHECK(stream.batches_per_epoch() == 3);
  const auto e1 = stream.next_epoch();
  REQUIRE(e1.size() == 3);
  CHECK(e1[0].size() == 4);
  CHECK(e1[1].size() == 4);
  CHECK(e1[2].size() == 2);
  std::vector<std::size_t> seen;
  for (const auto& b : e1) seen.insert(seen.end(), b.begin(), b.end());
  std::sort(seen.begin(), seen.end());
  std::vector<std::size_t> expect(10);
  std::iota(expect.begin(), expect.end(), 0u);
  CHECK(seen == expect);

  const auto e2 = stream.next_epoch();
  CHECK(e2 != e1);
  BatchStream again(10, 4, Rng(5));
  CHECK(again.next_epoch() == e1);
}
