#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>

#include "ntlab/corpus.hpp"
#include "ntlab/rng.hpp"
#include "ntlab/tokenizer.hpp"

using namespace ntlab;

namespace {

std::string corpus_text(std::uint64_t n) {
  std::string text;
  generate_corpus(2, n, [&](std::string_view s) {
    text += s;
    return true;
  });
  return text;
}

// Reference BPE: recounts every adjacent pair from scratch before each merge.
// Ties go to the smaller concatenation, then the smaller ids; a pair spelling
// an existing token is skipped.
std::vector<Merge> naive_bpe(const std::string& text, std::size_t target) {
  std::vector<TokenId> seq;
  for (char ch : text) seq.push_back(ch == '0' ? 0 : ch == '1' ? 1 : 2);
  std::vector<std::string> strings{"0", "1", " "};
  std::set<std::string> known(strings.begin(), strings.end());
  std::vector<Merge> merges;
  while (strings.size() < target) {
    std::map<std::pair<TokenId, TokenId>, long> counts;
    for (std::size_t i = 0; i + 1 < seq.size(); ++i) counts[{seq[i], seq[i + 1]}]++;
    std::optional<std::pair<TokenId, TokenId>> best;
    long best_count = 0;
    for (const auto& [pair, c] : counts) {
      const std::string cat = strings[pair.first] + strings[pair.second];
      if (known.count(cat) || c < 2) continue;
      if (!best || c > best_count ||
          (c == best_count && cat < strings[best->first] + strings[best->second])) {
        best = pair;
        best_count = c;
      }
    }
    if (!best) break;
    const auto id = TokenId(strings.size());
    strings.push_back(strings[best->first] + strings[best->second]);
    known.insert(strings.back());
    merges.push_back({best->first, best->second, id});
    std::vector<TokenId> next;
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (i + 1 < seq.size() && seq[i] == best->first && seq[i + 1] == best->second) {
        next.push_back(id);
        ++i;
      } else {
        next.push_back(seq[i]);
      }
    }
    seq = std::move(next);
  }
  return merges;
}

}  // namespace

TEST_CASE("base vocabulary") {
  const Vocabulary v;
  CHECK(v.size() == 3);
  CHECK(v.mask_id() == 3);
  CHECK(v.pad_id() == 4);
  CHECK(v.encode("10 1") == TokenSeq{1, 0, 2, 1});
  CHECK(v.encode("").empty());
  CHECK(v.decode(TokenSeq{}).empty());
  CHECK_THROWS_AS(v.encode("102"), std::invalid_argument);
  CHECK_THROWS_AS(v.decode(TokenSeq{3}), std::out_of_range);
  CHECK(train_bpe("10 10", 3) == v);
}

TEST_CASE("first merge on a hand-counted corpus") {
  const Vocabulary v = train_bpe("10 10 10", 4);
  REQUIRE(v.merges().size() == 1);
  CHECK(v.merges()[0] == Merge{1, 0, 3});
  CHECK(v.token_string(3) == "10");
  CHECK(v.encode("10 10 10") == TokenSeq{3, 2, 3, 2, 3});
  CHECK(v.decode(TokenSeq{3}) == "10");
}

TEST_CASE("too small corpus reports achieved size") {
  try {
    train_bpe("10", 10);
    FAIL("expected VocabularyTooSmall");
  } catch (const VocabularyTooSmall& e) {
    CHECK(e.target == 10);
    CHECK(e.achieved < 10);
  }
  CHECK_THROWS(train_bpe("", 4));
  CHECK_THROWS(train_bpe("10", 2));
}

TEST_CASE("training on the corpus") {
  const std::string text = corpus_text(20000);
  for (std::size_t d : {16u, 64u, 256u}) {
    const Vocabulary v = train_bpe(text, d);
    CHECK(v.size() == d);
    CHECK(v.merges().size() == d - 3);
    std::set<std::string> strings;
    for (TokenId id = 0; id < v.size(); ++id) {
      CHECK_FALSE(v.token_string(id).empty());
      strings.insert(v.token_string(id));
    }
    CHECK(strings.size() == d);
    CHECK(train_bpe(text, d) == v);
    CHECK(v.decode(v.encode(text)) == text);
  }
}

TEST_CASE("merged 10 is the most frequent pair") {
  const std::string text = corpus_text(100000);
  const Vocabulary v = train_bpe(text, 64);
  REQUIRE_FALSE(v.merges().empty());
  CHECK(v.token_string(v.merges()[0].result) == "10");
  // Merges cross spaces, so after encoding most occurrences of 10 sit inside
  // longer tokens; the merged token still appears on its own.
  const TokenSeq tokens = v.encode(text);
  CHECK(std::count(tokens.begin(), tokens.end(), v.merges()[0].result) > 0);
}

TEST_CASE("round trip on random slices and compression monotonicity") {
  const std::string text = corpus_text(30000);
  const Vocabulary small = train_bpe(text, 32);
  const Vocabulary large = train_bpe(text, 128);
  // Nested: the smaller merge list is a prefix of the larger one.
  REQUIRE(std::equal(small.merges().begin(), small.merges().end(), large.merges().begin()));
  Rng rng(7);
  for (int k = 0; k < 2000; ++k) {
    const std::size_t a = rng.uniform_index(text.size());
    const std::size_t len = rng.uniform_index(std::min<std::size_t>(200, text.size() - a)) + 1;
    const std::string slice = text.substr(a, len);
    const TokenSeq ts = small.encode(slice), tl = large.encode(slice);
    REQUIRE(small.decode(ts) == slice);
    REQUIRE(large.decode(tl) == slice);
    REQUIRE(tl.size() <= ts.size());
  }
}

TEST_CASE("heap-based training matches the rescanning reference") {
  for (std::uint64_t n : {200u, 3000u}) {
    const std::string text = corpus_text(n);
    const auto ref = naive_bpe(text, 60);
    const Vocabulary v = train_bpe(text, 3 + ref.size());
    CHECK(v.merges() == ref);
  }
  CHECK(naive_bpe("0000 1111 0000", 10) == train_bpe("0000 1111 0000", 3 + naive_bpe("0000 1111 0000", 10).size()).merges());
}

TEST_CASE("encoding reproduces training segmentation") {
  // Applying merges in order by repeated full rescans gives the reference
  // segmentation.
  const std::string text = corpus_text(3000);
  const Vocabulary v = train_bpe(text, 48);
  std::vector<TokenId> seq;
  for (char ch : text) seq.push_back(ch == '0' ? 0 : ch == '1' ? 1 : 2);
  for (const Merge& m : v.merges()) {
    std::vector<TokenId> next;
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (i + 1 < seq.size() && seq[i] == m.left && seq[i + 1] == m.right) {
        next.push_back(m.result);
        ++i;
      } else {
        next.push_back(seq[i]);
      }
    }
    seq = std::move(next);
  }
  CHECK(v.encode(text) == seq);
}

TEST_CASE("vocabulary serialization") {
  const Vocabulary v = train_bpe(corpus_text(5000), 40);
  CHECK(Vocabulary::from_json(v.to_json()) == v);
  const auto path = std::filesystem::temp_directory_path() / "ntlab_vocab_test.json";
  v.save(path);
  const Vocabulary w = Vocabulary::load(path);
  CHECK(w == v);
  for (TokenId id = 0; id < v.size(); ++id) CHECK(w.token_string(id) == v.token_string(id));
  std::filesystem::remove(path);
}

TEST_CASE("token files") {
  const auto path = std::filesystem::temp_directory_path() / "ntlab_tokens_test.bin";
  const TokenSeq tokens{0, 1, 2, 63, 64, 65};
  write_token_file(path, 64, tokens);
  const TokenFile f = read_token_file(path);
  CHECK(f.vocab_size == 64);
  CHECK(f.tokens == tokens);
  CHECK(std::filesystem::file_size(path) == 8 + 4 + 4 + 8 + 2 * tokens.size());
  std::filesystem::remove(path);
}
