#include "ntlab/corpus.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <future>
#include <stdexcept>

namespace ntlab {

// ---------------------------------------------------------------------------
// Trees and words

std::size_t FactorTree::depth() const {
  std::size_t d = 0;
  for (const auto& c : children) d = std::max(d, 1 + c.depth());
  return d;
}

std::size_t FactorTree::node_count() const {
  std::size_t n = 1;
  for (const auto& c : children) n += c.node_count();
  return n;
}

bool DyckWord::is_valid(std::string_view bits) {
  if (bits.empty() || bits.front() != '1' || bits.back() != '0') return false;
  long height = 0;
  for (char c : bits) {
    if (c == '1')
      ++height;
    else if (c == '0')
      --height;
    else
      return false;
    if (height < 0) return false;
  }
  return height == 0;
}

DyckWord DyckWord::parse(std::string_view bits) {
  if (!is_valid(bits)) throw InvalidWord("not a Dyck word: '" + std::string(bits) + "'");
  return DyckWord(std::string(bits));
}

FactorTree prime_tower(const Factorization& f) {
  FactorTree tree;
  tree.children.reserve(f.factors.size());
  for (const auto& [p, a] : f.factors) {
    if (a == 1)
      tree.children.emplace_back();
    else
      tree.children.push_back(prime_tower(u128(a)));
  }
  return tree;
}

FactorTree prime_tower(u128 n) {
  if (n < 2) throw std::domain_error("prime_tower: n must be >= 2, got " + to_string(n));
  return prime_tower(factorize(n));
}

namespace {

void encode_into(const FactorTree& tree, std::string& out) {
  for (const auto& child : tree.children) {
    out.push_back('1');
    encode_into(child, out);
    out.push_back('0');
  }
}

// Words of every possible exponent of a 128-bit integer.
const std::array<std::string, 129>& exponent_words() {
  static const auto table = [] {
    std::array<std::string, 129> t;
    for (unsigned a = 2; a < t.size(); ++a) {
      unsigned m = a;
      std::vector<unsigned> exps;
      for (unsigned p = 2; m > 1; ++p) {
        unsigned e = 0;
        while (m % p == 0) {
          m /= p;
          ++e;
        }
        if (e > 0) exps.push_back(e);
      }
      // Exponents of a <= 128 are at most 7, already filled in.
      for (unsigned e : exps) {
        t[a].push_back('1');
        if (e > 1) t[a] += t[e];
        t[a].push_back('0');
      }
    }
    return t;
  }();
  return table;
}

}  // namespace

DyckWord dyck_encode(const FactorTree& tree) {
  std::string out;
  encode_into(tree, out);
  return DyckWord::parse(out);
}

void append_word_from_exponents(std::string& out, const unsigned* exps, std::size_t count) {
  const auto& table = exponent_words();
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back('1');
    if (exps[i] > 1) out += table[exps[i]];
    out.push_back('0');
  }
}

DyckWord word_of(u128 n) {
  if (n < 2) throw std::domain_error("word_of: n must be >= 2, got " + to_string(n));
  const Factorization f = factorize(n);
  std::vector<unsigned> exps;
  for (const auto& pp : f.factors) exps.push_back(pp.exponent);
  std::string out;
  append_word_from_exponents(out, exps.data(), exps.size());
  return DyckWord::parse(out);
}

bool is_squarefree_form(std::string_view w) {
  if (w.empty() || w.size() % 2 != 0) return false;
  for (std::size_t i = 0; i < w.size(); i += 2)
    if (w[i] != '1' || w[i + 1] != '0') return false;
  return true;
}

WordClassification classify_word(std::string_view w) {
  if (!DyckWord::is_valid(w)) throw InvalidWord("not a Dyck word: '" + std::string(w) + "'");
  if (w == "10") return {WordClass::kPrime, 1};
  if (is_squarefree_form(w)) return {WordClass::kSquarefree, unsigned(w.size() / 2)};
  const std::size_t half = w.size() / 2;
  if (w.find('0') == half) return {WordClass::kPrimePowerChain, unsigned(half)};
  return {WordClass::kOther, 0};
}

std::string_view to_string(WordClass c) {
  switch (c) {
    case WordClass::kPrime: return "prime";
    case WordClass::kSquarefree: return "squarefree";
    case WordClass::kPrimePowerChain: return "prime-power-chain";
    case WordClass::kOther: return "other";
  }
  return "other";
}

// ---------------------------------------------------------------------------
// Generation

void CorpusStats::merge(const CorpusStats& other) {
  if (word_count == 0) {
    n_start = other.n_start;
    n_end = other.n_end;
  } else if (other.word_count > 0) {
    n_start = std::min(n_start, other.n_start);
    n_end = std::max(n_end, other.n_end);
  }
  word_count += other.word_count;
  prime_count += other.prime_count;
  squarefree_count += other.squarefree_count;
  for (const auto& [w, c] : other.frequency) frequency[w] += c;
}

CorpusStats generate_segment(std::uint64_t lo, std::uint64_t hi,
                             const std::vector<std::uint32_t>& base_primes, bool leading_space,
                             std::string& text) {
  // At most 15 distinct primes divide an integer below 2^64.
  constexpr std::size_t kMaxOmega = 16;
  const std::size_t len = std::size_t(hi - lo + 1);
  std::vector<std::uint64_t> rest(len);
  std::vector<std::array<unsigned char, kMaxOmega>> exps(len);
  std::vector<unsigned char> omega(len, 0);
  for (std::size_t i = 0; i < len; ++i) rest[i] = lo + i;

  for (std::uint32_t p : base_primes) {
    if (std::uint64_t(p) * p > hi) break;
    std::uint64_t first = (lo + p - 1) / p * p;
    for (std::uint64_t m = first; m <= hi; m += p) {
      const std::size_t i = std::size_t(m - lo);
      unsigned e = 0;
      std::uint64_t r = rest[i];
      do {
        r /= p;
        ++e;
      } while (r % p == 0);
      rest[i] = r;
      exps[i][omega[i]++] = static_cast<unsigned char>(e);
    }
  }

  CorpusStats stats;
  stats.n_start = lo;
  stats.n_end = hi;
  stats.word_count = len;
  std::unordered_map<std::string, std::uint64_t> freq;
  std::string word;
  unsigned ex[kMaxOmega];
  text.reserve(text.size() + len * 8);
  for (std::size_t i = 0; i < len; ++i) {
    if (rest[i] > 1) exps[i][omega[i]++] = 1;  // one prime above sqrt(hi)
    bool squarefree = true;
    for (unsigned k = 0; k < omega[i]; ++k) {
      ex[k] = exps[i][k];
      squarefree = squarefree && ex[k] == 1;
    }
    word.clear();
    append_word_from_exponents(word, ex, omega[i]);
    if (squarefree) {
      ++stats.squarefree_count;
      if (omega[i] == 1) ++stats.prime_count;
    }
    ++freq[word];
    if (i > 0 || leading_space) text.push_back(' ');
    text += word;
  }
  for (auto& [w, c] : freq) stats.frequency.emplace(w, c);
  return stats;
}

CorpusStats generate_corpus(std::uint64_t n_start, std::uint64_t n_end, const CorpusSink& sink,
                            const GenerateOptions& options) {
  if (n_start < 2) throw std::domain_error("generate_corpus: n_start must be >= 2");
  if (n_start > n_end) throw std::domain_error("generate_corpus: n_start > n_end");
  if (options.segment_size == 0) throw std::invalid_argument("generate_corpus: segment_size must be positive");

  const auto root = std::uint64_t(std::sqrt(double(n_end))) + 2;
  const std::vector<std::uint32_t> base_primes = primes_up_to(root);

  CorpusStats total;
  std::uint64_t bytes = 0;
  std::optional<std::uint64_t> last_completed;
  const unsigned workers = std::max(1u, options.workers);

  std::uint64_t next_lo = n_start;
  while (next_lo <= n_end) {
    // Dispatch up to `workers` segments, then hand them to the sink in order.
    std::vector<std::future<std::pair<CorpusStats, std::string>>> batch;
    for (unsigned w = 0; w < workers && next_lo <= n_end; ++w) {
      const std::uint64_t lo = next_lo;
      const std::uint64_t hi = n_end - lo < options.segment_size - 1 ? n_end : lo + options.segment_size - 1;
      next_lo = hi + 1;
      auto job = [lo, hi, n_start, &base_primes] {
        std::string text;
        CorpusStats s = generate_segment(lo, hi, base_primes, lo != n_start, text);
        return std::make_pair(std::move(s), std::move(text));
      };
      batch.push_back(std::async(workers == 1 ? std::launch::deferred : std::launch::async, job));
    }
    for (auto& fut : batch) {
      auto [stats, text] = fut.get();
      if (!sink(text)) {
        throw CorpusWriteError("corpus sink write failed after n=" +
                                   (last_completed ? std::to_string(*last_completed) : std::string("none")),
                               last_completed);
      }
      bytes += text.size();
      last_completed = std::uint64_t(stats.n_end);
      total.merge(stats);
      if (options.on_segment) options.on_segment({*last_completed, bytes}, total);
    }
  }
  return total;
}

std::vector<std::string> corpus_words(std::uint64_t n_start, std::uint64_t n_end) {
  std::string text;
  generate_corpus(n_start, n_end, [&text](std::string_view chunk) {
    text.append(chunk);
    return true;
  });
  std::vector<std::string> words;
  words.reserve(std::size_t(n_end - n_start + 1));
  for (auto w : split_words(text)) words.emplace_back(w);
  return words;
}

std::vector<std::string_view> split_words(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t sp = text.find(' ', start);
    const std::size_t end = sp == std::string_view::npos ? text.size() : sp;
    if (end > start) out.push_back(text.substr(start, end - start));
    if (sp == std::string_view::npos) break;
    start = sp + 1;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Queries

namespace {

template <typename Word>
std::uint64_t count_phrase(const std::vector<Word>& words, const std::vector<std::string>& phrase) {
  if (phrase.empty() || phrase.size() > words.size()) return 0;
  std::uint64_t count = 0;
  for (std::size_t i = 0; i + phrase.size() <= words.size(); ++i) {
    bool match = true;
    for (std::size_t j = 0; j < phrase.size() && match; ++j) match = words[i + j] == phrase[j];
    count += match;
  }
  return count;
}

}  // namespace

std::uint64_t phrase_count(const std::vector<std::string_view>& words, const std::vector<std::string>& phrase) {
  return count_phrase(words, phrase);
}

std::uint64_t phrase_count(const std::vector<std::string>& words, const std::vector<std::string>& phrase) {
  return count_phrase(words, phrase);
}

PhraseCounter::PhraseCounter(std::vector<std::string> phrase)
    : phrase_(std::move(phrase)), window_(phrase_.size()) {}

void PhraseCounter::push(std::string_view word) {
  if (phrase_.empty()) return;
  window_[head_] = word;
  head_ = (head_ + 1) % window_.size();
  if (filled_ < window_.size()) ++filled_;
  if (filled_ < window_.size()) return;
  // head_ now points at the oldest word.
  for (std::size_t j = 0; j < phrase_.size(); ++j)
    if (window_[(head_ + j) % window_.size()] != phrase_[j]) return;
  ++count_;
}

std::vector<GrowthPoint> dictionary_growth(const std::vector<std::string_view>& words,
                                           const std::vector<std::uint64_t>& checkpoints) {
  if (!std::is_sorted(checkpoints.begin(), checkpoints.end()))
    throw std::invalid_argument("dictionary_growth: checkpoints must be ascending");
  std::vector<GrowthPoint> out;
  std::unordered_map<std::string_view, bool> seen;
  std::size_t pos = 0;
  for (std::uint64_t n : checkpoints) {
    if (n < 2 || n - 1 > words.size())
      throw std::out_of_range("dictionary_growth: checkpoint " + std::to_string(n) + " outside corpus");
    // Word index of integer n is n - 2.
    for (; pos < n - 1; ++pos) seen.emplace(words[pos], true);
    out.push_back({n, seen.size()});
  }
  return out;
}

}  // namespace ntlab
