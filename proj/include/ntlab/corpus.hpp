#pragma once

// Prime-tower factorization trees, their Dyck-word encoding, and the
// streaming generator for the ordered word sequence of 2..n.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace ntlab {

using u128 = unsigned __int128;

std::string to_string(u128 n);
/// Parses a non-negative decimal integer; throws std::invalid_argument.
u128 parse_u128(std::string_view text);

// ---------------------------------------------------------------------------
// Factorization

struct PrimePower {
  u128 prime;
  unsigned exponent;
  bool operator==(const PrimePower&) const = default;
};

/// Prime factors in strictly increasing order, all exponents >= 1.
struct Factorization {
  std::vector<PrimePower> factors;

  u128 value() const;
  std::size_t omega() const { return factors.size(); }
  bool operator==(const Factorization&) const = default;
};

/// Smallest-prime-factor table over [0, limit].
class SpfSieve {
 public:
  explicit SpfSieve(std::uint32_t limit);

  std::uint32_t limit() const { return limit_; }
  bool covers(u128 n) const { return n <= limit_; }
  std::uint32_t smallest_factor(std::uint32_t n) const { return spf_[n]; }
  const std::vector<std::uint32_t>& primes() const { return primes_; }

 private:
  std::uint32_t limit_;
  std::vector<std::uint32_t> spf_;
  std::vector<std::uint32_t> primes_;
};

/// Primes <= limit (plain sieve of Eratosthenes).
std::vector<std::uint32_t> primes_up_to(std::uint64_t limit);

bool is_probable_prime(u128 n);

/// Factorizes n >= 2. Uses the sieve table when n is covered, otherwise trial
/// division by the sieve primes followed by Pollard-rho on the cofactor.
/// Throws std::domain_error for n < 2.
Factorization factorize(u128 n, const SpfSieve& sieve);
/// One-off query with a small built-in sieve.
Factorization factorize(u128 n);

// ---------------------------------------------------------------------------
// Trees and Dyck words

/// Undecorated rooted planar tree. Children are ordered by ascending prime.
struct FactorTree {
  std::vector<FactorTree> children;

  bool is_leaf() const { return children.empty(); }
  std::size_t depth() const;
  std::size_t node_count() const;
  bool operator==(const FactorTree&) const = default;
};

class InvalidWord : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Balanced binary string that starts with 1, ends with 0 and never has more
/// 0s than 1s in any prefix.
class DyckWord {
 public:
  DyckWord() = default;
  /// Throws InvalidWord unless `bits` satisfies the Dyck invariants.
  static DyckWord parse(std::string_view bits);
  static bool is_valid(std::string_view bits);

  const std::string& str() const { return bits_; }
  std::size_t size() const { return bits_.size(); }
  bool operator==(const DyckWord&) const = default;
  auto operator<=>(const DyckWord&) const = default;

 private:
  explicit DyckWord(std::string bits) : bits_(std::move(bits)) {}
  std::string bits_;
};

/// tau(n): each prime factor p^a becomes a child whose own children are the
/// tree of a; exponent 1 gives a leaf.
FactorTree prime_tower(u128 n);
FactorTree prime_tower(const Factorization& f);

/// encode(leaf) = "", encode(node) = concat over children c of 1 encode(c) 0.
DyckWord dyck_encode(const FactorTree& tree);

/// w(n) = dyck_encode(prime_tower(n)). Throws std::domain_error for n < 2.
DyckWord word_of(u128 n);
/// Appends w(n) given only the exponents of n in ascending-prime order.
void append_word_from_exponents(std::string& out, const unsigned* exps, std::size_t count);

enum class WordClass { kPrime, kSquarefree, kPrimePowerChain, kOther };

struct WordClassification {
  WordClass kind;
  /// Number of prime factors for kSquarefree, chain height for kPrimePowerChain.
  unsigned k = 0;
  bool operator==(const WordClassification&) const = default;
};

/// Throws InvalidWord for malformed input.
WordClassification classify_word(std::string_view word);
std::string_view to_string(WordClass c);
/// True for (10)^k with k >= 1.
bool is_squarefree_form(std::string_view word);

// ---------------------------------------------------------------------------
// Generation

struct CorpusStats {
  u128 n_start = 0;
  u128 n_end = 0;
  std::uint64_t word_count = 0;
  std::uint64_t prime_count = 0;
  std::uint64_t squarefree_count = 0;
  std::map<std::string, std::uint64_t> frequency;

  std::size_t distinct_words() const { return frequency.size(); }
  /// Associative, commutative merge of disjoint ranges.
  void merge(const CorpusStats& other);
};

/// Receives consecutive byte chunks of the corpus. Returning false signals a
/// write failure.
using CorpusSink = std::function<bool(std::string_view)>;

struct SegmentProgress {
  std::uint64_t last_n;  // last integer of the completed segment
  std::uint64_t bytes;   // total bytes emitted so far
};

struct GenerateOptions {
  std::uint64_t segment_size = 1u << 20;
  unsigned workers = 1;
  /// Called after each segment has been handed to the sink.
  std::function<void(const SegmentProgress&, const CorpusStats&)> on_segment;
};

/// Thrown when the sink rejects a write.
class CorpusWriteError : public std::runtime_error {
 public:
  CorpusWriteError(const std::string& what, std::optional<std::uint64_t> last_completed)
      : std::runtime_error(what), last_completed_n(last_completed) {}
  std::optional<std::uint64_t> last_completed_n;
};

/// Words of n_start..n_end in order, separated by single spaces. A segment
/// that does not begin at n_start is emitted with one leading space, so the
/// concatenated stream is independent of segment_size and worker count.
CorpusStats generate_corpus(std::uint64_t n_start, std::uint64_t n_end, const CorpusSink& sink,
                            const GenerateOptions& options = {});

/// Words for [lo, hi] using base primes up to sqrt(hi), appended to `text`
/// (with leading separator when `leading_space`).
CorpusStats generate_segment(std::uint64_t lo, std::uint64_t hi,
                             const std::vector<std::uint32_t>& base_primes, bool leading_space,
                             std::string& text);

/// Convenience: the whole range as a vector of words.
std::vector<std::string> corpus_words(std::uint64_t n_start, std::uint64_t n_end);

/// Splits text on single spaces.
std::vector<std::string_view> split_words(std::string_view text);

// ---------------------------------------------------------------------------
// Queries

/// Overlapping count of consecutive exact matches of `phrase`.
std::uint64_t phrase_count(const std::vector<std::string_view>& words,
                           const std::vector<std::string>& phrase);
std::uint64_t phrase_count(const std::vector<std::string>& words,
                           const std::vector<std::string>& phrase);

/// Streaming variant for corpora that do not fit in memory.
class PhraseCounter {
 public:
  explicit PhraseCounter(std::vector<std::string> phrase);
  void push(std::string_view word);
  std::uint64_t count() const { return count_; }

 private:
  std::vector<std::string> phrase_;
  std::vector<std::string> window_;
  std::size_t filled_ = 0;
  std::size_t head_ = 0;
  std::uint64_t count_ = 0;
};

struct GrowthPoint {
  std::uint64_t n;
  std::uint64_t distinct;
};

/// |dictionary| after each checkpoint n, for a corpus that starts at 2.
/// Checkpoints must be ascending and within [2, 1 + words.size()].
std::vector<GrowthPoint> dictionary_growth(const std::vector<std::string_view>& words,
                                           const std::vector<std::uint64_t>& checkpoints);

}  // namespace ntlab
