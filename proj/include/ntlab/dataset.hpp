#pragma once

// Ten-chunk train/validation/test protocol, sentence windowing, and batch
// construction for next-word and masked-language objectives.

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "ntlab/rng.hpp"
#include "ntlab/tokenizer.hpp"

namespace ntlab {

/// Half-open range of word indices.
struct Interval {
  std::uint64_t begin = 0;
  std::uint64_t end = 0;
  std::uint64_t size() const { return end - begin; }
  bool operator==(const Interval&) const = default;
};

struct ChunkSplit {
  Interval chunk;
  Interval train;    // first 75% of the chunk
  Interval holdout;  // remaining 25%
};

/// Chunks 1..9 contribute their holdout to validation, chunk 10 to test.
struct SplitPlan {
  static constexpr std::size_t kChunks = 10;
  static constexpr double kTrainFraction = 0.75;

  std::uint64_t word_count = 0;
  std::array<ChunkSplit, kChunks> chunks{};

  std::vector<Interval> train() const;
  std::vector<Interval> validation() const;
  Interval test() const { return chunks.back().holdout; }

  std::string to_json() const;
  static SplitPlan from_json(std::string_view json);
};

/// Throws std::invalid_argument when word_count < 40.
SplitPlan make_split(std::uint64_t word_count);

/// Words of the given intervals, concatenated in order and joined by spaces.
std::string region_text(const std::vector<std::string_view>& words, const std::vector<Interval>& regions);

using Sentence = TokenSeq;

/// Windows of exactly `length` tokens starting every `stride` tokens; the
/// final partial window is dropped.
std::vector<Sentence> window(std::span<const TokenId> tokens, std::size_t length, std::size_t stride);
inline std::vector<Sentence> window(std::span<const TokenId> tokens, std::size_t length) {
  return window(tokens, length, length);
}

enum class MaskAction : std::uint8_t { kMaskToken, kRandomToken, kUnchanged };

struct MaskedSentence {
  Sentence input;                     // altered sentence fed to the model
  Sentence original;                  // untouched sentence (targets)
  std::vector<std::uint32_t> positions;  // masked index set, ascending
  std::vector<MaskAction> actions;    // one per entry of `positions`
};

struct MaskingScheme {
  double mask_token = 0.75;
  double random_token = 0.15;
  double unchanged = 0.10;
};

/// Half-to-even rounding of p_m * length: the size of the masked index set.
std::size_t masked_count(double p_m, std::size_t length);

/// Positions are drawn uniformly without replacement. A random replacement is
/// uniform over the D ordinary tokens (never a special token) and redrawn
/// until it differs from the original.
MaskedSentence mask_sentence(const Sentence& sentence, double p_m, std::size_t vocab_size, TokenId mask_id, Rng& rng,
                             const MaskingScheme& scheme = {});

/// Shuffled mini-batches of sentence indices; each call to next_epoch() visits
/// every sentence exactly once.
class BatchStream {
 public:
  BatchStream(std::size_t sentence_count, std::size_t batch_size, Rng rng);

  std::vector<std::vector<std::size_t>> next_epoch();
  std::size_t batches_per_epoch() const { return (count_ + batch_ - 1) / batch_; }

 private:
  std::size_t count_;
  std::size_t batch_;
  Rng rng_;
};

}  // namespace ntlab
