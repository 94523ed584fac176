#pragma once

// Byte-pair encoding over the alphabet {0, 1, space}.

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ntlab {

using TokenId = std::uint32_t;
using TokenSeq = std::vector<TokenId>;

struct Merge {
  TokenId left;
  TokenId right;
  TokenId result;
  bool operator==(const Merge&) const = default;
};

/// BPE merge table. Ids 0..2 are the base symbols '0', '1', ' '; merge k
/// creates id 3 + k. Two special ids sit outside the D budget: mask = D and
/// pad = D + 1. They never take part in merges and have no text form.
class Vocabulary {
 public:
  static constexpr std::string_view kAlphabet = "01 ";
  static constexpr std::size_t kBaseSize = 3;
  static constexpr std::size_t kSpecialCount = 2;

  Vocabulary();
  explicit Vocabulary(std::vector<Merge> merges);

  /// D: base symbols plus merges, excluding special tokens.
  std::size_t size() const { return strings_.size(); }
  std::size_t size_with_specials() const { return size() + kSpecialCount; }
  TokenId mask_id() const { return TokenId(size()); }
  TokenId pad_id() const { return TokenId(size() + 1); }
  bool is_special(TokenId id) const { return id >= size(); }

  const std::vector<Merge>& merges() const { return merges_; }
  const std::string& token_string(TokenId id) const;

  /// Applies merges in training order. Throws std::invalid_argument on a
  /// character outside the alphabet.
  TokenSeq encode(std::string_view text) const;
  /// Concatenates token strings. Throws std::out_of_range on ids >= D.
  std::string decode(std::span<const TokenId> tokens) const;

  std::string to_json() const;
  static Vocabulary from_json(std::string_view json);
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  bool operator==(const Vocabulary& o) const { return merges_ == o.merges_; }

 private:
  std::vector<Merge> merges_;
  std::vector<std::string> strings_;
};

/// Thrown when no pair occurs at least twice before reaching the target size.
class VocabularyTooSmall : public std::runtime_error {
 public:
  VocabularyTooSmall(std::size_t achieved, std::size_t target);
  std::size_t achieved;
  std::size_t target;
};

/// Greedy most-frequent-pair merging until `target_size` tokens exist.
/// Equal counts are broken by the lexicographically smallest concatenated
/// string, then by the smaller left id, then the smaller right id.
Vocabulary train_bpe(std::string_view corpus, std::size_t target_size);

// Token shard files: 8-byte magic, u32 D, u32 width, u64 count, then `count`
// little-endian unsigned ids of `width` bytes (2 when D + specials <= 65536).
struct TokenFile {
  std::uint32_t vocab_size = 0;
  TokenSeq tokens;
};

void write_token_file(const std::filesystem::path& path, std::uint32_t vocab_size, std::span<const TokenId> tokens);
TokenFile read_token_file(const std::filesystem::path& path);

}  // namespace ntlab
