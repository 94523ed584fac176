#include "ntlab/tokenizer.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <optional>
#include <queue>
#include <unordered_map>
#include <unordered_set>

namespace ntlab {

namespace {

constexpr TokenId kRemoved = ~TokenId(0);
constexpr std::int64_t kNone = -1;

std::uint64_t pair_key(TokenId a, TokenId b) { return (std::uint64_t(a) << 32) | b; }

TokenId symbol_id(char c) {
  switch (c) {
    case '0': return 0;
    case '1': return 1;
    case ' ': return 2;
    default:
      throw std::invalid_argument(std::string("character outside alphabet {0,1,space}: code ") +
                                  std::to_string(int(static_cast<unsigned char>(c))));
  }
}

// Doubly linked token run over a character buffer.
struct TokenRun {
  std::vector<TokenId> tok;
  std::vector<std::int64_t> prev;
  std::vector<std::int64_t> next;

  explicit TokenRun(std::string_view text) : tok(text.size()), prev(text.size()), next(text.size()) {
    for (std::size_t i = 0; i < text.size(); ++i) {
      tok[i] = symbol_id(text[i]);
      prev[i] = std::int64_t(i) - 1;
      next[i] = i + 1 < text.size() ? std::int64_t(i + 1) : kNone;
    }
  }

  // Merges nodes i and next[i] into i, which takes id `merged`.
  void merge_at(std::int64_t i, TokenId merged) {
    const std::int64_t j = next[i];
    const std::int64_t y = next[j];
    tok[i] = merged;
    tok[j] = kRemoved;
    next[i] = y;
    if (y != kNone) prev[y] = i;
  }

  TokenSeq collect() const {
    TokenSeq out;
    for (std::int64_t i = tok.empty() ? kNone : 0; i != kNone; i = next[i]) out.push_back(tok[i]);
    return out;
  }
};

// Three-way compare of a1+a2 against b1+b2 without allocating.
int compare_concat(std::string_view a1, std::string_view a2, std::string_view b1, std::string_view b2) {
  const std::size_t na = a1.size() + a2.size();
  const std::size_t nb = b1.size() + b2.size();
  const std::size_t n = std::min(na, nb);
  for (std::size_t k = 0; k < n; ++k) {
    const char ca = k < a1.size() ? a1[k] : a2[k - a1.size()];
    const char cb = k < b1.size() ? b1[k] : b2[k - b1.size()];
    if (ca != cb) return static_cast<unsigned char>(ca) < static_cast<unsigned char>(cb) ? -1 : 1;
  }
  return na < nb ? -1 : (na > nb ? 1 : 0);
}

}  // namespace

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary() : Vocabulary(std::vector<Merge>{}) {}

Vocabulary::Vocabulary(std::vector<Merge> merges) : merges_(std::move(merges)) {
  strings_ = {"0", "1", " "};
  for (std::size_t k = 0; k < merges_.size(); ++k) {
    const Merge& m = merges_[k];
    if (m.result != kBaseSize + k || m.left >= m.result || m.right >= m.result)
      throw std::invalid_argument("malformed merge list at index " + std::to_string(k));
    strings_.push_back(strings_[m.left] + strings_[m.right]);
  }
  std::unordered_set<std::string> unique(strings_.begin(), strings_.end());
  if (unique.size() != strings_.size()) throw std::invalid_argument("merge list produces duplicate token strings");
}

const std::string& Vocabulary::token_string(TokenId id) const {
  if (id >= strings_.size()) throw std::out_of_range("token id " + std::to_string(id) + " has no text form");
  return strings_[id];
}

TokenSeq Vocabulary::encode(std::string_view text) const {
  if (text.empty()) return {};
  TokenRun run(text);
  std::unordered_map<std::uint64_t, std::uint32_t> rank;
  rank.reserve(merges_.size() * 2);
  for (std::size_t k = 0; k < merges_.size(); ++k) rank.emplace(pair_key(merges_[k].left, merges_[k].right), std::uint32_t(k));

  // Lowest rank first, leftmost first within a rank. Pairs created by merge k
  // always have rank > k, so this equals applying each merge in turn over the
  // whole sequence from left to right.
  using Entry = std::pair<std::uint32_t, std::int64_t>;
  std::priority_queue<Entry, std::vector<Entry>, std::greater<>> heap;
  auto offer = [&](std::int64_t i) {
    const std::int64_t j = run.next[i];
    if (j == kNone) return;
    auto it = rank.find(pair_key(run.tok[i], run.tok[j]));
    if (it != rank.end()) heap.emplace(it->second, i);
  };
  for (std::int64_t i = 0; i < std::int64_t(text.size()); ++i) offer(i);
  while (!heap.empty()) {
    const auto [r, i] = heap.top();
    heap.pop();
    const Merge& m = merges_[r];
    if (run.tok[i] != m.left) continue;
    const std::int64_t j = run.next[i];
    if (j == kNone || run.tok[j] != m.right) continue;
    run.merge_at(i, m.result);
    if (run.prev[i] != kNone) offer(run.prev[i]);
    offer(i);
  }
  return run.collect();
}

std::string Vocabulary::decode(std::span<const TokenId> tokens) const {
  std::string out;
  for (TokenId t : tokens) {
    if (t >= strings_.size()) throw std::out_of_range("token id " + std::to_string(t) + " out of range for D=" + std::to_string(size()));
    out += strings_[t];
  }
  return out;
}

std::string Vocabulary::to_json() const {
  nlohmann::ordered_json j;
  j["base"] = {"0", "1", " "};
  nlohmann::ordered_json merges = nlohmann::ordered_json::array();
  for (const auto& m : merges_) merges.push_back({m.left, m.right});
  j["merges"] = std::move(merges);
  j["special_tokens"] = {{"mask", mask_id()}, {"pad", pad_id()}};
  j["size"] = size();
  return j.dump(1);
}

Vocabulary Vocabulary::from_json(std::string_view text) {
  const auto j = nlohmann::json::parse(text);
  if (j.at("base") != nlohmann::json({"0", "1", " "})) throw std::invalid_argument("vocabulary base must be [\"0\",\"1\",\" \"]");
  std::vector<Merge> merges;
  for (const auto& m : j.at("merges")) {
    merges.push_back({m.at(0).get<TokenId>(), m.at(1).get<TokenId>(), TokenId(kBaseSize + merges.size())});
  }
  Vocabulary v(std::move(merges));
  if (j.contains("size") && j["size"].get<std::size_t>() != v.size()) throw std::invalid_argument("vocabulary size field mismatch");
  return v;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << to_json() << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return from_json(text);
}

VocabularyTooSmall::VocabularyTooSmall(std::size_t achieved_size, std::size_t target_size)
    : std::runtime_error("corpus too small: BPE reached " + std::to_string(achieved_size) + " tokens of requested " +
                         std::to_string(target_size)),
      achieved(achieved_size),
      target(target_size) {}

// ---------------------------------------------------------------------------
// Training

Vocabulary train_bpe(std::string_view corpus, std::size_t target_size) {
  if (target_size < Vocabulary::kBaseSize) throw std::invalid_argument("train_bpe: target size must be >= 3");
  if (corpus.empty()) throw std::invalid_argument("train_bpe: empty corpus");

  TokenRun run(corpus);
  std::vector<std::string> strings = {"0", "1", " "};
  std::unordered_set<std::string> known(strings.begin(), strings.end());
  std::unordered_map<std::uint64_t, std::int64_t> counts;
  std::unordered_map<std::uint64_t, std::vector<std::uint32_t>> positions;
  for (std::size_t i = 0; i + 1 < corpus.size(); ++i) {
    const auto key = pair_key(run.tok[i], run.tok[i + 1]);
    ++counts[key];
    positions[key].push_back(std::uint32_t(i));
  }

  struct Candidate {
    std::int64_t count;
    TokenId left, right;
  };
  // Max-heap on count, then smallest concatenation, then smallest ids.
  auto worse = [&strings](const Candidate& a, const Candidate& b) {
    if (a.count != b.count) return a.count < b.count;
    const int c = compare_concat(strings[a.left], strings[a.right], strings[b.left], strings[b.right]);
    if (c != 0) return c > 0;
    if (a.left != b.left) return a.left > b.left;
    return a.right > b.right;
  };
  std::priority_queue<Candidate, std::vector<Candidate>, decltype(worse)> heap(worse);
  for (const auto& [key, c] : counts) heap.push({c, TokenId(key >> 32), TokenId(key & 0xffffffffu)});

  std::vector<Merge> merges;
  std::unordered_set<std::uint64_t> touched;
  auto adjust = [&](TokenId a, TokenId b, std::int64_t delta) {
    const auto key = pair_key(a, b);
    auto& c = counts[key];
    c += delta;
    touched.insert(key);
  };

  while (strings.size() < target_size) {
    // Every count change pushes a fresh entry, so a mismatching top is stale.
    std::optional<Candidate> best;
    while (!heap.empty()) {
      const Candidate top = heap.top();
      heap.pop();
      auto it = counts.find(pair_key(top.left, top.right));
      if (it == counts.end() || it->second != top.count) continue;
      // A pair spelling an existing token would duplicate its string.
      if (known.count(strings[top.left] + strings[top.right])) continue;
      best = top;
      break;
    }
    if (!best || best->count < 2) throw VocabularyTooSmall(strings.size(), target_size);

    const TokenId a = best->left, b = best->right;
    const auto merged = TokenId(strings.size());
    strings.push_back(strings[a] + strings[b]);
    known.insert(strings.back());
    merges.push_back({a, b, merged});

    const auto key = pair_key(a, b);
    std::vector<std::uint32_t> where = std::move(positions[key]);
    positions.erase(key);
    std::sort(where.begin(), where.end());
    touched.clear();
    for (std::uint32_t pos : where) {
      const std::int64_t i = pos;
      if (run.tok[i] != a) continue;
      const std::int64_t j = run.next[i];
      if (j == kNone || run.tok[j] != b) continue;
      const std::int64_t x = run.prev[i];
      const std::int64_t y = run.next[j];
      if (x != kNone) adjust(run.tok[x], a, -1);
      if (y != kNone) adjust(b, run.tok[y], -1);
      adjust(a, b, -1);
      run.merge_at(i, merged);
      if (x != kNone) {
        adjust(run.tok[x], merged, +1);
        positions[pair_key(run.tok[x], merged)].push_back(std::uint32_t(x));
      }
      if (y != kNone) {
        adjust(merged, run.tok[y], +1);
        positions[pair_key(merged, run.tok[y])].push_back(std::uint32_t(i));
      }
    }
    for (auto k : touched) {
      auto it = counts.find(k);
      if (it->second <= 0) {
        counts.erase(it);
        continue;
      }
      heap.push({it->second, TokenId(k >> 32), TokenId(k & 0xffffffffu)});
    }
  }
  return Vocabulary(std::move(merges));
}

// ---------------------------------------------------------------------------
// Token files

namespace {

constexpr char kTokenMagic[8] = {'N', 'T', 'T', 'O', 'K', 'E', 'N', '1'};

template <typename T>
void put_le(std::ostream& out, T v) {
  unsigned char buf[sizeof(T)];
  for (std::size_t k = 0; k < sizeof(T); ++k) buf[k] = static_cast<unsigned char>((std::uint64_t(v) >> (8 * k)) & 0xff);
  out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T get_le(std::istream& in) {
  unsigned char buf[sizeof(T)];
  in.read(reinterpret_cast<char*>(buf), sizeof(T));
  if (!in) throw std::runtime_error("token file truncated");
  std::uint64_t v = 0;
  for (std::size_t k = 0; k < sizeof(T); ++k) v |= std::uint64_t(buf[k]) << (8 * k);
  return T(v);
}

}  // namespace

void write_token_file(const std::filesystem::path& path, std::uint32_t vocab_size, std::span<const TokenId> tokens) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const std::uint32_t width = std::uint64_t(vocab_size) + Vocabulary::kSpecialCount <= 65536 ? 2 : 4;
  out.write(kTokenMagic, sizeof kTokenMagic);
  put_le<std::uint32_t>(out, vocab_size);
  put_le<std::uint32_t>(out, width);
  put_le<std::uint64_t>(out, tokens.size());
  for (TokenId t : tokens) {
    if (width == 2)
      put_le<std::uint16_t>(out, std::uint16_t(t));
    else
      put_le<std::uint32_t>(out, t);
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

TokenFile read_token_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kTokenMagic, sizeof magic) != 0) throw std::runtime_error("not a token file: " + path.string());
  TokenFile f;
  f.vocab_size = get_le<std::uint32_t>(in);
  const auto width = get_le<std::uint32_t>(in);
  const auto count = get_le<std::uint64_t>(in);
  if (width != 2 && width != 4) throw std::runtime_error("unsupported token width");
  f.tokens.resize(count);
  for (auto& t : f.tokens) t = width == 2 ? get_le<std::uint16_t>(in) : get_le<std::uint32_t>(in);
  return f;
}

}  // namespace ntlab
