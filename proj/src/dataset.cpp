#include "ntlab/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <numeric>
#include <stdexcept>

namespace ntlab {

std::vector<Interval> SplitPlan::train() const {
  std::vector<Interval> out;
  for (const auto& c : chunks) out.push_back(c.train);
  return out;
}

std::vector<Interval> SplitPlan::validation() const {
  std::vector<Interval> out;
  for (std::size_t k = 0; k + 1 < kChunks; ++k) out.push_back(chunks[k].holdout);
  return out;
}

std::string SplitPlan::to_json() const {
  nlohmann::ordered_json j;
  j["word_count"] = word_count;
  j["train_fraction"] = kTrainFraction;
  auto arr = nlohmann::ordered_json::array();
  for (const auto& c : chunks) {
    arr.push_back({{"chunk", {c.chunk.begin, c.chunk.end}},
                   {"train", {c.train.begin, c.train.end}},
                   {"holdout", {c.holdout.begin, c.holdout.end}}});
  }
  j["chunks"] = std::move(arr);
  j["test"] = {test().begin, test().end};
  return j.dump(1);
}

SplitPlan SplitPlan::from_json(std::string_view text) {
  const auto j = nlohmann::json::parse(text);
  SplitPlan plan = make_split(j.at("word_count").get<std::uint64_t>());
  for (std::size_t k = 0; k < kChunks; ++k) {
    const auto& c = j.at("chunks").at(k);
    if (c.at("train").at(1).get<std::uint64_t>() != plan.chunks[k].train.end)
      throw std::invalid_argument("split manifest does not match the 10-chunk protocol");
  }
  return plan;
}

SplitPlan make_split(std::uint64_t word_count) {
  if (word_count < 40) throw std::invalid_argument("make_split: need at least 40 words, got " + std::to_string(word_count));
  SplitPlan plan;
  plan.word_count = word_count;
  for (std::uint64_t k = 0; k < SplitPlan::kChunks; ++k) {
    const std::uint64_t begin = k * word_count / SplitPlan::kChunks;
    const std::uint64_t end = (k + 1) * word_count / SplitPlan::kChunks;
    const std::uint64_t train_len = (end - begin) * 3 / 4;
    plan.chunks[k] = {{begin, end}, {begin, begin + train_len}, {begin + train_len, end}};
  }
  return plan;
}

std::string region_text(const std::vector<std::string_view>& words, const std::vector<Interval>& regions) {
  std::string out;
  bool first = true;
  for (const auto& r : regions) {
    if (r.end > words.size()) throw std::out_of_range("region extends beyond corpus");
    for (std::uint64_t i = r.begin; i < r.end; ++i) {
      if (!first) out.push_back(' ');
      out += words[i];
      first = false;
    }
  }
  return out;
}

std::vector<Sentence> window(std::span<const TokenId> tokens, std::size_t length, std::size_t stride) {
  if (stride == 0) throw std::invalid_argument("window: stride must be >= 1");
  if (length == 0) throw std::invalid_argument("window: length must be >= 1");
  std::vector<Sentence> out;
  for (std::size_t start = 0; start + length <= tokens.size(); start += stride)
    out.emplace_back(tokens.begin() + start, tokens.begin() + start + length);
  return out;
}

std::size_t masked_count(double p_m, std::size_t length) {
  const double x = p_m * double(length);
  const double lo = std::floor(x);
  const double frac = x - lo;
  double r = lo;
  if (frac > 0.5 || (frac == 0.5 && std::fmod(lo, 2.0) != 0.0)) r = lo + 1;
  return std::min(length, std::size_t(r));
}

MaskedSentence mask_sentence(const Sentence& sentence, double p_m, std::size_t vocab_size, TokenId mask_id, Rng& rng,
                             const MaskingScheme& scheme) {
  if (!(p_m >= 0.0 && p_m < 1.0)) throw std::invalid_argument("mask_sentence: p_m must lie in [0, 1)");
  if (vocab_size < 2) throw std::invalid_argument("mask_sentence: need at least two ordinary tokens");
  MaskedSentence out;
  out.input = sentence;
  out.original = sentence;
  const std::size_t k = masked_count(p_m, sentence.size());

  // Partial Fisher-Yates: the first k slots become a uniform k-subset.
  std::vector<std::uint32_t> idx(sentence.size());
  std::iota(idx.begin(), idx.end(), 0u);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + std::size_t(rng.uniform_index(idx.size() - i));
    std::swap(idx[i], idx[j]);
  }
  out.positions.assign(idx.begin(), idx.begin() + std::ptrdiff_t(k));
  std::sort(out.positions.begin(), out.positions.end());

  const double total = scheme.mask_token + scheme.random_token + scheme.unchanged;
  out.actions.reserve(k);
  for (std::uint32_t pos : out.positions) {
    const double u = rng.uniform01() * total;
    if (u < scheme.mask_token) {
      out.actions.push_back(MaskAction::kMaskToken);
      out.input[pos] = mask_id;
    } else if (u < scheme.mask_token + scheme.random_token) {
      out.actions.push_back(MaskAction::kRandomToken);
      TokenId t;
      do {
        t = TokenId(rng.uniform_index(vocab_size));
      } while (t == sentence[pos]);
      out.input[pos] = t;
    } else {
      out.actions.push_back(MaskAction::kUnchanged);
    }
  }
  return out;
}

BatchStream::BatchStream(std::size_t sentence_count, std::size_t batch_size, Rng rng)
    : count_(sentence_count), batch_(batch_size), rng_(rng) {
  if (batch_size == 0) throw std::invalid_argument("BatchStream: batch size must be >= 1");
}

std::vector<std::vector<std::size_t>> BatchStream::next_epoch() {
  std::vector<std::size_t> order(count_);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = count_; i > 1; --i) std::swap(order[i - 1], order[rng_.uniform_index(i)]);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < count_; start += batch_)
    batches.emplace_back(order.begin() + std::ptrdiff_t(start), order.begin() + std::ptrdiff_t(std::min(count_, start + batch_)));
  return batches;
}

}  // namespace ntlab
