#pragma once

#include <fstream>
#include <stdexcept>

#include "ntlab/lm/model.hpp"
#include "ntlab/rng.hpp"
#include "ntlab/sampling.hpp"

namespace ntlab::lm {

/// Keys and values of every processed position, per layer. Lets a causal
/// model append one token at a time.
template <typename Scalar>
class DecodeState {
 public:
  explicit DecodeState(const Params<Scalar>& p) : p_(p) {
    const auto& c = p.config;
    if (!c.causal()) throw std::invalid_argument("DecodeState: incremental decoding needs a causal model");
    for (std::size_t l = 0; l < c.layers; ++l) {
      keys_.emplace_back(Eigen::Index(c.context), Eigen::Index(c.heads * c.query_dim()));
      values_.emplace_back(Eigen::Index(c.context), Eigen::Index(c.heads * c.head_dim));
    }
  }

  std::size_t length() const { return length_; }
  bool full() const { return length_ == p_.config.context; }

  /// Appends `token` at the next position and returns the logits over D.
  RowVector<Scalar> push(TokenId token) {
    const auto& c = p_.config;
    if (full()) throw std::length_error("DecodeState: context is full");
    if (token >= c.input_vocab()) throw std::out_of_range("DecodeState: token id out of range");
    const auto t = Eigen::Index(length_);
    const auto eps = Scalar(c.layer_norm_eps);
    const auto heads = Eigen::Index(c.heads);
    const auto r = Eigen::Index(c.query_dim());
    const auto hd = Eigen::Index(c.head_dim);
    const Scalar scale = Scalar(1) / std::sqrt(Scalar(r));
    const AttentionMask mask = mask_for(c);

    Matrix<Scalar> x = p_.token_embedding.row(token) + p_.position_embedding.row(t);
    for (std::size_t l = 0; l < c.layers; ++l) {
      const auto& b = p_.blocks[l];
      const Matrix<Scalar> a = layer_norm(x, b.ln1_gain, b.ln1_bias, eps);
      const RowVector<Scalar> q = a * b.w_q + b.b_q;
      keys_[l].row(t) = a * b.w_k + b.b_k;
      values_[l].row(t) = a * b.w_v + b.b_v;
      Matrix<Scalar> mixed(1, heads * hd);
      for (Eigen::Index h = 0; h < heads; ++h) {
        Matrix<Scalar> w = (q.segment(h * r, r) * keys_[l].block(0, h * r, t + 1, r).transpose()) * scale;
        masked_softmax_rows(w, mask, t);
        mixed.middleCols(h * hd, hd).noalias() = w * values_[l].block(0, h * hd, t + 1, hd);
      }
      x += (mixed * b.w_out).rowwise() + b.b_out;
      const Matrix<Scalar> m = layer_norm(x, b.ln2_gain, b.ln2_bias, eps);
      const Matrix<Scalar> act = gelu(Matrix<Scalar>((m * b.w_fc).rowwise() + b.b_fc));
      x += (act * b.w_proj).rowwise() + b.b_proj;
    }
    const Matrix<Scalar> h = layer_norm(x, p_.final_gain, p_.final_bias, eps);
    ++length_;
    return logits_row(p_, h, 0);
  }

 private:
  const Params<Scalar>& p_;
  std::vector<Matrix<Scalar>> keys_, values_;
  std::size_t length_ = 0;
};

/// Logits at the last position of `tokens` from a full forward pass.
template <typename Scalar>
RowVector<Scalar> last_logits(const Params<Scalar>& p, std::span<const TokenId> tokens) {
  ForwardCache<Scalar> cache;
  forward_hidden(p, tokens, mask_for(p.config), cache);
  return logits_row(p, cache.hidden, cache.hidden.rows() - 1);
}

template <typename Scalar>
TokenId sample_logits(const RowVector<Scalar>& logits, double temperature, Rng& rng) {
  const Eigen::VectorXd h = logits.transpose().template cast<double>();
  return TokenId(sample_with_temperature(h, temperature, rng));
}

/// Autoregressive continuation of `prompt` by `count` tokens sampled from
/// softmax_T. While the sequence fits the context the key/value cache is
/// extended; past that, each step recomputes over the last L tokens.
template <typename Scalar>
TokenSeq generate(const Params<Scalar>& p, std::span<const TokenId> prompt, std::size_t count, double temperature,
                  Rng& rng) {
  const auto& c = p.config;
  if (prompt.empty()) throw std::invalid_argument("generate: empty prompt");
  if (prompt.size() > c.context) throw std::length_error("generate: prompt longer than context");
  TokenSeq seq(prompt.begin(), prompt.end());
  seq.reserve(prompt.size() + count);
  if (count == 0) return {};

  DecodeState<Scalar> state(p);
  RowVector<Scalar> logits;
  for (TokenId t : prompt) logits = state.push(t);
  for (std::size_t k = 0; k < count; ++k) {
    const TokenId next = sample_logits(logits, temperature, rng);
    seq.push_back(next);
    if (k + 1 == count) break;
    if (!state.full()) {
      logits = state.push(next);
    } else {
      const std::span<const TokenId> all(seq);
      logits = last_logits(p, all.last(c.context));
    }
  }
  return TokenSeq(seq.begin() + std::ptrdiff_t(prompt.size()), seq.end());
}

/// Fills the masked positions of `input` in one bidirectional pass, sampling
/// each from softmax_T of its logits. Other positions are copied.
template <typename Scalar>
TokenSeq fill_masked(const Params<Scalar>& p, std::span<const TokenId> input, std::span<const std::uint32_t> positions,
                     double temperature, Rng& rng) {
  ForwardCache<Scalar> cache;
  forward_hidden(p, input, mask_for(p.config), cache);
  TokenSeq out(input.begin(), input.end());
  for (std::uint32_t a : positions) out.at(a) = sample_logits(logits_row(p, cache.hidden, a), temperature, rng);
  return out;
}

/// Attention weights of one query position: layers x heads x T.
using AttentionRows = std::vector<std::vector<Eigen::VectorXd>>;

template <typename Scalar>
AttentionRows attention_export(const Params<Scalar>& p, std::span<const TokenId> tokens, std::size_t query) {
  if (query >= tokens.size()) throw std::out_of_range("attention_export: query position out of range");
  const ForwardResult r = forward(p, tokens, true);
  AttentionRows out;
  for (const auto& layer : r.attention) {
    std::vector<Eigen::VectorXd> rows;
    for (const auto& w : layer) rows.emplace_back(w.row(Eigen::Index(query)).transpose());
    out.push_back(std::move(rows));
  }
  return out;
}

/// CSV columns: layer,head,query,key,weight.
void write_attention_csv(const AttentionRows& rows, std::size_t query, const std::filesystem::path& path);

}  // namespace ntlab::lm
