#pragma once

// Forward and backward passes of the transformer, written as free functions
// over row-major Eigen matrices (one row per position).

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <thread>
#include <vector>

#include "ntlab/lm/params.hpp"
#include "ntlab/dataset.hpp"
#include "ntlab/tokenizer.hpp"

namespace ntlab::lm {

// ---------------------------------------------------------------------------
// Attention masking

struct AttentionMask {
  bool causal = true;
  bool exclude_self = false;

  /// Whether query i may read key j in a sequence of length n. With
  /// exclude_self, a query that would otherwise have no key (i = 0 when
  /// causal, n = 1 otherwise) falls back to itself.
  bool allows(Eigen::Index i, Eigen::Index j, Eigen::Index n) const {
    if (causal && j > i) return false;
    if (exclude_self && i == j) return causal ? i == 0 : n == 1;
    return true;
  }
};

inline AttentionMask mask_for(const ModelConfig& c) { return {c.causal(), c.exclude_self}; }

// ---------------------------------------------------------------------------
// Elementwise pieces

template <typename Scalar>
struct LayerNormCache {
  Matrix<Scalar> normalized;  // (x - mean) * rstd
  ColVector<Scalar> rstd;
};

template <typename Scalar>
Matrix<Scalar> layer_norm(const Matrix<Scalar>& x, const RowVector<Scalar>& gain, const RowVector<Scalar>& bias,
                          Scalar eps, LayerNormCache<Scalar>* cache = nullptr) {
  const ColVector<Scalar> mean = x.rowwise().mean();
  Matrix<Scalar> centered = x.colwise() - mean;
  const ColVector<Scalar> rstd =
      ((centered.rowwise().squaredNorm() / Scalar(x.cols())).array() + eps).rsqrt().matrix();
  centered = centered.array().colwise() * rstd.array();
  Matrix<Scalar> y = (centered.array().rowwise() * gain.array()).rowwise() + bias.array();
  if (cache) {
    cache->normalized = std::move(centered);
    cache->rstd = rstd;
  }
  return y;
}

/// Accumulates gain/bias gradients and returns d(input).
template <typename Scalar>
Matrix<Scalar> layer_norm_backward(const Matrix<Scalar>& dy, const LayerNormCache<Scalar>& cache,
                                   const RowVector<Scalar>& gain, RowVector<Scalar>& dgain, RowVector<Scalar>& dbias) {
  const auto& xhat = cache.normalized;
  dgain += (dy.array() * xhat.array()).colwise().sum().matrix();
  dbias += dy.colwise().sum();
  const Matrix<Scalar> dxhat = dy.array().rowwise() * gain.array();
  const Scalar inv_d = Scalar(1) / Scalar(dy.cols());
  const ColVector<Scalar> mean_dxhat = dxhat.rowwise().sum() * inv_d;
  const ColVector<Scalar> mean_dxhat_xhat = (dxhat.array() * xhat.array()).rowwise().sum().matrix() * inv_d;
  Matrix<Scalar> dx = (dxhat.colwise() - mean_dxhat) - (xhat.array().colwise() * mean_dxhat_xhat.array()).matrix();
  return dx.array().colwise() * cache.rstd.array();
}

/// tanh approximation used by GPT-2.
template <typename Scalar>
Matrix<Scalar> gelu(const Matrix<Scalar>& x) {
  const Scalar c = Scalar(std::sqrt(2.0 / std::numbers::pi));
  return x.unaryExpr([c](Scalar v) {
    return Scalar(0.5) * v * (Scalar(1) + std::tanh(c * (v + Scalar(0.044715) * v * v * v)));
  });
}

template <typename Scalar>
Matrix<Scalar> gelu_backward(const Matrix<Scalar>& x, const Matrix<Scalar>& dy) {
  const Scalar c = Scalar(std::sqrt(2.0 / std::numbers::pi));
  return x.binaryExpr(dy, [c](Scalar v, Scalar g) {
    const Scalar t = std::tanh(c * (v + Scalar(0.044715) * v * v * v));
    const Scalar du = c * (Scalar(1) + Scalar(3 * 0.044715) * v * v);
    return g * (Scalar(0.5) * (Scalar(1) + t) + Scalar(0.5) * v * (Scalar(1) - t * t) * du);
  });
}

/// Softmax over the keys a query may attend to; disallowed entries are 0.
template <typename Scalar>
void masked_softmax_rows(Matrix<Scalar>& scores, const AttentionMask& mask, Eigen::Index row_offset = 0) {
  const Eigen::Index n = scores.cols();
  for (Eigen::Index r = 0; r < scores.rows(); ++r) {
    const Eigen::Index i = r + row_offset;
    Scalar mx = -std::numeric_limits<Scalar>::infinity();
    for (Eigen::Index j = 0; j < n; ++j)
      if (mask.allows(i, j, n)) mx = std::max(mx, scores(r, j));
    Scalar sum = 0;
    for (Eigen::Index j = 0; j < n; ++j) {
      const Scalar e = mask.allows(i, j, n) ? std::exp(scores(r, j) - mx) : Scalar(0);
      scores(r, j) = e;
      sum += e;
    }
    scores.row(r) /= sum;
  }
}

// ---------------------------------------------------------------------------
// Attention

template <typename Scalar>
struct AttentionCache {
  Matrix<Scalar> q, k, v;               // projections, all heads side by side
  std::vector<Matrix<Scalar>> weights;  // per head, T x T (rows sum to 1)
  Matrix<Scalar> mixed;                 // concatenated head outputs
};

/// Multi-head self-attention on normalized inputs `a` (T x d). Per head the
/// scores are q k^T / sqrt(R); the result goes through the output projection.
template <typename Scalar>
Matrix<Scalar> attention_forward(const BlockParams<Scalar>& b, const ModelConfig& c, const Matrix<Scalar>& a,
                                 const AttentionMask& mask, AttentionCache<Scalar>& cache) {
  const auto heads = Eigen::Index(c.heads);
  const auto r = Eigen::Index(c.query_dim());
  const auto hd = Eigen::Index(c.head_dim);
  const Scalar scale = Scalar(1) / std::sqrt(Scalar(r));
  cache.q = (a * b.w_q).rowwise() + b.b_q;
  cache.k = (a * b.w_k).rowwise() + b.b_k;
  cache.v = (a * b.w_v).rowwise() + b.b_v;
  cache.weights.resize(std::size_t(heads));
  cache.mixed.resize(a.rows(), heads * hd);
  for (Eigen::Index h = 0; h < heads; ++h) {
    Matrix<Scalar>& w = cache.weights[std::size_t(h)];
    w.noalias() = cache.q.middleCols(h * r, r) * cache.k.middleCols(h * r, r).transpose();
    w *= scale;
    masked_softmax_rows(w, mask);
    cache.mixed.middleCols(h * hd, hd).noalias() = w * cache.v.middleCols(h * hd, hd);
  }
  return (cache.mixed * b.w_out).rowwise() + b.b_out;
}

/// Accumulates projection gradients into `g` and returns d(a).
template <typename Scalar>
Matrix<Scalar> attention_backward(const BlockParams<Scalar>& b, const ModelConfig& c, const Matrix<Scalar>& a,
                                  const AttentionCache<Scalar>& cache, const Matrix<Scalar>& dout,
                                  BlockParams<Scalar>& g) {
  const auto heads = Eigen::Index(c.heads);
  const auto r = Eigen::Index(c.query_dim());
  const auto hd = Eigen::Index(c.head_dim);
  const Scalar scale = Scalar(1) / std::sqrt(Scalar(r));

  g.w_out.noalias() += cache.mixed.transpose() * dout;
  g.b_out += dout.colwise().sum();
  const Matrix<Scalar> dmixed = dout * b.w_out.transpose();

  Matrix<Scalar> dq(a.rows(), heads * r), dk(a.rows(), heads * r), dv(a.rows(), heads * hd);
  for (Eigen::Index h = 0; h < heads; ++h) {
    const Matrix<Scalar>& w = cache.weights[std::size_t(h)];
    const auto dy = dmixed.middleCols(h * hd, hd);
    dv.middleCols(h * hd, hd).noalias() = w.transpose() * dy;
    Matrix<Scalar> dw = dy * cache.v.middleCols(h * hd, hd).transpose();
    // Softmax Jacobian: ds = w * (dw - rowsum(w * dw)).
    const ColVector<Scalar> inner = (w.array() * dw.array()).rowwise().sum().matrix();
    Matrix<Scalar> ds = (w.array() * (dw.colwise() - inner).array()).matrix() * scale;
    dq.middleCols(h * r, r).noalias() = ds * cache.k.middleCols(h * r, r);
    dk.middleCols(h * r, r).noalias() = ds.transpose() * cache.q.middleCols(h * r, r);
  }
  g.w_q.noalias() += a.transpose() * dq;
  g.w_k.noalias() += a.transpose() * dk;
  g.w_v.noalias() += a.transpose() * dv;
  g.b_q += dq.colwise().sum();
  g.b_k += dk.colwise().sum();
  g.b_v += dv.colwise().sum();
  Matrix<Scalar> da = dq * b.w_q.transpose();
  da.noalias() += dk * b.w_k.transpose();
  da.noalias() += dv * b.w_v.transpose();
  return da;
}

struct AttentionResult {
  Matrix<double> output;
  std::vector<Matrix<double>> weights;  // heads x (T x T)
};

/// Standalone attention op on raw layer inputs (no normalization). Throws
/// std::invalid_argument for non-finite inputs.
template <typename Scalar>
AttentionResult attention(const BlockParams<Scalar>& b, const ModelConfig& c, const Matrix<Scalar>& x,
                          const AttentionMask& mask) {
  if (!x.allFinite()) throw std::invalid_argument("attention: non-finite input");
  if (x.rows() > Eigen::Index(c.context)) throw std::length_error("attention: input longer than context");
  AttentionCache<Scalar> cache;
  AttentionResult out;
  out.output = attention_forward(b, c, x, mask, cache).template cast<double>();
  for (const auto& w : cache.weights) out.weights.push_back(w.template cast<double>());
  return out;
}

// ---------------------------------------------------------------------------
// Full model

template <typename Scalar>
struct BlockCache {
  Matrix<Scalar> input;
  LayerNormCache<Scalar> ln1;
  Matrix<Scalar> a;
  AttentionCache<Scalar> attn;
  Matrix<Scalar> mid;
  LayerNormCache<Scalar> ln2;
  Matrix<Scalar> m;
  Matrix<Scalar> pre_act;
  Matrix<Scalar> act;
};

template <typename Scalar>
struct ForwardCache {
  std::vector<TokenId> tokens;
  std::vector<BlockCache<Scalar>> blocks;
  LayerNormCache<Scalar> final_ln;
  Matrix<Scalar> hidden;  // final normalized states, T x d
};

template <typename Scalar>
void check_tokens(const ModelConfig& c, std::span<const TokenId> tokens) {
  if (tokens.empty()) throw std::invalid_argument("forward: empty sequence");
  if (tokens.size() > c.context)
    throw std::length_error("forward: sequence of " + std::to_string(tokens.size()) + " exceeds context " +
                            std::to_string(c.context));
  for (TokenId t : tokens)
    if (t >= c.input_vocab()) throw std::out_of_range("forward: token id " + std::to_string(t) + " out of range");
}

/// Runs every block and the final normalization, filling `cache`.
template <typename Scalar>
void forward_hidden(const Params<Scalar>& p, std::span<const TokenId> tokens, const AttentionMask& mask,
                    ForwardCache<Scalar>& cache) {
  const ModelConfig& c = p.config;
  check_tokens<Scalar>(c, tokens);
  const auto n = Eigen::Index(tokens.size());
  const auto eps = Scalar(c.layer_norm_eps);
  cache.tokens.assign(tokens.begin(), tokens.end());
  Matrix<Scalar> x(n, Eigen::Index(c.embed_dim()));
  for (Eigen::Index t = 0; t < n; ++t) x.row(t) = p.token_embedding.row(tokens[t]) + p.position_embedding.row(t);
  cache.blocks.resize(p.blocks.size());
  for (std::size_t l = 0; l < p.blocks.size(); ++l) {
    const auto& b = p.blocks[l];
    auto& bc = cache.blocks[l];
    bc.input = x;
    bc.a = layer_norm(x, b.ln1_gain, b.ln1_bias, eps, &bc.ln1);
    bc.mid = x + attention_forward(b, c, bc.a, mask, bc.attn);
    bc.m = layer_norm(bc.mid, b.ln2_gain, b.ln2_bias, eps, &bc.ln2);
    bc.pre_act = (bc.m * b.w_fc).rowwise() + b.b_fc;
    bc.act = gelu(bc.pre_act);
    x = bc.mid + ((bc.act * b.w_proj).rowwise() + b.b_proj);
  }
  cache.hidden = layer_norm(x, p.final_gain, p.final_bias, eps, &cache.final_ln);
}

/// Logits over the D ordinary tokens for the given rows of the hidden state.
template <typename Scalar>
RowVector<Scalar> logits_row(const Params<Scalar>& p, const Matrix<Scalar>& hidden, Eigen::Index row) {
  return hidden.row(row) * p.token_embedding.topRows(Eigen::Index(p.config.vocab)).transpose();
}

struct ForwardResult {
  Matrix<double> logits;  // T x D
  /// layers x heads x (T x T), filled when requested.
  std::vector<std::vector<Matrix<double>>> attention;
};

template <typename Scalar>
ForwardResult forward(const Params<Scalar>& p, std::span<const TokenId> tokens, bool with_attention = false) {
  ForwardCache<Scalar> cache;
  forward_hidden(p, tokens, mask_for(p.config), cache);
  ForwardResult out;
  out.logits = (cache.hidden * p.token_embedding.topRows(Eigen::Index(p.config.vocab)).transpose()).template cast<double>();
  if (with_attention) {
    for (const auto& bc : cache.blocks) {
      std::vector<Matrix<double>> layer;
      for (const auto& w : bc.attn.weights) layer.push_back(w.template cast<double>());
      out.attention.push_back(std::move(layer));
    }
  }
  return out;
}

/// Back-propagates d(hidden) through the network, accumulating into `g`.
template <typename Scalar>
void backward_hidden(const Params<Scalar>& p, const ForwardCache<Scalar>& cache, const Matrix<Scalar>& dhidden,
                     Params<Scalar>& g) {
  const ModelConfig& c = p.config;
  Matrix<Scalar> dx = layer_norm_backward(dhidden, cache.final_ln, p.final_gain, g.final_gain, g.final_bias);
  for (std::size_t l = p.blocks.size(); l-- > 0;) {
    const auto& b = p.blocks[l];
    const auto& bc = cache.blocks[l];
    auto& gb = g.blocks[l];
    // MLP branch.
    gb.w_proj.noalias() += bc.act.transpose() * dx;
    gb.b_proj += dx.colwise().sum();
    const Matrix<Scalar> dpre = gelu_backward(bc.pre_act, Matrix<Scalar>(dx * b.w_proj.transpose()));
    gb.w_fc.noalias() += bc.m.transpose() * dpre;
    gb.b_fc += dpre.colwise().sum();
    const Matrix<Scalar> dm = dpre * b.w_fc.transpose();
    Matrix<Scalar> dmid = dx + layer_norm_backward(dm, bc.ln2, b.ln2_gain, gb.ln2_gain, gb.ln2_bias);
    // Attention branch.
    const Matrix<Scalar> da = attention_backward(b, c, bc.a, bc.attn, dmid, gb);
    dx = dmid + layer_norm_backward(da, bc.ln1, b.ln1_gain, gb.ln1_gain, gb.ln1_bias);
  }
  for (Eigen::Index t = 0; t < dx.rows(); ++t) {
    g.token_embedding.row(cache.tokens[std::size_t(t)]) += dx.row(t);
    g.position_embedding.row(t) += dx.row(t);
  }
}

// ---------------------------------------------------------------------------
// Losses

/// One supervised position: predict `token` from the output at `position`.
struct LossTarget {
  std::uint32_t position;
  TokenId token;
  double weight;
};

/// Next-word targets for one sentence: output i predicts token i + 1, each
/// weighted 1 / (T - 1).
std::vector<LossTarget> next_word_targets(std::span<const TokenId> sentence, double scale = 1.0);
/// Masked targets: each masked position predicts its original token,
/// weighted 1 / |I|. Throws std::invalid_argument for an empty index set.
std::vector<LossTarget> masked_targets(std::span<const TokenId> original, std::span<const std::uint32_t> positions,
                                       double scale = 1.0);

/// sum_k weight_k * -ln softmax(logits(position_k))[token_k]; when `grad` is
/// non-null the gradient of that sum is accumulated into it.
template <typename Scalar>
double weighted_cross_entropy(const Params<Scalar>& p, std::span<const TokenId> input,
                              std::span<const LossTarget> targets, Params<Scalar>* grad) {
  ForwardCache<Scalar> cache;
  forward_hidden(p, input, mask_for(p.config), cache);
  const auto vocab = Eigen::Index(p.config.vocab);
  const auto head = p.token_embedding.topRows(vocab);

  // Gather the supervised rows so the output head is one product.
  Matrix<Scalar> rows(Eigen::Index(targets.size()), cache.hidden.cols());
  for (Eigen::Index k = 0; k < rows.rows(); ++k) rows.row(k) = cache.hidden.row(targets[std::size_t(k)].position);
  Matrix<Scalar> logits = rows * head.transpose();

  double loss = 0.0;
  for (Eigen::Index k = 0; k < logits.rows(); ++k) {
    const LossTarget& t = targets[std::size_t(k)];
    const Scalar mx = logits.row(k).maxCoeff();
    const RowVector<Scalar> e = (logits.row(k).array() - mx).exp();
    const Scalar sum = e.sum();
    loss -= t.weight * (double(logits(k, t.token) - mx) - std::log(double(sum)));
    if (grad) {
      logits.row(k) = e * (Scalar(t.weight) / sum);  // becomes d(loss)/d(logits)
      logits(k, t.token) -= Scalar(t.weight);
    }
  }
  if (grad) {
    grad->token_embedding.topRows(vocab).noalias() += logits.transpose() * rows;
    const Matrix<Scalar> drows = logits * head;
    Matrix<Scalar> dhidden = Matrix<Scalar>::Zero(cache.hidden.rows(), cache.hidden.cols());
    for (Eigen::Index k = 0; k < drows.rows(); ++k) dhidden.row(targets[std::size_t(k)].position) += drows.row(k);
    backward_hidden(p, cache, dhidden, *grad);
  }
  return loss;
}

/// One training example: model input plus its supervised positions.
struct Example {
  TokenSeq input;
  std::vector<LossTarget> targets;
};

Example next_word_example(std::span<const TokenId> sentence);

/// Mean per-sentence loss over a batch. With `grad`, the gradient of that mean
/// is written there (overwriting). Each sentence gets its own gradient buffer
/// and buffers are summed in batch order, so the result does not depend on
/// `workers`.
template <typename Scalar>
double batch_loss(const Params<Scalar>& p, std::span<const Example> batch, Params<Scalar>* grad, unsigned workers = 1) {
  if (batch.empty()) throw std::invalid_argument("batch_loss: empty batch");
  const std::size_t n = batch.size();
  const std::size_t n_workers = std::clamp<std::size_t>(workers, 1, n);
  std::vector<double> losses(n, 0.0);
  if (grad) grad->set_zero();

  if (n_workers == 1) {
    std::optional<Params<Scalar>> buf;
    if (grad) buf = Params<Scalar>::zeros(p.config);
    for (std::size_t s = 0; s < n; ++s) {
      if (buf) buf->set_zero();
      losses[s] = weighted_cross_entropy<Scalar>(p, batch[s].input, batch[s].targets, buf ? &*buf : nullptr);
      if (grad) *grad += *buf;
    }
  } else {
    std::vector<Params<Scalar>> bufs(grad ? n : 0);
    std::vector<std::exception_ptr> errors(n_workers);
    auto run = [&](std::size_t w) {
      try {
        for (std::size_t s = w; s < n; s += n_workers) {
          Params<Scalar>* g = nullptr;
          if (grad) {
            bufs[s] = Params<Scalar>::zeros(p.config);
            bufs[s].set_zero();
            g = &bufs[s];
          }
          losses[s] = weighted_cross_entropy<Scalar>(p, batch[s].input, batch[s].targets, g);
        }
      } catch (...) {
        errors[w] = std::current_exception();
      }
    };
    std::vector<std::thread> threads;
    for (std::size_t w = 0; w < n_workers; ++w) threads.emplace_back(run, w);
    for (auto& t : threads) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
    if (grad)
      for (const auto& b : bufs) *grad += b;
  }

  const double inv_b = 1.0 / double(n);
  if (grad)
    for (auto v : grad->views()) v *= Scalar(inv_b);
  double total = 0.0;
  for (double l : losses) total += l;
  return total * inv_b;
}

/// Mean over sentences of the per-sentence next-word loss, each normalized
/// by (T - 1). Sentences need at least two tokens.
template <typename Scalar>
double nwp_loss(const Params<Scalar>& p, std::span<const Sentence> batch, Params<Scalar>* grad = nullptr,
                unsigned workers = 1) {
  std::vector<Example> ex;
  ex.reserve(batch.size());
  for (const auto& s : batch) ex.push_back(next_word_example(s));
  return batch_loss<Scalar>(p, ex, grad, workers);
}

Example masked_example(const MaskedSentence& m);

/// Mean over sentences of the loss at masked positions, each normalized by
/// the number of masked positions.
template <typename Scalar>
double mlm_loss(const Params<Scalar>& p, std::span<const MaskedSentence> batch, Params<Scalar>* grad = nullptr,
                unsigned workers = 1) {
  std::vector<Example> ex;
  ex.reserve(batch.size());
  for (const auto& s : batch) ex.push_back(masked_example(s));
  return batch_loss<Scalar>(p, ex, grad, workers);
}

}  // namespace ntlab::lm
