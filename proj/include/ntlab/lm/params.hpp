#pragma once

#include <Eigen/Dense>
#include <string>
#include <utility>
#include <vector>

#include "ntlab/lm/config.hpp"
#include "ntlab/rng.hpp"

namespace ntlab::lm {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
template <typename Scalar>
using ColVector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using FlatMap = Eigen::Map<ColVector<Scalar>>;

/// Weights of one pre-normalization transformer block. Projections act on
/// row vectors: q = a * w_q + b_q.
template <typename Scalar>
struct BlockParams {
  RowVector<Scalar> ln1_gain, ln1_bias;
  Matrix<Scalar> w_q, w_k, w_v;  // d x heads*R, d x heads*R, d x heads*head_dim
  RowVector<Scalar> b_q, b_k, b_v;
  Matrix<Scalar> w_out;  // heads*head_dim x d
  RowVector<Scalar> b_out;
  RowVector<Scalar> ln2_gain, ln2_bias;
  Matrix<Scalar> w_fc;  // d x mlp_ratio*d
  RowVector<Scalar> b_fc;
  Matrix<Scalar> w_proj;  // mlp_ratio*d x d
  RowVector<Scalar> b_proj;

  template <typename F>
  void for_each(const std::string& prefix, F&& f) {
    f(prefix + "ln1_gain", ln1_gain);
    f(prefix + "ln1_bias", ln1_bias);
    f(prefix + "w_q", w_q);
    f(prefix + "b_q", b_q);
    f(prefix + "w_k", w_k);
    f(prefix + "b_k", b_k);
    f(prefix + "w_v", w_v);
    f(prefix + "b_v", b_v);
    f(prefix + "w_out", w_out);
    f(prefix + "b_out", b_out);
    f(prefix + "ln2_gain", ln2_gain);
    f(prefix + "ln2_bias", ln2_bias);
    f(prefix + "w_fc", w_fc);
    f(prefix + "b_fc", b_fc);
    f(prefix + "w_proj", w_proj);
    f(prefix + "b_proj", b_proj);
  }
};

/// All trainable tensors. The output head is tied to the first `vocab` rows
/// of the token embedding; the remaining rows embed the special tokens.
template <typename Scalar>
struct Params {
  ModelConfig config;
  Matrix<Scalar> token_embedding;     // input_vocab x d
  Matrix<Scalar> position_embedding;  // context x d
  std::vector<BlockParams<Scalar>> blocks;
  RowVector<Scalar> final_gain, final_bias;

  /// Calls f(name, tensor) for every tensor in a fixed order.
  template <typename F>
  void for_each(F&& f) {
    f(std::string("token_embedding"), token_embedding);
    f(std::string("position_embedding"), position_embedding);
    for (std::size_t l = 0; l < blocks.size(); ++l) blocks[l].for_each("block" + std::to_string(l) + ".", f);
    f(std::string("final_gain"), final_gain);
    f(std::string("final_bias"), final_bias);
  }
  template <typename F>
  void for_each(F&& f) const {
    const_cast<Params*>(this)->for_each([&f](const std::string& name, auto& t) { f(name, std::as_const(t)); });
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each([&n](const std::string&, const auto& t) { n += std::size_t(t.size()); });
    return n;
  }

  /// Flat views of each tensor, index-aligned across Params of one config.
  std::vector<FlatMap<Scalar>> views() {
    std::vector<FlatMap<Scalar>> out;
    for_each([&out](const std::string&, auto& t) { out.emplace_back(t.data(), t.size()); });
    return out;
  }

  bool all_finite() const {
    bool ok = true;
    for_each([&ok](const std::string&, const auto& t) { ok = ok && t.allFinite(); });
    return ok;
  }

  void set_zero() {
    for_each([](const std::string&, auto& t) { t.setZero(); });
  }

  Params& operator+=(const Params& o) {
    auto mine = views();
    auto theirs = const_cast<Params&>(o).views();
    for (std::size_t k = 0; k < mine.size(); ++k) mine[k] += theirs[k];
    return *this;
  }

  template <typename Other>
  Params<Other> cast() const {
    Params<Other> out = Params<Other>::zeros(config);
    auto dst = out.views();
    std::size_t k = 0;
    for_each([&](const std::string&, const auto& t) {
      dst[k++] = FlatMap<Scalar>(const_cast<Scalar*>(t.data()), t.size()).template cast<Other>();
    });
    return out;
  }

  /// Correctly shaped tensors: zero matrices and biases, unit norm gains.
  static Params zeros(const ModelConfig& c) {
    const auto d = Eigen::Index(c.embed_dim());
    const auto qk = Eigen::Index(c.heads * c.query_dim());
    const auto hv = Eigen::Index(c.heads * c.head_dim);
    const auto hidden = Eigen::Index(c.mlp_ratio * c.embed_dim());
    Params p;
    p.config = c;
    p.token_embedding = Matrix<Scalar>::Zero(Eigen::Index(c.input_vocab()), d);
    p.position_embedding = Matrix<Scalar>::Zero(Eigen::Index(c.context), d);
    p.blocks.resize(c.layers);
    for (auto& b : p.blocks) {
      b.ln1_gain = RowVector<Scalar>::Ones(d);
      b.ln1_bias = RowVector<Scalar>::Zero(d);
      b.w_q = Matrix<Scalar>::Zero(d, qk);
      b.w_k = Matrix<Scalar>::Zero(d, qk);
      b.w_v = Matrix<Scalar>::Zero(d, hv);
      b.b_q = RowVector<Scalar>::Zero(qk);
      b.b_k = RowVector<Scalar>::Zero(qk);
      b.b_v = RowVector<Scalar>::Zero(hv);
      b.w_out = Matrix<Scalar>::Zero(hv, d);
      b.b_out = RowVector<Scalar>::Zero(d);
      b.ln2_gain = RowVector<Scalar>::Ones(d);
      b.ln2_bias = RowVector<Scalar>::Zero(d);
      b.w_fc = Matrix<Scalar>::Zero(d, hidden);
      b.b_fc = RowVector<Scalar>::Zero(hidden);
      b.w_proj = Matrix<Scalar>::Zero(hidden, d);
      b.b_proj = RowVector<Scalar>::Zero(d);
    }
    p.final_gain = RowVector<Scalar>::Ones(d);
    p.final_bias = RowVector<Scalar>::Zero(d);
    return p;
  }

  /// GPT-2 style initialization: N(0, init_std) for every weight matrix and
  /// embedding, zero biases, unit gains.
  static Params initialize(const ModelConfig& c, Rng& rng) {
    Params p = zeros(c);
    const double sd = c.init_std;
    p.for_each([&](const std::string& name, auto& t) {
      const bool vector_param = name.find("gain") != std::string::npos || name.find("bias") != std::string::npos ||
                                name.find(".b_") != std::string::npos;
      if (vector_param) return;
      for (Eigen::Index k = 0; k < t.size(); ++k) t.data()[k] = Scalar(sd * rng.normal());
    });
    return p;
  }
};

}  // namespace ntlab::lm
