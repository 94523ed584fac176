#include <doctest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <filesystem>
#include <numbers>

#include "ntlab/lm/checkpoint.hpp"
#include "ntlab/lm/generate.hpp"
#include "ntlab/lm/model.hpp"
#include "ntlab/lm/train.hpp"

using namespace ntlab;
using namespace ntlab::lm;

namespace {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;

// Scalar-loop reference forward pass, written from the block definition
// without Eigen expressions.
Mat naive_logits(const Params<double>& p, const TokenSeq& tokens) {
  const auto& c = p.config;
  const std::size_t n = tokens.size(), d = c.embed_dim(), heads = c.heads, r = c.query_dim(), hd = c.head_dim;
  auto norm = [&](const Mat& x, const RowVector<double>& g, const RowVector<double>& b) {
    Mat y = x;
    for (std::size_t t = 0; t < n; ++t) {
      double mean = 0, var = 0;
      for (double v : x[t]) mean += v;
      mean /= double(d);
      for (double v : x[t]) var += (v - mean) * (v - mean);
      var /= double(d);
      for (std::size_t k = 0; k < d; ++k) y[t][k] = (x[t][k] - mean) / std::sqrt(var + c.layer_norm_eps) * g(k) + b(k);
    }
    return y;
  };
  auto affine = [&](const Mat& x, const Matrix<double>& w, const RowVector<double>& b) {
    Mat y(n, Vec(std::size_t(w.cols()), 0.0));
    for (std::size_t t = 0; t < n; ++t)
      for (Eigen::Index o = 0; o < w.cols(); ++o) {
        double s = b(o);
        for (Eigen::Index i = 0; i < w.rows(); ++i) s += x[t][std::size_t(i)] * w(i, o);
        y[t][std::size_t(o)] = s;
      }
    return y;
  };
  Mat x(n, Vec(d));
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t k = 0; k < d; ++k)
      x[t][k] = p.token_embedding(tokens[t], Eigen::Index(k)) + p.position_embedding(Eigen::Index(t), Eigen::Index(k));
  for (const auto& b : p.blocks) {
    const Mat a = norm(x, b.ln1_gain, b.ln1_bias);
    const Mat q = affine(a, b.w_q, b.b_q), k = affine(a, b.w_k, b.b_k), v = affine(a, b.w_v, b.b_v);
    Mat mixed(n, Vec(heads * hd, 0.0));
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < n; ++i) {
        Vec s(n, -INFINITY);
        for (std::size_t j = 0; j < n; ++j) {
          bool ok = !c.causal() || j <= i;
          if (c.exclude_self && i == j) ok = c.causal() ? i == 0 : n == 1;
          if (!ok) continue;
          double dot = 0;
          for (std::size_t e = 0; e < r; ++e) dot += q[i][h * r + e] * k[j][h * r + e];
          s[j] = dot / std::sqrt(double(r));
        }
        double mx = -INFINITY, z = 0;
        for (double e : s) mx = std::max(mx, e);
        for (double& e : s) z += (e = std::exp(e - mx));
        for (std::size_t j = 0; j < n; ++j)
          for (std::size_t e = 0; e < hd; ++e) mixed[i][h * hd + e] += s[j] / z * v[j][h * hd + e];
      }
    const Mat o = affine(mixed, b.w_out, b.b_out);
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t e = 0; e < d; ++e) x[t][e] += o[t][e];
    const Mat m = norm(x, b.ln2_gain, b.ln2_bias);
    Mat f = affine(m, b.w_fc, b.b_fc);
    for (auto& row : f)
      for (double& u : row)
        u = 0.5 * u * (1 + std::tanh(std::sqrt(2 / std::numbers::pi) * (u + 0.044715 * u * u * u)));
    const Mat pr = affine(f, b.w_proj, b.b_proj);
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t e = 0; e < d; ++e) x[t][e] += pr[t][e];
  }
  const Mat h = norm(x, p.final_gain, p.final_bias);
  Mat logits(n, Vec(c.vocab, 0.0));
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t w = 0; w < c.vocab; ++w)
      for (std::size_t e = 0; e < d; ++e) logits[t][w] += h[t][e] * p.token_embedding(Eigen::Index(w), Eigen::Index(e));
  return logits;
}

double naive_ce(const Vec& logits, TokenId target) {
  double mx = -INFINITY, z = 0;
  for (double v : logits) mx = std::max(mx, v);
  for (double v : logits) z += std::exp(v - mx);
  return -(logits[target] - mx - std::log(z));
}

ModelConfig small_config(std::size_t vocab, Objective obj) {
  ModelConfig c = ModelConfig::desk(vocab, obj);
  c.context = 32;
  return c;
}

/// Random non-trivial parameters: gains and biases perturbed too.
Params<double> random_params(const ModelConfig& c, std::uint64_t seed, double scale = 0.3) {
  Rng rng(seed);
  Params<double> p = Params<double>::initialize(c, rng);
  p.for_each([&](const std::string& name, auto& t) {
    for (Eigen::Index k = 0; k < t.size(); ++k) {
      if (name.find("gain") != std::string::npos) t.data()[k] = 1.0 + 0.2 * rng.normal();
      else t.data()[k] = scale * rng.normal();
    }
  });
  return p;
}

TokenSeq random_tokens(std::size_t n, std::size_t d, Rng& rng) {
  TokenSeq t(n);
  for (auto& x : t) x = TokenId(rng.uniform_index(d));
  return t;
}

}  // namespace

TEST_CASE("config presets and parameter count") {
  const ModelConfig desk = ModelConfig::desk(64);
  CHECK(desk.layers == 2);
  CHECK(desk.heads == 4);
  CHECK(desk.head_dim == 16);
  CHECK(desk.context == 256);
  CHECK(desk.embed_dim() == 64);
  const ModelConfig paper = ModelConfig::paper(1024);
  CHECK(paper.embed_dim() == 768);
  CHECK(paper.query_dim() == 64);
  const std::size_t p = parameter_count(paper);
  CHECK(p >= 85000000);
  CHECK(p <= 89000000);
  CHECK(p == 86630400);
  CHECK(Params<float>::zeros(desk).parameter_count() == parameter_count(desk));
  ModelConfig q = desk;
  q.qk_dim = 8;
  CHECK(Params<float>::zeros(q).parameter_count() == parameter_count(q));
  CHECK(ModelConfig::from_json(q.to_json()) == q);
  CHECK(ModelConfig::from_json(paper.to_json()) == paper);
  CHECK_THROWS(ModelConfig::preset("huge", 64, Objective::kNextWord));
  CHECK(parse_objective("mlm") == Objective::kMasked);
  CHECK_THROWS(parse_objective("clm"));
}

TEST_CASE("forward matches the scalar-loop reference") {
  for (Objective obj : {Objective::kNextWord, Objective::kMasked})
    for (bool exclude_self : {false, true}) {
      ModelConfig c = small_config(5, obj);
      c.exclude_self = exclude_self;
      c.qk_dim = 12;
      const auto p = random_params(c, 17);
      Rng rng(3);
      const TokenSeq t = random_tokens(9, c.input_vocab(), rng);
      const Matrix<double> got = forward(p, t).logits;
      const Mat ref = naive_logits(p, t);
      double err = 0;
      for (std::size_t i = 0; i < t.size(); ++i)
        for (std::size_t w = 0; w < c.vocab; ++w)
          err = std::max(err, std::abs(got(Eigen::Index(i), Eigen::Index(w)) - ref[i][w]));
      CHECK(err < 1e-10);
    }
}

TEST_CASE("losses match a per-position cross-entropy oracle") {
  const ModelConfig c = small_config(3, Objective::kNextWord);
  const auto p = random_params(c, 5);
  Rng rng(8);
  std::vector<Sentence> batch{random_tokens(7, 3, rng), random_tokens(7, 3, rng), random_tokens(4, 3, rng)};
  double expect = 0;
  for (const auto& s : batch) {
    const Mat logits = naive_logits(p, TokenSeq(s.begin(), s.end() - 1));
    double per = 0;
    for (std::size_t i = 1; i < s.size(); ++i) per += naive_ce(logits[i - 1], s[i]);
    expect += per / double(s.size() - 1);
  }
  expect /= double(batch.size());
  CHECK(std::abs(nwp_loss(p, std::span<const Sentence>(batch)) - expect) < 1e-8);

  ModelConfig cm = small_config(3, Objective::kMasked);
  const auto pm = random_params(cm, 6);
  std::vector<MaskedSentence> masked;
  for (int k = 0; k < 3; ++k) masked.push_back(mask_sentence(random_tokens(10, 3, rng), 0.3, 3, 3, rng));
  double mexpect = 0;
  for (const auto& m : masked) {
    const Mat logits = naive_logits(pm, m.input);
    double per = 0;
    for (auto a : m.positions) per += naive_ce(logits[a], m.original[a]);
    mexpect += per / double(m.positions.size());
  }
  mexpect /= double(masked.size());
  CHECK(std::abs(mlm_loss(pm, std::span<const MaskedSentence>(masked)) - mexpect) < 1e-8);

  MaskedSentence none{Sentence{0, 1, 2}, Sentence{0, 1, 2}, {}, {}};
  CHECK_THROWS_AS(mlm_loss(pm, std::span<const MaskedSentence>(&none, 1)), std::invalid_argument);
  CHECK_THROWS(nwp_loss(p, std::vector<Sentence>{Sentence{1}}));
}

TEST_CASE("loss limit cases") {
  ModelConfig c = small_config(4, Objective::kNextWord);
  // Zero embeddings give uniform logits.
  auto p = Params<double>::zeros(c);
  Rng rng(1);
  std::vector<Sentence> batch{random_tokens(12, 4, rng)};
  CHECK(std::abs(nwp_loss(p, std::span<const Sentence>(batch)) - std::log(4.0)) < 1e-12);

  // One masked position whose correct class has probability 1/e: loss 1.
  ModelConfig cm = small_config(2, Objective::kMasked);
  auto pm = Params<double>::zeros(cm);
  // Final bias along a direction picked up by the tied head: logit gap g
  // with 1/(1 + e^{-g}) = 1/e.
  const double gap = -std::log(std::exp(1.0) - 1.0);
  pm.final_bias.setZero();
  pm.final_bias(0) = 1.0;
  pm.token_embedding(0, 0) = gap;
  pm.token_embedding(1, 0) = 0.0;
  MaskedSentence m{Sentence{2, 1, 1}, Sentence{0, 1, 1}, {0}, {MaskAction::kMaskToken}};
  CHECK(std::abs(mlm_loss(pm, std::span<const MaskedSentence>(&m, 1)) - 1.0) < 1e-12);

  // Scaling correct logits up drives the loss to 0.
  auto big = Params<double>::zeros(small_config(2, Objective::kMasked));
  big.final_bias(0) = 1.0;
  big.token_embedding(0, 0) = 800.0;
  MaskedSentence good{Sentence{2, 2}, Sentence{0, 0}, {0, 1}, {MaskAction::kMaskToken, MaskAction::kMaskToken}};
  CHECK(mlm_loss(big, std::span<const MaskedSentence>(&good, 1)) < 1e-300);
}

TEST_CASE("initial loss is close to ln D") {
  for (Objective obj : {Objective::kNextWord, Objective::kMasked}) {
    const ModelConfig c = ModelConfig::desk(64, obj);
    Rng rng(21);
    const auto p = Params<double>::initialize(c, rng);
    std::vector<Example> ex;
    for (int k = 0; k < 4; ++k) {
      const Sentence s = random_tokens(256, 64, rng);
      ex.push_back(obj == Objective::kNextWord ? next_word_example(s) : masked_example(mask_sentence(s, 0.15, 64, 64, rng)));
    }
    const double loss = batch_loss<double>(p, ex, nullptr);
    CHECK(loss / std::log(64.0) > 0.95);
    CHECK(loss / std::log(64.0) < 1.05);
  }
}

TEST_CASE("analytic gradients match central differences") {
  for (Objective obj : {Objective::kNextWord, Objective::kMasked})
    for (bool exclude_self : {false, true}) {
      ModelConfig c = ModelConfig::desk(16, obj);
      c.exclude_self = exclude_self;
      Rng rng(obj == Objective::kNextWord ? 31 : 32);
      auto p = random_params(c, rng.next(), 0.1);
      std::vector<Example> ex;
      for (int k = 0; k < 2; ++k) {
        const Sentence s = random_tokens(c.context, c.vocab, rng);
        ex.push_back(obj == Objective::kNextWord ? next_word_example(s)
                                                 : masked_example(mask_sentence(s, 0.15, c.vocab, TokenId(c.vocab), rng)));
      }
      auto grad = Params<double>::zeros(c);
      batch_loss<double>(p, ex, &grad);
      auto pv = p.views();
      auto gv = grad.views();
      // The key bias shifts every score of a query row equally, so its exact
      // gradient is zero and a relative error is meaningless there.
      std::vector<bool> skip;
      p.for_each([&](const std::string& name, const auto&) { skip.push_back(name.ends_with(".b_k")); });
      std::vector<std::pair<std::size_t, Eigen::Index>> index;
      for (std::size_t k = 0; k < pv.size(); ++k)
        if (!skip[k])
          for (Eigen::Index i = 0; i < pv[k].size(); ++i) index.emplace_back(k, i);
      double worst = 0;
      const double h = 1e-5;
      int sampled = 0;
      while (sampled < 100) {
        const auto [k, i] = index[rng.uniform_index(index.size())];
        // The pad row (and, for next-word inputs, the mask row) never reaches
        // the loss; both sides are exactly zero there.
        if (gv[k](i) == 0.0) continue;
        const double keep = pv[k](i);
        pv[k](i) = keep + h;
        const double up = batch_loss<double>(p, ex, nullptr);
        pv[k](i) = keep - h;
        const double down = batch_loss<double>(p, ex, nullptr);
        pv[k](i) = keep;
        const double numeric = (up - down) / (2 * h);
        const double rel = std::abs(numeric - gv[k](i)) / std::max(std::abs(numeric), std::abs(gv[k](i)));
        worst = std::max(worst, rel);
        ++sampled;
      }
      CHECK(worst < 1e-4);
    }
}

TEST_CASE("next-word logits are causal at bit level") {
  ModelConfig c = ModelConfig::desk(64, Objective::kNextWord);
  Rng rng(41);
  const auto p = Params<double>::initialize(c, rng);
  const TokenSeq base = random_tokens(64, 64, rng);
  const Matrix<double> ref = forward(p, base).logits;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t i = rng.uniform_index(base.size() - 1);
    TokenSeq changed = base;
    for (std::size_t j = i + 1; j < changed.size(); ++j)
      if (rng.uniform01() < 0.5) changed[j] = TokenId(rng.uniform_index(64));
    changed[i + 1] = TokenId((base[i + 1] + 1) % 64);
    const Matrix<double> got = forward(p, changed).logits;
    REQUIRE(std::memcmp(got.data(), ref.data(), sizeof(double) * (i + 1) * 64) == 0);
  }
}

TEST_CASE("attention op") {
  ModelConfig c = small_config(8, Objective::kNextWord);
  auto p = random_params(c, 2);
  Rng rng(4);
  Matrix<double> x(6, Eigen::Index(c.embed_dim()));
  for (Eigen::Index k = 0; k < x.size(); ++k) x.data()[k] = rng.normal();

  auto zero_qk = p.blocks[0];
  zero_qk.w_q.setZero();
  zero_qk.w_k.setZero();
  zero_qk.b_q.setZero();
  zero_qk.b_k.setZero();
  const auto causal = attention(zero_qk, c, x, {true, false});
  for (const auto& w : causal.weights)
    for (Eigen::Index i = 0; i < 6; ++i)
      for (Eigen::Index j = 0; j < 6; ++j) CHECK(w(i, j) == doctest::Approx(j <= i ? 1.0 / double(i + 1) : 0.0));
  const auto full = attention(zero_qk, c, x, {false, false});
  for (const auto& w : full.weights) CHECK((w.array() - 1.0 / 6).abs().maxCoeff() < 1e-15);

  const auto any = attention(p.blocks[1], c, x, {true, false});
  for (const auto& w : any.weights) {
    CHECK((w.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);
    CHECK(w.triangularView<Eigen::StrictlyUpper>().toDenseMatrix().cwiseAbs().maxCoeff() == 0.0);
  }
  const auto single = attention(p.blocks[0], c, Matrix<double>(x.topRows(1)), {true, false});
  for (const auto& w : single.weights) CHECK(w(0, 0) == 1.0);
  const auto single_excl = attention(p.blocks[0], c, Matrix<double>(x.topRows(1)), {false, true});
  for (const auto& w : single_excl.weights) CHECK(w(0, 0) == 1.0);

  const auto excl = attention(p.blocks[0], c, x, {true, true});
  for (const auto& w : excl.weights) {
    CHECK(w(0, 0) == 1.0);
    for (Eigen::Index i = 1; i < 6; ++i) CHECK(w(i, i) == 0.0);
  }

  Matrix<double> bad = x;
  bad(2, 3) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(attention(p.blocks[0], c, bad, {true, false}), std::invalid_argument);
  Matrix<double> too_long(Eigen::Index(c.context + 1), Eigen::Index(c.embed_dim()));
  too_long.setZero();
  CHECK_THROWS(attention(p.blocks[0], c, too_long, {true, false}));
}

TEST_CASE("forward input checks and batch independence") {
  const ModelConfig c = small_config(8, Objective::kMasked);
  const auto p = random_params(c, 9);
  CHECK_THROWS_AS(forward(p, TokenSeq(c.context + 1, 0)), std::length_error);
  CHECK_THROWS_AS(forward(p, TokenSeq{0, TokenId(c.input_vocab())}), std::out_of_range);
  CHECK_THROWS(forward(p, TokenSeq{}));
  // Specials are legal inputs.
  CHECK_NOTHROW(forward(p, TokenSeq{0, 8, 9}));

  Rng rng(10);
  std::vector<Example> batch;
  for (int k = 0; k < 5; ++k) batch.push_back(masked_example(mask_sentence(random_tokens(20, 8, rng), 0.2, 8, 8, rng)));
  std::vector<Example> reversed(batch.rbegin(), batch.rend());
  CHECK(batch_loss<double>(p, batch, nullptr) == doctest::Approx(batch_loss<double>(p, reversed, nullptr)).epsilon(1e-14));
  for (const auto& e : batch) {
    const auto solo = forward(p, e.input).logits;
    CHECK(solo == forward(p, e.input).logits);
  }
}

TEST_CASE("gradients do not depend on the worker count") {
  const ModelConfig c = small_config(8, Objective::kNextWord);
  const auto p = random_params(c, 12, 0.1).cast<float>();
  Rng rng(13);
  std::vector<Example> batch;
  for (int k = 0; k < 7; ++k) batch.push_back(next_word_example(random_tokens(16, 8, rng)));
  auto g1 = Params<float>::zeros(c), g3 = Params<float>::zeros(c);
  const double l1 = batch_loss<float>(p, batch, &g1, 1);
  const double l3 = batch_loss<float>(p, batch, &g3, 3);
  CHECK(l1 == l3);
  auto v1 = g1.views(), v3 = g3.views();
  for (std::size_t k = 0; k < v1.size(); ++k) CHECK(v1[k] == v3[k]);
}

TEST_CASE("attention rows of the full model and export") {
  const ModelConfig c = small_config(8, Objective::kNextWord);
  const auto p = random_params(c, 14);
  Rng rng(15);
  const TokenSeq t = random_tokens(12, 8, rng);
  const auto r = forward(p, t, true);
  REQUIRE(r.attention.size() == c.layers);
  for (const auto& layer : r.attention) {
    REQUIRE(layer.size() == c.heads);
    for (const auto& w : layer) {
      CHECK((w.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-6);
      CHECK(w.triangularView<Eigen::StrictlyUpper>().toDenseMatrix().cwiseAbs().maxCoeff() == 0.0);
    }
  }
  const auto rows = attention_export(p, t, 7);
  for (const auto& layer : rows)
    for (const auto& w : layer) {
      CHECK(std::abs(w.sum() - 1.0) < 1e-6);
      CHECK(w.tail(4).cwiseAbs().maxCoeff() == 0.0);
    }
  const auto path = std::filesystem::temp_directory_path() / "ntlab_attention_test.csv";
  write_attention_csv(rows, 7, path);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header == "layer,head,query,key,weight");
  std::size_t lines = 0;
  for (std::string line; std::getline(in, line);) ++lines;
  CHECK(lines == c.layers * c.heads * t.size());
  std::filesystem::remove(path);
  CHECK_THROWS(attention_export(p, t, 12));
}

TEST_CASE("incremental decoding matches full forward passes") {
  for (bool exclude_self : {false, true}) {
    ModelConfig c = small_config(8, Objective::kNextWord);
    c.exclude_self = exclude_self;
    const auto p = random_params(c, 16);
    Rng rng(17);
    const TokenSeq t = random_tokens(c.context, 8, rng);
    DecodeState<double> state(p);
    const Matrix<double> full = forward(p, t).logits;
    for (std::size_t i = 0; i < t.size(); ++i) {
      const RowVector<double> step = state.push(t[i]);
      CHECK((step - full.row(Eigen::Index(i))).cwiseAbs().maxCoeff() < 1e-10);
    }
    CHECK(state.full());
    CHECK_THROWS(state.push(0));
  }
  CHECK_THROWS(DecodeState<double>(random_params(small_config(8, Objective::kMasked), 1)));
}

TEST_CASE("generation") {
  const ModelConfig c = small_config(8, Objective::kNextWord);
  const auto p = random_params(c, 18);
  Rng rng(19);
  const TokenSeq prompt = random_tokens(20, 8, rng);
  // Past the context the window slides; argmax decoding must agree with a
  // step-by-step full recompute.
  Rng a(1), b(1);
  const TokenSeq g0 = generate(p, prompt, 40, 1e-6, a);
  CHECK(g0 == generate(p, prompt, 40, 1e-6, b));
  CHECK(g0.size() == 40);
  TokenSeq seq = prompt;
  for (std::size_t k = 0; k < 40; ++k) {
    const std::span<const TokenId> all(seq);
    const auto ctx = all.size() > c.context ? all.last(c.context) : all;
    seq.push_back(TokenId(argmax(last_logits(p, ctx))));
  }
  CHECK(TokenSeq(seq.begin() + 20, seq.end()) == g0);

  Rng s1(5), s2(5);
  CHECK(generate(p, prompt, 30, 0.8, s1) == generate(p, prompt, 30, 0.8, s2));
  CHECK(generate(p, prompt, 0, 1.0, s1).empty());
  CHECK_THROWS(generate(p, TokenSeq(c.context + 1, 0), 1, 1.0, s1));
  for (TokenId t : generate(p, prompt, 50, 5.0, s1)) CHECK(t < c.vocab);

  const ModelConfig cm = small_config(8, Objective::kMasked);
  const auto pm = random_params(cm, 20);
  const auto m = mask_sentence(random_tokens(16, 8, rng), 0.25, 8, 8, rng);
  Rng f1(2), f2(2);
  const TokenSeq filled = fill_masked(pm, m.input, m.positions, 0.5, f1);
  CHECK(filled == fill_masked(pm, m.input, m.positions, 0.5, f2));
  for (std::size_t i = 0; i < filled.size(); ++i)
    if (!std::binary_search(m.positions.begin(), m.positions.end(), std::uint32_t(i))) CHECK(filled[i] == m.input[i]);
  for (auto a2 : m.positions) CHECK(filled[a2] < 8);
}

TEST_CASE("early stopping") {
  EarlyStopping s(6);
  const std::vector<double> losses{5, 4, 3, 2.5, 2.6, 2.7, 2.5, 2.9, 3.0, 3.1, 2.8, 2.7};
  std::size_t stopped = 0;
  for (std::size_t e = 0; e < losses.size(); ++e) {
    if (s.update(losses[e])) {
      stopped = e + 1;
      break;
    }
    CHECK(s.epochs_since_improvement() <= s.patience());
  }
  // Last improvement at epoch 4; training stops at epoch 10.
  CHECK(stopped == 10);
  CHECK(s.best_epoch() == 4);
  CHECK(s.best() == 2.5);
}

TEST_CASE("learning rate schedule") {
  OptimizerConfig o;
  o.warmup_steps = 10;
  CHECK(learning_rate_at(o, 5, 100) == doctest::Approx(1.5e-4));
  CHECK(learning_rate_at(o, 10, 100) == doctest::Approx(3e-4));
  CHECK(learning_rate_at(o, 100, 100) == doctest::Approx(3e-5));
  CHECK(learning_rate_at(o, 55, 100) == doctest::Approx(3e-5 + (3e-4 - 3e-5) * 0.5));
  for (std::size_t s = 11; s < 100; ++s) CHECK(learning_rate_at(o, s + 1, 100) <= learning_rate_at(o, s, 100));
}

TEST_CASE("training loop") {
  const ModelConfig c = small_config(8, Objective::kNextWord);
  Rng rng(22);
  // A deterministic cycle is easy to learn.
  std::vector<Sentence> train_set, val_set;
  for (int k = 0; k < 12; ++k) {
    Sentence s(16);
    const auto off = rng.uniform_index(8);
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = TokenId((off + i) % 8);
    (k < 10 ? train_set : val_set).push_back(s);
  }
  TrainConfig tc;
  tc.batch_size = 4;
  tc.max_epochs = 8;
  tc.optimizer.learning_rate = 3e-3;
  tc.optimizer.warmup_steps = 3;
  tc.seed = 4;
  auto init = Params<float>::initialize(c, rng);
  std::vector<EpochRecord> seen;
  const auto r1 = train<float>(init, train_set, val_set, tc, [&](const EpochRecord& e) { seen.push_back(e); });
  CHECK(r1.curve.size() == 8);
  CHECK(seen.size() == 8);
  CHECK(r1.curve.back().validation_loss < 0.5 * r1.curve.front().validation_loss);
  CHECK(r1.best.all_finite());
  CHECK(r1.state.step == 8 * 3);
  const auto r2 = train<float>(init, train_set, val_set, tc);
  for (std::size_t e = 0; e < r1.curve.size(); ++e) {
    CHECK(r1.curve[e].train_loss == r2.curve[e].train_loss);
    CHECK(r1.curve[e].validation_loss == r2.curve[e].validation_loss);
  }
  CHECK_THROWS(train<float>(init, {}, val_set, tc));

  const auto dump = std::filesystem::temp_directory_path() / "ntlab_divergence.json";
  TrainConfig bad = tc;
  bad.optimizer.learning_rate = std::numeric_limits<double>::infinity();
  bad.optimizer.warmup_steps = 0;
  bad.divergence_dump = dump;
  CHECK_THROWS_AS(train<float>(init, train_set, val_set, bad), TrainingDiverged);
  CHECK(std::filesystem::exists(dump));
  std::filesystem::remove(dump);

  const auto csv = std::filesystem::temp_directory_path() / "ntlab_loss.csv";
  write_loss_csv(csv, r1.curve, 8);
  std::ifstream in(csv);
  std::string header;
  std::getline(in, header);
  CHECK(header == "epoch,train_loss,val_loss,train_loss_lnD,val_loss_lnD");
  std::filesystem::remove(csv);
}

TEST_CASE("checkpoint round trip") {
  ModelConfig c = small_config(8, Objective::kMasked);
  c.exclude_self = true;
  const auto p = random_params(c, 23);
  const auto stem = std::filesystem::temp_directory_path() / "ntlab_ckpt_test";
  save_checkpoint(p, stem, R"({"seed":7})");
  const auto q = load_checkpoint(stem.string() + ".bin");
  CHECK(q.config == c);
  auto pv = const_cast<Params<double>&>(p).views();
  auto qv = const_cast<Params<double>&>(q).views();
  for (std::size_t k = 0; k < pv.size(); ++k) CHECK(pv[k] == qv[k]);
  CHECK(checkpoint_manifest(stem) == R"({"seed":7})");
  std::filesystem::remove(stem.string() + ".bin");
  std::filesystem::remove(stem.string() + ".json");
}
