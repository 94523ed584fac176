#include "ntlab/markov.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <limits>
#include <stdexcept>

#include "ntlab/sampling.hpp"

namespace ntlab::markov {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

Eigen::MatrixXd bigram_counts(std::span<const TokenId> stream, std::size_t vocab_size) {
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(Eigen::Index(vocab_size), Eigen::Index(vocab_size));
  for (std::size_t i = 0; i < stream.size(); ++i) {
    if (stream[i] >= vocab_size) throw std::invalid_argument("markov: token id " + std::to_string(stream[i]) + " >= D");
    if (i > 0) c(stream[i - 1], stream[i]) += 1.0;
  }
  return c;
}

TransitionMatrix fit(std::span<const TokenId> stream, std::size_t vocab_size, double alpha) {
  if (stream.size() < 2) throw std::invalid_argument("markov::fit: need at least two tokens");
  if (alpha < 0) throw std::invalid_argument("markov::fit: alpha must be >= 0");
  const auto d = Eigen::Index(vocab_size);
  TransitionMatrix m;
  m.alpha = alpha;
  m.phi = bigram_counts(stream, vocab_size).array() + alpha;
  for (Eigen::Index j = 0; j < d; ++j) {
    const double row = m.phi.row(j).sum();
    if (row > 0)
      m.phi.row(j) /= row;
    else
      m.phi.row(j).setConstant(1.0 / double(d));
  }
  m.unigram = Eigen::VectorXd::Constant(d, alpha);
  for (TokenId t : stream) m.unigram(t) += 1.0;
  m.unigram /= m.unigram.sum();
  return m;
}

TransitionMatrix fit_adam(std::span<const TokenId> stream, std::size_t vocab_size, const AdamFitOptions& o) {
  if (stream.size() < 2) throw std::invalid_argument("markov::fit_adam: need at least two tokens");
  const auto d = Eigen::Index(vocab_size);
  const Eigen::MatrixXd counts = bigram_counts(stream, vocab_size);
  const Eigen::VectorXd row_totals = counts.rowwise().sum();
  const double n = counts.sum();

  Eigen::MatrixXd logits = Eigen::MatrixXd::Zero(d, d);
  Eigen::MatrixXd m1 = Eigen::MatrixXd::Zero(d, d);
  Eigen::MatrixXd m2 = Eigen::MatrixXd::Zero(d, d);
  Eigen::MatrixXd probs(d, d);
  auto row_softmax = [&] {
    for (Eigen::Index j = 0; j < d; ++j) {
      const Eigen::RowVectorXd e = (logits.row(j).array() - logits.row(j).maxCoeff()).exp();
      probs.row(j) = e / e.sum();
    }
  };
  for (std::size_t step = 1; step <= o.steps; ++step) {
    row_softmax();
    // d/dlogits of mean NLL: (n_j * p_j - c_j) / n.
    const Eigen::MatrixXd grad = (probs.array().colwise() * row_totals.array() - counts.array()) / n;
    m1 = o.beta1 * m1 + (1 - o.beta1) * grad;
    m2 = o.beta2 * m2 + (1 - o.beta2) * grad.cwiseAbs2();
    const double c1 = 1 - std::pow(o.beta1, double(step));
    const double c2 = 1 - std::pow(o.beta2, double(step));
    logits.array() -= o.learning_rate * (m1.array() / c1) / ((m2.array() / c2).sqrt() + o.epsilon);
  }
  row_softmax();
  TransitionMatrix m = fit(stream, vocab_size, 0.0);
  m.phi = probs;
  return m;
}

double nll(const TransitionMatrix& m, std::span<const TokenId> stream) {
  if (stream.size() < 2) throw std::invalid_argument("markov::nll: need at least two tokens");
  double total = 0.0;
  for (std::size_t i = 1; i < stream.size(); ++i) {
    if (stream[i] >= std::size_t(m.size()) || stream[i - 1] >= std::size_t(m.size()))
      throw std::invalid_argument("markov::nll: token id out of range");
    const double p = m.phi(stream[i - 1], stream[i]);
    if (p <= 0) return std::numeric_limits<double>::infinity();
    total -= std::log(p);
  }
  return total / double(stream.size() - 1);
}

Eigen::VectorXd successor_distribution(const TransitionMatrix& m, TokenId prev, double temperature) {
  const Eigen::VectorXd logp = m.phi.row(prev).transpose().array().log();
  return softmax_t(logp, temperature);
}

TokenSeq generate(const TransitionMatrix& m, std::span<const TokenId> prompt, std::size_t length, double temperature,
                  Rng& rng) {
  if (prompt.empty()) throw std::invalid_argument("markov::generate: empty prompt");
  TokenSeq out;
  out.reserve(length);
  TokenId prev = prompt.back();
  for (std::size_t k = 0; k < length; ++k) {
    const Eigen::VectorXd logp = m.phi.row(prev).transpose().array().log();
    prev = TokenId(sample_with_temperature(logp, temperature, rng));
    out.push_back(prev);
  }
  return out;
}

namespace {

constexpr char kMagic[8] = {'N', 'T', 'M', 'A', 'R', 'K', 'V', '1'};

}  // namespace

void save(const TransitionMatrix& m, const std::filesystem::path& path) {
  nlohmann::ordered_json header;
  header["D"] = m.size();
  header["alpha"] = m.alpha;
  header["source_manifest"] = m.source_manifest;
  const std::string h = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(kMagic, sizeof kMagic);
  const std::uint64_t len = h.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(h.data(), std::streamsize(h.size()));
  const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m.phi;
  out.write(reinterpret_cast<const char*>(rm.data()), std::streamsize(rm.size() * sizeof(double)));
  out.write(reinterpret_cast<const char*>(m.unigram.data()), std::streamsize(m.unigram.size() * sizeof(double)));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

TransitionMatrix load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0) throw std::runtime_error("not a Markov matrix file: " + path.string());
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  std::string h(len, '\0');
  in.read(h.data(), std::streamsize(len));
  const auto header = nlohmann::json::parse(h);
  TransitionMatrix m;
  const auto d = header.at("D").get<Eigen::Index>();
  m.alpha = header.at("alpha").get<double>();
  m.source_manifest = header.value("source_manifest", "");
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(d, d);
  in.read(reinterpret_cast<char*>(rm.data()), std::streamsize(rm.size() * sizeof(double)));
  m.phi = rm;
  m.unigram.resize(d);
  in.read(reinterpret_cast<char*>(m.unigram.data()), std::streamsize(d * sizeof(double)));
  if (!in) throw std::runtime_error("Markov matrix file truncated: " + path.string());
  return m;
}

}  // namespace ntlab::markov
