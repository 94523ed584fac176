#pragma once

// First-order Markov chain over tokens.

#include <Eigen/Dense>
#include <filesystem>
#include <span>
#include <string>

#include "ntlab/rng.hpp"
#include "ntlab/tokenizer.hpp"

namespace ntlab::markov {

/// Row-stochastic D x D matrix: phi(j, i) = P(next = i | previous = j).
struct TransitionMatrix {
  Eigen::MatrixXd phi;
  Eigen::VectorXd unigram;  // distribution of a first token
  double alpha = 0.0;
  std::string source_manifest;

  Eigen::Index size() const { return phi.rows(); }
};

/// Bigram counts plus add-alpha smoothing. A row with no observations (alpha
/// = 0) is uniform. Throws std::invalid_argument for streams shorter than 2
/// tokens or ids >= D.
TransitionMatrix fit(std::span<const TokenId> stream, std::size_t vocab_size, double alpha);

/// Raw D x D bigram counts.
Eigen::MatrixXd bigram_counts(std::span<const TokenId> stream, std::size_t vocab_size);

struct AdamFitOptions {
  double learning_rate = 0.1;
  std::size_t steps = 3000;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-12;
};

/// Minimizes the average negative log-likelihood over row-softmax logits with
/// Adam. Converges to the alpha = 0 count solution.
TransitionMatrix fit_adam(std::span<const TokenId> stream, std::size_t vocab_size, const AdamFitOptions& options = {});

/// Mean of -ln phi(t[i-1], t[i]) in nats per predicted token; +inf when an
/// observed transition has probability 0.
double nll(const TransitionMatrix& m, std::span<const TokenId> stream);

/// Samples `length` successors of the last prompt token from
/// softmax(ln phi(prev, .) / T). T = 1 reproduces the chain itself.
TokenSeq generate(const TransitionMatrix& m, std::span<const TokenId> prompt, std::size_t length, double temperature,
                  Rng& rng);

/// Successor distribution softmax(ln phi(prev, .) / T).
Eigen::VectorXd successor_distribution(const TransitionMatrix& m, TokenId prev, double temperature);

// Binary format: 8-byte magic, u64 header length, JSON header
// {D, alpha, source_manifest}, then D*D row-major and D unigram float64 (LE).
void save(const TransitionMatrix& m, const std::filesystem::path& path);
TransitionMatrix load(const std::filesystem::path& path);

}  // namespace ntlab::markov
