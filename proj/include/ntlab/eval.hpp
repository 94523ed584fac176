#pragma once

// Metrics comparing generated and true continuations at word and token level,
// and the temperature / masking-probability evaluation grid.

#include <Eigen/Dense>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ntlab/dataset.hpp"
#include "ntlab/rng.hpp"
#include "ntlab/tokenizer.hpp"

namespace ntlab::eval {

using Words = std::vector<std::string>;

// Placeholder labels used when one sequence runs out before the other.
inline constexpr std::string_view kMiss = "<miss>";          // predicted side, prediction too short
inline constexpr std::string_view kOverflow = "<overflow>";  // true side, prediction too long
inline constexpr std::string_view kInvalid = "<invalid>";     // predicted fragment that is not a Dyck word
inline constexpr std::string_view kOther = "<other>";         // valid word outside the label set

/// Words of the continuation: the text after the prompt's last space, split
/// on single spaces, with the trailing (possibly cut) fragment dropped. Empty
/// fragments from repeated spaces are kept; they are invalid words.
Words continuation_words(std::string_view prompt_text, std::string_view full_text);

/// Position-wise pairing of predicted and true words.
struct WordAlignment {
  Words predicted;
  Words truth;
  std::vector<bool> predicted_valid;
  std::size_t invalid_count = 0;

  std::size_t pairs() const { return std::min(predicted.size(), truth.size()); }
  std::size_t positions() const { return std::max(predicted.size(), truth.size()); }
  /// True positions with no prediction.
  std::size_t missing() const { return truth.size() - pairs(); }
  /// Predicted words beyond the true length.
  std::size_t overflow() const { return predicted.size() - pairs(); }
  /// Word at position a of the full alignment, with kMiss / kOverflow fill.
  std::string_view predicted_at(std::size_t a) const { return a < predicted.size() ? std::string_view(predicted[a]) : kMiss; }
  std::string_view truth_at(std::size_t a) const { return a < truth.size() ? std::string_view(truth[a]) : kOverflow; }
};

WordAlignment align(Words predicted, Words truth);

/// (1/l_true) * number of positions with equal words. Throws for empty truth.
double word_accuracy(const Words& predicted, const Words& truth);

/// KL(f_true || f_pred) over the union of observed words, with `epsilon`
/// added to every count in both distributions. Defaults to 1 / l_true.
double word_kl(const Words& predicted, const Words& truth, std::optional<double> epsilon = std::nullopt);

struct Prf1 {
  std::size_t tp = 0, fp = 0, fn = 0;
  std::optional<double> precision, recall, f1;
};

/// Counts over every position of the alignment (missing and overflow
/// positions included). Precision needs TP + FP > 0 and recall TP + FN > 0;
/// F1 = 2TP / (2TP + FP + FN), undefined only when the word occurs nowhere.
Prf1 prf1(const Words& predicted, const Words& truth, std::string_view word);

struct ConfusionMatrix {
  std::vector<std::string> labels;  // top-k words, then kOther, kInvalid, kMiss, kOverflow
  Eigen::MatrixXd values;           // rows: true label, columns: predicted label
  std::size_t index_of(std::string_view label) const;
};

/// Entry (w, w') = #positions with true w and predicted w', divided by the
/// number of aligned positions max(l_pred, l_true). Entries sum to 1.
ConfusionMatrix confusion_matrix(const Words& predicted, const Words& truth, const std::vector<std::string>& top_words);

/// The k most frequent words of `truth`, ties in string order.
std::vector<std::string> top_words(const Words& truth, std::size_t k);

struct PrimeProfile {
  std::map<std::string, double> predicted_at_true_prime;  // sums to 1 when defined
  std::map<std::string, double> true_at_predicted_prime;
  std::size_t true_prime_positions = 0;
  std::size_t predicted_prime_positions = 0;
};

PrimeProfile prime_error_profile(const Words& predicted, const Words& truth);

/// Fraction of matching ids, over `positions` when given, else every
/// position. Throws on length mismatch or an empty position set.
double token_accuracy(std::span<const TokenId> predicted, std::span<const TokenId> truth,
                      std::optional<std::span<const std::uint32_t>> positions = std::nullopt);

// ---------------------------------------------------------------------------
// Grid evaluation

/// A model under evaluation. `continue_tokens` samples a continuation of a
/// prompt; `fill_masked` returns the sentence with masked positions filled.
struct Predictor {
  std::string id;
  std::function<TokenSeq(std::span<const TokenId> prompt, std::size_t count, double temperature, Rng& rng)> continue_tokens;
  std::function<TokenSeq(const MaskedSentence& masked, double temperature, Rng& rng)> fill_masked;
};

struct WordTableRow {
  std::string word;
  std::size_t true_count = 0;
  std::size_t tp = 0, fp = 0, fn = 0;
  // Means over the sequences where each value is defined.
  std::optional<double> precision, recall, f1;
};

/// Results of one grid cell.
struct MetricReport {
  std::string model;
  double temperature = 1.0;
  std::optional<double> mask_probability;
  std::size_t m = 0;

  std::vector<double> word_accuracy, word_kl, token_accuracy;  // per sequence
  std::vector<double> token_accuracy_masked;                   // masked objective only
  std::size_t invalid_words = 0;
  std::vector<WordTableRow> words;  // ordered by true frequency
  ConfusionMatrix confusion;        // mean of per-sequence matrices
  PrimeProfile prime_profile;       // pooled over sequences

  static double mean(const std::vector<double>& v);
};

struct GridOptions {
  std::vector<double> temperatures{0.1, 0.3, 0.5, 0.7, 1.0};
  std::vector<double> mask_probabilities{0.1, 0.2, 0.3, 0.4, 0.5};
  std::size_t m = 32;
  std::size_t prompt_length = 1024;
  std::size_t continuation_length = 1024;
  std::size_t top_k = 10;
  std::uint64_t seed = 0;
  unsigned workers = 1;
};

/// Next-word protocol: the test stream is cut into windows of
/// prompt_length + continuation_length tokens; the first m windows are used.
/// One report per temperature.
std::vector<MetricReport> evaluate_generation(const Predictor& model, const Vocabulary& vocab,
                                              std::span<const TokenId> test_tokens, const GridOptions& options);

/// Masked protocol: the first m test sentences of length `sentence_length`
/// are masked once per p_m and filled at every temperature.
std::vector<MetricReport> evaluate_masked(const Predictor& model, const Vocabulary& vocab,
                                          std::span<const TokenId> test_tokens, std::size_t sentence_length,
                                          const GridOptions& options);

/// Writes fig2_accuracy.csv, fig2_kl.csv, fig4_prf1.csv, fig5_confusion.csv,
/// fig6_prime_profile.csv, fig7_grid.csv and report.json into `dir`. Column
/// schemas are listed in the README.
void write_reports(const std::vector<MetricReport>& reports, const std::filesystem::path& dir);

std::string report_json(const std::vector<MetricReport>& reports);

}  // namespace ntlab::eval
