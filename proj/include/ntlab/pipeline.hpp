#pragma once

// Artifact-producing stages shared by the CLI and the acceptance suite.
// Every stage writes its outputs plus a run manifest referencing each input
// and output by SHA-256.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ntlab/corpus.hpp"
#include "ntlab/eval.hpp"
#include "ntlab/lm/config.hpp"
#include "ntlab/lm/train.hpp"
#include "ntlab/markov.hpp"
#include "ntlab/tokenizer.hpp"

namespace ntlab::pipeline {

inline constexpr std::string_view kToolVersion = "ntlab 0.1.0";

namespace fs = std::filesystem;

/// Cache directory: $NTLAB_CACHE if set, else <tmp>/ntlab-cache. Created on demand.
fs::path cache_dir();

// ---------------------------------------------------------------------------
// Corpus files

/// Sidecar PATH.manifest.json of a corpus file.
struct CorpusManifest {
  std::uint64_t n_start = 0, n_end = 0;
  std::uint64_t bytes = 0;
  std::uint64_t word_count = 0, prime_count = 0, squarefree_count = 0;
  std::map<std::string, std::uint64_t> frequency;
  std::string sha256;  // empty while incomplete
  bool complete = false;
  std::optional<std::uint64_t> last_completed_n;

  std::string to_json() const;
  static CorpusManifest from_json(std::string_view json);
};

fs::path corpus_manifest_path(const fs::path& corpus);
CorpusManifest read_corpus_manifest(const fs::path& corpus);

/// Streams the words of [n_start, n_end] to `out`, updating the manifest after
/// every segment. With `resume`, an incomplete manifest for the same range is
/// continued from its last completed integer.
CorpusManifest write_corpus(const fs::path& out, std::uint64_t n_start, std::uint64_t n_end,
                            const GenerateOptions& options = {}, bool resume = false);

/// Corpus for [2, n_end] inside cache_dir(), generated when missing or stale.
fs::path cached_corpus(std::uint64_t n_end, unsigned workers = 1);

std::string read_file(const fs::path& path);

// ---------------------------------------------------------------------------
// Run manifests

struct RunManifest {
  std::string command;
  std::string config_json = "{}";  // option snapshot, reusable as --config
  std::uint64_t seed = 0;
  bool deterministic = false;
  std::map<std::string, std::string> inputs, outputs;  // path -> sha256
  double wall_time_seconds = 0;
  std::string tool_version{kToolVersion};

  void add_input(const fs::path& p) { inputs[p.string()] = sha256_of(p); }
  void add_output(const fs::path& p) { outputs[p.string()] = sha256_of(p); }
  std::string to_json() const;
  void write(const fs::path& path) const;

 private:
  static std::string sha256_of(const fs::path& p);
};

/// Times a stage and writes its manifest to `path` on finish().
class RunRecorder {
 public:
  RunRecorder(std::string command, std::string config_json, std::uint64_t seed, bool deterministic);
  RunManifest& manifest() { return m_; }
  void finish(const fs::path& path);

 private:
  RunManifest m_;
  std::chrono::steady_clock::time_point start_;
};

// ---------------------------------------------------------------------------
// Stages

/// BPE vocabulary of size D trained on the whole corpus file.
Vocabulary tokenize_corpus(const fs::path& corpus, std::size_t vocab_size, const fs::path& vocab_out);

struct SplitFiles {
  fs::path train, validation, test, plan;
};

/// Ten-chunk split of the corpus words, each region encoded with `vocab`.
/// Writes train.tok, validation.tok, test.tok and split.json into `dir`.
SplitFiles split_corpus(const fs::path& corpus, const Vocabulary& vocab, const fs::path& dir);

markov::TransitionMatrix train_markov(const fs::path& train_tokens, double alpha, const fs::path& out);

struct LmJob {
  std::string preset = "desk";
  lm::Objective objective = lm::Objective::kNextWord;
  std::size_t context = 0;  // 0 keeps the preset's context
  fs::path vocab, train_tokens, validation_tokens;
  fs::path out;  // checkpoint stem; the loss curve goes to STEM.loss.csv
  lm::TrainConfig train;
  /// Caps on the number of windows used (0 = all).
  std::size_t max_train_sentences = 0, max_validation_sentences = 0;
  bool single_precision = true;
  std::uint64_t seed = 0;
};

struct LmOutcome {
  lm::Params<double> params;
  std::vector<lm::EpochRecord> curve;
  std::size_t best_epoch = 0;
  bool stopped_early = false;
  fs::path checkpoint, loss_csv;
};

LmOutcome train_language_model(const LmJob& job, const lm::EpochCallback& on_epoch = {});

/// Non-overlapping windows of `length` tokens from a token file, optionally capped.
std::vector<Sentence> sentences_from(const fs::path& tokens, std::size_t length, std::size_t cap = 0);

struct EvalJob {
  std::vector<fs::path> models;  // checkpoints
  std::optional<fs::path> baseline;  // Markov matrix
  fs::path vocab, test_tokens, out_dir;
  eval::GridOptions grid;
  bool generation = true;  // next-word protocol for NWP models and the baseline
  bool masked = false;     // masked protocol for MLM models and the baseline
  /// Sentence length for the masked protocol when no MLM model fixes it.
  std::size_t sentence_length = 256;
};

/// Runs every requested protocol and writes the report files into out_dir.
std::vector<eval::MetricReport> evaluate(const EvalJob& job);

}  // namespace ntlab::pipeline
