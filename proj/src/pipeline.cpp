#include "ntlab/pipeline.hpp"

#include <cstdlib>
#include <fstream>
#include <json.hpp>
#include <memory>
#include <sstream>
#include <stdexcept>

#include "ntlab/hash.hpp"
#include "ntlab/lm/checkpoint.hpp"
#include "ntlab/predictors.hpp"

namespace ntlab::pipeline {

using nlohmann::ordered_json;

fs::path cache_dir() {
  const char* env = std::getenv("NTLAB_CACHE");
  fs::path dir = env && *env ? fs::path(env) : fs::temp_directory_path() / "ntlab-cache";
  fs::create_directories(dir);
  return dir;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

namespace {

void write_text(const fs::path& path, std::string_view text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

}  // namespace

// ---------------------------------------------------------------------------

std::string CorpusManifest::to_json() const {
  ordered_json j;
  j["n_start"] = n_start;
  j["n_end"] = n_end;
  j["bytes"] = bytes;
  j["word_count"] = word_count;
  j["prime_count"] = prime_count;
  j["squarefree_count"] = squarefree_count;
  j["distinct_words"] = frequency.size();
  j["sha256"] = sha256;
  j["complete"] = complete;
  j["last_completed_n"] = last_completed_n ? ordered_json(*last_completed_n) : ordered_json(nullptr);
  j["frequency"] = frequency;
  return j.dump(1);
}

CorpusManifest CorpusManifest::from_json(std::string_view json) {
  const auto j = nlohmann::json::parse(json);
  CorpusManifest m;
  m.n_start = j.at("n_start");
  m.n_end = j.at("n_end");
  m.bytes = j.at("bytes");
  m.word_count = j.at("word_count");
  m.prime_count = j.at("prime_count");
  m.squarefree_count = j.at("squarefree_count");
  m.frequency = j.at("frequency").get<std::map<std::string, std::uint64_t>>();
  m.sha256 = j.at("sha256");
  m.complete = j.at("complete");
  if (!j.at("last_completed_n").is_null()) m.last_completed_n = j.at("last_completed_n").get<std::uint64_t>();
  return m;
}

fs::path corpus_manifest_path(const fs::path& corpus) { return fs::path(corpus.string() + ".manifest.json"); }

CorpusManifest read_corpus_manifest(const fs::path& corpus) {
  return CorpusManifest::from_json(read_file(corpus_manifest_path(corpus)));
}

CorpusManifest write_corpus(const fs::path& out, std::uint64_t n_start, std::uint64_t n_end,
                            const GenerateOptions& options, bool resume) {
  if (n_start < 2 || n_end < n_start) throw std::invalid_argument("write_corpus: need 2 <= from <= to");
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  const fs::path manifest_path = corpus_manifest_path(out);

  CorpusManifest m;
  m.n_start = n_start;
  m.n_end = n_end;
  std::uint64_t from = n_start;
  bool append = false;
  if (resume && fs::exists(manifest_path) && fs::exists(out)) {
    const CorpusManifest prev = read_corpus_manifest(out);
    if (prev.n_start == n_start && prev.n_end == n_end && prev.complete) return prev;
    if (prev.n_start == n_start && prev.n_end == n_end && prev.last_completed_n && fs::file_size(out) >= prev.bytes) {
      m = prev;
      from = *prev.last_completed_n + 1;
      fs::resize_file(out, prev.bytes);  // drop a partly written segment
      append = true;
    }
  }

  std::ofstream file(out, append ? std::ios::binary | std::ios::app : std::ios::binary | std::ios::trunc);
  if (!file) throw std::runtime_error("cannot open " + out.string());
  const std::uint64_t base_bytes = m.bytes;
  const CorpusManifest base = m;
  bool first_chunk = true;

  auto sink = [&](std::string_view s) {
    if (first_chunk && base_bytes > 0) file.put(' ');
    first_chunk = false;
    file.write(s.data(), std::streamsize(s.size()));
    return bool(file);
  };
  auto apply = [&](const CorpusStats& st, std::uint64_t emitted) {
    m = base;
    m.bytes = base_bytes + emitted + (base_bytes > 0 && emitted > 0 ? 1 : 0);
    m.word_count += st.word_count;
    m.prime_count += st.prime_count;
    m.squarefree_count += st.squarefree_count;
    for (const auto& [w, c] : st.frequency) m.frequency[w] += c;
  };

  if (from <= n_end) {
    GenerateOptions o = options;
    o.on_segment = [&](const SegmentProgress& p, const CorpusStats& st) {
      file.flush();
      apply(st, p.bytes);
      m.last_completed_n = p.last_n;
      write_text(manifest_path, m.to_json());
      if (options.on_segment) options.on_segment(p, st);
    };
    const CorpusStats st = generate_corpus(from, n_end, sink, o);
    file.flush();
    if (!file) throw std::runtime_error("write failed for " + out.string());
    file.close();
    apply(st, fs::file_size(out) - base_bytes - (base_bytes > 0 ? 1 : 0));
  }
  m.last_completed_n = n_end;
  m.complete = true;
  m.bytes = fs::file_size(out);
  m.sha256 = sha256_file(out);
  write_text(manifest_path, m.to_json());
  return m;
}

fs::path cached_corpus(std::uint64_t n_end, unsigned workers) {
  const fs::path path = cache_dir() / ("corpus_2_" + std::to_string(n_end) + ".txt");
  if (fs::exists(path) && fs::exists(corpus_manifest_path(path))) {
    const CorpusManifest m = read_corpus_manifest(path);
    if (m.complete && m.bytes == fs::file_size(path)) return path;
  }
  GenerateOptions o;
  o.workers = workers;
  write_corpus(path, 2, n_end, o, true);
  return path;
}

// ---------------------------------------------------------------------------

std::string RunManifest::sha256_of(const fs::path& p) { return sha256_file(p); }

std::string RunManifest::to_json() const {
  ordered_json j;
  j["command"] = command;
  j["config"] = ordered_json::parse(config_json);
  j["seed"] = seed;
  j["deterministic"] = deterministic;
  j["inputs"] = inputs;
  j["outputs"] = outputs;
  j["wall_time_seconds"] = wall_time_seconds;
  j["tool_version"] = tool_version;
  return j.dump(1);
}

void RunManifest::write(const fs::path& path) const { write_text(path, to_json() + "\n"); }

RunRecorder::RunRecorder(std::string command, std::string config_json, std::uint64_t seed, bool deterministic)
    : start_(std::chrono::steady_clock::now()) {
  m_.command = std::move(command);
  m_.config_json = std::move(config_json);
  m_.seed = seed;
  m_.deterministic = deterministic;
}

void RunRecorder::finish(const fs::path& path) {
  m_.wall_time_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  m_.write(path);
}

// ---------------------------------------------------------------------------

Vocabulary tokenize_corpus(const fs::path& corpus, std::size_t vocab_size, const fs::path& vocab_out) {
  const Vocabulary v = train_bpe(read_file(corpus), vocab_size);
  if (vocab_out.has_parent_path()) fs::create_directories(vocab_out.parent_path());
  v.save(vocab_out);
  return v;
}

SplitFiles split_corpus(const fs::path& corpus, const Vocabulary& vocab, const fs::path& dir) {
  const std::string text = read_file(corpus);
  const auto words = split_words(text);
  const SplitPlan plan = make_split(words.size());
  fs::create_directories(dir);
  SplitFiles f{dir / "train.tok", dir / "validation.tok", dir / "test.tok", dir / "split.json"};
  const auto d = std::uint32_t(vocab.size());
  write_token_file(f.train, d, vocab.encode(region_text(words, plan.train())));
  write_token_file(f.validation, d, vocab.encode(region_text(words, plan.validation())));
  write_token_file(f.test, d, vocab.encode(region_text(words, {plan.test()})));
  write_text(f.plan, plan.to_json());
  return f;
}

markov::TransitionMatrix train_markov(const fs::path& train_tokens, double alpha, const fs::path& out) {
  const TokenFile t = read_token_file(train_tokens);
  markov::TransitionMatrix m = markov::fit(t.tokens, t.vocab_size, alpha);
  m.source_manifest = sha256_file(train_tokens);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  markov::save(m, out);
  return m;
}

std::vector<Sentence> sentences_from(const fs::path& tokens, std::size_t length, std::size_t cap) {
  const TokenFile t = read_token_file(tokens);
  std::vector<Sentence> s = window(t.tokens, length);
  if (cap && s.size() > cap) s.resize(cap);
  return s;
}

namespace {

template <typename Scalar>
LmOutcome run_training(const LmJob& job, const lm::ModelConfig& c, const std::vector<Sentence>& train_set,
                       const std::vector<Sentence>& val_set, const lm::EpochCallback& on_epoch) {
  Rng init = Rng(job.seed).split("init");
  lm::TrainConfig tc = job.train;
  tc.seed = Rng(job.seed).split("train").seed();
  auto p0 = lm::Params<Scalar>::initialize(c, init);
  auto r = lm::train<Scalar>(std::move(p0), train_set, val_set, tc, on_epoch);
  LmOutcome out;
  if constexpr (std::is_same_v<Scalar, double>) {
    out.params = std::move(r.best);
  } else {
    out.params = r.best.template cast<double>();
  }
  out.curve = std::move(r.curve);
  out.best_epoch = r.best_epoch;
  out.stopped_early = r.stopped_early;
  return out;
}

}  // namespace

LmOutcome train_language_model(const LmJob& job, const lm::EpochCallback& on_epoch) {
  const Vocabulary vocab = Vocabulary::load(job.vocab);
  lm::ModelConfig c = lm::ModelConfig::preset(job.preset, vocab.size(), job.objective);
  if (job.context) c.context = job.context;
  const auto train_set = sentences_from(job.train_tokens, c.context, job.max_train_sentences);
  const auto val_set = sentences_from(job.validation_tokens, c.context, job.max_validation_sentences);
  if (train_set.empty() || val_set.empty())
    throw std::invalid_argument("train_language_model: token files shorter than one context window");

  LmOutcome out = job.single_precision ? run_training<float>(job, c, train_set, val_set, on_epoch)
                                       : run_training<double>(job, c, train_set, val_set, on_epoch);
  out.checkpoint = lm::checkpoint_paths(job.out).blob;
  out.loss_csv = fs::path(lm::checkpoint_paths(job.out).blob).replace_extension(".loss.csv");
  ordered_json training;
  training["preset"] = job.preset;
  training["objective"] = std::string(lm::to_string(job.objective));
  training["seed"] = job.seed;
  training["batch_size"] = job.train.batch_size;
  training["max_epochs"] = job.train.max_epochs;
  training["patience"] = job.train.patience;
  training["max_batches_per_epoch"] = job.train.max_batches_per_epoch;
  training["mask_probability"] = job.train.mask_probability;
  training["learning_rate"] = job.train.optimizer.learning_rate;
  training["precision"] = job.single_precision ? "float32" : "float64";
  training["train_sentences"] = train_set.size();
  training["validation_sentences"] = val_set.size();
  training["train_tokens_sha256"] = sha256_file(job.train_tokens);
  training["validation_tokens_sha256"] = sha256_file(job.validation_tokens);
  training["vocab_sha256"] = sha256_file(job.vocab);
  training["best_epoch"] = out.best_epoch;
  training["epochs"] = out.curve.size();
  training["stopped_early"] = out.stopped_early;
  if (job.out.has_parent_path()) fs::create_directories(job.out.parent_path());
  lm::save_checkpoint(out.params, job.out, training.dump());
  lm::write_loss_csv(out.loss_csv, out.curve, vocab.size());
  return out;
}

std::vector<eval::MetricReport> evaluate(const EvalJob& job) {
  const Vocabulary vocab = Vocabulary::load(job.vocab);
  const TokenFile test = read_token_file(job.test_tokens);
  if (test.vocab_size != vocab.size()) throw std::invalid_argument("evaluate: test tokens and vocabulary disagree on D");
  std::vector<eval::MetricReport> all;
  auto append = [&all](std::vector<eval::MetricReport> r) { all.insert(all.end(), r.begin(), r.end()); };

  std::size_t sentence_length = job.sentence_length;
  bool ran_generation = false, ran_masked = false;
  for (const auto& path : job.models) {
    auto params = std::make_shared<const lm::Params<float>>(lm::load_checkpoint(path).cast<float>());
    const auto& c = params->config;
    if (c.vocab != vocab.size()) throw std::invalid_argument("evaluate: model and vocabulary disagree on D");
    const std::string id = "transformer-" + std::string(lm::to_string(c.objective));
    const eval::Predictor model = eval::make_lm_predictor(params, id);
    eval::GridOptions g = job.grid;
    if (c.objective == lm::Objective::kNextWord) {
      if (!job.generation) continue;
      if (g.prompt_length == 0) g.prompt_length = c.context / 2;
      if (g.continuation_length == 0) g.continuation_length = c.context - g.prompt_length;
      append(eval::evaluate_generation(model, vocab, test.tokens, g));
      ran_generation = true;
    } else {
      if (!job.masked) continue;
      sentence_length = c.context;
      append(eval::evaluate_masked(model, vocab, test.tokens, c.context, g));
      ran_masked = true;
    }
  }
  if (job.baseline) {
    auto chain = std::make_shared<const markov::TransitionMatrix>(markov::load(*job.baseline));
    if (std::size_t(chain->size()) != vocab.size()) throw std::invalid_argument("evaluate: baseline and vocabulary disagree on D");
    const eval::Predictor mc = eval::make_markov_predictor(chain);
    eval::GridOptions g = job.grid;
    if (g.prompt_length == 0) g.prompt_length = sentence_length / 2;
    if (g.continuation_length == 0) g.continuation_length = sentence_length - g.prompt_length;
    if (job.generation && (ran_generation || !ran_masked)) append(eval::evaluate_generation(mc, vocab, test.tokens, g));
    if (job.masked) append(eval::evaluate_masked(mc, vocab, test.tokens, sentence_length, g));
  }
  if (all.empty()) throw std::invalid_argument("evaluate: nothing to evaluate (check models and protocols)");
  eval::write_reports(all, job.out_dir);
  return all;
}

}  // namespace ntlab::pipeline
