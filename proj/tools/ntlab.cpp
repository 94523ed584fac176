// ntlab: command-line driver for corpus generation, tokenization, training and
// evaluation. Every subcommand writes a run manifest next to its outputs.

#include <CLI11.hpp>
#include <iostream>
#include <json.hpp>
#include <memory>
#include <sstream>

#include "ntlab/hash.hpp"
#include "ntlab/lm/checkpoint.hpp"
#include "ntlab/lm/generate.hpp"
#include "ntlab/pipeline.hpp"

using namespace ntlab;
using namespace ntlab::pipeline;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

/// Reads JSON configuration: {"option": value, "subcommand": {...}}. A run
/// manifest is accepted too; its "config" object is used.
class JsonConfig : public CLI::Config {
 public:
  std::string to_config(const CLI::App*, bool, bool, std::string) const override { return "{}"; }

  std::vector<CLI::ConfigItem> from_config(std::istream& in) const override {
    json j;
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw CLI::ConversionError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw CLI::ConversionError("config must be a JSON object");
    if (j.contains("command") && j.contains("config")) j = j.at("config");
    std::vector<CLI::ConfigItem> items;
    collect(j, {}, items);
    return items;
  }

 private:
  static std::string scalar(const json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    return v.dump();
  }

  static void collect(const json& j, const std::vector<std::string>& parents, std::vector<CLI::ConfigItem>& out) {
    for (const auto& [key, value] : j.items()) {
      if (value.is_object()) {
        auto p = parents;
        p.push_back(key);
        collect(value, p, out);
        continue;
      }
      CLI::ConfigItem item;
      item.parents = parents;
      item.name = key;
      if (value.is_array()) {
        for (const auto& v : value) item.inputs.push_back(scalar(v));
      } else {
        item.inputs.push_back(scalar(value));
      }
      out.push_back(std::move(item));
    }
  }
};

struct Globals {
  unsigned workers = 1;
  bool deterministic = false;
  std::uint64_t seed = 0;
  unsigned effective_workers() const { return deterministic ? 1 : std::max(1u, workers); }
};

/// Option values of the app and the chosen subcommand, in config-file form.
std::string snapshot(const CLI::App& app, const CLI::App& sub) {
  auto options_of = [](const CLI::App& a) {
    ordered_json j = ordered_json::object();
    for (const CLI::Option* o : a.get_options()) {
      const std::string name = o->get_single_name();
      if (name == "help" || name == "config" || name.empty()) continue;
      if (o->get_expected_min() == 0) {
        j[name] = o->count() > 0;
      } else if (o->count() > 0) {
        const auto& r = o->results();
        if (o->get_expected_max() > 1 || r.size() > 1) {
          j[name] = r;
        } else {
          j[name] = r.front();
        }
      } else if (!o->get_default_str().empty()) {
        j[name] = o->get_default_str();
      }
    }
    return j;
  };
  ordered_json j = options_of(app);
  j[sub.get_name()] = options_of(sub);
  return j.dump();
}

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    std::size_t used = 0;
    const double v = std::stod(item, &used);
    if (used != item.size()) throw std::invalid_argument("bad number '" + item + "' in list '" + s + "'");
    out.push_back(v);
  }
  if (out.empty()) throw std::invalid_argument("empty list");
  return out;
}

std::vector<std::string> split_phrase(const std::string& s) {
  std::vector<std::string> out;
  for (auto w : split_words(s)) out.emplace_back(w);
  return out;
}

void emit_error(std::string_view kind, std::string_view message) {
  ordered_json j;
  j["error"] = kind;
  j["message"] = message;
  std::cerr << j.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ntlab: arithmetic-text laboratory"};
  app.config_formatter(std::make_shared<JsonConfig>());
  app.set_config("--config", "", "JSON config file or run manifest; command-line flags take precedence");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.require_subcommand(1);

  Globals g;
  app.add_option("--workers", g.workers, "worker threads")->capture_default_str();
  app.add_flag("--deterministic", g.deterministic, "force serial execution");
  app.add_option("--seed", g.seed, "run seed")->capture_default_str();

  // gen
  std::uint64_t gen_from = 2, gen_to = 0, segment = 1u << 20;
  std::string gen_out;
  bool resume = false;
  auto* gen = app.add_subcommand("gen", "write the corpus for an integer range");
  gen->add_option("--from", gen_from)->capture_default_str();
  gen->add_option("--to", gen_to)->required();
  gen->add_option("--out", gen_out)->required();
  gen->add_option("--segment-size", segment)->capture_default_str();
  gen->add_flag("--resume", resume, "continue an interrupted run");

  // stats
  std::string stats_corpus, stats_out;
  std::vector<std::uint64_t> growth_points;
  auto* stats = app.add_subcommand("stats", "word statistics of a corpus file");
  stats->add_option("--corpus", stats_corpus)->required()->check(CLI::ExistingFile);
  stats->add_option("--growth", growth_points, "dictionary-size checkpoints n")->delimiter(',');
  stats->add_option("--out", stats_out, "also write the JSON here");

  // phrase
  std::string phrase_corpus, phrase_text;
  auto* phrase = app.add_subcommand("phrase", "count consecutive occurrences of a word phrase");
  phrase->add_option("--corpus", phrase_corpus)->required()->check(CLI::ExistingFile);
  phrase->add_option("--phrase", phrase_text)->required();

  // tokenize
  std::string tok_corpus, tok_out, tok_tokens;
  std::size_t vocab_size = 64;
  auto* tokenize = app.add_subcommand("tokenize", "train a BPE vocabulary");
  tokenize->add_option("--corpus", tok_corpus)->required()->check(CLI::ExistingFile);
  tokenize->add_option("--vocab-size", vocab_size)->capture_default_str();
  tokenize->add_option("--out", tok_out)->required();
  tokenize->add_option("--tokens", tok_tokens, "also encode the whole corpus to this token file");

  // split
  std::string split_corpus_path, split_vocab, split_dir = "split";
  auto* split = app.add_subcommand("split", "train / validation / test token files");
  split->add_option("--corpus", split_corpus_path)->required()->check(CLI::ExistingFile);
  split->add_option("--vocab", split_vocab)->required()->check(CLI::ExistingFile);
  split->add_option("--out-dir", split_dir)->capture_default_str();

  // train-markov
  std::string mc_train, mc_out = "markov.bin";
  double alpha = 0.5;
  auto* train_mc = app.add_subcommand("train-markov", "fit the Markov baseline");
  train_mc->add_option("--train", mc_train)->required()->check(CLI::ExistingFile);
  train_mc->add_option("--alpha", alpha)->capture_default_str();
  train_mc->add_option("--out", mc_out)->capture_default_str();

  // train-lm
  LmJob job;
  std::string objective = "nwp", lm_vocab, lm_split = "split", lm_train, lm_val, lm_out;
  bool double_precision = false;
  auto* train_lm = app.add_subcommand("train-lm", "train the transformer");
  train_lm->add_option("--objective", objective)->check(CLI::IsMember({"nwp", "mlm"}))->capture_default_str();
  train_lm->add_option("--preset", job.preset)->check(CLI::IsMember({"desk", "paper"}))->capture_default_str();
  train_lm->add_option("--vocab", lm_vocab)->required()->check(CLI::ExistingFile);
  train_lm->add_option("--split-dir", lm_split, "directory with train.tok and validation.tok")->capture_default_str();
  train_lm->add_option("--train", lm_train, "overrides SPLIT_DIR/train.tok");
  train_lm->add_option("--validation", lm_val, "overrides SPLIT_DIR/validation.tok");
  train_lm->add_option("--out", lm_out, "checkpoint stem (default model_<objective>)");
  train_lm->add_option("--context", job.context, "0 keeps the preset")->capture_default_str();
  train_lm->add_option("--batch-size", job.train.batch_size)->capture_default_str();
  train_lm->add_option("--max-epochs", job.train.max_epochs)->capture_default_str();
  train_lm->add_option("--patience", job.train.patience)->capture_default_str();
  train_lm->add_option("--max-batches", job.train.max_batches_per_epoch, "per epoch, 0 = all")->capture_default_str();
  train_lm->add_option("--lr", job.train.optimizer.learning_rate)->capture_default_str();
  train_lm->add_option("--warmup", job.train.optimizer.warmup_steps)->capture_default_str();
  train_lm->add_option("--mask-probability", job.train.mask_probability)->capture_default_str();
  train_lm->add_option("--max-train-sentences", job.max_train_sentences)->capture_default_str();
  train_lm->add_option("--max-validation-sentences", job.max_validation_sentences)->capture_default_str();
  train_lm->add_flag("--double", double_precision, "train in float64");

  // sample
  std::string s_model, s_vocab, s_prompt, s_attention;
  std::size_t s_count = 64, s_query = 0;
  double s_temperature = 1.0;
  auto* sample = app.add_subcommand("sample", "continue a prompt or export attention weights");
  sample->add_option("--model", s_model)->required();
  sample->add_option("--vocab", s_vocab)->required()->check(CLI::ExistingFile);
  sample->add_option("--prompt", s_prompt)->required();
  sample->add_option("--count", s_count)->capture_default_str();
  sample->add_option("--temperature", s_temperature)->capture_default_str();
  sample->add_option("--attention-csv", s_attention, "write attention weights of --query instead");
  sample->add_option("--query", s_query)->capture_default_str();

  // eval and grid
  std::vector<std::string> e_models;
  std::string e_baseline, e_vocab, e_test = "split/test.tok", e_out = "reports";
  std::string temps = "0.1,0.3,0.5,0.7,1.0", mask_probs = "0.1,0.2,0.3,0.4,0.5";
  eval::GridOptions grid_opts;
  grid_opts.prompt_length = 0;
  grid_opts.continuation_length = 0;
  auto* ev = app.add_subcommand("eval", "next-word metrics over a temperature sweep");
  auto* grid = app.add_subcommand("grid", "masked token accuracy over the (p_m, T) lattice");
  for (auto* sub : {ev, grid}) {
    sub->add_option("--model", e_models, "checkpoint (repeatable)");
    sub->add_option("--baseline", e_baseline, "Markov matrix");
    sub->add_option("--vocab", e_vocab)->required()->check(CLI::ExistingFile);
    sub->add_option("--test", e_test)->capture_default_str();
    sub->add_option("--temps", temps)->capture_default_str();
    sub->add_option("--m", grid_opts.m)->capture_default_str();
    sub->add_option("--out-dir", e_out)->capture_default_str();
  }
  ev->add_option("--prompt-length", grid_opts.prompt_length, "0 = half the context")->capture_default_str();
  ev->add_option("--continuation-length", grid_opts.continuation_length, "0 = rest of the context")
      ->capture_default_str();
  ev->add_option("--top-k", grid_opts.top_k)->capture_default_str();
  std::size_t grid_length = 256;
  grid->add_option("--mask-probs", mask_probs)->capture_default_str();
  grid->add_option("--sentence-length", grid_length, "for a baseline-only grid")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ConfigError& e) {
    std::string what = e.what();
    if (const auto at = what.find("not able to parse "); at != std::string::npos)
      what = "unknown config key " + what.substr(at + 18);
    emit_error("config", what);
    return 2;
  } catch (const CLI::ParseError& e) {
    emit_error("usage", e.what());
    return 2;
  }

  const CLI::App* sub = app.get_subcommands().front();
  const std::string config = snapshot(app, *sub);
  RunRecorder rec(sub->get_name(), config, g.seed, g.deterministic);
  RunManifest& man = rec.manifest();
  const unsigned workers = g.effective_workers();

  try {
    if (gen->parsed()) {
      GenerateOptions o;
      o.segment_size = segment;
      o.workers = workers;
      const CorpusManifest m = write_corpus(gen_out, gen_from, gen_to, o, resume);
      man.add_output(gen_out);
      man.add_output(corpus_manifest_path(gen_out));
      rec.finish(gen_out + ".run.json");
      std::cout << "wrote " << gen_out << " (" << m.word_count << " words, " << m.bytes << " bytes)\n";
    } else if (stats->parsed()) {
      const std::string text = read_file(stats_corpus);
      const auto words = split_words(text);
      ordered_json j;
      std::map<std::string, std::uint64_t> freq;
      std::uint64_t primes = 0, squarefree = 0;
      int run = 0, longest = 0;
      for (auto w : words) {
        freq[std::string(w)]++;
        primes += w == "10";
        const bool sf = is_squarefree_form(w);
        squarefree += sf;
        run = sf ? run + 1 : 0;
        longest = std::max(longest, run);
      }
      j["words"] = words.size();
      j["distinct_words"] = freq.size();
      j["prime_words"] = primes;
      j["squarefree_words"] = squarefree;
      j["longest_squarefree_run"] = longest;
      std::vector<std::pair<std::string, std::uint64_t>> top(freq.begin(), freq.end());
      std::stable_sort(top.begin(), top.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
      if (top.size() > 20) top.resize(20);
      j["top_words"] = top;
      if (!growth_points.empty()) {
        ordered_json gj = ordered_json::array();
        for (const auto& p : dictionary_growth(words, growth_points)) gj.push_back({{"n", p.n}, {"distinct", p.distinct}});
        j["dictionary_growth"] = gj;
      }
      std::cout << j.dump(1) << "\n";
      man.add_input(stats_corpus);
      if (!stats_out.empty()) {
        std::ofstream(stats_out) << j.dump(1) << "\n";
        man.add_output(stats_out);
        rec.finish(stats_out + ".run.json");
      }
    } else if (phrase->parsed()) {
      PhraseCounter pc(split_phrase(phrase_text));
      const std::string text = read_file(phrase_corpus);
      for (auto w : split_words(text)) pc.push(w);
      std::cout << pc.count() << "\n";
    } else if (tokenize->parsed()) {
      const Vocabulary v = tokenize_corpus(tok_corpus, vocab_size, tok_out);
      man.add_input(tok_corpus);
      man.add_output(tok_out);
      if (!tok_tokens.empty()) {
        write_token_file(tok_tokens, std::uint32_t(v.size()), v.encode(read_file(tok_corpus)));
        man.add_output(tok_tokens);
      }
      rec.finish(tok_out + ".run.json");
      std::cout << "wrote " << tok_out << " (D = " << v.size() << ")\n";
    } else if (split->parsed()) {
      const SplitFiles f = split_corpus(split_corpus_path, Vocabulary::load(split_vocab), split_dir);
      man.add_input(split_corpus_path);
      man.add_input(split_vocab);
      for (const auto& p : {f.train, f.validation, f.test, f.plan}) man.add_output(p);
      rec.finish(fs::path(split_dir) / "run.json");
      std::cout << "wrote " << split_dir << "\n";
    } else if (train_mc->parsed()) {
      train_markov(mc_train, alpha, mc_out);
      man.add_input(mc_train);
      man.add_output(mc_out);
      rec.finish(mc_out + ".run.json");
      std::cout << "wrote " << mc_out << "\n";
    } else if (train_lm->parsed()) {
      job.objective = lm::parse_objective(objective);
      job.vocab = lm_vocab;
      job.train_tokens = lm_train.empty() ? fs::path(lm_split) / "train.tok" : fs::path(lm_train);
      job.validation_tokens = lm_val.empty() ? fs::path(lm_split) / "validation.tok" : fs::path(lm_val);
      job.out = lm_out.empty() ? "model_" + objective : lm_out;
      job.single_precision = !double_precision;
      job.seed = g.seed;
      job.train.workers = workers;
      const LmOutcome r = train_language_model(job, [](const lm::EpochRecord& e) {
        std::cerr << "epoch " << e.epoch << " train " << e.train_loss << " val " << e.validation_loss << "\n";
      });
      for (const auto& p : {job.vocab, job.train_tokens, job.validation_tokens}) man.add_input(p);
      const auto paths = lm::checkpoint_paths(job.out);
      man.add_output(paths.blob);
      man.add_output(paths.meta);
      man.add_output(r.loss_csv);
      rec.finish(fs::path(paths.blob).replace_extension(".run.json"));
      std::cout << "wrote " << paths.blob.string() << " (best epoch " << r.best_epoch << ")\n";
    } else if (sample->parsed()) {
      const Vocabulary v = Vocabulary::load(s_vocab);
      const auto params = lm::load_checkpoint(s_model).cast<float>();
      const TokenSeq prompt = v.encode(s_prompt);
      if (!s_attention.empty()) {
        lm::write_attention_csv(lm::attention_export(params, prompt, s_query), s_query, s_attention);
        std::cout << "wrote " << s_attention << "\n";
      } else {
        Rng rng = Rng(g.seed).split("sample");
        std::cout << v.decode(lm::generate(params, prompt, s_count, s_temperature, rng)) << "\n";
      }
    } else if (ev->parsed() || grid->parsed()) {
      EvalJob ej;
      for (const auto& m : e_models) ej.models.push_back(lm::checkpoint_paths(m).blob);
      if (!e_baseline.empty()) ej.baseline = e_baseline;
      ej.vocab = e_vocab;
      ej.test_tokens = e_test;
      ej.out_dir = e_out;
      ej.grid = grid_opts;
      ej.grid.temperatures = parse_list(temps);
      ej.grid.seed = g.seed;
      ej.grid.workers = workers;
      ej.generation = ev->parsed();
      ej.masked = grid->parsed();
      if (grid->parsed()) {
        ej.grid.mask_probabilities = parse_list(mask_probs);
        ej.sentence_length = grid_length;
      }
      const auto reports = evaluate(ej);
      for (const auto& m : ej.models) man.add_input(m);
      if (ej.baseline) man.add_input(*ej.baseline);
      man.add_input(ej.vocab);
      man.add_input(ej.test_tokens);
      for (const char* name : {"fig2_accuracy.csv", "fig2_kl.csv", "fig4_prf1.csv", "fig5_confusion.csv",
                               "fig6_prime_profile.csv", "fig7_grid.csv", "report.json"})
        man.add_output(fs::path(e_out) / name);
      rec.finish(fs::path(e_out) / "run.json");
      std::cout << "wrote " << reports.size() << " report cells to " << e_out << "\n";
    }
  } catch (const std::invalid_argument& e) {
    emit_error("invalid_argument", e.what());
    return 1;
  } catch (const std::exception& e) {
    emit_error("runtime_error", e.what());
    return 1;
  }
  return 0;
}
