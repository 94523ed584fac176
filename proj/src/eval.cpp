#include "ntlab/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>
#include <unordered_map>

#include "ntlab/corpus.hpp"

namespace ntlab::eval {

Words continuation_words(std::string_view prompt_text, std::string_view full_text) {
  const std::size_t sp = prompt_text.rfind(' ');
  const std::size_t start = sp == std::string_view::npos ? 0 : sp + 1;
  if (full_text.substr(0, prompt_text.size()) != prompt_text)
    throw std::invalid_argument("continuation_words: text does not start with the prompt");
  const std::string_view rest = full_text.substr(start);
  Words out;
  std::size_t a = 0;
  for (;;) {
    const std::size_t b = rest.find(' ', a);
    if (b == std::string_view::npos) break;  // the last fragment may be cut
    out.emplace_back(rest.substr(a, b - a));
    a = b + 1;
  }
  return out;
}

WordAlignment align(Words predicted, Words truth) {
  WordAlignment w;
  w.predicted = std::move(predicted);
  w.truth = std::move(truth);
  w.predicted_valid.reserve(w.predicted.size());
  for (const auto& p : w.predicted) {
    const bool ok = DyckWord::is_valid(p);
    w.predicted_valid.push_back(ok);
    if (!ok) ++w.invalid_count;
  }
  return w;
}

double word_accuracy(const Words& predicted, const Words& truth) {
  if (truth.empty()) throw std::invalid_argument("word_accuracy: empty true word list");
  const std::size_t n = std::min(predicted.size(), truth.size());
  std::size_t hits = 0;
  for (std::size_t a = 0; a < n; ++a) hits += predicted[a] == truth[a];
  return double(hits) / double(truth.size());
}

double word_kl(const Words& predicted, const Words& truth, std::optional<double> epsilon) {
  if (truth.empty()) throw std::invalid_argument("word_kl: empty true word list");
  const double eps = epsilon.value_or(1.0 / double(truth.size()));
  if (!(eps > 0)) throw std::invalid_argument("word_kl: epsilon must be positive");
  std::map<std::string_view, std::pair<double, double>> counts;  // (true, predicted)
  for (const auto& w : truth) counts[w].first += 1;
  for (const auto& w : predicted) counts[w].second += 1;
  const double support = double(counts.size());
  const double zt = double(truth.size()) + eps * support;
  const double zp = double(predicted.size()) + eps * support;
  double kl = 0.0;
  for (const auto& [w, c] : counts) {
    const double ft = (c.first + eps) / zt;
    const double fp = (c.second + eps) / zp;
    kl += ft * std::log(ft / fp);
  }
  return std::max(0.0, kl);
}

Prf1 prf1(const Words& predicted, const Words& truth, std::string_view word) {
  Prf1 r;
  const std::size_t n = std::max(predicted.size(), truth.size());
  for (std::size_t a = 0; a < n; ++a) {
    const bool p = a < predicted.size() && predicted[a] == word;
    const bool t = a < truth.size() && truth[a] == word;
    r.tp += p && t;
    r.fp += p && !t;
    r.fn += t && !p;
  }
  if (r.tp + r.fp > 0) r.precision = double(r.tp) / double(r.tp + r.fp);
  if (r.tp + r.fn > 0) r.recall = double(r.tp) / double(r.tp + r.fn);
  if (r.tp + r.fp + r.fn > 0) r.f1 = 2.0 * double(r.tp) / double(2 * r.tp + r.fp + r.fn);
  return r;
}

std::size_t ConfusionMatrix::index_of(std::string_view label) const {
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == label) return i;
  throw std::out_of_range("confusion matrix has no label " + std::string(label));
}

namespace {

std::vector<std::string> confusion_labels(const std::vector<std::string>& top) {
  std::vector<std::string> labels = top;
  for (auto s : {kOther, kInvalid, kMiss, kOverflow}) labels.emplace_back(s);
  return labels;
}

}  // namespace

ConfusionMatrix confusion_matrix(const Words& predicted, const Words& truth, const std::vector<std::string>& top) {
  ConfusionMatrix cm;
  cm.labels = confusion_labels(top);
  const auto k = Eigen::Index(cm.labels.size());
  cm.values = Eigen::MatrixXd::Zero(k, k);
  std::unordered_map<std::string_view, Eigen::Index> index;
  for (std::size_t i = 0; i < top.size(); ++i) index.emplace(cm.labels[i], Eigen::Index(i));
  const auto other = Eigen::Index(top.size()), invalid = other + 1, miss = other + 2, overflow = other + 3;
  auto classify = [&](std::string_view w, bool predicted_side) {
    if (auto it = index.find(w); it != index.end()) return it->second;
    if (predicted_side && w == kMiss) return miss;
    if (!predicted_side && w == kOverflow) return overflow;
    return DyckWord::is_valid(w) ? other : invalid;
  };
  const std::size_t n = std::max(predicted.size(), truth.size());
  if (n == 0) return cm;
  for (std::size_t a = 0; a < n; ++a) {
    const auto t = a < truth.size() ? classify(truth[a], false) : overflow;
    const auto p = a < predicted.size() ? classify(predicted[a], true) : miss;
    cm.values(t, p) += 1.0;
  }
  cm.values /= double(n);
  return cm;
}

std::vector<std::string> top_words(const Words& truth, std::size_t k) {
  std::map<std::string, std::size_t> freq;
  for (const auto& w : truth) freq[w]++;
  std::vector<std::pair<std::string, std::size_t>> v(freq.begin(), freq.end());
  std::stable_sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> out;
  for (std::size_t i = 0; i < v.size() && i < k; ++i) out.push_back(v[i].first);
  return out;
}

PrimeProfile prime_error_profile(const Words& predicted, const Words& truth) {
  PrimeProfile pr;
  const std::size_t n = std::max(predicted.size(), truth.size());
  for (std::size_t a = 0; a < n; ++a) {
    const std::string p = a < predicted.size() ? predicted[a] : std::string(kMiss);
    const std::string t = a < truth.size() ? truth[a] : std::string(kOverflow);
    if (t == "10") {
      pr.predicted_at_true_prime[p] += 1;
      ++pr.true_prime_positions;
    }
    if (p == "10") {
      pr.true_at_predicted_prime[t] += 1;
      ++pr.predicted_prime_positions;
    }
  }
  for (auto& [w, v] : pr.predicted_at_true_prime) v /= double(pr.true_prime_positions);
  for (auto& [w, v] : pr.true_at_predicted_prime) v /= double(pr.predicted_prime_positions);
  return pr;
}

double token_accuracy(std::span<const TokenId> predicted, std::span<const TokenId> truth,
                      std::optional<std::span<const std::uint32_t>> positions) {
  if (predicted.size() != truth.size()) throw std::invalid_argument("token_accuracy: length mismatch");
  if (positions) {
    if (positions->empty()) throw std::invalid_argument("token_accuracy: empty position set");
    std::size_t hits = 0;
    for (std::uint32_t a : *positions) {
      if (a >= truth.size()) throw std::out_of_range("token_accuracy: position out of range");
      hits += predicted[a] == truth[a];
    }
    return double(hits) / double(positions->size());
  }
  if (truth.empty()) throw std::invalid_argument("token_accuracy: empty sequences");
  std::size_t hits = 0;
  for (std::size_t a = 0; a < truth.size(); ++a) hits += predicted[a] == truth[a];
  return double(hits) / double(truth.size());
}

double MetricReport::mean(const std::vector<double>& v) {
  if (v.empty()) return std::nan("");
  double s = 0;
  for (double x : v) s += x;
  return s / double(v.size());
}

// ---------------------------------------------------------------------------

namespace {

/// Runs f(i) for i in [0, n) on up to `workers` threads.
template <typename F>
void parallel_for(std::size_t n, unsigned workers, F f) {
  const std::size_t w = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(n, 1));
  if (w <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::vector<std::exception_ptr> errors(w);
  std::vector<std::thread> threads;
  for (std::size_t t = 0; t < w; ++t)
    threads.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += w) f(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  for (auto& th : threads) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

std::string cell_name(const char* kind, double value) {
  std::ostringstream s;
  s << kind << '=' << std::setprecision(17) << value;
  return s.str();
}

struct SequenceResult {
  WordAlignment alignment;
  double accuracy = 0, kl = 0, tokens = 0;
};

/// Per-word table and averaged confusion matrix of a set of sequences.
void summarize_words(MetricReport& r, const std::vector<SequenceResult>& seqs, std::size_t top_k) {
  Words all_truth;
  for (const auto& s : seqs) all_truth.insert(all_truth.end(), s.alignment.truth.begin(), s.alignment.truth.end());
  std::map<std::string, std::size_t> freq;
  for (const auto& w : all_truth) freq[w]++;
  const std::vector<std::string> ordered = top_words(all_truth, freq.size());
  for (const auto& w : ordered) {
    WordTableRow row;
    row.word = w;
    row.true_count = freq[w];
    double sp = 0, sr = 0, sf = 0;
    std::size_t np = 0, nr = 0, nf = 0;
    for (const auto& s : seqs) {
      const Prf1 x = prf1(s.alignment.predicted, s.alignment.truth, w);
      row.tp += x.tp;
      row.fp += x.fp;
      row.fn += x.fn;
      if (x.precision) sp += *x.precision, ++np;
      if (x.recall) sr += *x.recall, ++nr;
      if (x.f1) sf += *x.f1, ++nf;
    }
    if (np) row.precision = sp / double(np);
    if (nr) row.recall = sr / double(nr);
    if (nf) row.f1 = sf / double(nf);
    r.words.push_back(std::move(row));
  }
  const std::vector<std::string> top(ordered.begin(), ordered.begin() + std::ptrdiff_t(std::min(top_k, ordered.size())));
  r.confusion.labels = confusion_labels(top);
  r.confusion.values = Eigen::MatrixXd::Zero(Eigen::Index(r.confusion.labels.size()), Eigen::Index(r.confusion.labels.size()));
  std::size_t used = 0;
  std::map<std::string, double> at_true, at_pred;
  for (const auto& s : seqs) {
    if (s.alignment.positions() > 0) {
      r.confusion.values += confusion_matrix(s.alignment.predicted, s.alignment.truth, top).values;
      ++used;
    }
    const PrimeProfile p = prime_error_profile(s.alignment.predicted, s.alignment.truth);
    for (const auto& [w, v] : p.predicted_at_true_prime) at_true[w] += v * double(p.true_prime_positions);
    for (const auto& [w, v] : p.true_at_predicted_prime) at_pred[w] += v * double(p.predicted_prime_positions);
    r.prime_profile.true_prime_positions += p.true_prime_positions;
    r.prime_profile.predicted_prime_positions += p.predicted_prime_positions;
  }
  if (used) r.confusion.values /= double(used);
  for (auto& [w, v] : at_true) r.prime_profile.predicted_at_true_prime[w] = v / double(r.prime_profile.true_prime_positions);
  for (auto& [w, v] : at_pred) r.prime_profile.true_at_predicted_prime[w] = v / double(r.prime_profile.predicted_prime_positions);
}

}  // namespace

std::vector<MetricReport> evaluate_generation(const Predictor& model, const Vocabulary& vocab,
                                              std::span<const TokenId> test_tokens, const GridOptions& o) {
  if (o.m < 1) throw std::invalid_argument("evaluate_generation: m must be >= 1");
  if (!model.continue_tokens) throw std::invalid_argument("evaluate_generation: model cannot continue prompts");
  const std::size_t span = o.prompt_length + o.continuation_length;
  const std::size_t available = test_tokens.size() / span;
  if (available == 0) throw std::invalid_argument("evaluate_generation: test stream shorter than one window");
  const std::size_t m = std::min(o.m, available);
  const Rng root(o.seed);

  std::vector<MetricReport> reports;
  for (double temperature : o.temperatures) {
    MetricReport r;
    r.model = model.id;
    r.temperature = temperature;
    r.m = m;
    std::vector<SequenceResult> seqs(m);
    const Rng cell = root.split(cell_name("T", temperature));
    parallel_for(m, o.workers, [&](std::size_t i) {
      const auto window = test_tokens.subspan(i * span, span);
      const auto prompt = window.first(o.prompt_length);
      const auto truth = window.subspan(o.prompt_length);
      Rng rng = cell.split("sequence=" + std::to_string(i));
      const TokenSeq generated = model.continue_tokens(prompt, o.continuation_length, temperature, rng);
      const std::string prompt_text = vocab.decode(prompt);
      SequenceResult& s = seqs[i];
      s.alignment = align(continuation_words(prompt_text, prompt_text + vocab.decode(generated)),
                          continuation_words(prompt_text, prompt_text + vocab.decode(truth)));
      s.accuracy = s.alignment.truth.empty() ? 0.0 : word_accuracy(s.alignment.predicted, s.alignment.truth);
      s.kl = s.alignment.truth.empty() ? 0.0 : word_kl(s.alignment.predicted, s.alignment.truth);
      s.tokens = token_accuracy(generated, truth);
    });
    for (const auto& s : seqs) {
      r.word_accuracy.push_back(s.accuracy);
      r.word_kl.push_back(s.kl);
      r.token_accuracy.push_back(s.tokens);
      r.invalid_words += s.alignment.invalid_count;
    }
    summarize_words(r, seqs, o.top_k);
    reports.push_back(std::move(r));
  }
  return reports;
}

std::vector<MetricReport> evaluate_masked(const Predictor& model, const Vocabulary& vocab,
                                          std::span<const TokenId> test_tokens, std::size_t sentence_length,
                                          const GridOptions& o) {
  if (o.m < 1) throw std::invalid_argument("evaluate_masked: m must be >= 1");
  if (!model.fill_masked) throw std::invalid_argument("evaluate_masked: model cannot fill masks");
  std::vector<Sentence> sentences = window(test_tokens, sentence_length);
  if (sentences.empty()) throw std::invalid_argument("evaluate_masked: test stream shorter than one sentence");
  sentences.resize(std::min(sentences.size(), o.m));
  const Rng root(o.seed);
  const std::size_t d = vocab.size();

  std::vector<MetricReport> reports;
  for (double p_m : o.mask_probabilities) {
    Rng mask_rng = root.split(cell_name("mask p_m", p_m));
    std::vector<MaskedSentence> masked;
    for (const auto& s : sentences) masked.push_back(mask_sentence(s, p_m, d, vocab.mask_id(), mask_rng));
    for (double temperature : o.temperatures) {
      MetricReport r;
      r.model = model.id;
      r.temperature = temperature;
      r.mask_probability = p_m;
      r.m = masked.size();
      r.token_accuracy.assign(masked.size(), 0.0);
      r.token_accuracy_masked.assign(masked.size(), 0.0);
      const Rng cell = root.split(cell_name("fill p_m", p_m) + cell_name(" T", temperature));
      parallel_for(masked.size(), o.workers, [&](std::size_t i) {
        Rng rng = cell.split("sequence=" + std::to_string(i));
        const TokenSeq filled = model.fill_masked(masked[i], temperature, rng);
        r.token_accuracy[i] = token_accuracy(filled, masked[i].original);
        if (!masked[i].positions.empty())
          r.token_accuracy_masked[i] =
              token_accuracy(filled, masked[i].original, std::span<const std::uint32_t>(masked[i].positions));
      });
      reports.push_back(std::move(r));
    }
  }
  return reports;
}

// ---------------------------------------------------------------------------
// Report files

namespace {

double sd(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double mu = MetricReport::mean(v);
  double s = 0;
  for (double x : v) s += (x - mu) * (x - mu);
  return std::sqrt(s / double(v.size() - 1));
}

std::string num(double v) {
  if (std::isnan(v)) return "";
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

std::string opt(const std::optional<double>& v) { return v ? num(*v) : ""; }

std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\n") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + '"';
}

std::ofstream open_csv(const std::filesystem::path& path, std::string_view header) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << header << '\n';
  return out;
}

nlohmann::ordered_json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

nlohmann::ordered_json number_json(double v) {
  return std::isfinite(v) ? nlohmann::ordered_json(v) : nlohmann::ordered_json(nullptr);
}

}  // namespace

std::string report_json(const std::vector<MetricReport>& reports) {
  nlohmann::ordered_json all = nlohmann::ordered_json::array();
  for (const auto& r : reports) {
    nlohmann::ordered_json j;
    j["model"] = r.model;
    j["temperature"] = r.temperature;
    j["mask_probability"] = optional_json(r.mask_probability);
    j["m"] = r.m;
    j["word_accuracy"] = r.word_accuracy;
    j["word_accuracy_mean"] = number_json(MetricReport::mean(r.word_accuracy));
    j["word_kl"] = r.word_kl;
    j["word_kl_mean"] = number_json(MetricReport::mean(r.word_kl));
    j["token_accuracy"] = r.token_accuracy;
    j["token_accuracy_mean"] = number_json(MetricReport::mean(r.token_accuracy));
    j["token_accuracy_masked"] = r.token_accuracy_masked;
    j["token_accuracy_masked_mean"] = number_json(MetricReport::mean(r.token_accuracy_masked));
    j["invalid_words"] = r.invalid_words;
    nlohmann::ordered_json words = nlohmann::ordered_json::array();
    for (const auto& w : r.words)
      words.push_back({{"word", w.word},
                       {"true_count", w.true_count},
                       {"tp", w.tp},
                       {"fp", w.fp},
                       {"fn", w.fn},
                       {"precision", optional_json(w.precision)},
                       {"recall", optional_json(w.recall)},
                       {"f1", optional_json(w.f1)}});
    j["words"] = words;
    j["confusion_labels"] = r.confusion.labels;
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (Eigen::Index i = 0; i < r.confusion.values.rows(); ++i) {
      std::vector<double> row(std::size_t(r.confusion.values.cols()));
      for (Eigen::Index k = 0; k < r.confusion.values.cols(); ++k) row[std::size_t(k)] = r.confusion.values(i, k);
      rows.push_back(row);
    }
    j["confusion"] = rows;
    j["prime_profile"] = {{"predicted_at_true_prime", r.prime_profile.predicted_at_true_prime},
                          {"true_at_predicted_prime", r.prime_profile.true_at_predicted_prime},
                          {"true_prime_positions", r.prime_profile.true_prime_positions},
                          {"predicted_prime_positions", r.prime_profile.predicted_prime_positions}};
    all.push_back(j);
  }
  return all.dump(1);
}

void write_reports(const std::vector<MetricReport>& reports, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto acc = open_csv(dir / "fig2_accuracy.csv",
                      "model,temperature,m,word_accuracy_mean,word_accuracy_sd,token_accuracy_mean,invalid_words");
  auto kl = open_csv(dir / "fig2_kl.csv", "model,temperature,m,kl_mean,kl_sd");
  auto prf = open_csv(dir / "fig4_prf1.csv", "model,temperature,word,true_count,tp,fp,fn,precision,recall,f1");
  auto conf = open_csv(dir / "fig5_confusion.csv", "model,temperature,true_word,predicted_word,value");
  auto prime = open_csv(dir / "fig6_prime_profile.csv", "model,temperature,kind,word,fraction");
  auto grid = open_csv(dir / "fig7_grid.csv", "model,mask_probability,temperature,m,token_accuracy_masked,token_accuracy_all");
  for (const auto& r : reports) {
    const std::string head = csv_field(r.model) + ',' + num(r.temperature);
    if (r.mask_probability) {
      grid << csv_field(r.model) << ',' << num(*r.mask_probability) << ',' << num(r.temperature) << ',' << r.m << ','
           << num(MetricReport::mean(r.token_accuracy_masked)) << ',' << num(MetricReport::mean(r.token_accuracy))
           << '\n';
      continue;
    }
    acc << head << ',' << r.m << ',' << num(MetricReport::mean(r.word_accuracy)) << ',' << num(sd(r.word_accuracy))
        << ',' << num(MetricReport::mean(r.token_accuracy)) << ',' << r.invalid_words << '\n';
    kl << head << ',' << r.m << ',' << num(MetricReport::mean(r.word_kl)) << ',' << num(sd(r.word_kl)) << '\n';
    for (const auto& w : r.words)
      prf << head << ',' << w.word << ',' << w.true_count << ',' << w.tp << ',' << w.fp << ',' << w.fn << ','
          << opt(w.precision) << ',' << opt(w.recall) << ',' << opt(w.f1) << '\n';
    for (Eigen::Index i = 0; i < r.confusion.values.rows(); ++i)
      for (Eigen::Index k = 0; k < r.confusion.values.cols(); ++k)
        conf << head << ',' << r.confusion.labels[std::size_t(i)] << ',' << r.confusion.labels[std::size_t(k)] << ','
             << num(r.confusion.values(i, k)) << '\n';
    for (const auto& [w, v] : r.prime_profile.predicted_at_true_prime)
      prime << head << ",predicted_at_true_prime," << w << ',' << num(v) << '\n';
    for (const auto& [w, v] : r.prime_profile.true_at_predicted_prime)
      prime << head << ",true_at_predicted_prime," << w << ',' << num(v) << '\n';
  }
  std::ofstream js(dir / "report.json");
  js << report_json(reports) << '\n';
}

}  // namespace ntlab::eval
