#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <stdexcept>

#include "ntlab/lm/checkpoint.hpp"
#include "ntlab/lm/config.hpp"
#include "ntlab/lm/generate.hpp"
#include "ntlab/lm/model.hpp"
#include "ntlab/lm/train.hpp"

namespace ntlab::lm {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

using nlohmann::ordered_json;

std::string_view to_string(Objective o) { return o == Objective::kNextWord ? "nwp" : "mlm"; }

Objective parse_objective(std::string_view s) {
  if (s == "nwp") return Objective::kNextWord;
  if (s == "mlm") return Objective::kMasked;
  throw std::invalid_argument("unknown objective '" + std::string(s) + "' (expected nwp or mlm)");
}

ModelConfig ModelConfig::desk(std::size_t vocab, Objective objective) {
  ModelConfig c;
  c.layers = 2;
  c.heads = 4;
  c.head_dim = 16;
  c.context = 256;
  c.vocab = vocab;
  c.objective = objective;
  return c;
}

ModelConfig ModelConfig::paper(std::size_t vocab, Objective objective) {
  ModelConfig c;
  c.vocab = vocab;
  c.objective = objective;
  return c;
}

ModelConfig ModelConfig::preset(std::string_view name, std::size_t vocab, Objective objective) {
  if (name == "desk") return desk(vocab, objective);
  if (name == "paper") return paper(vocab, objective);
  throw std::invalid_argument("unknown preset '" + std::string(name) + "' (expected desk or paper)");
}

std::string ModelConfig::to_json() const {
  ordered_json j;
  j["layers"] = layers;
  j["heads"] = heads;
  j["head_dim"] = head_dim;
  j["qk_dim"] = query_dim();
  j["embed_dim"] = embed_dim();
  j["context"] = context;
  j["vocab"] = vocab;
  j["special_tokens"] = special_tokens;
  j["mlp_ratio"] = mlp_ratio;
  j["objective"] = std::string(lm::to_string(objective));
  j["exclude_self"] = exclude_self;
  j["init_std"] = init_std;
  j["layer_norm_eps"] = layer_norm_eps;
  return j.dump();
}

ModelConfig ModelConfig::from_json(std::string_view text) {
  const auto j = nlohmann::json::parse(text);
  ModelConfig c;
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.head_dim = j.value("head_dim", c.head_dim);
  c.qk_dim = j.value("qk_dim", c.qk_dim);
  if (c.qk_dim == c.head_dim) c.qk_dim = 0;
  c.context = j.value("context", c.context);
  c.vocab = j.value("vocab", c.vocab);
  c.special_tokens = j.value("special_tokens", c.special_tokens);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  if (j.contains("objective")) c.objective = parse_objective(j["objective"].get<std::string>());
  c.exclude_self = j.value("exclude_self", c.exclude_self);
  c.init_std = j.value("init_std", c.init_std);
  c.layer_norm_eps = j.value("layer_norm_eps", c.layer_norm_eps);
  if (j.contains("embed_dim") && j["embed_dim"].get<std::size_t>() != c.embed_dim())
    throw std::invalid_argument("model config: embed_dim must equal heads * head_dim");
  return c;
}

std::size_t parameter_count(const ModelConfig& c) {
  const std::size_t d = c.embed_dim();
  const std::size_t qk = c.heads * c.query_dim();
  const std::size_t hv = c.heads * c.head_dim;
  const std::size_t hidden = c.mlp_ratio * d;
  const std::size_t attention = 2 * (d * qk + qk) + (d * hv + hv) + (hv * d + d);
  const std::size_t mlp = (d * hidden + hidden) + (hidden * d + d);
  const std::size_t norms = 4 * d;
  return c.input_vocab() * d + c.context * d + c.layers * (attention + mlp + norms) + 2 * d;
}

// ---------------------------------------------------------------------------

std::vector<LossTarget> next_word_targets(std::span<const TokenId> sentence, double scale) {
  if (sentence.size() < 2) throw std::invalid_argument("next-word loss needs sentences of length >= 2");
  std::vector<LossTarget> t;
  t.reserve(sentence.size() - 1);
  const double w = scale / double(sentence.size() - 1);
  for (std::size_t i = 0; i + 1 < sentence.size(); ++i) t.push_back({std::uint32_t(i), sentence[i + 1], w});
  return t;
}

std::vector<LossTarget> masked_targets(std::span<const TokenId> original, std::span<const std::uint32_t> positions,
                                       double scale) {
  if (positions.empty()) throw std::invalid_argument("masked loss needs at least one masked position");
  std::vector<LossTarget> t;
  t.reserve(positions.size());
  const double w = scale / double(positions.size());
  for (std::uint32_t a : positions) {
    if (a >= original.size()) throw std::out_of_range("masked position out of range");
    t.push_back({a, original[a], w});
  }
  return t;
}

Example next_word_example(std::span<const TokenId> sentence) {
  return {TokenSeq(sentence.begin(), sentence.end() - 1), next_word_targets(sentence)};
}

Example masked_example(const MaskedSentence& m) { return {m.input, masked_targets(m.original, m.positions)}; }

void write_attention_csv(const AttentionRows& rows, std::size_t query, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "layer,head,query,key,weight\n" << std::setprecision(17);
  for (std::size_t l = 0; l < rows.size(); ++l)
    for (std::size_t h = 0; h < rows[l].size(); ++h)
      for (Eigen::Index k = 0; k < rows[l][h].size(); ++k)
        out << l << ',' << h << ',' << query << ',' << k << ',' << rows[l][h](k) << '\n';
}

// ---------------------------------------------------------------------------

double learning_rate_at(const OptimizerConfig& o, std::size_t step, std::size_t total_steps) {
  if (o.warmup_steps > 0 && step <= o.warmup_steps) return o.learning_rate * double(step) / double(o.warmup_steps);
  if (total_steps <= o.warmup_steps) return o.learning_rate;
  const double progress =
      std::min(1.0, double(step - o.warmup_steps) / double(total_steps - o.warmup_steps));
  const double floor = o.learning_rate * o.min_lr_ratio;
  return floor + (o.learning_rate - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void write_divergence_dump(const std::filesystem::path& path, const TrainState& s, double loss) {
  ordered_json j;
  j["step"] = s.step;
  j["epoch"] = s.epoch;
  j["best_validation"] = std::isfinite(s.best_validation) ? ordered_json(s.best_validation) : ordered_json(nullptr);
  j["epochs_since_improvement"] = s.epochs_since_improvement;
  j["seed"] = s.seed;
  j["loss"] = std::isfinite(loss) ? ordered_json(loss) : ordered_json(std::to_string(loss));
  std::ofstream out(path);
  out << j.dump(1) << '\n';
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& curve, std::size_t vocab) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const double ln_d = std::log(double(vocab));
  out << "epoch,train_loss,val_loss,train_loss_lnD,val_loss_lnD\n" << std::setprecision(17);
  for (const auto& r : curve)
    out << r.epoch << ',' << r.train_loss << ',' << r.validation_loss << ',' << r.train_loss / ln_d << ','
        << r.validation_loss / ln_d << '\n';
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'N', 'T', 'C', 'K', 'P', 'T', '0', '1'};

}  // namespace

CheckpointPaths checkpoint_paths(const std::filesystem::path& path) {
  std::filesystem::path stem = path;
  if (stem.extension() == ".bin" || stem.extension() == ".json") stem.replace_extension();
  return {std::filesystem::path(stem.string() + ".bin"), std::filesystem::path(stem.string() + ".json")};
}

void save_checkpoint(const Params<double>& params, const std::filesystem::path& path,
                     const std::string& training_manifest_json) {
  const auto paths = checkpoint_paths(path);
  ordered_json meta;
  meta["format"] = "ntlab-checkpoint-1";
  meta["config"] = ordered_json::parse(params.config.to_json());
  meta["parameter_count"] = params.parameter_count();
  ordered_json shapes = ordered_json::array();
  params.for_each([&](const std::string& name, const auto& t) {
    shapes.push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}});
  });
  meta["tensors"] = shapes;
  meta["training"] = ordered_json::parse(training_manifest_json);

  std::ofstream blob(paths.blob, std::ios::binary);
  if (!blob) throw std::runtime_error("cannot write " + paths.blob.string());
  blob.write(kMagic, sizeof kMagic);
  const std::uint64_t n = params.parameter_count();
  blob.write(reinterpret_cast<const char*>(&n), sizeof n);
  params.for_each([&](const std::string&, const auto& t) {
    blob.write(reinterpret_cast<const char*>(t.data()), std::streamsize(t.size() * sizeof(double)));
  });
  if (!blob) throw std::runtime_error("write failed: " + paths.blob.string());

  std::ofstream js(paths.meta);
  if (!js) throw std::runtime_error("cannot write " + paths.meta.string());
  js << meta.dump(1) << '\n';
}

Params<double> load_checkpoint(const std::filesystem::path& path) {
  const auto paths = checkpoint_paths(path);
  std::ifstream js(paths.meta);
  if (!js) throw std::runtime_error("cannot open " + paths.meta.string());
  const auto meta = nlohmann::json::parse(js);
  const ModelConfig config = ModelConfig::from_json(meta.at("config").dump());
  Params<double> p = Params<double>::zeros(config);

  std::ifstream blob(paths.blob, std::ios::binary);
  if (!blob) throw std::runtime_error("cannot open " + paths.blob.string());
  char magic[8];
  blob.read(magic, sizeof magic);
  if (!blob || std::memcmp(magic, kMagic, sizeof magic) != 0)
    throw std::runtime_error("not a checkpoint blob: " + paths.blob.string());
  std::uint64_t n = 0;
  blob.read(reinterpret_cast<char*>(&n), sizeof n);
  if (n != p.parameter_count())
    throw std::runtime_error("checkpoint holds " + std::to_string(n) + " scalars, config expects " +
                             std::to_string(p.parameter_count()));
  p.for_each([&](const std::string&, auto& t) {
    blob.read(reinterpret_cast<char*>(t.data()), std::streamsize(t.size() * sizeof(double)));
  });
  if (!blob) throw std::runtime_error("checkpoint blob truncated: " + paths.blob.string());
  return p;
}

std::string checkpoint_manifest(const std::filesystem::path& path) {
  std::ifstream js(checkpoint_paths(path).meta);
  if (!js) throw std::runtime_error("cannot open checkpoint metadata for " + path.string());
  return nlohmann::json::parse(js).value("training", nlohmann::json::object()).dump();
}

}  // namespace ntlab::lm
