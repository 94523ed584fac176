#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ntlab/dataset.hpp"
#include "ntlab/lm/model.hpp"
#include "ntlab/rng.hpp"

namespace ntlab::lm {

struct OptimizerConfig {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t warmup_steps = 100;
  double min_lr_ratio = 0.1;  // cosine floor as a fraction of learning_rate
  double clip_norm = 1.0;     // global gradient norm; 0 disables clipping
};

/// Linear warmup to the base rate, then cosine decay to the floor at
/// `total_steps`. Steps count from 1.
double learning_rate_at(const OptimizerConfig& o, std::size_t step, std::size_t total_steps);

template <typename Scalar>
double global_norm(Params<Scalar>& g) {
  double sq = 0.0;
  for (auto v : g.views()) sq += v.template cast<double>().squaredNorm();
  return std::sqrt(sq);
}

template <typename Scalar>
class Adam {
 public:
  Adam(const ModelConfig& c, OptimizerConfig o) : o_(o), m_(Params<Scalar>::zeros(c)), v_(Params<Scalar>::zeros(c)) {
    m_.set_zero();
    v_.set_zero();
  }

  std::size_t step() const { return step_; }
  const OptimizerConfig& config() const { return o_; }

  /// Clips `grad` in place and applies one update with learning rate `lr`.
  void update(Params<Scalar>& p, Params<Scalar>& grad, double lr) {
    ++step_;
    if (o_.clip_norm > 0) {
      const double norm = global_norm(grad);
      if (norm > o_.clip_norm)
        for (auto v : grad.views()) v *= Scalar(o_.clip_norm / norm);
    }
    const double c1 = 1.0 - std::pow(o_.beta1, double(step_));
    const double c2 = 1.0 - std::pow(o_.beta2, double(step_));
    const auto b1 = Scalar(o_.beta1), b2 = Scalar(o_.beta2);
    const auto step_size = Scalar(lr / c1);
    const auto inv_c2 = Scalar(1.0 / c2);
    const auto eps = Scalar(o_.epsilon);
    auto pv = p.views(), gv = grad.views(), mv = m_.views(), vv = v_.views();
    for (std::size_t k = 0; k < pv.size(); ++k) {
      mv[k] = b1 * mv[k] + (Scalar(1) - b1) * gv[k];
      vv[k] = b2 * vv[k] + (Scalar(1) - b2) * gv[k].cwiseAbs2();
      pv[k].array() -= step_size * mv[k].array() / ((vv[k].array() * inv_c2).sqrt() + eps);
    }
  }

 private:
  OptimizerConfig o_;
  Params<Scalar> m_, v_;
  std::size_t step_ = 0;
};

/// Stops once the validation loss has not improved for `patience`
/// consecutive epochs.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience = 6) : patience_(patience) {}

  /// Records one epoch; returns true when training should stop.
  bool update(double validation_loss) {
    ++epoch_;
    if (validation_loss < best_) {
      best_ = validation_loss;
      best_epoch_ = epoch_;
      since_ = 0;
    } else {
      ++since_;
    }
    return since_ >= patience_;
  }

  bool improved_last() const { return since_ == 0 && epoch_ > 0; }
  double best() const { return best_; }
  std::size_t best_epoch() const { return best_epoch_; }
  std::size_t epochs_since_improvement() const { return since_; }
  std::size_t patience() const { return patience_; }

 private:
  std::size_t patience_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t best_epoch_ = 0;
  std::size_t epoch_ = 0;
  std::size_t since_ = 0;
};

struct TrainConfig {
  OptimizerConfig optimizer;
  std::size_t batch_size = 16;
  std::size_t max_epochs = 100;
  std::size_t patience = 6;
  /// Caps the batches per epoch (0 = the whole training set).
  std::size_t max_batches_per_epoch = 0;
  /// Masking probability for the masked objective.
  double mask_probability = 0.15;
  unsigned workers = 1;
  std::uint64_t seed = 0;
  /// Written when the loss or the parameters become non-finite.
  std::filesystem::path divergence_dump;
};

struct EpochRecord {
  std::size_t epoch;
  double train_loss;
  double validation_loss;
};

struct TrainState {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double best_validation = std::numeric_limits<double>::infinity();
  std::size_t epochs_since_improvement = 0;
  std::uint64_t seed = 0;
};

template <typename Scalar>
struct TrainResult {
  Params<Scalar> best;  // parameters at the best validation epoch
  std::vector<EpochRecord> curve;
  TrainState state;
  std::size_t best_epoch = 0;
  bool stopped_early = false;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, TrainState state) : std::runtime_error(what), state(state) {}
  TrainState state;
};

/// Writes the state of a diverged run as JSON.
void write_divergence_dump(const std::filesystem::path& path, const TrainState& state, double loss);

/// CSV columns: epoch,train_loss,val_loss,train_loss_lnD,val_loss_lnD.
void write_loss_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& curve, std::size_t vocab);

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Builds the supervised examples of one epoch from the training sentences.
/// Next-word examples are fixed; masked examples are redrawn every epoch.
inline std::vector<Example> make_examples(const ModelConfig& c, std::span<const Sentence> sentences,
                                          std::span<const std::size_t> indices, double p_m, Rng& rng) {
  std::vector<Example> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) {
    if (c.objective == Objective::kNextWord) {
      out.push_back(next_word_example(sentences[i]));
    } else {
      out.push_back(masked_example(mask_sentence(sentences[i], p_m, c.vocab, TokenId(c.vocab), rng)));
    }
  }
  return out;
}

/// Mini-batch training with early stopping on the validation loss.
/// Validation examples are built once (masks drawn from a dedicated stream).
template <typename Scalar>
TrainResult<Scalar> train(Params<Scalar> params, std::span<const Sentence> train_set,
                          std::span<const Sentence> validation_set, const TrainConfig& tc,
                          const EpochCallback& on_epoch = {}) {
  if (train_set.empty() || validation_set.empty()) throw std::invalid_argument("train: empty train or validation set");
  const ModelConfig& c = params.config;
  Rng root(tc.seed);
  Rng mask_rng = root.split("train-mask");
  Rng val_rng = root.split("validation-mask");
  BatchStream stream(train_set.size(), tc.batch_size, root.split("batches"));

  std::vector<std::size_t> all_val(validation_set.size());
  for (std::size_t i = 0; i < all_val.size(); ++i) all_val[i] = i;
  const std::vector<Example> val = make_examples(c, validation_set, all_val, tc.mask_probability, val_rng);

  std::size_t per_epoch = stream.batches_per_epoch();
  if (tc.max_batches_per_epoch) per_epoch = std::min(per_epoch, tc.max_batches_per_epoch);
  const std::size_t total_steps = per_epoch * tc.max_epochs;

  Adam<Scalar> adam(c, tc.optimizer);
  EarlyStopping stopper(tc.patience);
  Params<Scalar> grad = Params<Scalar>::zeros(c);
  TrainResult<Scalar> result{params, {}, {}, 0, false};
  result.state.seed = tc.seed;

  auto diverge = [&](const std::string& why, double loss) {
    if (!tc.divergence_dump.empty()) write_divergence_dump(tc.divergence_dump, result.state, loss);
    throw TrainingDiverged("training diverged: " + why, result.state);
  };

  for (std::size_t epoch = 1; epoch <= tc.max_epochs; ++epoch) {
    result.state.epoch = epoch;
    auto batches = stream.next_epoch();
    batches.resize(std::min(batches.size(), per_epoch));
    double train_sum = 0.0;
    for (const auto& idx : batches) {
      const auto ex = make_examples(c, train_set, idx, tc.mask_probability, mask_rng);
      const double loss = batch_loss<Scalar>(params, ex, &grad, tc.workers);
      if (!std::isfinite(loss)) diverge("non-finite loss", loss);
      ++result.state.step;
      adam.update(params, grad, learning_rate_at(tc.optimizer, result.state.step, total_steps));
      if (!params.all_finite()) diverge("non-finite parameters", loss);
      train_sum += loss;
    }
    const double val_loss = batch_loss<Scalar>(params, val, nullptr, tc.workers);
    if (!std::isfinite(val_loss)) diverge("non-finite validation loss", val_loss);
    const EpochRecord rec{epoch, train_sum / double(batches.size()), val_loss};
    result.curve.push_back(rec);
    const bool stop = stopper.update(val_loss);
    if (stopper.improved_last()) {
      result.best = params;
      result.best_epoch = epoch;
    }
    result.state.best_validation = stopper.best();
    result.state.epochs_since_improvement = stopper.epochs_since_improvement();
    if (on_epoch) on_epoch(rec);
    if (stop) {
      result.stopped_early = true;
      break;
    }
  }
  return result;
}

}  // namespace ntlab::lm
