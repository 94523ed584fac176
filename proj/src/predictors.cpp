#include "ntlab/predictors.hpp"

#include "ntlab/lm/generate.hpp"
#include "ntlab/sampling.hpp"

namespace ntlab::eval {

Predictor make_markov_predictor(std::shared_ptr<const markov::TransitionMatrix> chain, std::string id) {
  Predictor p;
  p.id = std::move(id);
  p.continue_tokens = [chain](std::span<const TokenId> prompt, std::size_t count, double temperature, Rng& rng) {
    return markov::generate(*chain, prompt, count, temperature, rng);
  };
  p.fill_masked = [chain](const MaskedSentence& m, double temperature, Rng& rng) {
    TokenSeq out = m.input;
    for (std::uint32_t a : m.positions) {
      // The previous input token may itself be the mask id; fall back to the
      // unigram in that case, as at the first position.
      const bool has_prev = a > 0 && Eigen::Index(m.input[a - 1]) < chain->size();
      const Eigen::VectorXd dist = has_prev ? markov::successor_distribution(*chain, m.input[a - 1], temperature)
                                            : softmax_t(Eigen::VectorXd(chain->unigram.array().log()), temperature);
      out[a] = TokenId(sample_categorical(dist, rng));
    }
    return out;
  };
  return p;
}

Predictor make_lm_predictor(std::shared_ptr<const lm::Params<float>> params, std::string id) {
  Predictor p;
  p.id = std::move(id);
  if (params->config.objective == lm::Objective::kNextWord) {
    p.continue_tokens = [params](std::span<const TokenId> prompt, std::size_t count, double temperature, Rng& rng) {
      return lm::generate(*params, prompt, count, temperature, rng);
    };
  } else {
    p.fill_masked = [params](const MaskedSentence& m, double temperature, Rng& rng) {
      return lm::fill_masked(*params, m.input, m.positions, temperature, rng);
    };
  }
  return p;
}

}  // namespace ntlab::eval
