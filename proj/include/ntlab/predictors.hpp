#pragma once

#include <memory>

#include "ntlab/eval.hpp"
#include "ntlab/lm/params.hpp"
#include "ntlab/markov.hpp"

namespace ntlab::eval {

/// Continues from the last prompt token. A masked position a is filled from
/// the successor distribution of input[a - 1], or the unigram at a = 0.
Predictor make_markov_predictor(std::shared_ptr<const markov::TransitionMatrix> chain, std::string id = "markov");

/// Transformer predictor evaluated in single precision. Next-word models
/// provide continue_tokens, masked models fill_masked.
Predictor make_lm_predictor(std::shared_ptr<const lm::Params<float>> params, std::string id);

}  // namespace ntlab::eval
