#ifndef LEXNMT_DECODE_HPP
#define LEXNMT_DECODE_HPP

#include "lexnmt/model.hpp"

#include <span>
#include <vector>

namespace lexnmt {

struct Hypothesis {
  Sentence tokens;  // includes the sentence end when complete
  double logprob = 0.0;
  std::vector<DecoderSnapshot> states;  // one per ensemble member
  bool complete = false;
};

/// logprob + lambda * |tokens|, the log of P(E') e^{lambda |E'|}.
double score_hypothesis(const Hypothesis& h, double word_penalty);

/// Strict weak order used everywhere in the search: higher score first, then
/// shorter, then lexicographically smaller tokens.
bool better_hypothesis(const Hypothesis& a, const Hypothesis& b, double word_penalty);

/// Elementwise mean of equally sized probability vectors.
Vector ensemble_distribution(const std::vector<Vector>& distributions);

struct BeamOptions {
  int beam_size = 5;
  double word_penalty = 0.0;
  std::size_t max_len = 0;  // 0: 2|F| + 10
};

/// Beam search over one model or a probability-averaged ensemble. Returns the
/// best complete hypothesis, or the best partial one (complete == false) when
/// nothing finished within max_len.
Hypothesis beam_search(std::span<const Model* const> models, std::span<const TokenId> source,
                       const BeamOptions& options = {});
Hypothesis beam_search(const Model& model, std::span<const TokenId> source, const BeamOptions& options = {});

/// Beam search with beam size 1.
Hypothesis greedy_decode(const Model& model, std::span<const TokenId> source, std::size_t max_len = 0);

}  // namespace lexnmt

#endif  // LEXNMT_DECODE_HPP
