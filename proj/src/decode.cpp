#include "lexnmt/decode.hpp"

#include "lexnmt/train.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <stdexcept>

namespace lexnmt {

double score_hypothesis(const Hypothesis& h, double word_penalty) {
  return h.logprob + word_penalty * static_cast<double>(h.tokens.size());
}

bool better_hypothesis(const Hypothesis& a, const Hypothesis& b, double word_penalty) {
  const double sa = score_hypothesis(a, word_penalty), sb = score_hypothesis(b, word_penalty);
  if (sa != sb) return sa > sb;
  if (a.tokens.size() != b.tokens.size()) return a.tokens.size() < b.tokens.size();
  return a.tokens < b.tokens;
}

Vector ensemble_distribution(const std::vector<Vector>& distributions) {
  if (distributions.empty()) throw std::invalid_argument("ensemble_distribution: no distributions");
  Vector sum = distributions.front();
  for (std::size_t k = 1; k < distributions.size(); ++k) {
    if (distributions[k].size() != sum.size())
      throw std::invalid_argument("ensemble_distribution: length mismatch (" + std::to_string(sum.size()) + " vs " +
                                  std::to_string(distributions[k].size()) + ")");
    sum += distributions[k];
  }
  return sum / static_cast<double>(distributions.size());
}

namespace {

struct Candidate {
  std::size_t parent;
  TokenId word;
  double logprob;
  double score;
};

}  // namespace

Hypothesis beam_search(std::span<const Model* const> models, std::span<const TokenId> source,
                       const BeamOptions& options) {
  if (models.empty()) throw std::invalid_argument("beam_search: no models");
  if (source.empty()) throw std::invalid_argument("beam_search: empty source sentence");
  if (options.beam_size < 1) throw std::invalid_argument("beam_search: beam_size must be at least 1");
  const std::size_t max_len = options.max_len ? options.max_len : default_max_len(source.size());
  const double lambda = options.word_penalty;

  std::vector<std::unique_ptr<InferenceSession>> sessions;
  for (const Model* m : models) {
    if (m->config.target_vocab_size != models.front()->config.target_vocab_size)
      throw std::invalid_argument("beam_search: ensemble members disagree on target vocabulary size");
    sessions.push_back(std::make_unique<InferenceSession>(*m, source));
  }
  const TokenId end = sessions.front()->end_id();

  Hypothesis start;
  for (const auto& s : sessions) start.states.push_back(s->initial_state());
  std::vector<Hypothesis> beam{std::move(start)};
  std::optional<Hypothesis> best_complete;

  for (std::size_t length = 0; length < max_len && !beam.empty(); ++length) {
    std::vector<Candidate> candidates;
    std::vector<std::vector<DecoderSnapshot>> next_states(beam.size());
    for (std::size_t b = 0; b < beam.size(); ++b) {
      const Hypothesis& h = beam[b];
      const TokenId previous = h.tokens.empty() ? end : h.tokens.back();
      Vector log_probs;
      if (sessions.size() == 1) {
        auto step = sessions[0]->step(h.states[0], previous);
        log_probs = std::move(step.log_probs);
        next_states[b].push_back(std::move(step.state));
      } else {
        std::vector<Vector> probs;
        for (std::size_t k = 0; k < sessions.size(); ++k) {
          auto step = sessions[k]->step(h.states[k], previous);
          probs.push_back(step.log_probs.array().exp());
          next_states[b].push_back(std::move(step.state));
        }
        log_probs = ensemble_distribution(probs).array().log();
      }
      for (Eigen::Index w = 0; w < log_probs.size(); ++w) {
        const double lp = h.logprob + log_probs(w);
        candidates.push_back({b, static_cast<TokenId>(w), lp, lp + lambda * static_cast<double>(length + 1)});
      }
    }

    // All candidates share one length, so ties fall through to token order.
    auto better = [&](const Candidate& a, const Candidate& c) {
      if (a.score != c.score) return a.score > c.score;
      const Sentence& pa = beam[a.parent].tokens;
      const Sentence& pc = beam[c.parent].tokens;
      if (a.parent != c.parent && pa != pc) return pa < pc;
      return a.word < c.word;
    };
    const auto keep = std::min(candidates.size(), static_cast<std::size_t>(options.beam_size));
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep), candidates.end(),
                      better);

    std::vector<Hypothesis> next;
    for (std::size_t i = 0; i < keep; ++i) {
      const Candidate& c = candidates[i];
      Hypothesis h;
      h.tokens = beam[c.parent].tokens;
      h.tokens.push_back(c.word);
      h.logprob = c.logprob;
      h.complete = c.word == end;
      if (h.complete) {
        if (!best_complete || better_hypothesis(h, *best_complete, lambda)) best_complete = std::move(h);
      } else {
        h.states = next_states[c.parent];
        next.push_back(std::move(h));
      }
    }
    beam = std::move(next);

    // Extending a partial hypothesis lowers its log-probability and adds at
    // most max(lambda, 0) per token, which bounds what it can still reach.
    if (best_complete && !beam.empty()) {
      const Hypothesis& top = beam.front();
      const double remaining = static_cast<double>(max_len - top.tokens.size());
      const double bound = score_hypothesis(top, lambda) + std::max(lambda, 0.0) * remaining;
      if (bound <= score_hypothesis(*best_complete, lambda)) break;
    }
  }

  if (best_complete) return *best_complete;
  if (beam.empty()) throw std::logic_error("beam_search: no hypotheses left");
  return beam.front();
}

Hypothesis beam_search(const Model& model, std::span<const TokenId> source, const BeamOptions& options) {
  const Model* one[] = {&model};
  return beam_search(std::span<const Model* const>(one), source, options);
}

Hypothesis greedy_decode(const Model& model, std::span<const TokenId> source, std::size_t max_len) {
  BeamOptions options;
  options.beam_size = 1;
  options.max_len = max_len;
  return beam_search(model, source, options);
}

}  // namespace lexnmt
