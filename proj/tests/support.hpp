// Shared fixtures for the unit and acceptance tests.
#ifndef LEXNMT_TESTS_SUPPORT_HPP
#define LEXNMT_TESTS_SUPPORT_HPP

#include "lexnmt/decode.hpp"
#include "lexnmt/model.hpp"
#include "lexnmt/train.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace lexnmt::testing {

// Vocabulary of `size` entries: the two reserved symbols plus w2, w3, ...
inline Vocabulary numbered_vocab(std::size_t size, const std::string& prefix = "w") {
  std::vector<std::string> words;
  for (std::size_t i = 2; i < size; ++i) words.push_back(prefix + std::to_string(i));
  return Vocabulary(words);
}

inline Model small_model(std::size_t src_vocab, std::size_t trg_vocab, int dim, AttentionKind kind,
                         std::uint64_t seed, std::optional<LexiconTable> lexicon = std::nullopt) {
  ModelConfig config;
  config.embed_dim = dim;
  config.hidden_dim = dim;
  config.attention = kind;
  return Model::create(numbered_vocab(src_vocab, "f"), numbered_vocab(trg_vocab, "e"), config, seed,
                       std::move(lexicon));
}

// Redraws every tensor (biases included) uniformly in [-scale, scale].
inline void randomize(Parameters& params, double scale, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& [name, m] : params.tensors())
    for (Eigen::Index j = 0; j < m->cols(); ++j)
      for (Eigen::Index i = 0; i < m->rows(); ++i) (*m)(i, j) = (2.0 * uniform01(rng) - 1.0) * scale;
}

// A random lexicon over word ids 2.. with a few entries per source word,
// leaving some source words without an entry.
inline LexiconTable random_lexicon(std::size_t src_vocab, std::size_t trg_vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  LexiconTable table;
  for (std::size_t f = 2; f < src_vocab; ++f) {
    if (f % 5 == 0) continue;
    std::vector<double> w(3);
    for (auto& x : w) x = 0.1 + uniform01(rng);
    double total = 0.0;
    for (double x : w) total += x;
    for (std::size_t k = 0; k < w.size(); ++k) {
      const auto e = static_cast<TokenId>(2 + (f * 3 + k * 7) % (trg_vocab - 2));
      table.set(static_cast<TokenId>(f), e, w[k] / total);
    }
  }
  return table;
}

struct TensorError {
  std::string name;
  double relative_error;
};

// Central finite differences of `loss` against `analytic`, one relative error
// ||fd - analytic|| / max(||fd||, ||analytic||) per non-empty tensor.
inline std::vector<TensorError> finite_difference_check(Model model, const std::function<double(const Model&)>& loss,
                                                        const Parameters& analytic, double step = 1e-5) {
  std::vector<TensorError> out;
  auto tensors = model.params.tensors();
  auto grads = analytic.tensors();
  for (std::size_t t = 0; t < tensors.size(); ++t) {
    Matrix& m = *tensors[t].second;
    if (m.size() == 0) continue;
    Matrix numeric(m.rows(), m.cols());
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      for (Eigen::Index i = 0; i < m.rows(); ++i) {
        const double saved = m(i, j);
        m(i, j) = saved + step;
        const double up = loss(model);
        m(i, j) = saved - step;
        const double down = loss(model);
        m(i, j) = saved;
        numeric(i, j) = (up - down) / (2.0 * step);
      }
    const Matrix& g = *grads[t].second;
    const double scale = std::max({numeric.norm(), g.norm(), 1e-12});
    out.push_back({tensors[t].first, (numeric - g).norm() / scale});
  }
  return out;
}

// ---------------------------------------------------------------- toy tasks

// Random sequences over content ids 2..vocab-1, target identical to source.
inline std::vector<SentencePair> copy_task(std::size_t count, std::size_t vocab, std::size_t min_len,
                                           std::size_t max_len, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<SentencePair> pairs;
  for (std::size_t n = 0; n < count; ++n) {
    const auto len = min_len + static_cast<std::size_t>(uniform01(rng) * static_cast<double>(max_len - min_len + 1));
    Sentence s;
    for (std::size_t i = 0; i < len; ++i)
      s.push_back(static_cast<TokenId>(2 + static_cast<std::size_t>(uniform01(rng) * static_cast<double>(vocab - 2))));
    pairs.push_back({s, s});
  }
  return pairs;
}

// Word-for-word translation through a fixed random bijection, with the
// target order reversed, so that word identity must be learned through
// attention.
struct DictionaryTask {
  std::vector<TokenId> mapping;  // source id -> target id
  std::vector<SentencePair> train;
  std::vector<SentencePair> dev;
};

inline DictionaryTask dictionary_task(std::size_t vocab, std::size_t train_size, std::size_t dev_size,
                                      std::size_t min_len, std::size_t max_len, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  DictionaryTask task;
  std::vector<TokenId> targets;
  for (std::size_t i = 2; i < vocab; ++i) targets.push_back(static_cast<TokenId>(i));
  for (std::size_t i = targets.size(); i > 1; --i)
    std::swap(targets[i - 1], targets[static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i))]);
  task.mapping.assign(vocab, Vocabulary::kUnknownId);
  for (std::size_t i = 2; i < vocab; ++i) task.mapping[i] = targets[i - 2];
  auto make = [&](std::size_t count) {
    std::vector<SentencePair> out;
    for (const auto& p : copy_task(count, vocab, min_len, max_len, rng())) {
      Sentence t;
      for (auto it = p.source.rbegin(); it != p.source.rend(); ++it) t.push_back(task.mapping[*it]);
      out.push_back({p.source, t});
    }
    return out;
  };
  task.train = make(train_size);
  task.dev = make(dev_size);
  return task;
}

inline LexiconTable dictionary_lexicon(const DictionaryTask& task) {
  LexiconTable table;
  for (std::size_t f = 2; f < task.mapping.size(); ++f) table.set(static_cast<TokenId>(f), task.mapping[f], 1.0);
  return table;
}

// Fraction of reference positions where the greedy output has the same token
// (compared position by position; extra or missing tokens count as errors).
inline double greedy_token_accuracy(const Model& model, const std::vector<SentencePair>& pairs) {
  std::size_t correct = 0, total = 0;
  for (const auto& p : pairs) {
    const Sentence out = strip_end(greedy_decode(model, p.source).tokens, model.target_vocab.end_id());
    for (std::size_t i = 0; i < p.target.size(); ++i) correct += i < out.size() && out[i] == p.target[i];
    total += std::max(p.target.size(), out.size());
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

inline double per_token_nll(const Model& model, const std::vector<SentencePair>& pairs) {
  std::size_t tokens = 0;
  for (const auto& p : pairs) tokens += p.target.size() + 1;
  return nll_value(model, pairs) / static_cast<double>(tokens);
}

}  // namespace lexnmt::testing

#endif  // LEXNMT_TESTS_SUPPORT_HPP
