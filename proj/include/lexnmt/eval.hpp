#ifndef LEXNMT_EVAL_HPP
#define LEXNMT_EVAL_HPP

#include <array>
#include <cstddef>
#include <string>
#include <vector>

namespace lexnmt {

inline constexpr int kBleuOrder = 4;

/// Clipped n-gram matches and hypothesis n-gram totals for n = 1..4, plus
/// both lengths.
struct NgramStats {
  std::array<std::size_t, kBleuOrder> matches{};
  std::array<std::size_t, kBleuOrder> totals{};
  std::size_t hypothesis_length = 0;
  std::size_t reference_length = 0;

  NgramStats& operator+=(const NgramStats& other);
  bool operator==(const NgramStats&) const = default;
};

template <typename Token>
NgramStats ngram_stats(const std::vector<Token>& hypothesis, const std::vector<Token>& reference);

/// Corpus BLEU in [0, 100], unsmoothed, single reference.
template <typename Token>
double bleu(const std::vector<std::vector<Token>>& hypotheses, const std::vector<std::vector<Token>>& references);

/// BLEU+1 in [0, 1]: unigram precision unsmoothed, (m+1)/(c+1) for n >= 2,
/// standard brevity penalty; empty hypothesis scores 0.
template <typename Token>
double sbleu(const std::vector<Token>& hypothesis, const std::vector<Token>& reference);

/// 1 - sbleu(hypothesis, reference).
template <typename Token>
double mrt_error(const std::vector<Token>& reference, const std::vector<Token>& hypothesis);

/// 100 * total hypothesis tokens / total reference tokens.
template <typename Token>
double length_ratio(const std::vector<std::vector<Token>>& hypotheses, const std::vector<std::vector<Token>>& references);

double bleu_from_stats(const NgramStats& stats);
double sbleu_from_stats(const NgramStats& stats);

}  // namespace lexnmt

#endif  // LEXNMT_EVAL_HPP
