#include "lexnmt/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace lexnmt {

NgramStats& NgramStats::operator+=(const NgramStats& other) {
  for (int n = 0; n < kBleuOrder; ++n) {
    matches[n] += other.matches[n];
    totals[n] += other.totals[n];
  }
  hypothesis_length += other.hypothesis_length;
  reference_length += other.reference_length;
  return *this;
}

namespace {

template <typename Token>
std::map<std::vector<Token>, std::size_t> count_ngrams(const std::vector<Token>& tokens, std::size_t n) {
  std::map<std::vector<Token>, std::size_t> counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i)
    ++counts[std::vector<Token>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return counts;
}

double brevity_penalty(std::size_t hypothesis_length, std::size_t reference_length) {
  if (hypothesis_length >= reference_length) return 1.0;
  return std::exp(1.0 - static_cast<double>(reference_length) / static_cast<double>(hypothesis_length));
}

}  // namespace

template <typename Token>
NgramStats ngram_stats(const std::vector<Token>& hypothesis, const std::vector<Token>& reference) {
  NgramStats stats;
  stats.hypothesis_length = hypothesis.size();
  stats.reference_length = reference.size();
  for (int n = 1; n <= kBleuOrder; ++n) {
    const auto hyp = count_ngrams(hypothesis, static_cast<std::size_t>(n));
    const auto ref = count_ngrams(reference, static_cast<std::size_t>(n));
    std::size_t matched = 0;
    for (const auto& [gram, count] : hyp) {
      auto it = ref.find(gram);
      if (it != ref.end()) matched += std::min(count, it->second);
    }
    stats.matches[n - 1] = matched;
    stats.totals[n - 1] = hypothesis.size() >= static_cast<std::size_t>(n) ? hypothesis.size() - n + 1 : 0;
  }
  return stats;
}

double bleu_from_stats(const NgramStats& s) {
  if (s.hypothesis_length == 0) return 0.0;
  double log_precision = 0.0;
  for (int n = 0; n < kBleuOrder; ++n) {
    if (s.matches[n] == 0 || s.totals[n] == 0) return 0.0;
    log_precision += std::log(static_cast<double>(s.matches[n]) / static_cast<double>(s.totals[n]));
  }
  return 100.0 * brevity_penalty(s.hypothesis_length, s.reference_length) * std::exp(log_precision / kBleuOrder);
}

double sbleu_from_stats(const NgramStats& s) {
  if (s.hypothesis_length == 0 || s.matches[0] == 0) return 0.0;
  double log_precision = std::log(static_cast<double>(s.matches[0]) / static_cast<double>(s.totals[0]));
  for (int n = 1; n < kBleuOrder; ++n)
    log_precision += std::log((static_cast<double>(s.matches[n]) + 1.0) / (static_cast<double>(s.totals[n]) + 1.0));
  return brevity_penalty(s.hypothesis_length, s.reference_length) * std::exp(log_precision / kBleuOrder);
}

template <typename Token>
double bleu(const std::vector<std::vector<Token>>& hypotheses, const std::vector<std::vector<Token>>& references) {
  if (hypotheses.size() != references.size())
    throw std::invalid_argument("bleu: " + std::to_string(hypotheses.size()) + " hypotheses vs " +
                                std::to_string(references.size()) + " references");
  if (references.empty()) throw std::invalid_argument("bleu: no references");
  NgramStats total;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) total += ngram_stats(hypotheses[i], references[i]);
  return bleu_from_stats(total);
}

template <typename Token>
double sbleu(const std::vector<Token>& hypothesis, const std::vector<Token>& reference) {
  return sbleu_from_stats(ngram_stats(hypothesis, reference));
}

template <typename Token>
double mrt_error(const std::vector<Token>& reference, const std::vector<Token>& hypothesis) {
  return 1.0 - sbleu(hypothesis, reference);
}

template <typename Token>
double length_ratio(const std::vector<std::vector<Token>>& hypotheses, const std::vector<std::vector<Token>>& references) {
  if (hypotheses.size() != references.size()) throw std::invalid_argument("length_ratio: list lengths differ");
  std::size_t hyp = 0, ref = 0;
  for (const auto& h : hypotheses) hyp += h.size();
  for (const auto& r : references) ref += r.size();
  if (ref == 0) throw std::invalid_argument("length_ratio: empty references");
  return 100.0 * static_cast<double>(hyp) / static_cast<double>(ref);
}

#define LEXNMT_INSTANTIATE_EVAL(Token)                                                                            \
  template NgramStats ngram_stats<Token>(const std::vector<Token>&, const std::vector<Token>&);                   \
  template double bleu<Token>(const std::vector<std::vector<Token>>&, const std::vector<std::vector<Token>>&);     \
  template double sbleu<Token>(const std::vector<Token>&, const std::vector<Token>&);                             \
  template double mrt_error<Token>(const std::vector<Token>&, const std::vector<Token>&);                         \
  template double length_ratio<Token>(const std::vector<std::vector<Token>>&, const std::vector<std::vector<Token>>&);

LEXNMT_INSTANTIATE_EVAL(int)
LEXNMT_INSTANTIATE_EVAL(std::string)

#undef LEXNMT_INSTANTIATE_EVAL

}  // namespace lexnmt
