#ifndef LEXNMT_ALIGN_HPP
#define LEXNMT_ALIGN_HPP

#include "lexnmt/corpus.hpp"

#include <filesystem>
#include <map>
#include <vector>

namespace lexnmt {

/// Sparse lexical translation probabilities p(target | source), keyed by
/// source token id.
class LexiconTable {
 public:
  using Distribution = std::map<TokenId, double>;

  const Distribution* find(TokenId source) const;
  void set(TokenId source, TokenId target, double prob);
  void set_distribution(TokenId source, Distribution dist) { entries_[source] = std::move(dist); }

  const std::map<TokenId, Distribution>& entries() const { return entries_; }
  std::size_t num_entries() const;
  bool empty() const { return entries_.empty(); }

  /// Throws DataError unless every probability is finite, within [0, 1], and
  /// every source's mass is at most 1 + 1e-9.
  void validate() const;

  /// TSV "source<TAB>target<TAB>probability" with 17 significant digits.
  void save(const std::filesystem::path& path, const Vocabulary& source_vocab, const Vocabulary& target_vocab) const;
  static LexiconTable load(const std::filesystem::path& path, const Vocabulary& source_vocab,
                           const Vocabulary& target_vocab);

  bool operator==(const LexiconTable&) const = default;

 private:
  std::map<TokenId, Distribution> entries_;
};

/// IBM Model 1 EM (no NULL source word), initialized uniformly over the target
/// words co-occurring with each source word.
LexiconTable ibm1_train(const std::vector<SentencePair>& pairs, int iterations);

/// Model 1 corpus log-likelihood sum_pairs sum_i log(1/|F| sum_j t(e_i|f_j)).
double ibm1_log_likelihood(const LexiconTable& table, const std::vector<SentencePair>& pairs);

/// Drops entries below `min_prob` without renormalizing.
LexiconTable prune_lexicon(const LexiconTable& table, double min_prob);

}  // namespace lexnmt

#endif  // LEXNMT_ALIGN_HPP
