#ifndef LEXNMT_CORPUS_HPP
#define LEXNMT_CORPUS_HPP

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace lexnmt {

using TokenId = int;
using Sentence = std::vector<TokenId>;
using Tokens = std::vector<std::string>;

/// Bidirectional token <-> id map. Ids 0 and 1 are always the sentence-end
/// symbol "<s>" and the unknown symbol "<unk>".
class Vocabulary {
 public:
  static constexpr std::string_view kEnd = "<s>";
  static constexpr std::string_view kUnknown = "<unk>";
  static constexpr TokenId kEndId = 0;
  static constexpr TokenId kUnknownId = 1;

  Vocabulary();
  /// Reserved symbols are placed first; duplicates and stray reserved
  /// symbols in `tokens` are rejected.
  explicit Vocabulary(const std::vector<std::string>& tokens);

  std::size_t size() const { return tokens_.size(); }
  TokenId end_id() const { return kEndId; }
  TokenId unk_id() const { return kUnknownId; }

  std::optional<TokenId> find(std::string_view token) const;
  TokenId id(std::string_view token) const;  // <unk> when absent
  const std::string& token(TokenId id) const;
  bool contains(TokenId id) const { return id >= 0 && static_cast<std::size_t>(id) < tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  Sentence encode(const Tokens& tokens) const;
  Tokens decode(const Sentence& ids) const;

  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, TokenId, std::less<>> index_;
};

/// Keeps the `max_size` most frequent tokens (ties: lexicographically smaller
/// first) in addition to the reserved symbols.
Vocabulary build_vocab(const std::vector<Tokens>& corpus, std::size_t max_size);

struct SentencePair {
  Sentence source;
  Sentence target;
};

/// Maps full-width Latin letters and digits (U+FF10-FF19, U+FF21-FF3A,
/// U+FF41-FF5A) to ASCII. Every other byte passes through untouched.
std::string normalize_halfwidth(std::string_view text);

Tokens split_whitespace(std::string_view line);
std::string join_tokens(const Tokens& tokens);

/// Splits UTF-8 text into code points; invalid bytes become single-byte units.
std::vector<std::string> utf8_characters(std::string_view word);

/// Joint byte-pair-encoding model. Words are split into characters followed by
/// a separate end-of-word symbol; segmented output marks every non-final
/// subword of a word with a trailing continuation marker.
class BpeModel {
 public:
  using Merge = std::pair<std::string, std::string>;
  static constexpr std::string_view kEndOfWord = "</w>";
  static constexpr std::string_view kContinuation = "@@";

  BpeModel() = default;
  explicit BpeModel(std::vector<Merge> merges);

  const std::vector<Merge>& merges() const { return merges_; }
  std::size_t size() const { return merges_.size(); }

  /// Subword units of one word, without continuation markers; the final unit
  /// carries no end-of-word symbol.
  std::vector<std::string> segment_word(std::string_view word) const;

  void save(const std::filesystem::path& path) const;
  static BpeModel load(const std::filesystem::path& path);

 private:
  std::vector<Merge> merges_;
  std::map<Merge, std::size_t> rank_;
};

BpeModel learn_bpe(const std::vector<Tokens>& corpus, std::size_t num_merges);
Tokens apply_bpe(const BpeModel& model, const Tokens& sentence);
Tokens invert_bpe(const Tokens& subwords);

using Minibatch = std::vector<std::size_t>;

/// Sorts pairs by descending source length (stable) and groups them
/// sequentially so each batch's word count (source + target tokens) stays
/// within `word_budget`; an oversized pair becomes a singleton batch.
/// Batches hold indices into `pairs`.
std::vector<Minibatch> make_minibatches(const std::vector<SentencePair>& pairs, std::size_t word_budget = 2048);

std::size_t word_count(const SentencePair& pair);

std::vector<std::string> read_lines(const std::filesystem::path& path);
void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines);

/// Reads a line-aligned parallel corpus; throws DataError when the files have
/// different line counts.
std::pair<std::vector<std::string>, std::vector<std::string>> read_parallel(const std::filesystem::path& source,
                                                                            const std::filesystem::path& target);

/// Whitespace-tokenizes aligned lines into id pairs, skipping pairs where
/// either side is empty.
std::vector<SentencePair> encode_parallel(const std::vector<std::string>& source_lines,
                                          const std::vector<std::string>& target_lines, const Vocabulary& source_vocab,
                                          const Vocabulary& target_vocab);

}  // namespace lexnmt

#endif  // LEXNMT_CORPUS_HPP
