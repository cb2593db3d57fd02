#include "lexnmt/corpus.hpp"

#include "lexnmt/error.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <stdexcept>
#include <unordered_map>

namespace lexnmt {

// ---------------------------------------------------------------- Vocabulary

Vocabulary::Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

Vocabulary::Vocabulary(const std::vector<std::string>& tokens) {
  tokens_.reserve(tokens.size() + 2);
  tokens_.emplace_back(kEnd);
  tokens_.emplace_back(kUnknown);
  index_.emplace(std::string(kEnd), kEndId);
  index_.emplace(std::string(kUnknown), kUnknownId);
  for (const auto& t : tokens) {
    if (t.empty()) throw DataError("vocabulary: empty token");
    if (!index_.emplace(t, static_cast<TokenId>(tokens_.size())).second)
      throw DataError("vocabulary: duplicate or reserved token '" + t + "'");
    tokens_.push_back(t);
  }
}

std::optional<TokenId> Vocabulary::find(std::string_view token) const {
  auto it = index_.find(token);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TokenId Vocabulary::id(std::string_view token) const { return find(token).value_or(kUnknownId); }

const std::string& Vocabulary::token(TokenId id) const {
  if (!contains(id)) throw std::out_of_range("vocabulary: id " + std::to_string(id) + " out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

Sentence Vocabulary::encode(const Tokens& tokens) const {
  Sentence ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id(t));
  return ids;
}

Tokens Vocabulary::decode(const Sentence& ids) const {
  Tokens out;
  out.reserve(ids.size());
  for (TokenId i : ids) out.push_back(token(i));
  return out;
}

void Vocabulary::save(const std::filesystem::path& path) const { write_lines(path, tokens_); }

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  auto lines = read_lines(path);
  if (lines.size() < 2 || lines[0] != kEnd || lines[1] != kUnknown)
    throw DataError(path.string() + ": vocabulary must start with " + std::string(kEnd) + " and " +
                    std::string(kUnknown));
  return Vocabulary(std::vector<std::string>(lines.begin() + 2, lines.end()));
}

Vocabulary build_vocab(const std::vector<Tokens>& corpus, std::size_t max_size) {
  if (max_size < 1) throw std::invalid_argument("build_vocab: max_size must be at least 1");
  std::map<std::string, std::size_t> counts;
  for (const auto& sentence : corpus)
    for (const auto& t : sentence)
      if (t != Vocabulary::kEnd && t != Vocabulary::kUnknown) ++counts[t];

  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  // std::map order is lexicographic, so a stable sort keeps ties in that order.
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  if (ranked.size() > max_size) ranked.resize(max_size);

  std::vector<std::string> tokens;
  tokens.reserve(ranked.size());
  for (auto& [t, _] : ranked) tokens.push_back(std::move(t));
  return Vocabulary(tokens);
}

// ---------------------------------------------------------------- Text

std::string normalize_halfwidth(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) {
    const auto b0 = static_cast<unsigned char>(text[i]);
    if (b0 == 0xEF && i + 2 < text.size()) {
      const auto b1 = static_cast<unsigned char>(text[i + 1]);
      const auto b2 = static_cast<unsigned char>(text[i + 2]);
      // U+FF10..U+FF19 digits: EF BC 90..99
      if (b1 == 0xBC && b2 >= 0x90 && b2 <= 0x99) {
        out.push_back(static_cast<char>(b2 - 0x90 + '0'));
        i += 2;
        continue;
      }
      // U+FF21..U+FF3A upper case: EF BC A1..BA
      if (b1 == 0xBC && b2 >= 0xA1 && b2 <= 0xBA) {
        out.push_back(static_cast<char>(b2 - 0xA1 + 'A'));
        i += 2;
        continue;
      }
      // U+FF41..U+FF5A lower case: EF BD 81..9A
      if (b1 == 0xBD && b2 >= 0x81 && b2 <= 0x9A) {
        out.push_back(static_cast<char>(b2 - 0x81 + 'a'));
        i += 2;
        continue;
      }
    }
    out.push_back(text[i]);
  }
  return out;
}

Tokens split_whitespace(std::string_view line) {
  Tokens out;
  std::size_t i = 0;
  auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n' || c == '\f' || c == '\v'; };
  while (i < line.size()) {
    while (i < line.size() && is_space(line[i])) ++i;
    std::size_t start = i;
    while (i < line.size() && !is_space(line[i])) ++i;
    if (i > start) out.emplace_back(line.substr(start, i - start));
  }
  return out;
}

std::string join_tokens(const Tokens& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

std::vector<std::string> utf8_characters(std::string_view word) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < word.size()) {
    const auto b = static_cast<unsigned char>(word[i]);
    std::size_t len = 1;
    if (b >= 0xF0 && b < 0xF8)
      len = 4;
    else if (b >= 0xE0)
      len = 3;
    else if (b >= 0xC0)
      len = 2;
    if (i + len > word.size()) len = 1;
    for (std::size_t k = 1; k < len; ++k)
      if ((static_cast<unsigned char>(word[i + k]) & 0xC0) != 0x80) len = 1;
    out.emplace_back(word.substr(i, len));
    i += len;
  }
  return out;
}

// ---------------------------------------------------------------- BPE

BpeModel::BpeModel(std::vector<Merge> merges) : merges_(std::move(merges)) {
  for (std::size_t r = 0; r < merges_.size(); ++r)
    if (!rank_.emplace(merges_[r], r).second)
      throw DataError("bpe: duplicate merge '" + merges_[r].first + " " + merges_[r].second + "'");
}

namespace {

// Merges every left-to-right occurrence of `pair` in `symbols`.
void merge_pair(std::vector<std::string>& symbols, const BpeModel::Merge& pair) {
  std::vector<std::string> out;
  out.reserve(symbols.size());
  for (std::size_t i = 0; i < symbols.size();) {
    if (i + 1 < symbols.size() && symbols[i] == pair.first && symbols[i + 1] == pair.second) {
      out.push_back(symbols[i] + symbols[i + 1]);
      i += 2;
    } else {
      out.push_back(std::move(symbols[i]));
      ++i;
    }
  }
  symbols = std::move(out);
}

std::vector<std::string> initial_symbols(std::string_view word) {
  auto symbols = utf8_characters(word);
  symbols.emplace_back(BpeModel::kEndOfWord);
  return symbols;
}

}  // namespace

std::vector<std::string> BpeModel::segment_word(std::string_view word) const {
  auto symbols = initial_symbols(word);
  while (symbols.size() > 1) {
    std::size_t best_rank = merges_.size();
    const Merge* best = nullptr;
    for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
      auto it = rank_.find(Merge{symbols[i], symbols[i + 1]});
      if (it != rank_.end() && it->second < best_rank) {
        best_rank = it->second;
        best = &it->first;
      }
    }
    if (best == nullptr) break;
    merge_pair(symbols, *best);
  }
  // Remove the end-of-word symbol, either standalone or as a suffix.
  std::string& last = symbols.back();
  if (last == kEndOfWord) {
    symbols.pop_back();
  } else {
    last.resize(last.size() - kEndOfWord.size());
  }
  return symbols;
}

void BpeModel::save(const std::filesystem::path& path) const {
  std::vector<std::string> lines;
  lines.reserve(merges_.size());
  for (const auto& [l, r] : merges_) lines.push_back(l + " " + r);
  write_lines(path, lines);
}

BpeModel BpeModel::load(const std::filesystem::path& path) {
  std::vector<Merge> merges;
  std::size_t line_no = 0;
  for (const auto& line : read_lines(path)) {
    ++line_no;
    auto parts = split_whitespace(line);
    if (parts.size() != 2)
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected 'left right'");
    merges.emplace_back(std::move(parts[0]), std::move(parts[1]));
  }
  return BpeModel(std::move(merges));
}

BpeModel learn_bpe(const std::vector<Tokens>& corpus, std::size_t num_merges) {
  std::map<std::string, std::size_t> word_counts;
  for (const auto& sentence : corpus)
    for (const auto& w : sentence) ++word_counts[w];
  if (word_counts.empty()) throw std::invalid_argument("empty corpus");

  struct Word {
    std::vector<std::string> symbols;
    std::size_t count;
  };
  std::vector<Word> words;
  words.reserve(word_counts.size());
  for (const auto& [w, c] : word_counts) words.push_back({initial_symbols(w), c});

  std::vector<BpeModel::Merge> merges;
  merges.reserve(num_merges);
  while (merges.size() < num_merges) {
    std::map<BpeModel::Merge, std::size_t> pair_counts;
    for (const auto& w : words)
      for (std::size_t i = 0; i + 1 < w.symbols.size(); ++i) pair_counts[{w.symbols[i], w.symbols[i + 1]}] += w.count;
    if (pair_counts.empty()) break;

    // Map iteration is lexicographic, so the first maximum wins ties.
    auto best = pair_counts.begin();
    for (auto it = pair_counts.begin(); it != pair_counts.end(); ++it)
      if (it->second > best->second) best = it;

    merges.push_back(best->first);
    for (auto& w : words) merge_pair(w.symbols, best->first);
  }
  return BpeModel(std::move(merges));
}

Tokens apply_bpe(const BpeModel& model, const Tokens& sentence) {
  Tokens out;
  std::unordered_map<std::string, std::vector<std::string>> cache;
  for (const auto& word : sentence) {
    auto it = cache.find(word);
    if (it == cache.end()) it = cache.emplace(word, model.segment_word(word)).first;
    const auto& units = it->second;
    for (std::size_t i = 0; i < units.size(); ++i)
      out.push_back(i + 1 < units.size() ? units[i] + std::string(BpeModel::kContinuation) : units[i]);
  }
  return out;
}

Tokens invert_bpe(const Tokens& subwords) {
  Tokens words;
  std::string pending;
  bool open = false;
  const auto marker = BpeModel::kContinuation;
  for (const auto& s : subwords) {
    if (s.size() >= marker.size() && s.compare(s.size() - marker.size(), marker.size(), marker) == 0) {
      pending.append(s, 0, s.size() - marker.size());
      open = true;
    } else {
      pending += s;
      words.push_back(std::move(pending));
      pending.clear();
      open = false;
    }
  }
  if (open && !pending.empty()) words.push_back(std::move(pending));
  return words;
}

// ---------------------------------------------------------------- Batching

std::size_t word_count(const SentencePair& pair) { return pair.source.size() + pair.target.size(); }

std::vector<Minibatch> make_minibatches(const std::vector<SentencePair>& pairs, std::size_t word_budget) {
  if (word_budget < 1) throw std::invalid_argument("make_minibatches: word_budget must be at least 1");
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return pairs[a].source.size() > pairs[b].source.size(); });

  std::vector<Minibatch> batches;
  std::size_t current_words = 0;
  for (std::size_t idx : order) {
    const std::size_t words = word_count(pairs[idx]);
    if (batches.empty() || (!batches.back().empty() && current_words + words > word_budget)) {
      batches.emplace_back();
      current_words = 0;
    }
    batches.back().push_back(idx);
    current_words += words;
  }
  return batches;
}

// ---------------------------------------------------------------- Files

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  for (const auto& l : lines) out << l << '\n';
  if (!out) throw DataError("write failed for '" + path.string() + "'");
}

std::pair<std::vector<std::string>, std::vector<std::string>> read_parallel(const std::filesystem::path& source,
                                                                            const std::filesystem::path& target) {
  auto src = read_lines(source);
  auto trg = read_lines(target);
  if (src.size() != trg.size())
    throw DataError("parallel corpus line counts differ: '" + source.string() + "' has " + std::to_string(src.size()) +
                    ", '" + target.string() + "' has " + std::to_string(trg.size()));
  return {std::move(src), std::move(trg)};
}

std::vector<SentencePair> encode_parallel(const std::vector<std::string>& source_lines,
                                          const std::vector<std::string>& target_lines, const Vocabulary& source_vocab,
                                          const Vocabulary& target_vocab) {
  if (source_lines.size() != target_lines.size()) throw DataError("parallel corpus line counts differ");
  std::vector<SentencePair> pairs;
  pairs.reserve(source_lines.size());
  for (std::size_t i = 0; i < source_lines.size(); ++i) {
    auto s = split_whitespace(source_lines[i]);
    auto t = split_whitespace(target_lines[i]);
    if (s.empty() || t.empty()) continue;
    pairs.push_back({source_vocab.encode(s), target_vocab.encode(t)});
  }
  return pairs;
}

}  // namespace lexnmt
