#include "lexnmt/align.hpp"

#include "lexnmt/error.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace lexnmt {

const LexiconTable::Distribution* LexiconTable::find(TokenId source) const {
  auto it = entries_.find(source);
  return it == entries_.end() ? nullptr : &it->second;
}

void LexiconTable::set(TokenId source, TokenId target, double prob) { entries_[source][target] = prob; }

std::size_t LexiconTable::num_entries() const {
  std::size_t n = 0;
  for (const auto& [_, dist] : entries_) n += dist.size();
  return n;
}

void LexiconTable::validate() const {
  for (const auto& [src, dist] : entries_) {
    double mass = 0.0;
    for (const auto& [trg, p] : dist) {
      if (!std::isfinite(p) || p < 0.0 || p > 1.0)
        throw DataError("lexicon: probability " + std::to_string(p) + " for (" + std::to_string(src) + ", " +
                        std::to_string(trg) + ") outside [0, 1]");
      mass += p;
    }
    if (mass > 1.0 + 1e-9)
      throw DataError("lexicon: distribution of source id " + std::to_string(src) + " sums to " +
                      std::to_string(mass));
  }
}

void LexiconTable::save(const std::filesystem::path& path, const Vocabulary& source_vocab,
                        const Vocabulary& target_vocab) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  char buf[64];
  for (const auto& [src, dist] : entries_)
    for (const auto& [trg, p] : dist) {
      std::snprintf(buf, sizeof buf, "%.17g", p);
      out << source_vocab.token(src) << '\t' << target_vocab.token(trg) << '\t' << buf << '\n';
    }
}

LexiconTable LexiconTable::load(const std::filesystem::path& path, const Vocabulary& source_vocab,
                                const Vocabulary& target_vocab) {
  LexiconTable table;
  std::size_t line_no = 0;
  for (const auto& line : read_lines(path)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab1 = line.find('\t');
    const auto tab2 = tab1 == std::string::npos ? std::string::npos : line.find('\t', tab1 + 1);
    if (tab2 == std::string::npos)
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected source<TAB>target<TAB>probability");
    const std::string src = line.substr(0, tab1);
    const std::string trg = line.substr(tab1 + 1, tab2 - tab1 - 1);
    double p = 0.0;
    try {
      std::size_t used = 0;
      p = std::stod(line.substr(tab2 + 1), &used);
      if (tab2 + 1 + used != line.size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": bad probability");
    }
    auto s = source_vocab.find(src);
    auto t = target_vocab.find(trg);
    if (!s || !t)
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": token not in vocabulary");
    table.set(*s, *t, p);
  }
  table.validate();
  return table;
}

LexiconTable ibm1_train(const std::vector<SentencePair>& pairs, int iterations) {
  if (pairs.empty()) throw std::invalid_argument("ibm1_train: empty corpus");
  if (iterations < 1) throw std::invalid_argument("ibm1_train: iterations must be at least 1");

  // Uniform start over co-occurring targets.
  std::map<TokenId, LexiconTable::Distribution> t;
  for (const auto& p : pairs)
    for (TokenId f : p.source)
      for (TokenId e : p.target) t[f][e] = 0.0;
  for (auto& [f, dist] : t)
    for (auto& [e, v] : dist) v = 1.0 / static_cast<double>(dist.size());

  for (int it = 0; it < iterations; ++it) {
    std::map<TokenId, LexiconTable::Distribution> counts;
    for (const auto& p : pairs) {
      for (TokenId e : p.target) {
        double denom = 0.0;
        for (TokenId f : p.source) denom += t[f][e];
        if (denom <= 0.0) continue;
        for (TokenId f : p.source) counts[f][e] += t[f][e] / denom;
      }
    }
    for (auto& [f, dist] : counts) {
      double total = 0.0;
      for (const auto& [e, c] : dist) total += c;
      auto& row = t[f];
      for (auto& [e, v] : row) {
        auto c = dist.find(e);
        v = (c == dist.end() || total <= 0.0) ? 0.0 : c->second / total;
      }
    }
  }

  LexiconTable table;
  for (auto& [f, dist] : t) table.set_distribution(f, std::move(dist));
  return table;
}

double ibm1_log_likelihood(const LexiconTable& table, const std::vector<SentencePair>& pairs) {
  double ll = 0.0;
  for (const auto& p : pairs) {
    for (TokenId e : p.target) {
      double sum = 0.0;
      for (TokenId f : p.source) {
        if (const auto* dist = table.find(f)) {
          auto it = dist->find(e);
          if (it != dist->end()) sum += it->second;
        }
      }
      ll += sum > 0.0 ? std::log(sum / static_cast<double>(p.source.size()))
                      : -std::numeric_limits<double>::infinity();
    }
  }
  return ll;
}

LexiconTable prune_lexicon(const LexiconTable& table, double min_prob) {
  if (!(min_prob >= 0.0 && min_prob < 1.0)) throw std::invalid_argument("prune_lexicon: min_prob must be in [0, 1)");
  LexiconTable out;
  for (const auto& [f, dist] : table.entries()) {
    LexiconTable::Distribution kept;
    for (const auto& [e, p] : dist)
      if (p >= min_prob) kept.emplace(e, p);
    out.set_distribution(f, std::move(kept));
  }
  return out;
}

}  // namespace lexnmt
