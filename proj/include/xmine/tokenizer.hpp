#pragma once

// Shared-vocabulary byte-pair encoding over all languages of a family.

#include <algorithm>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "xmine/common.hpp"

namespace xmine::bpe {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kUnk = 1;
inline constexpr TokenId kMask = 2;
inline constexpr TokenId kBos = 3;
inline constexpr TokenId kSep = 4;
inline constexpr TokenId kNumSpecials = 5;

inline constexpr std::string_view kEndOfWord = "</w>";
/// Printed in place of an UNK token by decode (U+FFFD).
inline constexpr std::string_view kUnkGlyph = "\xEF\xBF\xBD";

inline const std::vector<std::string>& special_names() {
  static const std::vector<std::string> names = {"<pad>", "<unk>", "<mask>", "<s>", "</s>"};
  return names;
}

/// Splits a UTF-8 string into code points (kept as byte strings).
inline std::vector<std::string> utf8_chars(std::string_view s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t len = 1;
    if (c >= 0xF0) len = 4;
    else if (c >= 0xE0) len = 3;
    else if (c >= 0xC0) len = 2;
    len = std::min(len, s.size() - i);
    out.emplace_back(s.substr(i, len));
    i += len;
  }
  return out;
}

/// Initial symbol sequence of a word: its characters, the last one carrying
/// the end-of-word marker.
inline std::vector<std::string> word_symbols(std::string_view word) {
  auto syms = utf8_chars(word);
  if (!syms.empty()) syms.back() += kEndOfWord;
  return syms;
}

class BpeModel {
 public:
  BpeModel() {
    for (const auto& n : special_names()) symbols_.push_back(n);
  }

  const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }
  std::size_t vocab_size() const { return symbols_.size(); }
  const std::string& symbol(TokenId id) const { return symbols_.at(static_cast<std::size_t>(id)); }

  TokenId id_of(const std::string& sym) const {
    const auto it = ids_.find(sym);
    return it == ids_.end() ? kUnk : it->second;
  }

  /// Encodes whitespace-separated words. Characters outside the learned
  /// alphabet become UNK.
  TokenSeq encode(std::string_view sentence) const {
    TokenSeq out;
    for (const auto& word : split_words(sentence)) {
      const auto& ids = encode_word(word);
      out.insert(out.end(), ids.begin(), ids.end());
    }
    return out;
  }

  std::string decode(const TokenSeq& ids) const {
    std::string out;
    for (const auto id : ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= symbols_.size())
        throw DataError("decode: token id " + std::to_string(id) + " outside vocabulary of " +
                        std::to_string(symbols_.size()));
      if (id == kUnk) {
        out += kUnkGlyph;
        continue;
      }
      if (id < kNumSpecials) continue;
      const auto& sym = symbols_[static_cast<std::size_t>(id)];
      if (sym.size() >= kEndOfWord.size() && sym.compare(sym.size() - kEndOfWord.size(), kEndOfWord.size(), kEndOfWord) == 0) {
        out.append(sym, 0, sym.size() - kEndOfWord.size());
        out += ' ';
      } else {
        out += sym;
      }
    }
    if (!out.empty() && out.back() == ' ') out.pop_back();
    return out;
  }

  /// Applies merges to one word by priority: repeatedly merge the adjacent
  /// pair with the lowest merge rank.
  std::vector<std::string> segment(std::string_view word) const {
    auto syms = word_symbols(word);
    while (syms.size() > 1) {
      std::size_t best_rank = merges_.size();
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
        const auto it = rank_.find(pair_key(syms[i], syms[i + 1]));
        if (it != rank_.end() && it->second < best_rank) best_rank = it->second;
      }
      if (best_rank == merges_.size()) break;
      const auto& [left, right] = merges_[best_rank];
      std::vector<std::string> next;
      next.reserve(syms.size());
      for (std::size_t i = 0; i < syms.size(); ++i) {
        if (i + 1 < syms.size() && syms[i] == left && syms[i + 1] == right) {
          next.push_back(left + right);
          ++i;
        } else {
          next.push_back(std::move(syms[i]));
        }
      }
      syms = std::move(next);
    }
    return syms;
  }

  void write(std::ostream& os) const {
    os << "bpe " << merges_.size() << ' ' << symbols_.size() << '\n';
    for (const auto& [a, b] : merges_) os << a << ' ' << b << '\n';
    for (std::size_t i = 0; i < symbols_.size(); ++i) os << symbols_[i] << '\t' << i << '\n';
  }

  void save(const std::string& path) const {
    auto os = io::open_out(path);
    write(os);
  }

  static BpeModel read(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw DataError("bpe model: empty file");
    std::istringstream hdr(line);
    std::string tag;
    std::size_t n_merges = 0, n_vocab = 0;
    if (!(hdr >> tag >> n_merges >> n_vocab) || tag != "bpe") throw DataError("bpe model: bad header");
    BpeModel m;
    m.symbols_.clear();
    for (std::size_t i = 0; i < n_merges; ++i) {
      if (!std::getline(is, line)) throw DataError("bpe model: truncated merge list");
      const auto sp = line.find(' ');
      if (sp == std::string::npos) throw DataError("bpe model: bad merge line");
      m.merges_.emplace_back(line.substr(0, sp), line.substr(sp + 1));
    }
    for (std::size_t i = 0; i < n_vocab; ++i) {
      if (!std::getline(is, line)) throw DataError("bpe model: truncated vocabulary");
      const auto tab = line.rfind('\t');
      if (tab == std::string::npos || std::stoul(line.substr(tab + 1)) != i)
        throw DataError("bpe model: vocabulary ids must be dense and ordered");
      m.symbols_.push_back(line.substr(0, tab));
    }
    for (TokenId i = 0; i < kNumSpecials; ++i) {
      if (m.symbols_.size() <= static_cast<std::size_t>(i) || m.symbols_[static_cast<std::size_t>(i)] != special_names()[static_cast<std::size_t>(i)])
        throw DataError("bpe model: special tokens missing");
    }
    m.reindex();
    return m;
  }

  static BpeModel load(const std::string& path) {
    auto is = io::open_in(path);
    return read(is);
  }

 private:
  friend BpeModel learn_bpe(const std::vector<std::string>& corpus, std::size_t n_merges);

  static std::string pair_key(const std::string& a, const std::string& b) {
    std::string k;
    k.reserve(a.size() + b.size() + 1);
    k += a;
    k += '\x01';
    k += b;
    return k;
  }

  void add_symbol(const std::string& sym) {
    if (ids_.count(sym)) return;
    ids_.emplace(sym, static_cast<TokenId>(symbols_.size()));
    symbols_.push_back(sym);
  }

  void reindex() {
    ids_.clear();
    rank_.clear();
    cache_.clear();
    for (std::size_t i = kNumSpecials; i < symbols_.size(); ++i) ids_.emplace(symbols_[i], static_cast<TokenId>(i));
    for (std::size_t r = 0; r < merges_.size(); ++r) rank_.emplace(pair_key(merges_[r].first, merges_[r].second), r);
  }

  const TokenSeq& encode_word(const std::string& word) const {
    const auto it = cache_.find(word);
    if (it != cache_.end()) return it->second;
    TokenSeq ids;
    for (const auto& s : segment(word)) ids.push_back(id_of(s));
    return cache_.emplace(word, std::move(ids)).first->second;
  }

  std::vector<std::pair<std::string, std::string>> merges_;
  std::vector<std::string> symbols_;
  std::unordered_map<std::string, TokenId> ids_;
  std::unordered_map<std::string, std::size_t> rank_;
  mutable std::unordered_map<std::string, TokenSeq> cache_;
};

/// Greedy BPE: repeatedly merges the most frequent adjacent symbol pair
/// inside words (ties: lexicographically smallest pair) until n_merges are
/// learned or no pair occurs at least twice.
inline BpeModel learn_bpe(const std::vector<std::string>& corpus, std::size_t n_merges) {
  std::map<std::string, std::size_t> word_freq;
  for (const auto& line : corpus) {
    for (auto& w : split_words(line)) ++word_freq[w];
  }
  if (word_freq.empty()) throw DataError("learn_bpe: empty corpus");

  struct Word {
    std::vector<std::string> syms;
    std::size_t freq;
  };
  std::vector<Word> words;
  words.reserve(word_freq.size());
  std::vector<std::string> alphabet;
  for (const auto& [w, f] : word_freq) {
    words.push_back({word_symbols(w), f});
    for (auto c : utf8_chars(w)) {
      alphabet.push_back(c);
      alphabet.push_back(c + std::string(kEndOfWord));
    }
  }
  std::sort(alphabet.begin(), alphabet.end());
  alphabet.erase(std::unique(alphabet.begin(), alphabet.end()), alphabet.end());

  BpeModel model;
  for (const auto& s : alphabet) model.add_symbol(s);

  for (std::size_t step = 0; step < n_merges; ++step) {
    std::map<std::pair<std::string, std::string>, std::size_t> counts;
    for (const auto& w : words) {
      for (std::size_t i = 0; i + 1 < w.syms.size(); ++i) counts[{w.syms[i], w.syms[i + 1]}] += w.freq;
    }
    // std::map iterates in lexicographic order, so the first maximum wins ties.
    const std::pair<std::string, std::string>* best = nullptr;
    std::size_t best_count = 0;
    for (const auto& [pair, c] : counts) {
      if (c > best_count) {
        best_count = c;
        best = &pair;
      }
    }
    if (best == nullptr || best_count < 2) break;
    const auto merge = *best;
    const std::string joined = merge.first + merge.second;
    for (auto& w : words) {
      std::vector<std::string> next;
      next.reserve(w.syms.size());
      for (std::size_t i = 0; i < w.syms.size(); ++i) {
        if (i + 1 < w.syms.size() && w.syms[i] == merge.first && w.syms[i + 1] == merge.second) {
          next.push_back(joined);
          ++i;
        } else {
          next.push_back(std::move(w.syms[i]));
        }
      }
      w.syms = std::move(next);
    }
    model.merges_.push_back(merge);
    model.add_symbol(joined);
  }
  model.reindex();
  return model;
}

}  // namespace xmine::bpe
