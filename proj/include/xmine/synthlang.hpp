#pragma once

// Synthetic language family: a shared base grammar rendered into several
// cipher languages. Gives corpora with exact translation ground truth.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "xmine/common.hpp"

namespace xmine::synth {

using WordId = std::uint32_t;
using BaseSentence = std::vector<WordId>;
using BaseCorpus = std::vector<BaseSentence>;

/// Generative grammar shared by every language of a family.
///
/// Word ids are Zipf ranks (0 = most frequent). Word classes interleave over
/// ranks (class = id mod class_count). Each word also carries a latent
/// semantic direction; a sentence draws a latent direction and each slot
/// favours words aligned with it, which gives the corpus co-occurrence
/// structure that distributional models can pick up.
struct BaseGrammar {
  std::uint32_t vocab_size = 500;
  double zipf_exponent = 1.0;
  std::uint32_t len_min = 5;
  std::uint32_t len_max = 14;
  std::uint32_t template_count = 24;
  std::uint32_t class_count = 6;
  std::uint32_t semantic_dim = 6;
  double semantic_strength = 3.0;
  std::uint64_t seed = 17;

  void validate() const {
    if (vocab_size < 50) throw ConfigError("grammar: vocab_size must be >= 50");
    if (len_min < 1 || len_min > len_max || len_max > 64)
      throw ConfigError("grammar: need 1 <= len_min <= len_max <= 64");
    if (!(zipf_exponent > 0.0)) throw ConfigError("grammar: zipf_exponent must be > 0");
    if (template_count < 1) throw ConfigError("grammar: template_count must be >= 1");
    if (class_count < 1 || class_count > vocab_size) throw ConfigError("grammar: bad class_count");
    if (semantic_dim < 1) throw ConfigError("grammar: semantic_dim must be >= 1");
    if (semantic_strength < 0.0) throw ConfigError("grammar: semantic_strength must be >= 0");
  }

  std::string canonical() const {
    char buf[256];
    std::snprintf(buf, sizeof buf, "v=%u;z=%.17g;lmin=%u;lmax=%u;t=%u;c=%u;sd=%u;ss=%.17g;seed=%llu",
                  vocab_size, zipf_exponent, len_min, len_max, template_count, class_count, semantic_dim,
                  semantic_strength, static_cast<unsigned long long>(seed));
    return buf;
  }

  std::uint64_t hash() const { return fnv1a64(canonical()); }

  std::uint32_t word_class(WordId w) const { return w % class_count; }
};

namespace detail {

/// Materialized templates and per-word tables for sentence sampling.
class GrammarTables {
 public:
  explicit GrammarTables(const BaseGrammar& g) : g_(g) {
    g.validate();
    Rng rng(derive_seed(g.seed, "grammar.templates"));
    templates_.resize(g.template_count);
    for (auto& t : templates_) {
      const auto len = g.len_min + static_cast<std::uint32_t>(rng.below(g.len_max - g.len_min + 1));
      t.resize(len);
      for (auto& c : t) c = static_cast<std::uint32_t>(rng.below(g.class_count));
    }
    Rng sem(derive_seed(g.seed, "grammar.semantics"));
    directions_.resize(static_cast<std::size_t>(g.vocab_size) * g.semantic_dim);
    for (std::uint32_t w = 0; w < g.vocab_size; ++w) {
      double norm = 0.0;
      for (std::uint32_t d = 0; d < g.semantic_dim; ++d) {
        const double x = sem.normal();
        directions_[w * g.semantic_dim + d] = x;
        norm += x * x;
      }
      norm = std::sqrt(norm);
      for (std::uint32_t d = 0; d < g.semantic_dim; ++d) directions_[w * g.semantic_dim + d] /= norm;
    }
    class_words_.resize(g.class_count);
    for (WordId w = 0; w < g.vocab_size; ++w) class_words_[g.word_class(w)].push_back(w);
    zipf_.resize(g.vocab_size);
    for (WordId w = 0; w < g.vocab_size; ++w) zipf_[w] = std::pow(static_cast<double>(w + 1), -g.zipf_exponent);
  }

  BaseSentence sample(Rng& rng, std::vector<double>& scratch) const {
    const auto& tmpl = templates_[rng.below(templates_.size())];
    const std::uint32_t dim = g_.semantic_dim;
    std::vector<double> z(dim);
    double norm = 0.0;
    for (auto& x : z) {
      x = rng.normal();
      norm += x * x;
    }
    norm = std::sqrt(norm);
    for (auto& x : z) x /= norm;

    scratch.assign(g_.vocab_size, 0.0);
    for (WordId w = 0; w < g_.vocab_size; ++w) {
      double dot = 0.0;
      for (std::uint32_t d = 0; d < dim; ++d) dot += directions_[w * dim + d] * z[d];
      scratch[w] = zipf_[w] * std::exp(g_.semantic_strength * dot);
    }
    BaseSentence out;
    out.reserve(tmpl.size());
    for (const auto c : tmpl) {
      const auto& words = class_words_[c];
      double total = 0.0;
      for (const auto w : words) total += scratch[w];
      double r = rng.uniform() * total;
      WordId pick = words.back();
      for (const auto w : words) {
        r -= scratch[w];
        if (r < 0.0) {
          pick = w;
          break;
        }
      }
      out.push_back(pick);
    }
    return out;
  }

 private:
  BaseGrammar g_;
  std::vector<std::vector<std::uint32_t>> templates_;
  std::vector<double> directions_;
  std::vector<std::vector<WordId>> class_words_;
  std::vector<double> zipf_;
};

}  // namespace detail

/// Draws n base sentences. Pure function of (grammar, n, seed).
inline BaseCorpus generate_base_corpus(const BaseGrammar& grammar, std::size_t n, std::uint64_t seed) {
  if (n < 1) throw ConfigError("generate_base_corpus: n must be >= 1");
  const detail::GrammarTables tables(grammar);
  Rng rng(derive_seed(seed, "base-corpus"));
  std::vector<double> scratch;
  BaseCorpus out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(tables.sample(rng, scratch));
  return out;
}

/// Like generate_base_corpus but rejects repeated sentences, so that
/// distinct base indices never render to the same text.
inline BaseCorpus generate_distinct_corpus(const BaseGrammar& grammar, std::size_t n, std::uint64_t seed) {
  if (n < 1) throw ConfigError("generate_distinct_corpus: n must be >= 1");
  const detail::GrammarTables tables(grammar);
  Rng rng(derive_seed(seed, "base-corpus"));
  std::vector<double> scratch;
  std::unordered_set<std::string> seen;
  BaseCorpus out;
  out.reserve(n);
  std::size_t attempts = 0;
  while (out.size() < n) {
    if (++attempts > 20 * n + 1000) throw ConfigError("grammar cannot produce enough distinct sentences");
    auto s = tables.sample(rng, scratch);
    std::string key(reinterpret_cast<const char*>(s.data()), s.size() * sizeof(WordId));
    if (seen.insert(std::move(key)).second) out.push_back(std::move(s));
  }
  return out;
}

/// One synthetic language: cipher (base word -> surface word), a reordering
/// rule applied within consecutive windows, and per-class suffixes folded
/// into the surface forms.
class LanguageSpec {
 public:
  LanguageSpec() = default;

  /// Builds a spec from explicit tables. `surface[w]` is the full surface
  /// form of base word w; `perm` permutes positions inside each window.
  static LanguageSpec from_tables(std::vector<std::string> surface, std::vector<std::uint32_t> perm,
                                  std::vector<std::string> suffixes = {}, std::uint32_t lang_id = 0,
                                  std::uint64_t lang_seed = 0, std::uint64_t grammar_hash = 0) {
    LanguageSpec spec;
    spec.lang_id_ = lang_id;
    spec.lang_seed_ = lang_seed;
    spec.grammar_hash_ = grammar_hash;
    spec.surface_ = std::move(surface);
    spec.perm_ = perm.empty() ? std::vector<std::uint32_t>{0} : std::move(perm);
    spec.suffixes_ = std::move(suffixes);
    std::vector<bool> seen(spec.perm_.size(), false);
    for (const auto p : spec.perm_) {
      if (p >= spec.perm_.size() || seen[p]) throw ConfigError("language: reorder is not a permutation");
      seen[p] = true;
    }
    for (WordId w = 0; w < spec.surface_.size(); ++w) {
      if (!spec.inverse_.emplace(spec.surface_[w], w).second)
        throw ConfigError("language: cipher is not injective at '" + spec.surface_[w] + "'");
    }
    return spec;
  }

  std::uint32_t lang_id() const { return lang_id_; }
  std::uint64_t lang_seed() const { return lang_seed_; }
  std::uint64_t grammar_hash() const { return grammar_hash_; }
  std::uint32_t window() const { return static_cast<std::uint32_t>(perm_.size()); }
  const std::vector<std::uint32_t>& permutation() const { return perm_; }
  const std::vector<std::string>& suffixes() const { return suffixes_; }
  std::size_t vocab_size() const { return surface_.size(); }
  const std::vector<std::string>& surface_vocab() const { return surface_; }

  const std::string& cipher(WordId w) const {
    if (w >= surface_.size()) throw DataError("render: unknown base word id " + std::to_string(w));
    return surface_[w];
  }

  WordId decipher(std::string_view word) const {
    const auto it = inverse_.find(std::string(word));
    if (it == inverse_.end()) throw DataError("derender: unknown surface word '" + std::string(word) + "'");
    return it->second;
  }

  bool knows(std::string_view word) const { return inverse_.count(std::string(word)) != 0; }

  /// Applies the window permutation: output slot i of a full window takes
  /// input slot perm[i]. A trailing partial window is left in place.
  template <typename T>
  std::vector<T> reorder(const std::vector<T>& in) const {
    std::vector<T> out(in);
    const std::size_t w = perm_.size();
    for (std::size_t start = 0; start + w <= in.size(); start += w) {
      for (std::size_t i = 0; i < w; ++i) out[start + i] = in[start + perm_[i]];
    }
    return out;
  }

  template <typename T>
  std::vector<T> unreorder(const std::vector<T>& in) const {
    std::vector<T> out(in);
    const std::size_t w = perm_.size();
    for (std::size_t start = 0; start + w <= in.size(); start += w) {
      for (std::size_t i = 0; i < w; ++i) out[start + perm_[i]] = in[start + i];
    }
    return out;
  }

  /// Reproducibility record: the spec is regenerated from these, never
  /// stored as explicit tables.
  std::string record() const {
    std::ostringstream os;
    os << "lang_id=" << lang_id_ << " lang_seed=" << lang_seed_ << " grammar_hash=" << grammar_hash_;
    return os.str();
  }

 private:
  std::uint32_t lang_id_ = 0;
  std::uint64_t lang_seed_ = 0;
  std::uint64_t grammar_hash_ = 0;
  std::vector<std::string> surface_;
  std::unordered_map<std::string, WordId> inverse_;
  std::vector<std::uint32_t> perm_{0};
  std::vector<std::string> suffixes_;
};

/// Derives a language from a seed. lang_seed 0 is reserved for the identity
/// language (word w renders as "w<id>", no reordering, no suffixes).
inline LanguageSpec derive_language(const BaseGrammar& grammar, std::uint64_t lang_seed, std::uint32_t lang_id = 0) {
  grammar.validate();
  const auto ghash = grammar.hash();
  if (lang_seed == 0) {
    std::vector<std::string> surface(grammar.vocab_size);
    for (WordId w = 0; w < grammar.vocab_size; ++w) surface[w] = "w" + std::to_string(w);
    return LanguageSpec::from_tables(std::move(surface), {0}, {}, lang_id, 0, ghash);
  }

  Rng rng(derive_seed(lang_seed, "language"));
  static constexpr std::string_view kConsonants = "bcdfghjklmnpqrstvwxz";
  static constexpr std::string_view kVowels = "aeiouy";

  // Each language picks its own phoneme inventory from a shared alphabet.
  std::string consonants(kConsonants);
  std::string vowels(kVowels);
  rng.shuffle(consonants);
  rng.shuffle(vowels);
  consonants.resize(12);
  vowels.resize(4);
  std::sort(consonants.begin(), consonants.end());
  std::sort(vowels.begin(), vowels.end());

  auto syllable = [&]() {
    std::string s;
    s += consonants[rng.below(consonants.size())];
    s += vowels[rng.below(vowels.size())];
    if (rng.bernoulli(0.25)) s += consonants[rng.below(consonants.size())];
    return s;
  };

  std::vector<std::string> suffixes(grammar.class_count);
  for (auto& suf : suffixes) {
    if (rng.bernoulli(0.6)) {
      suf += vowels[rng.below(vowels.size())];
      if (rng.bernoulli(0.5)) suf += consonants[rng.below(consonants.size())];
    }
  }

  std::unordered_set<std::string> used;
  std::vector<std::string> surface(grammar.vocab_size);
  for (WordId w = 0; w < grammar.vocab_size; ++w) {
    const std::size_t base_syl = w < 30 ? 1 : (w < 200 ? 2 : 3);
    for (int attempt = 0;; ++attempt) {
      std::string stem;
      const std::size_t n_syl = base_syl + (attempt > 20 ? 1 : 0) + rng.below(2);
      for (std::size_t i = 0; i < n_syl; ++i) stem += syllable();
      std::string word = stem + suffixes[grammar.word_class(w)];
      if (used.insert(word).second) {
        surface[w] = std::move(word);
        break;
      }
    }
  }

  const std::uint32_t window = 1 + static_cast<std::uint32_t>(rng.below(3));
  std::vector<std::uint32_t> perm(window);
  std::iota(perm.begin(), perm.end(), 0u);
  if (window > 1) {
    // Any non-identity permutation of the window.
    do {
      rng.shuffle(perm);
    } while (std::is_sorted(perm.begin(), perm.end()));
  }
  return LanguageSpec::from_tables(std::move(surface), std::move(perm), std::move(suffixes), lang_id, lang_seed,
                                   ghash);
}

/// Renders a base sentence. Each output word is independently perturbed
/// with probability noise_rate: dropped or replaced (even odds) by a random
/// word of the same language. noise_rate 0 never touches the rng.
inline std::string render(const BaseSentence& base, const LanguageSpec& spec, double noise_rate, Rng& rng) {
  if (!(noise_rate >= 0.0 && noise_rate <= 1.0)) throw ConfigError("render: noise_rate must be in [0,1]");
  std::vector<std::string> words;
  words.reserve(base.size());
  for (const auto w : base) words.push_back(spec.cipher(w));
  words = spec.reorder(words);
  if (noise_rate > 0.0) {
    std::vector<std::string> noisy;
    noisy.reserve(words.size());
    for (auto& w : words) {
      if (!rng.bernoulli(noise_rate)) {
        noisy.push_back(std::move(w));
      } else if (rng.bernoulli(0.5)) {
        noisy.push_back(spec.cipher(static_cast<WordId>(rng.below(spec.vocab_size()))));
      }
    }
    words = std::move(noisy);
  }
  return join(words, " ");
}

inline std::string render(const BaseSentence& base, const LanguageSpec& spec) {
  Rng unused(0);
  return render(base, spec, 0.0, unused);
}

/// Inverse of a noiseless render.
inline BaseSentence derender(std::string_view text, const LanguageSpec& spec) {
  const auto words = split_words(text);
  BaseSentence ids;
  ids.reserve(words.size());
  for (const auto& w : words) ids.push_back(spec.decipher(w));
  return spec.unreorder(ids);
}

struct SentencePair {
  std::string src;
  std::string tgt;
  std::size_t base_idx = 0;
};

/// Renders base sentences [offset, offset + n_pairs) into both languages.
/// Source side is noiseless; target side carries noise_rate (0 gives the
/// clean "authentic" condition, > 0 mimics machine-translated output).
inline std::vector<SentencePair> build_parallel_set(const BaseCorpus& corpus, const LanguageSpec& spec_a,
                                                    const LanguageSpec& spec_b, std::size_t n_pairs,
                                                    double noise_rate, std::uint64_t seed, std::size_t offset = 0) {
  if (offset + n_pairs > corpus.size())
    throw ConfigError("build_parallel_set: requested " + std::to_string(n_pairs) + " pairs from offset " +
                      std::to_string(offset) + " but corpus has " + std::to_string(corpus.size()));
  Rng rng(derive_seed(seed, "parallel-set"));
  std::vector<SentencePair> out;
  out.reserve(n_pairs);
  for (std::size_t i = offset; i < offset + n_pairs; ++i) {
    SentencePair p;
    p.base_idx = i;
    p.src = render(corpus[i], spec_a);
    p.tgt = render(corpus[i], spec_b, noise_rate, rng);
    out.push_back(std::move(p));
  }
  return out;
}

struct MonoSentence {
  std::size_t base_idx = 0;
  std::string text;
};

inline std::vector<MonoSentence> render_mono(const BaseCorpus& corpus, const LanguageSpec& spec, std::size_t offset,
                                             std::size_t count) {
  if (offset + count > corpus.size()) throw ConfigError("render_mono: range exceeds corpus");
  std::vector<MonoSentence> out;
  out.reserve(count);
  for (std::size_t i = offset; i < offset + count; ++i) out.push_back({i, render(corpus[i], spec)});
  return out;
}

enum class Split { Train, Test };

inline const char* split_name(Split s) { return s == Split::Train ? "train" : "test"; }

struct PoolEntry {
  std::string id;
  std::string text;
};

struct MiningTask {
  std::vector<PoolEntry> pool_a;
  std::vector<PoolEntry> pool_b;
  std::vector<std::pair<std::string, std::string>> gold;
  Split split = Split::Train;
};

/// Hides the pair sentences inside monolingual pools, BUCC style. Pools are
/// shuffled before ids are assigned so ids carry no positional hint.
inline MiningTask build_mining_task(const std::vector<SentencePair>& pairs, const std::vector<MonoSentence>& mono_a,
                                    const std::vector<MonoSentence>& mono_b, std::uint64_t seed,
                                    Split split = Split::Train) {
  std::unordered_set<std::size_t> pair_idx;
  for (const auto& p : pairs) pair_idx.insert(p.base_idx);
  for (const auto* mono : {&mono_a, &mono_b}) {
    for (const auto& m : *mono) {
      if (pair_idx.count(m.base_idx))
        throw DataError("build_mining_task: base sentence " + std::to_string(m.base_idx) +
                        " appears both in pairs and in a monolingual pool");
    }
  }

  // Entries carry the pair index (or npos for filler) through the shuffle.
  constexpr std::size_t kFiller = static_cast<std::size_t>(-1);
  struct Slot {
    std::size_t pair;
    const std::string* text;
  };
  auto make_pool = [&](bool side_a, const std::vector<MonoSentence>& mono, std::uint64_t s) {
    std::vector<Slot> slots;
    slots.reserve(pairs.size() + mono.size());
    for (std::size_t i = 0; i < pairs.size(); ++i) slots.push_back({i, side_a ? &pairs[i].src : &pairs[i].tgt});
    for (const auto& m : mono) slots.push_back({kFiller, &m.text});
    Rng rng(s);
    rng.shuffle(slots);
    return slots;
  };
  const auto slots_a = make_pool(true, mono_a, derive_seed(seed, "pool-a"));
  const auto slots_b = make_pool(false, mono_b, derive_seed(seed, "pool-b"));

  MiningTask task;
  task.split = split;
  std::vector<std::string> id_a(pairs.size()), id_b(pairs.size());
  char buf[32];
  for (std::size_t i = 0; i < slots_a.size(); ++i) {
    std::snprintf(buf, sizeof buf, "A-%06zu", i);
    task.pool_a.push_back({buf, *slots_a[i].text});
    if (slots_a[i].pair != kFiller) id_a[slots_a[i].pair] = buf;
  }
  for (std::size_t i = 0; i < slots_b.size(); ++i) {
    std::snprintf(buf, sizeof buf, "B-%06zu", i);
    task.pool_b.push_back({buf, *slots_b[i].text});
    if (slots_b[i].pair != kFiller) id_b[slots_b[i].pair] = buf;
  }
  for (std::size_t i = 0; i < pairs.size(); ++i) task.gold.emplace_back(id_a[i], id_b[i]);
  std::sort(task.gold.begin(), task.gold.end());
  return task;
}

// ---------------------------------------------------------------------------
// Files: corpora are one sentence per line; pools are "id<TAB>sentence";
// gold is "id_a<TAB>id_b".

inline void write_corpus(const std::string& path, const std::vector<std::string>& sentences) {
  io::write_lines(path, sentences);
}

inline std::vector<std::string> read_corpus(const std::string& path) { return io::read_lines(path); }

inline void write_pool(const std::string& path, const std::vector<PoolEntry>& pool) {
  auto os = io::open_out(path);
  for (const auto& e : pool) os << e.id << '\t' << e.text << '\n';
}

inline std::vector<PoolEntry> read_pool(const std::string& path) {
  std::vector<PoolEntry> out;
  for (const auto& line : io::read_lines(path)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw DataError("pool line without TAB in " + path);
    out.push_back({line.substr(0, tab), line.substr(tab + 1)});
  }
  return out;
}

inline void write_gold(const std::string& path, const std::vector<std::pair<std::string, std::string>>& gold) {
  auto os = io::open_out(path);
  for (const auto& [a, b] : gold) os << a << '\t' << b << '\n';
}

inline std::vector<std::pair<std::string, std::string>> read_gold(const std::string& path) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& line : io::read_lines(path)) {
    if (line.empty()) continue;
    const auto parts = split(line, '\t');
    if (parts.size() != 2) throw DataError("gold line must have two TAB-separated ids in " + path);
    out.emplace_back(parts[0], parts[1]);
  }
  return out;
}

/// Writes <prefix>.a.tsv, <prefix>.b.tsv and <prefix>.gold.tsv.
inline void save_mining_task(const std::string& prefix, const MiningTask& task) {
  write_pool(prefix + ".a.tsv", task.pool_a);
  write_pool(prefix + ".b.tsv", task.pool_b);
  write_gold(prefix + ".gold.tsv", task.gold);
}

inline MiningTask load_mining_task(const std::string& prefix, Split split = Split::Test) {
  MiningTask task;
  task.split = split;
  task.pool_a = read_pool(prefix + ".a.tsv");
  task.pool_b = read_pool(prefix + ".b.tsv");
  task.gold = read_gold(prefix + ".gold.tsv");
  std::unordered_set<std::string> ids_a, ids_b;
  for (const auto& e : task.pool_a) ids_a.insert(e.id);
  for (const auto& e : task.pool_b) ids_b.insert(e.id);
  for (const auto& [a, b] : task.gold) {
    if (!ids_a.count(a) || !ids_b.count(b)) throw DataError("gold pair " + a + "/" + b + " not found in pools");
  }
  return task;
}

}  // namespace xmine::synth
