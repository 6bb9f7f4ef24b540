#pragma once

// Word-mapping baseline: static word vectors per language, an orthogonal map
// between the two spaces learned by self-learning Procrustes, and bag-of-words
// sentence vectors built from the mapped word vectors.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "xmine/common.hpp"
#include "xmine/embedder.hpp"

namespace xmine::wordmap {

using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using VecD = Eigen::Matrix<double, 1, Eigen::Dynamic>;

/// Rows follow frequency rank: row 0 is the most frequent word, ties in
/// count ordered by the word string.
struct WordVecTable {
  std::vector<std::string> words;
  std::vector<std::uint64_t> counts;
  MatD vectors;

  std::size_t size() const { return words.size(); }
  std::size_t dim() const { return static_cast<std::size_t>(vectors.cols()); }

  std::optional<std::size_t> find(const std::string& w) const {
    const auto it = index_.find(w);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < words.size(); ++i) {
      if (!index_.emplace(words[i], i).second) throw DataError("word table: duplicate word '" + words[i] + "'");
    }
  }

 private:
  std::unordered_map<std::string, std::size_t> index_;
};

enum class Algorithm { Sgns, Ppmi };

inline const char* algorithm_name(Algorithm a) { return a == Algorithm::Sgns ? "sgns" : "ppmi"; }

inline Algorithm parse_algorithm(std::string_view s) {
  if (s == "sgns") return Algorithm::Sgns;
  if (s == "ppmi") return Algorithm::Ppmi;
  throw ConfigError("unknown word-vector algorithm '" + std::string(s) + "'");
}

struct WordVecOptions {
  Algorithm algorithm = Algorithm::Sgns;
  std::size_t dim = 32;
  std::size_t epochs = 5;
  std::size_t window = 5;
  std::size_t negatives = 5;
  std::uint64_t min_count = 1;
  double lr = 0.025;

  void validate() const {
    if (dim == 0) throw ConfigError("word vectors: dim must be positive");
    if (window == 0) throw ConfigError("word vectors: window must be positive");
    if (algorithm == Algorithm::Sgns && (epochs == 0 || negatives == 0 || !(lr > 0.0)))
      throw ConfigError("word vectors: sgns needs epochs, negatives and lr > 0");
  }
};

namespace detail {

using Tokenized = std::vector<std::vector<std::size_t>>;

/// Counts words, keeps those with count >= min_count, orders by rank and
/// maps the corpus onto row indices (dropped words vanish).
inline std::pair<WordVecTable, Tokenized> build_vocab(std::span<const std::string> corpus, std::uint64_t min_count) {
  if (corpus.empty()) throw DataError("word vectors: empty corpus");
  std::map<std::string, std::uint64_t> counts;
  std::vector<std::vector<std::string>> split;
  split.reserve(corpus.size());
  for (const auto& s : corpus) {
    split.push_back(split_words(s));
    for (const auto& w : split.back()) ++counts[w];
  }
  std::vector<std::pair<std::string, std::uint64_t>> kept;
  for (const auto& [w, c] : counts) {
    if (c >= min_count) kept.emplace_back(w, c);
  }
  if (kept.empty()) throw DataError("word vectors: vocabulary empty after min_count " + std::to_string(min_count));
  std::stable_sort(kept.begin(), kept.end(), [](const auto& x, const auto& y) { return x.second > y.second; });
  WordVecTable t;
  for (auto& [w, c] : kept) {
    t.words.push_back(w);
    t.counts.push_back(c);
  }
  t.reindex();
  Tokenized ids(split.size());
  for (std::size_t i = 0; i < split.size(); ++i) {
    for (const auto& w : split[i]) {
      if (const auto r = t.find(w)) ids[i].push_back(*r);
    }
  }
  return {std::move(t), std::move(ids)};
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline void train_sgns(WordVecTable& t, const Tokenized& corpus, const WordVecOptions& o, std::uint64_t seed) {
  const std::size_t v = t.size(), d = o.dim;
  Rng rng(seed);
  std::vector<double> in(v * d), out(v * d, 0.0);
  for (auto& x : in) x = (rng.uniform() - 0.5) / static_cast<double>(d);

  // Negatives are drawn from the unigram distribution raised to 0.75.
  std::vector<double> cdf(v);
  double acc = 0.0;
  for (std::size_t i = 0; i < v; ++i) cdf[i] = acc += std::pow(static_cast<double>(t.counts[i]), 0.75);
  auto draw_negative = [&] {
    const double u = rng.uniform() * acc;
    return std::min<std::size_t>(v - 1, static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin()));
  };

  std::size_t total = 0;
  for (const auto& s : corpus) total += s.size();
  total *= o.epochs;
  std::size_t seen = 0;
  std::vector<double> grad_in(d);
  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < o.epochs; ++epoch) {
    rng.shuffle(order);
    for (const auto si : order) {
      const auto& s = corpus[si];
      for (std::size_t i = 0; i < s.size(); ++i, ++seen) {
        const double lr = o.lr * std::max(1e-4, 1.0 - static_cast<double>(seen) / static_cast<double>(total + 1));
        const std::size_t reach = o.window - rng.below(o.window);
        const std::size_t lo = i >= reach ? i - reach : 0, hi = std::min(s.size() - 1, i + reach);
        double* wi = &in[s[i] * d];
        for (std::size_t c = lo; c <= hi; ++c) {
          if (c == i) continue;
          std::fill(grad_in.begin(), grad_in.end(), 0.0);
          for (std::size_t n = 0; n <= o.negatives; ++n) {
            std::size_t target = s[c];
            double label = 1.0;
            if (n > 0) {
              target = draw_negative();
              if (target == s[c]) continue;
              label = 0.0;
            }
            double* wo = &out[target * d];
            double dot = 0.0;
            for (std::size_t k = 0; k < d; ++k) dot += wi[k] * wo[k];
            const double g = lr * (label - sigmoid(dot));
            for (std::size_t k = 0; k < d; ++k) {
              grad_in[k] += g * wo[k];
              wo[k] += g * wi[k];
            }
          }
          for (std::size_t k = 0; k < d; ++k) wi[k] += grad_in[k];
        }
      }
    }
  }
  t.vectors = Eigen::Map<MatD>(in.data(), static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(d));
}

}  // namespace detail

/// Positive pointwise mutual information over symmetric co-occurrence
/// windows, rows and columns indexed by table rank.
inline MatD ppmi_matrix(std::size_t vocab, const detail::Tokenized& corpus, std::size_t window) {
  MatD c = MatD::Zero(static_cast<Eigen::Index>(vocab), static_cast<Eigen::Index>(vocab));
  for (const auto& s : corpus) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      const std::size_t hi = std::min(s.size() - 1, i + window);
      for (std::size_t j = i + 1; j <= hi; ++j) {
        c(static_cast<Eigen::Index>(s[i]), static_cast<Eigen::Index>(s[j])) += 1.0;
        c(static_cast<Eigen::Index>(s[j]), static_cast<Eigen::Index>(s[i])) += 1.0;
      }
    }
  }
  const double total = c.sum();
  if (total <= 0.0) return c;
  const VecD rows = c.rowwise().sum().transpose();
  const VecD cols = c.colwise().sum();
  for (Eigen::Index i = 0; i < c.rows(); ++i) {
    for (Eigen::Index j = 0; j < c.cols(); ++j) {
      const double x = c(i, j);
      c(i, j) = x > 0.0 ? std::max(0.0, std::log(x * total / (rows(i) * cols(j)))) : 0.0;
    }
  }
  return c;
}

/// Rank-r factors of a symmetric PPMI matrix: ppmi ~= u * diag(s) * v^T.
struct Factorization {
  MatD u;
  VecD s;
  MatD v;

  MatD reconstruct() const { return u * s.asDiagonal() * v.transpose(); }
};

inline Factorization truncated_svd(const MatD& m, std::size_t rank) {
  Eigen::BDCSVD<Eigen::MatrixXd> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto r = static_cast<Eigen::Index>(std::min<std::size_t>(rank, static_cast<std::size_t>(svd.singularValues().size())));
  Factorization f;
  f.u = svd.matrixU().leftCols(r);
  f.s = svd.singularValues().head(r).transpose();
  f.v = svd.matrixV().leftCols(r);
  return f;
}

/// Vocabulary and row-index corpus as seen by the trainers; exposed so the
/// PPMI path can be checked against its own factorization.
inline std::pair<WordVecTable, detail::Tokenized> prepare_corpus(std::span<const std::string> corpus,
                                                                 std::uint64_t min_count) {
  return detail::build_vocab(corpus, min_count);
}

/// Deterministic per seed. PPMI vectors are u * sqrt(s), zero-padded when the
/// vocabulary is smaller than dim.
inline WordVecTable train_word_vectors(std::span<const std::string> corpus, const WordVecOptions& o,
                                       std::uint64_t seed) {
  o.validate();
  auto [table, ids] = detail::build_vocab(corpus, o.min_count);
  if (o.algorithm == Algorithm::Sgns) {
    detail::train_sgns(table, ids, o, seed);
  } else {
    const auto f = truncated_svd(ppmi_matrix(table.size(), ids, o.window), o.dim);
    table.vectors = MatD::Zero(static_cast<Eigen::Index>(table.size()), static_cast<Eigen::Index>(o.dim));
    table.vectors.leftCols(f.u.cols()) = f.u * f.s.cwiseSqrt().asDiagonal();
  }
  if (!table.vectors.allFinite()) throw NumericError("word vectors: non-finite entries after training");
  return table;
}

/// Unit length, mean-centred, unit length again: the standard preprocessing
/// before orthogonal alignment.
inline WordVecTable normalized(WordVecTable t) {
  auto unit = [](MatD& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      const double n = m.row(i).norm();
      if (n > 0.0) m.row(i) /= n;
    }
  };
  unit(t.vectors);
  const VecD mean = t.vectors.colwise().mean();
  t.vectors.rowwise() -= mean;
  unit(t.vectors);
  return t;
}

// Text format: one line per word, "word v1 ... vd", in rank order. Counts
// are not stored; a loaded table has zero counts.
inline void save_word_vectors(const std::string& path, const WordVecTable& t) {
  auto os = io::open_out(path);
  char buf[32];
  for (std::size_t i = 0; i < t.size(); ++i) {
    os << t.words[i];
    for (Eigen::Index j = 0; j < t.vectors.cols(); ++j) {
      std::snprintf(buf, sizeof buf, " %.9g", static_cast<float>(t.vectors(static_cast<Eigen::Index>(i), j)));
      os << buf;
    }
    os << '\n';
  }
}

inline WordVecTable load_word_vectors(const std::string& path) {
  WordVecTable t;
  std::vector<std::vector<double>> rows;
  for (const auto& line : io::read_lines(path)) {
    if (line.empty()) continue;
    const auto parts = split_words(line);
    if (parts.size() < 2) throw DataError("word vectors: malformed line '" + line + "'");
    if (!rows.empty() && parts.size() - 1 != rows.front().size())
      throw DataError("word vectors: inconsistent dimension at word '" + parts[0] + "'");
    t.words.push_back(parts[0]);
    t.counts.push_back(0);
    std::vector<double> r;
    for (std::size_t i = 1; i < parts.size(); ++i) r.push_back(static_cast<double>(std::stof(parts[i])));
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw DataError("word vectors: empty file " + path);
  t.vectors.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      t.vectors(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  }
  t.reindex();
  return t;
}

/// x (row vector) maps to x * w. w^T w = I.
struct OrthogonalMap {
  MatD w;
  bool degenerate = false;

  static OrthogonalMap identity(std::size_t d) {
    return {MatD::Identity(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d)), false};
  }
  std::size_t dim() const { return static_cast<std::size_t>(w.rows()); }
};

/// Minimizes ||X W - Y||_F over orthogonal W: W = U V^T with X^T Y = U S V^T.
/// Rank-deficient X^T Y still yields an orthogonal W and sets `degenerate`.
inline OrthogonalMap orthogonal_procrustes(const MatD& x, const MatD& y) {
  if (x.rows() != y.rows() || x.cols() != y.cols())
    throw DataError("procrustes: X and Y must have the same shape");
  if (x.cols() == 0) throw DataError("procrustes: zero dimension");
  const Eigen::MatrixXd m = x.transpose() * y;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  OrthogonalMap r;
  r.w = svd.matrixU() * svd.matrixV().transpose();
  const auto& s = svd.singularValues();
  r.degenerate = s.size() == 0 || s(s.size() - 1) <= 1e-10 * std::max(1.0, s(0));
  return r;
}

// Map file: "ORTH", u32 dim, dim*dim f32 row-major.
inline void save_map(const std::string& path, const OrthogonalMap& m) {
  auto os = io::open_out(path, true);
  io::write_magic(os, "ORTH");
  io::write_u32(os, static_cast<std::uint32_t>(m.dim()));
  for (Eigen::Index i = 0; i < m.w.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.w.cols(); ++j) io::write_f32(os, static_cast<float>(m.w(i, j)));
  }
}

inline OrthogonalMap load_map(const std::string& path) {
  auto is = io::open_in(path, true);
  io::expect_magic(is, "ORTH");
  const auto d = static_cast<Eigen::Index>(io::read_u32(is));
  OrthogonalMap m;
  m.w.resize(d, d);
  for (Eigen::Index i = 0; i < d; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) m.w(i, j) = io::read_f32(is);
  }
  return m;
}

enum class AlignInit { OracleSeed, FrequencyRank };

inline const char* align_init_name(AlignInit i) { return i == AlignInit::OracleSeed ? "oracle" : "frequency"; }

inline AlignInit parse_align_init(std::string_view s) {
  if (s == "oracle") return AlignInit::OracleSeed;
  if (s == "frequency") return AlignInit::FrequencyRank;
  throw ConfigError("unknown alignment init '" + std::string(s) + "'");
}

/// (row in A, row in B), sorted.
using Dictionary = std::vector<std::pair<std::size_t, std::size_t>>;

struct AlignOptions {
  AlignInit init = AlignInit::FrequencyRank;
  /// Pairs rank i of A with rank i of B for i < seed_size (frequency init).
  std::size_t seed_size = 100;
  std::size_t max_iters = 20;
  std::size_t csls_k = 10;
  /// Induction considers the top `pool_start` ranks on each side, doubling
  /// every iteration up to the full vocabulary.
  std::size_t pool_start = 200;
};

struct AlignResult {
  OrthogonalMap map;
  Dictionary dictionary;
  /// Size of each accepted induced dictionary; non-decreasing.
  std::vector<std::size_t> trace;
  std::size_t iterations = 0;
  bool converged = false;
};

namespace detail {

inline MatD gather(const MatD& m, const Dictionary& dict, bool second) {
  MatD out(static_cast<Eigen::Index>(dict.size()), m.cols());
  for (std::size_t i = 0; i < dict.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(second ? dict[i].second : dict[i].first));
  return out;
}

/// Mean of the k largest entries of each row.
inline std::vector<double> mean_top_k(const MatD& s, std::size_t k) {
  std::vector<double> out(static_cast<std::size_t>(s.rows()));
  std::vector<double> row;
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    row.assign(s.row(i).data(), s.row(i).data() + s.cols());
    const std::size_t kk = std::min<std::size_t>(k, row.size());
    std::partial_sort(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(kk), row.end(), std::greater<>());
    double acc = 0.0;
    for (std::size_t j = 0; j < kk; ++j) acc += row[j];
    out[static_cast<std::size_t>(i)] = kk ? acc / static_cast<double>(kk) : 0.0;
  }
  return out;
}

/// CSLS(x, y) = 2 cos(xW, y) - r_B(xW) - r_A(y), rows of the result are A.
inline MatD csls(const MatD& mapped_a, const MatD& b, std::size_t k) {
  MatD cos = mapped_a * b.transpose();
  const auto ra = mean_top_k(cos, k);
  const auto rb = mean_top_k(cos.transpose(), k);
  for (Eigen::Index i = 0; i < cos.rows(); ++i) {
    for (Eigen::Index j = 0; j < cos.cols(); ++j)
      cos(i, j) = 2.0 * cos(i, j) - ra[static_cast<std::size_t>(i)] - rb[static_cast<std::size_t>(j)];
  }
  return cos;
}

inline std::size_t argmax_row(const MatD& s, Eigen::Index i) {
  Eigen::Index best = 0;
  for (Eigen::Index j = 1; j < s.cols(); ++j) {
    if (s(i, j) > s(i, best)) best = j;
  }
  return static_cast<std::size_t>(best);
}

inline Dictionary induce_mutual(const MatD& a, const MatD& b, const OrthogonalMap& m, std::size_t na, std::size_t nb,
                                std::size_t k) {
  const MatD pa = a.topRows(static_cast<Eigen::Index>(na)) * m.w;
  const MatD s = csls(pa, b.topRows(static_cast<Eigen::Index>(nb)), k);
  const MatD st = s.transpose();
  std::vector<std::size_t> back(nb);
  for (std::size_t j = 0; j < nb; ++j) back[j] = argmax_row(st, static_cast<Eigen::Index>(j));
  Dictionary d;
  for (std::size_t i = 0; i < na; ++i) {
    const auto j = argmax_row(s, static_cast<Eigen::Index>(i));
    if (back[j] == i) d.emplace_back(i, j);
  }
  return d;
}

}  // namespace detail

/// Self-learning loop: Procrustes on the current dictionary, then a new
/// dictionary of CSLS mutual nearest neighbours among the candidate pools,
/// until the dictionary repeats, an induced dictionary comes out smaller
/// than the previous one (which is then kept), or max_iters. `oracle_seed` is required for
/// the oracle init and ignored otherwise.
inline AlignResult self_learning_align(const WordVecTable& a, const WordVecTable& b, const AlignOptions& o,
                                       const Dictionary& oracle_seed = {}) {
  if (a.dim() != b.dim()) throw DataError("align: dimension mismatch");
  if (a.size() == 0 || b.size() == 0) throw DataError("align: empty table");
  Dictionary dict;
  if (o.init == AlignInit::OracleSeed) {
    dict = oracle_seed;
    for (const auto& [i, j] : dict) {
      if (i >= a.size() || j >= b.size()) throw DataError("align: oracle seed index out of range");
    }
  } else {
    const std::size_t n = std::min({o.seed_size, a.size(), b.size()});
    for (std::size_t i = 0; i < n; ++i) dict.emplace_back(i, i);
  }
  if (dict.empty()) throw DataError("align: empty seed dictionary");
  std::sort(dict.begin(), dict.end());

  AlignResult r;
  std::size_t pool = std::max<std::size_t>(1, o.pool_start);
  for (std::size_t it = 0; it < o.max_iters; ++it) {
    r.map = orthogonal_procrustes(detail::gather(a.vectors, dict, false), detail::gather(b.vectors, dict, true));
    auto next = detail::induce_mutual(a.vectors, b.vectors, r.map, std::min(pool, a.size()), std::min(pool, b.size()),
                                      o.csls_k);
    if (next.empty()) throw DataError("align: induced dictionary is empty at iteration " + std::to_string(it + 1));
    ++r.iterations;
    if (!r.trace.empty() && next.size() < r.trace.back()) {
      r.converged = true;
      break;
    }
    r.trace.push_back(next.size());
    const bool same = next == dict;
    dict = std::move(next);
    if (same) {
      r.converged = true;
      break;
    }
    if (pool < std::max(a.size(), b.size())) pool *= 2;
  }
  r.map = orthogonal_procrustes(detail::gather(a.vectors, dict, false), detail::gather(b.vectors, dict, true));
  r.dictionary = std::move(dict);
  return r;
}

/// Share of (a, b) gold pairs whose CSLS nearest neighbour of a in B is b.
inline double translation_precision_at_1(const WordVecTable& a, const WordVecTable& b, const OrthogonalMap& m,
                                         const Dictionary& gold, std::size_t csls_k = 10) {
  if (gold.empty()) throw DataError("precision@1: empty gold dictionary");
  const MatD s = detail::csls(a.vectors * m.w, b.vectors, csls_k);
  std::size_t hit = 0;
  for (const auto& [i, j] : gold) hit += detail::argmax_row(s, static_cast<Eigen::Index>(i)) == j;
  return static_cast<double>(hit) / static_cast<double>(gold.size());
}

/// Inverse document frequency over sentences: log(N / df).
inline std::vector<double> idf_weights(const WordVecTable& t, std::span<const std::string> corpus) {
  std::vector<std::uint64_t> df(t.size(), 0);
  std::vector<std::size_t> stamp(t.size(), static_cast<std::size_t>(-1));
  for (std::size_t s = 0; s < corpus.size(); ++s) {
    for (const auto& w : split_words(corpus[s])) {
      const auto r = t.find(w);
      if (r && stamp[*r] != s) {
        stamp[*r] = s;
        ++df[*r];
      }
    }
  }
  std::vector<double> out(t.size());
  const double n = static_cast<double>(corpus.size());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = df[i] ? std::log(n / static_cast<double>(df[i])) : std::log(n + 1.0);
  return out;
}

/// (Weighted) mean of the mapped vectors of in-vocabulary words; OOV words
/// are skipped. Returns nullopt when every word is OOV or has zero weight.
inline std::optional<VecD> pool_words(const WordVecTable& t, const OrthogonalMap& m,
                                      const std::vector<std::string>& words, const std::vector<double>* idf = nullptr) {
  VecD acc = VecD::Zero(static_cast<Eigen::Index>(t.dim()));
  double total = 0.0;
  for (const auto& w : words) {
    const auto r = t.find(w);
    if (!r) continue;
    const double weight = idf ? (*idf)[*r] : 1.0;
    acc += weight * t.vectors.row(static_cast<Eigen::Index>(*r));
    total += weight;
  }
  if (!(total > 0.0)) return std::nullopt;
  return VecD((acc / total) * m.w);
}

/// Sentence embeddings in the same EmbeddingSet form as encoder output, so
/// mining and matching run the identical code path.
inline embed::EmbeddingSet embed_sentences(const WordVecTable& t, const OrthogonalMap& m,
                                           std::span<const embed::Sentence> sentences,
                                           const std::vector<double>* idf = nullptr) {
  if (m.dim() != t.dim()) throw DataError("pool: map and table dimensions differ");
  embed::EmbeddingSet set;
  set.matrix.resize(static_cast<Eigen::Index>(sentences.size()), static_cast<Eigen::Index>(t.dim()));
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    const auto v = pool_words(t, m, split_words(sentences[i].text), idf);
    if (!v) throw DataError("pool: sentence '" + sentences[i].id + "' has no in-vocabulary word");
    set.matrix.row(static_cast<Eigen::Index>(i)) = v->cast<float>();
    set.ids.push_back(sentences[i].id);
  }
  return set;
}

}  // namespace xmine::wordmap
