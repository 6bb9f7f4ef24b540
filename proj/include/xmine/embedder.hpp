#pragma once

// Sentence embeddings: pool one encoder layer's token states into a
// fixed-length vector per sentence.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "xmine/common.hpp"
#include "xmine/encoder.hpp"
#include "xmine/masking.hpp"
#include "xmine/tokenizer.hpp"

namespace xmine::embed {

using nn::Mat;

enum class Pooling { Mean, Max };

inline const char* pooling_name(Pooling p) { return p == Pooling::Mean ? "mean" : "max"; }

inline Pooling parse_pooling(std::string_view s) {
  if (s == "mean") return Pooling::Mean;
  if (s == "max") return Pooling::Max;
  throw ConfigError("unknown pooling method '" + std::string(s) + "'");
}

struct PoolingSpec {
  std::uint32_t layer = 0;
  Pooling method = Pooling::Mean;
  bool normalize = true;

  /// Layer at three quarters of the depth, rounded: 12 of 16, 3 of 4.
  static PoolingSpec three_quarter_depth(std::uint32_t n_layers) {
    PoolingSpec s;
    s.layer = (3 * n_layers + 2) / 4;
    return s;
  }
};

/// Ordered ids plus a |ids| x dim matrix; row i embeds ids[i].
struct EmbeddingSet {
  std::vector<std::string> ids;
  Mat<float> matrix;

  std::size_t size() const { return ids.size(); }
  std::size_t dim() const { return static_cast<std::size_t>(matrix.cols()); }

  void validate() const {
    if (static_cast<std::size_t>(matrix.rows()) != ids.size()) throw DataError("embedding set: ids/rows mismatch");
    std::unordered_set<std::string> seen;
    for (const auto& id : ids) {
      if (!seen.insert(id).second) throw DataError("embedding set: duplicate id '" + id + "'");
    }
    if (!matrix.allFinite()) throw DataError("embedding set: non-finite entries");
  }
};

/// Pools a set of token vectors (rows). Order-invariant in the rows.
template <typename Derived>
nn::RowVec<float> pool_rows(const Eigen::MatrixBase<Derived>& rows, Pooling method) {
  if (rows.rows() == 0) throw DataError("pool_rows: no token vectors to pool");
  if (method == Pooling::Mean) return rows.colwise().mean().template cast<float>();
  return rows.colwise().maxCoeff().template cast<float>();
}

inline void l2_normalize_rows(Mat<float>& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double n = m.row(i).template cast<double>().norm();
    if (n > 0.0) m.row(i) = (m.row(i).template cast<double>() / n).template cast<float>();
  }
}

struct Sentence {
  std::string id;
  std::string text;
};

namespace detail {

inline std::vector<bpe::TokenSeq> tokenize_all(std::span<const Sentence> sentences, const bpe::BpeModel& tok,
                                               std::uint32_t max_positions) {
  std::vector<bpe::TokenSeq> out;
  out.reserve(sentences.size());
  for (const auto& s : sentences) {
    auto t = tok.encode(s.text);
    if (t.empty()) throw DataError("embed: sentence '" + s.id + "' has no tokens");
    if (t.size() + 2 > max_positions)
      throw DataError("embed: sentence '" + s.id + "' has " + std::to_string(t.size()) +
                      " tokens, more than max_positions allows");
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace detail

/// Embeds sentences at every requested layer with one forward pass per
/// batch. Specials (BOS/SEP) and padding are excluded from pooling.
inline std::vector<EmbeddingSet> embed_layers(const nn::EncoderParams<float>& params,
                                              std::span<const Sentence> sentences, std::int32_t lang_id,
                                              const std::vector<std::uint32_t>& layers, Pooling method,
                                              bool normalize, const bpe::BpeModel& tok, std::size_t batch_size = 64) {
  if (sentences.empty()) throw DataError("embed: no sentences");
  for (const auto l : layers) {
    if (l > params.config.n_layers) throw ConfigError("embed: layer " + std::to_string(l) + " out of range");
  }
  const auto seqs = detail::tokenize_all(sentences, tok, params.config.max_positions);
  const Eigen::Index d = params.config.d_model;
  std::vector<EmbeddingSet> out(layers.size());
  for (auto& set : out) {
    set.matrix.resize(static_cast<Eigen::Index>(sentences.size()), d);
    set.ids.reserve(sentences.size());
    for (const auto& s : sentences) set.ids.push_back(s.id);
  }
  std::vector<nn::Sequence> batch;
  for (std::size_t start = 0; start < seqs.size(); start += batch_size) {
    const std::size_t end = std::min(seqs.size(), start + batch_size);
    batch.clear();
    for (std::size_t i = start; i < end; ++i) batch.push_back(nn::make_single(seqs[i], lang_id));
    const auto acts = nn::forward<float>(params, nn::collate(batch));
    for (std::size_t li = 0; li < layers.size(); ++li) {
      const auto& m = acts.layers[layers[li]];
      for (std::size_t b = 0; b < end - start; ++b) {
        // Packed rows of sequence b: BOS, tokens..., SEP.
        const auto first = static_cast<Eigen::Index>(acts.offsets[b] + 1);
        const auto n = static_cast<Eigen::Index>(acts.seq_len(b) - 2);
        out[li].matrix.row(static_cast<Eigen::Index>(start + b)) = pool_rows(m.middleRows(first, n), method);
      }
    }
  }
  if (normalize) {
    for (auto& set : out) l2_normalize_rows(set.matrix);
  }
  return out;
}

inline EmbeddingSet embed(const nn::EncoderParams<float>& params, std::span<const Sentence> sentences,
                          std::int32_t lang_id, const PoolingSpec& spec, const bpe::BpeModel& tok,
                          std::size_t batch_size = 64) {
  auto sets = embed_layers(params, sentences, lang_id, {spec.layer}, spec.method, spec.normalize, tok, batch_size);
  return std::move(sets.front());
}

// Embedding file: "EMB1", u32 count, u32 dim, count*dim f32 row-major, with
// a sidecar text file of ids in the same order.
inline void save_embeddings(const std::string& path, const std::string& ids_path, const EmbeddingSet& set) {
  auto os = io::open_out(path, true);
  io::write_magic(os, "EMB1");
  io::write_u32(os, static_cast<std::uint32_t>(set.size()));
  io::write_u32(os, static_cast<std::uint32_t>(set.dim()));
  for (Eigen::Index i = 0; i < set.matrix.rows(); ++i) {
    for (Eigen::Index j = 0; j < set.matrix.cols(); ++j) io::write_f32(os, set.matrix(i, j));
  }
  io::write_lines(ids_path, set.ids);
}

inline EmbeddingSet load_embeddings(const std::string& path, const std::string& ids_path) {
  auto is = io::open_in(path, true);
  io::expect_magic(is, "EMB1");
  const auto count = io::read_u32(is);
  const auto dim = io::read_u32(is);
  EmbeddingSet set;
  set.matrix.resize(count, dim);
  for (std::uint32_t i = 0; i < count; ++i) {
    for (std::uint32_t j = 0; j < dim; ++j) set.matrix(i, j) = io::read_f32(is);
  }
  set.ids = io::read_lines(ids_path);
  if (set.ids.size() != count) throw DataError("embedding ids file has " + std::to_string(set.ids.size()) +
                                               " lines, expected " + std::to_string(count));
  return set;
}

}  // namespace xmine::embed
