#pragma once

// Post-norm transformer encoder with a tied masked-LM head, written against
// Eigen with hand-derived backward passes. Templated on the scalar so the
// same code trains in float and is gradient-checked in double.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "xmine/common.hpp"

namespace xmine::nn {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
template <typename T>
using ColVec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

struct EncoderConfig {
  std::uint32_t n_layers = 4;
  std::uint32_t n_heads = 4;
  std::uint32_t d_model = 128;
  std::uint32_t d_ff = 512;
  std::uint32_t max_positions = 128;
  std::uint32_t n_languages = 3;
  std::uint32_t vocab_size = 0;
  float dropout = 0.1f;

  void validate() const {
    if (n_layers < 1) throw ConfigError("encoder: n_layers must be >= 1");
    if (n_heads < 1 || d_model % n_heads != 0) throw ConfigError("encoder: d_model must be divisible by n_heads");
    if (d_ff < 1) throw ConfigError("encoder: d_ff must be >= 1");
    if (max_positions < 3) throw ConfigError("encoder: max_positions must be >= 3");
    if (n_languages < 1) throw ConfigError("encoder: n_languages must be >= 1");
    if (vocab_size < 6) throw ConfigError("encoder: vocab_size must cover specials plus at least one symbol");
    if (!(dropout >= 0.0f && dropout < 1.0f)) throw ConfigError("encoder: dropout must be in [0,1)");
  }

  std::uint32_t head_dim() const { return d_model / n_heads; }

  std::string canonical() const {
    char buf[192];
    std::snprintf(buf, sizeof buf, "L=%u;H=%u;d=%u;ff=%u;P=%u;nl=%u;V=%u;drop=%.9g", n_layers, n_heads, d_model, d_ff,
                  max_positions, n_languages, vocab_size, static_cast<double>(dropout));
    return buf;
  }

  bool operator==(const EncoderConfig&) const = default;
};

template <typename T>
struct LayerParams {
  Mat<T> wq, wk, wv, wo;
  RowVec<T> bq, bk, bv, bo;
  RowVec<T> ln1_g, ln1_b;
  Mat<T> w1;
  RowVec<T> b1;
  Mat<T> w2;
  RowVec<T> b2;
  RowVec<T> ln2_g, ln2_b;
};

/// All trainable tensors. The output projection is tied to tok_emb; only
/// its bias is separate.
template <typename T>
struct EncoderParams {
  EncoderConfig config;
  Mat<T> tok_emb, pos_emb, lang_emb;
  RowVec<T> emb_ln_g, emb_ln_b;
  std::vector<LayerParams<T>> layers;
  RowVec<T> out_bias;

  static EncoderParams zeros(const EncoderConfig& c) {
    c.validate();
    EncoderParams p;
    p.config = c;
    const Eigen::Index d = c.d_model, ff = c.d_ff;
    p.tok_emb = Mat<T>::Zero(c.vocab_size, d);
    p.pos_emb = Mat<T>::Zero(c.max_positions, d);
    p.lang_emb = Mat<T>::Zero(c.n_languages, d);
    p.emb_ln_g = RowVec<T>::Zero(d);
    p.emb_ln_b = RowVec<T>::Zero(d);
    p.layers.resize(c.n_layers);
    for (auto& l : p.layers) {
      l.wq = Mat<T>::Zero(d, d);
      l.wk = Mat<T>::Zero(d, d);
      l.wv = Mat<T>::Zero(d, d);
      l.wo = Mat<T>::Zero(d, d);
      l.bq = l.bk = l.bv = l.bo = RowVec<T>::Zero(d);
      l.ln1_g = l.ln1_b = RowVec<T>::Zero(d);
      l.w1 = Mat<T>::Zero(d, ff);
      l.b1 = RowVec<T>::Zero(ff);
      l.w2 = Mat<T>::Zero(ff, d);
      l.b2 = RowVec<T>::Zero(d);
      l.ln2_g = l.ln2_b = RowVec<T>::Zero(d);
    }
    p.out_bias = RowVec<T>::Zero(c.vocab_size);
    return p;
  }

  /// Visits every tensor in declared (checkpoint) order as f(name, tensor).
  template <typename F>
  void for_each(F&& f) {
    visit(*this, f);
  }
  template <typename F>
  void for_each(F&& f) const {
    visit(*this, f);
  }

  std::vector<std::span<T>> tensors() {
    std::vector<std::span<T>> out;
    for_each([&](const std::string&, auto& m) { out.emplace_back(m.data(), static_cast<std::size_t>(m.size())); });
    return out;
  }

  std::vector<std::span<const T>> tensors() const {
    std::vector<std::span<const T>> out;
    for_each([&](const std::string&, const auto& m) { out.emplace_back(m.data(), static_cast<std::size_t>(m.size())); });
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors()) n += t.size();
    return n;
  }

  template <typename U>
  EncoderParams<U> cast() const {
    auto out = EncoderParams<U>::zeros(config);
    auto dst = out.tensors();
    const auto src = tensors();
    for (std::size_t i = 0; i < src.size(); ++i) {
      for (std::size_t j = 0; j < src[i].size(); ++j) dst[i][j] = static_cast<U>(src[i][j]);
    }
    return out;
  }

  bool all_finite() const {
    for (const auto& t : tensors()) {
      for (const auto x : t) {
        if (!std::isfinite(x)) return false;
      }
    }
    return true;
  }

 private:
  template <typename Self, typename F>
  static void visit(Self& p, F& f) {
    f(std::string("tok_emb"), p.tok_emb);
    f(std::string("pos_emb"), p.pos_emb);
    f(std::string("lang_emb"), p.lang_emb);
    f(std::string("emb_ln_g"), p.emb_ln_g);
    f(std::string("emb_ln_b"), p.emb_ln_b);
    for (std::size_t i = 0; i < p.layers.size(); ++i) {
      auto& l = p.layers[i];
      const std::string pre = "layer" + std::to_string(i) + ".";
      f(pre + "wq", l.wq);
      f(pre + "bq", l.bq);
      f(pre + "wk", l.wk);
      f(pre + "bk", l.bk);
      f(pre + "wv", l.wv);
      f(pre + "bv", l.bv);
      f(pre + "wo", l.wo);
      f(pre + "bo", l.bo);
      f(pre + "ln1_g", l.ln1_g);
      f(pre + "ln1_b", l.ln1_b);
      f(pre + "w1", l.w1);
      f(pre + "b1", l.b1);
      f(pre + "w2", l.w2);
      f(pre + "b2", l.b2);
      f(pre + "ln2_g", l.ln2_g);
      f(pre + "ln2_b", l.ln2_b);
    }
    f(std::string("out_bias"), p.out_bias);
  }
};

/// Normal(0, 0.02) weights, unit layer-norm gains, zero biases.
template <typename T>
EncoderParams<T> init_params(const EncoderConfig& config, std::uint64_t seed) {
  auto p = EncoderParams<T>::zeros(config);
  Rng rng(derive_seed(seed, "encoder.init"));
  p.for_each([&](const std::string& name, auto& m) {
    const bool is_gain = name.ends_with("_g");
    const bool is_bias = name.ends_with("_b") || name.ends_with("bias") || name.find(".b") != std::string::npos;
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      if (is_gain) m.data()[i] = T(1);
      else if (is_bias) m.data()[i] = T(0);
      else m.data()[i] = static_cast<T>(0.02 * rng.normal());
    }
  });
  return p;
}

/// A padded batch of sequences ready for the encoder. Row r = b * length + t.
/// Real tokens of every sequence form a prefix; padding is a suffix.
struct MaskedBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::int32_t> tokens;
  std::vector<std::int32_t> positions;
  std::vector<std::int32_t> langs;
  std::vector<std::uint8_t> attend;
  std::vector<std::size_t> pred_rows;
  std::vector<std::int32_t> labels;
};

/// Per-layer token states for every real token. layers[0] is the embedding
/// output (token + position + language, normalized); layers[i] is the
/// output of block i. Rows are packed: sequence b occupies
/// [offsets[b], offsets[b+1]).
template <typename T>
struct LayerActivations {
  std::vector<Mat<T>> layers;
  std::vector<std::size_t> offsets;
  std::size_t batch = 0;
  std::size_t length = 0;

  std::size_t seq_len(std::size_t b) const { return offsets[b + 1] - offsets[b]; }

  /// Layer `l` laid out as (batch * length) x d_model, padding rows zero.
  Mat<T> padded(std::size_t l) const {
    const auto& m = layers[l];
    Mat<T> out = Mat<T>::Zero(static_cast<Eigen::Index>(batch * length), m.cols());
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t t = 0; t < seq_len(b); ++t)
        out.row(static_cast<Eigen::Index>(b * length + t)) = m.row(static_cast<Eigen::Index>(offsets[b] + t));
    }
    return out;
  }
};

namespace detail {

template <typename T>
struct NormCache {
  Mat<T> xhat;
  ColVec<T> rstd;
};

inline constexpr double kLnEps = 1e-5;

template <typename T>
Mat<T> layer_norm(const Mat<T>& x, const RowVec<T>& g, const RowVec<T>& b, NormCache<T>* cache) {
  const Eigen::Index n = x.rows(), d = x.cols();
  Mat<T> xhat(n, d);
  ColVec<T> rstd(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const T mean = x.row(i).mean();
    const T var = (x.row(i).array() - mean).square().mean();
    rstd(i) = T(1) / std::sqrt(var + T(kLnEps));
    xhat.row(i) = (x.row(i).array() - mean) * rstd(i);
  }
  Mat<T> y = (xhat.array().rowwise() * g.array()).rowwise() + b.array();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->rstd = std::move(rstd);
  }
  return y;
}

template <typename T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const NormCache<T>& c, const RowVec<T>& g, RowVec<T>& dg, RowVec<T>& db) {
  dg += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  db += dy.colwise().sum();
  const Mat<T> dxhat = dy.array().rowwise() * g.array();
  const T inv_d = T(1) / static_cast<T>(dy.cols());
  Mat<T> dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const T s1 = dxhat.row(i).sum();
    const T s2 = dxhat.row(i).dot(c.xhat.row(i));
    dx.row(i) = c.rstd(i) * inv_d *
                (static_cast<T>(dy.cols()) * dxhat.row(i).array() - s1 - c.xhat.row(i).array() * s2);
  }
  return dx;
}

template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(0.70710678118654752)));
}

template <typename T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(0.70710678118654752)));
  const T pdf = std::exp(T(-0.5) * x * x) * T(0.39894228040143268);
  return cdf + x * pdf;
}

/// Inverted-dropout scale mask (0 or 1/(1-p)).
template <typename T>
Mat<T> dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, Rng& rng) {
  Mat<T> m(rows, cols);
  const T keep = static_cast<T>(1.0 / (1.0 - p));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform() < p ? T(0) : keep;
  return m;
}

template <typename T>
struct LayerCache {
  Mat<T> input;
  Mat<T> q, k, v;
  std::vector<Mat<T>> probs;  // per (sequence, head): len x len
  Mat<T> ctx;
  Mat<T> drop_attn;
  NormCache<T> ln1;
  Mat<T> h1;
  Mat<T> ff_pre;
  Mat<T> ff_act;
  Mat<T> drop_ff;
  NormCache<T> ln2;
};

template <typename T>
struct ForwardCache {
  std::vector<std::int32_t> tokens, positions, langs;
  std::vector<std::size_t> offsets;
  NormCache<T> ln0;
  Mat<T> drop_emb;
  std::vector<LayerCache<T>> layers;
};

struct Packed {
  std::vector<std::int32_t> tokens, positions, langs;
  std::vector<std::size_t> offsets;
  std::vector<std::size_t> row_map;  // padded row -> packed row (or npos)
};

inline Packed pack(const MaskedBatch& batch, const EncoderConfig& c) {
  const std::size_t B = batch.batch, T = batch.length;
  const std::size_t n = B * T;
  if (batch.tokens.size() != n || batch.positions.size() != n || batch.langs.size() != n || batch.attend.size() != n)
    throw DataError("batch arrays do not match batch x length");
  if (T > c.max_positions)
    throw DataError("sequence length " + std::to_string(T) + " exceeds max_positions " +
                    std::to_string(c.max_positions));
  Packed p;
  p.offsets.push_back(0);
  p.row_map.assign(n, static_cast<std::size_t>(-1));
  for (std::size_t b = 0; b < B; ++b) {
    bool in_pad = false;
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t r = b * T + t;
      if (!batch.attend[r]) {
        in_pad = true;
        continue;
      }
      if (in_pad) throw DataError("padding must be a suffix of each sequence");
      const auto tok = batch.tokens[r], pos = batch.positions[r], lang = batch.langs[r];
      if (tok < 0 || static_cast<std::uint32_t>(tok) >= c.vocab_size)
        throw DataError("token id " + std::to_string(tok) + " outside vocabulary");
      if (pos < 0 || static_cast<std::uint32_t>(pos) >= c.max_positions)
        throw DataError("position id " + std::to_string(pos) + " exceeds max_positions");
      if (lang < 0 || static_cast<std::uint32_t>(lang) >= c.n_languages)
        throw DataError("language id " + std::to_string(lang) + " outside table");
      p.row_map[r] = p.tokens.size();
      p.tokens.push_back(tok);
      p.positions.push_back(pos);
      p.langs.push_back(lang);
    }
    if (p.tokens.size() == p.offsets.back()) throw DataError("sequence " + std::to_string(b) + " has no tokens");
    p.offsets.push_back(p.tokens.size());
  }
  return p;
}

/// Runs the encoder over packed rows. With `cache` set, keeps everything
/// the backward pass needs. `rng` non-null enables dropout.
template <typename T>
std::vector<Mat<T>> run_forward(const EncoderParams<T>& P, Packed packed, ForwardCache<T>* cache, Rng* rng) {
  const auto& c = P.config;
  const Eigen::Index N = static_cast<Eigen::Index>(packed.tokens.size());
  const Eigen::Index d = c.d_model;
  const std::size_t H = c.n_heads, dh = c.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  const double p_drop = rng ? static_cast<double>(c.dropout) : 0.0;

  Mat<T> x(N, d);
  for (Eigen::Index i = 0; i < N; ++i) {
    x.row(i) = P.tok_emb.row(packed.tokens[static_cast<std::size_t>(i)]) +
               P.pos_emb.row(packed.positions[static_cast<std::size_t>(i)]) +
               P.lang_emb.row(packed.langs[static_cast<std::size_t>(i)]);
  }
  std::vector<Mat<T>> outputs;
  outputs.reserve(c.n_layers + 1);
  NormCache<T> ln0;
  Mat<T> h = layer_norm(x, P.emb_ln_g, P.emb_ln_b, cache ? &ln0 : nullptr);
  outputs.push_back(h);
  Mat<T> drop_emb;
  if (p_drop > 0.0) {
    drop_emb = dropout_mask<T>(N, d, p_drop, *rng);
    h.array() *= drop_emb.array();
  }
  if (cache) {
    cache->ln0 = std::move(ln0);
    cache->drop_emb = std::move(drop_emb);
    cache->layers.resize(c.n_layers);
  }

  const auto& offs = packed.offsets;
  const std::size_t B = offs.size() - 1;
  for (std::size_t li = 0; li < c.n_layers; ++li) {
    const auto& L = P.layers[li];
    Mat<T> q = (h * L.wq).rowwise() + L.bq;
    Mat<T> k = (h * L.wk).rowwise() + L.bk;
    Mat<T> v = (h * L.wv).rowwise() + L.bv;
    Mat<T> ctx(N, d);
    std::vector<Mat<T>> probs;
    if (cache) probs.reserve(B * H);
    for (std::size_t b = 0; b < B; ++b) {
      const auto s0 = static_cast<Eigen::Index>(offs[b]);
      const auto n = static_cast<Eigen::Index>(offs[b + 1] - offs[b]);
      for (std::size_t hh = 0; hh < H; ++hh) {
        const auto c0 = static_cast<Eigen::Index>(hh * dh);
        const auto cw = static_cast<Eigen::Index>(dh);
        Mat<T> s = (q.block(s0, c0, n, cw) * k.block(s0, c0, n, cw).transpose()) * scale;
        for (Eigen::Index i = 0; i < n; ++i) {
          const T mx = s.row(i).maxCoeff();
          s.row(i) = (s.row(i).array() - mx).exp();
          s.row(i) /= s.row(i).sum();
        }
        ctx.block(s0, c0, n, cw).noalias() = s * v.block(s0, c0, n, cw);
        if (cache) probs.push_back(std::move(s));
      }
    }
    Mat<T> attn = (ctx * L.wo).rowwise() + L.bo;
    Mat<T> drop_attn;
    if (p_drop > 0.0) {
      drop_attn = dropout_mask<T>(N, d, p_drop, *rng);
      attn.array() *= drop_attn.array();
    }
    NormCache<T> ln1;
    Mat<T> h1 = layer_norm<T>(h + attn, L.ln1_g, L.ln1_b, cache ? &ln1 : nullptr);
    Mat<T> ff_pre = (h1 * L.w1).rowwise() + L.b1;
    Mat<T> ff_act = ff_pre.unaryExpr([](T z) { return gelu(z); });
    Mat<T> ff = (ff_act * L.w2).rowwise() + L.b2;
    Mat<T> drop_ff;
    if (p_drop > 0.0) {
      drop_ff = dropout_mask<T>(N, d, p_drop, *rng);
      ff.array() *= drop_ff.array();
    }
    NormCache<T> ln2;
    Mat<T> h2 = layer_norm<T>(h1 + ff, L.ln2_g, L.ln2_b, cache ? &ln2 : nullptr);
    if (cache) {
      auto& lc = cache->layers[li];
      lc.input = std::move(h);
      lc.q = std::move(q);
      lc.k = std::move(k);
      lc.v = std::move(v);
      lc.probs = std::move(probs);
      lc.ctx = std::move(ctx);
      lc.drop_attn = std::move(drop_attn);
      lc.ln1 = std::move(ln1);
      lc.h1 = std::move(h1);
      lc.ff_pre = std::move(ff_pre);
      lc.ff_act = std::move(ff_act);
      lc.drop_ff = std::move(drop_ff);
      lc.ln2 = std::move(ln2);
    }
    h = std::move(h2);
    outputs.push_back(h);
  }
  if (cache) {
    cache->tokens = std::move(packed.tokens);
    cache->positions = std::move(packed.positions);
    cache->langs = std::move(packed.langs);
    cache->offsets = std::move(packed.offsets);
  }
  return outputs;
}

}  // namespace detail

/// Inference forward pass (no dropout). Returns all n_layers + 1 outputs.
template <typename T>
LayerActivations<T> forward(const EncoderParams<T>& params, const MaskedBatch& batch) {
  auto packed = detail::pack(batch, params.config);
  LayerActivations<T> acts;
  acts.offsets = packed.offsets;
  acts.batch = batch.batch;
  acts.length = batch.length;
  acts.layers = detail::run_forward<T>(params, std::move(packed), nullptr, nullptr);
  return acts;
}

/// Attention probabilities of one layer and head for sequence b, as a
/// length x length matrix over the padded layout (padding rows/cols zero).
template <typename T>
Mat<T> attention_weights(const EncoderParams<T>& params, const MaskedBatch& batch, std::size_t layer,
                         std::size_t b, std::size_t head) {
  detail::ForwardCache<T> cache;
  detail::run_forward<T>(params, detail::pack(batch, params.config), &cache, nullptr);
  const auto& probs = cache.layers.at(layer).probs.at(b * params.config.n_heads + head);
  Mat<T> out = Mat<T>::Zero(static_cast<Eigen::Index>(batch.length), static_cast<Eigen::Index>(batch.length));
  out.topLeftCorner(probs.rows(), probs.cols()) = probs;
  return out;
}

template <typename T>
struct LossAndGrads {
  double loss = 0.0;
  EncoderParams<T> grads;
};

/// Mean cross-entropy of the tied MLM head over prediction positions, and
/// its gradient with respect to every parameter. `dropout_rng` enables
/// dropout (training); pass nullptr for the deterministic objective.
template <typename T>
LossAndGrads<T> loss_and_grads(const EncoderParams<T>& P, const MaskedBatch& batch, Rng* dropout_rng = nullptr) {
  if (batch.pred_rows.empty()) throw DataError("loss_and_grads: batch has no prediction positions");
  if (batch.pred_rows.size() != batch.labels.size()) throw DataError("loss_and_grads: labels/positions mismatch");
  const auto& c = P.config;
  auto packed = detail::pack(batch, c);
  std::vector<std::size_t> pred;
  pred.reserve(batch.pred_rows.size());
  for (const auto r : batch.pred_rows) {
    if (r >= packed.row_map.size() || packed.row_map[r] == static_cast<std::size_t>(-1))
      throw DataError("prediction position " + std::to_string(r) + " is padding");
    pred.push_back(packed.row_map[r]);
  }

  detail::ForwardCache<T> cache;
  const auto outputs = detail::run_forward<T>(P, std::move(packed), &cache, dropout_rng);
  const Mat<T>& top = outputs.back();

  const Eigen::Index M = static_cast<Eigen::Index>(pred.size());
  const Eigen::Index d = c.d_model;
  Mat<T> hp(M, d);
  for (Eigen::Index i = 0; i < M; ++i) hp.row(i) = top.row(static_cast<Eigen::Index>(pred[static_cast<std::size_t>(i)]));
  Mat<T> logits = (hp * P.tok_emb.transpose()).rowwise() + P.out_bias;

  double loss = 0.0;
  const T inv_m = T(1) / static_cast<T>(M);
  for (Eigen::Index i = 0; i < M; ++i) {
    const auto label = batch.labels[static_cast<std::size_t>(i)];
    if (label < 0 || static_cast<std::uint32_t>(label) >= c.vocab_size) throw DataError("label outside vocabulary");
    const T mx = logits.row(i).maxCoeff();
    logits.row(i) = (logits.row(i).array() - mx).exp();
    const T z = logits.row(i).sum();
    loss += -(std::log(static_cast<double>(logits(i, label))) - std::log(static_cast<double>(z)));
    logits.row(i) *= inv_m / z;
    logits(i, label) -= inv_m;
  }
  loss /= static_cast<double>(M);
  if (!std::isfinite(loss)) {
    throw NumericError("non-finite MLM loss (" + std::to_string(loss) + ") over " + std::to_string(M) +
                       " prediction positions; params finite: " + (P.all_finite() ? "yes" : "no"));
  }
  const Mat<T>& dlogits = logits;

  LossAndGrads<T> out;
  out.loss = loss;
  auto& G = out.grads;
  G = EncoderParams<T>::zeros(c);
  G.tok_emb.noalias() += dlogits.transpose() * hp;
  G.out_bias += dlogits.colwise().sum();

  const Eigen::Index N = top.rows();
  Mat<T> dh = Mat<T>::Zero(N, d);
  {
    const Mat<T> dhp = dlogits * P.tok_emb;
    for (Eigen::Index i = 0; i < M; ++i) dh.row(static_cast<Eigen::Index>(pred[static_cast<std::size_t>(i)])) += dhp.row(i);
  }

  const std::size_t H = c.n_heads, dhd = c.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(dhd));
  const auto& offs = cache.offsets;
  const std::size_t B = offs.size() - 1;
  for (std::size_t li = c.n_layers; li-- > 0;) {
    const auto& L = P.layers[li];
    auto& GL = G.layers[li];
    auto& lc = cache.layers[li];

    Mat<T> dr2 = detail::layer_norm_backward<T>(dh, lc.ln2, L.ln2_g, GL.ln2_g, GL.ln2_b);
    Mat<T> dff = dr2;
    if (lc.drop_ff.size()) dff.array() *= lc.drop_ff.array();
    GL.w2.noalias() += lc.ff_act.transpose() * dff;
    GL.b2 += dff.colwise().sum();
    Mat<T> dpre = dff * L.w2.transpose();
    dpre.array() *= lc.ff_pre.unaryExpr([](T z) { return detail::gelu_grad(z); }).array();
    GL.w1.noalias() += lc.h1.transpose() * dpre;
    GL.b1 += dpre.colwise().sum();
    Mat<T> dh1 = dr2;
    dh1.noalias() += dpre * L.w1.transpose();

    Mat<T> dr1 = detail::layer_norm_backward<T>(dh1, lc.ln1, L.ln1_g, GL.ln1_g, GL.ln1_b);
    Mat<T> dattn = dr1;
    if (lc.drop_attn.size()) dattn.array() *= lc.drop_attn.array();
    GL.wo.noalias() += lc.ctx.transpose() * dattn;
    GL.bo += dattn.colwise().sum();
    const Mat<T> dctx = dattn * L.wo.transpose();

    Mat<T> dq(N, d), dk(N, d), dv(N, d);
    for (std::size_t b = 0; b < B; ++b) {
      const auto s0 = static_cast<Eigen::Index>(offs[b]);
      const auto n = static_cast<Eigen::Index>(offs[b + 1] - offs[b]);
      for (std::size_t hh = 0; hh < H; ++hh) {
        const auto c0 = static_cast<Eigen::Index>(hh * dhd);
        const auto cw = static_cast<Eigen::Index>(dhd);
        const Mat<T>& p = lc.probs[b * H + hh];
        const auto dctx_b = dctx.block(s0, c0, n, cw);
        Mat<T> dp = dctx_b * lc.v.block(s0, c0, n, cw).transpose();
        dv.block(s0, c0, n, cw).noalias() = p.transpose() * dctx_b;
        for (Eigen::Index i = 0; i < n; ++i) {
          const T dot = dp.row(i).dot(p.row(i));
          dp.row(i) = p.row(i).array() * (dp.row(i).array() - dot);
        }
        dp *= scale;
        dq.block(s0, c0, n, cw).noalias() = dp * lc.k.block(s0, c0, n, cw);
        dk.block(s0, c0, n, cw).noalias() = dp.transpose() * lc.q.block(s0, c0, n, cw);
      }
    }
    GL.wq.noalias() += lc.input.transpose() * dq;
    GL.wk.noalias() += lc.input.transpose() * dk;
    GL.wv.noalias() += lc.input.transpose() * dv;
    GL.bq += dq.colwise().sum();
    GL.bk += dk.colwise().sum();
    GL.bv += dv.colwise().sum();
    dh = dr1;
    dh.noalias() += dq * L.wq.transpose();
    dh.noalias() += dk * L.wk.transpose();
    dh.noalias() += dv * L.wv.transpose();
  }

  if (cache.drop_emb.size()) dh.array() *= cache.drop_emb.array();
  const Mat<T> dx = detail::layer_norm_backward<T>(dh, cache.ln0, P.emb_ln_g, G.emb_ln_g, G.emb_ln_b);
  for (Eigen::Index i = 0; i < N; ++i) {
    G.tok_emb.row(cache.tokens[static_cast<std::size_t>(i)]) += dx.row(i);
    G.pos_emb.row(cache.positions[static_cast<std::size_t>(i)]) += dx.row(i);
    G.lang_emb.row(cache.langs[static_cast<std::size_t>(i)]) += dx.row(i);
  }
  return out;
}

/// Loss only, without dropout (used by finite differences and evaluation).
template <typename T>
double mlm_loss(const EncoderParams<T>& P, const MaskedBatch& batch) {
  auto packed = detail::pack(batch, P.config);
  std::vector<std::size_t> pred;
  for (const auto r : batch.pred_rows) pred.push_back(packed.row_map.at(r));
  const auto outputs = detail::run_forward<T>(P, std::move(packed), nullptr, nullptr);
  const Mat<T>& top = outputs.back();
  double loss = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const RowVec<T> logits = top.row(static_cast<Eigen::Index>(pred[i])) * P.tok_emb.transpose() + P.out_bias;
    const double mx = static_cast<double>(logits.maxCoeff());
    double z = 0.0;
    for (Eigen::Index j = 0; j < logits.size(); ++j) z += std::exp(static_cast<double>(logits(j)) - mx);
    loss += -(static_cast<double>(logits(batch.labels[i])) - mx - std::log(z));
  }
  return loss / static_cast<double>(pred.size());
}

}  // namespace xmine::nn
