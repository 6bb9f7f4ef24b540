#pragma once

// Adam, learning-rate schedule, batch streams for MLM/TLM and the training
// loop shared by pretraining and fine-tuning.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "xmine/common.hpp"
#include "xmine/encoder.hpp"
#include "xmine/masking.hpp"
#include "xmine/tokenizer.hpp"

namespace xmine::nn {

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moment buffers, one per parameter tensor.
template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m, v;
  std::uint64_t step = 0;

  static AdamState for_params(const EncoderParams<T>& p) {
    AdamState s;
    for (const auto& t : p.tensors()) {
      s.m.emplace_back(t.size(), T(0));
      s.v.emplace_back(t.size(), T(0));
    }
    return s;
  }
};

/// One Adam update of a flat tensor with bias correction at step `t` (1-based).
template <typename T>
void adam_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v, std::uint64_t t,
                 double lr, const AdamHyper& hyper) {
  const double c1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(t));
  const T b1 = static_cast<T>(hyper.beta1), b2 = static_cast<T>(hyper.beta2);
  const T step = static_cast<T>(lr / c1);
  const T inv_c2 = static_cast<T>(1.0 / c2);
  const T eps = static_cast<T>(hyper.eps);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const T g = grad[i];
    m[i] = b1 * m[i] + (T(1) - b1) * g;
    v[i] = b2 * v[i] + (T(1) - b2) * g * g;
    param[i] -= step * m[i] / (std::sqrt(v[i] * inv_c2) + eps);
  }
}

template <typename T>
void adam_step(EncoderParams<T>& params, const EncoderParams<T>& grads, AdamState<T>& state, double lr,
               const AdamHyper& hyper = {}) {
  auto ps = params.tensors();
  const auto gs = grads.tensors();
  if (state.m.size() != ps.size()) throw ConfigError("adam: state does not match parameters");
  ++state.step;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (state.m[i].size() != ps[i].size()) throw ConfigError("adam: state shape mismatch");
    adam_update<T>(ps[i], gs[i], state.m[i], state.v[i], state.step, lr, hyper);
  }
}

/// Linear warmup to `lr`, then linear decay towards zero at `steps`.
struct Schedule {
  std::size_t steps = 0;
  double lr = 1e-4;
  double warmup_frac = 0.1;
  bool decay = true;
  double clip_norm = 1.0;

  double lr_at(std::size_t step) const {
    const double warm = std::max(1.0, std::floor(warmup_frac * static_cast<double>(steps)));
    const double s = static_cast<double>(step) + 1.0;
    if (s <= warm) return lr * s / warm;
    if (!decay) return lr;
    const double rest = std::max(1.0, static_cast<double>(steps) - warm);
    return lr * std::max(0.0, 1.0 - (s - warm) / rest);
  }
};

struct TrainLogEntry {
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

template <typename T>
double clip_grad_norm(EncoderParams<T>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& t : std::as_const(grads).tensors()) {
    for (const auto x : t) sq += static_cast<double>(x) * static_cast<double>(x);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto& t : grads.tensors()) {
      for (auto& x : t) x *= s;
    }
  }
  return norm;
}

/// Runs `schedule.steps` optimizer steps. `next_batch(i)` supplies the batch
/// for step i. If the loss turns non-finite, `on_divergence` receives the
/// last good parameters before the NumericError propagates.
template <typename T>
std::vector<TrainLogEntry> train(EncoderParams<T>& params, const std::function<MaskedBatch(std::size_t)>& next_batch,
                                 const Schedule& schedule, std::uint64_t seed,
                                 const std::function<void(const EncoderParams<T>&)>& on_divergence = {},
                                 const std::function<void(const TrainLogEntry&)>& on_step = {}) {
  std::vector<TrainLogEntry> log;
  if (schedule.steps == 0) return log;
  auto state = AdamState<T>::for_params(params);
  Rng dropout_rng(derive_seed(seed, "train.dropout"));
  log.reserve(schedule.steps);
  for (std::size_t step = 0; step < schedule.steps; ++step) {
    const MaskedBatch batch = next_batch(step);
    LossAndGrads<T> lg;
    try {
      lg = loss_and_grads<T>(params, batch, params.config.dropout > 0.0f ? &dropout_rng : nullptr);
    } catch (const NumericError& e) {
      if (on_divergence) on_divergence(params);
      throw NumericError("training diverged at step " + std::to_string(step) + ": " + e.what());
    }
    clip_grad_norm(lg.grads, schedule.clip_norm);
    const double lr = schedule.lr_at(step);
    adam_step(params, lg.grads, state, lr);
    TrainLogEntry entry{step, lg.loss, lr};
    if (on_step) on_step(entry);
    log.push_back(entry);
  }
  return log;
}

/// Monolingual MLM batches, sentences of all languages mixed and reshuffled
/// each epoch.
class MlmStream {
 public:
  struct Corpus {
    std::int32_t lang = 0;
    std::vector<bpe::TokenSeq> sentences;
  };

  MlmStream(std::vector<Corpus> corpora, std::size_t batch_size, MaskingPolicy policy, std::uint32_t vocab_size,
            std::uint32_t max_positions, std::uint64_t seed)
      : corpora_(std::move(corpora)),
        batch_size_(batch_size),
        policy_(policy),
        vocab_size_(vocab_size),
        max_positions_(max_positions),
        order_rng_(derive_seed(seed, "mlm.order")),
        mask_rng_(derive_seed(seed, "mlm.mask")) {
    for (std::size_t c = 0; c < corpora_.size(); ++c) {
      for (std::size_t i = 0; i < corpora_[c].sentences.size(); ++i) {
        const auto& s = corpora_[c].sentences[i];
        if (!s.empty() && s.size() + 2 <= max_positions_) items_.emplace_back(c, i);
      }
    }
    if (items_.empty() || batch_size_ == 0) throw DataError("MLM stream has no usable sentences");
    order_rng_.shuffle(items_);
  }

  std::size_t steps_per_epoch() const { return (items_.size() + batch_size_ - 1) / batch_size_; }

  MaskedBatch next() {
    std::vector<Sequence> seqs;
    seqs.reserve(batch_size_);
    while (seqs.size() < batch_size_) {
      if (cursor_ == items_.size()) {
        cursor_ = 0;
        order_rng_.shuffle(items_);
        if (!seqs.empty()) break;
      }
      const auto [c, i] = items_[cursor_++];
      seqs.push_back(build_mlm_example(corpora_[c].sentences[i], corpora_[c].lang, policy_, vocab_size_,
                                       max_positions_, mask_rng_));
    }
    return collate(seqs);
  }

 private:
  std::vector<Corpus> corpora_;
  std::size_t batch_size_;
  MaskingPolicy policy_;
  std::uint32_t vocab_size_;
  std::uint32_t max_positions_;
  Rng order_rng_;
  Rng mask_rng_;
  std::vector<std::pair<std::size_t, std::size_t>> items_;
  std::size_t cursor_ = 0;
};

/// TLM batches over a parallel set. Segment order is flipped at random so
/// both translation directions are trained.
class TlmStream {
 public:
  struct Pair {
    bpe::TokenSeq a, b;
  };

  TlmStream(std::vector<Pair> pairs, std::int32_t lang_a, std::int32_t lang_b, std::size_t batch_size,
            MaskingPolicy policy, std::uint32_t vocab_size, std::uint32_t max_positions, std::uint64_t seed)
      : lang_a_(lang_a),
        lang_b_(lang_b),
        batch_size_(batch_size),
        policy_(policy),
        vocab_size_(vocab_size),
        max_positions_(max_positions),
        order_rng_(derive_seed(seed, "tlm.order")),
        mask_rng_(derive_seed(seed, "tlm.mask")) {
    for (auto& p : pairs) {
      if (!p.a.empty() && !p.b.empty() && p.a.size() + p.b.size() + 3 <= max_positions_) pairs_.push_back(std::move(p));
    }
    if (pairs_.empty() || batch_size_ == 0) throw DataError("TLM stream has no usable pairs");
    order_rng_.shuffle(pairs_);
  }

  std::size_t steps_per_epoch() const { return (pairs_.size() + batch_size_ - 1) / batch_size_; }

  MaskedBatch next() {
    std::vector<Sequence> seqs;
    seqs.reserve(batch_size_);
    while (seqs.size() < batch_size_) {
      if (cursor_ == pairs_.size()) {
        cursor_ = 0;
        order_rng_.shuffle(pairs_);
        if (!seqs.empty()) break;
      }
      const auto& p = pairs_[cursor_++];
      if (order_rng_.bernoulli(0.5)) {
        seqs.push_back(build_tlm_example(p.a, lang_a_, p.b, lang_b_, policy_, vocab_size_, max_positions_, mask_rng_));
      } else {
        seqs.push_back(build_tlm_example(p.b, lang_b_, p.a, lang_a_, policy_, vocab_size_, max_positions_, mask_rng_));
      }
    }
    return collate(seqs);
  }

 private:
  std::int32_t lang_a_, lang_b_;
  std::size_t batch_size_;
  MaskingPolicy policy_;
  std::uint32_t vocab_size_;
  std::uint32_t max_positions_;
  Rng order_rng_;
  Rng mask_rng_;
  std::vector<Pair> pairs_;
  std::size_t cursor_ = 0;
};

}  // namespace xmine::nn
