#pragma once

// Finite-difference verification of the encoder's analytic gradients.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "xmine/common.hpp"
#include "xmine/encoder.hpp"
#include "xmine/masking.hpp"

namespace xmine::nn {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t both_zero = 0;
};

/// Relative error with an absolute floor so that parameters whose true
/// gradient is ~0 are judged on absolute agreement.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Small config accepted by grad_check.
inline EncoderConfig micro_config() {
  EncoderConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 16;
  c.d_ff = 24;
  c.max_positions = 16;
  c.n_languages = 2;
  c.vocab_size = 32;
  c.dropout = 0.0f;
  return c;
}

/// Two sequences of different lengths (one padded) with masked positions,
/// tokens drawn from [kNumSpecials, vocab - 4) so some vocabulary rows
/// never appear in the input.
inline MaskedBatch micro_batch(const EncoderConfig& c, Rng& rng) {
  auto tokens = [&](std::size_t n) {
    bpe::TokenSeq t;
    const auto span = c.vocab_size - 4 - static_cast<std::uint32_t>(bpe::kNumSpecials);
    for (std::size_t i = 0; i < n; ++i) t.push_back(bpe::kNumSpecials + static_cast<std::int32_t>(rng.below(span)));
    return t;
  };
  MaskingPolicy policy;
  policy.select_p = 0.4;
  std::vector<Sequence> seqs;
  seqs.push_back(apply_mlm_masking(make_pair(tokens(4), 0, tokens(3), 1), policy, c.vocab_size, rng));
  seqs.push_back(apply_mlm_masking(make_single(tokens(3), 1), policy, c.vocab_size, rng));
  return collate(seqs);
}

/// Parameters for the check: standard init plus N(0, 0.2) jitter on every
/// entry, so gains and biases are exercised away from their init values.
inline EncoderParams<double> micro_params(const EncoderConfig& c, std::uint64_t seed) {
  auto p = init_params<double>(c, seed);
  Rng rng(derive_seed(seed, "gradcheck.jitter"));
  for (auto& t : p.tensors()) {
    for (auto& x : t) x += 0.2 * rng.normal();
  }
  return p;
}

/// Central differences with step h on `samples` random parameters of a
/// double-precision micro model. Returns the worst relative error.
inline GradCheckResult grad_check(const EncoderConfig& config, std::uint64_t seed, double h = 1e-5,
                                  std::size_t samples = 256) {
  if (config.n_layers > 2 || config.d_model > 16 || config.vocab_size > 32)
    throw ConfigError("grad_check: needs a micro config (<= 2 layers, d_model <= 16, vocab <= 32)");
  auto cfg = config;
  cfg.dropout = 0.0f;
  auto params = micro_params(cfg, seed);
  Rng rng(derive_seed(seed, "gradcheck.batch"));
  const auto batch = micro_batch(cfg, rng);
  const auto analytic = loss_and_grads<double>(params, batch, nullptr);

  auto ps = params.tensors();
  const auto gs = analytic.grads.tensors();
  GradCheckResult result;
  for (std::size_t s = 0; s < samples; ++s) {
    const std::size_t ti = rng.below(ps.size());
    const std::size_t j = rng.below(ps[ti].size());
    const double orig = ps[ti][j];
    ps[ti][j] = orig + h;
    const double up = mlm_loss<double>(params, batch);
    ps[ti][j] = orig - h;
    const double down = mlm_loss<double>(params, batch);
    ps[ti][j] = orig;
    const double numeric = (up - down) / (2.0 * h);
    const double a = gs[ti][j];
    if (a == 0.0 && std::abs(numeric) < 1e-12) ++result.both_zero;
    result.max_rel_error = std::max(result.max_rel_error, relative_error(a, numeric));
    ++result.checked;
  }
  return result;
}

}  // namespace xmine::nn
