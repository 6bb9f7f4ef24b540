#pragma once

// Sequence layouts (single sentence and translation pair) and MLM masking.

#include <algorithm>
#include <cstdint>
#include <span>
#include <vector>

#include "xmine/common.hpp"
#include "xmine/encoder.hpp"
#include "xmine/tokenizer.hpp"

namespace xmine::nn {

/// One unpadded encoder input.
struct Sequence {
  std::vector<std::int32_t> tokens;
  std::vector<std::int32_t> positions;
  std::vector<std::int32_t> langs;
  std::vector<std::uint8_t> special;
  std::vector<std::size_t> pred_pos;
  std::vector<std::int32_t> labels;

  std::size_t size() const { return tokens.size(); }
};

/// BOS tokens SEP, positions 0..n+1, one language id throughout.
inline Sequence make_single(const bpe::TokenSeq& toks, std::int32_t lang) {
  Sequence s;
  auto push = [&](std::int32_t t, bool special) {
    s.positions.push_back(static_cast<std::int32_t>(s.tokens.size()));
    s.tokens.push_back(t);
    s.langs.push_back(lang);
    s.special.push_back(special ? 1 : 0);
  };
  push(bpe::kBos, true);
  for (const auto t : toks) push(t, false);
  push(bpe::kSep, true);
  return s;
}

/// BOS src SEP | tgt SEP. Positions restart at 0 where the target segment
/// begins; each segment carries its own language id.
inline Sequence make_pair(const bpe::TokenSeq& src, std::int32_t src_lang, const bpe::TokenSeq& tgt,
                          std::int32_t tgt_lang) {
  Sequence s = make_single(src, src_lang);
  std::int32_t pos = 0;
  auto push = [&](std::int32_t t, bool special) {
    s.tokens.push_back(t);
    s.positions.push_back(pos++);
    s.langs.push_back(tgt_lang);
    s.special.push_back(special ? 1 : 0);
  };
  for (const auto t : tgt) push(t, false);
  push(bpe::kSep, true);
  return s;
}

struct MaskingPolicy {
  double select_p = 0.15;
  double mask_frac = 0.8;
  double random_frac = 0.1;
  double keep_frac = 0.1;

  void validate() const {
    if (!(select_p >= 0.0 && select_p <= 1.0)) throw ConfigError("masking: select_p must be in [0,1]");
    if (mask_frac < 0 || random_frac < 0 || keep_frac < 0 ||
        std::abs(mask_frac + random_frac + keep_frac - 1.0) > 1e-9)
      throw ConfigError("masking: replacement fractions must be non-negative and sum to 1");
  }
};

/// Selects each non-special token with probability select_p (at least one
/// is always forced), then replaces it by MASK / a random regular token /
/// itself according to the 80/10/10-style fractions. Labels hold the
/// originals at selected positions.
inline Sequence apply_mlm_masking(Sequence seq, const MaskingPolicy& policy, std::uint32_t vocab_size, Rng& rng) {
  policy.validate();
  if (seq.tokens.empty()) throw DataError("apply_mlm_masking: empty sequence");
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (!seq.special[i]) candidates.push_back(i);
  }
  if (candidates.empty()) throw DataError("apply_mlm_masking: sequence has no maskable tokens");
  seq.pred_pos.clear();
  seq.labels.clear();
  for (const auto i : candidates) {
    if (rng.bernoulli(policy.select_p)) seq.pred_pos.push_back(i);
  }
  if (seq.pred_pos.empty()) seq.pred_pos.push_back(candidates[rng.below(candidates.size())]);
  const auto n_regular = vocab_size - static_cast<std::uint32_t>(bpe::kNumSpecials);
  for (const auto i : seq.pred_pos) {
    seq.labels.push_back(seq.tokens[i]);
    const double u = rng.uniform();
    if (u < policy.mask_frac) {
      seq.tokens[i] = bpe::kMask;
    } else if (u < policy.mask_frac + policy.random_frac) {
      seq.tokens[i] = bpe::kNumSpecials + static_cast<std::int32_t>(rng.below(n_regular));
    }
  }
  return seq;
}

inline Sequence build_mlm_example(const bpe::TokenSeq& toks, std::int32_t lang, const MaskingPolicy& policy,
                                  std::uint32_t vocab_size, std::uint32_t max_positions, Rng& rng) {
  if (toks.size() + 2 > max_positions) throw DataError("MLM example longer than max_positions");
  return apply_mlm_masking(make_single(toks, lang), policy, vocab_size, rng);
}

/// Translation-LM example: the pair is concatenated and masked across both
/// segments, so either side can be predicted from the other.
inline Sequence build_tlm_example(const bpe::TokenSeq& src, std::int32_t src_lang, const bpe::TokenSeq& tgt,
                                  std::int32_t tgt_lang, const MaskingPolicy& policy, std::uint32_t vocab_size,
                                  std::uint32_t max_positions, Rng& rng) {
  if (src.size() + tgt.size() + 3 > max_positions)
    throw DataError("TLM example of " + std::to_string(src.size() + tgt.size() + 3) +
                    " tokens exceeds max_positions " + std::to_string(max_positions));
  return apply_mlm_masking(make_pair(src, src_lang, tgt, tgt_lang), policy, vocab_size, rng);
}

/// Pads sequences to the longest one and lays them out row-major.
inline MaskedBatch collate(std::span<const Sequence> seqs) {
  MaskedBatch b;
  b.batch = seqs.size();
  for (const auto& s : seqs) b.length = std::max(b.length, s.size());
  const std::size_t n = b.batch * b.length;
  b.tokens.assign(n, bpe::kPad);
  b.positions.assign(n, 0);
  b.langs.assign(n, 0);
  b.attend.assign(n, 0);
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const auto& s = seqs[i];
    for (std::size_t t = 0; t < s.size(); ++t) {
      const std::size_t r = i * b.length + t;
      b.tokens[r] = s.tokens[t];
      b.positions[r] = s.positions[t];
      b.langs[r] = s.langs[t];
      b.attend[r] = 1;
    }
    for (std::size_t j = 0; j < s.pred_pos.size(); ++j) {
      b.pred_rows.push_back(i * b.length + s.pred_pos[j]);
      b.labels.push_back(s.labels[j]);
    }
  }
  return b;
}

inline MaskedBatch collate(const Sequence& s) { return collate(std::span<const Sequence>(&s, 1)); }

}  // namespace xmine::nn
