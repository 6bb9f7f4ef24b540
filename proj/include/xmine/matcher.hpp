#pragma once

// Parallel sentence matching: recover a bijection between two equally sized
// pools by nearest-neighbour search in both directions.

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "xmine/common.hpp"
#include "xmine/embedder.hpp"
#include "xmine/miner.hpp"

namespace xmine::match {

using embed::EmbeddingSet;

struct PsmReport {
  double acc_fwd = 0.0;
  double acc_bwd = 0.0;
  double acc_mean = 0.0;
  std::size_t n = 0;
};

struct PsmOptions {
  /// Ranks by margin score instead of plain cosine (ablation only).
  bool use_margin = false;
  mine::Margin margin = mine::Margin::Ratio;
  std::size_t k = 4;
};

/// Best match of every row of A in B (fwd) and every row of B in A (bwd);
/// ties go to the lowest index.
struct Matches {
  std::vector<std::size_t> fwd;
  std::vector<std::size_t> bwd;
};

inline Matches nearest_matches(const EmbeddingSet& a, const EmbeddingSet& b, const PsmOptions& opt = {}) {
  Matches m;
  if (!opt.use_margin) {
    for (const auto& l : mine::knn(a, b, 1)) m.fwd.push_back(l.front().index);
    for (const auto& l : mine::knn(b, a, 1)) m.bwd.push_back(l.front().index);
    return m;
  }
  const auto ua = mine::detail::unit_rows(a);
  const auto ub = mine::detail::unit_rows(b);
  const auto [nn_ab, nn_ba] = mine::detail::knn_both(ua, ub, opt.k);
  const auto ta = mine::neighborhood_terms(nn_ab, opt.k);
  const auto tb = mine::neighborhood_terms(nn_ba, opt.k);
  m.fwd.assign(a.size(), 0);
  m.bwd.assign(b.size(), 0);
  const double lowest = -std::numeric_limits<double>::infinity();
  std::vector<double> fs(a.size(), lowest), bs(b.size(), lowest);
  mine::detail::for_each_row(ua, ub, [&](std::size_t i, const auto& cos) {
    for (Eigen::Index jj = 0; jj < cos.size(); ++jj) {
      const auto j = static_cast<std::size_t>(jj);
      const double s = mine::margin_score(opt.margin, cos(jj), ta[i], tb[j]);
      if (s > fs[i]) {
        fs[i] = s;
        m.fwd[i] = j;
      }
      if (s > bs[j]) {
        bs[j] = s;
        m.bwd[j] = i;
      }
    }
  });
  return m;
}

/// gold[i] is the row of B translating row i of A.
inline PsmReport psm_accuracy(const EmbeddingSet& a, const EmbeddingSet& b, const std::vector<std::size_t>& gold,
                              const PsmOptions& opt = {}) {
  if (a.size() != b.size() || a.size() != gold.size())
    throw DataError("psm: pools and gold must have equal size (" + std::to_string(a.size()) + ", " +
                    std::to_string(b.size()) + ", " + std::to_string(gold.size()) + ")");
  if (a.size() == 0) throw DataError("psm: empty pools");
  std::vector<std::size_t> inverse(gold.size(), static_cast<std::size_t>(-1));
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (gold[i] >= b.size() || inverse[gold[i]] != static_cast<std::size_t>(-1))
      throw DataError("psm: gold is not a bijection");
    inverse[gold[i]] = i;
  }
  const auto m = nearest_matches(a, b, opt);
  std::size_t ok_f = 0, ok_b = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ok_f += m.fwd[i] == gold[i];
  for (std::size_t j = 0; j < b.size(); ++j) ok_b += m.bwd[j] == inverse[j];
  PsmReport r;
  r.n = a.size();
  r.acc_fwd = static_cast<double>(ok_f) / static_cast<double>(r.n);
  r.acc_bwd = static_cast<double>(ok_b) / static_cast<double>(r.n);
  r.acc_mean = (r.acc_fwd + r.acc_bwd) / 2.0;
  return r;
}

inline nlohmann::json to_json(const PsmReport& r) {
  nlohmann::json j;
  j["acc_fwd"] = r.acc_fwd;
  j["acc_bwd"] = r.acc_bwd;
  j["acc_mean"] = r.acc_mean;
  j["n"] = r.n;
  return j;
}

/// Per-sentence error dump: "direction<TAB>query_id<TAB>predicted_id<TAB>gold_id"
/// for every wrong match.
inline void write_errors(const std::string& path, const EmbeddingSet& a, const EmbeddingSet& b,
                         const std::vector<std::size_t>& gold, const PsmOptions& opt = {}) {
  const auto m = nearest_matches(a, b, opt);
  std::vector<std::size_t> inverse(gold.size());
  for (std::size_t i = 0; i < gold.size(); ++i) inverse[gold[i]] = i;
  auto os = io::open_out(path);
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (m.fwd[i] != gold[i]) os << "fwd\t" << a.ids[i] << '\t' << b.ids[m.fwd[i]] << '\t' << b.ids[gold[i]] << '\n';
  }
  for (std::size_t j = 0; j < b.size(); ++j) {
    if (m.bwd[j] != inverse[j])
      os << "bwd\t" << b.ids[j] << '\t' << a.ids[m.bwd[j]] << '\t' << a.ids[inverse[j]] << '\n';
  }
}

}  // namespace xmine::match
