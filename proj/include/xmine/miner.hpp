#pragma once

// Margin-based parallel corpus mining over two embedding sets: exact blocked
// kNN, margin scoring, candidate extraction, threshold tuning and F1.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <numeric>
#include <set>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "xmine/common.hpp"
#include "xmine/embedder.hpp"

namespace xmine::mine {

using embed::EmbeddingSet;
using MatD = nn::Mat<double>;

struct Neighbor {
  std::size_t index = 0;
  double cosine = 0.0;
};

using NeighborLists = std::vector<std::vector<Neighbor>>;

enum class Margin { Absolute, Distance, Ratio };
enum class Strategy { Forward, Backward, Intersection, MaxUnion };

inline const char* margin_name(Margin m) {
  switch (m) {
    case Margin::Absolute: return "absolute";
    case Margin::Distance: return "distance";
    case Margin::Ratio: return "ratio";
  }
  return "?";
}

inline Margin parse_margin(std::string_view s) {
  if (s == "absolute") return Margin::Absolute;
  if (s == "distance") return Margin::Distance;
  if (s == "ratio") return Margin::Ratio;
  throw ConfigError("unknown margin variant '" + std::string(s) + "'");
}

inline const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::Forward: return "forward";
    case Strategy::Backward: return "backward";
    case Strategy::Intersection: return "intersection";
    case Strategy::MaxUnion: return "max-union";
  }
  return "?";
}

inline Strategy parse_strategy(std::string_view s) {
  if (s == "forward") return Strategy::Forward;
  if (s == "backward") return Strategy::Backward;
  if (s == "intersection") return Strategy::Intersection;
  if (s == "max-union") return Strategy::MaxUnion;
  throw ConfigError("unknown extraction strategy '" + std::string(s) + "'");
}

struct MarginSpec {
  Margin variant = Margin::Ratio;
  std::size_t k = 4;
  Strategy strategy = Strategy::MaxUnion;
};

struct Candidate {
  std::string id_a;
  std::string id_b;
  double score = 0.0;
};

struct CandidateSet {
  std::vector<Candidate> candidates;
  /// Ratio margins with a zero denominator; those scores are +infinity.
  std::size_t degenerate = 0;
};

namespace detail {

inline MatD unit_rows(const EmbeddingSet& s) {
  MatD m = s.matrix.cast<double>();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double n = m.row(i).norm();
    if (n > 0.0) m.row(i) /= n;
  }
  return m;
}

inline constexpr Eigen::Index kBlockRows = 256;

/// Calls f(row, scores) for every query row with its cosines to all keys,
/// computed as blocked matrix products.
template <typename F>
void for_each_row(const MatD& queries, const MatD& keys, F&& f) {
  MatD block;
  for (Eigen::Index r0 = 0; r0 < queries.rows(); r0 += kBlockRows) {
    const Eigen::Index nr = std::min(kBlockRows, queries.rows() - r0);
    block.noalias() = queries.middleRows(r0, nr) * keys.transpose();
    for (Eigen::Index i = 0; i < nr; ++i) f(static_cast<std::size_t>(r0 + i), block.row(i));
  }
}

/// Strict ordering: higher score first, then lower index.
inline bool better(double sa, std::size_t ia, double sb, std::size_t ib) {
  return sa > sb || (sa == sb && ia < ib);
}

/// Fixed-capacity best-k list kept sorted by `better`.
class TopK {
 public:
  explicit TopK(std::size_t k = 0) : k_(k) { items_.reserve(k); }

  void offer(std::size_t index, double score) {
    if (items_.size() == k_) {
      const auto& worst = items_.back();
      if (!better(score, index, worst.cosine, worst.index)) return;
      items_.pop_back();
    }
    auto it = std::upper_bound(items_.begin(), items_.end(), Neighbor{index, score},
                               [](const Neighbor& a, const Neighbor& b) { return better(a.cosine, a.index, b.cosine, b.index); });
    items_.insert(it, Neighbor{index, score});
  }

  std::vector<Neighbor> take() { return std::move(items_); }

 private:
  std::size_t k_;
  std::vector<Neighbor> items_;
};

template <typename Row>
std::vector<Neighbor> top_k_of_row(const Row& scores, std::size_t k) {
  TopK top(k);
  for (Eigen::Index j = 0; j < scores.size(); ++j) top.offer(static_cast<std::size_t>(j), scores(j));
  return top.take();
}

/// Row-wise and column-wise k nearest neighbours from one pass over the
/// similarity matrix.
inline std::pair<NeighborLists, NeighborLists> knn_both(const MatD& a, const MatD& b, std::size_t k) {
  NeighborLists rows(static_cast<std::size_t>(a.rows()));
  std::vector<TopK> cols(static_cast<std::size_t>(b.rows()), TopK(k));
  for_each_row(a, b, [&](std::size_t i, const auto& scores) {
    rows[i] = top_k_of_row(scores, k);
    for (Eigen::Index j = 0; j < scores.size(); ++j) cols[static_cast<std::size_t>(j)].offer(i, scores(j));
  });
  NeighborLists col_lists;
  col_lists.reserve(cols.size());
  for (auto& c : cols) col_lists.push_back(c.take());
  return {std::move(rows), std::move(col_lists)};
}

inline void check_dims(const EmbeddingSet& a, const EmbeddingSet& b) {
  if (a.dim() != b.dim())
    throw DataError("embedding dimensions differ: " + std::to_string(a.dim()) + " vs " + std::to_string(b.dim()));
}

}  // namespace detail

/// Exact top-k keys per query by cosine, descending; ties go to the lower
/// key index.
inline NeighborLists knn(const EmbeddingSet& queries, const EmbeddingSet& keys, std::size_t k) {
  detail::check_dims(queries, keys);
  if (k > keys.size()) throw ConfigError("knn: k exceeds the number of keys");
  const MatD q = detail::unit_rows(queries);
  const MatD kk = detail::unit_rows(keys);
  NeighborLists out(queries.size());
  detail::for_each_row(q, kk, [&](std::size_t i, const auto& scores) { out[i] = detail::top_k_of_row(scores, k); });
  return out;
}

/// Average neighbourhood similarity term: sum of the k best cosines / (2k).
inline std::vector<double> neighborhood_terms(const NeighborLists& lists, std::size_t k) {
  std::vector<double> out;
  out.reserve(lists.size());
  for (const auto& l : lists) {
    double s = 0.0;
    for (const auto& n : l) s += n.cosine;
    out.push_back(s / (2.0 * static_cast<double>(k)));
  }
  return out;
}

/// Margin score of one pair given its cosine and both neighbourhood terms.
inline double margin_score(Margin variant, double cosine, double term_a, double term_b, bool* degenerate = nullptr) {
  const double denom = term_a + term_b;
  switch (variant) {
    case Margin::Absolute: return cosine;
    case Margin::Distance: return cosine - denom;
    case Margin::Ratio:
      if (denom == 0.0) {
        if (degenerate) *degenerate = true;
        return std::numeric_limits<double>::infinity();
      }
      return cosine / denom;
  }
  return cosine;
}

/// Scores all pairs of A x B with the margin criterion and extracts
/// candidates per the strategy. Output is ordered by (row of A, row of B).
inline CandidateSet margin_scores(const EmbeddingSet& a, const EmbeddingSet& b, const MarginSpec& spec) {
  detail::check_dims(a, b);
  if (spec.k < 1 || spec.k > a.size() || spec.k > b.size())
    throw ConfigError("margin_scores: k must be in [1, min pool size]");
  const MatD ua = detail::unit_rows(a);
  const MatD ub = detail::unit_rows(b);
  const auto [nn_ab, nn_ba] = detail::knn_both(ua, ub, spec.k);
  const auto term_a = neighborhood_terms(nn_ab, spec.k);
  const auto term_b = neighborhood_terms(nn_ba, spec.k);

  constexpr std::size_t kNone = static_cast<std::size_t>(-1);
  const double lowest = -std::numeric_limits<double>::infinity();
  std::vector<std::size_t> fwd(a.size(), kNone), bwd(b.size(), kNone);
  std::vector<double> fwd_score(a.size(), lowest), bwd_score(b.size(), lowest);
  CandidateSet out;
  detail::for_each_row(ua, ub, [&](std::size_t i, const auto& cos) {
    for (Eigen::Index jj = 0; jj < cos.size(); ++jj) {
      const auto j = static_cast<std::size_t>(jj);
      const double s = margin_score(spec.variant, cos(jj), term_a[i], term_b[j]);
      if (fwd[i] == kNone || s > fwd_score[i]) {
        fwd[i] = j;
        fwd_score[i] = s;
      }
      if (bwd[j] == kNone || s > bwd_score[j]) {
        bwd[j] = i;
        bwd_score[j] = s;
      }
    }
  });

  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  std::vector<double> scores;
  auto add = [&](std::size_t i, std::size_t j, double s) {
    pairs.emplace_back(i, j);
    scores.push_back(s);
  };
  switch (spec.strategy) {
    case Strategy::Forward:
      for (std::size_t i = 0; i < a.size(); ++i) add(i, fwd[i], fwd_score[i]);
      break;
    case Strategy::Backward:
      for (std::size_t j = 0; j < b.size(); ++j) add(bwd[j], j, bwd_score[j]);
      break;
    case Strategy::Intersection:
      for (std::size_t i = 0; i < a.size(); ++i) {
        if (bwd[fwd[i]] == i) add(i, fwd[i], fwd_score[i]);
      }
      break;
    case Strategy::MaxUnion:
      for (std::size_t i = 0; i < a.size(); ++i) add(i, fwd[i], fwd_score[i]);
      for (std::size_t j = 0; j < b.size(); ++j) {
        if (fwd[bwd[j]] != j) add(bwd[j], j, bwd_score[j]);
      }
      break;
  }
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return pairs[x] < pairs[y]; });
  out.candidates.reserve(order.size());
  for (const auto o : order) {
    const auto [i, j] = pairs[o];
    out.candidates.push_back({a.ids[i], b.ids[j], scores[o]});
    if (std::isinf(scores[o])) ++out.degenerate;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

class GoldSet {
 public:
  GoldSet() = default;
  explicit GoldSet(const std::vector<std::pair<std::string, std::string>>& pairs) {
    for (const auto& [a, b] : pairs) keys_.insert(key(a, b));
  }
  bool contains(const std::string& a, const std::string& b) const { return keys_.count(key(a, b)) != 0; }
  std::size_t size() const { return keys_.size(); }
  bool empty() const { return keys_.empty(); }

 private:
  static std::string key(const std::string& a, const std::string& b) { return a + '\t' + b; }
  std::unordered_set<std::string> keys_;
};

struct MiningReport {
  double threshold = 0.0;
  std::size_t tp = 0, fp = 0, fn = 0;
  double precision = 0.0, recall = 0.0, f1 = 0.0;
  std::size_t degenerate = 0;
};

inline double f1_score(double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

/// Keeps candidates scoring >= threshold and compares them with gold.
inline MiningReport evaluate_mining(const std::vector<Candidate>& candidates, double threshold, const GoldSet& gold) {
  MiningReport r;
  r.threshold = threshold;
  std::set<std::pair<std::string, std::string>> predicted;
  for (const auto& c : candidates) {
    if (c.score >= threshold) predicted.emplace(c.id_a, c.id_b);
  }
  for (const auto& [a, b] : predicted) {
    if (gold.contains(a, b)) ++r.tp;
    else ++r.fp;
  }
  r.fn = gold.size() - r.tp;
  r.precision = predicted.empty() ? 0.0 : static_cast<double>(r.tp) / static_cast<double>(predicted.size());
  r.recall = gold.empty() ? 0.0 : static_cast<double>(r.tp) / static_cast<double>(gold.size());
  r.f1 = f1_score(r.precision, r.recall);
  return r;
}

struct ThresholdChoice {
  double threshold = std::numeric_limits<double>::infinity();
  double f1 = 0.0;
};

/// Sweeps every distinct candidate score as a threshold and returns the one
/// with the best F1; ties go to the higher threshold.
inline ThresholdChoice tune_threshold(const std::vector<Candidate>& candidates, const GoldSet& gold) {
  if (gold.empty()) throw DataError("tune_threshold: gold set is empty");
  ThresholdChoice best;
  if (candidates.empty()) return best;
  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return candidates[x].score > candidates[y].score; });
  std::size_t kept = 0, tp = 0;
  for (std::size_t pos = 0; pos < order.size();) {
    const double t = candidates[order[pos]].score;
    while (pos < order.size() && candidates[order[pos]].score == t) {
      const auto& c = candidates[order[pos]];
      ++kept;
      if (gold.contains(c.id_a, c.id_b)) ++tp;
      ++pos;
    }
    const double p = static_cast<double>(tp) / static_cast<double>(kept);
    const double r = static_cast<double>(tp) / static_cast<double>(gold.size());
    const double f = f1_score(p, r);
    if (f > best.f1) {
      best.f1 = f;
      best.threshold = t;
    }
  }
  if (best.f1 == 0.0) best.threshold = candidates[order.front()].score;
  return best;
}

inline nlohmann::json to_json(const MiningReport& r) {
  nlohmann::json j;
  j["threshold"] = r.threshold;
  j["tp"] = r.tp;
  j["fp"] = r.fp;
  j["fn"] = r.fn;
  j["precision"] = r.precision;
  j["recall"] = r.recall;
  j["f1"] = r.f1;
  j["degenerate_margin"] = r.degenerate;
  return j;
}

// Candidates file: "id_a<TAB>id_b<TAB>score", six decimals.
inline std::string format_score(double s) {
  if (std::isinf(s)) return s > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", s);
  return buf;
}

inline void write_candidates(const std::string& path, const std::vector<Candidate>& cands) {
  auto os = io::open_out(path);
  for (const auto& c : cands) os << c.id_a << '\t' << c.id_b << '\t' << format_score(c.score) << '\n';
}

inline std::vector<Candidate> read_candidates(const std::string& path) {
  std::vector<Candidate> out;
  for (const auto& line : io::read_lines(path)) {
    if (line.empty()) continue;
    const auto parts = split(line, '\t');
    if (parts.size() != 3) throw DataError("candidate line must have three TAB-separated fields in " + path);
    Candidate c{parts[0], parts[1], 0.0};
    if (parts[2] == "inf") c.score = std::numeric_limits<double>::infinity();
    else if (parts[2] == "-inf") c.score = -std::numeric_limits<double>::infinity();
    else c.score = std::stod(parts[2]);
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace xmine::mine
