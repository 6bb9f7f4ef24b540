#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "xmine/miner.hpp"

using namespace xmine;
using namespace xmine::mine;

namespace {

EmbeddingSet make_set(const std::string& prefix, const std::vector<std::vector<float>>& rows) {
  EmbeddingSet s;
  s.matrix.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    s.ids.push_back(prefix + std::to_string(i));
    for (std::size_t j = 0; j < rows[i].size(); ++j) s.matrix(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  }
  return s;
}

EmbeddingSet random_set(const std::string& prefix, std::size_t n, std::size_t d, Rng& rng) {
  std::vector<std::vector<float>> rows(n, std::vector<float>(d));
  for (auto& r : rows) {
    for (auto& x : r) x = static_cast<float>(rng.normal());
  }
  return make_set(prefix, rows);
}

double naive_cosine(const EmbeddingSet& a, std::size_t i, const EmbeddingSet& b, std::size_t j) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t c = 0; c < a.dim(); ++c) {
    const double x = a.matrix(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c));
    const double y = b.matrix(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(c));
    dot += x * y;
    na += x * x;
    nb += y * y;
  }
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

/// Full sort of every key per query.
std::vector<std::vector<std::pair<std::size_t, double>>> naive_knn(const EmbeddingSet& q, const EmbeddingSet& keys,
                                                                   std::size_t k) {
  std::vector<std::vector<std::pair<std::size_t, double>>> out(q.size());
  for (std::size_t i = 0; i < q.size(); ++i) {
    std::vector<std::pair<std::size_t, double>> all;
    for (std::size_t j = 0; j < keys.size(); ++j) all.emplace_back(j, naive_cosine(q, i, keys, j));
    std::stable_sort(all.begin(), all.end(), [](const auto& x, const auto& y) { return x.second > y.second; });
    all.resize(k);
    out[i] = all;
  }
  return out;
}

/// All-pairs margin scores and strategy extraction, written out directly.
std::map<std::pair<std::string, std::string>, double> brute_force_margin(const EmbeddingSet& a, const EmbeddingSet& b,
                                                                         const MarginSpec& spec) {
  const std::size_t n = a.size(), m = b.size(), k = spec.k;
  std::vector<std::vector<double>> cos(n, std::vector<double>(m));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) cos[i][j] = naive_cosine(a, i, b, j);
  }
  std::vector<double> na(n), nb(m);
  for (std::size_t i = 0; i < n; ++i) {
    auto row = cos[i];
    std::sort(row.rbegin(), row.rend());
    for (std::size_t t = 0; t < k; ++t) na[i] += row[t] / (2.0 * static_cast<double>(k));
  }
  for (std::size_t j = 0; j < m; ++j) {
    std::vector<double> col;
    for (std::size_t i = 0; i < n; ++i) col.push_back(cos[i][j]);
    std::sort(col.rbegin(), col.rend());
    for (std::size_t t = 0; t < k; ++t) nb[j] += col[t] / (2.0 * static_cast<double>(k));
  }
  auto score = [&](std::size_t i, std::size_t j) {
    const double c = cos[i][j], den = na[i] + nb[j];
    if (spec.variant == Margin::Absolute) return c;
    if (spec.variant == Margin::Distance) return c - den;
    return c / den;
  };
  std::vector<std::size_t> fwd(n), bwd(m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 1; j < m; ++j) {
      if (score(i, j) > score(i, fwd[i])) fwd[i] = j;
    }
  }
  for (std::size_t j = 0; j < m; ++j) {
    for (std::size_t i = 1; i < n; ++i) {
      if (score(i, j) > score(bwd[j], j)) bwd[j] = i;
    }
  }
  std::map<std::pair<std::string, std::string>, double> out;
  auto add = [&](std::size_t i, std::size_t j) { out[{a.ids[i], b.ids[j]}] = score(i, j); };
  for (std::size_t i = 0; i < n; ++i) {
    if (spec.strategy == Strategy::Forward || spec.strategy == Strategy::MaxUnion) add(i, fwd[i]);
    if (spec.strategy == Strategy::Intersection && bwd[fwd[i]] == i) add(i, fwd[i]);
  }
  for (std::size_t j = 0; j < m; ++j) {
    if (spec.strategy == Strategy::Backward || spec.strategy == Strategy::MaxUnion) add(bwd[j], j);
  }
  return out;
}

std::set<std::pair<std::string, std::string>> pairs_of(const std::vector<Candidate>& cs) {
  std::set<std::pair<std::string, std::string>> s;
  for (const auto& c : cs) s.emplace(c.id_a, c.id_b);
  return s;
}

const std::vector<Margin> kVariants = {Margin::Absolute, Margin::Distance, Margin::Ratio};
const std::vector<Strategy> kStrategies = {Strategy::Forward, Strategy::Backward, Strategy::Intersection,
                                           Strategy::MaxUnion};

}  // namespace

TEST(Knn, SelfMatchHasUnitCosine) {
  const auto keys = make_set("k", {{1, 2, 3}, {-1, 0, 2}, {0, 5, -1}});
  const auto q = make_set("q", {{0, 5, -1}});
  const auto r = knn(q, keys, 1);
  ASSERT_EQ(r[0].size(), 1u);
  EXPECT_EQ(r[0][0].index, 2u);
  EXPECT_NEAR(r[0][0].cosine, 1.0, 1e-12);
}

TEST(Knn, OrthogonalPairHasZeroCosine) {
  const auto r = knn(make_set("q", {{1, 0}}), make_set("k", {{0, 1}}), 1);
  EXPECT_EQ(r[0][0].cosine, 0.0);
}

TEST(Knn, MatchesNaiveSortOnRandomSets) {
  Rng rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const auto q = random_set("q", 50, 8, rng), keys = random_set("k", 60, 8, rng);
    const auto got = knn(q, keys, 5);
    const auto want = naive_knn(q, keys, 5);
    for (std::size_t i = 0; i < q.size(); ++i) {
      ASSERT_EQ(got[i].size(), 5u);
      for (std::size_t t = 0; t < 5; ++t) {
        EXPECT_EQ(got[i][t].index, want[i][t].first);
        EXPECT_NEAR(got[i][t].cosine, want[i][t].second, 1e-9);
      }
    }
  }
}

TEST(Knn, TiesGoToLowerKeyIndex) {
  // Keys 1 and 3 are identical, as are 0 and 2 up to scale.
  const auto keys = make_set("k", {{1, 1}, {1, 0}, {2, 2}, {1, 0}});
  const auto r = knn(make_set("q", {{1, 0}, {3, 3}}), keys, 4);
  EXPECT_EQ(r[0][0].index, 1u);
  EXPECT_EQ(r[0][1].index, 3u);
  EXPECT_EQ(r[1][0].index, 0u);
  EXPECT_EQ(r[1][1].index, 2u);
}

TEST(Knn, LargeSetsCrossBlockBoundaries) {
  Rng rng(5);
  const auto q = random_set("q", 600, 6, rng), keys = random_set("k", 530, 6, rng);
  const auto got = knn(q, keys, 3);
  const auto want = naive_knn(q, keys, 3);
  for (std::size_t i = 0; i < q.size(); i += 37) {
    for (std::size_t t = 0; t < 3; ++t) EXPECT_EQ(got[i][t].index, want[i][t].first);
  }
}

TEST(Knn, Errors) {
  const auto a = make_set("a", {{1, 0}}), b = make_set("b", {{1, 0, 0}});
  EXPECT_THROW(knn(a, b, 1), DataError);
  EXPECT_THROW(knn(a, a, 2), ConfigError);
}

TEST(Margin, RatioWorkedExample) {
  const auto a = make_set("x", {{1, 0}, {0.8f, 0.6f}});
  const auto b = make_set("y", {{1, 0}, {0.6f, 0.8f}});
  const auto cs = margin_scores(a, b, {Margin::Ratio, 2, Strategy::Forward});
  ASSERT_EQ(cs.candidates.front().id_a, "x0");
  ASSERT_EQ(cs.candidates.front().id_b, "y0");
  EXPECT_NEAR(cs.candidates.front().score, 1.0 / 0.85, 1e-6);
  const auto abs = margin_scores(a, b, {Margin::Absolute, 2, Strategy::Forward});
  EXPECT_NEAR(abs.candidates.front().score, 1.0, 1e-6);
}

TEST(Margin, MatchesBruteForceForEveryVariantAndStrategy) {
  Rng rng(33);
  for (int trial = 0; trial < 4; ++trial) {
    const auto a = random_set("a", 50, 6, rng), b = random_set("b", 60, 6, rng);
    for (const auto v : kVariants) {
      for (const auto s : kStrategies) {
        const MarginSpec spec{v, 4, s};
        const auto got = margin_scores(a, b, spec).candidates;
        const auto want = brute_force_margin(a, b, spec);
        ASSERT_EQ(got.size(), want.size()) << margin_name(v) << "/" << strategy_name(s);
        for (const auto& c : got) {
          const auto it = want.find({c.id_a, c.id_b});
          ASSERT_NE(it, want.end());
          EXPECT_NEAR(c.score, it->second, 1e-6);
        }
      }
    }
  }
}

TEST(Margin, InvariantUnderPositiveScaling) {
  Rng rng(2);
  auto a = random_set("a", 30, 5, rng), b = random_set("b", 40, 5, rng);
  for (const auto v : kVariants) {
    for (const auto s : kStrategies) {
      const auto before = margin_scores(a, b, {v, 3, s}).candidates;
      auto a2 = a, b2 = b;
      a2.matrix *= 3.7f;
      b2.matrix *= 3.7f;
      const auto after = margin_scores(a2, b2, {v, 3, s}).candidates;
      ASSERT_EQ(pairs_of(before), pairs_of(after));
      for (std::size_t i = 0; i < before.size(); ++i) EXPECT_NEAR(before[i].score, after[i].score, 1e-6);
    }
  }
}

TEST(Margin, StrategySubsetRelations) {
  Rng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const auto a = random_set("a", 25, 4, rng), b = random_set("b", 35, 4, rng);
    const auto f = pairs_of(margin_scores(a, b, {Margin::Ratio, 4, Strategy::Forward}).candidates);
    const auto bw = pairs_of(margin_scores(a, b, {Margin::Ratio, 4, Strategy::Backward}).candidates);
    const auto in = pairs_of(margin_scores(a, b, {Margin::Ratio, 4, Strategy::Intersection}).candidates);
    const auto un = margin_scores(a, b, {Margin::Ratio, 4, Strategy::MaxUnion}).candidates;
    for (const auto& p : in) {
      EXPECT_TRUE(f.count(p));
      EXPECT_TRUE(bw.count(p));
    }
    EXPECT_LE(un.size(), f.size() + bw.size());
    auto both = f;
    both.insert(bw.begin(), bw.end());
    EXPECT_EQ(pairs_of(un), both);
  }
}

TEST(Margin, ZeroEmbeddingsGiveFlaggedInfiniteRatio) {
  const auto a = make_set("a", {{0, 0}, {0, 0}}), b = make_set("b", {{0, 0}, {0, 0}});
  const auto cs = margin_scores(a, b, {Margin::Ratio, 1, Strategy::Forward});
  EXPECT_EQ(cs.degenerate, cs.candidates.size());
  for (const auto& c : cs.candidates) EXPECT_TRUE(std::isinf(c.score) && c.score > 0);
  EXPECT_EQ(margin_scores(a, b, {Margin::Distance, 1, Strategy::Forward}).degenerate, 0u);
}

TEST(Margin, OutputOrderedByRows) {
  Rng rng(4);
  const auto a = random_set("a", 12, 3, rng), b = random_set("b", 15, 3, rng);
  const auto cs = margin_scores(a, b, {}).candidates;
  std::map<std::string, std::size_t> ra, rb;
  for (std::size_t i = 0; i < a.size(); ++i) ra[a.ids[i]] = i;
  for (std::size_t j = 0; j < b.size(); ++j) rb[b.ids[j]] = j;
  for (std::size_t i = 1; i < cs.size(); ++i)
    EXPECT_LT(std::make_pair(ra[cs[i - 1].id_a], rb[cs[i - 1].id_b]), std::make_pair(ra[cs[i].id_a], rb[cs[i].id_b]));
}

TEST(Margin, Errors) {
  const auto a = make_set("a", {{1, 0}}), b = make_set("b", {{1, 0}, {0, 1}});
  EXPECT_THROW(margin_scores(a, b, {Margin::Ratio, 2, Strategy::Forward}), ConfigError);
  EXPECT_THROW(margin_scores(a, b, {Margin::Ratio, 0, Strategy::Forward}), ConfigError);
  EXPECT_THROW(parse_margin("cosine"), ConfigError);
  EXPECT_THROW(parse_strategy("union"), ConfigError);
  EXPECT_EQ(parse_strategy(strategy_name(Strategy::MaxUnion)), Strategy::MaxUnion);
  EXPECT_EQ(parse_margin(margin_name(Margin::Distance)), Margin::Distance);
}

TEST(Threshold, WorkedExample) {
  const std::vector<Candidate> cs = {{"p1", "q1", 0.9}, {"p2", "q2", 0.8}, {"p3", "q3", 0.7}};
  const GoldSet gold({{"p1", "q1"}, {"p3", "q3"}});
  const auto t = tune_threshold(cs, gold);
  EXPECT_DOUBLE_EQ(t.threshold, 0.7);
  EXPECT_NEAR(t.f1, 0.8, 1e-12);
}

TEST(Threshold, PerfectCandidatesReachOne) {
  const std::vector<Candidate> cs = {{"a", "b", 0.3}, {"c", "d", 0.5}};
  EXPECT_DOUBLE_EQ(tune_threshold(cs, GoldSet({{"a", "b"}, {"c", "d"}})).f1, 1.0);
}

TEST(Threshold, TiesGoToHigherThreshold) {
  // F1 = 2tp / (kept + |gold|): t=0.9 gives 2/3, 0.8 gives 1/2, 0.7 gives 2/5, 0.6 gives 2/3.
  const std::vector<Candidate> cs = {{"a", "1", 0.9}, {"b", "x", 0.8}, {"c", "y", 0.7}, {"d", "4", 0.6}};
  const GoldSet gold({{"a", "1"}, {"d", "4"}});
  const auto t = tune_threshold(cs, gold);
  EXPECT_NEAR(t.f1, 2.0 / 3.0, 1e-12);
  EXPECT_DOUBLE_EQ(t.threshold, 0.9);
}

TEST(Threshold, BeatsRandomProbes) {
  Rng rng(14);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<Candidate> cs;
    std::vector<std::pair<std::string, std::string>> g;
    for (int i = 0; i < 1000; ++i) {
      const bool is_gold = rng.bernoulli(0.3);
      const double score = rng.uniform() + (is_gold ? 0.3 : 0.0);
      cs.push_back({"a" + std::to_string(i), "b" + std::to_string(i), score});
      if (is_gold) g.emplace_back(cs.back().id_a, cs.back().id_b);
    }
    // Some gold pairs never appear among the candidates.
    for (int i = 0; i < 50; ++i) g.emplace_back("a-missing" + std::to_string(i), "b");
    const GoldSet gold(g);
    const auto best = tune_threshold(cs, gold);
    EXPECT_NEAR(evaluate_mining(cs, best.threshold, gold).f1, best.f1, 1e-12);
    for (int p = 0; p < 1000; ++p) {
      const double t = rng.uniform() * 1.4 - 0.1;
      EXPECT_GE(best.f1, evaluate_mining(cs, t, gold).f1);
    }
  }
}

TEST(Threshold, EmptyCandidatesGiveInfinity) {
  const auto t = tune_threshold({}, GoldSet(std::vector<std::pair<std::string, std::string>>{{"a", "b"}}));
  EXPECT_TRUE(std::isinf(t.threshold));
  EXPECT_EQ(t.f1, 0.0);
  EXPECT_THROW(tune_threshold({{"a", "b", 1.0}}, GoldSet()), DataError);
}

TEST(Evaluate, WorkedExample) {
  const std::vector<Candidate> cs = {{"a1", "b1", 1}, {"a2", "b9", 1}, {"a3", "b3", 1}, {"a4", "b4", 1}};
  const auto r = evaluate_mining(cs, 0.5, GoldSet({{"a1", "b1"}, {"a2", "b2"}, {"a3", "b3"}}));
  EXPECT_EQ(r.tp, 2u);
  EXPECT_EQ(r.fp, 2u);
  EXPECT_EQ(r.fn, 1u);
  EXPECT_DOUBLE_EQ(r.precision, 0.5);
  EXPECT_DOUBLE_EQ(r.recall, 2.0 / 3.0);
  EXPECT_NEAR(r.f1, 4.0 / 7.0, 1e-12);
}

TEST(Evaluate, PerfectAndEmptyPredictions) {
  const std::vector<Candidate> cs = {{"a", "b", 0.4}};
  const GoldSet gold(std::vector<std::pair<std::string, std::string>>{{"a", "b"}});
  EXPECT_DOUBLE_EQ(evaluate_mining(cs, 0.4, gold).f1, 1.0);
  const auto none = evaluate_mining(cs, 0.5, gold);
  EXPECT_EQ(none.precision, 0.0);
  EXPECT_EQ(none.recall, 0.0);
  EXPECT_EQ(none.f1, 0.0);
  EXPECT_EQ(none.fn, 1u);
}

TEST(Evaluate, F1IsHarmonicMean) {
  Rng rng(1);
  for (int i = 0; i < 100; ++i) {
    const double p = rng.uniform(), r = rng.uniform();
    EXPECT_NEAR(f1_score(p, r), 1.0 / ((1.0 / p + 1.0 / r) / 2.0), 1e-9);
  }
  EXPECT_EQ(f1_score(0, 0), 0.0);
}

TEST(CandidatesFile, RoundTripWithSixDecimals) {
  const std::vector<Candidate> cs = {{"a", "b", 1.23456789}, {"c", "d", std::numeric_limits<double>::infinity()},
                                     {"e", "f", -0.5}};
  const auto path = (std::filesystem::temp_directory_path() / "xmine_cands_test.tsv").string();
  write_candidates(path, cs);
  EXPECT_EQ(io::read_lines(path).front(), "a\tb\t1.234568");
  const auto back = read_candidates(path);
  ASSERT_EQ(back.size(), 3u);
  EXPECT_DOUBLE_EQ(back[0].score, 1.234568);
  EXPECT_TRUE(std::isinf(back[1].score));
  EXPECT_DOUBLE_EQ(back[2].score, -0.5);
  io::write_lines(path, {"a\tb"});
  EXPECT_THROW(read_candidates(path), DataError);
  std::filesystem::remove(path);
}
