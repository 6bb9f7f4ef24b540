#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>
#include <unordered_set>

#include "xmine/synthlang.hpp"

using namespace xmine;
using namespace xmine::synth;

namespace {

BaseGrammar small_grammar(std::uint32_t vocab) {
  BaseGrammar g;
  g.vocab_size = vocab;
  return g;
}

/// Minimum number of drop/substitute edits turning `clean` into `noisy`
/// (no insertions), by dynamic programming.
std::size_t edit_count(const std::vector<std::string>& clean, const std::vector<std::string>& noisy) {
  const std::size_t n = clean.size(), m = noisy.size();
  const std::size_t inf = n + m + 1;
  std::vector<std::vector<std::size_t>> d(n + 1, std::vector<std::size_t>(m + 1, inf));
  d[0][0] = 0;
  for (std::size_t i = 1; i <= n; ++i) {
    d[i][0] = i;
    for (std::size_t j = 1; j <= std::min(i, m); ++j) {
      d[i][j] = std::min(d[i - 1][j] + 1, d[i - 1][j - 1] + (clean[i - 1] == noisy[j - 1] ? 0 : 1));
    }
  }
  return d[n][m];
}

}  // namespace

TEST(BaseCorpus, LengthsWithinGrammarBounds) {
  const auto g = small_grammar(50);
  const auto c = generate_base_corpus(g, 3, 7);
  ASSERT_EQ(c.size(), 3u);
  for (const auto& s : c) {
    EXPECT_GE(s.size(), g.len_min);
    EXPECT_LE(s.size(), g.len_max);
    for (const auto w : s) EXPECT_LT(w, g.vocab_size);
  }
}

TEST(BaseCorpus, DeterministicPerSeed) {
  const auto g = small_grammar(200);
  EXPECT_EQ(generate_base_corpus(g, 50, 11), generate_base_corpus(g, 50, 11));
  EXPECT_NE(generate_base_corpus(g, 50, 11), generate_base_corpus(g, 50, 12));
}

TEST(BaseCorpus, RankFrequencySlopeFollowsZipfExponent) {
  const auto g = small_grammar(500);
  const auto c = generate_base_corpus(g, 10000, 1);
  std::vector<double> counts(g.vocab_size, 0.0);
  for (const auto& s : c) {
    for (const auto w : s) counts[w] += 1.0;
  }
  std::sort(counts.begin(), counts.end(), std::greater<>());
  // Least-squares slope of log(count) against log(rank) over observed words.
  double sx = 0, sy = 0, sxx = 0, sxy = 0, n = 0;
  for (std::size_t r = 0; r < counts.size() && counts[r] > 0; ++r) {
    const double x = std::log(static_cast<double>(r + 1)), y = std::log(counts[r]);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
    n += 1;
  }
  const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  EXPECT_NEAR(slope, -g.zipf_exponent, 0.2);
}

TEST(BaseCorpus, InvalidGrammarIsConfigError) {
  auto g = small_grammar(49);
  EXPECT_THROW(generate_base_corpus(g, 1, 1), ConfigError);
  g = small_grammar(100);
  g.len_min = 10;
  g.len_max = 5;
  EXPECT_THROW(generate_base_corpus(g, 1, 1), ConfigError);
  g = small_grammar(100);
  EXPECT_THROW(generate_base_corpus(g, 0, 1), ConfigError);
}

TEST(BaseCorpus, DistinctCorpusHasNoDuplicates) {
  const auto c = generate_distinct_corpus(small_grammar(100), 2000, 5);
  std::set<BaseSentence> seen(c.begin(), c.end());
  EXPECT_EQ(seen.size(), c.size());
}

TEST(Language, CipherRoundTripsEveryWord) {
  const auto g = small_grammar(500);
  const auto spec = derive_language(g, 1234, 1);
  for (WordId w = 0; w < g.vocab_size; ++w) EXPECT_EQ(spec.decipher(spec.cipher(w)), w);
}

TEST(Language, DifferentSeedsShareAlmostNoSurfaceWords) {
  const auto g = small_grammar(1000);
  const auto a = derive_language(g, 101);
  const auto b = derive_language(g, 202);
  std::unordered_set<std::string> sa(a.surface_vocab().begin(), a.surface_vocab().end());
  std::size_t shared = 0;
  for (const auto& w : b.surface_vocab()) shared += sa.count(w);
  EXPECT_LE(shared, 10u) << shared << " of 1000 surface words shared";
}

TEST(Language, SeedZeroIsIdentity) {
  const auto g = small_grammar(50);
  const auto spec = derive_language(g, 0);
  EXPECT_EQ(spec.window(), 1u);
  EXPECT_EQ(render({3, 1}, spec), "w3 w1");
}

TEST(Language, DerivationIsDeterministic) {
  const auto g = small_grammar(300);
  const auto a = derive_language(g, 77, 2), b = derive_language(g, 77, 2);
  EXPECT_EQ(a.surface_vocab(), b.surface_vocab());
  EXPECT_EQ(a.permutation(), b.permutation());
  EXPECT_EQ(a.record(), b.record());
  EXPECT_GE(a.window(), 1u);
  EXPECT_LE(a.window(), 3u);
}

TEST(Render, CipherThenWindowSwap) {
  std::vector<std::string> surface = {"zu", "mo", "te", "ka"};
  const auto spec = LanguageSpec::from_tables(surface, {1, 0});
  EXPECT_EQ(render({3, 1}, spec), "mo ka");
  EXPECT_EQ(derender("mo ka", spec), (BaseSentence{3, 1}));
}

TEST(Render, PartialTrailingWindowStaysInPlace) {
  const auto spec = LanguageSpec::from_tables({"a", "b", "c", "d", "e"}, {1, 0});
  EXPECT_EQ(render({0, 1, 2, 3, 4}, spec), "b a d c e");
}

TEST(Render, FullNoiseMayShrinkButStaysInLanguage) {
  const auto g = small_grammar(100);
  const auto spec = derive_language(g, 9);
  Rng rng(3);
  const BaseSentence base = {1, 2, 3, 4, 5, 6, 7, 8};
  for (int i = 0; i < 20; ++i) {
    const auto words = split_words(render(base, spec, 1.0, rng));
    EXPECT_LE(words.size(), base.size());
    for (const auto& w : words) EXPECT_TRUE(spec.knows(w));
  }
}

TEST(Render, Errors) {
  const auto spec = derive_language(small_grammar(50), 9);
  Rng rng(1);
  EXPECT_THROW(render({50}, spec), DataError);
  EXPECT_THROW(render({1}, spec, 1.5, rng), ConfigError);
  EXPECT_THROW(render({1}, spec, -0.1, rng), ConfigError);
  EXPECT_THROW(derender("nonexistentword", spec), DataError);
}

TEST(Render, NoiselessRenderInvertsOnCorpus) {
  const auto g = small_grammar(300);
  const auto spec = derive_language(g, 5);
  for (const auto& s : generate_base_corpus(g, 300, 2)) EXPECT_EQ(derender(render(s, spec), spec), s);
}

TEST(ParallelSet, CleanPairsInvertToSameBase) {
  const auto g = small_grammar(300);
  const auto corpus = generate_base_corpus(g, 100, 4);
  const auto a = derive_language(g, 11), b = derive_language(g, 12);
  const auto pairs = build_parallel_set(corpus, a, b, 50, 0.0, 1, 10);
  ASSERT_EQ(pairs.size(), 50u);
  for (const auto& p : pairs) {
    EXPECT_EQ(derender(p.src, a), corpus[p.base_idx]);
    EXPECT_EQ(derender(p.tgt, b), corpus[p.base_idx]);
  }
  EXPECT_EQ(pairs.front().base_idx, 10u);
}

TEST(ParallelSet, NoiseRateMatchesPerturbedTokenShare) {
  const auto g = small_grammar(500);
  const auto corpus = generate_base_corpus(g, 2000, 8);
  const auto a = derive_language(g, 21), b = derive_language(g, 22);
  const double p = 0.1;
  const auto pairs = build_parallel_set(corpus, a, b, 2000, p, 99);
  std::size_t edits = 0, tokens = 0;
  for (const auto& pr : pairs) {
    const auto clean = split_words(render(corpus[pr.base_idx], b));
    edits += edit_count(clean, split_words(pr.tgt));
    tokens += clean.size();
    EXPECT_EQ(derender(pr.src, a), corpus[pr.base_idx]);
  }
  const double rate = static_cast<double>(edits) / static_cast<double>(tokens);
  const double sigma = std::sqrt(p * (1 - p) / static_cast<double>(tokens));
  EXPECT_NEAR(rate, p, 3 * sigma);
}

TEST(ParallelSet, DeterministicAndBounded) {
  const auto g = small_grammar(100);
  const auto corpus = generate_base_corpus(g, 30, 4);
  const auto a = derive_language(g, 1), b = derive_language(g, 2);
  const auto x = build_parallel_set(corpus, a, b, 20, 0.3, 5);
  const auto y = build_parallel_set(corpus, a, b, 20, 0.3, 5);
  ASSERT_EQ(x.size(), y.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_EQ(x[i].src, y[i].src);
    EXPECT_EQ(x[i].tgt, y[i].tgt);
  }
  EXPECT_THROW(build_parallel_set(corpus, a, b, 31, 0.0, 5), ConfigError);
  EXPECT_THROW(build_parallel_set(corpus, a, b, 20, 0.0, 5, 11), ConfigError);
}

namespace {

struct TaskFixture {
  BaseGrammar g = small_grammar(300);
  BaseCorpus corpus = generate_distinct_corpus(g, 21000, 3);
  LanguageSpec a = derive_language(g, 31), b = derive_language(g, 32);
  std::vector<SentencePair> pairs = build_parallel_set(corpus, a, b, 500, 0.0, 1, 0);
  std::vector<MonoSentence> mono_a = render_mono(corpus, a, 500, 10000);
  std::vector<MonoSentence> mono_b = render_mono(corpus, b, 10500, 10000);
};

}  // namespace

TEST(MiningTask, SizesAndGoldIntegrity) {
  TaskFixture f;
  const auto task = build_mining_task(f.pairs, f.mono_a, f.mono_b, 42, Split::Test);
  EXPECT_EQ(task.pool_a.size(), 10500u);
  EXPECT_EQ(task.pool_b.size(), 10500u);
  EXPECT_EQ(task.gold.size(), 500u);
  std::map<std::string, std::string> ta, tb;
  for (const auto& e : task.pool_a) ta[e.id] = e.text;
  for (const auto& e : task.pool_b) tb[e.id] = e.text;
  std::set<std::string> ga, gb;
  for (const auto& [x, y] : task.gold) {
    ASSERT_TRUE(ta.count(x));
    ASSERT_TRUE(tb.count(y));
    EXPECT_TRUE(ga.insert(x).second);
    EXPECT_TRUE(gb.insert(y).second);
    EXPECT_EQ(derender(ta[x], f.a), derender(tb[y], f.b));
  }
  EXPECT_EQ(task.pool_a.front().id.substr(0, 2), "A-");
  EXPECT_EQ(task.pool_b.back().id, "B-010499");
}

TEST(MiningTask, ShuffleIsSeeded) {
  TaskFixture f;
  const auto x = build_mining_task(f.pairs, f.mono_a, f.mono_b, 42);
  const auto y = build_mining_task(f.pairs, f.mono_a, f.mono_b, 42);
  const auto z = build_mining_task(f.pairs, f.mono_a, f.mono_b, 43);
  EXPECT_EQ(x.gold, y.gold);
  for (std::size_t i = 0; i < x.pool_a.size(); ++i) EXPECT_EQ(x.pool_a[i].text, y.pool_a[i].text);
  EXPECT_NE(x.gold, z.gold);
}

TEST(MiningTask, OverlapBetweenPairsAndPoolsIsDataError) {
  TaskFixture f;
  auto bad = f.mono_a;
  bad.push_back({f.pairs[3].base_idx, f.pairs[3].src});
  EXPECT_THROW(build_mining_task(f.pairs, bad, f.mono_b, 1), DataError);
}

TEST(MiningTask, FilesRoundTrip) {
  TaskFixture f;
  const auto task = build_mining_task(f.pairs, f.mono_a, f.mono_b, 42);
  const auto dir = std::filesystem::temp_directory_path() / "xmine_task_test";
  std::filesystem::create_directories(dir);
  const auto prefix = (dir / "t").string();
  save_mining_task(prefix, task);
  const auto back = load_mining_task(prefix, Split::Train);
  EXPECT_EQ(back.gold, task.gold);
  ASSERT_EQ(back.pool_b.size(), task.pool_b.size());
  for (std::size_t i = 0; i < task.pool_b.size(); ++i) {
    EXPECT_EQ(back.pool_b[i].id, task.pool_b[i].id);
    EXPECT_EQ(back.pool_b[i].text, task.pool_b[i].text);
  }
  std::filesystem::remove_all(dir);
}
