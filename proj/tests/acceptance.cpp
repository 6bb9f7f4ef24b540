// Acceptance run: one PASS/FAIL line per criterion, exit status 0 only when
// every hard criterion holds. Criteria 4 to 9 run the default experiment
// twice from scratch, so a full invocation takes about half an hour.
//
//   acceptance [work_dir] [--only=1,2,3]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "xmine/checkpoint.hpp"
#include "xmine/embedder.hpp"
#include "xmine/gradcheck.hpp"
#include "xmine/harness.hpp"
#include "xmine/miner.hpp"
#include "xmine/tokenizer.hpp"

namespace {

using namespace xmine;
namespace fs = std::filesystem;

// Tolerances.
constexpr double kGradTol = 1e-4;
constexpr double kGradSeconds = 60.0;
constexpr double kScoreTol = 1e-6;
constexpr double kF1Tol = 1e-12;
constexpr double kCpuBudget = 1800.0;
constexpr double kMiningTargetSeen = 10.0;
constexpr double kMiningTargetUnseen = 5.0;
constexpr double kPsmTarget = 5.0;
constexpr double kNoiseGap = 5.0;

struct Outcome {
  int id;
  std::string name;
  bool passed;
  std::string detail;
};

std::vector<Outcome> outcomes;

void report(int id, std::string name, bool passed, std::string detail) {
  std::printf("criterion %2d %-22s %s  %s\n", id, name.c_str(), passed ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  outcomes.push_back({id, std::move(name), passed, std::move(detail)});
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// Brute-force references, written against the definitions only.

embed::EmbeddingSet random_set(Rng& rng, std::size_t n, std::size_t dim, const std::string& prefix) {
  embed::EmbeddingSet s;
  s.matrix.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < n; ++i) {
    s.ids.push_back(prefix + std::to_string(i));
    for (std::size_t d = 0; d < dim; ++d) s.matrix(i, d) = static_cast<float>(rng.normal());
  }
  return s;
}

std::vector<std::vector<double>> cosine_table(const embed::EmbeddingSet& a, const embed::EmbeddingSet& b) {
  auto norm = [](const embed::EmbeddingSet& s, std::size_t i) {
    double acc = 0.0;
    for (std::size_t d = 0; d < s.dim(); ++d) acc += double(s.matrix(i, d)) * double(s.matrix(i, d));
    return std::sqrt(acc);
  };
  std::vector<std::vector<double>> cos(a.size(), std::vector<double>(b.size()));
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < b.size(); ++j) {
      double dot = 0.0;
      for (std::size_t d = 0; d < a.dim(); ++d) dot += double(a.matrix(i, d)) * double(b.matrix(j, d));
      cos[i][j] = dot / (norm(a, i) * norm(b, j));
    }
  }
  return cos;
}

/// Indices of the k largest entries, larger first, lower index on ties.
std::vector<std::size_t> top_k(const std::vector<double>& row, std::size_t k) {
  std::vector<std::size_t> idx(row.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return row[x] > row[y]; });
  idx.resize(k);
  return idx;
}

using PairScores = std::map<std::pair<std::string, std::string>, double>;

PairScores brute_margin(const embed::EmbeddingSet& a, const embed::EmbeddingSet& b, const mine::MarginSpec& spec) {
  const auto cos = cosine_table(a, b);
  std::vector<std::vector<double>> cos_t(b.size(), std::vector<double>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) cos_t[j][i] = cos[i][j];
  const double k = static_cast<double>(spec.k);
  std::vector<double> ta(a.size()), tb(b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (const auto j : top_k(cos[i], spec.k)) ta[i] += cos[i][j] / (2.0 * k);
  for (std::size_t j = 0; j < b.size(); ++j)
    for (const auto i : top_k(cos_t[j], spec.k)) tb[j] += cos_t[j][i] / (2.0 * k);
  auto score = [&](std::size_t i, std::size_t j) {
    const double x = cos[i][j], m = ta[i] + tb[j];
    switch (spec.variant) {
      case mine::Margin::Absolute: return x;
      case mine::Margin::Distance: return x - m;
      case mine::Margin::Ratio: return x / m;
    }
    return x;
  };
  std::vector<std::size_t> fwd(a.size(), 0), bwd(b.size(), 0);
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 1; j < b.size(); ++j)
      if (score(i, j) > score(i, fwd[i])) fwd[i] = j;
  for (std::size_t j = 0; j < b.size(); ++j)
    for (std::size_t i = 1; i < a.size(); ++i)
      if (score(i, j) > score(bwd[j], j)) bwd[j] = i;
  PairScores out;
  auto put = [&](std::size_t i, std::size_t j) { out[{a.ids[i], b.ids[j]}] = score(i, j); };
  const bool f = spec.strategy == mine::Strategy::Forward || spec.strategy == mine::Strategy::MaxUnion;
  const bool w = spec.strategy == mine::Strategy::Backward || spec.strategy == mine::Strategy::MaxUnion;
  if (f)
    for (std::size_t i = 0; i < a.size(); ++i) put(i, fwd[i]);
  if (w)
    for (std::size_t j = 0; j < b.size(); ++j) put(bwd[j], j);
  if (spec.strategy == mine::Strategy::Intersection)
    for (std::size_t i = 0; i < a.size(); ++i)
      if (bwd[fwd[i]] == i) put(i, fwd[i]);
  return out;
}

struct Counts {
  std::size_t tp = 0, kept = 0;
};

double brute_f1(const std::vector<mine::Candidate>& cands, double t,
                const std::set<std::pair<std::string, std::string>>& gold) {
  std::set<std::pair<std::string, std::string>> kept;
  for (const auto& c : cands)
    if (c.score >= t) kept.emplace(c.id_a, c.id_b);
  std::size_t tp = 0;
  for (const auto& p : kept) tp += gold.count(p);
  if (tp == 0) return 0.0;
  const double p = double(tp) / double(kept.size()), r = double(tp) / double(gold.size());
  return 2.0 * p * r / (p + r);
}

// ---------------------------------------------------------------------------

void criterion_1() {
  const auto start = std::chrono::steady_clock::now();
  const auto r = nn::grad_check(nn::micro_config(), 20240601);
  const double secs = seconds_since(start);
  report(1, "gradient-fidelity", r.max_rel_error < kGradTol && secs < kGradSeconds && r.checked > 0,
         fmt("max relative error %.3g over %zu parameters (< %.0e), %.1f s (< %.0f s)", r.max_rel_error, r.checked,
             kGradTol, secs, kGradSeconds));
}

void criterion_2() {
  Rng rng(derive_seed(7, "acceptance.miner"));
  std::size_t knn_mismatch = 0, margin_mismatch = 0, eval_mismatch = 0;
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t dim = 8 + rng.below(57);
    const auto a = random_set(rng, 50, dim, "a");
    const auto b = random_set(rng, 60, dim, "b");
    const std::size_t k = 1 + rng.below(8);

    const auto cos = cosine_table(a, b);
    const auto lists = mine::knn(a, b, k);
    for (std::size_t i = 0; i < a.size(); ++i) {
      const auto want = top_k(cos[i], k);
      for (std::size_t r = 0; r < k; ++r) {
        if (lists[i][r].index != want[r]) ++knn_mismatch;
        worst = std::max(worst, std::abs(lists[i][r].cosine - cos[i][want[r]]));
      }
    }

    for (const auto v : {mine::Margin::Absolute, mine::Margin::Distance, mine::Margin::Ratio}) {
      for (const auto s : {mine::Strategy::Forward, mine::Strategy::Backward, mine::Strategy::Intersection,
                           mine::Strategy::MaxUnion}) {
        const mine::MarginSpec spec{v, k, s};
        const auto got = mine::margin_scores(a, b, spec).candidates;
        const auto want = brute_margin(a, b, spec);
        if (got.size() != want.size()) ++margin_mismatch;
        for (const auto& c : got) {
          const auto it = want.find({c.id_a, c.id_b});
          if (it == want.end()) {
            ++margin_mismatch;
            continue;
          }
          worst = std::max(worst, std::abs(c.score - it->second));
        }

        // Gold: a random half of the candidates plus pairs never proposed.
        std::vector<std::pair<std::string, std::string>> gold_list;
        for (const auto& c : got)
          if (rng.bernoulli(0.5)) gold_list.emplace_back(c.id_a, c.id_b);
        for (int extra = 0; extra < 5; ++extra)
          gold_list.emplace_back("a" + std::to_string(rng.below(50)), "b-unseen" + std::to_string(extra));
        const std::set<std::pair<std::string, std::string>> gold_set(gold_list.begin(), gold_list.end());
        const mine::GoldSet gold(gold_list);
        const double t = got[rng.below(got.size())].score;
        if (std::abs(mine::evaluate_mining(got, t, gold).f1 - brute_f1(got, t, gold_set)) > kF1Tol) ++eval_mismatch;
      }
    }
  }
  report(2, "miner-oracle", knn_mismatch == 0 && margin_mismatch == 0 && eval_mismatch == 0 && worst < kScoreTol,
         fmt("20 instances: knn order mismatches %zu, candidate set mismatches %zu, evaluation mismatches %zu, "
             "max score deviation %.2g (< %.0e)",
             knn_mismatch, margin_mismatch, eval_mismatch, worst, kScoreTol));
}

void criterion_3() {
  Rng rng(derive_seed(11, "acceptance.threshold"));
  std::vector<mine::Candidate> cands;
  std::set<std::pair<std::string, std::string>> gold_set;
  std::set<std::pair<std::size_t, std::size_t>> used;
  while (cands.size() < 1000) {
    const auto i = rng.below(400), j = rng.below(400);
    if (!used.emplace(i, j).second) continue;
    const bool is_gold = rng.bernoulli(0.3);
    // Two-decimal scores create ties; gold pairs lean higher.
    const double s = std::round((rng.uniform() + (is_gold ? 0.3 : 0.0)) * 100.0) / 100.0;
    cands.push_back({"a" + std::to_string(i), "b" + std::to_string(j), s});
    if (is_gold) gold_set.emplace(cands.back().id_a, cands.back().id_b);
  }
  for (int extra = 0; extra < 40; ++extra) gold_set.emplace("a-missed" + std::to_string(extra), "b0");
  const mine::GoldSet gold(std::vector<std::pair<std::string, std::string>>(gold_set.begin(), gold_set.end()));

  std::set<double> distinct;
  for (const auto& c : cands) distinct.insert(c.score);
  double best_t = 0.0, best_f1 = -1.0;
  for (auto it = distinct.rbegin(); it != distinct.rend(); ++it) {
    const double f = brute_f1(cands, *it, gold_set);
    if (f > best_f1) {
      best_f1 = f;
      best_t = *it;
    }
  }
  const auto tuned = mine::tune_threshold(cands, gold);
  const bool sweep_ok = tuned.threshold == best_t && std::abs(tuned.f1 - best_f1) <= kF1Tol;
  std::size_t beaten = 0;
  const double lo = *distinct.begin() - 0.1, hi = *distinct.rbegin() + 0.1;
  for (int p = 0; p < 1000; ++p) {
    const double t = lo + (hi - lo) * rng.uniform();
    if (brute_f1(cands, t, gold_set) > tuned.f1 + kF1Tol) ++beaten;
  }
  report(3, "threshold-optimality", sweep_ok && beaten == 0,
         fmt("tuned t=%.2f F1=%.6f, exhaustive sweep over %zu scores t=%.2f F1=%.6f; %zu of 1000 probes beat it",
             tuned.threshold, tuned.f1, distinct.size(), best_t, best_f1, beaten));
}

struct DefaultRuns {
  harness::RunResult first, second;
  fs::path dir_a, dir_b;
  harness::ExperimentConfig config;
};

harness::RunResult run_default(const fs::path& dir, const harness::ExperimentConfig& base) {
  fs::remove_all(dir);
  auto c = base;
  c.out_dir = dir.string();
  harness::Experiment x(c, [](const std::string& m) { std::cerr << "[run] " << m << std::endl; });
  return x.run_all();
}

void end_to_end(const fs::path& work) {
  DefaultRuns d;
  d.dir_a = work / "default_a";
  d.dir_b = work / "default_b";
  d.first = run_default(d.dir_a, d.config);

  const auto& r = d.first;
  const auto& c = d.config;
  const auto ft_pair = harness::pair_name(std::min(c.finetune_lang_a, c.finetune_lang_b),
                                          std::max(c.finetune_lang_a, c.finetune_lang_b));
  auto f1 = [&](const std::string& sys, const std::string& p) { return r.metric("mining/" + sys + "/" + p, "f1"); };
  auto psm = [&](const std::string& sys, const std::string& p) {
    return r.metric("psm/" + sys + "/" + p, "acc_mean");
  };
  std::vector<std::string> names;
  for (std::uint32_t a = 0; a < c.languages; ++a)
    for (std::uint32_t b = a + 1; b < c.languages; ++b) names.push_back(harness::pair_name(a, b));

  // 4: mining gains.
  bool hard = r.cpu_seconds < kCpuBudget, soft = true;
  std::string detail;
  for (const auto& p : names) {
    const double g = f1("finetuned", p) - f1("vanilla", p);
    hard = hard && g > 0.0;
    soft = soft && g >= (p == ft_pair ? kMiningTargetSeen : kMiningTargetUnseen);
    detail += fmt("%s%s %.2f->%.2f (%+.2f); ", p.c_str(), p == ft_pair ? "*" : "", f1("vanilla", p),
                  f1("finetuned", p), g);
  }
  detail += fmt("%.0f s CPU (< %.0f); soft targets +%.0f/+%.0f %s", r.cpu_seconds, kCpuBudget, kMiningTargetSeen,
                kMiningTargetUnseen, soft ? "met" : "missed");
  report(4, "mining-gain", hard, detail);

  // 5: matching gains on every pair.
  hard = true;
  double mean_gain = 0.0;
  detail.clear();
  for (const auto& p : names) {
    const double g = psm("finetuned", p) - psm("vanilla", p);
    hard = hard && g > 0.0;
    mean_gain += g / static_cast<double>(names.size());
    detail += fmt("%s %.2f->%.2f (%+.2f); ", p.c_str(), psm("vanilla", p), psm("finetuned", p), g);
  }
  detail += fmt("mean gain %+.2f, soft target +%.0f %s", mean_gain, kPsmTarget,
                mean_gain >= kPsmTarget ? "met" : "missed");
  report(5, "psm-propagation", hard, detail);

  // 6: baseline ordering on the fine-tuned pair.
  const double wm = f1("wordmap", ft_pair), va = f1("vanilla", ft_pair), ft = f1("finetuned", ft_pair);
  report(6, "baseline-order", wm < va && va < ft,
         fmt("%s F1 wordmap %.2f < vanilla %.2f < fine-tuned %.2f", ft_pair.c_str(), wm, va, ft));

  // 7: noise robustness.
  const double ab = f1("finetuned.ablation", ft_pair);
  report(7, "noise-robustness", std::abs(ft - ab) < kNoiseGap,
         fmt("%s F1 noise %.2f: %.2f vs noise %.2f: %.2f, |diff| %.2f (< %.0f)", ft_pair.c_str(), c.finetune_noise, ft,
             c.ablation_noise, ab, std::abs(ft - ab), kNoiseGap));

  // Second run from scratch for 8 and 9.
  d.second = run_default(d.dir_b, d.config);

  const std::size_t want_rows = 2 * (static_cast<std::size_t>(c.encoder.n_layers) + 1);
  std::set<std::pair<std::string, std::uint32_t>> cells;
  for (const auto& row : r.layers) cells.emplace(row.system, row.layer);
  const bool complete = r.layers.size() == want_rows && cells.size() == want_rows;
  const bool same_layers = slurp(d.dir_a / "reports/layers.csv") == slurp(d.dir_b / "reports/layers.csv");
  const auto [deep, shallow] = harness::layer_third_deltas(r.layers);
  report(8, "layer-sweep", complete && same_layers,
         fmt("%zu distinct rows (want %zu), identical across runs: %s; deepest-third delta %+.2f vs shallowest %+.2f, "
             "soft check %s",
             cells.size(), want_rows, same_layers ? "yes" : "no", 100.0 * deep, 100.0 * shallow,
             deep >= shallow ? "met" : "missed"));

  const auto ma = slurp(d.dir_a / "reports/metrics.json"), mb = slurp(d.dir_b / "reports/metrics.json");
  report(9, "determinism", !ma.empty() && ma == mb,
         fmt("metrics.json %zu vs %zu bytes, %s", ma.size(), mb.size(), ma == mb ? "bitwise identical" : "different"));
}

/// write -> read -> write through each format; both writes must agree.
void criterion_10(const fs::path& work) {
  const fs::path dir = work / "roundtrip";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::vector<std::string> failed;
  auto same = [&](const std::string& what, const fs::path& x, const fs::path& y) {
    if (slurp(x).empty() || slurp(x) != slurp(y)) failed.push_back(what);
  };

  // A small pipeline's worth of real artifacts.
  Rng rng(derive_seed(3, "acceptance.formats"));
  const synth::BaseGrammar g;
  const auto lang = synth::derive_language(g, 99, 0);
  std::vector<std::string> corpus;
  for (const auto& m : synth::render_mono(synth::generate_base_corpus(g, 2000, 5), lang, 0, 2000))
    corpus.push_back(m.text);
  const auto tok = bpe::learn_bpe(corpus, 300);
  tok.save((dir / "bpe.1").string());
  bpe::BpeModel::load((dir / "bpe.1").string()).save((dir / "bpe.2").string());
  same("bpe", dir / "bpe.1", dir / "bpe.2");

  nn::EncoderConfig ec;
  ec.n_layers = 2;
  ec.d_model = 32;
  ec.d_ff = 64;
  ec.vocab_size = static_cast<std::uint32_t>(tok.vocab_size());
  const auto params = nn::init_params<float>(ec, 17);
  nn::save_checkpoint((dir / "model.1").string(), params);
  nn::save_checkpoint((dir / "model.2").string(), nn::load_checkpoint((dir / "model.1").string()));
  same("checkpoint", dir / "model.1", dir / "model.2");

  std::vector<embed::Sentence> sentences;
  for (std::size_t i = 0; i < 200; ++i) sentences.push_back({"s-" + std::to_string(i), corpus[i]});
  const auto set = embed::embed(params, sentences, 0, embed::PoolingSpec{1, embed::Pooling::Mean, true}, tok);
  embed::save_embeddings((dir / "emb.1").string(), (dir / "ids.1").string(), set);
  embed::save_embeddings((dir / "emb.2").string(), (dir / "ids.2").string(),
                         embed::load_embeddings((dir / "emb.1").string(), (dir / "ids.1").string()));
  same("embeddings", dir / "emb.1", dir / "emb.2");
  same("embedding ids", dir / "ids.1", dir / "ids.2");

  auto cands = mine::margin_scores(set, set, {mine::Margin::Ratio, 4, mine::Strategy::MaxUnion}).candidates;
  cands.push_back({"s-x", "s-y", std::numeric_limits<double>::infinity()});
  cands.push_back({"s-z", "s-w", -0.1234565 + 1e-3 * rng.uniform()});
  mine::write_candidates((dir / "cand.1").string(), cands);
  mine::write_candidates((dir / "cand.2").string(), mine::read_candidates((dir / "cand.1").string()));
  same("candidates", dir / "cand.1", dir / "cand.2");

  std::string list;
  for (const auto& f : failed) list += " " + f;
  report(10, "format-round-trips", failed.empty(),
         failed.empty() ? "BPE model, checkpoint, embeddings + ids, candidate TSV byte-identical"
                        : "differs:" + list);
}

}  // namespace

int main(int argc, char** argv) {
  fs::path work = "acceptance_runs";
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg.rfind("--only=", 0) == 0) {
      for (const auto& part : split(arg.substr(7), ',')) only.insert(std::stoi(part));
    } else {
      work = arg;
    }
  }
  auto want = [&](int id) { return only.empty() || only.count(id) != 0; };
  try {
    if (want(1)) criterion_1();
    if (want(2)) criterion_2();
    if (want(3)) criterion_3();
    if (want(10)) criterion_10(work);
    if (want(4) || want(5) || want(6) || want(7) || want(8) || want(9)) end_to_end(work);
  } catch (const std::exception& e) {
    std::printf("acceptance aborted: %s\n", e.what());
    return 2;
  }
  std::size_t failed = 0;
  for (const auto& o : outcomes) failed += o.passed ? 0 : 1;
  std::printf("%zu of %zu criteria passed\n", outcomes.size() - failed, outcomes.size());
  return failed == 0 ? 0 : 1;
}
