// The mining path step by step with the word-mapping baseline: two cipher
// languages, word vectors, an unsupervised orthogonal map, pooled sentence
// embeddings, margin scoring and a tuned threshold.

#include <cstdio>
#include <vector>

#include "xmine/matcher.hpp"
#include "xmine/miner.hpp"
#include "xmine/synthlang.hpp"
#include "xmine/wordmap.hpp"

int main() {
  using namespace xmine;
  const synth::BaseGrammar grammar;
  const auto la = synth::derive_language(grammar, 101, 0);
  const auto lb = synth::derive_language(grammar, 202, 1);
  std::printf("base word 7 renders as '%s' and '%s'\n", la.cipher(7).c_str(), lb.cipher(7).c_str());

  // Disjoint slices of one base corpus: monolingual text, then mining data.
  const std::size_t mono = 20000, pool = 2000, gold = 200;
  const auto base = synth::generate_distinct_corpus(grammar, 2 * mono + 2 * pool + gold, 3);
  std::vector<std::string> text_a, text_b;
  for (const auto& m : synth::render_mono(base, la, 0, mono)) text_a.push_back(m.text);
  for (const auto& m : synth::render_mono(base, lb, mono, mono)) text_b.push_back(m.text);

  const auto ta = wordmap::normalized(wordmap::train_word_vectors(text_a, {}, 1));
  const auto tb = wordmap::normalized(wordmap::train_word_vectors(text_b, {}, 2));
  const auto aligned = wordmap::self_learning_align(ta, tb, {});
  std::printf("self-learning: %zu iterations, final dictionary %zu pairs\n", aligned.iterations,
              aligned.dictionary.size());

  const auto pairs = synth::build_parallel_set(base, la, lb, gold, 0.0, 4, 2 * mono);
  const auto task = synth::build_mining_task(pairs, synth::render_mono(base, la, 2 * mono + gold, pool - gold),
                                             synth::render_mono(base, lb, 2 * mono + pool, pool - gold), 5);
  auto sentences = [](const std::vector<synth::PoolEntry>& p) {
    std::vector<embed::Sentence> s;
    for (const auto& e : p) s.push_back({e.id, e.text});
    return s;
  };
  const auto ea = wordmap::embed_sentences(ta, aligned.map, sentences(task.pool_a));
  const auto eb = wordmap::embed_sentences(tb, wordmap::OrthogonalMap::identity(tb.dim()), sentences(task.pool_b));

  const auto scored = mine::margin_scores(ea, eb, {});
  const mine::GoldSet gold_set(task.gold);
  const auto tuned = mine::tune_threshold(scored.candidates, gold_set);
  const auto rep = mine::evaluate_mining(scored.candidates, tuned.threshold, gold_set);
  std::printf("mining %zu gold in %zu x %zu pools: threshold %.4f precision %.3f recall %.3f F1 %.3f\n",
              task.gold.size(), task.pool_a.size(), task.pool_b.size(), rep.threshold, rep.precision, rep.recall,
              rep.f1);
  std::printf("(threshold tuned on the evaluated task itself, so F1 is optimistic)\n");
}
