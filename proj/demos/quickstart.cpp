// Smallest end-to-end run: a scaled-down experiment through every stage,
// then the mining F1 and matching accuracy grids. At this size the encoders
// sit near chance; it exercises the pipeline, the default config measures it.
//
//   quickstart [out_dir]

#include <cstdio>
#include <iostream>

#include "xmine/harness.hpp"

int main(int argc, char** argv) {
  using namespace xmine;
  harness::ExperimentConfig c;
  c.out_dir = argc > 1 ? argv[1] : "quickstart_run";
  c.mono_sentences = 3000;
  c.bpe_merges = 800;
  c.encoder.n_layers = 2;
  c.encoder.d_model = 32;
  c.encoder.d_ff = 64;
  c.pretrain_steps = 400;
  c.finetune_pairs = 400;
  c.mining_gold = 100;
  c.mining_pool = 1000;
  c.psm_pairs = 200;

  harness::Experiment x(c, [](const std::string& m) { std::cerr << m << '\n'; });
  const auto r = x.run_all();

  std::printf("\n%-20s %-7s %8s %8s\n", "system", "pair", "F1", "PSM");
  for (const auto& s : x.systems()) {
    for (const auto& [a, b] : x.pairs()) {
      const auto p = harness::pair_name(a, b);
      std::printf("%-20s %-7s %8.2f %8.2f\n", s.c_str(), p.c_str(), r.metric("mining/" + s + "/" + p, "f1"),
                  r.metric("psm/" + s + "/" + p, "acc_mean"));
    }
  }
  std::printf("\nreports in %s\n", x.path("reports").string().c_str());
}
