// Command-line front end. Experiment subcommands share one output directory
// and resume from whatever stages are already complete there.

#include <cstdio>
#include <iostream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "xmine/checkpoint.hpp"
#include "xmine/embedder.hpp"
#include "xmine/harness.hpp"
#include "xmine/matcher.hpp"
#include "xmine/miner.hpp"
#include "xmine/synthlang.hpp"
#include "xmine/tokenizer.hpp"

namespace {

using namespace xmine;

struct ExperimentFlags {
  std::string config_file;
  std::vector<std::string> sets;
  std::map<std::string, std::string> values;
};

/// --config, --set key=value and one --<key> flag per config field.
void add_experiment_flags(CLI::App* app, ExperimentFlags& f) {
  app->add_option("--config", f.config_file, "flat key = value config file");
  app->add_option("--set", f.sets, "override one config key (key=value), repeatable");
  for (const auto& field : harness::config_fields()) {
    app->add_option_function<std::string>(
           "--" + field.key, [&f, key = field.key](const std::string& v) { f.values[key] = v; }, field.help)
        ->group("Config keys");
  }
}

harness::ExperimentConfig resolve(const ExperimentFlags& f) {
  harness::ExperimentConfig c;
  if (!f.config_file.empty()) c = harness::load_config(f.config_file);
  for (const auto& s : f.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    harness::set_config_value(c, s.substr(0, eq), s.substr(eq + 1));
  }
  for (const auto& [k, v] : f.values) harness::set_config_value(c, k, v);
  c.validate();
  return c;
}

std::unique_ptr<harness::Experiment> open_experiment(const ExperimentFlags& f) {
  return std::make_unique<harness::Experiment>(resolve(f), [](const std::string& m) { std::cerr << "[xmine] " << m << std::endl; });
}

std::vector<embed::Sentence> read_sentences(const std::string& path) {
  std::vector<embed::Sentence> out;
  for (const auto& e : synth::read_pool(path)) out.push_back({e.id, e.text});
  return out;
}

/// Gold pairs as row indices: gold[i] is the row in b of row i in a.
std::vector<std::size_t> gold_rows(const embed::EmbeddingSet& a, const embed::EmbeddingSet& b,
                                   const std::vector<std::pair<std::string, std::string>>& gold) {
  std::map<std::string, std::size_t> ra, rb;
  for (std::size_t i = 0; i < a.size(); ++i) ra[a.ids[i]] = i;
  for (std::size_t j = 0; j < b.size(); ++j) rb[b.ids[j]] = j;
  std::vector<std::size_t> out(a.size(), static_cast<std::size_t>(-1));
  for (const auto& [x, y] : gold) {
    if (!ra.count(x) || !rb.count(y)) throw DataError("gold pair " + x + "\t" + y + " not in the embedding sets");
    out[ra[x]] = rb[y];
  }
  for (const auto r : out) {
    if (r == static_cast<std::size_t>(-1)) throw DataError("gold does not cover every sentence of pool A");
  }
  return out;
}

void emit(const nlohmann::json& j, const std::string& path) {
  if (path.empty()) {
    std::cout << j.dump(2) << '\n';
  } else {
    io::open_out(path) << j.dump(2) << '\n';
  }
}

int run(int argc, char** argv) {
  CLI::App app{"Cross-lingual sentence mining laboratory"};
  app.require_subcommand(1);

  ExperimentFlags gen_f, bpe_f, pre_f, ft_f, layers_f, wm_f, all_f;
  auto* gen = app.add_subcommand("gen-langs", "generate languages, corpora, fine-tune pairs and evaluation tasks");
  add_experiment_flags(gen, gen_f);
  auto* learn = app.add_subcommand("learn-bpe", "learn the shared BPE model");
  add_experiment_flags(learn, bpe_f);
  auto* pre = app.add_subcommand("pretrain", "MLM pretraining (vanilla checkpoint)");
  add_experiment_flags(pre, pre_f);
  auto* ft = app.add_subcommand("finetune", "TLM fine-tuning on the parallel set");
  add_experiment_flags(ft, ft_f);
  bool ft_ablation = false;
  ft->add_flag("--ablation-run", ft_ablation, "fine-tune the noise-ablation model instead");
  auto* layers = app.add_subcommand("layers", "per-layer matching accuracy, vanilla vs fine-tuned");
  add_experiment_flags(layers, layers_f);
  auto* wm = app.add_subcommand("baseline-wordmap", "word-mapping baseline: mining and matching on every pair");
  add_experiment_flags(wm, wm_f);
  auto* all = app.add_subcommand("run-all", "every stage, then reports");
  add_experiment_flags(all, all_f);
  bool check = false;
  all->add_flag("--check", check, "exit non-zero unless every hard check passes");

  std::string ckpt, bpe_file, pool_file, emb_out, ids_out, method = "mean";
  int lang = 0, layer = -1;
  auto* emb = app.add_subcommand("embed", "embed a pool file (id<TAB>sentence) with a checkpoint");
  emb->add_option("--checkpoint", ckpt, "encoder checkpoint")->required();
  emb->add_option("--bpe", bpe_file, "BPE model")->required();
  emb->add_option("--pool", pool_file, "pool file")->required();
  emb->add_option("--lang", lang, "language id of the pool")->required();
  emb->add_option("--layer", layer, "pooled layer, -1 = three quarters depth");
  emb->add_option("--method", method, "mean or max");
  emb->add_option("--out", emb_out, "embedding file")->required();
  emb->add_option("--ids", ids_out, "ids sidecar file")->required();

  std::string a_emb, a_ids, b_emb, b_ids, gold_file, cand_out, report_out, variant = "ratio", strategy = "max-union";
  std::size_t k = 4;
  double threshold = 0.0;
  auto* mine_cmd = app.add_subcommand("mine", "margin-scored candidates between two embedding sets");
  for (auto* c : {mine_cmd}) {
    c->add_option("--a", a_emb, "embeddings of pool A")->required();
    c->add_option("--a-ids", a_ids, "ids of pool A")->required();
    c->add_option("--b", b_emb, "embeddings of pool B")->required();
    c->add_option("--b-ids", b_ids, "ids of pool B")->required();
  }
  mine_cmd->add_option("--margin", variant, "absolute, distance or ratio");
  mine_cmd->add_option("--k", k, "neighbourhood size");
  mine_cmd->add_option("--strategy", strategy, "forward, backward, intersection or max-union");
  mine_cmd->add_option("--out", cand_out, "candidates TSV")->required();
  mine_cmd->add_option("--gold", gold_file, "gold pairs; adds a precision/recall/F1 report");
  auto* thr = mine_cmd->add_option("--threshold", threshold, "fixed threshold (default: tuned on --gold)");
  mine_cmd->add_option("--report", report_out, "report JSON (default stdout)");

  std::string errors_out;
  auto* psm_cmd = app.add_subcommand("psm", "parallel sentence matching accuracy");
  psm_cmd->add_option("--a", a_emb, "embeddings of pool A")->required();
  psm_cmd->add_option("--a-ids", a_ids, "ids of pool A")->required();
  psm_cmd->add_option("--b", b_emb, "embeddings of pool B")->required();
  psm_cmd->add_option("--b-ids", b_ids, "ids of pool B")->required();
  psm_cmd->add_option("--gold", gold_file, "gold pairs")->required();
  psm_cmd->add_option("--errors", errors_out, "per-sentence error dump (TSV)");
  psm_cmd->add_option("--report", report_out, "report JSON (default stdout)");

  auto* show = app.add_subcommand("show-config", "print the resolved config in file format");
  ExperimentFlags show_f;
  add_experiment_flags(show, show_f);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*show) {
      const auto c = resolve(show_f);
      std::cout << "# config hash " << harness::config_hash(c) << '\n' << harness::config_text(c);
    } else if (*gen) {
      open_experiment(gen_f)->ensure_data();
    } else if (*learn) {
      std::cout << "vocab_size " << open_experiment(bpe_f)->ensure_bpe().vocab_size() << '\n';
    } else if (*pre) {
      open_experiment(pre_f)->ensure_vanilla();
    } else if (*ft) {
      open_experiment(ft_f)->ensure_finetuned(ft_ablation);
    } else if (*layers) {
      auto x = open_experiment(layers_f);
      std::cout << harness::layers_csv(x->ensure_layers());
    } else if (*wm) {
      auto x = open_experiment(wm_f);
      x->evaluate("wordmap");
      for (const auto& r : x->collect_records()) {
        if (r.stage.find("/wordmap/") != std::string::npos) std::cout << r.to_json().dump() << '\n';
      }
    } else if (*all) {
      auto x = open_experiment(all_f);
      const auto r = x->run_all();
      for (const auto& c : r.checks)
        std::cout << (c.passed ? "PASS " : "FAIL ") << (c.hard ? "[hard] " : "[soft] ") << c.name << ": " << c.detail
                  << '\n';
      std::cout << "reports in " << x->path("reports").string() << '\n';
      if (check && !r.hard_checks_pass()) return 1;
    } else if (*emb) {
      const auto params = nn::load_checkpoint(ckpt);
      const auto tok = bpe::BpeModel::load(bpe_file);
      embed::PoolingSpec spec = embed::PoolingSpec::three_quarter_depth(params.config.n_layers);
      if (layer >= 0) spec.layer = static_cast<std::uint32_t>(layer);
      spec.method = embed::parse_pooling(method);
      const auto sentences = read_sentences(pool_file);
      embed::save_embeddings(emb_out, ids_out, embed::embed(params, sentences, lang, spec, tok));
    } else if (*mine_cmd) {
      const auto a = embed::load_embeddings(a_emb, a_ids);
      const auto b = embed::load_embeddings(b_emb, b_ids);
      mine::MarginSpec spec{mine::parse_margin(variant), k, mine::parse_strategy(strategy)};
      const auto cs = mine::margin_scores(a, b, spec);
      mine::write_candidates(cand_out, cs.candidates);
      if (!gold_file.empty()) {
        const mine::GoldSet gold(synth::read_gold(gold_file));
        const double t = *thr ? threshold : mine::tune_threshold(cs.candidates, gold).threshold;
        auto j = mine::to_json(mine::evaluate_mining(cs.candidates, t, gold));
        j["degenerate"] = cs.degenerate;
        emit(j, report_out);
      }
    } else if (*psm_cmd) {
      const auto a = embed::load_embeddings(a_emb, a_ids);
      const auto b = embed::load_embeddings(b_emb, b_ids);
      const auto gold = gold_rows(a, b, synth::read_gold(gold_file));
      emit(match::to_json(match::psm_accuracy(a, b, gold)), report_out);
      if (!errors_out.empty()) match::write_errors(errors_out, a, b, gold);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) { return run(argc, argv); }
