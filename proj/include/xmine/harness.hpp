#pragma once

// Experiment orchestration: data generation, tokenizer, pretraining,
// fine-tuning, the word-mapping baseline, evaluation, layer sweep and
// reports. Every expensive stage leaves an artifact plus a marker in the
// output directory and is skipped when both are present for the same config.

#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "xmine/checkpoint.hpp"
#include "xmine/common.hpp"
#include "xmine/embedder.hpp"
#include "xmine/encoder.hpp"
#include "xmine/masking.hpp"
#include "xmine/matcher.hpp"
#include "xmine/miner.hpp"
#include "xmine/synthlang.hpp"
#include "xmine/tokenizer.hpp"
#include "xmine/training.hpp"
#include "xmine/wordmap.hpp"

namespace xmine::harness {

namespace fs = std::filesystem;
using nlohmann::json;

/// Encoder of the default experiment: the desk layout at half width, which
/// leaves room for a long pretraining run inside the CPU budget.
inline nn::EncoderConfig default_encoder() {
  nn::EncoderConfig c;
  c.d_model = 64;
  c.d_ff = 256;
  return c;
}

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::string out_dir = "run";

  synth::BaseGrammar grammar;
  std::uint32_t languages = 3;
  std::size_t mono_sentences = 30000;
  std::size_t bpe_merges = 2000;

  nn::EncoderConfig encoder = default_encoder();
  std::size_t pretrain_steps = 20000;
  std::size_t pretrain_batch = 32;
  double pretrain_lr = 1e-3;
  double pretrain_warmup = 0.1;

  std::uint32_t finetune_lang_a = 0;
  std::uint32_t finetune_lang_b = 1;
  std::size_t finetune_pairs = 2000;
  double finetune_noise = 0.1;
  std::size_t finetune_batch = 8;
  std::size_t finetune_epochs = 1;
  double finetune_lr = 3e-4;
  double finetune_warmup = 0.1;
  bool ablation = true;
  double ablation_noise = 0.0;

  /// -1 selects the layer at three quarters of the depth.
  std::int32_t pool_layer = -1;
  embed::Pooling pool_method = embed::Pooling::Mean;
  mine::MarginSpec margin;

  std::size_t mining_gold = 500;
  std::size_t mining_pool = 10000;
  std::size_t psm_pairs = 500;

  wordmap::WordVecOptions word_vectors;
  wordmap::AlignOptions align;
  bool wordmap_idf = false;

  bool layer_sweep = true;

  std::uint32_t resolved_pool_layer() const {
    return pool_layer < 0 ? embed::PoolingSpec::three_quarter_depth(encoder.n_layers).layer
                          : static_cast<std::uint32_t>(pool_layer);
  }

  embed::PoolingSpec pooling() const { return {resolved_pool_layer(), pool_method, true}; }

  std::size_t base_sentences_needed() const {
    return languages * mono_sentences + finetune_pairs + 2 * (mining_gold + 2 * (mining_pool - mining_gold)) +
           psm_pairs;
  }

  void validate() const {
    grammar.validate();
    if (languages < 2) throw ConfigError("config: need at least 2 languages");
    if (finetune_lang_a == finetune_lang_b || finetune_lang_a >= languages || finetune_lang_b >= languages)
      throw ConfigError("config: fine-tune pair must be two distinct existing languages");
    if (mono_sentences == 0 || finetune_pairs == 0 || psm_pairs == 0 || mining_gold == 0)
      throw ConfigError("config: corpus and evaluation sizes must be positive");
    if (mining_gold > mining_pool) throw ConfigError("config: mining_gold exceeds mining_pool");
    if (pretrain_batch == 0 || finetune_batch == 0) throw ConfigError("config: batch sizes must be positive");
    if (!(finetune_noise >= 0.0 && finetune_noise <= 1.0) || !(ablation_noise >= 0.0 && ablation_noise <= 1.0))
      throw ConfigError("config: noise rates must lie in [0,1]");
    if (pool_layer >= 0 && static_cast<std::uint32_t>(pool_layer) > encoder.n_layers)
      throw ConfigError("config: pool_layer beyond the encoder depth");
    if (margin.k == 0) throw ConfigError("config: margin k must be positive");
    word_vectors.validate();
    auto probe = encoder;
    probe.vocab_size = static_cast<std::uint32_t>(bpe::kNumSpecials) + 1;
    probe.n_languages = languages;
    probe.validate();
  }
};

namespace detail {

/// Shortest text that parses back to the same value.
template <typename T>
std::string fmt_real(T v) {
  char buf[48];
  const auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general);
  return std::string(buf, res.ptr);
}

inline std::string fmt_double(double v) { return fmt_real(v); }

template <typename T>
std::string format_value(const T& v) {
  if constexpr (std::is_same_v<T, bool>) {
    return v ? "true" : "false";
  } else if constexpr (std::is_same_v<T, std::string>) {
    return v;
  } else if constexpr (std::is_floating_point_v<T>) {
    return fmt_real(v);
  } else if constexpr (std::is_same_v<T, embed::Pooling>) {
    return embed::pooling_name(v);
  } else if constexpr (std::is_same_v<T, mine::Margin>) {
    return mine::margin_name(v);
  } else if constexpr (std::is_same_v<T, mine::Strategy>) {
    return mine::strategy_name(v);
  } else if constexpr (std::is_same_v<T, wordmap::Algorithm>) {
    return wordmap::algorithm_name(v);
  } else if constexpr (std::is_same_v<T, wordmap::AlignInit>) {
    return wordmap::align_init_name(v);
  } else {
    return std::to_string(v);
  }
}

template <typename T>
void parse_value(const std::string& key, const std::string& s, T& out) {
  try {
    if constexpr (std::is_same_v<T, bool>) {
      if (s == "true" || s == "1") {
        out = true;
      } else if (s == "false" || s == "0") {
        out = false;
      } else {
        throw ConfigError("not a boolean");
      }
    } else if constexpr (std::is_same_v<T, std::string>) {
      out = s;
    } else if constexpr (std::is_floating_point_v<T>) {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      if (used != s.size()) throw ConfigError("trailing characters");
      out = static_cast<T>(v);
    } else if constexpr (std::is_same_v<T, embed::Pooling>) {
      out = embed::parse_pooling(s);
    } else if constexpr (std::is_same_v<T, mine::Margin>) {
      out = mine::parse_margin(s);
    } else if constexpr (std::is_same_v<T, mine::Strategy>) {
      out = mine::parse_strategy(s);
    } else if constexpr (std::is_same_v<T, wordmap::Algorithm>) {
      out = wordmap::parse_algorithm(s);
    } else if constexpr (std::is_same_v<T, wordmap::AlignInit>) {
      out = wordmap::parse_align_init(s);
    } else if constexpr (std::is_signed_v<T>) {
      std::size_t used = 0;
      const long long v = std::stoll(s, &used);
      if (used != s.size()) throw ConfigError("trailing characters");
      out = static_cast<T>(v);
    } else {
      std::size_t used = 0;
      if (!s.empty() && s[0] == '-') throw ConfigError("negative value");
      const unsigned long long v = std::stoull(s, &used);
      if (used != s.size()) throw ConfigError("trailing characters");
      out = static_cast<T>(v);
    }
  } catch (const std::exception& e) {
    throw ConfigError("config: bad value '" + s + "' for " + key + " (" + e.what() + ")");
  }
}

}  // namespace detail

/// One configurable key. `hashed` keys enter the canonical form.
struct ConfigField {
  std::string key;
  std::string help;
  bool hashed = true;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

namespace detail {

template <typename Acc>
ConfigField field(std::string key, std::string help, Acc acc, bool hashed = true) {
  ConfigField f;
  f.key = key;
  f.help = std::move(help);
  f.hashed = hashed;
  f.get = [acc](const ExperimentConfig& c) { return format_value(acc(const_cast<ExperimentConfig&>(c))); };
  f.set = [acc, key](ExperimentConfig& c, const std::string& v) { parse_value(key, v, acc(c)); };
  return f;
}

}  // namespace detail

/// Every key of the flat config format, in canonical order.
inline const std::vector<ConfigField>& config_fields() {
  using C = ExperimentConfig;
  using detail::field;
  static const std::vector<ConfigField> fields = {
      field("seed", "master seed", [](C& c) -> auto& { return c.seed; }),
      field("out_dir", "output directory", [](C& c) -> auto& { return c.out_dir; }, false),
      field("grammar.vocab_size", "base word types", [](C& c) -> auto& { return c.grammar.vocab_size; }),
      field("grammar.zipf_exponent", "Zipf exponent", [](C& c) -> auto& { return c.grammar.zipf_exponent; }),
      field("grammar.len_min", "shortest template", [](C& c) -> auto& { return c.grammar.len_min; }),
      field("grammar.len_max", "longest template", [](C& c) -> auto& { return c.grammar.len_max; }),
      field("grammar.template_count", "sentence templates", [](C& c) -> auto& { return c.grammar.template_count; }),
      field("grammar.class_count", "word classes", [](C& c) -> auto& { return c.grammar.class_count; }),
      field("grammar.semantic_dim", "latent topic dimensions", [](C& c) -> auto& { return c.grammar.semantic_dim; }),
      field("grammar.semantic_strength", "topic bias on word choice",
            [](C& c) -> auto& { return c.grammar.semantic_strength; }),
      field("grammar.seed", "grammar seed", [](C& c) -> auto& { return c.grammar.seed; }),
      field("languages", "number of languages", [](C& c) -> auto& { return c.languages; }),
      field("mono_sentences", "monolingual sentences per language", [](C& c) -> auto& { return c.mono_sentences; }),
      field("bpe_merges", "BPE merge operations", [](C& c) -> auto& { return c.bpe_merges; }),
      field("encoder.n_layers", "transformer blocks", [](C& c) -> auto& { return c.encoder.n_layers; }),
      field("encoder.n_heads", "attention heads", [](C& c) -> auto& { return c.encoder.n_heads; }),
      field("encoder.d_model", "hidden size", [](C& c) -> auto& { return c.encoder.d_model; }),
      field("encoder.d_ff", "feed-forward size", [](C& c) -> auto& { return c.encoder.d_ff; }),
      field("encoder.max_positions", "longest sequence", [](C& c) -> auto& { return c.encoder.max_positions; }),
      field("encoder.dropout", "dropout rate", [](C& c) -> auto& { return c.encoder.dropout; }),
      field("pretrain.steps", "MLM optimizer steps", [](C& c) -> auto& { return c.pretrain_steps; }),
      field("pretrain.batch", "MLM sentences per step", [](C& c) -> auto& { return c.pretrain_batch; }),
      field("pretrain.lr", "MLM peak learning rate", [](C& c) -> auto& { return c.pretrain_lr; }),
      field("pretrain.warmup", "MLM warmup fraction", [](C& c) -> auto& { return c.pretrain_warmup; }),
      field("finetune.lang_a", "first fine-tune language", [](C& c) -> auto& { return c.finetune_lang_a; }),
      field("finetune.lang_b", "second fine-tune language", [](C& c) -> auto& { return c.finetune_lang_b; }),
      field("finetune.pairs", "parallel pairs", [](C& c) -> auto& { return c.finetune_pairs; }),
      field("finetune.noise", "noise rate on the target side", [](C& c) -> auto& { return c.finetune_noise; }),
      field("finetune.batch", "TLM pairs per step", [](C& c) -> auto& { return c.finetune_batch; }),
      field("finetune.epochs", "TLM epochs", [](C& c) -> auto& { return c.finetune_epochs; }),
      field("finetune.lr", "TLM peak learning rate", [](C& c) -> auto& { return c.finetune_lr; }),
      field("finetune.warmup", "TLM warmup fraction", [](C& c) -> auto& { return c.finetune_warmup; }),
      field("ablation", "also fine-tune with ablation.noise", [](C& c) -> auto& { return c.ablation; }),
      field("ablation.noise", "noise rate of the ablation run", [](C& c) -> auto& { return c.ablation_noise; }),
      field("pool.layer", "pooled layer, -1 = three quarters depth", [](C& c) -> auto& { return c.pool_layer; }),
      field("pool.method", "mean or max", [](C& c) -> auto& { return c.pool_method; }),
      field("margin.variant", "absolute, distance or ratio", [](C& c) -> auto& { return c.margin.variant; }),
      field("margin.k", "neighbourhood size", [](C& c) -> auto& { return c.margin.k; }),
      field("margin.strategy", "forward, backward, intersection or max-union",
            [](C& c) -> auto& { return c.margin.strategy; }),
      field("mining.gold", "gold pairs per mining task", [](C& c) -> auto& { return c.mining_gold; }),
      field("mining.pool", "sentences per mining pool side", [](C& c) -> auto& { return c.mining_pool; }),
      field("psm.pairs", "pairs per matching set", [](C& c) -> auto& { return c.psm_pairs; }),
      field("wordmap.algorithm", "sgns or ppmi", [](C& c) -> auto& { return c.word_vectors.algorithm; }),
      field("wordmap.dim", "word vector size", [](C& c) -> auto& { return c.word_vectors.dim; }),
      field("wordmap.epochs", "SGNS epochs", [](C& c) -> auto& { return c.word_vectors.epochs; }),
      field("wordmap.window", "context window", [](C& c) -> auto& { return c.word_vectors.window; }),
      field("wordmap.negatives", "SGNS negatives", [](C& c) -> auto& { return c.word_vectors.negatives; }),
      field("wordmap.min_count", "minimum word count", [](C& c) -> auto& { return c.word_vectors.min_count; }),
      field("wordmap.lr", "SGNS learning rate", [](C& c) -> auto& { return c.word_vectors.lr; }),
      field("wordmap.init", "oracle or frequency", [](C& c) -> auto& { return c.align.init; }),
      field("wordmap.seed_size", "frequency-rank seed pairs", [](C& c) -> auto& { return c.align.seed_size; }),
      field("wordmap.max_iters", "self-learning iterations", [](C& c) -> auto& { return c.align.max_iters; }),
      field("wordmap.csls_k", "CSLS neighbourhood", [](C& c) -> auto& { return c.align.csls_k; }),
      field("wordmap.pool_start", "initial induction pool", [](C& c) -> auto& { return c.align.pool_start; }),
      field("wordmap.idf", "IDF-weighted pooling", [](C& c) -> auto& { return c.wordmap_idf; }),
      field("layer_sweep", "run the per-layer matching sweep", [](C& c) -> auto& { return c.layer_sweep; }),
  };
  return fields;
}

inline void set_config_value(ExperimentConfig& c, const std::string& key, const std::string& value) {
  for (const auto& f : config_fields()) {
    if (f.key == key) {
      f.set(c, value);
      return;
    }
  }
  throw ConfigError("config: unknown key '" + key + "'");
}

/// Flat format: one "key = value" per line; '#' starts a comment; blank
/// lines are ignored; unknown or repeated keys are errors.
inline ExperimentConfig parse_config(const std::string& text, ExperimentConfig base = {}) {
  std::istringstream is(text);
  std::string line;
  std::map<std::string, int> seen;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto eq = line.find('=');
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      if (b == std::string::npos) return std::string();
      const auto e = s.find_last_not_of(" \t\r");
      return s.substr(b, e - b + 1);
    };
    if (trim(line).empty()) continue;
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    if (seen[key]++) throw ConfigError("config line " + std::to_string(lineno) + ": repeated key '" + key + "'");
    set_config_value(base, key, value);
  }
  return base;
}

inline ExperimentConfig load_config(const std::string& path, ExperimentConfig base = {}) {
  auto is = io::open_in(path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

/// Full config as text, every key present, parseable by parse_config.
inline std::string config_text(const ExperimentConfig& c) {
  std::string out;
  for (const auto& f : config_fields()) out += f.key + " = " + f.get(c) + "\n";
  return out;
}

/// Hashed keys only: the output directory does not change results.
inline std::string canonical(const ExperimentConfig& c) {
  std::string out;
  for (const auto& f : config_fields()) {
    if (f.hashed) out += f.key + "=" + f.get(c) + "\n";
  }
  return out;
}

inline std::string config_hash(const ExperimentConfig& c) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(canonical(c))));
  return buf;
}

/// Non-finite metric values are stored as JSON null and read back as NaN.
inline std::map<std::string, double> metrics_from_json(const json& j) {
  std::map<std::string, double> out;
  for (const auto& [k, v] : j.items()) out[k] = v.is_null() ? std::nan("") : v.get<double>();
  return out;
}

struct MetricsRecord {
  std::string stage;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::map<std::string, double> metrics;
  double wall_clock_s = 0.0;
  std::string timestamp;

  /// Deterministic part only.
  json to_json() const {
    json j;
    j["stage"] = stage;
    j["config_hash"] = config_hash;
    j["seed"] = seed;
    j["metrics"] = metrics;
    return j;
  }

  json to_json_with_timing() const {
    auto j = to_json();
    j["wall_clock_s"] = wall_clock_s;
    j["timestamp"] = timestamp;
    return j;
  }

  static MetricsRecord from_json(const json& j) {
    MetricsRecord r;
    r.stage = j.at("stage").get<std::string>();
    r.config_hash = j.at("config_hash").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.metrics = metrics_from_json(j.at("metrics"));
    if (j.contains("wall_clock_s")) r.wall_clock_s = j["wall_clock_s"].get<double>();
    if (j.contains("timestamp")) r.timestamp = j["timestamp"].get<std::string>();
    return r;
  }
};

/// A matching set: pools a and b with gold[i] = row in b of row i of a.
struct PsmSet {
  std::uint32_t lang_a = 0;
  std::uint32_t lang_b = 0;
  std::vector<embed::Sentence> a;
  std::vector<embed::Sentence> b;
  std::vector<std::size_t> gold;
};

inline std::string lang_name(std::uint32_t l) { return "L" + std::to_string(l); }

inline std::string pair_name(std::uint32_t a, std::uint32_t b) { return lang_name(a) + "-" + lang_name(b); }

struct LayerRow {
  std::uint32_t layer = 0;
  std::string system;
  double psm_accuracy = 0.0;
};

/// Mean matching accuracy per layer 0..L for both checkpoints, averaged
/// over every set.
inline std::vector<LayerRow> layer_sweep(const nn::EncoderParams<float>& vanilla,
                                         const nn::EncoderParams<float>& finetuned, const std::vector<PsmSet>& sets,
                                         embed::Pooling method, const bpe::BpeModel& tok) {
  if (!(vanilla.config == finetuned.config)) throw DataError("layer sweep: checkpoints have different configs");
  if (sets.empty()) throw DataError("layer sweep: no evaluation sets");
  const std::uint32_t n_layers = vanilla.config.n_layers;
  std::vector<std::uint32_t> layers(n_layers + 1);
  for (std::uint32_t l = 0; l <= n_layers; ++l) layers[l] = l;
  std::vector<LayerRow> rows;
  for (const auto& [name, params] : {std::pair<std::string, const nn::EncoderParams<float>*>{"vanilla", &vanilla},
                                     std::pair<std::string, const nn::EncoderParams<float>*>{"finetuned", &finetuned}}) {
    std::vector<double> acc(n_layers + 1, 0.0);
    for (const auto& s : sets) {
      const auto ea = embed::embed_layers(*params, s.a, static_cast<std::int32_t>(s.lang_a), layers, method, true, tok);
      const auto eb = embed::embed_layers(*params, s.b, static_cast<std::int32_t>(s.lang_b), layers, method, true, tok);
      for (std::uint32_t l = 0; l <= n_layers; ++l) acc[l] += match::psm_accuracy(ea[l], eb[l], s.gold).acc_mean;
    }
    for (std::uint32_t l = 0; l <= n_layers; ++l)
      rows.push_back({l, name, acc[l] / static_cast<double>(sets.size())});
  }
  return rows;
}

inline std::string layers_csv(const std::vector<LayerRow>& rows) {
  std::string out = "layer,system,psm_accuracy\n";
  for (const auto& r : rows) out += std::to_string(r.layer) + "," + r.system + "," + detail::fmt_double(r.psm_accuracy) + "\n";
  return out;
}

/// Per-layer delta (fine-tuned minus vanilla) averaged over the deepest and
/// the shallowest third of layers 0..L.
inline std::pair<double, double> layer_third_deltas(const std::vector<LayerRow>& rows) {
  std::map<std::uint32_t, double> van, ft;
  for (const auto& r : rows) (r.system == "vanilla" ? van : ft)[r.layer] = r.psm_accuracy;
  const std::size_t n = van.size();
  const std::size_t third = std::max<std::size_t>(1, (n + 2) / 3);
  double shallow = 0.0, deep = 0.0;
  for (std::size_t l = 0; l < third; ++l) {
    shallow += ft[static_cast<std::uint32_t>(l)] - van[static_cast<std::uint32_t>(l)];
    deep += ft[static_cast<std::uint32_t>(n - 1 - l)] - van[static_cast<std::uint32_t>(n - 1 - l)];
  }
  return {deep / static_cast<double>(third), shallow / static_cast<double>(third)};
}

struct Check {
  std::string name;
  bool hard = true;
  bool passed = false;
  std::string detail;
};

struct RunResult {
  std::vector<MetricsRecord> records;
  std::vector<LayerRow> layers;
  std::vector<Check> checks;
  double cpu_seconds = 0.0;
  double wall_seconds = 0.0;

  bool hard_checks_pass() const {
    for (const auto& c : checks) {
      if (c.hard && !c.passed) return false;
    }
    return true;
  }

  const MetricsRecord* find(const std::string& stage) const {
    for (const auto& r : records) {
      if (r.stage == stage) return &r;
    }
    return nullptr;
  }

  double metric(const std::string& stage, const std::string& key) const {
    const auto* r = find(stage);
    if (!r) throw DataError("no metrics record for stage '" + stage + "'");
    const auto it = r->metrics.find(key);
    if (it == r->metrics.end()) throw DataError("stage '" + stage + "' has no metric '" + key + "'");
    return it->second;
  }
};

class StageError : public std::runtime_error {
 public:
  StageError(const std::string& stage, const std::string& what)
      : std::runtime_error("stage '" + stage + "' failed: " + what), stage_(stage) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

using Logger = std::function<void(const std::string&)>;

/// The full pipeline over one output directory.
class Experiment {
 public:
  explicit Experiment(ExperimentConfig config, Logger log = {}) : cfg_(std::move(config)), log_(std::move(log)) {
    cfg_.validate();
    cfg_.encoder.n_languages = cfg_.languages;
    hash_ = config_hash(cfg_);
    root_ = cfg_.out_dir;
    fs::create_directories(root_ / "stages");
    fs::create_directories(root_ / "data");
    fs::create_directories(root_ / "models");
    fs::create_directories(root_ / "reports");
    io::open_out((root_ / "config.txt").string()) << config_text(cfg_);
  }

  const ExperimentConfig& config() const { return cfg_; }
  const std::string& hash() const { return hash_; }
  fs::path path(const std::string& rel) const { return root_ / rel; }

  // Stages. Each returns its result, computing it only when its marker is
  // missing or stale.

  /// Languages, corpora, fine-tune pairs, mining tasks and matching sets.
  void ensure_data() {
    if (data_ready_) return;
    stage("data", [&] {
      const auto start = std::chrono::steady_clock::now();
      specs_.clear();
      for (std::uint32_t l = 0; l < cfg_.languages; ++l) {
        const auto lseed = derive_seed(cfg_.seed, "language." + std::to_string(l)) | 1ULL;
        specs_.push_back(synth::derive_language(cfg_.grammar, lseed, l));
      }
      const auto base = synth::generate_distinct_corpus(cfg_.grammar, cfg_.base_sentences_needed(),
                                                        derive_seed(cfg_.seed, "base-corpus"));
      std::size_t offset = 0;
      mono_.assign(cfg_.languages, {});
      for (std::uint32_t l = 0; l < cfg_.languages; ++l) {
        for (const auto& m : synth::render_mono(base, specs_[l], offset, cfg_.mono_sentences)) mono_[l].push_back(m.text);
        offset += cfg_.mono_sentences;
      }
      const auto ft_offset = offset;
      offset += cfg_.finetune_pairs;
      auto ft_pairs = [&](double noise) {
        return synth::build_parallel_set(base, specs_[cfg_.finetune_lang_a], specs_[cfg_.finetune_lang_b],
                                         cfg_.finetune_pairs, noise, derive_seed(cfg_.seed, "finetune-pairs"),
                                         ft_offset);
      };
      ft_main_ = ft_pairs(cfg_.finetune_noise);
      if (cfg_.ablation) ft_ablation_ = ft_pairs(cfg_.ablation_noise);

      const std::size_t filler = cfg_.mining_pool - cfg_.mining_gold;
      std::size_t split_offset[2];
      for (int s = 0; s < 2; ++s) {
        split_offset[s] = offset;
        offset += cfg_.mining_gold + 2 * filler;
      }
      const std::size_t psm_offset = offset;
      tasks_.clear();
      psm_.clear();
      for (const auto& [a, b] : pairs()) {
        PairTasks t;
        t.a = a;
        t.b = b;
        for (int s = 0; s < 2; ++s) {
          const auto o = split_offset[s];
          const auto gold = synth::build_parallel_set(base, specs_[a], specs_[b], cfg_.mining_gold, 0.0, 0, o);
          const auto fill_a = synth::render_mono(base, specs_[a], o + cfg_.mining_gold, filler);
          const auto fill_b = synth::render_mono(base, specs_[b], o + cfg_.mining_gold + filler, filler);
          const auto split = s == 0 ? synth::Split::Train : synth::Split::Test;
          auto task = synth::build_mining_task(
              gold, fill_a, fill_b, derive_seed(cfg_.seed, "mining." + pair_name(a, b) + "." + synth::split_name(split)),
              split);
          synth::save_mining_task(path("data/mine." + pair_name(a, b) + "." + synth::split_name(split)).string(), task);
          (s == 0 ? t.train : t.test) = std::move(task);
        }
        const auto psm_pairs = synth::build_parallel_set(base, specs_[a], specs_[b], cfg_.psm_pairs, 0.0, 0, psm_offset);
        const auto psm_task =
            synth::build_mining_task(psm_pairs, {}, {}, derive_seed(cfg_.seed, "psm." + pair_name(a, b)), synth::Split::Test);
        synth::save_mining_task(path("data/psm." + pair_name(a, b)).string(), psm_task);
        psm_.push_back(to_psm_set(psm_task, a, b));
        tasks_.push_back(std::move(t));
      }
      for (std::uint32_t l = 0; l < cfg_.languages; ++l) {
        synth::write_corpus(path("data/mono." + lang_name(l) + ".txt").string(), mono_[l]);
        io::open_out(path("data/" + lang_name(l) + ".spec").string()) << specs_[l].record() << '\n';
      }
      write_pairs(path("data/finetune.tsv").string(), ft_main_);
      if (cfg_.ablation) write_pairs(path("data/finetune.ablation.tsv").string(), ft_ablation_);
      record("data", {{"base_sentences", static_cast<double>(base.size())}}, start);
    });
    data_ready_ = true;
  }

  const bpe::BpeModel& ensure_bpe() {
    if (bpe_) return *bpe_;
    const auto file = path("models/bpe.txt").string();
    stage("bpe", [&] {
      if (!done("bpe") || !fs::exists(file)) {
        ensure_data();
        const auto start = std::chrono::steady_clock::now();
        std::vector<std::string> all;
        for (const auto& m : mono_) all.insert(all.end(), m.begin(), m.end());
        auto model = bpe::learn_bpe(all, cfg_.bpe_merges);
        model.save(file);
        record("bpe", {{"vocab_size", static_cast<double>(model.vocab_size())},
                       {"merges", static_cast<double>(model.merges().size())}},
               start);
        mark("bpe");
      }
      bpe_ = bpe::BpeModel::load(file);
    });
    return *bpe_;
  }

  const nn::EncoderParams<float>& ensure_vanilla() {
    if (vanilla_) return *vanilla_;
    const auto file = path("models/vanilla.ckpt").string();
    stage("pretrain", [&] {
      if (!done("pretrain") || !fs::exists(file)) {
        ensure_data();
        const auto& tok = ensure_bpe();
        const auto start = std::chrono::steady_clock::now();
        auto ec = encoder_config();
        std::vector<nn::MlmStream::Corpus> corpora;
        for (std::uint32_t l = 0; l < cfg_.languages; ++l) {
          nn::MlmStream::Corpus c;
          c.lang = static_cast<std::int32_t>(l);
          for (const auto& s : mono_[l]) c.sentences.push_back(tok.encode(s));
          corpora.push_back(std::move(c));
        }
        nn::MlmStream stream(std::move(corpora), cfg_.pretrain_batch, {}, ec.vocab_size, ec.max_positions,
                             derive_seed(cfg_.seed, "pretrain.stream"));
        auto params = nn::init_params<float>(ec, derive_seed(cfg_.seed, "pretrain.init"));
        nn::Schedule sched;
        sched.steps = cfg_.pretrain_steps;
        sched.lr = cfg_.pretrain_lr;
        sched.warmup_frac = cfg_.pretrain_warmup;
        const auto log = run_training(params, [&](std::size_t) { return stream.next(); }, sched,
                                      derive_seed(cfg_.seed, "pretrain.train"), "pretrain");
        nn::save_checkpoint(file, params);
        nn::write_train_log(path("models/pretrain.log.jsonl").string(), log);
        record("pretrain", {{"steps", static_cast<double>(log.size())},
                            {"final_loss", tail_loss(log)},
                            {"parameters", static_cast<double>(params.parameter_count())}},
               start);
        mark("pretrain");
      }
      vanilla_ = nn::load_checkpoint(file);
    });
    return *vanilla_;
  }

  const nn::EncoderParams<float>& ensure_finetuned(bool ablation_run = false) {
    auto& slot = ablation_run ? ablation_ : finetuned_;
    if (slot) return *slot;
    const std::string name = ablation_run ? "finetune.ablation" : "finetune";
    const auto file = path("models/" + std::string(ablation_run ? "finetuned.ablation" : "finetuned") + ".ckpt").string();
    if (ablation_run && !cfg_.ablation) throw ConfigError("ablation run requested but ablation = false");
    const auto& vanilla = ensure_vanilla();
    stage(name, [&] {
      if (!done(name) || !fs::exists(file)) {
        ensure_data();
        const auto& tok = ensure_bpe();
        const auto start = std::chrono::steady_clock::now();
        std::vector<nn::TlmStream::Pair> pairs;
        for (const auto& p : ablation_run ? ft_ablation_ : ft_main_) pairs.push_back({tok.encode(p.src), tok.encode(p.tgt)});
        nn::TlmStream stream(std::move(pairs), static_cast<std::int32_t>(cfg_.finetune_lang_a),
                             static_cast<std::int32_t>(cfg_.finetune_lang_b), cfg_.finetune_batch, {},
                             vanilla.config.vocab_size, vanilla.config.max_positions,
                             derive_seed(cfg_.seed, "finetune.stream"));
        auto params = vanilla;
        nn::Schedule sched;
        sched.steps = cfg_.finetune_epochs * stream.steps_per_epoch();
        sched.lr = cfg_.finetune_lr;
        sched.warmup_frac = cfg_.finetune_warmup;
        const auto log = run_training(params, [&](std::size_t) { return stream.next(); }, sched,
                                      derive_seed(cfg_.seed, "finetune.train"), name);
        nn::save_checkpoint(file, params);
        nn::write_train_log(path("models/" + name + ".log.jsonl").string(), log);
        record(name,
               {{"steps", static_cast<double>(log.size())},
                {"final_loss", tail_loss(log)},
                {"noise", ablation_run ? cfg_.ablation_noise : cfg_.finetune_noise}},
               start);
        mark(name);
      }
      slot = nn::load_checkpoint(file);
    });
    return *slot;
  }

  /// Word vectors per language (normalized for alignment and pooling).
  const std::vector<wordmap::WordVecTable>& ensure_word_vectors() {
    if (!word_tables_.empty()) return word_tables_;
    stage("wordvectors", [&] {
      const bool fresh = done("wordvectors");
      std::vector<wordmap::WordVecTable> tables;
      const auto start = std::chrono::steady_clock::now();
      for (std::uint32_t l = 0; l < cfg_.languages; ++l) {
        const auto file = path("models/words." + lang_name(l) + ".vec").string();
        if (fresh && fs::exists(file)) {
          tables.push_back(wordmap::load_word_vectors(file));
        } else {
          ensure_data();
          auto t = wordmap::normalized(wordmap::train_word_vectors(
              mono_[l], cfg_.word_vectors, derive_seed(cfg_.seed, "wordvectors." + lang_name(l))));
          wordmap::save_word_vectors(file, t);
          // Reload so a resumed run sees exactly the stored (f32) values.
          tables.push_back(wordmap::load_word_vectors(file));
        }
      }
      if (!fresh) {
        record("wordvectors", {{"dim", static_cast<double>(cfg_.word_vectors.dim)}}, start);
        mark("wordvectors");
      }
      word_tables_ = std::move(tables);
    });
    return word_tables_;
  }

  /// Mining and matching for one system on every language pair.
  void evaluate(const std::string& system) {
    const std::string name = "eval." + system;
    stage(name, [&] {
      const auto file = path("stages/" + name + ".json");
      if (done(name) && fs::exists(file)) return;
      ensure_data();
      json out = json::array();
      for (std::size_t p = 0; p < tasks_.size(); ++p) {
        const auto start = std::chrono::steady_clock::now();
        const auto& t = tasks_[p];
        const auto pname = pair_name(t.a, t.b);
        log("evaluating " + system + " on " + pname);
        auto embed_pool = [&](const std::vector<synth::PoolEntry>& pool, std::uint32_t lang, bool side_a) {
          std::vector<embed::Sentence> s;
          s.reserve(pool.size());
          for (const auto& e : pool) s.push_back({e.id, e.text});
          return embed_system(system, s, lang, side_a ? t.b : t.a, side_a);
        };
        const auto train = mine::margin_scores(embed_pool(t.train.pool_a, t.a, true),
                                               embed_pool(t.train.pool_b, t.b, false), cfg_.margin);
        const auto tuned = mine::tune_threshold(train.candidates, mine::GoldSet(t.train.gold));
        const auto test = mine::margin_scores(embed_pool(t.test.pool_a, t.a, true), embed_pool(t.test.pool_b, t.b, false),
                                              cfg_.margin);
        mine::write_candidates(path("reports/candidates." + system + "." + pname + ".tsv").string(), test.candidates);
        const auto rep = mine::evaluate_mining(test.candidates, tuned.threshold, mine::GoldSet(t.test.gold));
        json rec;
        rec["stage"] = "mining/" + system + "/" + pname;
        rec["metrics"] = {{"f1", 100.0 * rep.f1},
                          {"precision", 100.0 * rep.precision},
                          {"recall", 100.0 * rep.recall},
                          {"threshold", rep.threshold},
                          {"train_f1", 100.0 * tuned.f1},
                          {"candidates", static_cast<double>(test.candidates.size())},
                          {"degenerate", static_cast<double>(test.degenerate)}};
        rec["wall"] = seconds_since(start);
        out.push_back(rec);

        const auto start_psm = std::chrono::steady_clock::now();
        const auto& ps = psm_[p];
        const auto psm = match::psm_accuracy(embed_system(system, ps.a, ps.lang_a, ps.lang_b, true),
                                             embed_system(system, ps.b, ps.lang_b, ps.lang_a, false), ps.gold);
        json prec;
        prec["stage"] = "psm/" + system + "/" + pname;
        prec["metrics"] = {{"acc_fwd", 100.0 * psm.acc_fwd},
                           {"acc_bwd", 100.0 * psm.acc_bwd},
                           {"acc_mean", 100.0 * psm.acc_mean},
                           {"n", static_cast<double>(psm.n)}};
        prec["wall"] = seconds_since(start_psm);
        out.push_back(prec);
      }
      for (const auto& r : out) {
        MetricsRecord m;
        m.stage = r["stage"].get<std::string>();
        m.config_hash = hash_;
        m.seed = cfg_.seed;
        m.metrics = metrics_from_json(r["metrics"]);
        m.wall_clock_s = r["wall"].get<double>();
        m.timestamp = now_iso();
        append_timing(m);
      }
      io::open_out(file.string()) << out.dump(1) << '\n';
      mark(name);
    });
  }

  std::vector<LayerRow> ensure_layers() {
    const auto file = path("reports/layers.csv");
    std::vector<LayerRow> rows;
    stage("layers", [&] {
      if (done("layers") && fs::exists(file)) {
        rows = read_layers_csv(file.string());
        return;
      }
      ensure_data();
      const auto start = std::chrono::steady_clock::now();
      rows = layer_sweep(ensure_vanilla(), ensure_finetuned(), psm_, cfg_.pool_method, ensure_bpe());
      io::open_out(file.string()) << layers_csv(rows);
      const auto [deep, shallow] = layer_third_deltas(rows);
      record("layers", {{"deep_third_delta", deep}, {"shallow_third_delta", shallow}}, start);
      mark("layers");
    });
    return rows;
  }

  std::vector<std::string> systems() const {
    std::vector<std::string> s = {"vanilla", "finetuned"};
    if (cfg_.ablation) s.push_back("finetuned.ablation");
    s.push_back("wordmap");
    return s;
  }

  /// Runs every stage and writes the reports.
  RunResult run_all() {
    const auto wall_start = std::chrono::steady_clock::now();
    const std::clock_t cpu_start = std::clock();
    ensure_data();
    ensure_bpe();
    ensure_vanilla();
    ensure_finetuned();
    if (cfg_.ablation) ensure_finetuned(true);
    for (const auto& s : systems()) evaluate(s);
    RunResult result;
    if (cfg_.layer_sweep) result.layers = ensure_layers();
    result.records = collect_records();
    result.cpu_seconds = static_cast<double>(std::clock() - cpu_start) / CLOCKS_PER_SEC;
    result.wall_seconds = seconds_since(wall_start);
    result.checks = evaluate_checks(result);
    write_reports(result);
    return result;
  }

  /// Deterministic records of every completed stage, in pipeline order.
  std::vector<MetricsRecord> collect_records() const {
    std::vector<MetricsRecord> out;
    for (const auto& name : {"data", "bpe", "pretrain", "finetune", "finetune.ablation", "wordvectors", "layers"}) {
      const auto file = path(std::string("stages/") + name + ".metrics.json");
      if (fs::exists(file)) out.push_back(MetricsRecord::from_json(read_json(file)));
    }
    for (const auto& s : systems()) {
      const auto file = path("stages/eval." + s + ".json");
      if (!fs::exists(file)) continue;
      for (const auto& r : read_json(file)) {
        MetricsRecord m;
        m.stage = r["stage"].get<std::string>();
        m.config_hash = hash_;
        m.seed = cfg_.seed;
        m.metrics = metrics_from_json(r["metrics"]);
        out.push_back(std::move(m));
      }
    }
    return out;
  }

  std::vector<Check> evaluate_checks(const RunResult& r) const {
    std::vector<Check> checks;
    auto add = [&](std::string name, bool hard, bool passed, std::string detail) {
      checks.push_back({std::move(name), hard, passed, std::move(detail)});
    };
    char buf[256];
    const auto ft_pair = pair_name(std::min(cfg_.finetune_lang_a, cfg_.finetune_lang_b),
                                   std::max(cfg_.finetune_lang_a, cfg_.finetune_lang_b));
    auto f1 = [&](const std::string& sys, const std::string& p) { return r.metric("mining/" + sys + "/" + p, "f1"); };
    auto psm = [&](const std::string& sys, const std::string& p) {
      return r.metric("psm/" + sys + "/" + p, "acc_mean");
    };
    double psm_gain = 0.0;
    std::size_t n_pairs = 0;
    for (const auto& [a, b] : pairs()) {
      const auto p = pair_name(a, b);
      const bool seen = p == ft_pair;
      const double d = f1("finetuned", p) - f1("vanilla", p);
      std::snprintf(buf, sizeof buf, "%s mining F1 vanilla %.2f -> fine-tuned %.2f (%+.2f)", p.c_str(),
                    f1("vanilla", p), f1("finetuned", p), d);
      add("mining_gain." + p, true, d > 0.0, buf);
      add("mining_gain_target." + p, false, d >= (seen ? 10.0 : 5.0), buf);
      const double g = psm("finetuned", p) - psm("vanilla", p);
      std::snprintf(buf, sizeof buf, "%s PSM accuracy vanilla %.2f -> fine-tuned %.2f (%+.2f)", p.c_str(),
                    psm("vanilla", p), psm("finetuned", p), g);
      add("psm_gain." + p, true, g > 0.0, buf);
      psm_gain += g;
      ++n_pairs;
    }
    std::snprintf(buf, sizeof buf, "mean PSM gain %+.2f points", psm_gain / static_cast<double>(n_pairs));
    add("psm_gain_target", false, psm_gain / static_cast<double>(n_pairs) >= 5.0, buf);

    const double wm = f1("wordmap", ft_pair), va = f1("vanilla", ft_pair), ft = f1("finetuned", ft_pair);
    std::snprintf(buf, sizeof buf, "%s F1 wordmap %.2f < vanilla %.2f < fine-tuned %.2f", ft_pair.c_str(), wm, va, ft);
    add("baseline_order", true, wm < va && va < ft, buf);

    if (cfg_.ablation) {
      const double ab = f1("finetuned.ablation", ft_pair);
      std::snprintf(buf, sizeof buf, "%s F1 noise %.2f: %.2f vs noise %.2f: %.2f (|diff| %.2f)", ft_pair.c_str(),
                    cfg_.finetune_noise, ft, cfg_.ablation_noise, ab, std::abs(ft - ab));
      add("noise_robustness", true, std::abs(ft - ab) < 5.0, buf);
    }
    if (cfg_.layer_sweep) {
      const std::size_t want = 2 * (static_cast<std::size_t>(cfg_.encoder.n_layers) + 1);
      std::snprintf(buf, sizeof buf, "%zu layer rows (want %zu)", r.layers.size(), want);
      add("layers_complete", true, r.layers.size() == want, buf);
      const auto [deep, shallow] = layer_third_deltas(r.layers);
      std::snprintf(buf, sizeof buf, "deepest-third delta %+.2f vs shallowest-third delta %+.2f", 100.0 * deep,
                    100.0 * shallow);
      add("layers_deep_delta", false, deep >= shallow, buf);
    }
    std::snprintf(buf, sizeof buf, "%.1f s CPU for this invocation", r.cpu_seconds);
    add("runtime", true, r.cpu_seconds < 1800.0, buf);
    return checks;
  }

  /// Unordered language pairs (a < b).
  std::vector<std::pair<std::uint32_t, std::uint32_t>> pairs() const {
    std::vector<std::pair<std::uint32_t, std::uint32_t>> out;
    for (std::uint32_t a = 0; a < cfg_.languages; ++a) {
      for (std::uint32_t b = a + 1; b < cfg_.languages; ++b) out.emplace_back(a, b);
    }
    return out;
  }

  const std::vector<PsmSet>& psm_sets() {
    ensure_data();
    return psm_;
  }

  const std::vector<std::string>& mono(std::uint32_t lang) {
    ensure_data();
    return mono_.at(lang);
  }

  /// Sentence embeddings of a system; the word-mapping baseline maps side
  /// A into the space of `other` and leaves side B unmapped.
  embed::EmbeddingSet embed_system(const std::string& system, const std::vector<embed::Sentence>& s,
                                   std::uint32_t lang, std::uint32_t other, bool side_a) {
    if (system == "wordmap") {
      const auto& tables = ensure_word_vectors();
      const auto& t = tables.at(lang);
      const auto map = side_a ? ensure_map(lang, other) : wordmap::OrthogonalMap::identity(t.dim());
      const std::vector<double>* idf = nullptr;
      std::vector<double> weights;
      if (cfg_.wordmap_idf) {
        weights = wordmap::idf_weights(t, mono(lang));
        idf = &weights;
      }
      return wordmap::embed_sentences(t, map, s, idf);
    }
    const nn::EncoderParams<float>* params = nullptr;
    if (system == "vanilla") {
      params = &ensure_vanilla();
    } else if (system == "finetuned") {
      params = &ensure_finetuned();
    } else if (system == "finetuned.ablation") {
      params = &ensure_finetuned(true);
    } else {
      throw ConfigError("unknown system '" + system + "'");
    }
    return embed::embed(*params, s, static_cast<std::int32_t>(lang), cfg_.pooling(), ensure_bpe());
  }

  /// Orthogonal map from language a's word space into language b's.
  wordmap::OrthogonalMap ensure_map(std::uint32_t a, std::uint32_t b) {
    const auto key = pair_name(a, b);
    if (const auto it = maps_.find(key); it != maps_.end()) return it->second;
    const auto file = path("models/map." + key + ".orth").string();
    const auto name = "wordmap." + key;
    stage(name, [&] {
      if (!done(name) || !fs::exists(file)) {
        const auto& tables = ensure_word_vectors();
        wordmap::Dictionary seed;
        if (cfg_.align.init == wordmap::AlignInit::OracleSeed) seed = oracle_dictionary(a, b, 50);
        const auto r = wordmap::self_learning_align(tables[a], tables[b], cfg_.align, seed);
        wordmap::save_map(file, r.map);
        const auto gold = oracle_dictionary(a, b, std::min<std::size_t>(tables[a].size(), tables[b].size()));
        json j;
        j["iterations"] = r.iterations;
        j["converged"] = r.converged;
        j["trace"] = r.trace;
        j["dictionary_size"] = r.dictionary.size();
        j["translation_p_at_1"] = gold.empty() ? 0.0 : wordmap::translation_precision_at_1(tables[a], tables[b], r.map, gold);
        io::open_out(path("stages/" + name + ".json").string()) << j.dump(1) << '\n';
        log(name + ": " + j.dump());
        mark(name);
      }
      maps_[key] = wordmap::load_map(file);
    });
    return maps_[key];
  }

  /// Cipher ground truth between the word tables of a and b, restricted to
  /// words present in both tables, ordered by rank in a, at most `limit`.
  wordmap::Dictionary oracle_dictionary(std::uint32_t a, std::uint32_t b, std::size_t limit) {
    ensure_data();
    const auto& tables = ensure_word_vectors();
    wordmap::Dictionary d;
    for (std::size_t i = 0; i < tables[a].size() && d.size() < limit; ++i) {
      const auto& w = tables[a].words[i];
      if (!specs_[a].knows(w)) continue;
      if (const auto j = tables[b].find(specs_[b].cipher(specs_[a].decipher(w)))) d.emplace_back(i, *j);
    }
    std::sort(d.begin(), d.end());
    return d;
  }

  void write_reports(const RunResult& r) const {
    json metrics = json::array();
    for (const auto& rec : r.records) metrics.push_back(rec.to_json());
    io::open_out(path("reports/metrics.json").string()) << metrics.dump(1) << '\n';

    std::string mining = "system,pair,precision,recall,f1,threshold,train_f1\n";
    std::string psm = "system,pair,acc_fwd,acc_bwd,acc_mean\n";
    for (const auto& rec : r.records) {
      const auto parts = split(rec.stage, '/');
      if (parts.size() != 3) continue;
      const auto& m = rec.metrics;
      if (parts[0] == "mining") {
        mining += parts[1] + "," + parts[2] + "," + detail::fmt_double(m.at("precision")) + "," +
                  detail::fmt_double(m.at("recall")) + "," + detail::fmt_double(m.at("f1")) + "," +
                  mine::format_score(m.at("threshold")) + "," + detail::fmt_double(m.at("train_f1")) + "\n";
      } else if (parts[0] == "psm") {
        psm += parts[1] + "," + parts[2] + "," + detail::fmt_double(m.at("acc_fwd")) + "," +
               detail::fmt_double(m.at("acc_bwd")) + "," + detail::fmt_double(m.at("acc_mean")) + "\n";
      }
    }
    io::open_out(path("reports/mining.csv").string()) << mining;
    io::open_out(path("reports/psm.csv").string()) << psm;

    // System x language-pair grids.
    auto grid = [&](const std::string& task, const std::string& key) {
      std::string out = "system";
      for (const auto& [a, b] : pairs()) out += "," + pair_name(a, b);
      out += "\n";
      for (const auto& s : systems()) {
        out += s;
        for (const auto& [a, b] : pairs()) {
          const auto* rec = r.find(task + "/" + s + "/" + pair_name(a, b));
          char buf[32];
          std::snprintf(buf, sizeof buf, "%.2f", rec ? rec->metrics.at(key) : std::nan(""));
          out += std::string(",") + buf;
        }
        out += "\n";
      }
      return out;
    };
    io::open_out(path("reports/table_mining_f1.csv").string()) << grid("mining", "f1");
    io::open_out(path("reports/table_psm_accuracy.csv").string()) << grid("psm", "acc_mean");

    json checks = json::array();
    for (const auto& c : r.checks)
      checks.push_back({{"name", c.name}, {"hard", c.hard}, {"passed", c.passed}, {"detail", c.detail}});
    json summary;
    summary["config_hash"] = hash_;
    summary["seed"] = cfg_.seed;
    summary["checks"] = checks;
    summary["hard_checks_pass"] = r.hard_checks_pass();
    summary["cpu_seconds"] = r.cpu_seconds;
    summary["wall_seconds"] = r.wall_seconds;
    io::open_out(path("reports/checks.json").string()) << summary.dump(1) << '\n';
  }

 private:
  struct PairTasks {
    std::uint32_t a = 0, b = 0;
    synth::MiningTask train, test;
  };

  void log(const std::string& msg) const {
    if (log_) log_(msg);
  }

  template <typename F>
  void stage(const std::string& name, F&& f) {
    try {
      f();
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(name, e.what());
    }
  }

  bool done(const std::string& name) const {
    const auto marker = path("stages/" + name + ".done");
    if (!fs::exists(marker)) return false;
    const auto lines = io::read_lines(marker.string());
    return !lines.empty() && lines.front() == hash_;
  }

  void mark(const std::string& name) const { io::open_out(path("stages/" + name + ".done").string()) << hash_ << '\n'; }

  static double seconds_since(std::chrono::steady_clock::time_point t) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
  }

  static std::string now_iso() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
  }

  static json read_json(const fs::path& p) {
    auto is = io::open_in(p.string());
    return json::parse(is);
  }

  void append_timing(const MetricsRecord& m) const {
    std::ofstream os(path("reports/records.jsonl"), std::ios::app);
    os << m.to_json_with_timing().dump() << '\n';
  }

  void record(const std::string& name, std::map<std::string, double> metrics,
              std::chrono::steady_clock::time_point start) {
    MetricsRecord m;
    m.stage = name;
    m.config_hash = hash_;
    m.seed = cfg_.seed;
    m.metrics = std::move(metrics);
    m.wall_clock_s = seconds_since(start);
    m.timestamp = now_iso();
    io::open_out(path("stages/" + name + ".metrics.json").string()) << m.to_json().dump(1) << '\n';
    append_timing(m);
    char buf[64];
    std::snprintf(buf, sizeof buf, " done in %.1f s", m.wall_clock_s);
    log(name + buf);
  }

  nn::EncoderConfig encoder_config() {
    auto ec = cfg_.encoder;
    ec.n_languages = cfg_.languages;
    ec.vocab_size = static_cast<std::uint32_t>(ensure_bpe().vocab_size());
    ec.validate();
    return ec;
  }

  std::vector<nn::TrainLogEntry> run_training(nn::EncoderParams<float>& params,
                                              const std::function<nn::MaskedBatch(std::size_t)>& next,
                                              const nn::Schedule& sched, std::uint64_t seed, const std::string& name) {
    const auto every = std::max<std::size_t>(1, sched.steps / 20);
    double window = 0.0;
    std::size_t count = 0;
    const auto start = std::chrono::steady_clock::now();
    return nn::train<float>(
        params, next, sched, seed,
        [&](const nn::EncoderParams<float>& last) {
          nn::save_checkpoint(path("models/" + name + ".diverged.ckpt").string(), last);
        },
        [&](const nn::TrainLogEntry& e) {
          window += e.loss;
          ++count;
          if ((e.step + 1) % every == 0 || e.step + 1 == sched.steps) {
            char buf[160];
            std::snprintf(buf, sizeof buf, "%s step %zu/%zu loss %.4f lr %.2e (%.0f s)", name.c_str(), e.step + 1,
                          sched.steps, window / static_cast<double>(count), e.lr, seconds_since(start));
            log(buf);
            window = 0.0;
            count = 0;
          }
        });
  }

  static double tail_loss(const std::vector<nn::TrainLogEntry>& log) {
    if (log.empty()) return std::nan("");
    const std::size_t n = std::min<std::size_t>(100, log.size());
    double acc = 0.0;
    for (std::size_t i = log.size() - n; i < log.size(); ++i) acc += log[i].loss;
    return acc / static_cast<double>(n);
  }

  static void write_pairs(const std::string& file, const std::vector<synth::SentencePair>& pairs) {
    auto os = io::open_out(file);
    for (const auto& p : pairs) os << p.src << '\t' << p.tgt << '\n';
  }

  static PsmSet to_psm_set(const synth::MiningTask& t, std::uint32_t a, std::uint32_t b) {
    PsmSet s;
    s.lang_a = a;
    s.lang_b = b;
    std::map<std::string, std::size_t> row_b;
    for (const auto& e : t.pool_a) s.a.push_back({e.id, e.text});
    for (std::size_t j = 0; j < t.pool_b.size(); ++j) {
      s.b.push_back({t.pool_b[j].id, t.pool_b[j].text});
      row_b[t.pool_b[j].id] = j;
    }
    std::map<std::string, std::string> gold(t.gold.begin(), t.gold.end());
    for (const auto& e : t.pool_a) s.gold.push_back(row_b.at(gold.at(e.id)));
    return s;
  }

  static std::vector<LayerRow> read_layers_csv(const std::string& file) {
    std::vector<LayerRow> rows;
    const auto lines = io::read_lines(file);
    for (std::size_t i = 1; i < lines.size(); ++i) {
      const auto f = split(lines[i], ',');
      if (f.size() != 3) throw DataError("layers.csv: malformed line " + std::to_string(i + 1));
      rows.push_back({static_cast<std::uint32_t>(std::stoul(f[0])), f[1], std::stod(f[2])});
    }
    return rows;
  }

  ExperimentConfig cfg_;
  Logger log_;
  std::string hash_;
  fs::path root_;

  bool data_ready_ = false;
  std::vector<synth::LanguageSpec> specs_;
  std::vector<std::vector<std::string>> mono_;
  std::vector<synth::SentencePair> ft_main_, ft_ablation_;
  std::vector<PairTasks> tasks_;
  std::vector<PsmSet> psm_;

  std::optional<bpe::BpeModel> bpe_;
  std::optional<nn::EncoderParams<float>> vanilla_, finetuned_, ablation_;
  std::vector<wordmap::WordVecTable> word_tables_;
  std::map<std::string, wordmap::OrthogonalMap> maps_;
};

}  // namespace xmine::harness
