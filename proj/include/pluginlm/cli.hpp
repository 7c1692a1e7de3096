#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pluginlm/csv.hpp"
#include "pluginlm/experiment.hpp"

namespace pluginlm::cli {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration (versioned JSON schema, one document per experiment)
// ---------------------------------------------------------------------------

struct DatasetConfig {
  std::string kind = "synthetic";  // synthetic | jsonl
  // jsonl
  std::string train_path, validation_path, test_path;
  // synthetic
  WorldSpec world;
  size_t adaptation_sequences = 2000;
  size_t test_sequences = 200;
  size_t base_corpus_sequences = 4000;
  double corruption = 0.3;
  double hyperval_fraction = 0.4;
};

struct BaseConfig {
  std::string kind = "ngram";  // ngram | transformer
  int order = 2;
  double lambda = 0.1;
  TransformerConfig arch;  // transformer base
  int train_epochs = 10;
};

struct NoiseConfig {
  TransitionKind kind = TransitionKind::symmetric_flip;
  double strength = 0.3;
  size_t estimator_samples = 2000;
  size_t consistency_instances = 20;
  double grid_resolution = 0.01;
  bool train_reweighter = false;
};

struct TheoryConfig {
  size_t vocab = 8;
  size_t t_max = 5000;
  size_t trials = 20;
  uint64_t family_seed = 3;
};

struct CliConfig {
  int version = 1;
  TokenizerKind tokenizer = TokenizerKind::whitespace;
  DatasetConfig dataset;
  BaseConfig base;
  TransformerConfig reweighter;
  TrainConfig train;
  DecodeConfig decode;
  std::vector<double> alpha_grid = {0.25, 0.50, 0.75};
  Method method = Method::plugin;
  std::vector<uint64_t> seeds = {1};
  std::string out = "out/run";
  NoiseConfig noise;
  TheoryConfig theory;
  json echo;  // the raw document, echoed into every run directory
};

namespace detail {

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.is_object() || !j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("field \"") + key + "\": " + e.what());
  }
}

inline TransitionKind transition_kind_from(const std::string& name) {
  if (name == "identity") return TransitionKind::identity;
  if (name == "symmetric_flip") return TransitionKind::symmetric_flip;
  if (name == "class_dependent") return TransitionKind::class_dependent;
  if (name == "diagonal_param") return TransitionKind::diagonal_param;
  throw ConfigError("unknown transition kind: " + name);
}

inline WorldSpec world_from(const json& j) {
  WorldSpec w;
  w.content_tokens = get_or<size_t>(j, "content_tokens", w.content_tokens);
  w.favored = get_or<size_t>(j, "favored", w.favored);
  w.favored_mass = get_or<double>(j, "favored_mass", w.favored_mass);
  w.eos_prob = get_or<double>(j, "eos_prob", w.eos_prob);
  w.min_len = get_or<size_t>(j, "min_len", w.min_len);
  w.max_len = get_or<size_t>(j, "max_len", w.max_len);
  w.prompt_tokens = get_or<size_t>(j, "prompt_tokens", w.prompt_tokens);
  w.seed = get_or<uint64_t>(j, "seed", w.seed);
  w.two_clusters = get_or<bool>(j, "two_clusters", w.two_clusters);
  w.cross_cluster_prob = get_or<double>(j, "cross_cluster_prob", w.cross_cluster_prob);
  return w;
}

inline TransformerConfig arch_from(const json& j, TransformerConfig fallback) {
  TransformerConfig a = fallback;
  a.num_blocks = get_or<int>(j, "blocks", a.num_blocks);
  a.embed_dim = get_or<size_t>(j, "embed_dim", a.embed_dim);
  a.num_heads = get_or<size_t>(j, "num_heads", a.num_heads);
  a.ff_dim = get_or<size_t>(j, "ff_dim", a.ff_dim);
  a.context_window = get_or<size_t>(j, "context_window", a.context_window);
  return a;
}

}  // namespace detail

inline CliConfig parse_config(const json& j) {
  using detail::get_or;
  CliConfig cfg;
  cfg.echo = j;
  cfg.version = get_or<int>(j, "version", 1);
  if (cfg.version != 1) throw ConfigError("unsupported config version");

  const std::string tok = get_or<std::string>(j, "tokenizer", "whitespace");
  if (tok == "whitespace")
    cfg.tokenizer = TokenizerKind::whitespace;
  else if (tok == "character")
    cfg.tokenizer = TokenizerKind::character;
  else
    throw ConfigError("unknown tokenizer: " + tok);

  if (j.contains("dataset")) {
    const json& d = j.at("dataset");
    cfg.dataset.kind = get_or<std::string>(d, "kind", "synthetic");
    if (cfg.dataset.kind == "jsonl") {
      cfg.dataset.train_path = get_or<std::string>(d, "train", "");
      cfg.dataset.validation_path = get_or<std::string>(d, "validation", "");
      cfg.dataset.test_path = get_or<std::string>(d, "test", "");
      if (cfg.dataset.train_path.empty() || cfg.dataset.validation_path.empty() ||
          cfg.dataset.test_path.empty())
        throw ConfigError("jsonl dataset needs train/validation/test paths");
    } else if (cfg.dataset.kind == "synthetic") {
      if (d.contains("world")) cfg.dataset.world = detail::world_from(d.at("world"));
      cfg.dataset.adaptation_sequences =
          get_or<size_t>(d, "adaptation_sequences", cfg.dataset.adaptation_sequences);
      cfg.dataset.test_sequences = get_or<size_t>(d, "test_sequences", cfg.dataset.test_sequences);
      cfg.dataset.base_corpus_sequences =
          get_or<size_t>(d, "base_corpus_sequences", cfg.dataset.base_corpus_sequences);
      cfg.dataset.corruption = get_or<double>(d, "corruption", cfg.dataset.corruption);
      cfg.dataset.hyperval_fraction =
          get_or<double>(d, "hyperval_fraction", cfg.dataset.hyperval_fraction);
    } else {
      throw ConfigError("unknown dataset kind: " + cfg.dataset.kind);
    }
  }

  if (j.contains("base")) {
    const json& b = j.at("base");
    cfg.base.kind = get_or<std::string>(b, "kind", "ngram");
    if (cfg.base.kind == "ngram") {
      cfg.base.order = get_or<int>(b, "order", 2);
      cfg.base.lambda = get_or<double>(b, "lambda", 0.1);
    } else if (cfg.base.kind == "transformer") {
      cfg.base.arch = detail::arch_from(b, cfg.base.arch);
      cfg.base.train_epochs = get_or<int>(b, "train_epochs", 10);
    } else {
      throw ConfigError("unknown base kind: " + cfg.base.kind);
    }
  }

  cfg.reweighter.embed_dim = 32;
  cfg.reweighter.num_heads = 2;
  cfg.reweighter.ff_dim = 64;
  cfg.reweighter.context_window = 24;
  if (j.contains("reweighter")) cfg.reweighter = detail::arch_from(j.at("reweighter"), cfg.reweighter);

  if (j.contains("train")) {
    const json& t = j.at("train");
    cfg.train.learning_rate = get_or<double>(t, "learning_rate", 3e-3);
    cfg.train.weight_decay = get_or<double>(t, "weight_decay", 0.01);
    cfg.train.batch_size = get_or<size_t>(t, "batch_size", 16);
    cfg.train.max_epochs = get_or<int>(t, "max_epochs", 25);
    cfg.train.warmup_fraction = get_or<double>(t, "warmup_fraction", 0.1);
    cfg.train.patience = get_or<int>(t, "patience", 5);
    cfg.train.loss_on_prompt = get_or<bool>(t, "loss_on_prompt", false);
    cfg.train.grid_learning_rates =
        get_or<std::vector<double>>(t, "grid_learning_rates", {});
    cfg.train.grid_weight_decays =
        get_or<std::vector<double>>(t, "grid_weight_decays", {});
  } else {
    cfg.train.learning_rate = 3e-3;
    cfg.train.max_epochs = 25;
  }

  if (j.contains("decode")) {
    const json& d = j.at("decode");
    cfg.decode.max_len = get_or<size_t>(d, "max_len", 24);
    const std::string strat = get_or<std::string>(d, "strategy", "greedy");
    if (strat == "greedy")
      cfg.decode.strategy = DecodeConfig::Strategy::greedy;
    else if (strat == "temperature")
      cfg.decode.strategy = DecodeConfig::Strategy::temperature;
    else if (strat == "top_p")
      cfg.decode.strategy = DecodeConfig::Strategy::top_p;
    else
      throw ConfigError("unknown decode strategy: " + strat);
    cfg.decode.temperature = get_or<double>(d, "temperature", 1.0);
    cfg.decode.top_p = get_or<double>(d, "top_p", 1.0);
  }

  cfg.alpha_grid = get_or<std::vector<double>>(j, "alpha_grid", cfg.alpha_grid);
  cfg.method = method_from_name(get_or<std::string>(j, "method", "plugin"));
  cfg.seeds = get_or<std::vector<uint64_t>>(j, "seeds", cfg.seeds);
  if (cfg.seeds.empty()) throw ConfigError("seeds must be non-empty");
  cfg.out = get_or<std::string>(j, "out", cfg.out);

  if (j.contains("noise")) {
    const json& n = j.at("noise");
    cfg.noise.kind =
        detail::transition_kind_from(get_or<std::string>(n, "kind", "symmetric_flip"));
    cfg.noise.strength = get_or<double>(n, "strength", 0.3);
    cfg.noise.estimator_samples = get_or<size_t>(n, "estimator_samples", 2000);
    cfg.noise.consistency_instances = get_or<size_t>(n, "consistency_instances", 20);
    cfg.noise.grid_resolution = get_or<double>(n, "grid_resolution", 0.01);
    cfg.noise.train_reweighter = get_or<bool>(n, "train_reweighter", false);
  }

  if (j.contains("theory")) {
    const json& t = j.at("theory");
    cfg.theory.vocab = get_or<size_t>(t, "vocab", 8);
    cfg.theory.t_max = get_or<size_t>(t, "t_max", 5000);
    cfg.theory.trials = get_or<size_t>(t, "trials", 20);
    cfg.theory.family_seed = get_or<uint64_t>(t, "family_seed", 3);
  }
  return cfg;
}

inline CliConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config: " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  return parse_config(j);
}

// ---------------------------------------------------------------------------
// Run-directory helpers
// ---------------------------------------------------------------------------

inline std::string git_describe() {
  FILE* pipe = ::popen("git describe --always --dirty 2>/dev/null", "r");
  if (!pipe) return "unknown";
  char buf[128] = {0};
  std::string out;
  while (fgets(buf, sizeof buf, pipe)) out += buf;
  ::pclose(pipe);
  while (!out.empty() && (out.back() == '\n' || out.back() == '\r')) out.pop_back();
  return out.empty() ? "unknown" : out;
}

inline fs::path make_run_dir(const CliConfig& cfg, const std::string& command, uint64_t seed) {
  fs::path dir = fs::path(cfg.out) / (command + "-run-" + std::to_string(seed));
  fs::create_directories(dir);
  json info;
  info["config"] = cfg.echo;
  info["seed"] = seed;
  info["git_describe"] = git_describe();
  info["command"] = command;
  std::ofstream out(dir / "run_info.json", std::ios::binary);
  out << info.dump(2) << "\n";
  return dir;
}

inline void write_history_csv(const fs::path& path, const TrainHistory& hist) {
  CsvWriter csv(path.string());
  csv.row({"epoch", "train_loss", "hyperval_loss", "is_best"});
  for (const auto& row : hist.rows)
    csv.row({std::to_string(row.epoch), csv_num(row.train_loss), csv_num(row.hyperval_loss),
             row.is_best ? "1" : "0"});
}

// ---------------------------------------------------------------------------
// Data assembly shared by train/eval/decode/shift
// ---------------------------------------------------------------------------

struct BuiltData {
  std::shared_ptr<const BlackBox> base;
  std::vector<Record> train, hyperval, test;
  std::shared_ptr<WorldModel> world;  // synthetic only
  std::vector<ContextProbe> probes;   // synthetic only
  Vocab vocab;
};

inline BuiltData build_data(const CliConfig& cfg, uint64_t seed) {
  BuiltData data;
  if (cfg.dataset.kind == "synthetic") {
    BenchmarkSpec spec;
    spec.world = cfg.dataset.world;
    spec.adaptation_sequences = cfg.dataset.adaptation_sequences;
    spec.test_sequences = cfg.dataset.test_sequences;
    spec.base_corpus_sequences = cfg.dataset.base_corpus_sequences;
    spec.corruption = cfg.dataset.corruption;
    spec.hyperval_fraction = cfg.dataset.hyperval_fraction;
    spec.base_order = cfg.base.order;
    spec.base_lambda = cfg.base.lambda;
    SyntheticData s = make_noisy_benchmark(spec, seed);
    data.base = s.base;
    data.train = std::move(s.train);
    data.hyperval = std::move(s.hyperval);
    data.test = std::move(s.test);
    data.world = s.world;
    data.probes = std::move(s.probes);
    data.vocab = s.world->vocab();
    return data;
  }

  // jsonl: base trained on the train file; adaptation data = validation file
  // with a hyper-validation slice carved out; prompts/references = test file.
  for (const std::string& p :
       {cfg.dataset.train_path, cfg.dataset.validation_path, cfg.dataset.test_path})
    if (!fs::exists(p)) throw ConfigError("dataset path missing: " + p);

  auto read_lines = [&](const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::vector<std::string> texts;
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) {
        json obj = json::parse(line, nullptr, false);
        if (obj.is_discarded()) continue;
        if (obj.contains("prompt")) texts.push_back(obj["prompt"].get<std::string>());
        if (obj.contains("target")) texts.push_back(obj["target"].get<std::string>());
      }
    return texts;
  };
  std::vector<std::string> all_text;
  for (const std::string& p :
       {cfg.dataset.train_path, cfg.dataset.validation_path, cfg.dataset.test_path})
    for (std::string& t : read_lines(p)) all_text.push_back(std::move(t));
  data.vocab = build_vocab(all_text, cfg.tokenizer);

  std::vector<Record> base_train = load_jsonl(cfg.dataset.train_path, data.vocab, cfg.tokenizer);
  std::vector<Record> adaptation =
      load_jsonl(cfg.dataset.validation_path, data.vocab, cfg.tokenizer);
  data.test = load_jsonl(cfg.dataset.test_path, data.vocab, cfg.tokenizer);

  const size_t n_hyp = static_cast<size_t>(std::llround(
      cfg.dataset.hyperval_fraction * static_cast<double>(adaptation.size())));
  data.hyperval.assign(adaptation.end() - static_cast<long>(n_hyp), adaptation.end());
  data.train.assign(adaptation.begin(), adaptation.end() - static_cast<long>(n_hyp));

  std::vector<std::vector<int>> corpus;
  for (const Record& r : base_train) {
    std::vector<int> seq = {Vocab::kBos};
    seq.insert(seq.end(), r.prompt.begin(), r.prompt.end());
    seq.insert(seq.end(), r.target.begin(), r.target.end());
    corpus.push_back(std::move(seq));
  }
  if (cfg.base.kind == "ngram") {
    data.base = std::make_shared<const BlackBox>(std::make_shared<NGramModel>(
        fit_ngram(corpus, cfg.base.order, cfg.base.lambda, data.vocab.size())));
  } else {
    TransformerConfig arch = cfg.base.arch;
    arch.vocab_size = data.vocab.size();
    auto model = std::make_shared<TinyTransformer>(arch, seed);
    TrainConfig tc = cfg.train;
    tc.max_epochs = cfg.base.train_epochs;
    tc.seed = seed;
    const size_t nh = std::max<size_t>(1, base_train.size() / 5);
    std::vector<Record> hv(base_train.end() - static_cast<long>(nh), base_train.end());
    std::vector<Record> tr(base_train.begin(), base_train.end() - static_cast<long>(nh));
    train_new_model(*model, tr, hv, tc);
    data.base = std::make_shared<const BlackBox>(model);
  }
  return data;
}

inline MethodConfig method_config(const CliConfig& cfg, const BuiltData& data) {
  MethodConfig mc;
  mc.model = cfg.reweighter;
  mc.model.vocab_size = data.base->vocab_size();
  mc.train = cfg.train;
  mc.alpha_grid = cfg.alpha_grid;
  return mc;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

inline void write_method_info(const fs::path& dir, const TrainedMethod& tm, uint64_t seed) {
  json info;
  info["method"] = method_name(tm.method);
  info["alpha"] = tm.alpha;
  info["tau"] = tm.tau;
  info["seed"] = seed;
  info["checkpoint"] = tm.model ? "model.ckpt" : "";
  info["best_epoch"] = tm.history.best_epoch;
  info["stopped_early"] = tm.history.stopped_early;
  std::ofstream out(dir / "method_info.json", std::ios::binary);
  out << info.dump(2) << "\n";
}

inline int cmd_train(const CliConfig& cfg) {
  for (uint64_t seed : cfg.seeds) {
    fs::path dir = make_run_dir(cfg, "train", seed);
    BuiltData data = build_data(cfg, seed);
    data.vocab.save((dir / "vocab.txt").string());
    MethodConfig mc = method_config(cfg, data);
    TrainedMethod tm = train_method(cfg.method, data.base, data.train, data.hyperval, mc, seed);
    if (tm.model) tm.model->save((dir / "model.ckpt").string(), data.vocab.digest());
    write_method_info(dir, tm, seed);
    if (!tm.history.rows.empty()) write_history_csv(dir / "history.csv", tm.history);
    std::ofstream summary(dir / "summary.txt", std::ios::binary);
    summary << "command: train\nmethod: " << method_name(cfg.method) << "\nseed: " << seed
            << "\nbest_epoch: " << tm.history.best_epoch << "\n";
    std::cout << "train seed " << seed << " done (method " << method_name(cfg.method) << ")\n";
  }
  return 0;
}

// Rebuilds a trained method from a train run directory.
inline TrainedMethod load_method(const CliConfig& cfg, const BuiltData& data, uint64_t seed) {
  fs::path dir = fs::path(cfg.out) / ("train-run-" + std::to_string(seed));
  fs::path info_path = dir / "method_info.json";
  if (cfg.method == Method::zeroshot) {
    // nothing was trained; synthesize directly
    MethodConfig mc = method_config(cfg, data);
    return train_method(Method::zeroshot, data.base, data.train, data.hyperval, mc, seed);
  }
  if (!fs::exists(info_path)) throw MissingCheckpoint(info_path.string());
  std::ifstream in(info_path, std::ios::binary);
  json info = json::parse(in);

  TrainedMethod tm;
  tm.method = method_from_name(info["method"].get<std::string>());
  tm.base = data.base;
  tm.alpha = info["alpha"].get<double>();
  tm.tau = info["tau"].get<double>();
  if (!info["checkpoint"].get<std::string>().empty()) {
    fs::path ckpt = dir / info["checkpoint"].get<std::string>();
    if (!fs::exists(ckpt)) throw MissingCheckpoint(ckpt.string());
    tm.model = std::make_unique<TinyTransformer>(TinyTransformer::load(ckpt.string()));
  }
  // rebuild the distribution stack
  switch (tm.method) {
    case Method::newmodel: {
      struct Fwd final : LanguageModel {
        const TinyTransformer* m;
        explicit Fwd(const TinyTransformer* mm) : m(mm) {}
        size_t vocab_size() const override { return m->vocab_size(); }
        size_t context_window() const override { return m->context_window(); }
        ProbVector next_token_probs(std::span<const int> c) const override {
          return m->next_token_probs(c);
        }
        std::vector<ProbVector> teacher_forced_probs(std::span<const int> t) const override {
          return m->teacher_forced_probs(t);
        }
        void hash_params(Fnv64& h) const override { m->hash_params(h); }
      };
      tm.stack = std::make_unique<Fwd>(tm.model.get());
      break;
    }
    case Method::weightedcomb:
      tm.stack = std::make_unique<MixtureLM>(*tm.model, *tm.base, tm.alpha);
      break;
    case Method::tempscale:
      tm.stack = std::make_unique<TempScaledLM>(*tm.base, tm.tau);
      break;
    case Method::plugin:
      tm.stack = std::make_unique<PluginLM>(*tm.base, *tm.model);
      break;
    case Method::zeroshot:
      break;
  }
  return tm;
}

inline int cmd_eval(const CliConfig& cfg) {
  if (cfg.dataset.kind == "synthetic" && cfg.dataset.test_sequences == 0)
    throw ConfigError("empty test set");
  std::vector<std::vector<TokenSeq>> per_seed_preds;
  std::vector<TokenSeq> references;
  for (uint64_t seed : cfg.seeds) {
    fs::path dir = make_run_dir(cfg, "eval", seed);
    BuiltData data = build_data(cfg, seed);
    if (data.test.empty()) throw ConfigError("empty test set");
    TrainedMethod tm = load_method(cfg, data, seed);
    const LanguageModel& dist = tm.method == Method::zeroshot ? *data.base : tm.distribution();

    std::vector<TokenSeq> preds;
    DecodeConfig dc = cfg.decode;
    CsvWriter gen_csv((dir / "generations.csv").string());
    gen_csv.row({"example", "prompt", "generated", "reference"});
    references.clear();
    for (size_t i = 0; i < data.test.size(); ++i) {
      dc.seed = mix_stream(seed, i);
      TokenSeq gen = decode_base(dist, data.test[i].prompt, dc);
      TokenSeq cand = strip_reserved(gen);
      TokenSeq ref = strip_reserved(data.test[i].target);
      preds.push_back(cand);
      references.push_back(ref);
      gen_csv.row({std::to_string(i), decode(data.test[i].prompt, data.vocab, cfg.tokenizer),
                   decode(cand, data.vocab, cfg.tokenizer),
                   decode(ref, data.vocab, cfg.tokenizer)});
    }
    per_seed_preds.push_back(std::move(preds));
  }

  // keep only examples with non-empty references for the n-gram metrics
  std::vector<size_t> keep;
  for (size_t i = 0; i < references.size(); ++i)
    if (!references[i].empty()) keep.push_back(i);
  std::vector<TokenSeq> refs_kept;
  for (size_t i : keep) refs_kept.push_back(references[i]);
  std::vector<std::vector<TokenSeq>> preds_kept;
  for (const auto& preds : per_seed_preds) {
    std::vector<TokenSeq> row;
    for (size_t i : keep) row.push_back(preds[i]);
    preds_kept.push_back(std::move(row));
  }

  MetricReport report = evaluate_all(preds_kept, refs_kept, cfg.seeds);
  fs::create_directories(cfg.out);
  {
    CsvWriter csv((fs::path(cfg.out) / "metrics_mean_std.csv").string());
    csv.row({"metric", "mean", "std"});
    for (size_t k = 0; k < report.metric_names.size(); ++k)
      csv.row({report.metric_names[k], csv_num(report.mean[k]), csv_num(report.stddev[k])});
  }
  {
    CsvWriter csv((fs::path(cfg.out) / "metrics_per_example.csv").string());
    csv.row({"seed", "metric", "example", "score"});
    for (size_t s = 0; s < cfg.seeds.size(); ++s)
      for (size_t k = 0; k < report.metric_names.size(); ++k)
        for (size_t e = 0; e < report.per_example[s][k].size(); ++e)
          csv.row({std::to_string(cfg.seeds[s]), report.metric_names[k], std::to_string(e),
                   csv_num(report.per_example[s][k][e])});
  }
  std::cout << "eval: wrote metrics for " << cfg.seeds.size() << " seed(s)\n";
  return 0;
}

inline int cmd_noise_sim(const CliConfig& cfg) {
  for (uint64_t seed : cfg.seeds) {
    fs::path dir = make_run_dir(cfg, "noise-sim", seed);
    NoiseSimSpec spec;
    spec.kind = cfg.noise.kind;
    spec.strength = cfg.noise.strength;
    spec.world = cfg.dataset.world;
    spec.base_corpus_sequences = cfg.dataset.base_corpus_sequences;
    spec.base_order = cfg.base.order;
    spec.base_lambda = cfg.base.lambda;
    spec.estimator_samples = cfg.noise.estimator_samples;
    spec.consistency_instances = cfg.noise.consistency_instances;
    spec.grid_resolution = cfg.noise.grid_resolution;
    spec.train_reweighter = cfg.noise.train_reweighter;
    spec.adaptation_sequences = cfg.dataset.adaptation_sequences;
    spec.method.model = cfg.reweighter;
    spec.method.model.vocab_size = 3 + spec.world.content_tokens;
    spec.method.train = cfg.train;
    NoiseSimOutcome out = run_noise_sim(spec, seed);

    {
      CsvWriter csv((dir / "consistency_report.csv").string());
      csv.row({"instance", "vocab", "max_distance", "identifiable", "pass"});
      for (size_t i = 0; i < spec.consistency_instances; ++i) {
        auto [p_star, t] = make_tiny_instance(mix_stream(seed, i));
        ConsistencyReport rep = consistency_check(p_star, t, spec.grid_resolution);
        csv.row({std::to_string(i), std::to_string(t.n), csv_num(rep.max_distance),
                 rep.non_identifiable ? "0" : "1", rep.consistent() ? "1" : "0"});
      }
    }
    {
      CsvWriter csv((dir / "estimator_report.csv").string());
      csv.row({"row", "col", "true_value", "estimate", "support"});
      for (size_t i = 0; i < out.transition.n; ++i)
        for (size_t j = 0; j < out.transition.n; ++j)
          csv.row({std::to_string(i), std::to_string(j), csv_num(out.transition.at(i, j)),
                   csv_num(out.estimate.t_hat.at(i, j)), std::to_string(out.estimate.support[i])});
    }
    {
      CsvWriter csv((dir / "kl_report.csv").string());
      csv.row({"model", "mean_context_kl"});
      csv.row({"base", csv_num(out.kl_base)});
      csv.row({"diag_plugin", csv_num(out.kl_diag_plugin)});
      if (out.kl_trained_plugin >= 0.0)
        csv.row({"trained_plugin", csv_num(out.kl_trained_plugin)});
    }
    std::ofstream summary(dir / "summary.txt", std::ios::binary);
    summary << "consistency: " << out.consistency_pass << "/" << out.consistency_total
            << "\nestimator_max_error: " << csv_num(out.estimator_max_error)
            << "\nkl_base: " << csv_num(out.kl_base)
            << "\nkl_diag_plugin: " << csv_num(out.kl_diag_plugin) << "\n";
    std::cout << "noise-sim seed " << seed << ": consistency " << out.consistency_pass << "/"
              << out.consistency_total << ", estimator max err "
              << csv_num(out.estimator_max_error) << "\n";
  }
  return 0;
}

inline int cmd_theory(const CliConfig& cfg) {
  for (uint64_t seed : cfg.seeds) {
    fs::path dir = make_run_dir(cfg, "theory", seed);
    ThetaFamily fam = ThetaFamily::make(cfg.theory.vocab, cfg.theory.family_seed);
    DecayReport rep = theorem1_decay(fam, cfg.theory.t_max, cfg.theory.trials, seed);
    {
      CsvWriter csv((dir / "decay.csv").string());
      csv.row({"t", "mean_excess", "std_excess"});
      for (size_t k = 0; k < rep.ts.size(); ++k)
        csv.row({std::to_string(rep.ts[k]), csv_num(rep.mean_excess[k]),
                 csv_num(rep.std_excess[k])});
    }
    std::ofstream summary(dir / "summary.txt", std::ios::binary);
    summary << "slope: " << csv_num(rep.slope) << " intercept: " << csv_num(rep.intercept)
            << " trials: " << rep.trials << "\n";
    std::cout << "theory seed " << seed << ": slope " << csv_num(rep.slope) << " over "
              << rep.trials << " trials\n";
  }
  return 0;
}

inline int cmd_shift(const CliConfig& cfg) {
  for (uint64_t seed : cfg.seeds) {
    fs::path dir = make_run_dir(cfg, "shift", seed);
    ShiftSpec spec;
    spec.world = cfg.dataset.world;
    spec.world.two_clusters = true;
    spec.base_corpus_sequences = cfg.dataset.base_corpus_sequences;
    spec.adaptation_sequences = cfg.dataset.adaptation_sequences;
    spec.hyperval_fraction = cfg.dataset.hyperval_fraction;
    spec.test_prompts = cfg.dataset.test_sequences;
    spec.base_order = cfg.base.order;
    spec.base_lambda = cfg.base.lambda;
    spec.method.model = cfg.reweighter;
    spec.method.train = cfg.train;
    spec.decode = cfg.decode;
    ShiftOutcome out = run_shift(spec, seed);
    {
      CsvWriter csv((dir / "shift_report.csv").string());
      csv.row({"seed", "base_fraction", "plugin_fraction", "validation_b_fraction", "degenerate"});
      csv.row({std::to_string(seed), csv_num(out.base_fraction), csv_num(out.plugin_fraction),
               csv_num(out.validation_b_fraction), out.degenerate ? "1" : "0"});
    }
    std::ofstream summary(dir / "summary.txt", std::ios::binary);
    summary << "base_fraction: " << csv_num(out.base_fraction)
            << "\nplugin_fraction: " << csv_num(out.plugin_fraction)
            << "\ndegenerate: " << (out.degenerate ? "yes" : "no") << "\n";
    std::cout << "shift seed " << seed << ": base " << csv_num(out.base_fraction) << " -> plugin "
              << csv_num(out.plugin_fraction) << (out.degenerate ? " (degenerate)" : "") << "\n";
  }
  return 0;
}

inline int cmd_decode(const CliConfig& cfg) {
  for (uint64_t seed : cfg.seeds) {
    fs::path dir = make_run_dir(cfg, "decode", seed);
    BuiltData data = build_data(cfg, seed);
    MethodConfig mc = method_config(cfg, data);
    TrainedMethod tm = train_method(cfg.method, data.base, data.train, data.hyperval, mc, seed);

    CsvWriter trace_csv((dir / "trace.csv").string());
    trace_csv.row({"prompt_id", "step", "token", "p_base", "p_reweight", "p_combined"});
    std::ofstream text(dir / "generations.txt", std::ios::binary);
    DecodeConfig dc = cfg.decode;
    for (size_t i = 0; i < data.test.size(); ++i) {
      dc.seed = mix_stream(seed, i);
      std::vector<DecodeStep> trace;
      TokenSeq gen;
      if (cfg.method == Method::plugin && tm.model) {
        gen = decode_plugin(*data.base, tm.model.get(), data.test[i].prompt, dc, &trace);
      } else {
        gen = decode_base(tm.method == Method::zeroshot ? *data.base : tm.distribution(),
                          data.test[i].prompt, dc, &trace);
      }
      for (const DecodeStep& s : trace)
        trace_csv.row({std::to_string(i), std::to_string(s.step),
                       data.vocab.tokens[static_cast<size_t>(s.token)], csv_num(s.p_base),
                       csv_num(s.p_reweight), csv_num(s.p_combined)});
      text << decode(strip_reserved(gen), data.vocab, cfg.tokenizer) << "\n";
    }
    std::cout << "decode seed " << seed << ": " << data.test.size() << " prompts\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

inline int run(const std::vector<std::string>& args) {
  CLI::App app{"logit-reweighting toolkit for frozen language models"};
  app.require_subcommand(1);

  std::string config_path, out_override, method_override;
  std::vector<uint64_t> seed_override;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "experiment config (JSON)")->required();
    sub->add_option("--seed", seed_override, "seed override (repeatable)");
    sub->add_option("--out", out_override, "output directory override");
    sub->add_option("--method", method_override, "method override");
  };

  CLI::App* train = app.add_subcommand("train", "train the configured method");
  CLI::App* eval = app.add_subcommand("eval", "decode the test set and score it");
  CLI::App* noise = app.add_subcommand("noise-sim", "label-noise laboratory pipeline");
  CLI::App* theory = app.add_subcommand("theory", "sequential estimation decay experiment");
  CLI::App* shift = app.add_subcommand("shift", "distribution-shift benchmark");
  CLI::App* dec = app.add_subcommand("decode", "generate text with per-step traces");
  for (CLI::App* sub : {train, eval, noise, theory, shift, dec}) add_common(sub);

  std::vector<const char*> argv;
  argv.push_back("pluginlm");
  for (const std::string& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      // --help
      std::cout << app.help();
      return 0;
    }
    std::cerr << e.what() << "\n";
    return 1;
  }

  try {
    CliConfig cfg = load_config(config_path);
    if (!seed_override.empty()) cfg.seeds = seed_override;
    if (!out_override.empty()) cfg.out = out_override;
    if (!method_override.empty()) cfg.method = method_from_name(method_override);

    if (train->parsed()) return cmd_train(cfg);
    if (eval->parsed()) return cmd_eval(cfg);
    if (noise->parsed()) return cmd_noise_sim(cfg);
    if (theory->parsed()) return cmd_theory(cfg);
    if (shift->parsed()) return cmd_shift(cfg);
    if (dec->parsed()) return cmd_decode(cfg);
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

inline int run(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args);
}

}  // namespace pluginlm::cli
