#pragma once

#include <future>
#include <map>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "pluginlm/corpus.hpp"
#include "pluginlm/decoding.hpp"
#include "pluginlm/errors.hpp"
#include "pluginlm/metrics.hpp"
#include "pluginlm/ngram.hpp"
#include "pluginlm/noise.hpp"
#include "pluginlm/plugin.hpp"
#include "pluginlm/transformer.hpp"

namespace pluginlm {

// ---------------------------------------------------------------------------
// Synthetic world: a seeded bigram generator with known conditionals, so KL
// against the truth is exact.
// ---------------------------------------------------------------------------

struct WorldSpec {
  size_t content_tokens = 47;
  size_t favored = 4;          // concentrated continuations per context
  double favored_mass = 0.85;  // share of the non-EOS mass on the favored set
  double eos_prob = 0.03;      // end-of-sequence mass after ordinary tokens
  // a seeded subset of tokens behaves like sentence enders: sequences mostly
  // stop after them, which gives greedy decoding a real stopping decision
  double terminal_fraction = 0.25;
  double terminal_eos = 0.55;
  // hub tokens form a Zipf-like head: they sit in most favored sets, so the
  // corpus marginal concentrates on them the way stopwords dominate text
  size_t hub_tokens = 5;
  size_t hub_favored = 2;  // favored slots per row reserved for hubs
  size_t min_len = 3;
  size_t max_len = 18;
  size_t prompt_tokens = 2;
  uint64_t seed = 1;
  // two-topic structure for the distribution-shift benchmark
  bool two_clusters = false;
  double cross_cluster_prob = 0.04;
};

class WorldModel final : public LanguageModel {
 public:
  static WorldModel make(const WorldSpec& spec) {
    WorldModel w;
    w.spec_ = spec;
    w.spec_.min_len = std::max(spec.min_len, spec.prompt_tokens);
    const size_t v = 3 + spec.content_tokens;
    std::vector<std::string> names;
    for (size_t i = 0; i < spec.content_tokens; ++i) {
      char buf[8];
      std::snprintf(buf, sizeof buf, "w%02zu", i);
      names.emplace_back(buf);
    }
    w.vocab_ = Vocab::from_tokens(names);
    w.rows_ = Tensor({v, v});
    Rng rng(spec.seed, "world_rows");

    w.is_ender_.assign(v, 0);
    for (size_t tok = 3; tok < v; ++tok)
      if (rng.next_double() < spec.terminal_fraction) w.is_ender_[tok] = 1;

    auto cluster_of = [&](size_t tok) {
      // content token ids start at 3; first half = cluster A, rest = cluster B
      return (tok - 3) < spec.content_tokens / 2 ? 0 : 1;
    };
    auto is_hub = [&](size_t tok) {
      const size_t offset = tok - 3;
      if (!spec.two_clusters) return offset < spec.hub_tokens;
      const size_t half = spec.content_tokens / 2;
      const size_t per_cluster = std::max<size_t>(1, spec.hub_tokens / 2);
      return (offset < half ? offset : offset - half) < per_cluster;
    };

    auto fill_row = [&](size_t ctx, bool is_bos) {
      const double eos =
          is_bos ? 0.0 : (w.is_ender_[ctx] ? spec.terminal_eos : spec.eos_prob);
      std::vector<double> weight(v, 0.0);
      // candidate continuations, confined to a cluster when topical
      std::vector<size_t> pool, hub_pool, rest_pool;
      for (size_t tok = 3; tok < v; ++tok) {
        if (spec.two_clusters && !is_bos && cluster_of(tok) != cluster_of(ctx)) continue;
        pool.push_back(tok);
        (is_hub(tok) ? hub_pool : rest_pool).push_back(tok);
      }
      auto shuffle = [&](std::vector<size_t>& vset) {
        for (size_t i = vset.size(); i > 1; --i)
          std::swap(vset[i - 1], vset[rng.below(i)]);
      };
      shuffle(hub_pool);
      shuffle(rest_pool);
      std::vector<size_t> favored;
      for (size_t i = 0; i < std::min(spec.hub_favored, hub_pool.size()); ++i)
        favored.push_back(hub_pool[i]);
      for (size_t i = 0; i < rest_pool.size() && favored.size() < spec.favored; ++i)
        favored.push_back(rest_pool[i]);

      const double content_mass = 1.0 - eos;
      double cross = 0.0;
      if (spec.two_clusters && !is_bos) cross = spec.cross_cluster_prob * content_mass;
      const double in_mass = content_mass - cross;
      double favored_total = 0.0;
      std::vector<double> fav_w(favored.size());
      for (size_t i = 0; i < favored.size(); ++i) {
        fav_w[i] = 0.4 + rng.next_double();
        favored_total += fav_w[i];
      }
      for (size_t i = 0; i < favored.size(); ++i)
        weight[favored[i]] += in_mass * spec.favored_mass * fav_w[i] / favored_total;
      const double rest = in_mass * (1.0 - spec.favored_mass);
      for (size_t tok : pool) weight[tok] += rest / static_cast<double>(pool.size());
      if (cross > 0.0) {
        std::vector<size_t> other;
        for (size_t tok = 3; tok < v; ++tok)
          if (cluster_of(tok) != cluster_of(ctx)) other.push_back(tok);
        for (size_t tok : other) weight[tok] += cross / static_cast<double>(other.size());
      }
      weight[Vocab::kEos] = eos;
      double s = 0.0;
      for (double x : weight) s += x;
      for (size_t tok = 0; tok < v; ++tok) w.rows_.at(ctx, tok) = weight[tok] / s;
    };

    if (spec.two_clusters) {
      // BOS starts either topic with equal chance
      std::vector<double> bos(v, 0.0);
      for (size_t tok = 3; tok < v; ++tok) bos[tok] = 0.0;
      // give BOS mass to a few entry tokens per cluster
      for (int cluster = 0; cluster < 2; ++cluster) {
        std::vector<size_t> members;
        for (size_t tok = 3; tok < v; ++tok)
          if (cluster_of(tok) == static_cast<size_t>(cluster)) members.push_back(tok);
        for (size_t i = 0; i < std::min<size_t>(4, members.size()); ++i)
          bos[members[rng.below(members.size())]] += 0.125;
      }
      double s = 0.0;
      for (double x : bos) s += x;
      if (s <= 0.0) s = 1.0;
      for (size_t tok = 0; tok < v; ++tok) w.rows_.at(Vocab::kBos, tok) = bos[tok] / s;
    } else {
      fill_row(Vocab::kBos, true);
    }
    for (size_t tok = 3; tok < v; ++tok) fill_row(tok, false);
    // EOS and UNK rows are never sampled from; keep them valid anyway
    w.rows_.at(Vocab::kEos, Vocab::kEos) = 1.0;
    w.rows_.at(Vocab::kUnk, Vocab::kUnk) = 1.0;
    return w;
  }

  const WorldSpec& spec() const { return spec_; }
  const Vocab& vocab() const { return vocab_; }
  size_t vocab_size() const override { return vocab_.size(); }

  std::span<const double> row(int ctx_token) const {
    return {rows_.data() + static_cast<size_t>(ctx_token) * vocab_.size(), vocab_.size()};
  }

  ProbVector next_token_probs(std::span<const int> context) const override {
    const int last = context.empty() ? Vocab::kBos : context.back();
    auto r = row(last);
    return ProbVector(std::vector<double>(r.begin(), r.end()));
  }

  void hash_params(Fnv64& h) const override {
    h.add_u64(spec_.seed);
    h.add_doubles(rows_.values());
  }

  bool is_ender(int token) const { return is_ender_[static_cast<size_t>(token)] != 0; }

  bool in_cluster_b(int token) const {
    return token >= 3 &&
           static_cast<size_t>(token - 3) >= spec_.content_tokens / 2;
  }
  bool in_cluster_a(int token) const {
    return token >= 3 && static_cast<size_t>(token - 3) < spec_.content_tokens / 2;
  }

  // Content tokens only (no EOS marker); length in [min_len, max_len].
  std::vector<int> sample_sequence(Rng& rng) const {
    std::vector<int> seq;
    int last = Vocab::kBos;
    while (seq.size() < spec_.max_len) {
      auto r = row(last);
      std::vector<double> w(r.begin(), r.end());
      if (seq.size() < spec_.min_len) w[Vocab::kEos] = 0.0;
      const int tok = static_cast<int>(rng.categorical(w));
      if (tok == Vocab::kEos) break;
      seq.push_back(tok);
      last = tok;
    }
    return seq;
  }

  Record sample_record(Rng& rng) const {
    // min_len already guarantees a full prompt; the target may be just EOS.
    std::vector<int> seq;
    while (seq.size() < spec_.prompt_tokens) seq = sample_sequence(rng);
    Record rec;
    rec.prompt.assign(seq.begin(), seq.begin() + static_cast<long>(spec_.prompt_tokens));
    rec.target.assign(seq.begin() + static_cast<long>(spec_.prompt_tokens), seq.end());
    rec.target.push_back(Vocab::kEos);
    return rec;
  }

  // An alternative continuation of the prompt (content tokens only).
  std::vector<int> sample_continuation(std::span<const int> prompt, Rng& rng) const {
    std::vector<int> out;
    int last = prompt.empty() ? Vocab::kBos : prompt.back();
    while (out.size() + prompt.size() < spec_.max_len) {
      auto r = row(last);
      const int tok = static_cast<int>(rng.categorical(r));
      if (tok == Vocab::kEos) break;
      out.push_back(tok);
      last = tok;
    }
    return out;
  }

  std::vector<Record> sample_records(size_t n, uint64_t seed, std::string_view stream) const {
    Rng rng(seed, hash_label(stream) ^ spec_.seed);
    std::vector<Record> out;
    out.reserve(n);
    for (size_t i = 0; i < n; ++i) out.push_back(sample_record(rng));
    return out;
  }

 private:
  WorldSpec spec_;
  Vocab vocab_;
  Tensor rows_;
  std::vector<uint8_t> is_ender_;
};

inline double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw VocabMismatch(p.size(), q.size());
  double s = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    s += p[i] * std::log(p[i] / std::max(q[i], kProbFloor));
  }
  return s;
}

// A probe = a conditioning context whose true next-token row is known (the
// world is a bigram, so the row of the final context token), weighted by how
// often the context occurs in data.
struct ContextProbe {
  std::vector<int> context;
  int focus;  // last context token; the world row evaluated against
  double weight;
};

// One probe per content token with context [c]. Positions before
// prompt_tokens are length-constrained during sampling, so these probes suit
// position-independent models (n-grams, constant reweighters) or worlds with
// single-token prompts.
inline std::vector<ContextProbe> unigram_probes(const std::vector<Record>& records) {
  std::map<int, size_t> counts;
  for (const Record& rec : records) {
    for (int tok : rec.prompt)
      if (tok >= 3) ++counts[tok];
    for (size_t i = 0; i + 1 < rec.target.size(); ++i)
      if (rec.target[i] >= 3) ++counts[rec.target[i]];
  }
  std::vector<ContextProbe> probes;
  for (const auto& [tok, count] : counts)
    probes.push_back({{tok}, tok, static_cast<double>(count)});
  return probes;
}

// Probes at observed content bigrams [x, c], keeping the most frequent
// predecessors per focus token. These condition two tokens deep, which is a
// trained, length-unconstrained position when prompts are two tokens.
inline std::vector<ContextProbe> bigram_probes(const std::vector<Record>& records,
                                               size_t per_focus = 3) {
  std::map<std::pair<int, int>, size_t> pair_counts;
  for (const Record& rec : records) {
    std::vector<int> full = rec.prompt;
    full.insert(full.end(), rec.target.begin(), rec.target.end());
    for (size_t i = 0; i + 1 < full.size(); ++i)
      if (full[i] >= 3 && full[i + 1] >= 3) ++pair_counts[{full[i], full[i + 1]}];
  }
  std::map<int, std::vector<std::pair<size_t, int>>> by_focus;  // focus -> (count, pred)
  for (const auto& [pair, count] : pair_counts)
    by_focus[pair.second].push_back({count, pair.first});
  std::vector<ContextProbe> probes;
  for (auto& [focus, preds] : by_focus) {
    std::sort(preds.begin(), preds.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    for (size_t k = 0; k < std::min(per_focus, preds.size()); ++k)
      probes.push_back({{preds[k].second, focus}, focus, static_cast<double>(preds[k].first)});
  }
  return probes;
}

// Weighted mean of KL(world row at focus || model(context)).
inline double mean_context_kl(const WorldModel& world, const LanguageModel& model,
                              std::span<const ContextProbe> probes) {
  double total_w = 0.0, total = 0.0;
  for (const ContextProbe& probe : probes) {
    ProbVector q = model.next_token_probs(probe.context);
    total += probe.weight * kl_divergence(world.row(probe.focus), q.p);
    total_w += probe.weight;
  }
  return total_w > 0.0 ? total / total_w : 0.0;
}

// ---------------------------------------------------------------------------
// Method zoo
// ---------------------------------------------------------------------------

enum class Method { zeroshot, newmodel, weightedcomb, tempscale, plugin };

inline const char* method_name(Method m) {
  switch (m) {
    case Method::zeroshot: return "zeroshot";
    case Method::newmodel: return "newmodel";
    case Method::weightedcomb: return "weightedcomb";
    case Method::tempscale: return "tempscale";
    case Method::plugin: return "plugin";
  }
  return "?";
}

inline Method method_from_name(const std::string& name) {
  for (Method m : {Method::zeroshot, Method::newmodel, Method::weightedcomb, Method::tempscale,
                   Method::plugin})
    if (name == method_name(m)) return m;
  throw ConfigError("unknown method: " + name);
}

struct MethodConfig {
  TransformerConfig model;  // reweighter / new-model architecture
  TrainConfig train;
  std::vector<double> alpha_grid = {0.25, 0.50, 0.75};
};

// A trained method: owns whatever it fitted and exposes the final
// distribution stack as a LanguageModel.
struct TrainedMethod {
  Method method = Method::zeroshot;
  std::shared_ptr<const BlackBox> base;
  std::unique_ptr<TinyTransformer> model;  // reweighter or new model
  double alpha = 0.5;
  double tau = 1.0;
  TrainHistory history;

  std::unique_ptr<LanguageModel> stack;  // final distribution

  const LanguageModel& distribution() const { return *stack; }
};

inline TrainedMethod train_method(Method method, std::shared_ptr<const BlackBox> base,
                                  const std::vector<Record>& train,
                                  const std::vector<Record>& hyperval, const MethodConfig& cfg,
                                  uint64_t seed) {
  TrainedMethod out;
  out.method = method;
  out.base = std::move(base);
  TrainConfig tc = cfg.train;
  tc.seed = seed;
  TransformerConfig arch = cfg.model;
  arch.vocab_size = out.base->vocab_size();

  switch (method) {
    case Method::zeroshot: {
      struct Fwd final : LanguageModel {
        std::shared_ptr<const BlackBox> bb;
        explicit Fwd(std::shared_ptr<const BlackBox> b) : bb(std::move(b)) {}
        size_t vocab_size() const override { return bb->vocab_size(); }
        size_t context_window() const override { return bb->context_window(); }
        ProbVector next_token_probs(std::span<const int> c) const override {
          return bb->next_token_probs(c);
        }
        std::vector<ProbVector> teacher_forced_probs(std::span<const int> t) const override {
          return bb->teacher_forced_probs(t);
        }
        void hash_params(Fnv64& h) const override { bb->hash_params(h); }
      };
      out.stack = std::make_unique<Fwd>(out.base);
      break;
    }
    case Method::newmodel: {
      out.model = std::make_unique<TinyTransformer>(arch, seed);
      out.history = train_new_model(*out.model, train, hyperval, tc);
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
      out.stack = std::make_unique<Fwd>(out.model.get());
      break;
    }
    case Method::weightedcomb: {
      if (cfg.alpha_grid.empty()) throw EmptyGrid();
      out.model = std::make_unique<TinyTransformer>(arch, seed);
      out.history = train_new_model(*out.model, train, hyperval, tc);
      double best_loss = std::numeric_limits<double>::infinity();
      for (double alpha : cfg.alpha_grid) {
        MixtureLM mix(*out.model, *out.base, alpha);
        const double loss = model_nll(mix, hyperval);
        if (loss < best_loss) {
          best_loss = loss;
          out.alpha = alpha;
        }
      }
      out.stack = std::make_unique<MixtureLM>(*out.model, *out.base, out.alpha);
      break;
    }
    case Method::tempscale: {
      auto [tau, hist] = fit_temperature(*out.base, train, hyperval, tc);
      out.tau = tau;
      out.history = hist;
      out.stack = std::make_unique<TempScaledLM>(*out.base, out.tau);
      break;
    }
    case Method::plugin: {
      out.model = std::make_unique<TinyTransformer>(arch, seed);
      out.history = train_plugin(*out.base, *out.model, train, hyperval, tc);
      out.stack = std::make_unique<PluginLM>(*out.base, *out.model);
      break;
    }
  }
  return out;
}

inline std::vector<int> strip_reserved(std::span<const int> tokens) {
  std::vector<int> out;
  for (int t : tokens)
    if (t >= 3) out.push_back(t);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic benchmarks
// ---------------------------------------------------------------------------

struct BenchmarkSpec {
  WorldSpec world;
  size_t adaptation_sequences = 2000;  // clean pool; 60/40 train/hyperval
  double hyperval_fraction = 0.4;
  size_t test_sequences = 200;
  size_t base_corpus_sequences = 4000;
  double corruption = 0.3;  // symmetric flip strength on the base's view
  int base_order = 2;
  double base_lambda = 0.1;
  size_t references_per_item = 4;
  MethodConfig method;
  DecodeConfig decode;
};

struct SyntheticData {
  std::shared_ptr<WorldModel> world;
  std::shared_ptr<const BlackBox> base;
  std::vector<Record> train, hyperval, test;
  // several valid continuations per test prompt (the world can emit as many
  // gold references as asked, the way multi-reference NLG sets do)
  std::vector<std::vector<std::vector<int>>> test_refs;
  std::vector<ContextProbe> probes;  // built from the adaptation pool
};

// World -> clean adaptation pool + test set; base = add-lambda bigram fit on
// a corrupted sample of the same world. The black box and the test set are
// functions of the world seed only, so reruns under different training seeds
// face the same frozen model and the same prompts; the adaptation pool and
// all method training derive from `seed`.
inline SyntheticData make_noisy_benchmark(const BenchmarkSpec& spec, uint64_t seed) {
  SyntheticData data;
  data.world = std::make_shared<WorldModel>(WorldModel::make(spec.world));

  std::vector<Record> pool =
      data.world->sample_records(spec.adaptation_sequences, seed, "adaptation");
  data.probes = spec.world.prompt_tokens >= 2 ? bigram_probes(pool) : unigram_probes(pool);
  const size_t n_hyp = static_cast<size_t>(
      std::llround(spec.hyperval_fraction * static_cast<double>(pool.size())));
  data.hyperval.assign(pool.end() - static_cast<long>(n_hyp), pool.end());
  data.train.assign(pool.begin(), pool.end() - static_cast<long>(n_hyp));
  data.test = data.world->sample_records(spec.test_sequences, spec.world.seed, "test");
  {
    Rng ref_rng(spec.world.seed, "test_refs");
    for (const Record& rec : data.test) {
      std::vector<std::vector<int>> refs;
      refs.push_back(strip_reserved(rec.target));
      for (size_t r = 1; r < spec.references_per_item; ++r)
        refs.push_back(data.world->sample_continuation(rec.prompt, ref_rng));
      data.test_refs.push_back(std::move(refs));
    }
  }

  std::vector<std::vector<int>> base_corpus;
  {
    Rng rng(spec.world.seed, "base_corpus");
    base_corpus.reserve(spec.base_corpus_sequences);
    for (size_t i = 0; i < spec.base_corpus_sequences; ++i)
      base_corpus.push_back(data.world->sample_sequence(rng));
  }
  if (spec.corruption > 0.0) {
    TransitionMatrix t = make_transition(TransitionKind::symmetric_flip, spec.corruption,
                                         data.world->vocab_size(), spec.world.seed);
    base_corpus = corrupt_corpus(base_corpus, t, mix_stream(spec.world.seed, hash_label("corrupt")));
  }
  for (auto& seq : base_corpus) {
    seq.insert(seq.begin(), Vocab::kBos);
    seq.push_back(Vocab::kEos);
  }
  auto ngram = std::make_shared<NGramModel>(
      fit_ngram(base_corpus, spec.base_order, spec.base_lambda, data.world->vocab_size()));
  data.base = std::make_shared<BlackBox>(std::move(ngram));
  return data;
}

struct MethodOutcome {
  Method method;
  double test_nll = 0.0;
  double context_kl = 0.0;
  double alpha = 0.0;
  double tau = 1.0;
  double bleu_mean = 0.0;
  double rouge_l_mean = 0.0;
  std::vector<std::vector<int>> generations;  // reserved tokens stripped
  TrainHistory history;
};

inline MethodOutcome evaluate_method(Method method, const SyntheticData& data,
                                     const MethodConfig& cfg, const DecodeConfig& decode_cfg,
                                     uint64_t seed) {
  TrainedMethod tm = train_method(method, data.base, data.train, data.hyperval, cfg, seed);
  MethodOutcome out;
  out.method = method;
  out.alpha = tm.alpha;
  out.tau = tm.tau;
  out.history = tm.history;
  out.test_nll = model_nll(tm.distribution(), data.test);
  out.context_kl = mean_context_kl(*data.world, tm.distribution(), data.probes);

  double bleu_sum = 0.0, rouge_sum = 0.0;
  size_t scored = 0;
  DecodeConfig dc = decode_cfg;
  for (size_t i = 0; i < data.test.size(); ++i) {
    dc.seed = mix_stream(seed, i);
    std::vector<int> gen = decode_base(tm.distribution(), data.test[i].prompt, dc);
    std::vector<int> cand = strip_reserved(gen);
    out.generations.push_back(cand);
    std::vector<std::vector<int>> refs;
    if (i < data.test_refs.size()) {
      for (const auto& r : data.test_refs[i])
        if (!r.empty()) refs.push_back(r);
    } else {
      std::vector<int> ref = strip_reserved(data.test[i].target);
      if (!ref.empty()) refs.push_back(ref);
    }
    if (refs.empty()) continue;  // nothing but bare EOS to compare against
    bleu_sum += bleu(cand, refs);
    double best_rl = 0.0;
    for (const auto& r : refs) best_rl = std::max(best_rl, rouge(cand, r, RougeVariant::rl));
    rouge_sum += best_rl;
    ++scored;
  }
  out.bleu_mean = scored ? bleu_sum / static_cast<double>(scored) : 0.0;
  out.rouge_l_mean = scored ? rouge_sum / static_cast<double>(scored) : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Distribution-shift benchmark
// ---------------------------------------------------------------------------

struct ShiftSpec {
  WorldSpec world;  // two_clusters is forced on
  size_t base_corpus_sequences = 3000;
  size_t adaptation_sequences = 1200;
  double hyperval_fraction = 0.4;
  size_t test_prompts = 150;
  int base_order = 2;
  double base_lambda = 0.1;
  MethodConfig method;
  DecodeConfig decode;
  bool filter_validation = false;  // degenerate mode: adaptation data filtered too
};

struct ShiftOutcome {
  double base_fraction = 0.0;    // generated sequences containing a class-B token
  double plugin_fraction = 0.0;
  bool degenerate = false;       // adaptation data carries (almost) no class-B signal
  double validation_b_fraction = 0.0;
};

inline bool contains_cluster_b(const WorldModel& world, std::span<const int> tokens) {
  for (int t : tokens)
    if (world.in_cluster_b(t)) return true;
  return false;
}

// Base trained on the class-A subpopulation only; the reweighter trained on
// the unfiltered pool. A token-presence classifier replaces any judge model.
inline ShiftOutcome run_shift(const ShiftSpec& spec_in, uint64_t seed) {
  ShiftSpec spec = spec_in;
  spec.world.two_clusters = true;
  WorldModel world = WorldModel::make(spec.world);
  auto world_ptr = std::make_shared<WorldModel>(world);

  // filtered view: sequences featuring cluster A and free of cluster B
  std::vector<std::vector<int>> base_corpus;
  {
    Rng rng(seed, "shift_base");
    while (base_corpus.size() < spec.base_corpus_sequences) {
      std::vector<int> seq = world.sample_sequence(rng);
      bool has_a = false, has_b = false;
      for (int t : seq) {
        has_a = has_a || world.in_cluster_a(t);
        has_b = has_b || world.in_cluster_b(t);
      }
      if (has_a && !has_b) base_corpus.push_back(seq);
    }
  }
  for (auto& seq : base_corpus) {
    seq.insert(seq.begin(), Vocab::kBos);
    seq.push_back(Vocab::kEos);
  }
  auto base = std::make_shared<const BlackBox>(std::make_shared<NGramModel>(
      fit_ngram(base_corpus, spec.base_order, spec.base_lambda, world.vocab_size())));

  std::vector<Record> pool = world.sample_records(spec.adaptation_sequences, seed, "shift_pool");
  if (spec.filter_validation) {
    std::vector<Record> filtered;
    for (const Record& r : pool) {
      std::vector<int> full = r.prompt;
      full.insert(full.end(), r.target.begin(), r.target.end());
      if (!contains_cluster_b(world, full)) filtered.push_back(r);
    }
    pool = std::move(filtered);
  }

  ShiftOutcome out;
  size_t with_b = 0;
  for (const Record& r : pool) {
    std::vector<int> full = r.prompt;
    full.insert(full.end(), r.target.begin(), r.target.end());
    if (contains_cluster_b(world, full)) ++with_b;
  }
  out.validation_b_fraction = pool.empty() ? 0.0 : static_cast<double>(with_b) /
                                                       static_cast<double>(pool.size());
  out.degenerate = out.validation_b_fraction < 0.02;

  const size_t n_hyp = static_cast<size_t>(
      std::llround(spec.hyperval_fraction * static_cast<double>(pool.size())));
  std::vector<Record> hyperval(pool.end() - static_cast<long>(n_hyp), pool.end());
  std::vector<Record> train(pool.begin(), pool.end() - static_cast<long>(n_hyp));

  MethodConfig cfg = spec.method;
  TrainedMethod plugin = train_method(Method::plugin, base, train, hyperval, cfg, seed);

  std::vector<Record> prompts = world.sample_records(spec.test_prompts, seed, "shift_test");
  size_t base_hits = 0, plugin_hits = 0;
  DecodeConfig dc = spec.decode;
  for (size_t i = 0; i < prompts.size(); ++i) {
    dc.seed = mix_stream(seed, i);
    std::vector<int> g_base = decode_base(*base, prompts[i].prompt, dc);
    std::vector<int> g_plug = decode_base(plugin.distribution(), prompts[i].prompt, dc);
    if (contains_cluster_b(world, g_base)) ++base_hits;
    if (contains_cluster_b(world, g_plug)) ++plugin_hits;
  }
  out.base_fraction = static_cast<double>(base_hits) / static_cast<double>(prompts.size());
  out.plugin_fraction = static_cast<double>(plugin_hits) / static_cast<double>(prompts.size());
  return out;
}

// ---------------------------------------------------------------------------
// Noise-lab pipeline (consistency battery, estimator, diagonal reweighter)
// ---------------------------------------------------------------------------

struct NoiseSimSpec {
  TransitionKind kind = TransitionKind::symmetric_flip;
  double strength = 0.3;
  WorldSpec world;
  size_t base_corpus_sequences = 4000;
  int base_order = 2;
  double base_lambda = 0.1;
  size_t estimator_samples = 2000;
  size_t consistency_instances = 20;
  double grid_resolution = 0.01;
  // optionally also train the autoregressive reweighter on clean data and
  // report its KL (the diagonal correction alone cannot fix class-independent
  // flips, whose transition diagonal is constant)
  bool train_reweighter = false;
  size_t adaptation_sequences = 1200;
  MethodConfig method;
};

struct NoiseSimOutcome {
  size_t consistency_pass = 0;
  size_t consistency_total = 0;
  double estimator_max_error = 0.0;
  double kl_base = 0.0;
  double kl_diag_plugin = 0.0;
  double kl_trained_plugin = -1.0;  // -1 when the reweighter was not trained
  TransitionMatrix transition;
  TransitionEstimate estimate;
};

// Seeded tiny instances for the minimizer-equivalence battery: random p*,
// random diagonally dominant T, |V| cycling through 2..4.
inline std::pair<std::vector<ProbVector>, TransitionMatrix> make_tiny_instance(uint64_t seed) {
  Rng rng(seed, "tiny_instance");
  const size_t v = 2 + rng.below(3);
  TransitionMatrix t = make_transition(TransitionKind::class_dependent, 0.35, v, rng.next_u64());
  const size_t contexts = 1 + rng.below(3);
  std::vector<ProbVector> p_star;
  for (size_t c = 0; c < contexts; ++c) {
    std::vector<double> w(v);
    for (double& x : w) x = 0.05 + rng.next_double();
    p_star.push_back(ProbVector::normalized(std::move(w)));
  }
  return {p_star, t};
}

// Oracle noisy predictor over a deterministic-conditional world: context id
// decides the clean next token; the model reports T^T onehot = the T row.
class OracleNoisyModel final : public LanguageModel {
 public:
  OracleNoisyModel(TransitionMatrix t, size_t num_contexts, uint64_t seed)
      : t_(std::move(t)), next_of_(num_contexts) {
    Rng rng(seed, "oracle_noisy");
    for (auto& n : next_of_) n = static_cast<int>(rng.below(t_.n));
  }

  int clean_next(size_t context_id) const { return next_of_[context_id]; }
  size_t num_contexts() const { return next_of_.size(); }
  size_t vocab_size() const override { return t_.n; }

  ProbVector next_token_probs(std::span<const int> context) const override {
    const size_t ctx = context.empty() ? 0 : static_cast<size_t>(context.back()) % next_of_.size();
    const size_t clean = static_cast<size_t>(next_of_[ctx]);
    std::vector<double> row(t_.rows.data() + clean * t_.n, t_.rows.data() + (clean + 1) * t_.n);
    return ProbVector(std::move(row));
  }

  void hash_params(Fnv64& h) const override {
    h.add_doubles(t_.rows.values());
    for (int n : next_of_) h.add_u64(static_cast<uint64_t>(n));
  }

 private:
  TransitionMatrix t_;
  std::vector<int> next_of_;
};

// A "hard-label" oracle: each query samples a noisy label from the true row
// and returns its one-hot, so the naive estimator behaves like a Monte-Carlo
// average with 1/sqrt(N) error.
class SampledNoisyModel final : public LanguageModel {
 public:
  SampledNoisyModel(TransitionMatrix t, size_t num_contexts, uint64_t seed)
      : t_(std::move(t)), next_of_(num_contexts), rng_(std::make_shared<Rng>(seed, "sampled_noisy")) {
    Rng init(seed, "oracle_noisy");
    for (auto& n : next_of_) n = static_cast<int>(init.below(t_.n));
  }

  int clean_next(size_t context_id) const { return next_of_[context_id]; }
  size_t num_contexts() const { return next_of_.size(); }
  size_t vocab_size() const override { return t_.n; }

  ProbVector next_token_probs(std::span<const int> context) const override {
    const size_t ctx = context.empty() ? 0 : static_cast<size_t>(context.back()) % next_of_.size();
    const size_t clean = static_cast<size_t>(next_of_[ctx]);
    std::span<const double> row(t_.rows.data() + clean * t_.n, t_.n);
    std::vector<double> onehot(t_.n, 0.0);
    onehot[rng_->categorical(row)] = 1.0;
    return ProbVector(std::move(onehot));
  }

  void hash_params(Fnv64& h) const override { h.add_doubles(t_.rows.values()); }

 private:
  TransitionMatrix t_;
  std::vector<int> next_of_;
  std::shared_ptr<Rng> rng_;  // draws are part of the oracle's behaviour
};

inline NoiseSimOutcome run_noise_sim(const NoiseSimSpec& spec, uint64_t seed) {
  NoiseSimOutcome out;

  // (a) minimizer-equivalence battery on tiny instances
  out.consistency_total = spec.consistency_instances;
  for (size_t i = 0; i < spec.consistency_instances; ++i) {
    auto [p_star, t] = make_tiny_instance(mix_stream(seed, i));
    ConsistencyReport rep = consistency_check(p_star, t, spec.grid_resolution);
    if (rep.consistent()) ++out.consistency_pass;
  }

  // (b) naive transition estimate against an oracle noisy model
  const size_t v = 3 + spec.world.content_tokens;
  out.transition = make_transition(spec.kind, spec.strength, v, spec.world.seed);
  {
    OracleNoisyModel oracle(out.transition, 64, seed);
    Rng rng(seed, "estimator_pairs");
    std::vector<std::pair<std::vector<int>, int>> pairs;
    pairs.reserve(spec.estimator_samples);
    for (size_t i = 0; i < spec.estimator_samples; ++i) {
      const int ctx = static_cast<int>(rng.below(oracle.num_contexts()));
      pairs.push_back({{ctx}, oracle.clean_next(static_cast<size_t>(ctx))});
    }
    out.estimate = estimate_transition(oracle, pairs);
    out.estimator_max_error = out.estimate.max_entry_error(out.transition);
  }

  // (c) diagonal reweighting against per-class noise: base fit on corrupted
  // data, corrected by the inverse of the estimated keep-probabilities.
  // Rows the estimator could not support fall back to no correction.
  {
    WorldModel world = WorldModel::make(spec.world);
    std::vector<std::vector<int>> corpus;
    Rng rng(seed, "noise_sim_corpus");
    corpus.reserve(spec.base_corpus_sequences);
    for (size_t i = 0; i < spec.base_corpus_sequences; ++i)
      corpus.push_back(world.sample_sequence(rng));
    std::vector<std::vector<int>> noisy =
        corrupt_corpus(corpus, out.transition, mix_stream(seed, hash_label("noise_sim")));
    for (auto& seq : noisy) {
      seq.insert(seq.begin(), Vocab::kBos);
      seq.push_back(Vocab::kEos);
    }
    auto base = std::make_shared<NGramModel>(
        fit_ngram(noisy, spec.base_order, spec.base_lambda, v));

    std::vector<Record> sample = world.sample_records(800, seed, "noise_sim_weights");
    std::vector<ContextProbe> probes = unigram_probes(sample);

    out.kl_base = mean_context_kl(world, *base, probes);
    std::vector<double> correction(v, 1.0);
    for (size_t i = 0; i < v; ++i)
      if (!out.estimate.flagged_uniform[i])
        correction[i] = 1.0 / std::min(std::max(out.estimate.t_hat.at(i, i), 0.05), 1.0);
    ConstantReweighter rw = diagonal_reweight_from_T(correction);
    PluginLM plugged(*base, rw);
    out.kl_diag_plugin = mean_context_kl(world, plugged, probes);

    if (spec.train_reweighter) {
      auto bb = std::make_shared<const BlackBox>(base);
      std::vector<Record> pool =
          world.sample_records(spec.adaptation_sequences, seed, "noise_sim_adapt");
      const size_t n_hyp = pool.size() * 2 / 5;
      std::vector<Record> hyperval(pool.end() - static_cast<long>(n_hyp), pool.end());
      std::vector<Record> train(pool.begin(), pool.end() - static_cast<long>(n_hyp));
      TrainedMethod tm = train_method(Method::plugin, bb, train, hyperval, spec.method, seed);
      out.kl_trained_plugin = mean_context_kl(world, tm.distribution(), probes);
    }
  }
  return out;
}

}  // namespace pluginlm
