#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "pluginlm/decoding.hpp"
#include "pluginlm/experiment.hpp"
#include "pluginlm/ngram.hpp"
#include "pluginlm/noise.hpp"

using namespace pluginlm;

namespace {

// Fixed-distribution model used to force specific decoding behaviour.
class FixedLM final : public LanguageModel {
 public:
  explicit FixedLM(ProbVector p) : p_(std::move(p)) {}
  size_t vocab_size() const override { return p_.size(); }
  ProbVector next_token_probs(std::span<const int>) const override { return p_; }
  void hash_params(Fnv64& h) const override { h.add_doubles(p_.p); }

 private:
  ProbVector p_;
};

ProbVector onehotish(size_t n, size_t k, double mass = 0.97) {
  std::vector<double> p(n, (1.0 - mass) / static_cast<double>(n - 1));
  p[k] = mass;
  return ProbVector(std::move(p));
}

}  // namespace

TEST_CASE("greedy with a peaked reweighter emits that token until max_len") {
  FixedLM base(ProbVector::uniform(6));
  FixedLM rw(onehotish(6, 4));
  DecodeConfig cfg;
  cfg.max_len = 7;
  std::vector<int> out = greedy_decode(base, rw, std::vector<int>{3}, cfg);
  REQUIRE(out.size() == 7);
  for (int t : out) REQUIRE(t == 4);
}

TEST_CASE("uniform reweighter reproduces base decoding exactly") {
  WorldSpec ws;
  ws.content_tokens = 6;
  ws.prompt_tokens = 1;
  ws.min_len = 1;
  ws.seed = 4;
  WorldModel world = WorldModel::make(ws);
  FixedLM uniform_rw(ProbVector::uniform(world.vocab_size()));
  DecodeConfig cfg;
  cfg.max_len = 16;
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<int> prompt = {static_cast<int>(3 + rng.below(6))};
    std::vector<int> a = greedy_decode(world, uniform_rw, prompt, cfg);
    std::vector<int> b = decode_base(world, prompt, cfg);
    REQUIRE(a == b);
  }
}

TEST_CASE("greedy argmax equals argmax of the raw product at every step") {
  WorldSpec ws;
  ws.content_tokens = 8;
  ws.prompt_tokens = 1;
  ws.min_len = 1;
  ws.seed = 9;
  WorldModel world = WorldModel::make(ws);
  WorldSpec ws2 = ws;
  ws2.seed = 10;
  WorldModel other = WorldModel::make(ws2);

  DecodeConfig cfg;
  cfg.max_len = 12;
  std::vector<int> prompt = {5};
  std::vector<DecodeStep> trace;
  std::vector<int> out = greedy_decode(world, other, prompt, cfg, &trace);

  // replay: recompute the distributions along the emitted prefix
  std::vector<int> ctx = prompt;
  for (size_t i = 0; i < out.size(); ++i) {
    ProbVector b = world.next_token_probs(ctx);
    ProbVector r = other.next_token_probs(ctx);
    size_t raw_arg = 0;
    double best = -1.0;
    for (size_t v = 0; v < b.size(); ++v)
      if (b[v] * r[v] > best) {
        best = b[v] * r[v];
        raw_arg = v;
      }
    ProbVector p = combine(b, r);
    REQUIRE(p.argmax() == raw_arg);
    REQUIRE(out[i] == static_cast<int>(raw_arg));
    ctx.push_back(out[i]);
  }
  REQUIRE(trace.size() == out.size());
}

TEST_CASE("greedy decoding is deterministic") {
  WorldSpec ws;
  ws.content_tokens = 10;
  ws.prompt_tokens = 2;
  ws.seed = 12;
  WorldModel world = WorldModel::make(ws);
  DecodeConfig cfg;
  cfg.max_len = 20;
  std::vector<int> prompt = {4, 7};
  std::vector<int> a = decode_base(world, prompt, cfg);
  std::vector<int> b = decode_base(world, prompt, cfg);
  REQUIRE(a == b);
}

TEST_CASE("generation stops at the stop token and respects max_len") {
  WorldSpec ws;
  ws.content_tokens = 6;
  ws.prompt_tokens = 1;
  ws.min_len = 1;
  ws.eos_prob = 0.35;
  ws.seed = 3;
  WorldModel world = WorldModel::make(ws);
  DecodeConfig cfg;
  cfg.max_len = 30;
  cfg.strategy = DecodeConfig::Strategy::temperature;
  cfg.temperature = 1.0;
  for (uint64_t seed = 0; seed < 40; ++seed) {
    cfg.seed = seed;
    std::vector<int> out = decode_base(world, std::vector<int>{3}, cfg);
    REQUIRE(out.size() <= 30);
    for (size_t i = 0; i < out.size(); ++i) {
      if (out[i] == Vocab::kEos) REQUIRE(i == out.size() - 1);
    }
  }
}

TEST_CASE("near-zero temperature sampling agrees with greedy") {
  WorldSpec ws;
  ws.content_tokens = 12;
  ws.prompt_tokens = 1;
  ws.min_len = 1;
  ws.seed = 8;
  WorldModel world = WorldModel::make(ws);
  WorldSpec ws2 = ws;
  ws2.seed = 88;
  WorldModel rw = WorldModel::make(ws2);

  DecodeConfig greedy_cfg;
  greedy_cfg.max_len = 10;
  DecodeConfig cold = greedy_cfg;
  cold.strategy = DecodeConfig::Strategy::temperature;
  cold.temperature = 1e-6;

  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<int> prompt = {static_cast<int>(3 + rng.below(12))};
    cold.seed = rng.next_u64();
    REQUIRE(greedy_decode(world, rw, prompt, greedy_cfg) ==
            sample_decode(world, rw, prompt, cold));
  }
}

TEST_CASE("top_p = 1 samples from the full distribution deterministically per seed") {
  WorldSpec ws;
  ws.content_tokens = 8;
  ws.prompt_tokens = 1;
  ws.min_len = 1;
  ws.seed = 5;
  WorldModel world = WorldModel::make(ws);
  FixedLM rw(ProbVector::uniform(world.vocab_size()));
  DecodeConfig cfg;
  cfg.strategy = DecodeConfig::Strategy::top_p;
  cfg.top_p = 1.0;
  cfg.max_len = 15;
  cfg.seed = 77;
  std::vector<int> a = sample_decode(world, rw, std::vector<int>{4}, cfg);
  std::vector<int> b = sample_decode(world, rw, std::vector<int>{4}, cfg);
  REQUIRE(a == b);
}

TEST_CASE("nucleus property: samples stay inside the computed nucleus") {
  // distribution with known ordering
  ProbVector dist({0.02, 0.02, 0.06, 0.40, 0.30, 0.20});
  FixedLM base(dist);
  FixedLM rw(ProbVector::uniform(6));
  DecodeConfig cfg;
  cfg.strategy = DecodeConfig::Strategy::top_p;
  cfg.top_p = 0.65;
  cfg.max_len = 1;
  // nucleus: tokens 3 (0.4) + 4 (0.3) reach 0.70 >= 0.65
  std::set<int> nucleus = {3, 4};
  for (uint64_t seed = 0; seed < 200; ++seed) {
    cfg.seed = seed;
    std::vector<int> out = sample_decode(base, rw, std::vector<int>{0}, cfg);
    REQUIRE(nucleus.count(out[0]) == 1);
  }
}

TEST_CASE("nucleus keeps boundary ties") {
  ProbVector dist({0.4, 0.3, 0.3});
  std::vector<size_t> keep = detail::nucleus(dist, 0.5);
  // 0.4 + 0.3 reaches 0.7 >= 0.5; the trailing 0.3 ties the boundary token
  REQUIRE(keep.size() == 3);

  ProbVector dist2({0.5, 0.3, 0.2});
  std::vector<size_t> keep2 = detail::nucleus(dist2, 0.5);
  REQUIRE(keep2 == std::vector<size_t>{0});
}

TEST_CASE("nucleus mass reaches p before renormalization") {
  Rng rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    const size_t n = 3 + rng.below(8);
    std::vector<double> w(n);
    for (double& x : w) x = 0.01 + rng.next_double();
    ProbVector dist = ProbVector::normalized(std::move(w));
    const double p = 0.05 + 0.9 * rng.next_double();
    std::vector<size_t> keep = detail::nucleus(dist, p);
    double mass = 0.0;
    for (size_t k : keep) mass += dist[k];
    REQUIRE(mass >= p - 1e-12);
  }
}

TEST_CASE("sample_decode rejects a greedy strategy and bad parameters") {
  FixedLM base(ProbVector::uniform(4));
  FixedLM rw(ProbVector::uniform(4));
  DecodeConfig cfg;
  REQUIRE_THROWS_AS(sample_decode(base, rw, std::vector<int>{0}, cfg), BadStrategy);
  cfg.strategy = DecodeConfig::Strategy::top_p;
  cfg.top_p = 0.0;
  REQUIRE_THROWS_AS(sample_decode(base, rw, std::vector<int>{0}, cfg), BadStrategy);
  cfg.top_p = 0.9;
  cfg.temperature = 0.0;
  REQUIRE_THROWS_AS(sample_decode(base, rw, std::vector<int>{0}, cfg), BadStrategy);
}

TEST_CASE("context slides once generation outgrows the model window") {
  TransformerConfig arch;
  arch.vocab_size = 6;
  arch.num_blocks = 1;
  arch.embed_dim = 8;
  arch.num_heads = 1;
  arch.ff_dim = 16;
  arch.context_window = 5;
  TinyTransformer model(arch, 2);
  FixedLM rw(ProbVector::uniform(6));
  DecodeConfig cfg;
  cfg.max_len = 12;  // far beyond the window
  cfg.stop_token = -1;  // never stops early
  std::vector<int> out = greedy_decode(model, rw, std::vector<int>{3, 4}, cfg);
  REQUIRE(out.size() == 12);
  // prompts longer than the window are rejected outright
  std::vector<int> long_prompt(7, 3);
  REQUIRE_THROWS_AS(greedy_decode(model, rw, long_prompt, cfg), ContextTooLong);
}

TEST_CASE("per-step trace records the factor probabilities") {
  FixedLM base(ProbVector({0.7, 0.1, 0.2}));
  FixedLM rw(ProbVector({0.2, 0.2, 0.6}));
  DecodeConfig cfg;
  cfg.max_len = 3;
  cfg.stop_token = -1;
  std::vector<DecodeStep> trace;
  std::vector<int> out = greedy_decode(base, rw, std::vector<int>{0}, cfg, &trace);
  REQUIRE(trace.size() == 3);
  ProbVector combined = combine(base.next_token_probs({}), rw.next_token_probs({}));
  for (const DecodeStep& s : trace) {
    REQUIRE(s.token == out[s.step]);
    REQUIRE(s.p_base == Catch::Approx(0.7).margin(1e-12));
    REQUIRE(s.p_reweight == Catch::Approx(0.2).margin(1e-12));
    REQUIRE(s.p_combined == Catch::Approx(combined[0]).margin(1e-12));
  }
}
