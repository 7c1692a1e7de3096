#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <memory>

#include "pluginlm/language_model.hpp"
#include "pluginlm/ngram.hpp"
#include "pluginlm/transformer.hpp"

using namespace pluginlm;

namespace {

// Independent count-and-smooth oracle: scans the corpus for every query
// instead of building tables, replicating the backoff rule from scratch.
ProbVector ngram_oracle(const std::vector<std::vector<int>>& corpus, int order, double lambda,
                        size_t vocab, std::span<const int> context) {
  for (int k = std::min<int>(order - 1, static_cast<int>(context.size())); k >= 0; --k) {
    const std::vector<int> suffix(context.end() - k, context.end());
    size_t ctx_count = 0;
    std::vector<size_t> tok_count(vocab, 0);
    for (const auto& seq : corpus) {
      for (size_t i = static_cast<size_t>(k); i < seq.size(); ++i) {
        bool match = true;
        for (int j = 0; j < k; ++j)
          if (seq[i - static_cast<size_t>(k) + static_cast<size_t>(j)] != suffix[static_cast<size_t>(j)])
            match = false;
        if (!match) continue;
        ++ctx_count;
        ++tok_count[static_cast<size_t>(seq[i])];
      }
    }
    if (ctx_count == 0) continue;
    std::vector<double> p(vocab);
    const double denom = static_cast<double>(ctx_count) + lambda * static_cast<double>(vocab);
    for (size_t t = 0; t < vocab; ++t)
      p[t] = (static_cast<double>(tok_count[t]) + lambda) / denom;
    return ProbVector(std::move(p));
  }
  return ProbVector::uniform(vocab);
}

TransformerConfig tiny_config(size_t vocab = 7) {
  TransformerConfig cfg;
  cfg.vocab_size = vocab;
  cfg.num_blocks = 1;
  cfg.embed_dim = 16;
  cfg.num_heads = 2;
  cfg.ff_dim = 24;
  cfg.context_window = 10;
  return cfg;
}

}  // namespace

TEST_CASE("fit_ngram add-lambda counts match the hand example") {
  // corpus "a b a b" with ids a=3, b=4 over |V|=5
  std::vector<std::vector<int>> corpus = {{3, 4, 3, 4}};
  NGramModel m = fit_ngram(corpus, 2, 1.0, 5);
  ProbVector p = m.next_token_probs(std::vector<int>{3});
  REQUIRE(p[4] == Catch::Approx(3.0 / 7.0).epsilon(1e-12));
  REQUIRE(p.valid());
}

TEST_CASE("huge smoothing lambda drives probabilities to uniform") {
  std::vector<std::vector<int>> corpus = {{3, 4, 3, 4}};
  NGramModel m = fit_ngram(corpus, 2, 1e9, 5);
  ProbVector p = m.next_token_probs(std::vector<int>{3});
  for (size_t i = 0; i < 5; ++i) REQUIRE(p[i] == Catch::Approx(0.2).epsilon(1e-6));
}

TEST_CASE("unseen context falls back to the unigram distribution") {
  std::vector<std::vector<int>> corpus = {{3, 4, 3, 4}};
  NGramModel m = fit_ngram(corpus, 2, 1.0, 5);
  // context id 2 (<unk>) never appears; unigram: a,b twice each of 4 tokens
  ProbVector p = m.next_token_probs(std::vector<int>{2});
  REQUIRE(p[3] == Catch::Approx(3.0 / 9.0));
  REQUIRE(p[4] == Catch::Approx(3.0 / 9.0));
  REQUIRE(p[0] == Catch::Approx(1.0 / 9.0));
}

TEST_CASE("fit_ngram rejects empty corpora") {
  REQUIRE_THROWS_AS(fit_ngram({}, 2, 1.0, 5), EmptyCorpus);
  REQUIRE_THROWS_AS(fit_ngram({{}}, 2, 1.0, 5), EmptyCorpus);
}

TEST_CASE("ngram matches brute-force oracle on random corpora") {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed, "ngram_prop");
    const size_t vocab = 6;
    std::vector<std::vector<int>> corpus;
    size_t total = 0;
    while (total < 150) {
      std::vector<int> seq;
      size_t len = 3 + rng.below(12);
      for (size_t i = 0; i < len; ++i) seq.push_back(static_cast<int>(3 + rng.below(vocab - 3)));
      total += len;
      corpus.push_back(seq);
    }
    const int order = 1 + static_cast<int>(rng.below(3));
    const double lambda = 0.25 + rng.next_double();
    NGramModel m = fit_ngram(corpus, order, lambda, vocab);
    for (int q = 0; q < 25; ++q) {
      std::vector<int> ctx;
      size_t clen = rng.below(4);
      for (size_t i = 0; i < clen; ++i) ctx.push_back(static_cast<int>(3 + rng.below(vocab - 3)));
      ProbVector got = m.next_token_probs(ctx);
      ProbVector want = ngram_oracle(corpus, order, lambda, vocab, ctx);
      REQUIRE(got.valid());
      for (size_t i = 0; i < vocab; ++i)
        REQUIRE(got[i] == Catch::Approx(want[i]).margin(1e-12));
    }
  }
}

TEST_CASE("ngram next_token_probs peaks at the continuation seen in data") {
  std::vector<std::vector<int>> corpus = {{3, 4, 3, 4}};
  NGramModel m = fit_ngram(corpus, 2, 0.5, 5);
  ProbVector p = m.next_token_probs(std::vector<int>{3});
  REQUIRE(p.argmax() == 4);
}

TEST_CASE("init_transformer accepts the reference configuration") {
  TransformerConfig cfg;
  cfg.vocab_size = 11;
  cfg.num_blocks = 1;
  cfg.embed_dim = 256;
  cfg.ff_dim = 1024;
  cfg.num_heads = 1;
  cfg.context_window = 8;
  TinyTransformer m(cfg, 3);
  REQUIRE(m.params().size() > 0);
}

TEST_CASE("init_transformer is deterministic under the seed") {
  auto cfg = tiny_config();
  TinyTransformer a(cfg, 42), b(cfg, 42), c(cfg, 43);
  REQUIRE(a.param_digest() == b.param_digest());
  REQUIRE(a.param_digest() != c.param_digest());
}

TEST_CASE("init_transformer rejects non-dividing heads and bad blocks") {
  auto cfg = tiny_config();
  cfg.embed_dim = 256;
  cfg.num_heads = 3;
  REQUIRE_THROWS_AS(TinyTransformer(cfg, 0), BadConfig);
  cfg = tiny_config();
  cfg.num_blocks = 0;
  REQUIRE_THROWS_AS(TinyTransformer(cfg, 0), BadConfig);
  cfg = tiny_config();
  cfg.num_blocks = 13;
  REQUIRE_THROWS_AS(TinyTransformer(cfg, 0), BadConfig);
}

TEST_CASE("fresh transformers emit near-uniform distributions") {
  // statistical check across 20 seeds at init scale 0.02
  for (uint64_t seed = 0; seed < 20; ++seed) {
    TinyTransformer m(tiny_config(), seed);
    std::vector<int> ctx = {3, 4, 5};
    ProbVector p = m.next_token_probs(ctx);
    REQUIRE(p.valid());
    double mx = 0.0, mn = 1.0;
    for (size_t i = 0; i < p.size(); ++i) {
      mx = std::max(mx, p[i]);
      mn = std::min(mn, p[i]);
    }
    REQUIRE(mx / mn < 3.0);
  }
}

TEST_CASE("transformer rejects overlong contexts") {
  TinyTransformer m(tiny_config(), 0);
  std::vector<int> ctx(m.context_window() + 1, 3);
  REQUIRE_THROWS_AS(m.next_token_probs(ctx), ContextTooLong);
}

TEST_CASE("teacher-forced fast path equals prefix-wise next_token_probs") {
  TinyTransformer m(tiny_config(), 5);
  Rng rng(6);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<int> tokens;
    size_t len = 1 + rng.below(8);
    for (size_t i = 0; i < len; ++i) tokens.push_back(static_cast<int>(rng.below(7)));
    auto fast = m.teacher_forced_probs(tokens);
    REQUIRE(fast.size() == tokens.size());
    for (size_t i = 0; i < tokens.size(); ++i) {
      ProbVector slow = m.next_token_probs(std::span<const int>(tokens).subspan(0, i));
      for (size_t j = 0; j < slow.size(); ++j)
        REQUIRE(fast[i][j] == Catch::Approx(slow[j]).margin(1e-12));
    }
  }
}

TEST_CASE("sequence_probs of a single token is the BOS-conditioned row") {
  TinyTransformer m(tiny_config(), 5);
  std::vector<int> one = {4};
  auto probs = sequence_probs(m, one);
  REQUIRE(probs.size() == 1);
  ProbVector direct = m.next_token_probs(std::span<const int>{});
  for (size_t j = 0; j < direct.size(); ++j)
    REQUIRE(probs[0][j] == Catch::Approx(direct[j]).margin(1e-12));
}

TEST_CASE("sequence_probs rejects empty input") {
  TinyTransformer m(tiny_config(), 5);
  REQUIRE_THROWS_AS(sequence_probs(m, std::span<const int>{}), EmptySequence);
}

TEST_CASE("causality: future tokens cannot influence earlier positions") {
  TinyTransformer m(tiny_config(), 9);
  std::vector<int> tokens = {3, 4, 5, 6, 3};
  auto base = m.teacher_forced_probs(tokens);
  for (size_t j = 2; j < tokens.size(); ++j) {
    std::vector<int> perturbed = tokens;
    perturbed[j] = (tokens[j] + 1) % 7;
    auto probs = m.teacher_forced_probs(perturbed);
    for (size_t i = 0; i <= j; ++i)
      for (size_t v = 0; v < 7; ++v)
        REQUIRE(probs[i][v] == Catch::Approx(base[i][v]).margin(1e-12));
  }
}

TEST_CASE("every model emits simplex rows") {
  TinyTransformer tr(tiny_config(), 1);
  NGramModel ng = fit_ngram({{3, 4, 5, 3, 4}}, 2, 0.5, 7);
  Rng rng(17);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<int> ctx;
    size_t len = rng.below(6);
    for (size_t i = 0; i < len; ++i) ctx.push_back(static_cast<int>(rng.below(7)));
    REQUIRE(tr.next_token_probs(ctx).valid());
    REQUIRE(ng.next_token_probs(ctx).valid());
  }
}

TEST_CASE("freeze exposes identical behaviour for ngram and transformer") {
  auto ng = std::make_shared<NGramModel>(fit_ngram({{3, 4, 5, 3, 4}}, 2, 0.5, 7));
  auto tr = std::make_shared<TinyTransformer>(tiny_config(), 2);
  BlackBox bb_ng = freeze(ng);
  BlackBox bb_tr = freeze(tr);
  std::vector<int> ctx = {3, 4};
  for (const auto* pair : {&bb_ng, &bb_tr}) {
    ProbVector p = pair->next_token_probs(ctx);
    REQUIRE(p.valid());
    REQUIRE(p.size() == 7);
  }
  REQUIRE(bb_ng.frozen_digest() == ng->param_digest());
  REQUIRE(bb_tr.frozen_digest() == tr->param_digest());
  REQUIRE(bb_ng.digest_intact());
  REQUIRE(bb_tr.digest_intact());
}

TEST_CASE("transformer checkpoints round-trip bit-exactly") {
  TinyTransformer m(tiny_config(), 77);
  const std::string path = "ckpt_test.bin";
  m.save(path, 0xabcdef);
  uint64_t vocab_digest = 0;
  TinyTransformer loaded = TinyTransformer::load(path, &vocab_digest);
  REQUIRE(vocab_digest == 0xabcdef);
  REQUIRE(loaded.param_digest() == m.param_digest());
  std::vector<int> ctx = {3, 4, 5};
  ProbVector a = m.next_token_probs(ctx);
  ProbVector b = loaded.next_token_probs(ctx);
  for (size_t i = 0; i < a.size(); ++i) REQUIRE(a[i] == b[i]);
  std::remove(path.c_str());
}

TEST_CASE("ngram checkpoints round-trip") {
  NGramModel m = fit_ngram({{3, 4, 5, 3, 4, 3}}, 3, 0.75, 7);
  const std::string path = "ngram_test.json";
  m.save(path);
  NGramModel loaded = NGramModel::load(path);
  REQUIRE(loaded.param_digest() == m.param_digest());
  std::remove(path.c_str());
}
