#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "pluginlm/corpus.hpp"
#include "pluginlm/errors.hpp"
#include "pluginlm/language_model.hpp"
#include "pluginlm/plugin.hpp"
#include "pluginlm/prng.hpp"

namespace pluginlm {

struct DecodeConfig {
  size_t max_len = 32;
  int stop_token = Vocab::kEos;
  enum class Strategy { greedy, temperature, top_p } strategy = Strategy::greedy;
  double temperature = 1.0;
  double top_p = 1.0;
  uint64_t seed = 0;

  void validate() const {
    if (max_len < 1) throw BadStrategy("max_len must be >= 1");
    if (!(temperature > 0.0)) throw BadStrategy("temperature must be > 0");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw BadStrategy("top_p must lie in (0,1]");
  }
};

// One row of the optional per-step probability trace.
struct DecodeStep {
  size_t step;
  int token;
  double p_base;
  double p_reweight;
  double p_combined;
};

namespace detail {

// Restrict to the smallest descending-probability prefix with cumulative
// mass >= p; ties at the boundary keep every token of equal probability so
// the nucleus does not depend on sort stability.
inline std::vector<size_t> nucleus(const ProbVector& dist, double p) {
  std::vector<size_t> order(dist.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    if (dist[a] != dist[b]) return dist[a] > dist[b];
    return a < b;
  });
  double cum = 0.0;
  size_t cut = order.size();
  for (size_t i = 0; i < order.size(); ++i) {
    cum += dist[order[i]];
    if (cum >= p) {
      cut = i + 1;
      break;
    }
  }
  if (cut < order.size()) {
    const double boundary = dist[order[cut - 1]];
    while (cut < order.size() && dist[order[cut]] == boundary) ++cut;
  }
  order.resize(cut);
  return order;
}

// softmax(log p / tau) computed in log space so extreme temperatures stay
// finite; tau -> 0 degenerates to the argmax.
inline std::vector<double> tempered(std::span<const double> p, double tau) {
  std::vector<double> logw(p.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < p.size(); ++i) {
    logw[i] = std::log(std::max(p[i], kProbFloor)) / tau;
    mx = std::max(mx, logw[i]);
  }
  std::vector<double> w(p.size());
  for (size_t i = 0; i < p.size(); ++i) w[i] = std::exp(logw[i] - mx);
  return w;
}

inline int sample_from(const ProbVector& dist, const DecodeConfig& cfg, Rng& rng) {
  switch (cfg.strategy) {
    case DecodeConfig::Strategy::greedy:
      return static_cast<int>(dist.argmax());
    case DecodeConfig::Strategy::temperature: {
      return static_cast<int>(rng.categorical(tempered(dist.p, cfg.temperature)));
    }
    case DecodeConfig::Strategy::top_p: {
      std::vector<size_t> keep = nucleus(dist, cfg.top_p);
      std::vector<double> kept(keep.size());
      for (size_t i = 0; i < keep.size(); ++i) kept[i] = dist[keep[i]];
      return static_cast<int>(keep[rng.categorical(tempered(kept, cfg.temperature))]);
    }
  }
  throw BadStrategy("unknown decode strategy");
}

}  // namespace detail

// Core autoregressive loop over the combined distribution. `reweighter` may
// be null, which makes the reweighting factor uniform (the base alone).
// When the running context outgrows the model windows, only the most recent
// window-1 tokens are fed back in.
inline std::vector<int> decode_plugin(const LanguageModel& blackbox,
                                      const LanguageModel* reweighter,
                                      std::span<const int> prompt, const DecodeConfig& cfg,
                                      std::vector<DecodeStep>* trace = nullptr) {
  cfg.validate();
  if (reweighter && reweighter->vocab_size() != blackbox.vocab_size())
    throw VocabMismatch(blackbox.vocab_size(), reweighter->vocab_size());
  size_t window = blackbox.context_window();
  if (reweighter) window = std::min(window, reweighter->context_window());
  if (window != static_cast<size_t>(-1) && prompt.size() > window)
    throw ContextTooLong(prompt.size(), window);

  Rng rng(cfg.seed, "decode");
  std::vector<int> context(prompt.begin(), prompt.end());
  std::vector<int> generated;
  const ProbVector uniform = ProbVector::uniform(blackbox.vocab_size());

  for (size_t step = 0; step < cfg.max_len; ++step) {
    std::span<const int> ctx(context);
    if (window != static_cast<size_t>(-1) && ctx.size() >= window)
      ctx = ctx.subspan(ctx.size() - (window - 1));
    ProbVector b = blackbox.next_token_probs(ctx);
    ProbVector r = reweighter ? reweighter->next_token_probs(ctx) : uniform;
    ProbVector p = combine(b, r);
    int tok = detail::sample_from(p, cfg, rng);
    if (trace)
      trace->push_back({step, tok, b[static_cast<size_t>(tok)], r[static_cast<size_t>(tok)],
                        p[static_cast<size_t>(tok)]});
    generated.push_back(tok);
    context.push_back(tok);
    if (tok == cfg.stop_token) break;
  }
  return generated;
}

inline std::vector<int> greedy_decode(const LanguageModel& blackbox,
                                      const LanguageModel& reweighter,
                                      std::span<const int> prompt, DecodeConfig cfg,
                                      std::vector<DecodeStep>* trace = nullptr) {
  cfg.strategy = DecodeConfig::Strategy::greedy;
  return decode_plugin(blackbox, &reweighter, prompt, cfg, trace);
}

inline std::vector<int> sample_decode(const LanguageModel& blackbox,
                                      const LanguageModel& reweighter,
                                      std::span<const int> prompt, const DecodeConfig& cfg,
                                      std::vector<DecodeStep>* trace = nullptr) {
  if (cfg.strategy == DecodeConfig::Strategy::greedy)
    throw BadStrategy("sample_decode requires temperature or top_p strategy");
  return decode_plugin(blackbox, &reweighter, prompt, cfg, trace);
}

// Zeroshot: the base generates on its own (uniform reweighting factor).
inline std::vector<int> decode_base(const LanguageModel& blackbox, std::span<const int> prompt,
                                    const DecodeConfig& cfg,
                                    std::vector<DecodeStep>* trace = nullptr) {
  return decode_plugin(blackbox, nullptr, prompt, cfg, trace);
}

}  // namespace pluginlm
