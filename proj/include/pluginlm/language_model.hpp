#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "pluginlm/errors.hpp"
#include "pluginlm/prng.hpp"
#include "pluginlm/tensor.hpp"

namespace pluginlm {

// A point on the |V|-1 simplex; the universal currency between models.
struct ProbVector {
  std::vector<double> p;

  ProbVector() = default;
  explicit ProbVector(std::vector<double> probs) : p(std::move(probs)) {}

  size_t size() const { return p.size(); }
  double operator[](size_t i) const { return p[i]; }

  bool valid(double tol = 1e-9) const {
    double s = 0.0;
    for (double x : p) {
      if (!(x >= 0.0) || !std::isfinite(x)) return false;
      s += x;
    }
    return std::abs(s - 1.0) <= tol;
  }

  // Lowest index wins ties, so decoding is deterministic.
  size_t argmax() const {
    size_t best = 0;
    for (size_t i = 1; i < p.size(); ++i)
      if (p[i] > p[best]) best = i;
    return best;
  }

  static ProbVector uniform(size_t n) {
    return ProbVector(std::vector<double>(n, 1.0 / static_cast<double>(n)));
  }

  static ProbVector normalized(std::vector<double> weights) {
    double s = 0.0;
    for (double w : weights) s += w;
    for (double& w : weights) w /= s;
    return ProbVector(std::move(weights));
  }
};

// Anything that maps a token context to a next-token distribution.
class LanguageModel {
 public:
  virtual ~LanguageModel() = default;

  virtual size_t vocab_size() const = 0;
  virtual ProbVector next_token_probs(std::span<const int> context) const = 0;

  virtual std::vector<double> next_token_logits(std::span<const int> context) const {
    ProbVector pv = next_token_probs(context);
    std::vector<double> logits(pv.size());
    for (size_t i = 0; i < pv.size(); ++i) logits[i] = std::log(std::max(pv[i], 1e-300));
    return logits;
  }

  // Maximum context length accepted by next_token_probs; SIZE_MAX = unbounded.
  virtual size_t context_window() const { return static_cast<size_t>(-1); }

  // Teacher forcing: position i holds the distribution for tokens[i] given
  // tokens[0..i). The default is one next_token_probs call per prefix;
  // models may override with a single-pass equivalent.
  virtual std::vector<ProbVector> teacher_forced_probs(std::span<const int> tokens) const {
    if (tokens.empty()) throw EmptySequence();
    std::vector<ProbVector> out;
    out.reserve(tokens.size());
    for (size_t i = 0; i < tokens.size(); ++i)
      out.push_back(next_token_probs(tokens.subspan(0, i)));
    return out;
  }

  // Content digest over everything that determines the model's outputs.
  virtual void hash_params(Fnv64& h) const = 0;

  uint64_t param_digest() const {
    Fnv64 h;
    hash_params(h);
    return h.value();
  }
};

inline std::vector<ProbVector> sequence_probs(const LanguageModel& model,
                                              std::span<const int> tokens) {
  return model.teacher_forced_probs(tokens);
}

// Frozen wrapper: only the probability interface is reachable, and the
// parameter digest taken at freeze time is the contract that nothing inside
// may change. Outputs enter any tape as constants.
class BlackBox final : public LanguageModel {
 public:
  explicit BlackBox(std::shared_ptr<const LanguageModel> inner)
      : inner_(std::move(inner)), frozen_digest_(inner_->param_digest()) {}

  uint64_t frozen_digest() const { return frozen_digest_; }
  uint64_t current_digest() const { return inner_->param_digest(); }
  bool digest_intact() const { return frozen_digest_ == current_digest(); }

  size_t vocab_size() const override { return inner_->vocab_size(); }
  ProbVector next_token_probs(std::span<const int> context) const override {
    return inner_->next_token_probs(context);
  }
  std::vector<double> next_token_logits(std::span<const int> context) const override {
    return inner_->next_token_logits(context);
  }
  std::vector<ProbVector> teacher_forced_probs(std::span<const int> tokens) const override {
    return inner_->teacher_forced_probs(tokens);
  }
  size_t context_window() const override { return inner_->context_window(); }
  void hash_params(Fnv64& h) const override { inner_->hash_params(h); }

 private:
  std::shared_ptr<const LanguageModel> inner_;
  uint64_t frozen_digest_;
};

inline BlackBox freeze(std::shared_ptr<const LanguageModel> model) {
  return BlackBox(std::move(model));
}

// Named parameter tensors in insertion order. Order is part of the digest
// and of the checkpoint layout.
struct ParamStore {
  std::vector<std::pair<std::string, Tensor>> items;

  Tensor& add(const std::string& name, Tensor t) {
    items.emplace_back(name, std::move(t));
    return items.back().second;
  }
  Tensor& find(const std::string& name) {
    for (auto& [n, t] : items)
      if (n == name) return t;
    throw Error("no parameter named " + name);
  }
  const Tensor& find(const std::string& name) const {
    return const_cast<ParamStore*>(this)->find(name);
  }
  size_t size() const { return items.size(); }

  std::vector<Tensor> snapshot() const {
    std::vector<Tensor> out;
    out.reserve(items.size());
    for (const auto& [n, t] : items) out.push_back(t);
    return out;
  }
  void restore(const std::vector<Tensor>& snap) {
    for (size_t i = 0; i < items.size(); ++i) items[i].second = snap[i];
  }

  void hash(Fnv64& h) const {
    for (const auto& [name, t] : items) {
      h.add_string(name);
      h.add_doubles(t.values());
    }
  }
};

}  // namespace pluginlm
