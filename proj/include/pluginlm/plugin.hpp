#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <span>
#include <vector>

#include "pluginlm/autodiff.hpp"
#include "pluginlm/corpus.hpp"
#include "pluginlm/errors.hpp"
#include "pluginlm/language_model.hpp"
#include "pluginlm/transformer.hpp"

namespace pluginlm {

// Combined token probability: normalized elementwise product of the base and
// reweighting distributions. Both factors are floored at 1e-12 first so the
// product can never be identically zero; the argmax of the output equals the
// argmax of the raw product.
inline ProbVector combine(std::span<const double> b, std::span<const double> r) {
  if (b.size() != r.size()) throw VocabMismatch(b.size(), r.size());
  std::vector<double> w(b.size());
  double s = 0.0;
  for (size_t i = 0; i < b.size(); ++i) {
    w[i] = std::max(b[i], kProbFloor) * std::max(r[i], kProbFloor);
    s += w[i];
  }
  for (double& x : w) x /= s;
  return ProbVector(std::move(w));
}

inline ProbVector combine(const ProbVector& b, const ProbVector& r) {
  return combine(std::span<const double>(b.p), std::span<const double>(r.p));
}

// Mean negative log probability of the targets, one term per position.
inline double sequence_loss(std::span<const ProbVector> p_seq, std::span<const int> targets) {
  if (p_seq.size() != targets.size()) throw LengthMismatch(p_seq.size(), targets.size());
  if (p_seq.empty()) throw EmptySequence();
  double s = 0.0;
  for (size_t i = 0; i < p_seq.size(); ++i)
    s -= std::log(std::max(p_seq[i][static_cast<size_t>(targets[i])], kProbFloor));
  return s / static_cast<double>(p_seq.size());
}

// Convex combination alpha*n + (1-alpha)*b; already on the simplex, no
// renormalization.
inline ProbVector weighted_comb(const ProbVector& n, const ProbVector& b, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw AlphaOutOfRange(alpha);
  if (n.size() != b.size()) throw VocabMismatch(n.size(), b.size());
  std::vector<double> p(n.size());
  for (size_t i = 0; i < n.size(); ++i) p[i] = alpha * n[i] + (1.0 - alpha) * b[i];
  return ProbVector(std::move(p));
}

// softmax(logits / tau), guarded against overflow.
inline ProbVector temperature_baseline(std::span<const double> logits, double tau) {
  if (!(tau > 0.0)) throw BadTemperature(tau);
  double mx = -std::numeric_limits<double>::infinity();
  for (double l : logits) mx = std::max(mx, l / tau);
  std::vector<double> p(logits.size());
  double s = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] / tau - mx);
    s += p[i];
  }
  for (double& x : p) x /= s;
  return ProbVector(std::move(p));
}

struct TrainConfig {
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  size_t batch_size = 16;
  int max_epochs = 30;
  double warmup_fraction = 0.1;  // of total optimizer steps
  int patience = 5;
  std::vector<double> grid_learning_rates;
  std::vector<double> grid_weight_decays;
  uint64_t seed = 0;
  bool loss_on_prompt = false;  // include prompt positions in the loss

  void validate() const {
    if (!(learning_rate > 0.0)) throw BadConfig("learning_rate must be > 0");
    if (patience < 1) throw BadConfig("patience must be >= 1");
    if (batch_size == 0) throw BadConfig("batch_size must be >= 1");
    if (max_epochs < 1) throw BadConfig("max_epochs must be >= 1");
    if (warmup_fraction < 0.0 || warmup_fraction >= 1.0)
      throw BadConfig("warmup_fraction must lie in [0,1)");
  }
};

struct TrainHistory {
  struct Row {
    int epoch;
    double train_loss;
    double hyperval_loss;
    bool is_best;
  };
  std::vector<Row> rows;
  int best_epoch = -1;
  bool stopped_early = false;
};

// Stops once the metric has failed to improve for `patience` consecutive
// observations; tracks the best epoch for checkpoint selection.
struct EarlyStopper {
  explicit EarlyStopper(int patience) : patience(patience) {}
  int patience;
  double best = std::numeric_limits<double>::infinity();
  int best_epoch = -1;
  int bad_streak = 0;

  // Returns true when training should halt after this epoch.
  bool observe(int epoch, double loss) {
    if (loss < best) {
      best = loss;
      best_epoch = epoch;
      bad_streak = 0;
      return false;
    }
    ++bad_streak;
    return bad_streak >= patience;
  }
  bool is_best(double loss) const { return loss < best; }
};

// Linear warmup to the base rate, then linear decay toward zero at
// `total_steps`. `step` counts from zero.
inline double lr_scale_at(size_t step, size_t total_steps, double warmup_fraction) {
  const size_t warmup = std::max<size_t>(
      1, static_cast<size_t>(std::llround(warmup_fraction * static_cast<double>(total_steps))));
  if (step < warmup)
    return static_cast<double>(step + 1) / static_cast<double>(warmup);
  if (total_steps <= warmup) return 1.0;
  return static_cast<double>(total_steps - step) / static_cast<double>(total_steps - warmup);
}

// Adam with decoupled weight decay.
class AdamW {
 public:
  AdamW(double lr, double weight_decay) : lr_(lr), wd_(weight_decay) {}

  void step(ParamStore& ps, const std::vector<const Tensor*>& grads, double scale) {
    if (m_.empty()) {
      for (const auto& [n, t] : ps.items) {
        m_.emplace_back(t.shape());
        v_.emplace_back(t.shape());
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    const double lr = lr_ * scale;
    for (size_t i = 0; i < ps.items.size(); ++i) {
      Tensor& p = ps.items[i].second;
      const Tensor& g = *grads[i];
      for (size_t e = 0; e < p.numel(); ++e) {
        double& m = m_[i][e];
        double& v = v_[i][e];
        m = beta1_ * m + (1.0 - beta1_) * g[e];
        v = beta2_ * v + (1.0 - beta2_) * g[e] * g[e];
        const double mhat = m / bc1;
        const double vhat = v / bc2;
        p[e] -= lr * (mhat / (std::sqrt(vhat) + eps_) + wd_ * p[e]);
      }
    }
  }

 private:
  double lr_, wd_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  std::vector<Tensor> m_, v_;
  size_t t_ = 0;
};

// A batch plus where its records came from, so scorers can cache
// per-record quantities (the frozen base's rows never change).
struct BatchRef {
  const std::vector<Record>* dataset = nullptr;
  std::vector<size_t> indices;
  TokenBatch tokens;
};

inline BatchRef make_batch_ref(const std::vector<Record>& dataset,
                               std::span<const size_t> indices, bool loss_on_prompt) {
  BatchRef ref;
  ref.dataset = &dataset;
  ref.indices.assign(indices.begin(), indices.end());
  std::vector<Record> gathered;
  gathered.reserve(indices.size());
  for (size_t i : indices) gathered.push_back(dataset[i]);
  ref.tokens = make_batch(gathered, loss_on_prompt);
  return ref;
}

// Anything the training loop can optimize: exposes trainable parameters and
// builds the per-position probability rows for a batch on a tape.
class SequenceScorer {
 public:
  virtual ~SequenceScorer() = default;
  virtual ParamStore& trainable_params() = 0;
  // Returns the id of a (rows x V) row-stochastic matrix. When leaf_ids is
  // non-null the parameters are registered as leaves (in store order).
  virtual Tape::Id batch_prob_rows(Tape& t, const BatchRef& batch,
                                   std::vector<Tape::Id>* leaf_ids) = 0;
  // Projection hook applied after each optimizer step.
  virtual void after_step() {}
};

// The plugin model: frozen base times trainable reweighter, renormalized per
// position (training-time view of the combined probability).
class PluginScorer : public SequenceScorer {
 public:
  PluginScorer(const BlackBox& blackbox, TinyTransformer& reweighter)
      : blackbox_(blackbox), reweighter_(reweighter) {
    if (blackbox.vocab_size() != reweighter.vocab_size())
      throw VocabMismatch(blackbox.vocab_size(), reweighter.vocab_size());
  }

  ParamStore& trainable_params() override { return reweighter_.params(); }

  Tape::Id batch_prob_rows(Tape& t, const BatchRef& batch,
                           std::vector<Tape::Id>* leaf_ids) override {
    Tape::Id r = reweighter_.batch_prob_rows(t, batch.tokens, leaf_ids);
    Tape::Id b = t.constant(base_rows(batch));
    Tape::Id prod = t.mul(t.clamp_min(b, kProbFloor), t.clamp_min(r, kProbFloor));
    return t.row_normalize(prod);
  }

 private:
  // (rows x V) teacher-forced rows of the frozen base, cached per record.
  // Padding rows are uniform; they are masked out of every loss.
  Tensor base_rows(const BatchRef& batch) {
    const size_t v = blackbox_.vocab_size();
    const size_t L = batch.tokens.max_len;
    Tensor rows({batch.tokens.num_seqs * L, v});
    const double unif = 1.0 / static_cast<double>(v);
    for (size_t s = 0; s < batch.tokens.num_seqs; ++s) {
      const Record& rec = (*batch.dataset)[batch.indices[s]];
      const std::vector<ProbVector>& pr = cached_rows(batch.dataset, batch.indices[s], rec);
      for (size_t j = 0; j < L; ++j) {
        double* out = rows.data() + (s * L + j) * v;
        if (j < pr.size()) {
          std::copy(pr[j].p.begin(), pr[j].p.end(), out);
        } else {
          std::fill(out, out + v, unif);
        }
      }
    }
    return rows;
  }

  const std::vector<ProbVector>& cached_rows(const std::vector<Record>* dataset, size_t index,
                                             const Record& rec) {
    auto& per_dataset = cache_[dataset];
    auto it = per_dataset.find(index);
    if (it != per_dataset.end()) return it->second;
    std::vector<int> full = rec.prompt;
    full.insert(full.end(), rec.target.begin(), rec.target.end());
    return per_dataset.emplace(index, blackbox_.teacher_forced_probs(full)).first->second;
  }

  const BlackBox& blackbox_;
  TinyTransformer& reweighter_;
  std::map<const std::vector<Record>*, std::map<size_t, std::vector<ProbVector>>> cache_;
};

// Baseline: a fresh model trained on the task data alone.
class NewModelScorer : public SequenceScorer {
 public:
  explicit NewModelScorer(TinyTransformer& model) : model_(model) {}
  ParamStore& trainable_params() override { return model_.params(); }
  Tape::Id batch_prob_rows(Tape& t, const BatchRef& batch,
                           std::vector<Tape::Id>* leaf_ids) override {
    return model_.batch_prob_rows(t, batch.tokens, leaf_ids);
  }

 private:
  TinyTransformer& model_;
};

// Baseline: a single trainable temperature uniformly scaling the frozen
// base's logits.
class TempScaleScorer : public SequenceScorer {
 public:
  explicit TempScaleScorer(const BlackBox& blackbox) : blackbox_(blackbox) {
    params_.add("tau", Tensor::scalar(1.0));
  }

  ParamStore& trainable_params() override { return params_; }
  double tau() const { return params_.items[0].second[0]; }

  Tape::Id batch_prob_rows(Tape& t, const BatchRef& batch,
                           std::vector<Tape::Id>* leaf_ids) override {
    std::vector<Tape::Id> pid(1);
    pid[0] = leaf_ids ? t.leaf(params_.items[0].second) : t.constant(params_.items[0].second);
    if (leaf_ids) *leaf_ids = pid;
    Tape::Id logits = t.constant(logit_rows(batch));
    return t.softmax(t.scale_by(logits, t.reciprocal(pid[0])));
  }

  void after_step() override {
    // keeps tau positive; the loss is undefined at tau <= 0
    double& tau = params_.items[0].second[0];
    tau = std::max(tau, 1e-4);
  }

 private:
  Tensor logit_rows(const BatchRef& batch) {
    const size_t v = blackbox_.vocab_size();
    const size_t L = batch.tokens.max_len;
    Tensor rows({batch.tokens.num_seqs * L, v});
    for (size_t s = 0; s < batch.tokens.num_seqs; ++s) {
      const Record& rec = (*batch.dataset)[batch.indices[s]];
      const std::vector<std::vector<double>>& lg = cached_logits(batch.dataset, batch.indices[s], rec);
      for (size_t j = 0; j < L; ++j) {
        double* out = rows.data() + (s * L + j) * v;
        if (j < lg.size())
          std::copy(lg[j].begin(), lg[j].end(), out);
        else
          std::fill(out, out + v, 0.0);
      }
    }
    return rows;
  }

  const std::vector<std::vector<double>>& cached_logits(const std::vector<Record>* dataset,
                                                        size_t index, const Record& rec) {
    auto& per_dataset = cache_[dataset];
    auto it = per_dataset.find(index);
    if (it != per_dataset.end()) return it->second;
    std::vector<int> full = rec.prompt;
    full.insert(full.end(), rec.target.begin(), rec.target.end());
    std::vector<ProbVector> pr = blackbox_.teacher_forced_probs(full);
    std::vector<std::vector<double>> logits;
    logits.reserve(pr.size());
    for (const ProbVector& p : pr) {
      std::vector<double> row(p.size());
      for (size_t i = 0; i < p.size(); ++i) row[i] = std::log(std::max(p[i], kProbFloor));
      logits.push_back(std::move(row));
    }
    return per_dataset.emplace(index, std::move(logits)).first->second;
  }

  const BlackBox& blackbox_;
  ParamStore params_;
  std::map<const std::vector<Record>*, std::map<size_t, std::vector<std::vector<double>>>> cache_;
};

namespace detail {
inline std::pair<double, size_t> batch_nll_terms(SequenceScorer& scorer, const BatchRef& batch,
                                                 Tape& t, Tape::Id probs) {
  const Tensor& m = t.value(probs);
  double sum = 0.0;
  size_t count = 0;
  for (size_t row = 0; row < batch.tokens.rows(); ++row) {
    if (!batch.tokens.loss_mask[row]) continue;
    sum -= std::log(std::max(m.at(row, static_cast<size_t>(batch.tokens.target[row])), kProbFloor));
    ++count;
  }
  (void)scorer;
  return {sum, count};
}
}  // namespace detail

// Token-mean negative log likelihood over a record set (no gradients).
inline double evaluate_nll(SequenceScorer& scorer, const std::vector<Record>& records,
                           size_t batch_size, bool loss_on_prompt = false) {
  if (records.empty()) throw EmptySplit("eval");
  double sum = 0.0;
  size_t count = 0;
  for (size_t start = 0; start < records.size(); start += batch_size) {
    const size_t n = std::min(batch_size, records.size() - start);
    std::vector<size_t> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = start + i;
    BatchRef batch = make_batch_ref(records, idx, loss_on_prompt);
    Tape t;
    Tape::Id probs = scorer.batch_prob_rows(t, batch, nullptr);
    auto [s, c] = detail::batch_nll_terms(scorer, batch, t, probs);
    sum += s;
    count += c;
  }
  return count ? sum / static_cast<double>(count) : 0.0;
}

// Shared epoch loop: shuffled batches, AdamW with warmup/linear-decay,
// early stopping on hyper-validation loss, best-epoch parameter selection.
inline TrainHistory train_loop(SequenceScorer& scorer, const std::vector<Record>& train,
                               const std::vector<Record>& hyperval, const TrainConfig& cfg) {
  cfg.validate();
  if (train.empty()) throw EmptySplit("train");
  if (hyperval.empty()) throw EmptySplit("hyperval");

  ParamStore& ps = scorer.trainable_params();
  AdamW opt(cfg.learning_rate, cfg.weight_decay);
  const size_t batches_per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
  const size_t total_steps = batches_per_epoch * static_cast<size_t>(cfg.max_epochs);

  EarlyStopper stopper(cfg.patience);
  std::vector<Tensor> best_snapshot = ps.snapshot();
  TrainHistory hist;
  size_t step = 0;

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    std::vector<size_t> order(train.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(cfg.seed, mix_stream(hash_label("epoch_order"), static_cast<uint64_t>(epoch)));
    rng.shuffle(order);

    double loss_sum = 0.0;
    size_t token_sum = 0;
    for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const size_t n = std::min(cfg.batch_size, order.size() - start);
      BatchRef batch = make_batch_ref(train, std::span<const size_t>(order).subspan(start, n),
                                      cfg.loss_on_prompt);
      const size_t tokens_in_loss = batch.tokens.loss_count();
      if (tokens_in_loss == 0) {
        ++step;
        continue;
      }

      Tape t;
      std::vector<Tape::Id> leaves;
      Tape::Id probs = scorer.batch_prob_rows(t, batch, &leaves);
      Tape::Id lp = t.log(probs);
      auto targets = std::make_shared<std::vector<int>>(batch.tokens.target);
      Tape::Id picked = t.pick(lp, targets);
      Tensor mask({batch.tokens.rows()});
      for (size_t i = 0; i < batch.tokens.rows(); ++i)
        mask[i] = batch.tokens.loss_mask[i] ? 1.0 : 0.0;
      Tape::Id loss =
          t.scale(t.sum(t.mul(picked, t.constant(std::move(mask)))),
                  -1.0 / static_cast<double>(tokens_in_loss));

      Tape::GradMap grads = t.backward(loss);
      std::vector<const Tensor*> ordered;
      ordered.reserve(leaves.size());
      for (Tape::Id l : leaves) ordered.push_back(&grads.at(l));
      opt.step(ps, ordered, lr_scale_at(step, total_steps, cfg.warmup_fraction));
      scorer.after_step();
      ++step;

      loss_sum += t.value(loss)[0] * static_cast<double>(tokens_in_loss);
      token_sum += tokens_in_loss;
    }

    const double train_loss = token_sum ? loss_sum / static_cast<double>(token_sum) : 0.0;
    const double hv_loss = evaluate_nll(scorer, hyperval, cfg.batch_size, cfg.loss_on_prompt);
    const bool is_best = stopper.is_best(hv_loss);
    if (is_best) best_snapshot = ps.snapshot();
    const bool halt = stopper.observe(epoch, hv_loss);
    hist.rows.push_back({epoch, train_loss, hv_loss, is_best});
    if (halt) {
      hist.stopped_early = true;
      break;
    }
  }

  ps.restore(best_snapshot);
  hist.best_epoch = stopper.best_epoch;
  return hist;
}

// Trains the reweighter against the frozen base (Algorithm: per batch,
// teacher-forced rows from both models, combined per position, loss over
// target positions). The reweighter is updated in place and ends at the
// best hyper-validation epoch.
inline TrainHistory train_plugin(const BlackBox& blackbox, TinyTransformer& reweighter,
                                 const std::vector<Record>& train,
                                 const std::vector<Record>& hyperval, const TrainConfig& cfg) {
  PluginScorer scorer(blackbox, reweighter);
  return train_loop(scorer, train, hyperval, cfg);
}

inline TrainHistory train_new_model(TinyTransformer& model, const std::vector<Record>& train,
                                    const std::vector<Record>& hyperval, const TrainConfig& cfg) {
  NewModelScorer scorer(model);
  return train_loop(scorer, train, hyperval, cfg);
}

// Fits the single temperature with the same loop; returns tau.
inline std::pair<double, TrainHistory> fit_temperature(const BlackBox& blackbox,
                                                       const std::vector<Record>& train,
                                                       const std::vector<Record>& hyperval,
                                                       const TrainConfig& cfg) {
  TempScaleScorer scorer(blackbox);
  TrainHistory hist = train_loop(scorer, train, hyperval, cfg);
  return {scorer.tau(), hist};
}

// The composite model as a LanguageModel: normalized b (x) r at every step.
class PluginLM final : public LanguageModel {
 public:
  PluginLM(const LanguageModel& base, const LanguageModel& reweighter)
      : base_(base), reweighter_(reweighter) {
    if (base.vocab_size() != reweighter.vocab_size())
      throw VocabMismatch(base.vocab_size(), reweighter.vocab_size());
  }

  size_t vocab_size() const override { return base_.vocab_size(); }
  size_t context_window() const override {
    return std::min(base_.context_window(), reweighter_.context_window());
  }
  ProbVector next_token_probs(std::span<const int> context) const override {
    return combine(base_.next_token_probs(context), reweighter_.next_token_probs(context));
  }
  std::vector<ProbVector> teacher_forced_probs(std::span<const int> tokens) const override {
    std::vector<ProbVector> b = base_.teacher_forced_probs(tokens);
    std::vector<ProbVector> r = reweighter_.teacher_forced_probs(tokens);
    std::vector<ProbVector> out;
    out.reserve(b.size());
    for (size_t i = 0; i < b.size(); ++i) out.push_back(combine(b[i], r[i]));
    return out;
  }
  void hash_params(Fnv64& h) const override {
    base_.hash_params(h);
    reweighter_.hash_params(h);
  }

 private:
  const LanguageModel& base_;
  const LanguageModel& reweighter_;
};

// WeightedComb baseline: alpha*n + (1-alpha)*b at every step.
class MixtureLM final : public LanguageModel {
 public:
  MixtureLM(const LanguageModel& new_model, const LanguageModel& base, double alpha)
      : n_(new_model), b_(base), alpha_(alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw AlphaOutOfRange(alpha);
    if (n_.vocab_size() != b_.vocab_size()) throw VocabMismatch(n_.vocab_size(), b_.vocab_size());
  }

  size_t vocab_size() const override { return b_.vocab_size(); }
  size_t context_window() const override {
    return std::min(n_.context_window(), b_.context_window());
  }
  ProbVector next_token_probs(std::span<const int> context) const override {
    return weighted_comb(n_.next_token_probs(context), b_.next_token_probs(context), alpha_);
  }
  std::vector<ProbVector> teacher_forced_probs(std::span<const int> tokens) const override {
    std::vector<ProbVector> n = n_.teacher_forced_probs(tokens);
    std::vector<ProbVector> b = b_.teacher_forced_probs(tokens);
    std::vector<ProbVector> out;
    out.reserve(b.size());
    for (size_t i = 0; i < b.size(); ++i) out.push_back(weighted_comb(n[i], b[i], alpha_));
    return out;
  }
  void hash_params(Fnv64& h) const override {
    h.add_double(alpha_);
    n_.hash_params(h);
    b_.hash_params(h);
  }
  double alpha() const { return alpha_; }

 private:
  const LanguageModel& n_;
  const LanguageModel& b_;
  double alpha_;
};

// Temperature baseline as a model: softmax(base logits / tau).
class TempScaledLM final : public LanguageModel {
 public:
  TempScaledLM(const LanguageModel& base, double tau) : base_(base), tau_(tau) {
    if (!(tau > 0.0)) throw BadTemperature(tau);
  }

  size_t vocab_size() const override { return base_.vocab_size(); }
  size_t context_window() const override { return base_.context_window(); }
  ProbVector next_token_probs(std::span<const int> context) const override {
    return temperature_baseline(base_.next_token_logits(context), tau_);
  }
  std::vector<ProbVector> teacher_forced_probs(std::span<const int> tokens) const override {
    std::vector<ProbVector> b = base_.teacher_forced_probs(tokens);
    std::vector<ProbVector> out;
    out.reserve(b.size());
    for (const ProbVector& row : b) {
      std::vector<double> logits(row.size());
      for (size_t i = 0; i < row.size(); ++i) logits[i] = std::log(std::max(row[i], kProbFloor));
      out.push_back(temperature_baseline(logits, tau_));
    }
    return out;
  }
  void hash_params(Fnv64& h) const override {
    h.add_double(tau_);
    base_.hash_params(h);
  }
  double tau() const { return tau_; }

 private:
  const LanguageModel& base_;
  double tau_;
};

// Teacher-forced token-mean NLL of an arbitrary model over records, loss on
// target positions only.
inline double model_nll(const LanguageModel& model, const std::vector<Record>& records) {
  if (records.empty()) throw EmptySplit("eval");
  double sum = 0.0;
  size_t count = 0;
  for (const Record& rec : records) {
    std::vector<int> full = rec.prompt;
    full.insert(full.end(), rec.target.begin(), rec.target.end());
    std::vector<ProbVector> rows = model.teacher_forced_probs(full);
    for (size_t i = rec.prompt.size(); i < full.size(); ++i) {
      sum -= std::log(std::max(rows[i][static_cast<size_t>(full[i])], kProbFloor));
      ++count;
    }
  }
  return sum / static_cast<double>(count);
}

struct CrossValResult {
  double learning_rate = 0.0;
  double weight_decay = 0.0;
  double hyperval_loss = std::numeric_limits<double>::infinity();
  TrainHistory history;
  std::unique_ptr<TinyTransformer> model;
  // (lr, wd, best hyperval loss) for every grid point, in evaluation order.
  std::vector<std::array<double, 3>> grid;
};

// One training run per grid point; minimum hyper-validation loss wins, ties
// broken toward the smaller learning rate then smaller weight decay.
inline CrossValResult cross_validate(
    const BlackBox& blackbox,
    const std::function<TinyTransformer(uint64_t seed)>& reweighter_factory, const Splits& splits,
    const TrainConfig& cfg) {
  if (cfg.grid_learning_rates.empty() || cfg.grid_weight_decays.empty()) throw EmptyGrid();
  std::vector<double> lrs = cfg.grid_learning_rates;
  std::vector<double> wds = cfg.grid_weight_decays;
  std::sort(lrs.begin(), lrs.end());
  std::sort(wds.begin(), wds.end());

  CrossValResult result;
  for (double lr : lrs) {
    for (double wd : wds) {
      TrainConfig point = cfg;
      point.learning_rate = lr;
      point.weight_decay = wd;
      auto model = std::make_unique<TinyTransformer>(reweighter_factory(cfg.seed));
      TrainHistory hist = train_plugin(blackbox, *model, splits.train, splits.hyperval, point);
      double loss = std::numeric_limits<double>::infinity();
      for (const auto& row : hist.rows)
        if (row.epoch == hist.best_epoch) loss = row.hyperval_loss;
      result.grid.push_back({lr, wd, loss});
      if (loss < result.hyperval_loss) {
        result.hyperval_loss = loss;
        result.learning_rate = lr;
        result.weight_decay = wd;
        result.history = hist;
        result.model = std::move(model);
      }
    }
  }
  return result;
}

}  // namespace pluginlm
