#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <future>
#include <limits>
#include <span>
#include <utility>
#include <vector>

#include "pluginlm/autodiff.hpp"
#include "pluginlm/errors.hpp"
#include "pluginlm/language_model.hpp"
#include "pluginlm/prng.hpp"

namespace pluginlm {

enum class TransitionKind { identity, symmetric_flip, class_dependent, diagonal_param };

// Row-stochastic matrix of label-flip probabilities; entry (i,j) is the
// probability that clean token i shows up as token j.
struct TransitionMatrix {
  TransitionKind kind = TransitionKind::identity;
  double strength = 0.0;
  size_t n = 0;
  Tensor rows;  // n x n

  double at(size_t i, size_t j) const { return rows.at(i, j); }

  bool row_stochastic(double tol = 1e-12) const {
    for (size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (size_t j = 0; j < n; ++j) {
        double v = at(i, j);
        if (v < 0.0 || v > 1.0) return false;
        s += v;
      }
      if (std::abs(s - 1.0) > tol) return false;
    }
    return true;
  }

  std::vector<double> diagonal() const {
    std::vector<double> d(n);
    for (size_t i = 0; i < n; ++i) d[i] = at(i, i);
    return d;
  }

  // Noisy marginal over labels: (T^T p).
  std::vector<double> apply_transpose(std::span<const double> p) const {
    if (p.size() != n) throw VocabMismatch(p.size(), n);
    std::vector<double> out(n, 0.0);
    for (size_t i = 0; i < n; ++i)
      for (size_t j = 0; j < n; ++j) out[j] += at(i, j) * p[i];
    return out;
  }
};

inline TransitionMatrix make_transition(TransitionKind kind, double strength, size_t vocab_size,
                                        uint64_t seed) {
  if (!(strength >= 0.0 && strength < 1.0)) throw BadStrength(strength);
  if (vocab_size < 2) throw BadConfig("transition matrix needs vocab_size >= 2");
  TransitionMatrix t;
  t.kind = kind;
  t.strength = strength;
  t.n = vocab_size;
  t.rows = Tensor({vocab_size, vocab_size});
  Rng rng(seed, "make_transition");
  const double off_count = static_cast<double>(vocab_size - 1);

  switch (kind) {
    case TransitionKind::identity:
      for (size_t i = 0; i < vocab_size; ++i) t.rows.at(i, i) = 1.0;
      break;
    case TransitionKind::symmetric_flip:
      for (size_t i = 0; i < vocab_size; ++i)
        for (size_t j = 0; j < vocab_size; ++j)
          t.rows.at(i, j) = (i == j) ? 1.0 - strength : strength / off_count;
      break;
    case TransitionKind::class_dependent:
      // random rows with guaranteed diagonal dominance: diag >= 1 - strength
      for (size_t i = 0; i < vocab_size; ++i) {
        const double diag = 1.0 - strength * rng.next_double();
        std::vector<double> w(vocab_size, 0.0);
        double wsum = 0.0;
        for (size_t j = 0; j < vocab_size; ++j) {
          if (j == i) continue;
          w[j] = 0.05 + rng.next_double();
          wsum += w[j];
        }
        double rowsum = diag;
        t.rows.at(i, i) = diag;
        for (size_t j = 0; j < vocab_size; ++j) {
          if (j == i) continue;
          t.rows.at(i, j) = (1.0 - diag) * w[j] / wsum;
          rowsum += t.rows.at(i, j);
        }
        for (size_t j = 0; j < vocab_size; ++j) t.rows.at(i, j) /= rowsum;
      }
      break;
    case TransitionKind::diagonal_param:
      // class-independent flips with a per-class keep probability: the
      // off-diagonal mass spreads uniformly, so the matrix is summarized by
      // its diagonal.
      for (size_t i = 0; i < vocab_size; ++i) {
        const double keep = 1.0 - strength * rng.next_double();
        for (size_t j = 0; j < vocab_size; ++j)
          t.rows.at(i, j) = (i == j) ? keep : (1.0 - keep) / off_count;
      }
      break;
  }
  return t;
}

// Resamples every position independently from the row of its clean token.
inline std::vector<std::vector<int>> corrupt_corpus(const std::vector<std::vector<int>>& clean,
                                                    const TransitionMatrix& t, uint64_t seed) {
  Rng rng(seed, "corrupt_corpus");
  std::vector<std::vector<int>> noisy;
  noisy.reserve(clean.size());
  for (const auto& seq : clean) {
    std::vector<int> out;
    out.reserve(seq.size());
    for (int tok : seq) {
      if (tok < 0 || static_cast<size_t>(tok) >= t.n)
        throw VocabMismatch(t.n, static_cast<size_t>(tok < 0 ? 0 : tok) + 1);
      std::span<const double> row(t.rows.data() + static_cast<size_t>(tok) * t.n, t.n);
      out.push_back(static_cast<int>(rng.categorical(row)));
    }
    noisy.push_back(std::move(out));
  }
  return noisy;
}

// Forwardly-corrected cross entropy: -log((T^T b)[target]).
inline double forward_corrected_loss(const ProbVector& b, const TransitionMatrix& t, int target) {
  if (b.size() != t.n) throw VocabMismatch(b.size(), t.n);
  std::vector<double> corrected = t.apply_transpose(b.p);
  return -std::log(std::max(corrected[static_cast<size_t>(target)], kProbFloor));
}

// Same loss on the tape; differentiable w.r.t. the producer of b_row. The
// transition matrix enters as a constant.
inline Tape::Id forward_corrected_loss_tape(Tape& tape, Tape::Id b_row,
                                            const TransitionMatrix& t, int target) {
  const Tensor& b = tape.value(b_row);
  if (b.numel() != t.n) throw VocabMismatch(b.numel(), t.n);
  if (b.rank() != 2 || b.rows() != 1)
    throw ShapeMismatch("forward_corrected_loss_tape", b.shape_str(), "(1x" + std::to_string(t.n) + ")");
  Tape::Id tmat = tape.constant(t.rows);
  Tape::Id corrected = tape.matmul(b_row, tmat);  // row vector times T == (T^T b)^T
  auto idx = std::make_shared<std::vector<int>>(std::vector<int>{target});
  return tape.scale(tape.sum(tape.pick(tape.log(corrected), idx)), -1.0);
}

// ---------------------------------------------------------------------------
// Minimizer-equivalence check (brute force)
// ---------------------------------------------------------------------------

struct ConsistencyReport {
  double grid_step = 0.0;
  bool non_identifiable = false;
  struct PerContext {
    std::vector<double> clean_argmin;
    std::vector<double> corrected_argmin;
    double distance = 0.0;
  };
  std::vector<PerContext> contexts;
  double max_distance = 0.0;

  bool consistent() const { return !non_identifiable && max_distance <= grid_step + 1e-12; }
};

namespace detail {

inline bool has_full_rank(const TransitionMatrix& t, double tol = 1e-9) {
  // Gaussian elimination with partial pivoting on a copy.
  const size_t n = t.n;
  std::vector<double> a(t.rows.raw());
  for (size_t col = 0; col < n; ++col) {
    size_t piv = col;
    for (size_t r = col + 1; r < n; ++r)
      if (std::abs(a[r * n + col]) > std::abs(a[piv * n + col])) piv = r;
    if (std::abs(a[piv * n + col]) < tol) return false;
    if (piv != col)
      for (size_t j = 0; j < n; ++j) std::swap(a[piv * n + j], a[col * n + j]);
    for (size_t r = col + 1; r < n; ++r) {
      const double f = a[r * n + col] / a[col * n + col];
      for (size_t j = col; j < n; ++j) a[r * n + j] -= f * a[col * n + j];
    }
  }
  return true;
}

// Enumerates all points of the step-h simplex grid over `dim` coordinates and
// calls fn with each candidate distribution.
template <typename Fn>
void for_each_simplex_point(size_t dim, size_t ticks, Fn&& fn) {
  std::vector<double> q(dim, 0.0);
  std::vector<size_t> k(dim, 0);
  const double step = 1.0 / static_cast<double>(ticks);
  // iterative composition enumeration
  std::function<void(size_t, size_t)> rec = [&](size_t coord, size_t remaining) {
    if (coord == dim - 1) {
      k[coord] = remaining;
      for (size_t i = 0; i < dim; ++i) q[i] = static_cast<double>(k[i]) * step;
      fn(q);
      return;
    }
    for (size_t take = 0; take <= remaining; ++take) {
      k[coord] = take;
      rec(coord + 1, remaining - take);
    }
  };
  rec(0, ticks);
}

}  // namespace detail

// Exhaustive grid search over tabular conditionals: per context, the argmin
// of the expected forward-corrected loss under the noisy distribution T^T p*
// must coincide with the argmin of the plain cross entropy under p*.
inline ConsistencyReport consistency_check(const std::vector<ProbVector>& p_star,
                                           const TransitionMatrix& t, double grid_resolution) {
  if (p_star.empty()) throw EmptyData();
  if (t.n > 4) throw InstanceTooLarge("consistency_check handles |V| <= 4");
  if (p_star.size() > 3) throw InstanceTooLarge("consistency_check handles <= 3 contexts");
  for (const ProbVector& p : p_star)
    if (p.size() != t.n) throw VocabMismatch(p.size(), t.n);
  if (!(grid_resolution > 0.0 && grid_resolution <= 0.5))
    throw BadConfig("grid_resolution must lie in (0, 0.5]");

  ConsistencyReport report;
  report.grid_step = grid_resolution;
  report.non_identifiable = !detail::has_full_rank(t);

  const size_t ticks = static_cast<size_t>(std::llround(1.0 / grid_resolution));
  for (const ProbVector& p : p_star) {
    const std::vector<double> noisy = t.apply_transpose(p.p);
    ConsistencyReport::PerContext ctx;
    double best_clean = std::numeric_limits<double>::infinity();
    double best_corr = std::numeric_limits<double>::infinity();
    detail::for_each_simplex_point(t.n, ticks, [&](const std::vector<double>& q) {
      double clean = 0.0;
      for (size_t x = 0; x < t.n; ++x)
        clean -= p.p[x] * std::log(std::max(q[x], kProbFloor));
      if (clean < best_clean) {
        best_clean = clean;
        ctx.clean_argmin = q;
      }
      const std::vector<double> tq = t.apply_transpose(q);
      double corr = 0.0;
      for (size_t x = 0; x < t.n; ++x)
        corr -= noisy[x] * std::log(std::max(tq[x], kProbFloor));
      if (corr < best_corr) {
        best_corr = corr;
        ctx.corrected_argmin = q;
      }
    });
    for (size_t x = 0; x < t.n; ++x)
      ctx.distance = std::max(ctx.distance, std::abs(ctx.clean_argmin[x] - ctx.corrected_argmin[x]));
    report.max_distance = std::max(report.max_distance, ctx.distance);
    report.contexts.push_back(std::move(ctx));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Naive transition estimate
// ---------------------------------------------------------------------------

struct TransitionEstimate {
  Tensor t_hat;                        // n x n, rows on the simplex
  std::vector<size_t> support;         // samples per true class
  std::vector<uint8_t> flagged_uniform;  // rows with zero support

  double max_entry_error(const TransitionMatrix& truth, bool supported_only = true) const {
    double err = 0.0;
    for (size_t i = 0; i < truth.n; ++i) {
      if (supported_only && support[i] == 0) continue;
      for (size_t j = 0; j < truth.n; ++j)
        err = std::max(err, std::abs(t_hat.at(i, j) - truth.at(i, j)));
    }
    return err;
  }
};

// Row i averages the noisy model's predicted distribution over every clean
// sample whose true next token is i.
inline TransitionEstimate estimate_transition(
    const LanguageModel& blackbox_noisy,
    const std::vector<std::pair<std::vector<int>, int>>& clean_pairs) {
  if (clean_pairs.empty()) throw EmptyData();
  const size_t n = blackbox_noisy.vocab_size();
  TransitionEstimate est;
  est.t_hat = Tensor({n, n});
  est.support.assign(n, 0);
  est.flagged_uniform.assign(n, 0);
  for (const auto& [context, x_t] : clean_pairs) {
    if (x_t < 0 || static_cast<size_t>(x_t) >= n)
      throw VocabMismatch(n, static_cast<size_t>(x_t < 0 ? 0 : x_t) + 1);
    ProbVector b = blackbox_noisy.next_token_probs(context);
    const size_t i = static_cast<size_t>(x_t);
    ++est.support[i];
    for (size_t j = 0; j < n; ++j) est.t_hat.at(i, j) += b[j];
  }
  for (size_t i = 0; i < n; ++i) {
    if (est.support[i] == 0) {
      est.flagged_uniform[i] = 1;
      for (size_t j = 0; j < n; ++j) est.t_hat.at(i, j) = 1.0 / static_cast<double>(n);
      continue;
    }
    for (size_t j = 0; j < n; ++j) est.t_hat.at(i, j) /= static_cast<double>(est.support[i]);
  }
  return est;
}

// Context-independent reweighter: r is the supplied positive vector,
// normalized once.
class ConstantReweighter final : public LanguageModel {
 public:
  explicit ConstantReweighter(std::vector<double> weights) {
    for (double w : weights)
      if (!(w > 0.0)) throw NonPositive("reweighting vector entries must be positive");
    r_ = ProbVector::normalized(std::move(weights));
  }

  size_t vocab_size() const override { return r_.size(); }
  ProbVector next_token_probs(std::span<const int>) const override { return r_; }
  void hash_params(Fnv64& h) const override { h.add_doubles(r_.p); }

  const ProbVector& weights() const { return r_; }

 private:
  ProbVector r_;
};

inline ConstantReweighter diagonal_reweight_from_T(std::span<const double> t_diag) {
  return ConstantReweighter(std::vector<double>(t_diag.begin(), t_diag.end()));
}

// ---------------------------------------------------------------------------
// Sequential estimation decay experiment
// ---------------------------------------------------------------------------

// Logistic transition family: f(theta; token, history) = sigmoid(theta . phi)
// with phi = [1, a_token, a_token * mean(a over recent history)]. The
// reweighting vector is f normalized across tokens, and the sampler combines
// it with a fixed base conditional.
struct ThetaFamily {
  size_t vocab = 8;
  size_t history_window = 4;
  std::vector<double> token_feature;       // a_i, one per token
  Tensor base_rows;                        // vocab x vocab, row-stochastic
  std::vector<double> theta_star = {0.4, 0.9, -0.7};

  static constexpr int dim = 3;

  static ThetaFamily make(size_t vocab, uint64_t seed) {
    ThetaFamily fam;
    fam.vocab = vocab;
    Rng rng(seed, "theta_family");
    fam.token_feature.resize(vocab);
    for (double& a : fam.token_feature) a = -1.0 + 2.0 * rng.next_double();
    fam.base_rows = Tensor({vocab, vocab});
    for (size_t i = 0; i < vocab; ++i) {
      double s = 0.0;
      for (size_t j = 0; j < vocab; ++j) {
        double w = 0.2 + rng.next_double();
        fam.base_rows.at(i, j) = w;
        s += w;
      }
      for (size_t j = 0; j < vocab; ++j) fam.base_rows.at(i, j) /= s;
    }
    return fam;
  }

  std::array<double, 3> phi(size_t token, std::span<const int> history) const {
    double h = 0.0;
    const size_t take = std::min(history.size(), history_window);
    for (size_t k = history.size() - take; k < history.size(); ++k)
      h += token_feature[static_cast<size_t>(history[k])];
    if (take) h /= static_cast<double>(take);
    const double a = token_feature[token];
    return {1.0, a, a * h};
  }

  static double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

  double f(std::span<const double> theta, const std::array<double, 3>& phi_v) const {
    return sigmoid(theta[0] * phi_v[0] + theta[1] * phi_v[1] + theta[2] * phi_v[2]);
  }
};

struct DecayReport {
  std::vector<size_t> ts;
  std::vector<double> mean_excess;
  std::vector<double> std_excess;
  std::vector<double> sigma2;  // mean over trials of the sandwich norm at theta*
  std::vector<std::vector<double>> per_trial_excess;
  double slope = 0.0;
  double intercept = 0.0;
  size_t trials = 0;
  bool any_negative = false;
};

namespace detail {

struct Obs {
  std::array<double, 3> phi;
  double y;
};

inline void solve3(const std::array<double, 9>& a_in, const std::array<double, 3>& b_in,
                   std::array<double, 3>& x) {
  std::array<double, 9> a = a_in;
  std::array<double, 3> b = b_in;
  for (int col = 0; col < 3; ++col) {
    int piv = col;
    for (int r = col + 1; r < 3; ++r)
      if (std::abs(a[r * 3 + col]) > std::abs(a[piv * 3 + col])) piv = r;
    if (std::abs(a[piv * 3 + col]) < 1e-300) throw OptimizerDiverged("singular normal equations");
    if (piv != col) {
      for (int j = 0; j < 3; ++j) std::swap(a[piv * 3 + j], a[col * 3 + j]);
      std::swap(b[piv], b[col]);
    }
    for (int r = 0; r < 3; ++r) {
      if (r == col) continue;
      const double f = a[r * 3 + col] / a[col * 3 + col];
      for (int j = 0; j < 3; ++j) a[r * 3 + j] -= f * a[col * 3 + j];
      b[r] -= f * b[col];
    }
  }
  for (int i = 0; i < 3; ++i) x[i] = b[i] / a[i * 3 + i];
}

// Damped (Levenberg) Newton on the running sum of squared losses.
inline void refit_theta(std::vector<double>& theta, const std::vector<Obs>& data,
                        const ThetaFamily& fam, int max_iters, double grad_tol) {
  double mu = 1e-6;
  auto objective = [&](const std::vector<double>& th) {
    double s = 0.0;
    for (const Obs& o : data) {
      const double d = fam.f(th, o.phi) - o.y;
      s += d * d;
    }
    return s;
  };
  double cur = objective(theta);
  for (int iter = 0; iter < max_iters; ++iter) {
    std::array<double, 3> grad{0, 0, 0};
    std::array<double, 9> hess{0, 0, 0, 0, 0, 0, 0, 0, 0};
    for (const Obs& o : data) {
      const double z = theta[0] * o.phi[0] + theta[1] * o.phi[1] + theta[2] * o.phi[2];
      const double s = ThetaFamily::sigmoid(z);
      const double sp = s * (1.0 - s);
      const double spp = sp * (1.0 - 2.0 * s);
      const double resid = s - o.y;
      const double gw = 2.0 * resid * sp;
      const double hw = 2.0 * (sp * sp + resid * spp);
      for (int i = 0; i < 3; ++i) {
        grad[i] += gw * o.phi[i];
        for (int j = 0; j < 3; ++j) hess[i * 3 + j] += hw * o.phi[i] * o.phi[j];
      }
    }
    double gnorm = std::max({std::abs(grad[0]), std::abs(grad[1]), std::abs(grad[2])});
    if (gnorm < grad_tol) return;
    for (int attempt = 0; attempt < 40; ++attempt) {
      std::array<double, 9> damped = hess;
      for (int i = 0; i < 3; ++i) damped[i * 3 + i] += mu;
      std::array<double, 3> step;
      try {
        solve3(damped, grad, step);
      } catch (const OptimizerDiverged&) {
        mu *= 10.0;
        continue;
      }
      std::vector<double> cand = {theta[0] - step[0], theta[1] - step[1], theta[2] - step[2]};
      if (!std::isfinite(cand[0]) || !std::isfinite(cand[1]) || !std::isfinite(cand[2])) {
        mu *= 10.0;
        continue;
      }
      const double val = objective(cand);
      if (val <= cur) {
        theta = std::move(cand);
        cur = val;
        mu = std::max(mu / 3.0, 1e-12);
        break;
      }
      mu *= 10.0;
      if (attempt == 39) return;  // fully damped; nothing improves
    }
    if (std::abs(theta[0]) + std::abs(theta[1]) + std::abs(theta[2]) > 1e4)
      throw OptimizerDiverged("theta norm exploded");
  }
}

struct TrialResult {
  std::vector<double> excess;       // aligned with the recording grid
  std::vector<double> sigma2;       // sandwich norm at theta*
};

}  // namespace detail

inline std::vector<size_t> decay_recording_grid(size_t t_max) {
  std::vector<size_t> ts;
  size_t t = 10;
  while (t <= t_max) {
    ts.push_back(t);
    size_t next = static_cast<size_t>(static_cast<double>(t) * 1.05);
    t = std::max(t + 1, next);
  }
  if (ts.empty() || ts.back() != t_max) ts.push_back(t_max);
  return ts;
}

struct DecayOptions {
  bool init_at_star = false;   // start the estimate at theta*
  bool noiseless = false;      // observe f(theta*) exactly instead of a Bernoulli draw
};

// Simulates the sequential protocol: sample a token from the combined
// distribution at the current estimate, observe the squared-loss response,
// refit by damped Newton, and record the exact conditional excess loss
//   L_t(theta_hat_t) - L_t(theta*)
//     = (1/t) sum_s sum_i p_s(i) (f(theta_hat_t; phi_si) - f(theta*; phi_si))^2,
// where the inner expectation enumerates the token draw at each step.
inline DecayReport theorem1_decay(const ThetaFamily& fam, size_t t_max, size_t trials,
                                  uint64_t seed, const DecayOptions& options = {}) {
  if (fam.token_feature.size() != fam.vocab || fam.theta_star.size() != 3)
    throw BadConfig("malformed ThetaFamily");

  // Identifiability probe: population Hessian at theta* over a short
  // simulated prefix must be positive definite.
  {
    Rng rng(seed, "identifiability");
    std::array<double, 9> h{};
    std::vector<int> hist = {0};
    for (int s = 0; s < 256; ++s) {
      std::span<const int> hs(hist);
      for (size_t i = 0; i < fam.vocab; ++i) {
        auto phi = fam.phi(i, hs);
        const double fv = fam.f(fam.theta_star, phi);
        const double sp = fv * (1.0 - fv);
        for (int a = 0; a < 3; ++a)
          for (int b = 0; b < 3; ++b)
            h[a * 3 + b] += 2.0 * sp * sp * phi[a] * phi[b] / fam.vocab;
      }
      hist.push_back(static_cast<int>(rng.below(fam.vocab)));
    }
    // smallest eigenvalue via det-based leading minors (3x3, symmetric PD test)
    const double m1 = h[0];
    const double m2 = h[0] * h[4] - h[1] * h[3];
    const double m3 = h[0] * (h[4] * h[8] - h[5] * h[7]) - h[1] * (h[3] * h[8] - h[5] * h[6]) +
                      h[2] * (h[3] * h[7] - h[4] * h[6]);
    if (!(m1 > 1e-6 && m2 > 1e-9 && m3 > 1e-12))
      throw NonIdentifiable("population Hessian at theta* is not positive definite");
  }

  const std::vector<size_t> grid = decay_recording_grid(t_max);

  auto run_trial = [&](size_t trial) {
    Rng rng(seed, mix_stream(hash_label("decay_trial"), trial));
    std::vector<int> history = {static_cast<int>(rng.below(fam.vocab))};
    std::vector<detail::Obs> data;
    // per step: sampling probabilities and per-token features/fstar
    std::vector<std::vector<double>> p_steps;
    std::vector<std::vector<std::array<double, 3>>> phi_steps;
    std::vector<std::vector<double>> fstar_steps;
    std::vector<double> theta =
        options.init_at_star ? fam.theta_star : std::vector<double>{0.0, 0.0, 0.0};

    detail::TrialResult result;
    size_t next_record = 0;

    for (size_t t = 1; t <= t_max; ++t) {
      std::span<const int> hist(history);
      const int last = history.back();
      std::vector<std::array<double, 3>> phis(fam.vocab);
      std::vector<double> fhat(fam.vocab), fstar(fam.vocab);
      double fsum = 0.0;
      for (size_t i = 0; i < fam.vocab; ++i) {
        phis[i] = fam.phi(i, hist);
        fhat[i] = fam.f(theta, phis[i]);
        fstar[i] = fam.f(fam.theta_star, phis[i]);
        fsum += fhat[i];
      }
      // p = base row (x) normalized f, renormalized
      std::vector<double> p(fam.vocab);
      double psum = 0.0;
      for (size_t i = 0; i < fam.vocab; ++i) {
        p[i] = fam.base_rows.at(static_cast<size_t>(last), i) * (fhat[i] / fsum);
        psum += p[i];
      }
      for (double& x : p) x /= psum;

      const size_t tok = rng.categorical(p);
      const double y =
          options.noiseless ? fstar[tok] : (rng.next_double() < fstar[tok] ? 1.0 : 0.0);
      data.push_back({phis[tok], y});
      history.push_back(static_cast<int>(tok));
      p_steps.push_back(p);
      phi_steps.push_back(std::move(phis));
      fstar_steps.push_back(std::move(fstar));

      // warm tracking update each step, full polish at recording points
      detail::refit_theta(theta, data, fam, 2, 1e-10 * static_cast<double>(t));

      if (next_record < grid.size() && t == grid[next_record]) {
        detail::refit_theta(theta, data, fam, 60, 1e-12 * static_cast<double>(t));
        double excess = 0.0;
        for (size_t s = 0; s < t; ++s)
          for (size_t i = 0; i < fam.vocab; ++i) {
            const double d = fam.f(theta, phi_steps[s][i]) - fstar_steps[s][i];
            excess += p_steps[s][i] * d * d;
          }
        excess /= static_cast<double>(t);
        result.excess.push_back(excess);

        // sigma^2 = 0.5 * ||grad Lhat_t(theta*)||^2 in the inverse-Hessian norm
        std::array<double, 3> g{0, 0, 0};
        std::array<double, 9> h{};
        for (size_t s = 0; s < t; ++s) {
          const detail::Obs& o = data[s];
          const double fv = fam.f(fam.theta_star, o.phi);
          const double sp = fv * (1.0 - fv);
          const double gw = 2.0 * (fv - o.y) * sp;
          for (int a = 0; a < 3; ++a) g[a] += gw * o.phi[a];
          for (size_t i = 0; i < fam.vocab; ++i) {
            const double fs = fstar_steps[s][i];
            const double sps = fs * (1.0 - fs);
            for (int a = 0; a < 3; ++a)
              for (int b = 0; b < 3; ++b)
                h[a * 3 + b] += 2.0 * p_steps[s][i] * sps * sps * phi_steps[s][i][a] *
                                phi_steps[s][i][b];
          }
        }
        const double td = static_cast<double>(t);
        for (auto& x : g) x /= td;
        for (auto& x : h) x /= td;
        std::array<double, 3> hinv_g;
        detail::solve3(h, g, hinv_g);
        result.sigma2.push_back(0.5 * (g[0] * hinv_g[0] + g[1] * hinv_g[1] + g[2] * hinv_g[2]));
        ++next_record;
      }
    }
    return result;
  };

  std::vector<detail::TrialResult> results(trials);
  {
    std::vector<std::future<detail::TrialResult>> futures;
    futures.reserve(trials);
    for (size_t trial = 0; trial < trials; ++trial)
      futures.push_back(std::async(std::launch::async, run_trial, trial));
    for (size_t trial = 0; trial < trials; ++trial) results[trial] = futures[trial].get();
  }

  DecayReport report;
  report.trials = trials;
  report.ts = grid;
  report.mean_excess.assign(grid.size(), 0.0);
  report.std_excess.assign(grid.size(), 0.0);
  report.sigma2.assign(grid.size(), 0.0);
  for (const auto& r : results) {
    report.per_trial_excess.push_back(r.excess);
    for (size_t k = 0; k < grid.size(); ++k) {
      report.mean_excess[k] += r.excess[k];
      report.sigma2[k] += r.sigma2[k];
    }
  }
  for (size_t k = 0; k < grid.size(); ++k) {
    report.mean_excess[k] /= static_cast<double>(trials);
    report.sigma2[k] /= static_cast<double>(trials);
    double var = 0.0;
    for (const auto& r : results) {
      const double d = r.excess[k] - report.mean_excess[k];
      var += d * d;
    }
    report.std_excess[k] = std::sqrt(var / static_cast<double>(trials));
    if (report.mean_excess[k] < 0.0) report.any_negative = true;
  }

  // log-log slope over t in [t_max/10, t_max]
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  size_t count = 0;
  for (size_t k = 0; k < grid.size(); ++k) {
    if (grid[k] * 10 < t_max) continue;
    const double x = std::log(static_cast<double>(grid[k]));
    const double y = std::log(std::max(report.mean_excess[k], 1e-300));
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
    ++count;
  }
  const double denom = static_cast<double>(count) * sxx - sx * sx;
  report.slope = (static_cast<double>(count) * sxy - sx * sy) / denom;
  report.intercept = (sy - report.slope * sx) / static_cast<double>(count);
  return report;
}

}  // namespace pluginlm
