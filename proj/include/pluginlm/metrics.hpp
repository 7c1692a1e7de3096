#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "pluginlm/errors.hpp"

namespace pluginlm {

using TokenSeq = std::vector<int>;

namespace ngrams {

using Counter = std::map<std::vector<int>, size_t>;

inline Counter count(std::span<const int> seq, size_t n) {
  Counter c;
  if (seq.size() >= n)
    for (size_t i = 0; i + n <= seq.size(); ++i)
      ++c[std::vector<int>(seq.begin() + i, seq.begin() + i + n)];
  return c;
}

}  // namespace ngrams

// Smoothed BLEU: clipped modified n-gram precision for n = 1..max_n with
// add-1 smoothing on orders that have zero matches, geometric mean, brevity
// penalty exp(1 - r/c) against the closest reference length.
inline double bleu(const TokenSeq& candidate, const std::vector<TokenSeq>& references,
                   size_t max_n = 4) {
  if (references.empty()) throw EmptyReferences();
  if (candidate.empty()) return 0.0;

  double log_prec_sum = 0.0;
  for (size_t n = 1; n <= max_n; ++n) {
    ngrams::Counter cand = ngrams::count(candidate, n);
    ngrams::Counter best_ref;
    for (const TokenSeq& ref : references) {
      ngrams::Counter rc = ngrams::count(ref, n);
      for (const auto& [gram, c] : rc) {
        size_t& cur = best_ref[gram];
        cur = std::max(cur, c);
      }
    }
    size_t total = 0, matched = 0;
    for (const auto& [gram, c] : cand) {
      total += c;
      auto it = best_ref.find(gram);
      if (it != best_ref.end()) matched += std::min(c, it->second);
    }
    double num = static_cast<double>(matched);
    double den = static_cast<double>(total);
    if (matched == 0) {
      num += 1.0;
      den += 1.0;
    }
    log_prec_sum += std::log(num / den);
  }
  const double geo = std::exp(log_prec_sum / static_cast<double>(max_n));

  // closest reference length; ties resolved toward the shorter reference
  const size_t c = candidate.size();
  size_t r = references[0].size();
  for (const TokenSeq& ref : references) {
    const size_t len = ref.size();
    const auto diff = [&](size_t a) {
      return a > c ? a - c : c - a;
    };
    if (diff(len) < diff(r) || (diff(len) == diff(r) && len < r)) r = len;
  }
  const double bp = c < r ? std::exp(1.0 - static_cast<double>(r) / static_cast<double>(c)) : 1.0;
  return bp * geo;
}

enum class RougeVariant { r1, r2, rl };

namespace detail {

inline size_t lcs_length(std::span<const int> a, std::span<const int> b) {
  std::vector<size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (size_t i = 1; i <= a.size(); ++i) {
    for (size_t j = 1; j <= b.size(); ++j) {
      if (a[i - 1] == b[j - 1])
        cur[j] = prev[j - 1] + 1;
      else
        cur[j] = std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline double f1(double matched, double cand_total, double ref_total) {
  if (cand_total == 0.0 || ref_total == 0.0) return 0.0;
  const double p = matched / cand_total;
  const double r = matched / ref_total;
  if (p + r == 0.0) return 0.0;
  return 2.0 * p * r / (p + r);
}

}  // namespace detail

struct PrfScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// Clipped unigram/bigram overlap, or LCS length for rouge-L.
inline PrfScore rouge_prf(const TokenSeq& candidate, const TokenSeq& reference,
                          RougeVariant variant) {
  if (reference.empty()) throw EmptyReference();
  double matched = 0.0, cand_total = 0.0, ref_total = 0.0;
  if (variant == RougeVariant::rl) {
    matched = static_cast<double>(detail::lcs_length(candidate, reference));
    cand_total = static_cast<double>(candidate.size());
    ref_total = static_cast<double>(reference.size());
  } else {
    const size_t n = variant == RougeVariant::r1 ? 1 : 2;
    ngrams::Counter cand = ngrams::count(candidate, n);
    ngrams::Counter ref = ngrams::count(reference, n);
    for (const auto& [g, c] : cand) cand_total += static_cast<double>(c);
    for (const auto& [g, c] : ref) ref_total += static_cast<double>(c);
    for (const auto& [g, c] : cand) {
      auto it = ref.find(g);
      if (it != ref.end()) matched += static_cast<double>(std::min(c, it->second));
    }
  }
  PrfScore s;
  s.precision = cand_total > 0.0 ? matched / cand_total : 0.0;
  s.recall = ref_total > 0.0 ? matched / ref_total : 0.0;
  s.f1 = detail::f1(matched, cand_total, ref_total);
  return s;
}

inline double rouge(const TokenSeq& candidate, const TokenSeq& reference, RougeVariant variant) {
  return rouge_prf(candidate, reference, variant).f1;
}

// NIST: information-weighted n-gram matches. info(w1..wn) =
// log2(count(w1..wn-1) / count(w1..wn)) over the reference corpus, with the
// empty prefix counting every token. Matches are clipped like BLEU. The
// brevity factor is exp(beta * log^2(min(c/r_mean, 1))) with beta chosen so
// the factor is 0.5 at c/r_mean = 2/3.
inline double nist(const TokenSeq& candidate, const std::vector<TokenSeq>& references,
                   size_t max_n = 5) {
  if (references.empty()) throw EmptyReferences();
  if (candidate.empty()) return 0.0;

  std::vector<ngrams::Counter> ref_counts(max_n + 1);
  size_t ref_tokens = 0;
  for (const TokenSeq& ref : references) {
    ref_tokens += ref.size();
    for (size_t n = 1; n <= max_n; ++n) {
      ngrams::Counter c = ngrams::count(ref, n);
      for (const auto& [g, k] : c) ref_counts[n][g] += k;
    }
  }
  if (ref_tokens == 0) return 0.0;

  auto info = [&](const std::vector<int>& gram) {
    auto it = ref_counts[gram.size()].find(gram);
    if (it == ref_counts[gram.size()].end()) return 0.0;
    double denom = static_cast<double>(it->second);
    double numer;
    if (gram.size() == 1) {
      numer = static_cast<double>(ref_tokens);
    } else {
      std::vector<int> prefix(gram.begin(), gram.end() - 1);
      auto pit = ref_counts[gram.size() - 1].find(prefix);
      numer = pit == ref_counts[gram.size() - 1].end() ? 0.0 : static_cast<double>(pit->second);
    }
    if (numer <= 0.0) return 0.0;
    return std::log2(numer / denom);
  };

  double score = 0.0;
  for (size_t n = 1; n <= max_n; ++n) {
    ngrams::Counter cand = ngrams::count(candidate, n);
    if (cand.empty()) continue;
    size_t cand_total = 0;
    double info_sum = 0.0;
    for (const auto& [g, c] : cand) {
      cand_total += c;
      auto it = ref_counts[n].find(g);
      if (it == ref_counts[n].end()) continue;
      info_sum += static_cast<double>(std::min(c, it->second)) * info(g);
    }
    score += info_sum / static_cast<double>(cand_total);
  }

  const double r_mean = static_cast<double>(ref_tokens) / static_cast<double>(references.size());
  const double ratio = std::min(static_cast<double>(candidate.size()) / r_mean, 1.0);
  const double beta = std::log(0.5) / std::pow(std::log(2.0 / 3.0), 2);
  const double brevity = std::exp(beta * std::pow(std::log(ratio), 2));
  return score * brevity;
}

// CIDEr, unscaled: per n, cosine similarity between tf-idf n-gram vectors of
// candidate and reference, idf over the evaluation corpus; mean over
// n = 1..max_n, references, and items. Needs >= 2 items for a usable idf.
inline double cider(const std::vector<TokenSeq>& candidates,
                    const std::vector<std::vector<TokenSeq>>& references, size_t max_n = 4) {
  if (candidates.size() != references.size())
    throw LengthMismatch(candidates.size(), references.size());
  if (candidates.size() < 2)
    throw CorpusTooSmall("cider needs at least 2 evaluation items for tf-idf");

  const double num_items = static_cast<double>(candidates.size());
  double total = 0.0;
  for (size_t n = 1; n <= max_n; ++n) {
    // document frequency over items (an item counts once per n-gram present
    // in any of its references)
    ngrams::Counter df;
    for (const auto& refs : references) {
      ngrams::Counter seen;
      for (const TokenSeq& ref : refs)
        for (const auto& [g, c] : ngrams::count(ref, n)) seen[g] = 1;
      for (const auto& [g, one] : seen) df[g] += 1;
    }
    auto idf = [&](const std::vector<int>& g) {
      auto it = df.find(g);
      const double d = it == df.end() ? 0.0 : static_cast<double>(it->second);
      return d == 0.0 ? std::log(num_items) : std::log(num_items / d);
    };

    double n_total = 0.0;
    for (size_t item = 0; item < candidates.size(); ++item) {
      ngrams::Counter cand = ngrams::count(candidates[item], n);
      std::map<std::vector<int>, double> cvec;
      double cnorm = 0.0;
      for (const auto& [g, c] : cand) {
        const double w = static_cast<double>(c) * idf(g);
        cvec[g] = w;
        cnorm += w * w;
      }
      cnorm = std::sqrt(cnorm);
      double item_score = 0.0;
      for (const TokenSeq& ref : references[item]) {
        ngrams::Counter rc = ngrams::count(ref, n);
        double rnorm = 0.0, dot = 0.0;
        for (const auto& [g, c] : rc) {
          const double w = static_cast<double>(c) * idf(g);
          rnorm += w * w;
          auto it = cvec.find(g);
          if (it != cvec.end()) dot += w * it->second;
        }
        rnorm = std::sqrt(rnorm);
        item_score += (cnorm > 0.0 && rnorm > 0.0) ? dot / (cnorm * rnorm) : 0.0;
      }
      n_total += item_score / static_cast<double>(references[item].size());
    }
    total += n_total / num_items;
  }
  return total / static_cast<double>(max_n);
}

struct MetricReport {
  std::vector<std::string> metric_names;
  std::vector<double> mean;
  std::vector<double> stddev;
  // per_example[seed][metric][example]
  std::vector<std::vector<std::vector<double>>> per_example;
  std::vector<uint64_t> seeds;
};

// Runs the full metric suite on one prediction set per seed; the mean/std
// columns aggregate over seeds.
inline MetricReport evaluate_all(const std::vector<std::vector<TokenSeq>>& predictions_per_seed,
                                 const std::vector<TokenSeq>& references,
                                 const std::vector<uint64_t>& seeds) {
  if (predictions_per_seed.size() != seeds.size())
    throw LengthMismatch(predictions_per_seed.size(), seeds.size());
  if (seeds.empty()) throw EmptyData();
  for (const auto& preds : predictions_per_seed)
    if (preds.size() != references.size()) throw LengthMismatch(preds.size(), references.size());

  MetricReport report;
  report.seeds = seeds;
  report.metric_names = {"bleu", "rouge1", "rouge2", "rougeL", "nist", "cider"};
  const size_t m = report.metric_names.size();
  std::vector<std::vector<double>> per_seed_scores(seeds.size(), std::vector<double>(m, 0.0));

  for (size_t s = 0; s < seeds.size(); ++s) {
    const auto& preds = predictions_per_seed[s];
    std::vector<std::vector<double>> per_ex(m, std::vector<double>(preds.size(), 0.0));
    for (size_t i = 0; i < preds.size(); ++i) {
      const std::vector<TokenSeq> refs = {references[i]};
      per_ex[0][i] = bleu(preds[i], refs);
      per_ex[1][i] = rouge(preds[i], references[i], RougeVariant::r1);
      per_ex[2][i] = rouge(preds[i], references[i], RougeVariant::r2);
      per_ex[3][i] = rouge(preds[i], references[i], RougeVariant::rl);
      per_ex[4][i] = nist(preds[i], refs);
    }
    std::vector<std::vector<TokenSeq>> wrapped;
    wrapped.reserve(references.size());
    for (const TokenSeq& r : references) wrapped.push_back({r});
    double cider_score =
        references.size() >= 2 ? cider(preds, wrapped) : 0.0;
    for (size_t k = 0; k < 5; ++k) {
      double sum = 0.0;
      for (double v : per_ex[k]) sum += v;
      per_seed_scores[s][k] = preds.empty() ? 0.0 : sum / static_cast<double>(preds.size());
    }
    per_seed_scores[s][5] = cider_score;
    per_ex[5].assign(preds.size(), cider_score);
    report.per_example.push_back(std::move(per_ex));
  }

  report.mean.assign(m, 0.0);
  report.stddev.assign(m, 0.0);
  for (size_t k = 0; k < m; ++k) {
    for (size_t s = 0; s < seeds.size(); ++s) report.mean[k] += per_seed_scores[s][k];
    report.mean[k] /= static_cast<double>(seeds.size());
    double var = 0.0;
    for (size_t s = 0; s < seeds.size(); ++s) {
      const double d = per_seed_scores[s][k] - report.mean[k];
      var += d * d;
    }
    report.stddev[k] = std::sqrt(var / static_cast<double>(seeds.size()));
  }
  return report;
}

}  // namespace pluginlm
