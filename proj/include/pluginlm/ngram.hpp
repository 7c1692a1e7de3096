#pragma once

#include <fstream>
#include <map>
#include <span>
#include <vector>

#include <json.hpp>

#include "pluginlm/errors.hpp"
#include "pluginlm/language_model.hpp"

namespace pluginlm {

// Tabular add-lambda n-gram model with recursive backoff: an unseen context
// falls back to the (n-1)-gram table, bottoming out at the unigram.
class NGramModel final : public LanguageModel {
 public:
  NGramModel(int order, double smoothing_lambda, size_t vocab_size)
      : order_(order), lambda_(smoothing_lambda), vocab_(vocab_size) {
    if (order < 1) throw BadConfig("ngram order must be >= 1");
    if (!(smoothing_lambda > 0.0)) throw BadConfig("smoothing lambda must be > 0");
    tables_.resize(static_cast<size_t>(order));
  }

  static NGramModel fit(const std::vector<std::vector<int>>& corpus, int order,
                        double smoothing_lambda, size_t vocab_size) {
    NGramModel m(order, smoothing_lambda, vocab_size);
    size_t total = 0;
    for (const auto& seq : corpus) {
      for (size_t i = 0; i < seq.size(); ++i) {
        ++total;
        for (int k = 0; k < order; ++k) {
          if (i < static_cast<size_t>(k)) break;
          std::vector<int> ctx(seq.begin() + (i - k), seq.begin() + i);
          auto& cell = m.tables_[static_cast<size_t>(k)][ctx];
          ++cell.total;
          ++cell.counts[seq[i]];
        }
      }
    }
    if (total == 0) throw EmptyCorpus();
    return m;
  }

  size_t vocab_size() const override { return vocab_; }

  // P(x | ctx) = (count(ctx,x) + lambda) / (count(ctx) + lambda*|V|) at the
  // longest seen suffix of the context.
  ProbVector next_token_probs(std::span<const int> context) const override {
    int k = std::min<int>(order_ - 1, static_cast<int>(context.size()));
    for (; k > 0; --k) {
      std::vector<int> ctx(context.end() - k, context.end());
      auto it = tables_[static_cast<size_t>(k)].find(ctx);
      if (it != tables_[static_cast<size_t>(k)].end()) return row(it->second);
    }
    auto it = tables_[0].find({});
    if (it == tables_[0].end()) throw EmptyCorpus("ngram model holds no counts");
    return row(it->second);
  }

  void hash_params(Fnv64& h) const override {
    h.add_u64(static_cast<uint64_t>(order_));
    h.add_double(lambda_);
    h.add_u64(vocab_);
    for (const auto& table : tables_) {
      h.add_u64(table.size());
      for (const auto& [ctx, cell] : table) {
        h.add_u64(ctx.size());
        for (int t : ctx) h.add_u64(static_cast<uint64_t>(t));
        h.add_u64(cell.total);
        for (const auto& [tok, c] : cell.counts) {
          h.add_u64(static_cast<uint64_t>(tok));
          h.add_u64(c);
        }
      }
    }
  }

  int order() const { return order_; }
  double smoothing_lambda() const { return lambda_; }

  void save(const std::string& path) const {
    nlohmann::json j;
    j["kind"] = "ngram";
    j["order"] = order_;
    j["lambda"] = lambda_;
    j["vocab_size"] = vocab_;
    nlohmann::json tables = nlohmann::json::array();
    for (const auto& table : tables_) {
      nlohmann::json rows = nlohmann::json::array();
      for (const auto& [ctx, cell] : table) {
        nlohmann::json row;
        row["ctx"] = ctx;
        row["total"] = cell.total;
        nlohmann::json counts = nlohmann::json::array();
        for (const auto& [tok, c] : cell.counts) counts.push_back({tok, c});
        row["counts"] = counts;
        rows.push_back(row);
      }
      tables.push_back(rows);
    }
    j["tables"] = tables;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FileNotFound(path);
    out << j.dump();
  }

  static NGramModel load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingCheckpoint(path);
    nlohmann::json j = nlohmann::json::parse(in);
    NGramModel m(j["order"].get<int>(), j["lambda"].get<double>(), j["vocab_size"].get<size_t>());
    size_t level = 0;
    for (const auto& rows : j["tables"]) {
      for (const auto& row : rows) {
        Cell cell;
        cell.total = row["total"].get<uint64_t>();
        for (const auto& pair : row["counts"])
          cell.counts[pair[0].get<int>()] = pair[1].get<uint64_t>();
        m.tables_[level][row["ctx"].get<std::vector<int>>()] = std::move(cell);
      }
      ++level;
    }
    return m;
  }

 private:
  struct Cell {
    uint64_t total = 0;
    std::map<int, uint64_t> counts;
  };

  ProbVector row(const Cell& cell) const {
    const double denom = static_cast<double>(cell.total) + lambda_ * static_cast<double>(vocab_);
    std::vector<double> p(vocab_, lambda_ / denom);
    for (const auto& [tok, c] : cell.counts)
      p[static_cast<size_t>(tok)] = (static_cast<double>(c) + lambda_) / denom;
    return ProbVector(std::move(p));
  }

  int order_;
  double lambda_;
  size_t vocab_;
  // tables_[k]: context of length k -> counts of the following token.
  std::vector<std::map<std::vector<int>, Cell>> tables_;
};

inline NGramModel fit_ngram(const std::vector<std::vector<int>>& corpus, int order,
                            double smoothing_lambda, size_t vocab_size) {
  if (corpus.empty()) throw EmptyCorpus();
  return NGramModel::fit(corpus, order, smoothing_lambda, vocab_size);
}

}  // namespace pluginlm
