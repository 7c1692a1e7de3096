#pragma once

#include <cstring>
#include <fstream>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "pluginlm/autodiff.hpp"
#include "pluginlm/corpus.hpp"
#include "pluginlm/errors.hpp"
#include "pluginlm/language_model.hpp"

namespace pluginlm {

// One batch of teacher-forced sequences, padded to a common length with EOS.
// Row j of sequence s is the model input at that step; target[j] is the token
// the row should predict. Padding rows carry loss_mask 0.
struct TokenBatch {
  size_t num_seqs = 0;
  size_t max_len = 0;
  std::vector<int> input;
  std::vector<int> target;
  std::vector<uint8_t> loss_mask;
  std::vector<int> positions;

  size_t rows() const { return num_seqs * max_len; }
  size_t loss_count() const {
    size_t n = 0;
    for (uint8_t m : loss_mask) n += m;
    return n;
  }
};

inline TokenBatch make_batch(std::span<const Record> records, bool loss_on_prompt) {
  TokenBatch b;
  b.num_seqs = records.size();
  for (const Record& r : records) b.max_len = std::max(b.max_len, r.prompt.size() + r.target.size());
  b.input.reserve(b.rows());
  for (const Record& r : records) {
    std::vector<int> full = r.prompt;
    full.insert(full.end(), r.target.begin(), r.target.end());
    for (size_t j = 0; j < b.max_len; ++j) {
      b.input.push_back(j == 0 ? Vocab::kBos : (j - 1 < full.size() ? full[j - 1] : Vocab::kEos));
      b.target.push_back(j < full.size() ? full[j] : Vocab::kEos);
      bool in_loss = j < full.size() && (loss_on_prompt || j >= r.prompt.size());
      b.loss_mask.push_back(in_loss ? 1 : 0);
      b.positions.push_back(static_cast<int>(j));
    }
  }
  return b;
}

struct TransformerConfig {
  size_t vocab_size = 0;
  int num_blocks = 1;
  size_t embed_dim = 32;
  size_t num_heads = 2;
  size_t ff_dim = 64;
  size_t context_window = 16;  // max context tokens accepted at inference

  void validate() const {
    if (vocab_size < 3) throw BadConfig("vocab_size must be >= 3");
    if (num_blocks < 1 || num_blocks > 12) throw BadConfig("num_blocks must lie in [1,12]");
    if (embed_dim == 0 || ff_dim == 0 || num_heads == 0 || context_window == 0)
      throw BadConfig("transformer dims must be positive");
    if (embed_dim % num_heads != 0) throw BadConfig("num_heads must divide embed_dim");
  }
};

// Causal decoder: pre-norm blocks, learned positional embeddings, untied
// output projection. Weights init N(0, 0.02^2), biases zero, LN gains one.
class TinyTransformer final : public LanguageModel {
 public:
  TinyTransformer(const TransformerConfig& cfg, uint64_t seed) : cfg_(cfg), seed_(seed) {
    cfg_.validate();
    Rng rng(seed, "transformer_init");
    auto weight = [&](std::vector<size_t> shape) {
      Tensor t(shape);
      for (size_t i = 0; i < t.numel(); ++i) t[i] = 0.02 * rng.normal();
      return t;
    };
    const size_t d = cfg_.embed_dim, v = cfg_.vocab_size, f = cfg_.ff_dim;
    params_.add("tok_emb", weight({v, d}));
    params_.add("pos_emb", weight({cfg_.context_window + 1, d}));
    for (int blk = 0; blk < cfg_.num_blocks; ++blk) {
      const std::string p = "blocks." + std::to_string(blk) + ".";
      params_.add(p + "ln1.gain", Tensor::full({d}, 1.0));
      params_.add(p + "ln1.bias", Tensor({d}));
      params_.add(p + "attn.wq", weight({d, d}));
      params_.add(p + "attn.bq", Tensor({d}));
      params_.add(p + "attn.wk", weight({d, d}));
      params_.add(p + "attn.bk", Tensor({d}));
      params_.add(p + "attn.wv", weight({d, d}));
      params_.add(p + "attn.bv", Tensor({d}));
      params_.add(p + "attn.wo", weight({d, d}));
      params_.add(p + "attn.bo", Tensor({d}));
      params_.add(p + "ln2.gain", Tensor::full({d}, 1.0));
      params_.add(p + "ln2.bias", Tensor({d}));
      params_.add(p + "ff.w1", weight({d, f}));
      params_.add(p + "ff.b1", Tensor({f}));
      params_.add(p + "ff.w2", weight({f, d}));
      params_.add(p + "ff.b2", Tensor({d}));
    }
    params_.add("ln_f.gain", Tensor::full({d}, 1.0));
    params_.add("ln_f.bias", Tensor({d}));
    params_.add("out.w", weight({d, v}));
    params_.add("out.b", Tensor({v}));
  }

  const TransformerConfig& config() const { return cfg_; }
  uint64_t seed() const { return seed_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  size_t vocab_size() const override { return cfg_.vocab_size; }
  size_t context_window() const override { return cfg_.context_window; }

  void hash_params(Fnv64& h) const override {
    h.add_u64(cfg_.vocab_size);
    h.add_u64(static_cast<uint64_t>(cfg_.num_blocks));
    h.add_u64(cfg_.embed_dim);
    h.add_u64(cfg_.num_heads);
    h.add_u64(cfg_.ff_dim);
    h.add_u64(cfg_.context_window);
    params_.hash(h);
  }

  // Builds row-stochastic (rows x V) output on the tape. When leaf_ids is
  // non-null, parameters enter as trainable leaves (one per ParamStore item,
  // in store order); otherwise they enter as constants.
  Tape::Id batch_prob_rows(Tape& t, const TokenBatch& b,
                           std::vector<Tape::Id>* leaf_ids) const {
    return t.softmax(batch_logit_rows(t, b, leaf_ids));
  }

  Tape::Id batch_logit_rows(Tape& t, const TokenBatch& b,
                            std::vector<Tape::Id>* leaf_ids) const {
    if (b.max_len > cfg_.context_window + 1)
      throw ContextTooLong(b.max_len, cfg_.context_window + 1);
    std::vector<Tape::Id> pid(params_.size());
    for (size_t i = 0; i < params_.size(); ++i)
      pid[i] = leaf_ids ? t.leaf(params_.items[i].second) : t.constant(params_.items[i].second);
    if (leaf_ids) *leaf_ids = pid;
    auto P = [&](const std::string& name) -> Tape::Id {
      for (size_t i = 0; i < params_.size(); ++i)
        if (params_.items[i].first == name) return pid[i];
      throw Error("no parameter named " + name);
    };

    const size_t d = cfg_.embed_dim;
    const size_t heads = cfg_.num_heads;
    const size_t dh = d / heads;
    const size_t L = b.max_len;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    auto ids = std::make_shared<std::vector<int>>(b.input);
    auto pos = std::make_shared<std::vector<int>>(b.positions);
    Tape::Id h = t.add(t.embedding_lookup(P("tok_emb"), ids),
                       t.embedding_lookup(P("pos_emb"), pos));

    // Strictly-lower-triangular-plus-diagonal visibility per sequence.
    auto causal = std::make_shared<std::vector<uint8_t>>(L * L, 0);
    for (size_t i = 0; i < L; ++i)
      for (size_t j = i + 1; j < L; ++j) (*causal)[i * L + j] = 1;

    for (int blk = 0; blk < cfg_.num_blocks; ++blk) {
      const std::string p = "blocks." + std::to_string(blk) + ".";
      Tape::Id xn = t.layer_norm(h, P(p + "ln1.gain"), P(p + "ln1.bias"));
      Tape::Id q = t.add_rowvec(t.matmul(xn, P(p + "attn.wq")), P(p + "attn.bq"));
      Tape::Id k = t.add_rowvec(t.matmul(xn, P(p + "attn.wk")), P(p + "attn.bk"));
      Tape::Id v = t.add_rowvec(t.matmul(xn, P(p + "attn.wv")), P(p + "attn.bv"));

      std::vector<Tape::Id> seq_ctx;
      seq_ctx.reserve(b.num_seqs);
      for (size_t s = 0; s < b.num_seqs; ++s) {
        const size_t r0 = s * L;
        std::vector<Tape::Id> head_ctx;
        head_ctx.reserve(heads);
        Tape::Id qs = t.slice_rows(q, r0, L);
        Tape::Id ks = t.slice_rows(k, r0, L);
        Tape::Id vs = t.slice_rows(v, r0, L);
        for (size_t hh = 0; hh < heads; ++hh) {
          Tape::Id qh = heads == 1 ? qs : t.slice_cols(qs, hh * dh, dh);
          Tape::Id kh = heads == 1 ? ks : t.slice_cols(ks, hh * dh, dh);
          Tape::Id vh = heads == 1 ? vs : t.slice_cols(vs, hh * dh, dh);
          Tape::Id scores = t.scale(t.matmul(qh, t.transpose(kh)), inv_sqrt_dh);
          Tape::Id attn = t.softmax(t.masked_fill(scores, causal, kMaskFill));
          head_ctx.push_back(t.matmul(attn, vh));
        }
        seq_ctx.push_back(heads == 1 ? head_ctx[0] : t.concat_cols(head_ctx));
      }
      Tape::Id ctx = b.num_seqs == 1 ? seq_ctx[0] : t.concat_rows(seq_ctx);
      Tape::Id proj = t.add_rowvec(t.matmul(ctx, P(p + "attn.wo")), P(p + "attn.bo"));
      h = t.add(h, proj);

      Tape::Id xn2 = t.layer_norm(h, P(p + "ln2.gain"), P(p + "ln2.bias"));
      Tape::Id ff1 = t.relu(t.add_rowvec(t.matmul(xn2, P(p + "ff.w1")), P(p + "ff.b1")));
      Tape::Id ff2 = t.add_rowvec(t.matmul(ff1, P(p + "ff.w2")), P(p + "ff.b2"));
      h = t.add(h, ff2);
    }

    Tape::Id hf = t.layer_norm(h, P("ln_f.gain"), P("ln_f.bias"));
    return t.add_rowvec(t.matmul(hf, P("out.w")), P("out.b"));
  }

  ProbVector next_token_probs(std::span<const int> context) const override {
    if (context.size() > cfg_.context_window)
      throw ContextTooLong(context.size(), cfg_.context_window);
    TokenBatch b;
    b.num_seqs = 1;
    b.max_len = context.size() + 1;
    b.input.push_back(Vocab::kBos);
    b.input.insert(b.input.end(), context.begin(), context.end());
    b.target.assign(b.max_len, Vocab::kEos);
    b.loss_mask.assign(b.max_len, 0);
    for (size_t j = 0; j < b.max_len; ++j) b.positions.push_back(static_cast<int>(j));
    Tape t;
    Tape::Id probs = batch_prob_rows(t, b, nullptr);
    const Tensor& m = t.value(probs);
    const size_t last = b.max_len - 1;
    std::vector<double> row(m.data() + last * m.cols(), m.data() + (last + 1) * m.cols());
    return ProbVector(std::move(row));
  }

  // One forward pass instead of len(tokens) prefix calls; must agree with
  // the prefix-wise default on the same input.
  std::vector<ProbVector> teacher_forced_probs(std::span<const int> tokens) const override {
    if (tokens.empty()) throw EmptySequence();
    if (tokens.size() > cfg_.context_window + 1)
      throw ContextTooLong(tokens.size(), cfg_.context_window + 1);
    TokenBatch b;
    b.num_seqs = 1;
    b.max_len = tokens.size();
    b.input.push_back(Vocab::kBos);
    b.input.insert(b.input.end(), tokens.begin(), tokens.end() - 1);
    b.target.assign(b.max_len, Vocab::kEos);
    b.loss_mask.assign(b.max_len, 0);
    for (size_t j = 0; j < b.max_len; ++j) b.positions.push_back(static_cast<int>(j));
    Tape t;
    Tape::Id probs = batch_prob_rows(t, b, nullptr);
    const Tensor& m = t.value(probs);
    std::vector<ProbVector> out;
    out.reserve(tokens.size());
    for (size_t i = 0; i < tokens.size(); ++i)
      out.emplace_back(std::vector<double>(m.data() + i * m.cols(), m.data() + (i + 1) * m.cols()));
    return out;
  }

  // Checkpoint: magic "PLMCKPT1", u32 header length, JSON header (dims, seed,
  // vocab digest), u32 tensor count, then per tensor u32 name length, name,
  // u32 rank, u64 dims, raw doubles. Integers and doubles are native
  // little-endian.
  void save(const std::string& path, uint64_t vocab_digest = 0) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FileNotFound(path);
    out.write("PLMCKPT1", 8);
    nlohmann::json header;
    header["kind"] = "transformer";
    header["vocab_size"] = cfg_.vocab_size;
    header["num_blocks"] = cfg_.num_blocks;
    header["embed_dim"] = cfg_.embed_dim;
    header["num_heads"] = cfg_.num_heads;
    header["ff_dim"] = cfg_.ff_dim;
    header["context_window"] = cfg_.context_window;
    header["seed"] = seed_;
    header["vocab_digest"] = vocab_digest;
    const std::string hs = header.dump();
    write_u32(out, static_cast<uint32_t>(hs.size()));
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    write_u32(out, static_cast<uint32_t>(params_.size()));
    for (const auto& [name, tensor] : params_.items) {
      write_u32(out, static_cast<uint32_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      write_u32(out, static_cast<uint32_t>(tensor.rank()));
      for (size_t dim : tensor.shape()) {
        uint64_t d64 = dim;
        out.write(reinterpret_cast<const char*>(&d64), 8);
      }
      out.write(reinterpret_cast<const char*>(tensor.data()),
                static_cast<std::streamsize>(tensor.numel() * sizeof(double)));
    }
  }

  static TinyTransformer load(const std::string& path, uint64_t* vocab_digest = nullptr) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingCheckpoint(path);
    char magic[8];
    in.read(magic, 8);
    if (in.gcount() != 8 || std::memcmp(magic, "PLMCKPT1", 8) != 0)
      throw BadConfig("bad checkpoint magic in " + path);
    const uint32_t hlen = read_u32(in);
    std::string hs(hlen, '\0');
    in.read(hs.data(), hlen);
    nlohmann::json header = nlohmann::json::parse(hs);
    TransformerConfig cfg;
    cfg.vocab_size = header["vocab_size"].get<size_t>();
    cfg.num_blocks = header["num_blocks"].get<int>();
    cfg.embed_dim = header["embed_dim"].get<size_t>();
    cfg.num_heads = header["num_heads"].get<size_t>();
    cfg.ff_dim = header["ff_dim"].get<size_t>();
    cfg.context_window = header["context_window"].get<size_t>();
    if (vocab_digest) *vocab_digest = header["vocab_digest"].get<uint64_t>();
    TinyTransformer model(cfg, header["seed"].get<uint64_t>());
    const uint32_t count = read_u32(in);
    for (uint32_t i = 0; i < count; ++i) {
      const uint32_t nlen = read_u32(in);
      std::string name(nlen, '\0');
      in.read(name.data(), nlen);
      const uint32_t rank = read_u32(in);
      std::vector<size_t> shape(rank);
      for (uint32_t r = 0; r < rank; ++r) {
        uint64_t d64 = 0;
        in.read(reinterpret_cast<char*>(&d64), 8);
        shape[r] = static_cast<size_t>(d64);
      }
      Tensor t(shape);
      in.read(reinterpret_cast<char*>(t.data()),
              static_cast<std::streamsize>(t.numel() * sizeof(double)));
      model.params_.find(name) = std::move(t);
    }
    if (!in) throw BadConfig("truncated checkpoint " + path);
    return model;
  }

 private:
  static void write_u32(std::ofstream& out, uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), 4);
  }
  static uint32_t read_u32(std::ifstream& in) {
    uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 4);
    return v;
  }

  TransformerConfig cfg_;
  uint64_t seed_;
  ParamStore params_;
};

inline TinyTransformer init_transformer(const TransformerConfig& cfg, uint64_t seed) {
  return TinyTransformer(cfg, seed);
}

}  // namespace pluginlm
