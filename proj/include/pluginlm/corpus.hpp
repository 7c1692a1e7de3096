#pragma once

#include <cctype>
#include <cmath>
#include <fstream>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "pluginlm/errors.hpp"
#include "pluginlm/prng.hpp"

namespace pluginlm {

enum class TokenizerKind { whitespace, character };

// Reserved ids are fixed so serialized models stay portable.
struct Vocab {
  static constexpr int kBos = 0;
  static constexpr int kEos = 1;
  static constexpr int kUnk = 2;

  std::vector<std::string> tokens;  // id -> token; first three are reserved
  std::unordered_map<std::string, int> index;

  static Vocab reserved_only() {
    Vocab v;
    v.tokens = {"<bos>", "<eos>", "<unk>"};
    for (size_t i = 0; i < v.tokens.size(); ++i) v.index[v.tokens[i]] = static_cast<int>(i);
    return v;
  }

  static Vocab from_tokens(const std::vector<std::string>& corpus_tokens) {
    Vocab v = reserved_only();
    for (const std::string& t : corpus_tokens) v.add(t);
    return v;
  }

  void add(const std::string& t) {
    if (index.count(t)) return;
    index[t] = static_cast<int>(tokens.size());
    tokens.push_back(t);
  }

  int id(const std::string& t) const {
    auto it = index.find(t);
    return it == index.end() ? kUnk : it->second;
  }

  size_t size() const { return tokens.size(); }

  uint64_t digest() const {
    Fnv64 h;
    for (const std::string& t : tokens) h.add_string(t);
    return h.value();
  }

  // Newline-separated token list; the line number is the id.
  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FileNotFound(path);
    for (const std::string& t : tokens) out << t << "\n";
  }

  static Vocab load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FileNotFound(path);
    Vocab v;
    std::string line;
    while (std::getline(in, line)) {
      v.index[line] = static_cast<int>(v.tokens.size());
      v.tokens.push_back(line);
    }
    if (v.size() < 3) throw MalformedLine(v.size() + 1, "vocab file lacks reserved tokens");
    return v;
  }
};

// Whitespace mode lowercases and strips everything but [a-z0-9_] from each
// piece; character mode keeps raw characters (bytes) as-is.
inline std::vector<std::string> tokenize(const std::string& text, TokenizerKind kind) {
  std::vector<std::string> out;
  if (kind == TokenizerKind::character) {
    for (char c : text) out.emplace_back(1, c);
    return out;
  }
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) {
      out.push_back(cur);
      cur.clear();
    }
  };
  for (char raw : text) {
    unsigned char c = static_cast<unsigned char>(raw);
    if (std::isspace(c)) {
      flush();
      continue;
    }
    c = static_cast<unsigned char>(std::tolower(c));
    if ((c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_') cur.push_back(static_cast<char>(c));
  }
  flush();
  return out;
}

inline Vocab build_vocab(const std::vector<std::string>& texts, TokenizerKind kind) {
  if (texts.empty()) throw EmptyCorpus();
  Vocab v = Vocab::reserved_only();
  for (const std::string& text : texts)
    for (const std::string& t : tokenize(text, kind)) v.add(t);
  return v;
}

inline std::vector<int> encode(const std::string& text, const Vocab& vocab, TokenizerKind kind) {
  std::vector<int> ids;
  for (const std::string& t : tokenize(text, kind)) ids.push_back(vocab.id(t));
  return ids;
}

inline std::string decode(std::span<const int> ids, const Vocab& vocab, TokenizerKind kind) {
  std::string out;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (kind == TokenizerKind::whitespace && i > 0) out += ' ';
    out += vocab.tokens.at(static_cast<size_t>(ids[i]));
  }
  return out;
}

struct Record {
  std::vector<int> prompt;  // conditioning prefix
  std::vector<int> target;  // always terminated by EOS
};

struct SplitSpec {
  double validation_fraction = 0.2;
  double hyperval_of_validation = 0.4;
  uint64_t seed = 0;
};

struct Splits {
  std::vector<Record> train, validation, hyperval;
};

// One JSON object per line with string fields "prompt" and "target".
// Targets get EOS appended so the Record invariant holds.
inline std::vector<Record> load_jsonl(const std::string& path, const Vocab& vocab,
                                      TokenizerKind kind) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileNotFound(path);
  std::vector<Record> records;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() && in.peek() == std::char_traits<char>::eof()) break;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw MalformedLine(lineno, e.what());
    }
    if (!obj.is_object()) throw MalformedLine(lineno, "not a JSON object");
    for (const char* field : {"prompt", "target"}) {
      if (!obj.contains(field)) throw MissingField(lineno, field);
      if (!obj[field].is_string()) throw MalformedLine(lineno, std::string(field) + " not a string");
    }
    Record r;
    r.prompt = encode(obj["prompt"].get<std::string>(), vocab, kind);
    r.target = encode(obj["target"].get<std::string>(), vocab, kind);
    r.target.push_back(Vocab::kEos);
    records.push_back(std::move(r));
  }
  return records;
}

// Deterministic shuffle, then [train | validation | hyperval] where the
// hyper-validation slice is carved out of the validation portion.
inline Splits split_dataset(std::vector<Record> records, const SplitSpec& spec) {
  if (records.size() < 5) throw TooFewRecords(records.size());
  if (spec.validation_fraction <= 0.0 || spec.validation_fraction >= 1.0 ||
      spec.hyperval_of_validation <= 0.0 || spec.hyperval_of_validation >= 1.0)
    throw BadConfig("split fractions must lie strictly inside (0,1)");

  Rng rng(spec.seed, "split_dataset");
  rng.shuffle(records);

  const size_t n = records.size();
  const size_t n_val_total =
      static_cast<size_t>(std::llround(spec.validation_fraction * static_cast<double>(n)));
  const size_t n_hyp = static_cast<size_t>(
      std::llround(spec.hyperval_of_validation * static_cast<double>(n_val_total)));
  const size_t n_val = n_val_total - n_hyp;
  const size_t n_train = n - n_val_total;

  Splits s;
  s.train.assign(records.begin(), records.begin() + n_train);
  s.validation.assign(records.begin() + n_train, records.begin() + n_train + n_val);
  s.hyperval.assign(records.begin() + n_train + n_val, records.end());
  return s;
}

}  // namespace pluginlm
