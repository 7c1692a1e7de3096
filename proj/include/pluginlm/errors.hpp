#pragma once

#include <stdexcept>
#include <string>

namespace pluginlm {

// Base for every failure the library reports. Each condition gets its own
// type so callers (and tests) can catch precisely.
struct Error : std::runtime_error {
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// --- corpus ---
struct EmptyCorpus : Error {
  EmptyCorpus() : Error("corpus is empty") {}
  explicit EmptyCorpus(const std::string& w) : Error(w) {}
};
struct FileNotFound : Error {
  explicit FileNotFound(const std::string& path) : Error("file not found: " + path) {}
};
struct MissingField : Error {
  MissingField(size_t line, const std::string& field)
      : Error("line " + std::to_string(line) + ": missing field \"" + field + "\""),
        line(line), field(field) {}
  size_t line;
  std::string field;
};
struct MalformedLine : Error {
  explicit MalformedLine(size_t line, const std::string& why = "")
      : Error("line " + std::to_string(line) + ": malformed" + (why.empty() ? "" : ": " + why)),
        line(line) {}
  size_t line;
};
struct TooFewRecords : Error {
  explicit TooFewRecords(size_t n)
      : Error("need at least 5 records to split, got " + std::to_string(n)) {}
};

// --- autodiff ---
struct ShapeMismatch : Error {
  ShapeMismatch(const std::string& op, const std::string& a, const std::string& b)
      : Error(op + ": shape mismatch " + a + " vs " + b) {}
  explicit ShapeMismatch(const std::string& w) : Error(w) {}
};
struct NonScalarLoss : Error {
  explicit NonScalarLoss(const std::string& shape)
      : Error("backward requires a scalar loss, got shape " + shape) {}
};

// --- models ---
struct ContextTooLong : Error {
  ContextTooLong(size_t len, size_t window)
      : Error("context of length " + std::to_string(len) +
              " exceeds window " + std::to_string(window)) {}
};
struct BadConfig : Error {
  explicit BadConfig(const std::string& w) : Error(w) {}
};
struct EmptySequence : Error {
  EmptySequence() : Error("sequence must be non-empty") {}
};

// --- plugin core ---
struct VocabMismatch : Error {
  VocabMismatch(size_t a, size_t b)
      : Error("vocabulary sizes differ: " + std::to_string(a) + " vs " + std::to_string(b)) {}
};
struct LengthMismatch : Error {
  LengthMismatch(size_t a, size_t b)
      : Error("lengths differ: " + std::to_string(a) + " vs " + std::to_string(b)) {}
};
struct EmptySplit : Error {
  explicit EmptySplit(const std::string& which) : Error("empty split: " + which) {}
};
struct AlphaOutOfRange : Error {
  explicit AlphaOutOfRange(double a)
      : Error("alpha must lie in [0,1], got " + std::to_string(a)) {}
};
struct BadTemperature : Error {
  explicit BadTemperature(double t)
      : Error("temperature must be positive, got " + std::to_string(t)) {}
};
struct EmptyGrid : Error {
  EmptyGrid() : Error("hyperparameter grid is empty") {}
};

// --- decoding ---
struct BadStrategy : Error {
  explicit BadStrategy(const std::string& w) : Error(w) {}
};

// --- noise lab ---
struct BadStrength : Error {
  explicit BadStrength(double s)
      : Error("noise strength must lie in [0,1), got " + std::to_string(s)) {}
};
struct NonPositive : Error {
  explicit NonPositive(const std::string& w) : Error(w) {}
};
struct EmptyData : Error {
  EmptyData() : Error("no data points supplied") {}
};
struct InstanceTooLarge : Error {
  explicit InstanceTooLarge(const std::string& w) : Error(w) {}
};
struct NonIdentifiable : Error {
  explicit NonIdentifiable(const std::string& w) : Error(w) {}
};
struct OptimizerDiverged : Error {
  explicit OptimizerDiverged(const std::string& w) : Error(w) {}
};

// --- metrics ---
struct EmptyReferences : Error {
  EmptyReferences() : Error("reference list is empty") {}
};
struct EmptyReference : Error {
  EmptyReference() : Error("reference is empty") {}
};
struct CorpusTooSmall : Error {
  explicit CorpusTooSmall(const std::string& w) : Error(w) {}
};

// --- cli ---
struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error(w) {}
};
struct MissingCheckpoint : Error {
  explicit MissingCheckpoint(const std::string& path)
      : Error("checkpoint not found: " + path) {}
};

}  // namespace pluginlm
