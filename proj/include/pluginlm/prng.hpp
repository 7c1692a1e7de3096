#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace pluginlm {

// All randomness in the library flows through SplitMix64 (Steele, Lea &
// Flood's mix function, the same one java.util.SplittableRandom uses).
// Pure 64-bit integer arithmetic, so streams are byte-identical across
// platforms. Independent streams are derived by folding a stream label
// into the seed with the same mixer before use.
class SplitMix64 {
 public:
  explicit SplitMix64(uint64_t seed) : state_(seed) {}

  uint64_t next() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  uint64_t state_;
};

inline uint64_t mix_stream(uint64_t seed, uint64_t stream) {
  SplitMix64 s(seed ^ (stream * 0xff51afd7ed558ccdULL + 0x2545f4914f6cdd1dULL));
  return s.next();
}

inline uint64_t hash_label(std::string_view label) {
  // FNV-1a, used only to turn stream names into stream ids.
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : label) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}
  Rng(uint64_t seed, uint64_t stream) : gen_(mix_stream(seed, stream)) {}
  Rng(uint64_t seed, std::string_view stream) : gen_(mix_stream(seed, hash_label(stream))) {}

  uint64_t next_u64() { return gen_.next(); }

  // Uniform in [0, 1) with 53 bits of precision.
  double next_double() { return static_cast<double>(gen_.next() >> 11) * 0x1.0p-53; }

  // Unbiased integer in [0, n) by rejection.
  uint64_t below(uint64_t n) {
    const uint64_t threshold = (0ULL - n) % n;
    for (;;) {
      uint64_t r = gen_.next();
      if (r >= threshold) return r % n;
    }
  }

  // Box-Muller; consumes two uniforms per pair, caches the second value.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1, u2;
    do {
      u1 = next_double();
    } while (u1 <= 0.0);
    u2 = next_double();
    const double mag = std::sqrt(-2.0 * std::log(u1));
    const double two_pi = 6.283185307179586476925286766559;
    spare_ = mag * std::sin(two_pi * u2);
    has_spare_ = true;
    return mag * std::cos(two_pi * u2);
  }

  // Inverse-CDF categorical draw over (possibly unnormalized) nonnegative weights.
  size_t categorical(std::span<const double> weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    double u = next_double() * total;
    double acc = 0.0;
    for (size_t i = 0; i < weights.size(); ++i) {
      acc += weights[i];
      if (u < acc) return i;
    }
    return weights.size() - 1;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    // Fisher-Yates, fixed algorithm so permutations are reproducible.
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  SplitMix64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Content digest used for parameter snapshots and vocab identity (FNV-1a).
class Fnv64 {
 public:
  void add_bytes(const void* data, size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
      h_ ^= p[i];
      h_ *= 1099511628211ULL;
    }
  }
  void add_u64(uint64_t v) { add_bytes(&v, sizeof v); }
  void add_double(double v) { add_bytes(&v, sizeof v); }
  void add_string(std::string_view s) {
    add_u64(s.size());
    add_bytes(s.data(), s.size());
  }
  void add_doubles(std::span<const double> v) {
    add_u64(v.size());
    add_bytes(v.data(), v.size() * sizeof(double));
  }
  uint64_t value() const { return h_; }

 private:
  uint64_t h_ = 1469598103934665603ULL;
};

}  // namespace pluginlm
