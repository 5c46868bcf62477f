#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <sstream>
#include <string>

#include "seqpolicy/error.hpp"

namespace seqpolicy {

// Seeded random stream with platform-independent draws. The engine is
// std::mt19937_64 (bit-exact by the standard); the distributions are written
// out here because the std:: ones are implementation-defined.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : engine_(seed) {}

  uint64_t next() { return engine_(); }

  // Uniform integer in [0, n). Rejection sampling keeps it unbiased.
  uint64_t below(uint64_t n) {
    require(n > 0, ErrorCode::kDomain, "Rng::below requires n > 0");
    const uint64_t limit = UINT64_MAX - (UINT64_MAX % n);
    uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  // Uniform integer in the closed interval [lo, hi].
  int64_t uniform_int(int64_t lo, int64_t hi) {
    require(lo <= hi, ErrorCode::kDomain, "Rng::uniform_int requires lo <= hi");
    return lo + static_cast<int64_t>(below(static_cast<uint64_t>(hi - lo) + 1));
  }

  // Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller; the second variate is discarded so the state stays a pure
  // engine position.
  double normal() {
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  // Independent child stream, deterministic in (parent seed, salt).
  static uint64_t derive_seed(uint64_t seed, uint64_t salt) {
    uint64_t z = seed + 0x9E3779B97F4A7C15ull * (salt + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  std::string state() const {
    std::ostringstream out;
    out << engine_;
    return out.str();
  }

  void restore(const std::string& state) {
    std::istringstream in(state);
    in >> engine_;
    require(!in.fail(), ErrorCode::kInvalidValue, "malformed random stream state");
  }

  friend bool operator==(const Rng& a, const Rng& b) { return a.engine_ == b.engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace seqpolicy
