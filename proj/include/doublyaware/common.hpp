#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace doublyaware {

// Error taxonomy shared by every module.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ContractViolation : std::logic_error {
  using std::logic_error::logic_error;
};
struct NumericError : std::runtime_error {
  NumericError(const std::string& primitive, const std::string& detail)
      : std::runtime_error("non-finite value in " + primitive + ": " + detail),
        primitive(primitive) {}
  std::string primitive;
};
// Retryable: the caller should collect more data and try again.
struct NotReady : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct VersionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ContractViolation(what);
}

// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Seed derivation: hash64(base, index) = mix64(mix64(base) ^ (index * odd constant)).
// Every derived stream in the toolkit goes through this so results do not
// depend on thread count or evaluation order.
constexpr std::uint64_t hash64(std::uint64_t base, std::uint64_t index) {
  return mix64(mix64(base) ^ (index * 0xD6E8FEB86659FD93ULL + 0x632BE59BD9B4E019ULL));
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(mix64(seed)) {}

  double normal() { return normal_(engine_); }
  double uniform(double lo, double hi) {
    return lo + (hi - lo) * std::uniform_real_distribution<double>(0.0, 1.0)(engine_);
  }
  std::uint64_t below(std::uint64_t n) {
    return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(engine_);
  }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace doublyaware
