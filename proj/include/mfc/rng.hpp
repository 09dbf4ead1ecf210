#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace mfc {

// Deterministic stream derivation. Every independent random object (a particle,
// a Monte-Carlo path, an epoch) gets its own engine seeded by hashing
// (master seed, tag, indices); results are then independent of scheduling.
[[nodiscard]] std::uint64_t splitmix64(std::uint64_t& state);
[[nodiscard]] std::uint64_t derive_seed(std::uint64_t master, std::string_view tag,
                                        std::uint64_t a = 0, std::uint64_t b = 0);

// Thin wrapper over std::mt19937_64. The engine is bit-exact per the standard;
// all variate transforms are done by hand because std::*_distribution output is
// implementation-defined and would break reproducibility across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  // Uniform on (0,1]; never returns 0 so logs are safe.
  double u01() {
    const std::uint64_t r = eng_();
    return (static_cast<double>(r >> 11) + 1.0) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller (pairs cached).
  double normal();

  // Exp(1).
  double exponential();

  // Gamma(shape k > 0, scale theta) via Marsaglia-Tsang; k < 1 boosted.
  double gamma(double k, double theta);

  std::uint64_t raw() { return eng_(); }

 private:
  std::mt19937_64 eng_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Common-noise path: m Brownian increments over [0, T], dW0_k ~ N(0, dt),
// reproducible bit-exactly from (seed, m, dt).
struct NoisePath {
  int m = 0;
  double dt = 0.0;
  std::uint64_t seed = 0;
  std::vector<double> dW0;

  static NoisePath make(int m, double dt, std::uint64_t seed);
};

}  // namespace mfc
