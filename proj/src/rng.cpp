#include "mfc/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace mfc {

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t derive_seed(std::uint64_t master, std::string_view tag,
                          std::uint64_t a, std::uint64_t b) {
  // FNV-1a over the tag, then splitmix chain over (master, hash, a, b).
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const char ch : tag) {
    h ^= static_cast<unsigned char>(ch);
    h *= 0x100000001b3ULL;
  }
  std::uint64_t s = master;
  std::uint64_t out = splitmix64(s);
  s ^= h;
  out ^= splitmix64(s);
  s ^= a + 0x9e3779b97f4a7c15ULL;
  out ^= splitmix64(s);
  s ^= b + 0x7f4a7c159e3779b9ULL;
  out ^= splitmix64(s);
  return out;
}

double Rng::normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  const double u1 = u01();
  const double u2 = u01();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double a = 2.0 * M_PI * u2;
  spare_ = r * std::sin(a);
  have_spare_ = true;
  return r * std::cos(a);
}

double Rng::exponential() { return -std::log(u01()); }

double Rng::gamma(double k, double theta) {
  if (!(k > 0.0) || !(theta > 0.0)) {
    throw std::invalid_argument("Rng::gamma: shape and scale must be positive");
  }
  if (k < 1.0) {
    // Boost: Gamma(k) = Gamma(k+1) * U^(1/k).
    const double g = gamma(k + 1.0, 1.0);
    const double u = u01();
    return theta * g * std::pow(u, 1.0 / k);
  }
  const double d = k - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x;
    double v;
    do {
      x = normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = u01();
    const double x2 = x * x;
    if (u < 1.0 - 0.0331 * x2 * x2) return theta * d * v;
    if (std::log(u) < 0.5 * x2 + d * (1.0 - v + std::log(v))) return theta * d * v;
  }
}

NoisePath NoisePath::make(int m, double dt, std::uint64_t seed) {
  if (m < 0 || !(dt > 0.0)) {
    throw std::invalid_argument("NoisePath: need m >= 0 and dt > 0");
  }
  NoisePath np;
  np.m = m;
  np.dt = dt;
  np.seed = seed;
  np.dW0.resize(static_cast<std::size_t>(m));
  Rng rng(derive_seed(seed, "common-noise"));
  const double s = std::sqrt(dt);
  for (int k = 0; k < m; ++k) np.dW0[static_cast<std::size_t>(k)] = s * rng.normal();
  return np;
}

}  // namespace mfc
