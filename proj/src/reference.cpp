#include "mfc/reference.hpp"

#include <cmath>
#include <stdexcept>

#include "mfc/particle.hpp"
#include "mfc/rng.hpp"

namespace mfc {

McCost mc_cost_serial(const CoefficientBundle& bundle, const PolicyParams* policy, int K, int m,
                      const Grid1D& grid, std::uint64_t seed) {
  if (K < 1) throw std::invalid_argument("mc_cost_serial: K must be positive");
  const double dt = bundle.T / m;
  McCost out;
  out.costs.reserve(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) {
    const NoisePath np =
        NoisePath::make(m, dt, derive_seed(seed, "mc-path", static_cast<std::uint64_t>(k)));
    const SpdePath p = evolve_spde(bundle, policy, grid, m, np);
    out.costs.push_back(spde_cost(p, bundle));
  }
  double sum = 0.0;
  for (const double c : out.costs) sum += c;
  out.mean = sum / K;
  if (K > 1) {
    double ss = 0.0;
    for (const double c : out.costs) ss += (c - out.mean) * (c - out.mean);
    out.se = std::sqrt(ss / (K - 1) / K);
  }
  return out;
}

std::vector<ChaosRow> chaos_table_serial(const CoefficientBundle& bundle,
                                         const PolicyParams* policy,
                                         std::span<const int> N_list, int reps,
                                         const Grid1D& grid, int m, std::uint64_t seed) {
  if (N_list.empty()) throw std::invalid_argument("chaos_table_serial: empty N list");
  for (const int N : N_list) {
    if (N < 1) throw std::invalid_argument("chaos_table_serial: N must be positive");
  }
  if (reps < 1) throw std::invalid_argument("chaos_table_serial: reps must be positive");
  if (m < 1) throw std::invalid_argument("chaos_table_serial: m must be positive");

  const double dt = bundle.T / m;
  const NormInfo norm{bundle.T, grid.x_lo, grid.x_hi};

  std::vector<std::vector<DistMeasure>> fem_dm;
  fem_dm.reserve(static_cast<std::size_t>(reps));
  for (int r = 0; r < reps; ++r) {
    const NoisePath noise =
        NoisePath::make(m, dt, derive_seed(seed, "chaos-noise", static_cast<std::uint64_t>(r)));
    const SpdePath path = evolve_spde(bundle, policy, grid, m, noise);
    std::vector<DistMeasure> dms;
    dms.reserve(static_cast<std::size_t>(m) + 1);
    for (const SubProbGrid& nu : path.clipped) dms.emplace_back(nu);
    fem_dm.push_back(std::move(dms));
  }

  std::vector<ChaosRow> rows;
  rows.reserve(N_list.size());
  for (const int N : N_list) {
    std::vector<double> val;
    val.reserve(static_cast<std::size_t>(reps));
    for (int r = 0; r < reps; ++r) {
      const NoisePath noise =
          NoisePath::make(m, dt, derive_seed(seed, "chaos-noise", static_cast<std::uint64_t>(r)));
      const ParticleRun run =
          simulate_particles(bundle, policy, norm, N, noise,
                             derive_seed(seed, "chaos-particles", static_cast<std::uint64_t>(r)));
      double acc = 0.0;
      for (int k = 0; k <= m; ++k) {
        acc += dist_dp(DistMeasure(run.empirical[static_cast<std::size_t>(k)]),
                       fem_dm[static_cast<std::size_t>(r)][static_cast<std::size_t>(k)], 1);
      }
      val.push_back(acc / (m + 1));
    }
    double mean = 0.0;
    for (const double v : val) mean += v;
    mean /= reps;
    double se = 0.0;
    if (reps > 1) {
      double ss = 0.0;
      for (const double v : val) ss += (v - mean) * (v - mean);
      se = std::sqrt(ss / (reps - 1) / reps);
    }
    rows.push_back({N, reps, mean, se});
  }
  return rows;
}

}  // namespace mfc
