#include "mfc/singular.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <exception>
#include <stdexcept>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "mfc/rng.hpp"

namespace mfc {

namespace {

std::size_t uz(int i) { return static_cast<std::size_t>(i); }

CoefficientBundle with_intensity(const CoefficientBundle& bundle, double lambda0) {
  CoefficientBundle bl = bundle;
  bl.lambda = [lambda0](double, double x, const MeasureView&) {
    return lambda0 * std::max(-x, 0.0);
  };
  bl.lambda_kinks = {0.0};
  return bl;
}

}  // namespace

LossPathFamily intensity_sweep(const CoefficientBundle& bundle,
                               std::span<const double> lambda0_list, const Grid1D& grid, int m,
                               int K, std::uint64_t seed, int workers, int kill_N,
                               int kill_reps) {
  if (lambda0_list.empty()) {
    throw std::invalid_argument("intensity_sweep: empty lambda0 list");
  }
  for (std::size_t i = 0; i < lambda0_list.size(); ++i) {
    if (!(lambda0_list[i] >= 0.0)) {
      throw std::invalid_argument("intensity_sweep: negative lambda0");
    }
    if (i > 0 && !(lambda0_list[i] > lambda0_list[i - 1])) {
      throw std::invalid_argument("intensity_sweep: lambda0 list must be strictly increasing");
    }
  }
  if (m < 1) throw std::invalid_argument("intensity_sweep: need at least one time step");
  if (K < 1) throw std::invalid_argument("intensity_sweep: K must be positive");

  const int L = static_cast<int>(lambda0_list.size());
  const double dt = bundle.T / m;

  LossPathFamily family;
  family.lambda0.assign(lambda0_list.begin(), lambda0_list.end());
  family.dt = dt;
  family.loss.assign(uz(L), std::vector<std::vector<double>>(uz(K)));

  std::vector<CoefficientBundle> members;
  members.reserve(uz(L));
  for (const double l0 : lambda0_list) members.push_back(with_intensity(bundle, l0));

  const int total = L * K;
  std::vector<std::exception_ptr> errs(uz(total));
#ifdef _OPENMP
  const int nt = workers > 0 ? workers : omp_get_max_threads();
#pragma omp parallel for schedule(dynamic) num_threads(nt)
#else
  (void)workers;
#endif
  for (int idx = 0; idx < total; ++idx) {
    const int l = idx / K;
    const int k = idx % K;
    try {
      // path seed depends on k only: one coupled noise path per k
      const NoisePath np =
          NoisePath::make(m, dt, derive_seed(seed, "mc-path", static_cast<std::uint64_t>(k)));
      family.loss[uz(l)][uz(k)] = evolve_spde(members[uz(l)], nullptr, grid, m, np).loss;
    } catch (...) {
      errs[uz(idx)] = std::current_exception();
    }
  }
  for (const auto& e : errs) {
    if (e) std::rethrow_exception(e);
  }

  family.kill_gap = kill_gap_stats(bundle, lambda0_list, kill_N, kill_reps, m,
                                   derive_seed(seed, "kill-gap"), workers);
  return family;
}

MinimalIteration minimal_iteration(const CoefficientBundle& bundle, double lambda0,
                                   const Grid1D& grid, int m, const NoisePath& noise,
                                   double tol, int max_iter) {
  if (!(lambda0 >= 0.0)) throw std::invalid_argument("minimal_iteration: negative lambda0");
  if (!(tol > 0.0)) throw std::invalid_argument("minimal_iteration: tol must be positive");
  if (max_iter < 1) throw std::invalid_argument("minimal_iteration: max_iter must be >= 1");
  if (m < 1 || noise.m != m) {
    throw std::invalid_argument("minimal_iteration: noise path does not match m");
  }

  const CoefficientBundle bl = with_intensity(bundle, lambda0);

  MinimalIteration out;
  out.iterates.emplace_back(uz(m) + 1, 0.0);
  std::vector<double> exo(uz(m));
  for (int j = 0; j < max_iter; ++j) {
    const std::vector<double>& prev = out.iterates.back();
    for (int k = 0; k < m; ++k) exo[uz(k)] = prev[uz(k + 1)] - prev[uz(k)];
    const SpdePath path = evolve_spde(bl, nullptr, grid, m, noise, exo);
    double gap = 0.0;
    for (int k = 0; k <= m; ++k) gap = std::max(gap, std::abs(path.loss[uz(k)] - prev[uz(k)]));
    out.iterates.push_back(path.loss);
    out.last_gap = gap;
    if (gap <= tol) {
      out.converged = true;
      break;
    }
  }
  out.iterations = static_cast<int>(out.iterates.size()) - 1;
  out.fixed_point = out.iterates.back();
  return out;
}

MonotoneLimit monotone_limit(const LossPathFamily& family, double tol) {
  const std::size_t L = family.loss.size();
  if (L == 0 || family.lambda0.size() != L) {
    throw std::invalid_argument("monotone_limit: empty or inconsistent family");
  }
  const std::size_t K = family.loss[0].size();
  if (K == 0) throw std::invalid_argument("monotone_limit: family has no paths");
  const std::size_t T = family.loss[0][0].size();
  if (T == 0) throw std::invalid_argument("monotone_limit: empty loss paths");
  for (const auto& member : family.loss) {
    if (member.size() != K) throw std::invalid_argument("monotone_limit: ragged path count");
    for (const auto& path : member) {
      if (path.size() != T) throw std::invalid_argument("monotone_limit: ragged lattice");
    }
  }

  MonotoneLimit out;
  out.limit.assign(T, 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t t = 0; t < T; ++t) {
      double sup = family.loss[0][k][t];
      for (std::size_t l = 1; l < L; ++l) sup = std::max(sup, family.loss[l][k][t]);
      out.limit[t] += sup;
    }
  }
  for (double& v : out.limit) v /= static_cast<double>(K);

  for (std::size_t l = 0; l + 1 < L; ++l) {
    for (std::size_t k = 0; k < K; ++k) {
      for (std::size_t t = 0; t < T; ++t) {
        const double drop = family.loss[l][k][t] - family.loss[l + 1][k][t];
        out.worst_violation = std::max(out.worst_violation, drop);
      }
    }
  }
  out.monotone = out.worst_violation <= tol;

  std::vector<std::vector<double>> mean(L, std::vector<double>(T, 0.0));
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t k = 0; k < K; ++k) {
      for (std::size_t t = 0; t < T; ++t) mean[l][t] += family.loss[l][k][t];
    }
    for (double& v : mean[l]) v /= static_cast<double>(K);
  }
  out.per_time_gap.assign(T, 0.0);
  if (L >= 2) {
    for (std::size_t t = 0; t < T; ++t) {
      out.per_time_gap[t] = std::abs(mean[L - 1][t] - mean[L - 2][t]);
    }
  }
  out.limit_gap.assign(L, 0.0);
  for (std::size_t l = 0; l < L; ++l) {
    double g = 0.0;
    for (std::size_t t = 0; t < T; ++t) g = std::max(g, out.limit[t] - mean[l][t]);
    out.limit_gap[l] = g;
  }
  return out;
}

}  // namespace mfc
