#include "mfc/particle.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "mfc/errors.hpp"

namespace mfc {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double clamp_zero_control(const CoefficientBundle& bundle) {
  double u = std::max(0.0, bundle.control_lo);
  if (bundle.control_hi) u = std::min(u, *bundle.control_hi);
  return u;
}

// Inverse-CDF sampler over the projected initial density, used when a bundle
// ships no exact sampler. The density is piecewise linear, so each CDF
// segment is a quadratic solved in closed form.
std::function<double(Rng&)> inverse_cdf_sampler(const CoefficientBundle& bundle,
                                                const NormInfo& norm) {
  if (!bundle.init) {
    throw std::invalid_argument("simulate_particles: bundle has neither init_sampler nor init");
  }
  const Grid1D grid(norm.x_lo, norm.x_hi, 1024);
  const SubProbGrid rho = bundle.init(grid);
  const double h = grid.h();
  const int nb = grid.n + 2;  // breakpoints node(0)..node(n+1)
  std::vector<double> dens(static_cast<std::size_t>(nb), 0.0);
  for (int j = 1; j <= grid.n; ++j) {
    dens[static_cast<std::size_t>(j)] = rho.c()[static_cast<std::size_t>(j - 1)];
  }
  std::vector<double> cdf(static_cast<std::size_t>(nb), 0.0);
  for (int j = 0; j + 1 < nb; ++j) {
    cdf[static_cast<std::size_t>(j + 1)] =
        cdf[static_cast<std::size_t>(j)] +
        0.5 * h * (dens[static_cast<std::size_t>(j)] + dens[static_cast<std::size_t>(j + 1)]);
  }
  const double total = cdf[static_cast<std::size_t>(nb - 1)];
  if (!(total > 0.0)) {
    throw std::invalid_argument("simulate_particles: initial density has zero window mass");
  }
  return [grid, h, dens, cdf, total](Rng& rng) {
    const double target = rng.u01() * total;
    // rightmost segment with cdf[j] < target (u01 is in (0,1], so target > 0)
    const auto it = std::lower_bound(cdf.begin(), cdf.end(), target);
    std::size_t j = static_cast<std::size_t>(it - cdf.begin());
    if (j > 0) --j;
    const double y = target - cdf[j];
    const double d0 = dens[j];
    const double slope = (dens[j + 1] - dens[j]) / h;
    double s;
    const double disc = d0 * d0 + 2.0 * slope * y;
    if (std::abs(slope) < 1e-300 || disc <= 0.0) {
      s = d0 > 0.0 ? y / d0 : 0.5 * h;
    } else {
      s = 2.0 * y / (d0 + std::sqrt(disc));
    }
    return grid.node(static_cast<int>(j)) + std::clamp(s, 0.0, h);
  };
}

void record_first_hits(const ParticleEnsemble& e, double t, std::vector<double>& first_hit) {
  for (int i = 0; i < e.N; ++i) {
    auto& fh = first_hit[static_cast<std::size_t>(i)];
    if (fh == kInf && e.x[static_cast<std::size_t>(i)] <= 0.0) fh = t;
  }
}

}  // namespace

double ParticleEnsemble::loss() const {
  int dead = 0;
  for (const std::uint8_t a : alive) dead += a ? 0 : 1;
  return static_cast<double>(dead) / N;
}

AtomicSubProb empirical_of(const ParticleEnsemble& e) {
  return empirical_of(e.x, e.alive, e.N);
}

ParticleRun simulate_particles(const CoefficientBundle& bundle, const PolicyParams* policy,
                               const NormInfo& norm, int N, const NoisePath& noise,
                               std::uint64_t seed) {
  if (N < 1) throw std::invalid_argument("simulate_particles: N must be positive");
  if (noise.m < 1) throw std::invalid_argument("simulate_particles: noise path is empty");
  const int m = noise.m;
  const double dt = noise.dt;
  if (std::abs(m * dt - bundle.T) > 1e-9 * std::max(1.0, bundle.T)) {
    throw std::invalid_argument("simulate_particles: noise path does not span [0, T]");
  }

  std::function<double(Rng&)> sampler = bundle.init_sampler;
  if (!sampler) sampler = inverse_cdf_sampler(bundle, norm);

  ParticleEnsemble e;
  e.N = N;
  e.t = 0.0;
  e.x.resize(static_cast<std::size_t>(N));
  e.lambda_acc.assign(static_cast<std::size_t>(N), 0.0);
  e.theta.resize(static_cast<std::size_t>(N));
  e.kill_time.assign(static_cast<std::size_t>(N), kInf);
  e.alive.assign(static_cast<std::size_t>(N), 1);

  std::vector<Rng> streams;
  streams.reserve(static_cast<std::size_t>(N));
  for (int i = 0; i < N; ++i) {
    streams.emplace_back(derive_seed(seed, "particle", static_cast<std::uint64_t>(i)));
    e.x[static_cast<std::size_t>(i)] = sampler(streams.back());
    e.theta[static_cast<std::size_t>(i)] = streams.back().exponential();
  }

  ParticleRun run;
  run.dt = dt;
  run.states.reserve(static_cast<std::size_t>(m + 1));
  run.loss.reserve(static_cast<std::size_t>(m + 1));
  run.empirical.reserve(static_cast<std::size_t>(m + 1));
  run.first_hit.assign(static_cast<std::size_t>(N), kInf);

  record_first_hits(e, 0.0, run.first_hit);
  run.states.push_back(e);
  run.loss.push_back(e.loss());
  run.empirical.push_back(empirical_of(e));

  const double u_zero = clamp_zero_control(bundle);
  const double sdt = std::sqrt(dt);
  std::vector<double> u(static_cast<std::size_t>(N), u_zero);
  std::vector<double> phi;
  MlpScratch ws;
  if (policy) phi.resize(static_cast<std::size_t>(policy->spec.d0()));
  std::vector<int> cand;

  for (int k = 0; k < m; ++k) {
    const double t = k * dt;
    const AtomicSubProb& nu = run.empirical[static_cast<std::size_t>(k)];
    const MeasureView nuv(nu);

    if (policy) {
      pool_features(nu, *policy, norm, phi, ws);
      for (int i = 0; i < N; ++i) {
        if (e.alive[static_cast<std::size_t>(i)]) {
          u[static_cast<std::size_t>(i)] =
              policy_eval_feat(t, e.x[static_cast<std::size_t>(i)], phi, *policy, norm, ws);
        }
      }
    }

    const double dW0 = noise.dW0[static_cast<std::size_t>(k)];
    for (int i = 0; i < N; ++i) {
      const std::size_t ii = static_cast<std::size_t>(i);
      if (!e.alive[ii]) continue;
      const double xi = e.x[ii];
      e.lambda_acc[ii] += bundle.lambda(t, xi, nuv) * dt;
      const double dWi = streams[ii].normal() * sdt;
      e.x[ii] = xi + bundle.b(t, xi, nuv, u[ii]) * dt + bundle.sigma(t, xi, nuv) * dWi +
                bundle.sigma0(t, xi, nuv) * dW0;
    }

    // Kill pass: candidates fixed after the clock update (jumps move x, not
    // the clocks), then processed in ascending index order.
    cand.clear();
    for (int i = 0; i < N; ++i) {
      const std::size_t ii = static_cast<std::size_t>(i);
      if (e.alive[ii] && e.lambda_acc[ii] >= e.theta[ii]) cand.push_back(i);
    }
    for (const int j : cand) {
      const AtomicSubProb nu_pre = empirical_of(e);  // left limit: j still counted
      const MeasureView nu_pre_v(nu_pre);
      for (int i = 0; i < N; ++i) {
        const std::size_t ii = static_cast<std::size_t>(i);
        if (i == j || !e.alive[ii]) continue;
        e.x[ii] -= bundle.alpha(t, e.x[ii], nu_pre_v) / N;
      }
      e.alive[static_cast<std::size_t>(j)] = 0;
      e.kill_time[static_cast<std::size_t>(j)] = (k + 1) * dt;
    }

    for (int i = 0; i < N; ++i) {
      const std::size_t ii = static_cast<std::size_t>(i);
      if (e.alive[ii] && !(std::isfinite(e.x[ii]) && std::isfinite(e.lambda_acc[ii]))) {
        throw NumericalBlowup("particle state became non-finite", k);
      }
    }

    e.t = (k + 1) * dt;
    record_first_hits(e, e.t, run.first_hit);
    run.states.push_back(e);
    run.loss.push_back(e.loss());
    run.empirical.push_back(empirical_of(e));
  }
  return run;
}

double particle_cost(const ParticleRun& run, const CoefficientBundle& bundle,
                     const PolicyParams* policy, const NormInfo& norm) {
  if (run.states.empty()) throw std::invalid_argument("particle_cost: empty run");
  const int m = static_cast<int>(run.states.size()) - 1;
  const int N = run.states.front().N;
  const double u_zero = clamp_zero_control(bundle);

  std::vector<double> phi;
  MlpScratch ws;
  if (policy) phi.resize(static_cast<std::size_t>(policy->spec.d0()));

  double running = 0.0;
  for (int k = 0; k < m; ++k) {
    const double t = k * run.dt;
    const ParticleEnsemble& e = run.states[static_cast<std::size_t>(k)];
    const AtomicSubProb& nu = run.empirical[static_cast<std::size_t>(k)];
    const MeasureView nuv(nu);
    if (policy) pool_features(nu, *policy, norm, phi, ws);
    double acc = 0.0;
    for (int i = 0; i < N; ++i) {
      const std::size_t ii = static_cast<std::size_t>(i);
      if (!e.alive[ii]) continue;
      const double g =
          policy ? policy_eval_feat(t, e.x[ii], phi, *policy, norm, ws) : u_zero;
      acc += bundle.f(t, e.x[ii], nuv, g);
    }
    running += run.dt * acc / N;
  }
  return running + bundle.psi(MeasureView(run.empirical[static_cast<std::size_t>(m)]));
}

std::vector<MartingaleRow> martingale_variance(const CoefficientBundle& bundle,
                                               std::span<const int> N_list, int reps, int m,
                                               std::uint64_t seed, int workers) {
  if (reps < 50) throw std::invalid_argument("martingale_variance: need at least 50 reps");
  if (m < 1) throw std::invalid_argument("martingale_variance: m must be positive");
  for (const int N : N_list) {
    if (N < 1) throw std::invalid_argument("martingale_variance: N must be positive");
  }
  const NormInfo norm{bundle.T, -1.0, 1.0};
  const int na = static_cast<int>(N_list.size());
  const int total = na * reps;
  std::vector<double> s2(static_cast<std::size_t>(total), 0.0);
  std::vector<std::exception_ptr> errs(static_cast<std::size_t>(total));

#ifdef _OPENMP
  const int nt = workers > 0 ? workers : omp_get_max_threads();
#pragma omp parallel for schedule(dynamic) num_threads(nt)
#else
  (void)workers;
#endif
  for (int idx = 0; idx < total; ++idx) {
    try {
      const int a = idx / reps;
      const int r = idx % reps;
      const int N = N_list[static_cast<std::size_t>(a)];
      const std::uint64_t rs = derive_seed(seed, "martingale", static_cast<std::uint64_t>(N),
                                           static_cast<std::uint64_t>(r));
      const NoisePath np = NoisePath::make(m, bundle.T / m, derive_seed(rs, "noise"));
      const ParticleRun run = simulate_particles(bundle, nullptr, norm, N, np, rs);
      const ParticleEnsemble& fin = run.states.back();
      double s = 0.0;
      for (int i = 0; i < N; ++i) {
        const std::size_t ii = static_cast<std::size_t>(i);
        const double mi = (fin.alive[ii] ? 1.0 : 0.0) + fin.lambda_acc[ii];
        s += mi - 1.0;
      }
      s /= N;
      s2[static_cast<std::size_t>(idx)] = s * s;
    } catch (...) {
      errs[static_cast<std::size_t>(idx)] = std::current_exception();
    }
  }
  for (const auto& err : errs) {
    if (err) std::rethrow_exception(err);
  }

  std::vector<MartingaleRow> rows(static_cast<std::size_t>(na));
  for (int a = 0; a < na; ++a) {
    double mean = 0.0;
    for (int r = 0; r < reps; ++r) mean += s2[static_cast<std::size_t>(a * reps + r)];
    mean /= reps;
    double ss = 0.0;
    for (int r = 0; r < reps; ++r) {
      const double d = s2[static_cast<std::size_t>(a * reps + r)] - mean;
      ss += d * d;
    }
    rows[static_cast<std::size_t>(a)] = {N_list[static_cast<std::size_t>(a)], mean,
                                         std::sqrt(ss / (reps - 1) / reps)};
  }
  return rows;
}

std::vector<KillGapRow> kill_gap_stats(const CoefficientBundle& bundle,
                                       std::span<const double> lambda0_list, int N, int reps,
                                       int m, std::uint64_t seed, int workers) {
  if (N < 1) throw std::invalid_argument("kill_gap_stats: N must be positive");
  if (reps < 2) throw std::invalid_argument("kill_gap_stats: need at least 2 reps");
  if (m < 1) throw std::invalid_argument("kill_gap_stats: m must be positive");
  const NormInfo norm{bundle.T, -1.0, 1.0};
  const double T = bundle.T;

  const int nl = static_cast<int>(lambda0_list.size());
  std::vector<CoefficientBundle> bundles;
  bundles.reserve(static_cast<std::size_t>(nl));
  for (const double l0 : lambda0_list) {
    CoefficientBundle bl = bundle;
    bl.lambda = [l0](double, double x, const MeasureView&) { return l0 * std::max(-x, 0.0); };
    bl.lambda_kinks = {0.0};
    bundles.push_back(std::move(bl));
  }

  const int total = nl * reps;
  std::vector<double> gap(static_cast<std::size_t>(total), 0.0);
  std::vector<std::exception_ptr> errs(static_cast<std::size_t>(total));

#ifdef _OPENMP
  const int nt = workers > 0 ? workers : omp_get_max_threads();
#pragma omp parallel for schedule(dynamic) num_threads(nt)
#else
  (void)workers;
#endif
  for (int idx = 0; idx < total; ++idx) {
    try {
      const int a = idx / reps;
      const int r = idx % reps;
      // the replica seed is shared across lambda0 entries: common random numbers
      const std::uint64_t rs = derive_seed(seed, "kill-gap", static_cast<std::uint64_t>(r));
      const NoisePath np = NoisePath::make(m, T / m, derive_seed(rs, "noise"));
      const ParticleRun run =
          simulate_particles(bundles[static_cast<std::size_t>(a)], nullptr, norm, N, np, rs);
      const ParticleEnsemble& fin = run.states.back();
      double acc = 0.0;
      for (int i = 0; i < N; ++i) {
        const std::size_t ii = static_cast<std::size_t>(i);
        acc += std::min(fin.kill_time[ii], T) - std::min(run.first_hit[ii], T);
      }
      gap[static_cast<std::size_t>(idx)] = acc / N;
    } catch (...) {
      errs[static_cast<std::size_t>(idx)] = std::current_exception();
    }
  }
  for (const auto& err : errs) {
    if (err) std::rethrow_exception(err);
  }

  std::vector<KillGapRow> rows(static_cast<std::size_t>(nl));
  for (int a = 0; a < nl; ++a) {
    double mean = 0.0;
    for (int r = 0; r < reps; ++r) mean += gap[static_cast<std::size_t>(a * reps + r)];
    mean /= reps;
    double ss = 0.0;
    for (int r = 0; r < reps; ++r) {
      const double d = gap[static_cast<std::size_t>(a * reps + r)] - mean;
      ss += d * d;
    }
    KillGapRow& row = rows[static_cast<std::size_t>(a)];
    row.lambda0 = lambda0_list[static_cast<std::size_t>(a)];
    row.mean_gap = mean;
    row.se = std::sqrt(ss / (reps - 1) / reps);
    row.rep_gaps.assign(gap.begin() + a * reps, gap.begin() + (a + 1) * reps);
  }
  return rows;
}

}  // namespace mfc
