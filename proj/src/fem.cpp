#include "mfc/fem.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <exception>
#include <stdexcept>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace mfc {

TriDiag TriDiag::zeros(int n) {
  if (n < 1) throw std::invalid_argument("TriDiag: n must be positive");
  TriDiag T;
  T.n = n;
  T.lower.assign(static_cast<std::size_t>(n - 1), 0.0);
  T.diag.assign(static_cast<std::size_t>(n), 0.0);
  T.upper.assign(static_cast<std::size_t>(n - 1), 0.0);
  return T;
}

void tridiag_apply(const TriDiag& T, std::span<const double> x, std::span<double> y) {
  const int n = T.n;
  for (int i = 0; i < n; ++i) {
    double acc = T.diag[static_cast<std::size_t>(i)] * x[static_cast<std::size_t>(i)];
    if (i > 0) acc += T.lower[static_cast<std::size_t>(i - 1)] * x[static_cast<std::size_t>(i - 1)];
    if (i + 1 < n) acc += T.upper[static_cast<std::size_t>(i)] * x[static_cast<std::size_t>(i + 1)];
    y[static_cast<std::size_t>(i)] = acc;
  }
}

void tridiag_apply_transpose(const TriDiag& T, std::span<const double> x, std::span<double> y) {
  const int n = T.n;
  for (int i = 0; i < n; ++i) {
    double acc = T.diag[static_cast<std::size_t>(i)] * x[static_cast<std::size_t>(i)];
    if (i > 0) acc += T.upper[static_cast<std::size_t>(i - 1)] * x[static_cast<std::size_t>(i - 1)];
    if (i + 1 < n) acc += T.lower[static_cast<std::size_t>(i)] * x[static_cast<std::size_t>(i + 1)];
    y[static_cast<std::size_t>(i)] = acc;
  }
}

namespace {

// Plain Thomas sweep, no pivoting.  Our systems (Gram matrix, mass-form
// implicit step) stay far from pivot breakdown even when strict row dominance
// fails, so guard the elimination itself: a pivot collapsing relative to its
// row, or multipliers exploding, means the factorization is untrustworthy.
void thomas_impl(std::span<const double> lower, std::span<const double> diag,
                 std::span<const double> upper, std::span<const double> rhs,
                 std::span<double> x) {
  const std::size_t n = diag.size();
  std::vector<double> cp(n > 0 ? n - 1 : 0);
  std::vector<double> dp(n);
  auto row_scale = [&](std::size_t i) {
    double s = std::abs(diag[i]);
    if (i > 0) s += std::abs(lower[i - 1]);
    if (i + 1 < n) s += std::abs(upper[i]);
    return s;
  };
  auto guard = [&](double beta, std::size_t i) {
    if (!(std::abs(beta) > 1e-14 * row_scale(i))) {
      throw IllConditionedStep("tridiagonal elimination broke down at row " +
                               std::to_string(i));
    }
  };
  double beta = diag[0];
  guard(beta, 0);
  dp[0] = rhs[0] / beta;
  for (std::size_t i = 1; i < n; ++i) {
    cp[i - 1] = upper[i - 1] / beta;
    if (!(std::abs(cp[i - 1]) <= 1e8)) {
      throw IllConditionedStep("tridiagonal elimination multiplier blew up at row " +
                               std::to_string(i));
    }
    beta = diag[i] - lower[i - 1] * cp[i - 1];
    guard(beta, i);
    dp[i] = (rhs[i] - lower[i - 1] * dp[i - 1]) / beta;
  }
  x[n - 1] = dp[n - 1];
  for (std::size_t i = n - 1; i-- > 0;) x[i] = dp[i] - cp[i] * x[i + 1];
}

}  // namespace

void thomas_solve(const TriDiag& T, std::span<const double> rhs, std::span<double> x) {
  thomas_impl(T.lower, T.diag, T.upper, rhs, x);
}

void thomas_solve_transpose(const TriDiag& T, std::span<const double> rhs,
                            std::span<double> x) {
  thomas_impl(T.upper, T.diag, T.lower, rhs, x);
}

TriDiag mass_matrix(const Grid1D& grid) {
  TriDiag M = TriDiag::zeros(grid.n);
  const double h = grid.h();
  std::fill(M.lower.begin(), M.lower.end(), h / 6.0);
  std::fill(M.diag.begin(), M.diag.end(), 4.0 * h / 6.0);
  std::fill(M.upper.begin(), M.upper.end(), h / 6.0);
  return M;
}

QuadratureLayout fem_quadrature(const Grid1D& grid, const CoefficientBundle& bundle) {
  return QuadratureLayout::make(grid, bundle.lambda_kinks);
}

double measure_lambda(const CoefficientBundle& bundle, double t, const SubProbGrid& nu,
                      const QuadratureLayout& quad) {
  const MeasureView view(nu);
  double acc = 0.0;
  for (const auto& pt : quad.pts) {
    acc += pt.w * bundle.lambda(t, pt.x, view) * nu.density(pt.x);
  }
  return acc;
}

namespace {

// Geometry of the two hats alive at one quadrature point; idx is the 0-based
// matrix row (-1 for the boundary hats that are not in the basis).
struct HatPair {
  double v[2];
  double d[2];
  int idx[2];
};

HatPair hats_at(const Grid1D& g, const QuadratureLayout::Point& pt) {
  const double h = g.h();
  HatPair hp;
  hp.v[0] = (g.node(pt.elem + 1) - pt.x) / h;
  hp.v[1] = (pt.x - g.node(pt.elem)) / h;
  hp.d[0] = -1.0 / h;
  hp.d[1] = 1.0 / h;
  hp.idx[0] = pt.elem == 0 ? -1 : pt.elem - 1;
  hp.idx[1] = pt.elem == g.n ? -1 : pt.elem;
  return hp;
}

void tri_add(TriDiag& T, int I, int J, double v) {
  if (I == J) {
    T.diag[static_cast<std::size_t>(I)] += v;
  } else if (J == I + 1) {
    T.upper[static_cast<std::size_t>(I)] += v;
  } else {
    T.lower[static_cast<std::size_t>(J)] += v;
  }
}

}  // namespace

TriDiag assemble_A(const CoefficientBundle& bundle, double t, const SubProbGrid& nu,
                   const QuadratureLayout& quad, std::span<const double> u,
                   double nu_lambda) {
  const Grid1D& g = quad.grid;
  if (u.size() != quad.pts.size()) {
    throw std::invalid_argument("assemble_A: control vector does not match quadrature");
  }
  TriDiag A = TriDiag::zeros(g.n);
  const MeasureView view(nu);
  auto half_var = [&](double x) {
    const double s = bundle.sigma(t, x, view);
    const double s0 = bundle.sigma0(t, x, view);
    return 0.5 * (s * s + s0 * s0);
  };
  for (std::size_t q = 0; q < quad.pts.size(); ++q) {
    const auto& pt = quad.pts[q];
    const HatPair hp = hats_at(g, pt);
    const double beff =
        bundle.b(t, pt.x, view, u[q]) - bundle.alpha(t, pt.x, view) * nu_lambda;
    const double a = half_var(pt.x);
    // a' by central differences, sample points clamped into the domain
    const double delta = 1e-6 * (1.0 + std::abs(pt.x));
    const double xp = std::min(pt.x + delta, g.x_hi);
    const double xm = std::max(pt.x - delta, g.x_lo);
    const double ap = (half_var(xp) - half_var(xm)) / (xp - xm);
    const double lam = bundle.lambda(t, pt.x, view);
    for (int ti = 0; ti < 2; ++ti) {
      if (hp.idx[ti] < 0) continue;
      for (int tj = 0; tj < 2; ++tj) {
        if (hp.idx[tj] < 0) continue;
        const double contrib =
            pt.w * (beff * hp.v[tj] * hp.d[ti] - (ap * hp.v[tj] + a * hp.d[tj]) * hp.d[ti] -
                    lam * hp.v[ti] * hp.v[tj]);
        tri_add(A, hp.idx[ti], hp.idx[tj], contrib);
      }
    }
  }
  return A;
}

TriDiag assemble_noise(const CoefficientBundle& bundle, double t, const SubProbGrid& nu,
                       const QuadratureLayout& quad) {
  const Grid1D& g = quad.grid;
  TriDiag B = TriDiag::zeros(g.n);
  const MeasureView view(nu);
  for (const auto& pt : quad.pts) {
    const HatPair hp = hats_at(g, pt);
    const double s0 = bundle.sigma0(t, pt.x, view);
    for (int ti = 0; ti < 2; ++ti) {
      if (hp.idx[ti] < 0) continue;
      for (int tj = 0; tj < 2; ++tj) {
        if (hp.idx[tj] < 0) continue;
        tri_add(B, hp.idx[ti], hp.idx[tj], pt.w * s0 * hp.v[tj] * hp.d[ti]);
      }
    }
  }
  return B;
}

ClipResult clip_normalize(std::span<const double> p) {
  ClipResult out;
  out.weights.resize(p.size());
  double r = 0.0;
  for (const double v : p) r += std::max(v, 0.0);
  out.r = r;
  const double den = std::max(r, 1.0);
  for (std::size_t i = 0; i < p.size(); ++i) {
    out.weights[i] = std::max(p[i], 0.0) / den;
  }
  return out;
}

SubProbGrid density_from_moments(std::span<const double> weights, const Grid1D& grid) {
  if (static_cast<int>(weights.size()) != grid.n) {
    throw std::invalid_argument("density_from_moments: weight count does not match grid");
  }
  const TriDiag M = mass_matrix(grid);
  std::vector<double> c(weights.size());
  thomas_solve(M, weights, c);

  double total = 0.0;
  bool neg = false;
  for (const double v : c) {
    total += v;
    neg = neg || v < 0.0;
  }
  if (neg) {
    if (total <= 0.0) {
      std::fill(c.begin(), c.end(), 0.0);
    } else {
      double pos = 0.0;
      for (const double v : c) pos += std::max(v, 0.0);
      const double s = total / pos;
      for (double& v : c) v = std::max(v, 0.0) * s;
    }
  }
  // the Gram solve can park an O(h) sliver of mass on the boundary ramps; cap
  // the grid mass at 1 so downstream invariants hold unconditionally
  double mass = 0.0;
  for (const double v : c) mass += v;
  mass *= grid.h();
  if (mass > 1.0) {
    for (double& v : c) v /= mass;
  }
  return SubProbGrid(grid, std::move(c));
}

std::vector<double> semi_implicit_step(std::span<const double> c_k, const TriDiag& A,
                                       const TriDiag& B, const TriDiag& M, double dW0,
                                       double dt, std::vector<double>* c_next_out) {
  const int n = M.n;
  if (A.n != n || B.n != n || static_cast<int>(c_k.size()) != n) {
    throw std::invalid_argument("semi_implicit_step: dimension mismatch");
  }
  std::vector<double> rhs(static_cast<std::size_t>(n));
  std::vector<double> tmp(static_cast<std::size_t>(n));
  tridiag_apply(M, c_k, rhs);
  tridiag_apply(B, c_k, tmp);
  for (int i = 0; i < n; ++i) rhs[static_cast<std::size_t>(i)] += dW0 * tmp[static_cast<std::size_t>(i)];

  TriDiag S = M;
  for (int i = 0; i < n; ++i) S.diag[static_cast<std::size_t>(i)] -= dt * A.diag[static_cast<std::size_t>(i)];
  for (int i = 0; i + 1 < n; ++i) {
    S.lower[static_cast<std::size_t>(i)] -= dt * A.lower[static_cast<std::size_t>(i)];
    S.upper[static_cast<std::size_t>(i)] -= dt * A.upper[static_cast<std::size_t>(i)];
  }
  // The implicit matrix tolerates moderate loss of row dominance (drift terms
  // at coarse resolution), but off-diagonals dwarfing the diagonal means the
  // time step is far too large for the drift; fail loudly instead of
  // returning an oscillatory solve.
  for (int i = 0; i < n; ++i) {
    double off = 0.0;
    if (i > 0) off += std::abs(S.lower[static_cast<std::size_t>(i - 1)]);
    if (i + 1 < n) off += std::abs(S.upper[static_cast<std::size_t>(i)]);
    if (!(off <= 8.0 * std::abs(S.diag[static_cast<std::size_t>(i)]))) {
      throw IllConditionedStep("implicit step matrix is badly unbalanced at row " +
                               std::to_string(i) + "; reduce the time step");
    }
  }
  std::vector<double> c_next(static_cast<std::size_t>(n));
  thomas_solve(S, rhs, c_next);
  std::vector<double> p_next(static_cast<std::size_t>(n));
  tridiag_apply(M, c_next, p_next);
  if (c_next_out) *c_next_out = std::move(c_next);
  return p_next;
}

SpdePath evolve_spde(const CoefficientBundle& bundle, const PolicyParams* policy,
                     const Grid1D& grid, int m, const NoisePath& noise,
                     std::span<const double> exo_dL) {
  if (m < 1) throw std::invalid_argument("evolve_spde: need at least one time step");
  if (noise.m != m) throw std::invalid_argument("evolve_spde: noise path length mismatch");
  const double dt = bundle.T / m;
  if (std::abs(noise.dt - dt) > 1e-12 * std::max(1.0, dt)) {
    throw std::invalid_argument("evolve_spde: noise path dt mismatch");
  }
  if (!exo_dL.empty() && static_cast<int>(exo_dL.size()) != m) {
    throw std::invalid_argument("evolve_spde: exogenous loss increments need size m");
  }

  const QuadratureLayout quad = fem_quadrature(grid, bundle);
  const TriDiag M = mass_matrix(grid);
  const int n = grid.n;
  const NormInfo norm{bundle.T, grid.x_lo, grid.x_hi};

  SpdePath path;
  path.grid = grid;
  path.dt = dt;
  path.noise = noise;
  path.raw.reserve(static_cast<std::size_t>(m) + 1);
  path.clipped.reserve(static_cast<std::size_t>(m) + 1);
  path.loss.reserve(static_cast<std::size_t>(m) + 1);
  path.steps.reserve(static_cast<std::size_t>(m));

  const SubProbGrid nu0 = bundle.init(grid);
  std::vector<double> p0(static_cast<std::size_t>(n));
  tridiag_apply(M, nu0.c(), p0);
  {
    const ClipResult cl = clip_normalize(p0);
    path.raw.push_back(std::move(p0));
    path.clipped.push_back(density_from_moments(cl.weights, grid));
    path.loss.push_back(1.0 - path.clipped.back().mass());
  }

  std::vector<double> xs(quad.pts.size());
  for (std::size_t q = 0; q < quad.pts.size(); ++q) xs[q] = quad.pts[q].x;

  MlpScratch ws;
  std::vector<double> phi(policy ? static_cast<std::size_t>(policy->spec.d0()) : 0);
  std::vector<double> u(xs.size());
  double u_zero = std::max(0.0, bundle.control_lo);
  if (bundle.control_hi) u_zero = std::min(u_zero, *bundle.control_hi);

  for (int k = 0; k < m; ++k) {
    const double t = k * dt;
    const SubProbGrid& nu = path.clipped.back();
    StepRecord rec;
    rec.nu_lambda =
        exo_dL.empty() ? measure_lambda(bundle, t, nu, quad) : exo_dL[static_cast<std::size_t>(k)] / dt;
    if (policy) {
      pool_features(nu, *policy, norm, phi, ws);
      policy_eval_grid(t, xs, phi, *policy, norm, u, ws);
      rec.phi = phi;
    } else {
      std::fill(u.begin(), u.end(), u_zero);
    }
    rec.u = u;

    const TriDiag A = assemble_A(bundle, t, nu, quad, u, rec.nu_lambda);
    const TriDiag B = assemble_noise(bundle, t, nu, quad);
    std::vector<double> p_next =
        semi_implicit_step(nu.c(), A, B, M, noise.dW0[static_cast<std::size_t>(k)], dt);
    for (const double v : p_next) {
      if (!std::isfinite(v)) throw NumericalBlowup("spde state non-finite", k);
    }
    const ClipResult cl = clip_normalize(p_next);
    path.raw.push_back(std::move(p_next));
    path.clipped.push_back(density_from_moments(cl.weights, grid));
    path.loss.push_back(1.0 - path.clipped.back().mass());
    path.steps.push_back(std::move(rec));
  }
  return path;
}

double spde_cost(const SpdePath& path, const CoefficientBundle& bundle) {
  const QuadratureLayout quad = fem_quadrature(path.grid, bundle);
  const int m = static_cast<int>(path.steps.size());
  double total = 0.0;
  for (int k = 0; k < m; ++k) {
    const double t = k * path.dt;
    const SubProbGrid& nu = path.clipped[static_cast<std::size_t>(k)];
    const MeasureView view(nu);
    const auto& u = path.steps[static_cast<std::size_t>(k)].u;
    double run = 0.0;
    for (std::size_t q = 0; q < quad.pts.size(); ++q) {
      const auto& pt = quad.pts[q];
      run += pt.w * bundle.f(t, pt.x, view, u[q]) * nu.density(pt.x);
    }
    total += path.dt * run;
  }
  total += bundle.psi(MeasureView(path.clipped.back()));
  return total;
}

McCost mc_cost(const CoefficientBundle& bundle, const PolicyParams* policy, int K, int m,
               const Grid1D& grid, std::uint64_t seed, int workers) {
  if (K < 1) throw std::invalid_argument("mc_cost: K must be positive");
  McCost out;
  out.costs.assign(static_cast<std::size_t>(K), 0.0);
  std::vector<std::exception_ptr> errs(static_cast<std::size_t>(K));
  const double dt = bundle.T / m;

#ifdef _OPENMP
  const int nt = workers > 0 ? workers : omp_get_max_threads();
#pragma omp parallel for schedule(dynamic) num_threads(nt)
#else
  (void)workers;
#endif
  for (int k = 0; k < K; ++k) {
    try {
      const NoisePath np =
          NoisePath::make(m, dt, derive_seed(seed, "mc-path", static_cast<std::uint64_t>(k)));
      const SpdePath p = evolve_spde(bundle, policy, grid, m, np);
      out.costs[static_cast<std::size_t>(k)] = spde_cost(p, bundle);
    } catch (...) {
      errs[static_cast<std::size_t>(k)] = std::current_exception();
    }
  }
  for (const auto& e : errs) {
    if (e) std::rethrow_exception(e);
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

}  // namespace mfc
