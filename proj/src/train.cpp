#include "mfc/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "mfc/errors.hpp"
#include "mfc/rng.hpp"

namespace mfc {

namespace {

constexpr double kGaussX[3] = {-0.7745966692414834, 0.0, 0.7745966692414834};
constexpr double kGaussW[3] = {5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0};

std::size_t uz(int i) { return static_cast<std::size_t>(i); }

// Same hat geometry the assembly uses; idx is -1 for the boundary hats.
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

// The adjoint only handles the coefficient structure it was derived for:
// measure dependence confined to the contagion drift and the killing rate,
// control dependence confined to b and f with explicit derivatives.
void validate_gradient_bundle(const CoefficientBundle& bundle) {
  if (!bundle.coeffs_measure_free) {
    throw std::invalid_argument("grad_cost: bundle coefficients must be measure-free");
  }
  if (!bundle.psi_is_loss) {
    throw std::invalid_argument("grad_cost: terminal cost must be the loss 1 - mass");
  }
  if (!bundle.db_dg || !bundle.df_dg) {
    throw std::invalid_argument("grad_cost: bundle lacks db_dg / df_dg");
  }
}

// Replayed forward state of one clip -> Gram solve -> repair -> cap stage.
struct ClipStage {
  ClipResult cl;
  std::vector<double> chat;  // M^{-1} clip(p)
  double total = 0.0;        // sum chat
  double pos = 0.0;          // sum (chat)_+
  double scale = 1.0;        // repair rescale total / pos
  bool neg = false;          // repair fired
  bool dead = false;         // forward collapsed to the zero measure
  double mass1 = 0.0;        // grid mass before the cap
};

ClipStage replay_clip(std::span<const double> p_next, const TriDiag& M, double h) {
  ClipStage st;
  st.cl = clip_normalize(p_next);
  st.chat.resize(p_next.size());
  thomas_solve(M, st.cl.weights, st.chat);
  for (double v : st.chat) {
    st.total += v;
    st.neg = st.neg || v < 0.0;
  }
  double mass = 0.0;
  if (st.neg) {
    if (st.total <= 0.0) {
      st.dead = true;
    } else {
      for (double v : st.chat) st.pos += std::max(v, 0.0);
      st.scale = st.total / st.pos;
      for (double v : st.chat) mass += std::max(v, 0.0) * st.scale;
    }
  } else {
    mass = st.total;
  }
  st.mass1 = mass * h;
  return st;
}

// Reverse sweep over one path; d(cost)/d(theta) accumulates into gbar.
// Returns the path cost. The sweep replays each forward stage from the
// stored path (bitwise, same code paths) and runs its transpose.
double path_grad(const CoefficientBundle& bundle, const PolicyParams& params,
                 const Grid1D& grid, int m, const NoisePath& noise,
                 const QuadratureLayout& quad, const TriDiag& M, std::span<double> gbar) {
  const SpdePath path = evolve_spde(bundle, &params, grid, m, noise);
  const double cost = spde_cost(path, bundle);

  const int n = grid.n;
  const std::size_t N = uz(n);
  const double h = grid.h();
  const double dt = path.dt;
  const NormInfo norm{bundle.T, grid.x_lo, grid.x_hi};
  const std::size_t d0 = uz(params.spec.d0());
  const std::size_t Q = quad.pts.size();

  MlpScratch ws;
  // psi = 1 - h sum(c_m) seeds the sweep
  std::vector<double> cbar(N, -h);
  std::vector<double> cbar_prev(N), crep_bar(N), chat_bar(N), w_bar(N), p_bar(N), rhs(N),
      tmp(N), cstar(N), cstar_bar(N), y(N);
  std::vector<double> u_bar(Q);
  std::vector<double> phi_bar(d0), g0val(d0), g0bar(d0);

  for (int k = m - 1; k >= 0; --k) {
    const double t = k * dt;
    const auto& p_next = path.raw[uz(k + 1)];
    const auto& c_next = path.clipped[uz(k + 1)].c();
    const SubProbGrid& nu = path.clipped[uz(k)];
    const auto& rec = path.steps[uz(k)];
    const double dW = noise.dW0[uz(k)];
    const MeasureView view(nu);

    // clipped[k+1] = cap(repair(M^{-1} clip(p_{k+1}))), backwards stage by
    // stage along the branches the forward took
    const ClipStage st = replay_clip(p_next, M, h);
    if (st.dead) {
      // zero measure is locally constant in p
      std::fill(p_bar.begin(), p_bar.end(), 0.0);
    } else {
      if (st.mass1 > 1.0) {
        double dot = 0.0;
        for (std::size_t i = 0; i < N; ++i) dot += cbar[i] * c_next[i];
        for (std::size_t i = 0; i < N; ++i) crep_bar[i] = (cbar[i] - h * dot) / st.mass1;
      } else {
        crep_bar = cbar;
      }
      if (st.neg) {
        double dotp = 0.0;
        for (std::size_t i = 0; i < N; ++i) dotp += crep_bar[i] * std::max(st.chat[i], 0.0);
        const double p2 = st.pos * st.pos;
        for (std::size_t i = 0; i < N; ++i) {
          const double on = st.chat[i] > 0.0 ? 1.0 : 0.0;
          chat_bar[i] = on * st.scale * crep_bar[i] + dotp * (st.pos - st.total * on) / p2;
        }
      } else {
        chat_bar = crep_bar;
      }
      thomas_solve(M, chat_bar, w_bar);  // M is symmetric
      if (st.cl.r <= 1.0) {
        for (std::size_t i = 0; i < N; ++i) p_bar[i] = p_next[i] > 0.0 ? w_bar[i] : 0.0;
      } else {
        double dotw = 0.0;
        for (std::size_t i = 0; i < N; ++i) dotw += w_bar[i] * std::max(p_next[i], 0.0);
        const double r2 = st.cl.r * st.cl.r;
        for (std::size_t i = 0; i < N; ++i) {
          p_bar[i] = p_next[i] > 0.0 ? w_bar[i] / st.cl.r - dotw / r2 : 0.0;
        }
      }
    }

    // p_{k+1} = M c*, (M - dt A) c* = M c_k + dW (B c_k): adjoint of the
    // solve is the transpose system; bar(A)_ij = dt y_i c*_j stays tridiagonal
    const TriDiag A = assemble_A(bundle, t, nu, quad, rec.u, rec.nu_lambda);
    const TriDiag B = assemble_noise(bundle, t, nu, quad);
    TriDiag S = M;
    for (std::size_t i = 0; i < N; ++i) S.diag[i] -= dt * A.diag[i];
    for (std::size_t i = 0; i + 1 < N; ++i) {
      S.lower[i] -= dt * A.lower[i];
      S.upper[i] -= dt * A.upper[i];
    }
    tridiag_apply(M, nu.c(), rhs);
    tridiag_apply(B, nu.c(), tmp);
    for (std::size_t i = 0; i < N; ++i) rhs[i] += dW * tmp[i];
    thomas_solve(S, rhs, cstar);
    tridiag_apply(M, p_bar, cstar_bar);
    thomas_solve_transpose(S, cstar_bar, y);

    std::fill(cbar_prev.begin(), cbar_prev.end(), 0.0);
    tridiag_apply(M, y, tmp);
    for (std::size_t i = 0; i < N; ++i) cbar_prev[i] += tmp[i];
    tridiag_apply_transpose(B, y, tmp);
    for (std::size_t i = 0; i < N; ++i) cbar_prev[i] += dW * tmp[i];

    // bar(A) feeds the drift only: the diffusion and killing blocks carry no
    // control or measure dependence here. The same quadrature pass also
    // handles the running cost dt w_q f rho.
    std::fill(u_bar.begin(), u_bar.end(), 0.0);
    double ibar_bar = 0.0;
    for (std::size_t q = 0; q < Q; ++q) {
      const auto& pt = quad.pts[q];
      const HatPair hp = hats_at(grid, pt);
      double beff_bar = 0.0;
      for (int ti = 0; ti < 2; ++ti) {
        if (hp.idx[ti] < 0) continue;
        for (int tj = 0; tj < 2; ++tj) {
          if (hp.idx[tj] < 0) continue;
          beff_bar += pt.w * hp.v[tj] * hp.d[ti] * dt * y[uz(hp.idx[ti])] * cstar[uz(hp.idx[tj])];
        }
      }
      u_bar[q] += beff_bar * bundle.db_dg(t, pt.x, view, rec.u[q]);
      ibar_bar -= beff_bar * bundle.alpha(t, pt.x, view);

      const double rho = nu.density(pt.x);
      u_bar[q] += dt * pt.w * bundle.df_dg(t, pt.x, view, rec.u[q]) * rho;
      const double fq = bundle.f(t, pt.x, view, rec.u[q]);
      for (int ti = 0; ti < 2; ++ti) {
        if (hp.idx[ti] >= 0) cbar_prev[uz(hp.idx[ti])] += dt * pt.w * fq * hp.v[ti];
      }
    }
    if (ibar_bar != 0.0) {
      // Ibar = sum_q w_q lambda rho(x_q) on the same quadrature
      for (std::size_t q = 0; q < Q; ++q) {
        const auto& pt = quad.pts[q];
        const HatPair hp = hats_at(grid, pt);
        const double lam = bundle.lambda(t, pt.x, view);
        for (int ti = 0; ti < 2; ++ti) {
          if (hp.idx[ti] >= 0) cbar_prev[uz(hp.idx[ti])] += ibar_bar * pt.w * lam * hp.v[ti];
        }
      }
    }

    // u_q = link(g1(t_hat, x_hat, phi)): g1 slice plus the pooled features
    std::fill(phi_bar.begin(), phi_bar.end(), 0.0);
    for (std::size_t q = 0; q < Q; ++q) {
      if (u_bar[q] != 0.0) {
        policy_backward_feat(t, quad.pts[q].x, rec.phi, u_bar[q], params, norm, gbar, phi_bar,
                             ws);
      }
    }

    // phi = sum over plain per-element Gauss points of w rho(x) g0(x_hat):
    // g0 slice through g0_backward, measure part through d(rho)/d(c_j) = v_j
    double pb = 0.0;
    for (const double v : phi_bar) pb = std::max(pb, std::abs(v));
    if (pb != 0.0) {
      for (int e = 0; e <= n; ++e) {
        const double a = grid.node(e);
        const double mid = a + 0.5 * h;
        for (int j = 0; j < 3; ++j) {
          const double x = mid + 0.5 * h * kGaussX[j];
          const double wq = 0.5 * h * kGaussW[j];
          const double rho = nu.density(x);
          if (rho != 0.0) {
            for (std::size_t r = 0; r < d0; ++r) g0bar[r] = wq * rho * phi_bar[r];
            g0_backward(x, g0bar, params, norm, gbar, ws);
          }
          g0_forward(x, params, norm, g0val, ws);
          double dot = 0.0;
          for (std::size_t r = 0; r < d0; ++r) dot += phi_bar[r] * g0val[r];
          const double v0 = (grid.node(e + 1) - x) / h;
          const double v1 = (x - a) / h;
          if (e > 0) cbar_prev[uz(e - 1)] += wq * v0 * dot;
          if (e < n) cbar_prev[uz(e)] += wq * v1 * dot;
        }
      }
    }

    std::swap(cbar, cbar_prev);
  }
  // c_0 comes from the initial condition alone; the sweep ends here.
  return cost;
}

}  // namespace

GradReport grad_cost(const CoefficientBundle& bundle, const PolicyParams& params,
                     const Grid1D& grid, int m, int K, std::uint64_t seed, int workers) {
  validate_gradient_bundle(bundle);
  if (K < 1) throw std::invalid_argument("grad_cost: K must be positive");
  if (m < 1) throw std::invalid_argument("grad_cost: need at least one time step");
  const std::size_t P = params.theta.size();
  const double dt = bundle.T / m;
  const QuadratureLayout quad = fem_quadrature(grid, bundle);
  const TriDiag M = mass_matrix(grid);

  std::vector<std::vector<double>> slots(uz(K));
  std::vector<double> costs(uz(K), 0.0);
  std::vector<std::exception_ptr> errs(uz(K));

#ifdef _OPENMP
  const int nt = workers > 0 ? workers : omp_get_max_threads();
#pragma omp parallel for schedule(dynamic) num_threads(nt)
#else
  (void)workers;
#endif
  for (int k = 0; k < K; ++k) {
    try {
      slots[uz(k)].assign(P, 0.0);
      const NoisePath np =
          NoisePath::make(m, dt, derive_seed(seed, "mc-path", static_cast<std::uint64_t>(k)));
      costs[uz(k)] = path_grad(bundle, params, grid, m, np, quad, M, slots[uz(k)]);
    } catch (...) {
      errs[uz(k)] = std::current_exception();
    }
  }
  for (const auto& e : errs) {
    if (e) std::rethrow_exception(e);
  }

  GradReport rep;
  rep.grad.assign(P, 0.0);
  for (int k = 0; k < K; ++k) {  // fixed reduction order for bit-determinism
    for (std::size_t p = 0; p < P; ++p) rep.grad[p] += slots[uz(k)][p];
  }
  double sum = 0.0;
  for (int k = 0; k < K; ++k) sum += costs[uz(k)];
  rep.cost = sum / K;
  double ss = 0.0;
  for (int k = 0; k < K; ++k) {
    const double d = costs[uz(k)] - rep.cost;
    ss += d * d;
  }
  rep.cost_se = K > 1 ? std::sqrt(ss / (K - 1) / K) : 0.0;
  for (std::size_t p = 0; p < P; ++p) {
    rep.grad[p] /= K;
    if (!std::isfinite(rep.grad[p])) throw NumericalBlowup("gradient turned non-finite");
  }
  return rep;
}

std::vector<double> fd_gradient(
    const std::function<double(const std::vector<double>&)>& objective,
    const std::vector<double>& theta, double h_step) {
  if (!(h_step > 0.0)) throw std::invalid_argument("fd_gradient: h_step must be positive");
  std::vector<double> g(theta.size());
  std::vector<double> probe = theta;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    probe[i] = theta[i] + h_step;
    const double up = objective(probe);
    probe[i] = theta[i] - h_step;
    const double dn = objective(probe);
    probe[i] = theta[i];
    g[i] = (up - dn) / (2.0 * h_step);
  }
  return g;
}

std::vector<double> fd_gradient(const CoefficientBundle& bundle, const PolicyParams& params,
                                const Grid1D& grid, int m, int K, std::uint64_t seed,
                                double h_step, int workers) {
  PolicyParams probe = params;
  return fd_gradient(
      [&](const std::vector<double>& theta) {
        probe.theta = theta;
        return mc_cost(bundle, &probe, K, m, grid, seed, workers).mean;
      },
      params.theta, h_step);
}

GradReport gradcheck(const CoefficientBundle& bundle, const PolicyParams& params,
                     const Grid1D& grid, int m, int K, std::uint64_t seed, double h_step,
                     int workers) {
  GradReport rep = grad_cost(bundle, params, grid, m, K, seed, workers);

  // screen: flag paths whose clip ratio or pre-cap mass sits within 1e-6 of
  // a branch switch, where the finite-difference probe may straddle the kink
  const double dt = bundle.T / m;
  const TriDiag M = mass_matrix(grid);
  const double h = grid.h();
  bool ok = true;
  for (int k = 0; k < K && ok; ++k) {
    const NoisePath np =
        NoisePath::make(m, dt, derive_seed(seed, "mc-path", static_cast<std::uint64_t>(k)));
    const SpdePath path = evolve_spde(bundle, &params, grid, m, np);
    for (int s = 1; s <= m && ok; ++s) {
      const ClipStage st = replay_clip(path.raw[uz(s)], M, h);
      if (std::abs(st.cl.r - 1.0) < 1e-6) ok = false;
      if (!st.dead && std::abs(st.mass1 - 1.0) < 1e-6) ok = false;
    }
  }
  rep.kink_free = ok;

  rep.fd = fd_gradient(bundle, params, grid, m, K, seed, h_step, workers);
  double fmax = 0.0;
  for (const double v : rep.fd) fmax = std::max(fmax, std::abs(v));
  const double floor = 1e-5 * std::max(1.0, fmax);
  rep.rel_err.resize(rep.grad.size());
  rep.max_rel_err = 0.0;
  for (std::size_t i = 0; i < rep.grad.size(); ++i) {
    const double den = std::max({std::abs(rep.fd[i]), std::abs(rep.grad[i]), floor});
    rep.rel_err[i] = std::abs(rep.grad[i] - rep.fd[i]) / den;
    rep.max_rel_err = std::max(rep.max_rel_err, rep.rel_err[i]);
  }
  return rep;
}

TrainConfig TrainConfig::defaults() {
  TrainConfig c;
  c.stages = {{500, 128, 128, 128}, {100, 256, 256, 256}};
  return c;
}

TrainResult train(const CoefficientBundle& bundle, const TrainConfig& config,
                  const PolicySpec* spec) {
  if (config.stages.empty()) throw std::invalid_argument("train: need at least one stage");
  for (const TrainStage& st : config.stages) {
    if (st.epochs < 1 || st.n < 2 || st.m < 1 || st.K < 1) {
      throw std::invalid_argument("train: invalid stage sizes");
    }
  }
  if (!(config.eta >= 0.0)) throw std::invalid_argument("train: learning rate must be >= 0");
  if (!(config.x_lo < config.x_hi)) throw std::invalid_argument("train: empty domain");
  if (config.grad_mode == GradMode::FiniteDiff && !(config.fd_step > 0.0)) {
    throw std::invalid_argument("train: fd_step must be positive");
  }
  if (config.optimizer == Optimizer::Momentum &&
      !(config.momentum_beta >= 0.0 && config.momentum_beta < 1.0)) {
    throw std::invalid_argument("train: momentum_beta must lie in [0, 1)");
  }

  const PolicySpec sp =
      spec ? *spec : PolicySpec::defaults(bundle.control_lo, bundle.control_hi);
  TrainResult res;
  res.params = init_params(sp, derive_seed(config.seed, "init"));
  std::vector<double> vel(res.params.theta.size(), 0.0);

  int epoch_index = 0;
  for (const TrainStage& st : config.stages) {
    const Grid1D grid(config.x_lo, config.x_hi, st.n);
    for (int e = 0; e < st.epochs; ++e, ++epoch_index) {
      const std::uint64_t es =
          derive_seed(config.seed, "epoch", static_cast<std::uint64_t>(epoch_index));
      GradReport rep;
      try {
        if (config.grad_mode == GradMode::Adjoint) {
          rep = grad_cost(bundle, res.params, grid, st.m, st.K, es, config.workers);
        } else {
          rep.grad =
              fd_gradient(bundle, res.params, grid, st.m, st.K, es, config.fd_step,
                          config.workers);
          for (const double g : rep.grad) {
            if (!std::isfinite(g)) throw NumericalBlowup("gradient turned non-finite");
          }
          const McCost mc = mc_cost(bundle, &res.params, st.K, st.m, grid, es, config.workers);
          rep.cost = mc.mean;
          rep.cost_se = mc.se;
        }
      } catch (const NumericalBlowup&) {
        // params still holds the last finite iterate
        res.aborted = true;
        return res;
      } catch (const IllConditionedStep&) {
        // an aggressive step drove the policy somewhere the scheme cannot
        // integrate; same recovery, keep the last good iterate
        res.aborted = true;
        return res;
      }
      res.cost_history.push_back(rep.cost);
      res.cost_se.push_back(rep.cost_se);
      for (std::size_t i = 0; i < res.params.theta.size(); ++i) {
        double step = rep.grad[i];
        if (config.optimizer == Optimizer::Momentum) {
          vel[i] = config.momentum_beta * vel[i] + rep.grad[i];
          step = vel[i];
        }
        res.params.theta[i] -= config.eta * step;
      }
      ++res.epochs_run;
    }
    res.stage_params.push_back(res.params);
  }
  return res;
}

CostParts cost_parts(const CoefficientBundle& bundle, const PolicyParams* policy, int K, int m,
                     const Grid1D& grid, std::uint64_t seed, int workers) {
  if (K < 1) throw std::invalid_argument("cost_parts: K must be positive");
  std::vector<double> totals(uz(K), 0.0);
  std::vector<double> terms(uz(K), 0.0);
  std::vector<std::exception_ptr> errs(uz(K));
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
      const SpdePath path = evolve_spde(bundle, policy, grid, m, np);
      totals[uz(k)] = spde_cost(path, bundle);
      terms[uz(k)] = bundle.psi(MeasureView(path.clipped.back()));
    } catch (...) {
      errs[uz(k)] = std::current_exception();
    }
  }
  for (const auto& e : errs) {
    if (e) std::rethrow_exception(e);
  }

  CostParts out;
  double tsum = 0.0;
  double psum = 0.0;
  for (int k = 0; k < K; ++k) {
    tsum += totals[uz(k)];
    psum += terms[uz(k)];
  }
  out.total = tsum / K;
  out.terminal = psum / K;
  out.running = out.total - out.terminal;
  double ss = 0.0;
  for (int k = 0; k < K; ++k) {
    const double d = totals[uz(k)] - out.total;
    ss += d * d;
  }
  out.se = K > 1 ? std::sqrt(ss / (K - 1) / K) : 0.0;
  return out;
}

std::vector<SweepRow> sweep(const std::function<CoefficientBundle(double)>& factory,
                            std::span<const double> values, const TrainConfig& config,
                            const PolicySpec* spec) {
  std::vector<SweepRow> rows;
  rows.reserve(values.size());
  const std::uint64_t eval_seed = derive_seed(config.seed, "eval");
  for (const double v : values) {
    const CoefficientBundle bundle = factory(v);
    const TrainResult tr = train(bundle, config, spec);
    const TrainStage& last = config.stages.back();
    const Grid1D grid(config.x_lo, config.x_hi, last.n);
    const CostParts cp =
        cost_parts(bundle, &tr.params, last.K, last.m, grid, eval_seed, config.workers);
    rows.push_back({v, cp.total, cp.running, cp.terminal});
  }
  return rows;
}

}  // namespace mfc
