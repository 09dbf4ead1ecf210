#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mfc/errors.hpp"
#include "mfc/measures.hpp"
#include "mfc/model.hpp"
#include "mfc/policy.hpp"
#include "mfc/rng.hpp"

namespace mfc {

// Tridiagonal n x n matrix: lower[i] = T(i+1, i), diag[i] = T(i, i),
// upper[i] = T(i, i+1).
struct TriDiag {
  int n = 0;
  std::vector<double> lower;  // n - 1 entries
  std::vector<double> diag;   // n entries
  std::vector<double> upper;  // n - 1 entries

  static TriDiag zeros(int n);
};

void tridiag_apply(const TriDiag& T, std::span<const double> x, std::span<double> y);
void tridiag_apply_transpose(const TriDiag& T, std::span<const double> x, std::span<double> y);

// Thomas solve of T x = rhs (resp. T^T x = rhs) in O(n). No pivoting; the
// elimination guards its pivots and multipliers and throws IllConditionedStep
// on breakdown (singular or near-singular system).
void thomas_solve(const TriDiag& T, std::span<const double> rhs, std::span<double> x);
void thomas_solve_transpose(const TriDiag& T, std::span<const double> rhs, std::span<double> x);

// Hat-basis Gram matrix (h/6) tridiag(1, 4, 1).
[[nodiscard]] TriDiag mass_matrix(const Grid1D& grid);

// Quadrature shared by all FEM integrals of a bundle: 3-point Gauss per
// element, elements split at lambda's kinks.
[[nodiscard]] QuadratureLayout fem_quadrature(const Grid1D& grid,
                                              const CoefficientBundle& bundle);

// <nu, lambda(t, .)> on the FEM quadrature.
[[nodiscard]] double measure_lambda(const CoefficientBundle& bundle, double t,
                                    const SubProbGrid& nu, const QuadratureLayout& quad);

// Galerkin matrix of the generator:
//   A_ij = int (b - alpha * nu_lambda) v_j v_i' - int (a v_j)' v_i'
//          - int lambda v_i v_j,   a = (sigma^2 + sigma0^2) / 2,
// with a' by central differences. u supplies the control at quad.pts order;
// nu_lambda is the killing rate <nu, lambda> feeding the contagion drift.
[[nodiscard]] TriDiag assemble_A(const CoefficientBundle& bundle, double t,
                                 const SubProbGrid& nu, const QuadratureLayout& quad,
                                 std::span<const double> u, double nu_lambda);

// Noise matrix B_ij = <v_j, sigma0(t, ., nu) v_i'>.
[[nodiscard]] TriDiag assemble_noise(const CoefficientBundle& bundle, double t,
                                     const SubProbGrid& nu, const QuadratureLayout& quad);

// Positivity/mass clip of raw moments: weights_i = (p_i)_+ / max(r, 1) with
// r = sum_i (p_i)_+ (r returned for diagnostics).
struct ClipResult {
  std::vector<double> weights;
  double r = 0.0;
};
[[nodiscard]] ClipResult clip_normalize(std::span<const double> p);

// The unique density in span(v_i) with <rho, v_j> = weights_j, via the Gram
// solve; negative nodal values are floored at 0 with a mass-preserving rescale
// (and the total mass capped at 1).
[[nodiscard]] SubProbGrid density_from_moments(std::span<const double> weights,
                                               const Grid1D& grid);

// One semi-implicit Euler-Maruyama step in moment coordinates. c_k holds the
// nodal values of the clipped step-k measure; the step solves
//   (M - dt A) c_next = M c_k + (B c_k) dW0
// and returns the raw next moments p_next = M c_next. c_next is exported when
// requested (the gradient pass needs it). Throws IllConditionedStep when the
// implicit matrix is badly unbalanced (off-diagonal mass more than 8x the
// diagonal: the time step cannot resolve the drift).
[[nodiscard]] std::vector<double> semi_implicit_step(std::span<const double> c_k,
                                                     const TriDiag& A, const TriDiag& B,
                                                     const TriDiag& M, double dW0, double dt,
                                                     std::vector<double>* c_next = nullptr);

// Per-step data the cost and gradient passes reuse.
struct StepRecord {
  std::vector<double> u;    // control at quad.pts order
  std::vector<double> phi;  // pooled policy features (empty without a policy)
  double nu_lambda = 0.0;   // killing rate used in the drift
};

struct SpdePath {
  Grid1D grid;
  double dt = 0.0;
  std::vector<std::vector<double>> raw;  // m+1 moment vectors
  std::vector<SubProbGrid> clipped;      // m+1 measures
  std::vector<double> loss;              // m+1 values 1 - mass
  NoisePath noise;
  std::vector<StepRecord> steps;  // m records
};

// Full pipeline: p0_i = <nu_0, v_i>, then per step assemble A and B from the
// clipped measure, evaluate the policy on the quadrature nodes, step, clip.
// policy == nullptr means the zero control clamped into the control set. A
// nonempty exo_dL (size m) replaces the drift's killing rate by the exogenous
// rate exo_dL[k] / dt (the measure's own killing still runs); used by the
// minimal-solution iteration.
[[nodiscard]] SpdePath evolve_spde(const CoefficientBundle& bundle,
                                   const PolicyParams* policy, const Grid1D& grid, int m,
                                   const NoisePath& noise,
                                   std::span<const double> exo_dL = {});

// Per-path discrete cost sum_k dt <nu_k, f(t_k, ., nu_k, u_k)> + psi(nu_m),
// the f-integral on the same kink-split quadrature the assembly uses.
[[nodiscard]] double spde_cost(const SpdePath& path, const CoefficientBundle& bundle);

// Monte-Carlo cost over K independent common-noise paths with derived seeds.
// se is the standard error (sample std / sqrt(K)). Deterministic in (inputs,
// seed) for any worker count.
struct McCost {
  double mean = 0.0;
  double se = 0.0;
  std::vector<double> costs;
};
[[nodiscard]] McCost mc_cost(const CoefficientBundle& bundle, const PolicyParams* policy,
                             int K, int m, const Grid1D& grid, std::uint64_t seed,
                             int workers = 0);

}  // namespace mfc
