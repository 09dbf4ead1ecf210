#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mfc/fem.hpp"
#include "mfc/model.hpp"
#include "mfc/particle.hpp"

namespace mfc {

// Regularized-intensity family: per lambda0 value, FEM loss paths under the
// killing intensity lambda0 (x)_- on a shared set of common-noise seeds, plus
// the particle kill-gap statistics for the same intensities.
struct LossPathFamily {
  std::vector<double> lambda0;
  double dt = 0.0;
  // loss[l][k] is the (m+1)-lattice loss path of noise path k under
  // lambda0[l]; path k uses the same noise for every l
  std::vector<std::vector<std::vector<double>>> loss;
  std::vector<KillGapRow> kill_gap;
};

// Zero-control FEM sweep over a strictly increasing intensity list. The
// bundle's own killing intensity is replaced by lambda0 (x)_- per member
// (kink registered at 0); everything else is taken as-is. Noise path k is
// derive_seed(seed, "mc-path", k) for every lambda0, so paths are coupled
// across the family. Kill-gap statistics run the particle system with
// kill_reps repetitions of kill_N particles on derived seeds.
[[nodiscard]] LossPathFamily intensity_sweep(const CoefficientBundle& bundle,
                                             std::span<const double> lambda0_list,
                                             const Grid1D& grid, int m, int K,
                                             std::uint64_t seed, int workers = 0,
                                             int kill_N = 200, int kill_reps = 16);

// Picard iterates of the conditional loss on one common-noise path.
struct MinimalIteration {
  std::vector<std::vector<double>> iterates;  // L^(0) = 0, then one per solve
  std::vector<double> fixed_point;            // last iterate
  int iterations = 0;                         // number of solves performed
  bool converged = false;                     // sup gap <= tol before max_iter
  double last_gap = 0.0;                      // final sup-norm gap
};

// Minimal-solution scheme for a control-free scenario: start from L^(0) = 0
// and repeatedly solve the linear Fokker-Planck step whose contagion drift
// uses the exogenous increments of the previous loss iterate (the measure's
// own killing keeps the intensity lambda0 (x)_-). Deterministic per noise
// path. Non-convergence is reported through converged/last_gap, not thrown.
[[nodiscard]] MinimalIteration minimal_iteration(const CoefficientBundle& bundle,
                                                 double lambda0, const Grid1D& grid, int m,
                                                 const NoisePath& noise, double tol,
                                                 int max_iter);

// Monotone-limit diagnostics of a loss family.
struct MonotoneLimit {
  std::vector<double> limit;         // per time: path-mean of sup over the family
  std::vector<double> per_time_gap;  // |mean path of last member - second-to-last|
  // per member: sup_t (limit - mean path). For a lambda0-monotone family the
  // members increase toward the limit, so these shrink across consecutive
  // members; a plateau signals the regularization has saturated.
  std::vector<double> limit_gap;
  bool monotone = true;    // family nondecreasing in lambda0 within tol
  double worst_violation = 0.0;  // largest pointwise decrease found
};

// Pointwise sup-limit candidate and convergence gaps. A family that is not
// nondecreasing in lambda0 (beyond tol) is flagged via monotone = false;
// structurally inconsistent families (ragged shapes) throw.
[[nodiscard]] MonotoneLimit monotone_limit(const LossPathFamily& family, double tol = 1e-3);

}  // namespace mfc
