#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "mfc/fem.hpp"
#include "mfc/model.hpp"
#include "mfc/policy.hpp"

namespace mfc {

// Gradient of the K-path mean cost at one parameter vector, plus the
// finite-difference comparison when a check was requested.
struct GradReport {
  std::vector<double> grad;
  double cost = 0.0;  // K-path mean cost at theta (same paths as the gradient)
  double cost_se = 0.0;
  std::vector<double> fd;       // filled by gradcheck, else empty
  std::vector<double> rel_err;  // per component, filled by gradcheck
  double max_rel_err = 0.0;
  bool kink_free = true;  // gradcheck: no path stepped onto a clip kink
};

// Exact reverse-mode gradient of theta -> mean over K paths of the discrete
// closed-loop cost, differentiated through the cost quadrature, the clipping
// pipeline (one-sided derivative 0 at (.)_+ kinks and r = 1 ties), the mass
// and implicit solves (transpose tridiagonal systems), the assembly, the
// policy nets and the pooling. Paths use derive_seed(seed, "mc-path", k),
// so values and gradients share noise with mc_cost. Requires measure-free
// coefficients, psi_is_loss, and the db_dg / df_dg hooks. Deterministic in
// (inputs, seed) for any worker count; throws NumericalBlowup if a path or
// the accumulated gradient turns non-finite.
[[nodiscard]] GradReport grad_cost(const CoefficientBundle& bundle,
                                   const PolicyParams& params, const Grid1D& grid, int m,
                                   int K, std::uint64_t seed, int workers = 0);

// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h on an arbitrary
// objective; the bundle overload evaluates the same K-path mean cost as
// mc_cost with shared seeds, so it is a like-for-like oracle for grad_cost.
[[nodiscard]] std::vector<double> fd_gradient(
    const std::function<double(const std::vector<double>&)>& objective,
    const std::vector<double>& theta, double h_step);
[[nodiscard]] std::vector<double> fd_gradient(const CoefficientBundle& bundle,
                                              const PolicyParams& params, const Grid1D& grid,
                                              int m, int K, std::uint64_t seed, double h_step,
                                              int workers = 0);

// grad_cost vs fd_gradient with per-component relative errors. kink_free is
// false when some path puts a clip ratio or a mass cap within 1e-6 of its
// switch point, where one-sided derivatives make the comparison meaningless.
[[nodiscard]] GradReport gradcheck(const CoefficientBundle& bundle, const PolicyParams& params,
                                   const Grid1D& grid, int m, int K, std::uint64_t seed,
                                   double h_step = 1e-5, int workers = 0);

struct TrainStage {
  int epochs = 1;
  int n = 128;
  int m = 128;
  int K = 128;
};

enum class Optimizer { Sgd, Momentum };
enum class GradMode { Adjoint, FiniteDiff };

struct TrainConfig {
  std::vector<TrainStage> stages;
  double eta = 0.1;
  Optimizer optimizer = Optimizer::Sgd;
  double momentum_beta = 0.9;
  GradMode grad_mode = GradMode::Adjoint;
  double fd_step = 1e-5;  // used in FiniteDiff mode
  std::uint64_t seed = 1;
  double x_lo = -1.0;
  double x_hi = 1.0;
  int workers = 0;

  // Two-level schedule: 500 epochs at n = m = K = 128, then 100 at 256.
  [[nodiscard]] static TrainConfig defaults();
};

struct TrainResult {
  PolicyParams params;                     // final (last finite iterate on abort)
  std::vector<PolicyParams> stage_params;  // checkpoint after each completed stage
  std::vector<double> cost_history;        // per-epoch K-path mean
  std::vector<double> cost_se;
  int epochs_run = 0;
  // a gradient epoch blew up or became un-integrable; params holds the last
  // good iterate and the failing epoch is absent from the history
  bool aborted = false;
};

// SGD loop over the staged schedule: per epoch one gradient step on fresh
// derived noise seeds (derive_seed(config.seed, "epoch", index)). spec
// selects the policy architecture (defaults to PolicySpec::defaults on the
// bundle's control set); parameters start from init_params with a seed
// derived from config.seed.
[[nodiscard]] TrainResult train(const CoefficientBundle& bundle, const TrainConfig& config,
                                const PolicySpec* spec = nullptr);

// Trained cost decomposition for one parameter value of a scenario family.
struct SweepRow {
  double parameter = 0.0;
  double total = 0.0;
  double running = 0.0;
  double terminal = 0.0;
};

// Trains one policy per parameter value and evaluates it on a fresh set of
// paths (derive_seed(config.seed, "eval"), shared across values so the table
// is comparable across rows).
[[nodiscard]] std::vector<SweepRow> sweep(
    const std::function<CoefficientBundle(double)>& factory, std::span<const double> values,
    const TrainConfig& config, const PolicySpec* spec = nullptr);

// Mean cost split into running and terminal parts over K paths; se refers to
// the total. Same path seeds as mc_cost.
struct CostParts {
  double total = 0.0;
  double running = 0.0;
  double terminal = 0.0;
  double se = 0.0;
};
[[nodiscard]] CostParts cost_parts(const CoefficientBundle& bundle, const PolicyParams* policy,
                                   int K, int m, const Grid1D& grid, std::uint64_t seed,
                                   int workers = 0);

}  // namespace mfc
