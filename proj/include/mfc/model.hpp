#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mfc/measures.hpp"
#include "mfc/rng.hpp"

namespace mfc {

// Cheap non-owning view letting coefficient callbacks accept either measure
// representation (grid densities from the field solver, atom clouds from the
// particle system).
class MeasureView {
 public:
  MeasureView() = default;
  explicit MeasureView(const SubProbGrid& g) : grid_(&g) {}
  explicit MeasureView(const AtomicSubProb& a) : atoms_(&a) {}

  [[nodiscard]] double mass() const;
  [[nodiscard]] double moment_p(double p) const;
  [[nodiscard]] bool empty() const { return !grid_ && !atoms_; }

 private:
  const SubProbGrid* grid_ = nullptr;
  const AtomicSubProb* atoms_ = nullptr;
};

using Coeff = std::function<double(double t, double x, const MeasureView& nu)>;
using CoeffG = std::function<double(double t, double x, const MeasureView& nu, double g)>;

// Model data for one control problem: dynamics coefficients, killing intensity,
// costs, control set and initial law. All callbacks must be total on
// [0,T] x [x_lo,x_hi] x subprob x G.
struct CoefficientBundle {
  std::string name;
  double T = 1.0;

  CoeffG b;      // drift, depends on the control
  Coeff sigma;   // idiosyncratic vol
  Coeff sigma0;  // common vol
  Coeff alpha;   // contagion jump size
  Coeff lambda;  // killing intensity (>= 0, vanishing on x >= 0)
  CoeffG f;      // running cost integrand
  std::function<double(const MeasureView&)> psi;  // terminal cost

  double control_lo = 0.0;
  std::optional<double> control_hi;  // absent = half line [lo, inf)

  // x-locations where lambda is not smooth; quadrature elements split here.
  std::vector<double> lambda_kinks;

  // Initial law: nodal density projection plus an exact sampler for particles.
  std::function<SubProbGrid(const Grid1D&)> init;
  std::function<double(Rng&)> init_sampler;  // optional; inverse-CDF fallback

  // Structure flags the gradient path relies on. measure_free means sigma,
  // sigma0, alpha, lambda and the non-control part of b/f ignore the measure
  // argument; psi_is_loss means psi(nu) = 1 - nu(R).
  bool coeffs_measure_free = false;
  bool psi_is_loss = false;
  CoeffG db_dg;  // derivative of b in the control, required by the adjoint
  CoeffG df_dg;  // derivative of f in the control
};

struct BailoutParams {
  double alpha = 1.0;    // contagion strength
  double lambda0 = 10.0; // intensity slope on x < 0
  double sigma = 0.1;
  double sigma0 = 0.1;
  double w = 5.0;        // linear control price in the running cost
  double gamma_k = 6.0;  // initial law Gamma(shape k, scale theta), mean 0.1
  double gamma_theta = 1.0 / 60.0;
};

// Bank-bailout scenario: b = g, lambda = lambda0 * x_-, f = w * g, psi = loss,
// T = 1, control set [0, inf), Gamma(6, 1/60) initial condition.
[[nodiscard]] CoefficientBundle scenario_bailout(const BailoutParams& p);

// Helper for the correlation sweep: splits a fixed total variance
// sigma^2 + sigma0^2 between common and idiosyncratic noise, rho in [0,1).
struct VolSplit {
  double sigma;
  double sigma0;
};
[[nodiscard]] VolSplit vol_from_rho(double rho, double total_var);

// Nodal projection of a Gamma(k, theta) density onto the grid window,
// rescaled so the grid mass equals the analytic mass of the window.
[[nodiscard]] SubProbGrid gamma_init(double k, double theta, const Grid1D& grid);

// Same for a Gaussian N(mu, sd^2).
[[nodiscard]] SubProbGrid gaussian_init(double mu, double sd, const Grid1D& grid);

// Samples the named validation lattice and reports violated standing
// assumptions (sign of lambda, boundedness, growth) as human-readable strings;
// empty result means the bundle looks usable.
[[nodiscard]] std::vector<std::string> validate(const CoefficientBundle& bundle,
                                                const Grid1D& grid);

}  // namespace mfc
