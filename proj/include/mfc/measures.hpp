#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace mfc {

// Uniform grid on [x_lo, x_hi] with n interior nodes; the domain must straddle 0
// because the killing intensity has its kink there. h = (x_hi - x_lo) / (n + 1),
// node(i) = x_lo + i*h for i = 0..n+1; boundary nodes carry Dirichlet zeros.
struct Grid1D {
  double x_lo = -1.0;
  double x_hi = 1.0;
  int n = 1;

  Grid1D() = default;
  Grid1D(double lo, double hi, int n_interior);

  [[nodiscard]] double h() const { return (x_hi - x_lo) / (n + 1); }
  [[nodiscard]] double node(int i) const { return x_lo + i * h(); }

  friend bool operator==(const Grid1D&, const Grid1D&) = default;
};

// 3-point Gauss-Legendre points per element, elements split at registered kink
// abscissae (exact for integrands piecewise-polynomial of degree <= 5 between
// kinks). elem identifies the mesh element so hat supports can be recovered.
struct QuadratureLayout {
  struct Point {
    double x;
    double w;
    int elem;  // element index e: interval [node(e), node(e+1)]
  };
  Grid1D grid;
  std::vector<Point> pts;

  static QuadratureLayout make(const Grid1D& grid, std::span<const double> kinks);
};

// Sub-probability measure with piecewise-linear density sum_i c_i * v_i on the
// interior hats of a Grid1D. Invariants: c_i >= 0 and finite, h * sum c_i <= 1
// (up to a small fp slack).
class SubProbGrid {
 public:
  SubProbGrid() = default;
  SubProbGrid(Grid1D grid, std::vector<double> c);

  [[nodiscard]] const Grid1D& grid() const { return grid_; }
  [[nodiscard]] const std::vector<double>& c() const { return c_; }
  [[nodiscard]] double mass() const { return mass_; }
  // Density value at x (0 outside [x_lo, x_hi]).
  [[nodiscard]] double density(double x) const;

  static SubProbGrid zero(const Grid1D& grid);

 private:
  Grid1D grid_;
  std::vector<double> c_;
  double mass_ = 0.0;
};

// Sub-probability measure as a finite sum of nonnegative atoms.
class AtomicSubProb {
 public:
  AtomicSubProb() = default;
  AtomicSubProb(std::vector<double> xs, std::vector<double> ws);

  [[nodiscard]] const std::vector<double>& xs() const { return x_; }
  [[nodiscard]] const std::vector<double>& ws() const { return w_; }
  [[nodiscard]] double mass() const { return mass_; }
  [[nodiscard]] std::size_t size() const { return x_.size(); }

 private:
  std::vector<double> x_;
  std::vector<double> w_;
  double mass_ = 0.0;
};

struct MassLoss {
  double mass;
  double loss;  // 1 - mass
};

[[nodiscard]] MassLoss mass_and_loss(const SubProbGrid& nu);
[[nodiscard]] MassLoss mass_and_loss(const AtomicSubProb& nu);

// Raw p-th absolute moment, integral of |x|^p against nu (p >= 0).
[[nodiscard]] double moment(const SubProbGrid& nu, double p);
[[nodiscard]] double moment(const AtomicSubProb& nu, double p);

// <nu, phi> by kink-split Gauss quadrature (grid) or direct summation (atoms).
[[nodiscard]] double pair(const SubProbGrid& nu, const std::function<double(double)>& phi,
                          std::span<const double> kinks = {});
[[nodiscard]] double pair(const AtomicSubProb& nu, const std::function<double(double)>& phi);

// Empirical sub-probability of the alive particles: each alive particle
// contributes an atom of weight 1/N (N = total population, dead excluded).
[[nodiscard]] AtomicSubProb empirical_of(std::span<const double> positions,
                                         std::span<const std::uint8_t> alive, int N);

// Sub-probability metric d_p(nu1, nu2) = W_p(mu1, mu2) + |nu1(R) - nu2(R)| with
// mu_i the compensation of nu_i by an atom at 0 carrying the missing mass.
// p = 1 uses the exact CDF-difference integral; p = 2 uses the fixed
// 4096-midpoint inverse-CDF rule (an exact metric on quantile vectors).
// Ties in CDF inversion break leftward. Grids need not match.
class DistMeasure {
 public:
  explicit DistMeasure(const SubProbGrid& nu);
  explicit DistMeasure(const AtomicSubProb& nu);

  friend double dist_dp(const DistMeasure& a, const DistMeasure& b, int p);

 private:
  // Compensated CDF: right-continuous, piecewise quadratic between breakpoints,
  // jumps only at breakpoints, total mass exactly 1.
  std::vector<double> bp_;      // sorted breakpoints
  std::vector<double> f_right_; // F(bp_k+) after any atom at bp_k
  std::vector<double> d0_;      // density at bp_k+ inside (bp_k, bp_{k+1})
  std::vector<double> d1_;      // density slope on that interval
  double orig_mass_ = 0.0;      // mass before compensation

  struct Local {
    double f;   // F(x+)
    double d0;  // density just right of x
    double d1;  // density slope there
  };
  [[nodiscard]] Local eval(double x) const;
  void quantiles(std::span<const double> qs_ascending, std::vector<double>& out) const;
};

[[nodiscard]] double dist_dp(const DistMeasure& a, const DistMeasure& b, int p);

template <class M1, class M2>
[[nodiscard]] double dist_dp(const M1& a, const M2& b, int p) {
  return dist_dp(DistMeasure(a), DistMeasure(b), p);
}

}  // namespace mfc
