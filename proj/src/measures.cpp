#include "mfc/measures.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace mfc {

namespace {

constexpr double kGaussX[3] = {-0.7745966692414834, 0.0, 0.7745966692414834};
constexpr double kGaussW[3] = {5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0};
constexpr double kNegSlack = 1e-12;   // nodal values this far below 0 are fp noise
constexpr double kMassSlack = 1e-8;   // tolerated sub-probability overshoot
constexpr int kQuantilePoints = 4096; // fixed W2 inverse-CDF rule

void check_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw std::invalid_argument(std::string(what) + ": non-finite value");
}

}  // namespace

Grid1D::Grid1D(double lo, double hi, int n_interior) : x_lo(lo), x_hi(hi), n(n_interior) {
  check_finite(lo, "Grid1D");
  check_finite(hi, "Grid1D");
  if (!(lo < 0.0 && 0.0 < hi)) throw std::invalid_argument("Grid1D: need x_lo < 0 < x_hi");
  if (n_interior < 1) throw std::invalid_argument("Grid1D: need n >= 1");
}

QuadratureLayout QuadratureLayout::make(const Grid1D& grid, std::span<const double> kinks) {
  QuadratureLayout lay;
  lay.grid = grid;
  std::vector<double> cuts(kinks.begin(), kinks.end());
  std::sort(cuts.begin(), cuts.end());
  lay.pts.reserve(static_cast<std::size_t>(3 * (grid.n + 1)) + 3 * cuts.size());
  for (int e = 0; e <= grid.n; ++e) {
    const double a = grid.node(e);
    const double b = grid.node(e + 1);
    double left = a;
    auto emit = [&](double lo, double hi) {
      if (!(hi > lo)) return;
      const double mid = 0.5 * (lo + hi);
      const double half = 0.5 * (hi - lo);
      for (int g = 0; g < 3; ++g) {
        lay.pts.push_back({mid + half * kGaussX[g], half * kGaussW[g], e});
      }
    };
    for (const double cut : cuts) {
      if (cut > a && cut < b) {
        emit(left, cut);
        left = cut;
      }
    }
    emit(left, b);
  }
  return lay;
}

SubProbGrid::SubProbGrid(Grid1D grid, std::vector<double> c) : grid_(grid), c_(std::move(c)) {
  if (static_cast<int>(c_.size()) != grid_.n) {
    throw std::invalid_argument("SubProbGrid: weight count must equal grid.n");
  }
  double s = 0.0;
  for (double& v : c_) {
    check_finite(v, "SubProbGrid");
    if (v < 0.0) {
      if (v < -kNegSlack) throw std::invalid_argument("SubProbGrid: negative nodal weight");
      v = 0.0;
    }
    s += v;
  }
  mass_ = grid_.h() * s;
  if (mass_ > 1.0 + kMassSlack) throw std::invalid_argument("SubProbGrid: mass exceeds 1");
}

SubProbGrid SubProbGrid::zero(const Grid1D& grid) {
  return SubProbGrid(grid, std::vector<double>(static_cast<std::size_t>(grid.n), 0.0));
}

double SubProbGrid::density(double x) const {
  const double h = grid_.h();
  if (x <= grid_.x_lo || x >= grid_.x_hi) return 0.0;
  const double s = (x - grid_.x_lo) / h;
  int e = static_cast<int>(s);
  e = std::clamp(e, 0, grid_.n);
  const double frac = s - e;
  const double cl = (e >= 1 && e <= grid_.n) ? c_[static_cast<std::size_t>(e - 1)] : 0.0;
  const double cr = (e + 1 >= 1 && e + 1 <= grid_.n) ? c_[static_cast<std::size_t>(e)] : 0.0;
  return cl * (1.0 - frac) + cr * frac;
}

AtomicSubProb::AtomicSubProb(std::vector<double> xs, std::vector<double> ws)
    : x_(std::move(xs)), w_(std::move(ws)) {
  if (x_.size() != w_.size()) throw std::invalid_argument("AtomicSubProb: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < x_.size(); ++i) {
    check_finite(x_[i], "AtomicSubProb");
    check_finite(w_[i], "AtomicSubProb");
    if (w_[i] < 0.0) throw std::invalid_argument("AtomicSubProb: negative atom weight");
    s += w_[i];
  }
  mass_ = s;
  if (mass_ > 1.0 + kMassSlack) throw std::invalid_argument("AtomicSubProb: mass exceeds 1");
}

MassLoss mass_and_loss(const SubProbGrid& nu) { return {nu.mass(), 1.0 - nu.mass()}; }
MassLoss mass_and_loss(const AtomicSubProb& nu) { return {nu.mass(), 1.0 - nu.mass()}; }

double pair(const SubProbGrid& nu, const std::function<double(double)>& phi,
            std::span<const double> kinks) {
  const auto lay = QuadratureLayout::make(nu.grid(), kinks);
  double acc = 0.0;
  for (const auto& q : lay.pts) acc += q.w * nu.density(q.x) * phi(q.x);
  return acc;
}

double pair(const AtomicSubProb& nu, const std::function<double(double)>& phi) {
  double acc = 0.0;
  for (std::size_t i = 0; i < nu.size(); ++i) acc += nu.ws()[i] * phi(nu.xs()[i]);
  return acc;
}

double moment(const SubProbGrid& nu, double p) {
  if (p < 0.0) throw std::invalid_argument("moment: need p >= 0");
  const double kinks[1] = {0.0};
  return pair(nu, [p](double x) { return std::pow(std::abs(x), p); }, kinks);
}

double moment(const AtomicSubProb& nu, double p) {
  if (p < 0.0) throw std::invalid_argument("moment: need p >= 0");
  double acc = 0.0;
  for (std::size_t i = 0; i < nu.size(); ++i) {
    acc += nu.ws()[i] * std::pow(std::abs(nu.xs()[i]), p);
  }
  return acc;
}

AtomicSubProb empirical_of(std::span<const double> positions,
                           std::span<const std::uint8_t> alive, int N) {
  if (positions.size() != alive.size()) throw std::invalid_argument("empirical_of: size mismatch");
  if (N < 0 || static_cast<std::size_t>(N) != positions.size()) {
    throw std::invalid_argument("empirical_of: N must match array length");
  }
  std::vector<double> xs;
  xs.reserve(positions.size());
  for (std::size_t i = 0; i < positions.size(); ++i) {
    if (alive[i]) xs.push_back(positions[i]);
  }
  const std::size_t count = xs.size();
  const double w = N > 0 ? 1.0 / N : 0.0;
  return AtomicSubProb(std::move(xs), std::vector<double>(count, w));
}

namespace {

// Scratch used while assembling a compensated CDF.
struct CdfScratch {
  std::vector<double> bp;
  std::vector<double> jump;  // atom mass sitting exactly at bp
  std::vector<double> d0, d1;
};

}  // namespace

DistMeasure::DistMeasure(const SubProbGrid& nu) {
  orig_mass_ = nu.mass();
  const Grid1D& g = nu.grid();
  bp_.reserve(static_cast<std::size_t>(g.n) + 3);
  for (int i = 0; i <= g.n + 1; ++i) bp_.push_back(g.node(i));
  bp_.push_back(0.0);  // compensation atom site; also a density kink is harmless
  std::sort(bp_.begin(), bp_.end());
  bp_.erase(std::unique(bp_.begin(), bp_.end()), bp_.end());

  const std::size_t nb = bp_.size();
  f_right_.assign(nb, 0.0);
  d0_.assign(nb, 0.0);
  d1_.assign(nb, 0.0);
  const double deficit = std::max(0.0, 1.0 - orig_mass_);
  double acc = 0.0;
  for (std::size_t k = 0; k < nb; ++k) {
    if (bp_[k] == 0.0) acc += deficit;
    f_right_[k] = acc;
    if (k + 1 < nb) {
      // density is continuous piecewise linear, so endpoint values determine
      // the segment exactly
      const double l = bp_[k];
      const double r = bp_[k + 1];
      const double pl = nu.density(l);
      const double pr = nu.density(r);
      d0_[k] = pl;
      d1_[k] = (pr - pl) / (r - l);
      acc += 0.5 * (pl + pr) * (r - l);
    }
  }
  f_right_.back() = 1.0;  // absorb fp residue; both tails must agree exactly
}

DistMeasure::DistMeasure(const AtomicSubProb& nu) {
  orig_mass_ = nu.mass();
  struct Atom {
    double x, w;
  };
  std::vector<Atom> atoms;
  atoms.reserve(nu.size() + 1);
  for (std::size_t i = 0; i < nu.size(); ++i) atoms.push_back({nu.xs()[i], nu.ws()[i]});
  atoms.push_back({0.0, std::max(0.0, 1.0 - orig_mass_)});
  std::sort(atoms.begin(), atoms.end(), [](const Atom& a, const Atom& b) { return a.x < b.x; });

  double acc = 0.0;
  for (std::size_t i = 0; i < atoms.size(); ++i) {
    acc += atoms[i].w;
    if (i + 1 < atoms.size() && atoms[i + 1].x == atoms[i].x) continue;
    bp_.push_back(atoms[i].x);
    f_right_.push_back(acc);
  }
  d0_.assign(bp_.size(), 0.0);
  d1_.assign(bp_.size(), 0.0);
  f_right_.back() = 1.0;
}

DistMeasure::Local DistMeasure::eval(double x) const {
  if (x < bp_.front()) return {0.0, 0.0, 0.0};
  if (x >= bp_.back()) return {1.0, 0.0, 0.0};
  const auto it = std::upper_bound(bp_.begin(), bp_.end(), x);
  const std::size_t k = static_cast<std::size_t>(it - bp_.begin()) - 1;
  const double s = x - bp_[k];
  return {f_right_[k] + d0_[k] * s + 0.5 * d1_[k] * s * s, d0_[k] + d1_[k] * s, d1_[k]};
}

namespace {

// Integral of |a2 s^2 + a1 s + a0| over [0, L], splitting at interior roots.
double abs_quadratic_integral(double a2, double a1, double a0, double L) {
  double roots[2];
  int nr = 0;
  if (a2 == 0.0) {
    if (a1 != 0.0) {
      const double r = -a0 / a1;
      if (r > 0.0 && r < L) roots[nr++] = r;
    }
  } else {
    const double disc = a1 * a1 - 4.0 * a2 * a0;
    if (disc > 0.0) {
      const double sq = std::sqrt(disc);
      const double q = -0.5 * (a1 + std::copysign(sq, a1 == 0.0 ? 1.0 : a1));
      double r1 = q / a2;
      double r2 = (q != 0.0) ? a0 / q : 0.0;
      if (r1 > r2) std::swap(r1, r2);
      if (r1 > 0.0 && r1 < L) roots[nr++] = r1;
      if (r2 > 0.0 && r2 < L && r2 != r1) roots[nr++] = r2;
    }
  }
  auto anti = [&](double s) { return ((a2 / 3.0 * s + 0.5 * a1) * s + a0) * s; };
  double lo = 0.0;
  double total = 0.0;
  for (int i = 0; i <= nr; ++i) {
    const double hi = (i < nr) ? roots[i] : L;
    total += std::abs(anti(hi) - anti(lo));
    lo = hi;
  }
  return total;
}

}  // namespace

void DistMeasure::quantiles(std::span<const double> qs, std::vector<double>& out) const {
  out.resize(qs.size());
  std::size_t k = 0;
  const std::size_t last = bp_.size() - 1;
  for (std::size_t j = 0; j < qs.size(); ++j) {
    const double q = qs[j];
    for (;;) {
      if (f_right_[k] >= q) {
        out[j] = bp_[k];  // jump at bp_k reaches q; leftward tie break
        break;
      }
      if (k == last) {
        out[j] = bp_[k];
        break;
      }
      const double len = bp_[k + 1] - bp_[k];
      const double f_end = f_right_[k] + d0_[k] * len + 0.5 * d1_[k] * len * len;
      if (f_end >= q) {
        const double t = q - f_right_[k];
        const double denom = d0_[k] + std::sqrt(std::max(0.0, d0_[k] * d0_[k] + 2.0 * d1_[k] * t));
        out[j] = bp_[k] + (denom > 0.0 ? 2.0 * t / denom : 0.0);
        break;
      }
      ++k;
    }
  }
}

double dist_dp(const DistMeasure& a, const DistMeasure& b, int p) {
  if (p != 1 && p != 2) throw std::invalid_argument("dist_dp: p must be 1 or 2");
  const double mass_gap = std::abs(a.orig_mass_ - b.orig_mass_);
  if (p == 1) {
    std::vector<double> bps;
    bps.reserve(a.bp_.size() + b.bp_.size());
    std::merge(a.bp_.begin(), a.bp_.end(), b.bp_.begin(), b.bp_.end(), std::back_inserter(bps));
    bps.erase(std::unique(bps.begin(), bps.end()), bps.end());
    double w1 = 0.0;
    for (std::size_t k = 0; k + 1 < bps.size(); ++k) {
      const double l = bps[k];
      const double L = bps[k + 1] - l;
      const auto ea = a.eval(l);
      const auto eb = b.eval(l);
      w1 += abs_quadratic_integral(0.5 * (ea.d1 - eb.d1), ea.d0 - eb.d0, ea.f - eb.f, L);
    }
    return w1 + mass_gap;
  }
  static thread_local std::vector<double> qs;
  if (qs.empty()) {
    qs.resize(kQuantilePoints);
    for (int j = 0; j < kQuantilePoints; ++j) qs[static_cast<std::size_t>(j)] = (j + 0.5) / kQuantilePoints;
  }
  static thread_local std::vector<double> xa, xb;
  a.quantiles(qs, xa);
  b.quantiles(qs, xb);
  double s = 0.0;
  for (int j = 0; j < kQuantilePoints; ++j) {
    const double d = xa[static_cast<std::size_t>(j)] - xb[static_cast<std::size_t>(j)];
    s += d * d;
  }
  return std::sqrt(s / kQuantilePoints) + mass_gap;
}

}  // namespace mfc
