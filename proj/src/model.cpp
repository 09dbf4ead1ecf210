#include "mfc/model.hpp"

#include <boost/math/special_functions/gamma.hpp>
#include <cmath>
#include <set>
#include <stdexcept>

namespace mfc {

double MeasureView::mass() const {
  if (grid_) return grid_->mass();
  if (atoms_) return atoms_->mass();
  return 0.0;
}

double MeasureView::moment_p(double p) const {
  if (grid_) return moment(*grid_, p);
  if (atoms_) return moment(*atoms_, p);
  return 0.0;
}

VolSplit vol_from_rho(double rho, double total_var) {
  if (!(rho >= 0.0 && rho < 1.0) || !(total_var > 0.0)) {
    throw std::invalid_argument("vol_from_rho: need rho in [0,1) and total_var > 0");
  }
  return {std::sqrt((1.0 - rho) * total_var), std::sqrt(rho * total_var)};
}

namespace {

// Gamma pdf through log space; x = 0 uses the k = 1 limit convention.
double gamma_pdf(double k, double theta, double x) {
  if (x < 0.0) return 0.0;
  if (x == 0.0) return k == 1.0 ? 1.0 / theta : (k > 1.0 ? 0.0 : 0.0);
  const double lg = (k - 1.0) * std::log(x) - x / theta - std::lgamma(k) - k * std::log(theta);
  const double v = std::exp(lg);
  return std::isfinite(v) ? v : 0.0;
}

SubProbGrid project_density(const Grid1D& grid, const std::function<double(double)>& pdf,
                            double window_mass) {
  std::vector<double> c(static_cast<std::size_t>(grid.n), 0.0);
  double s = 0.0;
  for (int i = 1; i <= grid.n; ++i) {
    const double v = std::max(0.0, pdf(grid.node(i)));
    c[static_cast<std::size_t>(i - 1)] = v;
    s += v;
  }
  const double raw_mass = grid.h() * s;
  if (raw_mass > 0.0 && window_mass > 0.0) {
    const double scale = window_mass / raw_mass;
    for (double& v : c) v *= scale;
  } else {
    for (double& v : c) v = 0.0;
  }
  return SubProbGrid(grid, std::move(c));
}

}  // namespace

SubProbGrid gamma_init(double k, double theta, const Grid1D& grid) {
  if (!(k > 0.0) || !(theta > 0.0)) {
    throw std::invalid_argument("gamma_init: need k > 0 and scale > 0");
  }
  const double lo = std::max(0.0, grid.x_lo);
  const double mass = boost::math::gamma_p(k, grid.x_hi / theta) - boost::math::gamma_p(k, lo / theta);
  return project_density(grid, [&](double x) { return gamma_pdf(k, theta, x); }, mass);
}

SubProbGrid gaussian_init(double mu, double sd, const Grid1D& grid) {
  if (!(sd > 0.0)) throw std::invalid_argument("gaussian_init: need sd > 0");
  auto cdf = [&](double x) { return 0.5 * std::erfc(-(x - mu) / (sd * std::sqrt(2.0))); };
  const double mass = cdf(grid.x_hi) - cdf(grid.x_lo);
  auto pdf = [&](double x) {
    const double z = (x - mu) / sd;
    return std::exp(-0.5 * z * z) / (sd * std::sqrt(2.0 * M_PI));
  };
  return project_density(grid, pdf, mass);
}

CoefficientBundle scenario_bailout(const BailoutParams& p) {
  if (!(p.lambda0 >= 0.0) || !(p.sigma >= 0.0) || !(p.sigma0 >= 0.0) || !(p.alpha >= 0.0)) {
    throw std::invalid_argument("scenario_bailout: negative coefficient");
  }
  CoefficientBundle b;
  b.name = "bailout";
  b.T = 1.0;
  const double lam0 = p.lambda0, sig = p.sigma, sig0 = p.sigma0, al = p.alpha, w = p.w;
  b.b = [](double, double, const MeasureView&, double g) { return g; };
  b.db_dg = [](double, double, const MeasureView&, double) { return 1.0; };
  b.sigma = [sig](double, double, const MeasureView&) { return sig; };
  b.sigma0 = [sig0](double, double, const MeasureView&) { return sig0; };
  b.alpha = [al](double, double, const MeasureView&) { return al; };
  b.lambda = [lam0](double, double x, const MeasureView&) { return lam0 * std::max(-x, 0.0); };
  b.lambda_kinks = {0.0};
  b.f = [w](double, double, const MeasureView&, double g) { return w * g; };
  b.df_dg = [w](double, double, const MeasureView&, double) { return w; };
  b.psi = [](const MeasureView& nu) { return 1.0 - nu.mass(); };
  b.psi_is_loss = true;
  b.coeffs_measure_free = true;
  b.control_lo = 0.0;
  const double gk = p.gamma_k, gth = p.gamma_theta;
  b.init = [gk, gth](const Grid1D& grid) { return gamma_init(gk, gth, grid); };
  b.init_sampler = [gk, gth](Rng& rng) {
    // rejection outside the truncation window is astronomically rare for the
    // shipped parameters; cap retries anyway
    for (int tries = 0; tries < 1000; ++tries) {
      const double v = rng.gamma(gk, gth);
      if (v < 1.0) return v;
    }
    return gk * gth;
  };
  return b;
}

namespace {

constexpr double kBoundCap = 1e3;   // |sigma|, |sigma0|, |alpha| cap on the domain
constexpr double kGrowthCap = 1e3;  // linear-growth ratio cap

}  // namespace

std::vector<std::string> validate(const CoefficientBundle& bundle, const Grid1D& grid) {
  std::set<std::string> vio;
  if (!bundle.b || !bundle.sigma || !bundle.sigma0 || !bundle.alpha || !bundle.lambda ||
      !bundle.f || !bundle.psi || !bundle.init) {
    vio.insert("bundle has unset coefficient callbacks");
    return {vio.begin(), vio.end()};
  }
  if (!(bundle.T > 0.0)) vio.insert("horizon T must be positive");
  if (bundle.control_hi && *bundle.control_hi <= bundle.control_lo) {
    vio.insert("empty control set");
  }

  // fixed sampling lattice
  std::vector<double> ts = {0.0, 0.5 * bundle.T, bundle.T};
  std::vector<double> xs;
  for (int i = 0; i <= 40; ++i) xs.push_back(grid.x_lo + (grid.x_hi - grid.x_lo) * i / 40.0);
  std::vector<double> gs = {bundle.control_lo, bundle.control_lo + 1.0,
                            bundle.control_hi ? *bundle.control_hi : bundle.control_lo + 5.0};

  const SubProbGrid zero = SubProbGrid::zero(grid);
  std::vector<double> cu(static_cast<std::size_t>(grid.n), 0.8 / (grid.x_hi - grid.x_lo));
  const SubProbGrid bulk(grid, cu);
  const AtomicSubProb cloud({0.5 * grid.x_lo, 0.0, 0.5 * grid.x_hi}, {0.2, 0.2, 0.2});
  const MeasureView views[3] = {MeasureView(zero), MeasureView(bulk), MeasureView(cloud)};

  for (const auto& nu : views) {
    const double m2 = nu.moment_p(2.0);
    const double psi_v = bundle.psi(nu);
    if (!std::isfinite(psi_v) || std::abs(psi_v) > kGrowthCap * (1.0 + m2)) {
      vio.insert("psi growth bound violated");
    }
    for (double t : ts) {
      for (double x : xs) {
        const double lam = bundle.lambda(t, x, nu);
        if (!std::isfinite(lam) || lam < 0.0) vio.insert("lambda must be nonnegative");
        if (x >= 0.0 && lam != 0.0) vio.insert("lambda must vanish on x >= 0");
        if (std::abs(lam) > kGrowthCap * (1.0 + std::abs(x) + m2)) {
          vio.insert("lambda growth bound violated");
        }
        const double sg = bundle.sigma(t, x, nu);
        const double sg0 = bundle.sigma0(t, x, nu);
        const double av = bundle.alpha(t, x, nu);
        if (!std::isfinite(sg) || std::abs(sg) > kBoundCap) vio.insert("sigma unbounded on domain");
        if (!std::isfinite(sg0) || std::abs(sg0) > kBoundCap) {
          vio.insert("sigma0 unbounded on domain");
        }
        if (!std::isfinite(av) || std::abs(av) > kBoundCap) vio.insert("alpha unbounded on domain");
        for (double g : gs) {
          const double scale = 1.0 + std::abs(x) + m2 + std::abs(g);
          const double bv = bundle.b(t, x, nu, g);
          if (!std::isfinite(bv) || std::abs(bv) > kGrowthCap * scale) {
            vio.insert("b growth bound violated");
          }
          const double fv = bundle.f(t, x, nu, g);
          if (!std::isfinite(fv) || std::abs(fv) > kGrowthCap * scale) {
            vio.insert("f growth bound violated");
          }
        }
      }
    }
  }
  return {vio.begin(), vio.end()};
}

}  // namespace mfc
