#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "mfc/model.hpp"
#include "mfc/rng.hpp"
#include "mfc/singular.hpp"

using namespace mfc;

namespace {

CoefficientBundle bailout(double alpha) {
  BailoutParams p;
  p.alpha = alpha;
  return scenario_bailout(p);
}

CoefficientBundle with_slope(const CoefficientBundle& bundle, double l0) {
  CoefficientBundle bl = bundle;
  bl.lambda = [l0](double, double x, const MeasureView&) { return l0 * std::max(-x, 0.0); };
  bl.lambda_kinks = {0.0};
  return bl;
}

// the desk family used by several cases; built once
const LossPathFamily& desk_family() {
  static const LossPathFamily fam = [] {
    const std::vector<double> l0s = {5.0, 10.0, 25.0, 50.0};
    return intensity_sweep(bailout(1.0), l0s, Grid1D(-1.0, 1.0, 24), 16, 4, 77);
  }();
  return fam;
}

std::vector<std::vector<double>> mean_paths(const LossPathFamily& fam) {
  std::vector<std::vector<double>> mean;
  for (const auto& member : fam.loss) {
    std::vector<double> acc(member[0].size(), 0.0);
    for (const auto& path : member) {
      for (std::size_t t = 0; t < path.size(); ++t) acc[t] += path[t];
    }
    for (double& v : acc) v /= static_cast<double>(member.size());
    mean.push_back(std::move(acc));
  }
  return mean;
}

}  // namespace

TEST_CASE("a single intensity reduces to the plain solver") {
  const CoefficientBundle bundle = bailout(1.0);
  const Grid1D grid(-1.0, 1.0, 16);
  const int m = 12;
  const int K = 3;
  const std::vector<double> l0s = {10.0};

  const LossPathFamily fam = intensity_sweep(bundle, l0s, grid, m, K, 4242);
  REQUIRE(fam.loss.size() == 1);
  REQUIRE(fam.loss[0].size() == static_cast<std::size_t>(K));
  CHECK(fam.dt == bundle.T / m);

  const CoefficientBundle bl = with_slope(bundle, 10.0);
  for (int k = 0; k < K; ++k) {
    const NoisePath np =
        NoisePath::make(m, bundle.T / m, derive_seed(4242, "mc-path", static_cast<std::uint64_t>(k)));
    const SpdePath path = evolve_spde(bl, nullptr, grid, m, np);
    REQUIRE(fam.loss[0][static_cast<std::size_t>(k)].size() == path.loss.size());
    CHECK(std::memcmp(fam.loss[0][static_cast<std::size_t>(k)].data(), path.loss.data(),
                      path.loss.size() * sizeof(double)) == 0);
  }

  // the kill-gap block is the particle statistic on the derived seed
  REQUIRE(fam.kill_gap.size() == 1);
  const auto rows = kill_gap_stats(bundle, l0s, 200, 16, m, derive_seed(4242, "kill-gap"));
  CHECK(fam.kill_gap[0].mean_gap == rows[0].mean_gap);
  CHECK(fam.kill_gap[0].se == rows[0].se);
  REQUIRE(fam.kill_gap[0].rep_gaps.size() == 16);
  double acc = 0.0;
  for (const double g : fam.kill_gap[0].rep_gaps) acc += g;
  CHECK(fam.kill_gap[0].mean_gap == acc / 16);
}

TEST_CASE("loss paths increase with the killing intensity") {
  const LossPathFamily& fam = desk_family();
  REQUIRE(fam.loss.size() == 4);

  // coupled paths: pointwise monotone in lambda0 up to scheme noise
  for (std::size_t l = 0; l + 1 < 4; ++l) {
    for (std::size_t k = 0; k < 4; ++k) {
      const auto& lo = fam.loss[l][k];
      const auto& hi = fam.loss[l + 1][k];
      REQUIRE(lo.size() == hi.size());
      for (std::size_t t = 0; t < lo.size(); ++t) CHECK(hi[t] >= lo[t] - 1e-3);
    }
  }

  // losses live in [0,1] and are close to nondecreasing in time
  for (const auto& member : fam.loss) {
    for (const auto& path : member) {
      for (std::size_t t = 0; t < path.size(); ++t) {
        // the mass-cap rescale can overshoot 1 by an ulp, leaving -eps here
        CHECK(path[t] >= -1e-12);
        CHECK(path[t] <= 1.0 + 1e-12);
        if (t > 0) CHECK(path[t] >= path[t - 1] - 0.02);
      }
    }
  }

  // mean terminal loss strictly increasing across the sweep
  std::vector<double> finals;
  for (const auto& member : fam.loss) {
    double mf = 0.0;
    for (const auto& path : member) mf += path.back();
    finals.push_back(mf / 4.0);
  }
  for (std::size_t l = 0; l + 1 < 4; ++l) CHECK(finals[l + 1] > finals[l] + 0.01);

  // kill gap shrinks as the intensity steepens; the coupled replicas make the
  // last pair significant even at this small rep count
  REQUIRE(fam.kill_gap.size() == 4);
  for (std::size_t l = 0; l + 1 < 4; ++l) {
    CHECK(fam.kill_gap[l + 1].mean_gap < fam.kill_gap[l].mean_gap);
  }
  const auto& a = fam.kill_gap[2].rep_gaps;
  const auto& b = fam.kill_gap[3].rep_gaps;
  REQUIRE(a.size() == b.size());
  double md = 0.0;
  for (std::size_t r = 0; r < a.size(); ++r) md += b[r] - a[r];
  md /= static_cast<double>(a.size());
  double ss = 0.0;
  for (std::size_t r = 0; r < a.size(); ++r) {
    const double d = (b[r] - a[r]) - md;
    ss += d * d;
  }
  const double se = std::sqrt(ss / (static_cast<double>(a.size()) - 1) /
                              static_cast<double>(a.size()));
  CHECK(md < -2.0 * se);
}

TEST_CASE("zero contagion makes the loss feedback inert") {
  const CoefficientBundle bundle = bailout(0.0);
  const Grid1D grid(-1.0, 1.0, 16);
  const int m = 10;
  const std::vector<double> l0s = {5.0, 25.0};

  const LossPathFamily fam = intensity_sweep(bundle, l0s, grid, m, 2, 909);

  // with alpha = 0 the feedback term vanishes: cutting the wire by feeding
  // zero exogenous increments must reproduce the same paths bitwise
  const std::vector<double> zero_exo(static_cast<std::size_t>(m), 0.0);
  for (std::size_t l = 0; l < l0s.size(); ++l) {
    const CoefficientBundle bl = with_slope(bundle, l0s[l]);
    for (int k = 0; k < 2; ++k) {
      const NoisePath np = NoisePath::make(m, bundle.T / m,
                                           derive_seed(909, "mc-path", static_cast<std::uint64_t>(k)));
      const SpdePath path = evolve_spde(bl, nullptr, grid, m, np, zero_exo);
      CHECK(std::memcmp(fam.loss[l][static_cast<std::size_t>(k)].data(), path.loss.data(),
                        path.loss.size() * sizeof(double)) == 0);
    }
  }
}

TEST_CASE("iteration stops immediately without feedback") {
  const CoefficientBundle bundle = bailout(0.0);
  const Grid1D grid(-1.0, 1.0, 24);
  const int m = 16;
  const NoisePath np = NoisePath::make(m, bundle.T / m, derive_seed(99, "mc-path", 0));

  const MinimalIteration it = minimal_iteration(bundle, 10.0, grid, m, np, 1e-12, 50);
  CHECK(it.converged);
  CHECK(it.iterations == 2);
  REQUIRE(it.iterates.size() == 3);
  for (const double v : it.iterates[0]) CHECK(v == 0.0);
  // the first solve is already the fixed point
  for (std::size_t t = 0; t < it.iterates[1].size(); ++t) {
    CHECK(std::abs(it.iterates[2][t] - it.iterates[1][t]) <= 1e-12);
  }
  CHECK(it.fixed_point == it.iterates.back());
}

TEST_CASE("minimal iteration converges on a desk problem") {
  BailoutParams p;
  p.alpha = 1.5;
  p.sigma0 = 0.1;
  const CoefficientBundle bundle = scenario_bailout(p);
  const Grid1D grid(-1.0, 1.0, 32);
  const int m = 32;
  const double tol = 1e-8;
  const NoisePath np = NoisePath::make(m, bundle.T / m, derive_seed(31337, "mc-path", 0));

  const MinimalIteration it = minimal_iteration(bundle, 10.0, grid, m, np, tol, 50);
  CHECK(it.converged);
  CHECK(it.iterations <= 50);
  CHECK(it.last_gap <= tol);

  // the scheme increases toward its fixed point
  for (std::size_t j = 0; j + 1 < it.iterates.size(); ++j) {
    for (std::size_t t = 0; t < it.iterates[j].size(); ++t) {
      CHECK(it.iterates[j + 1][t] >= it.iterates[j][t] - 1e-12);
    }
  }
  for (const double v : it.fixed_point) {
    CHECK(v >= -1e-12);
    CHECK(v <= 1.0 + 1e-12);
  }

  // re-feeding the fixed point reproduces it within twice the stop tolerance
  const CoefficientBundle bl = with_slope(bundle, 10.0);
  std::vector<double> exo(static_cast<std::size_t>(m));
  for (int k = 0; k < m; ++k) {
    exo[static_cast<std::size_t>(k)] =
        it.fixed_point[static_cast<std::size_t>(k + 1)] - it.fixed_point[static_cast<std::size_t>(k)];
  }
  const SpdePath path = evolve_spde(bl, nullptr, grid, m, np, exo);
  double gap = 0.0;
  for (std::size_t t = 0; t < path.loss.size(); ++t) {
    gap = std::max(gap, std::abs(path.loss[t] - it.fixed_point[t]));
  }
  CHECK(gap <= 2.0 * tol);
}

TEST_CASE("non-convergence is reported, not thrown") {
  BailoutParams p;
  p.alpha = 1.5;
  p.sigma0 = 0.1;
  const CoefficientBundle bundle = scenario_bailout(p);
  const Grid1D grid(-1.0, 1.0, 32);
  const int m = 32;
  const NoisePath np = NoisePath::make(m, bundle.T / m, derive_seed(31337, "mc-path", 0));

  const MinimalIteration it = minimal_iteration(bundle, 10.0, grid, m, np, 1e-8, 5);
  CHECK_FALSE(it.converged);
  CHECK(it.iterations == 5);
  CHECK(it.last_gap > 1e-8);
  CHECK(it.fixed_point == it.iterates.back());
}

TEST_CASE("the limit of a constant family is the common path") {
  LossPathFamily fam;
  fam.lambda0 = {1.0, 2.0};
  fam.dt = 0.5;
  fam.loss = {{{0.0, 0.1, 0.2}, {0.0, 0.05, 0.3}}, {{0.0, 0.1, 0.2}, {0.0, 0.05, 0.3}}};

  const MonotoneLimit lim = monotone_limit(fam);
  CHECK(lim.monotone);
  CHECK(lim.worst_violation == 0.0);
  REQUIRE(lim.limit.size() == 3);
  CHECK(lim.limit[0] == 0.0);
  CHECK(lim.limit[1] == doctest::Approx(0.075).epsilon(1e-15));
  CHECK(lim.limit[2] == doctest::Approx(0.25).epsilon(1e-15));
  for (const double g : lim.limit_gap) CHECK(g == 0.0);
  for (const double g : lim.per_time_gap) CHECK(g == 0.0);
}

TEST_CASE("a perturbed member is flagged as non-monotone") {
  LossPathFamily fam;
  fam.lambda0 = {1.0, 2.0, 3.0};
  fam.dt = 0.5;
  fam.loss = {{{0.0, 0.10, 0.20}}, {{0.0, 0.12, 0.25}}, {{0.0, 0.20, 0.30}}};
  CHECK(monotone_limit(fam).monotone);

  fam.loss[1][0][1] = 0.07;  // now below the weaker member at t=1
  const MonotoneLimit lim = monotone_limit(fam);
  CHECK_FALSE(lim.monotone);
  CHECK(lim.worst_violation == doctest::Approx(0.03).epsilon(1e-12));
  CHECK(monotone_limit(fam, 0.05).monotone);  // a loose tolerance accepts it
}

TEST_CASE("members approach the limit from below") {
  const LossPathFamily& fam = desk_family();
  const MonotoneLimit lim = monotone_limit(fam);
  CHECK(lim.monotone);
  CHECK(lim.worst_violation <= 1e-3);

  // the sup-distance to the limit candidate shrinks across the sweep
  REQUIRE(lim.limit_gap.size() == 4);
  for (std::size_t l = 0; l + 1 < 4; ++l) CHECK(lim.limit_gap[l + 1] < lim.limit_gap[l]);
  CHECK(lim.limit_gap.back() <= 1e-6);
  for (const double g : lim.limit_gap) CHECK(g >= 0.0);

  // the limit dominates every member mean and the last-pair gap matches
  const auto mean = mean_paths(fam);
  for (const auto& path : mean) {
    for (std::size_t t = 0; t < path.size(); ++t) CHECK(lim.limit[t] >= path[t] - 1e-12);
  }
  REQUIRE(lim.per_time_gap.size() == mean[0].size());
  for (std::size_t t = 0; t < mean[0].size(); ++t) {
    CHECK(lim.per_time_gap[t] == std::abs(mean[3][t] - mean[2][t]));
  }
}

TEST_CASE("invalid inputs are rejected") {
  const CoefficientBundle bundle = bailout(1.0);
  const Grid1D grid(-1.0, 1.0, 8);
  const std::vector<double> ok = {5.0, 10.0};

  CHECK_THROWS_AS((void)intensity_sweep(bundle, std::vector<double>{}, grid, 4, 2, 1),
                  std::invalid_argument);
  CHECK_THROWS_AS((void)intensity_sweep(bundle, std::vector<double>{5.0, 5.0}, grid, 4, 2, 1),
                  std::invalid_argument);
  CHECK_THROWS_AS((void)intensity_sweep(bundle, std::vector<double>{10.0, 5.0}, grid, 4, 2, 1),
                  std::invalid_argument);
  CHECK_THROWS_AS((void)intensity_sweep(bundle, std::vector<double>{-1.0, 2.0}, grid, 4, 2, 1),
                  std::invalid_argument);
  CHECK_THROWS_AS((void)intensity_sweep(bundle, ok, grid, 4, 0, 1), std::invalid_argument);
  CHECK_THROWS_AS((void)intensity_sweep(bundle, ok, grid, 0, 2, 1), std::invalid_argument);
  CHECK_THROWS_AS((void)intensity_sweep(bundle, ok, grid, 4, 2, 1, 0, 200, 1), std::invalid_argument);

  const NoisePath np = NoisePath::make(4, bundle.T / 4, 7);
  CHECK_THROWS_AS((void)minimal_iteration(bundle, -1.0, grid, 4, np, 1e-8, 10), std::invalid_argument);
  CHECK_THROWS_AS((void)minimal_iteration(bundle, 10.0, grid, 4, np, 0.0, 10), std::invalid_argument);
  CHECK_THROWS_AS((void)minimal_iteration(bundle, 10.0, grid, 4, np, 1e-8, 0), std::invalid_argument);
  CHECK_THROWS_AS((void)minimal_iteration(bundle, 10.0, grid, 8, np, 1e-8, 10), std::invalid_argument);

  LossPathFamily fam;
  CHECK_THROWS_AS((void)monotone_limit(fam), std::invalid_argument);
  fam.lambda0 = {1.0, 2.0};
  fam.loss = {{{0.0, 0.1}}, {{0.0, 0.1}}};
  CHECK_NOTHROW((void)monotone_limit(fam));
  fam.loss[1][0].push_back(0.2);  // ragged lattice
  CHECK_THROWS_AS((void)monotone_limit(fam), std::invalid_argument);
  fam.loss[1][0].pop_back();
  fam.loss[1].push_back({0.0, 0.1});  // ragged path count
  CHECK_THROWS_AS((void)monotone_limit(fam), std::invalid_argument);
}
