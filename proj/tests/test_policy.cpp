#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <vector>

#include "mfc/policy.hpp"
#include "mfc/rng.hpp"
#include "oracles.hpp"

using namespace mfc;

namespace {

PolicyParams random_params(const PolicySpec& spec, std::uint64_t seed) {
  PolicyParams p = init_params(spec, seed);
  // Glorot leaves biases at zero; perturb everything so adjoint tests see a
  // generic point.
  Rng rng(derive_seed(seed, "perturb"));
  for (double& v : p.theta) v += 0.3 * (2.0 * rng.u01() - 1.0);
  return p;
}

SubProbGrid bump_measure(const Grid1D& g, double center, double width, double mass) {
  std::vector<double> c(static_cast<std::size_t>(g.n), 0.0);
  double total = 0.0;
  for (int i = 1; i <= g.n; ++i) {
    const double x = g.node(i);
    const double v = std::max(0.0, 1.0 - std::abs(x - center) / width);
    c[static_cast<std::size_t>(i - 1)] = v;
    total += v * g.h();
  }
  for (double& v : c) v *= mass / total;
  return SubProbGrid(g, c);
}

}  // namespace

TEST_CASE("default spec has the documented parameter count") {
  const PolicySpec spec = PolicySpec::defaults();
  CHECK(spec.g0.param_count() == 240);
  CHECK(spec.g1.param_count() == 3251);
  CHECK(spec.param_count() == 3491);
  CHECK(spec.d0() == 10);
  CHECK(spec.g1_offset() == 240);
  CHECK(spec.g1.inputs() == 12);
}

TEST_CASE("init_params: Glorot bounds, zero biases, determinism") {
  const PolicySpec spec = PolicySpec::defaults();
  const PolicyParams p = init_params(spec, 7);
  REQUIRE(static_cast<int>(p.theta.size()) == 3491);

  // walk the layout checking per-layer weight bounds and zero biases
  std::size_t off = 0;
  bool any_nonzero = false;
  for (const MlpSpec* net : {&spec.g0, &spec.g1}) {
    for (int l = 0; l < net->layers(); ++l) {
      const int ni = net->sizes[static_cast<std::size_t>(l)];
      const int no = net->sizes[static_cast<std::size_t>(l + 1)];
      const double bound = std::sqrt(6.0 / (ni + no));
      for (int k = 0; k < ni * no; ++k) {
        const double w = p.theta[off + static_cast<std::size_t>(k)];
        CHECK(std::abs(w) <= bound);
        any_nonzero = any_nonzero || w != 0.0;
      }
      for (int k = 0; k < no; ++k) {
        CHECK(p.theta[off + static_cast<std::size_t>(ni * no + k)] == 0.0);
      }
      off += static_cast<std::size_t>((ni + 1) * no);
    }
  }
  CHECK(any_nonzero);

  const PolicyParams q = init_params(spec, 7);
  CHECK(std::memcmp(p.theta.data(), q.theta.data(), sizeof(double) * p.theta.size()) == 0);
  const PolicyParams r = init_params(spec, 8);
  CHECK(std::memcmp(p.theta.data(), r.theta.data(), sizeof(double) * p.theta.size()) != 0);
}

TEST_CASE("hand-set single-layer nets pin the parameter layout") {
  PolicySpec spec;
  spec.g0.sizes = {1, 2};
  spec.g1.sizes = {4, 1};
  spec.control_lo = 0.0;
  PolicyParams p;
  p.spec = spec;
  // g0: W = [2; -1], b = [0.5, 0]; g1: W = [1, 2, 3, 4], b = 0.25
  p.theta = {2.0, -1.0, 0.5, 0.0, 1.0, 2.0, 3.0, 4.0, 0.25};
  REQUIRE(static_cast<int>(p.theta.size()) == spec.param_count());

  const NormInfo norm{2.0, -1.0, 3.0};  // t_hat = t - 1, x_hat = (x - 1) / 2
  AtomicSubProb nu({0.0, 2.0}, {0.25, 0.5});

  // phi_j = sum_i w_i * (W x_hat_i + b)_j with x_hat = -0.5, 0.5
  const double phi0 = 0.25 * (2.0 * -0.5 + 0.5) + 0.5 * (2.0 * 0.5 + 0.5);
  const double phi1 = 0.25 * (-1.0 * -0.5) + 0.5 * (-1.0 * 0.5);
  MlpScratch ws;
  std::vector<double> phi(2);
  pool_features(nu, p, norm, phi, ws);
  CHECK(phi[0] == doctest::Approx(phi0).epsilon(1e-15));
  CHECK(phi[1] == doctest::Approx(phi1).epsilon(1e-15));

  const double t = 0.5, x = 2.0;
  const double raw = 1.0 * (t - 1.0) + 2.0 * ((x - 1.0) / 2.0) + 3.0 * phi0 + 4.0 * phi1 + 0.25;
  const double expect = softplus(raw);
  CHECK(policy_eval(t, x, nu, p, norm) == doctest::Approx(expect).epsilon(1e-14));
}

TEST_CASE("pooled features are linear in the measure") {
  const Grid1D g(-1.5, 2.0, 40);
  const PolicySpec spec = PolicySpec::tiny();
  const PolicyParams p = random_params(spec, 11);
  const NormInfo norm{1.0, g.x_lo, g.x_hi};

  const SubProbGrid nu1 = bump_measure(g, 0.4, 0.6, 0.5);
  const SubProbGrid nu2 = bump_measure(g, -0.5, 0.4, 0.3);
  const double a = 0.35, b = 0.55;
  std::vector<double> cmix(static_cast<std::size_t>(g.n));
  for (int i = 0; i < g.n; ++i) {
    cmix[static_cast<std::size_t>(i)] =
        a * nu1.c()[static_cast<std::size_t>(i)] + b * nu2.c()[static_cast<std::size_t>(i)];
  }
  const SubProbGrid mix(g, cmix);

  MlpScratch ws;
  const int d0 = spec.d0();
  std::vector<double> f1(static_cast<std::size_t>(d0)), f2(f1), fm(f1);
  pool_features(nu1, p, norm, f1, ws);
  pool_features(nu2, p, norm, f2, ws);
  pool_features(mix, p, norm, fm, ws);
  for (int j = 0; j < d0; ++j) {
    CHECK(fm[static_cast<std::size_t>(j)] ==
          doctest::Approx(a * f1[static_cast<std::size_t>(j)] + b * f2[static_cast<std::size_t>(j)])
              .epsilon(0.0)
              .scale(0.0)
              .epsilon(1e-12));
  }
}

TEST_CASE("pooled features match a dense quadrature oracle") {
  const Grid1D g(-1.0, 1.5, 64);
  const PolicySpec spec = PolicySpec::tiny();
  const PolicyParams p = random_params(spec, 3);
  const NormInfo norm{1.0, g.x_lo, g.x_hi};
  const SubProbGrid nu = bump_measure(g, 0.2, 0.7, 0.8);

  MlpScratch ws;
  const int d0 = spec.d0();
  std::vector<double> phi(static_cast<std::size_t>(d0));
  pool_features(nu, p, norm, phi, ws);

  std::vector<double> g0v(static_cast<std::size_t>(d0));
  for (int j = 0; j < d0; ++j) {
    auto f = [&](double x) {
      g0_forward(x, p, norm, g0v, ws);
      return nu.density(x) * g0v[static_cast<std::size_t>(j)];
    };
    // composite Simpson over each element resolves the density kinks
    double ref = 0.0;
    for (int e = 0; e <= g.n; ++e) {
      ref += oracle::composite_simpson(f, g.node(e), g.node(e + 1), 64);
    }
    CHECK(phi[static_cast<std::size_t>(j)] == doctest::Approx(ref).epsilon(1e-9));
  }
}

TEST_CASE("grid evaluation is identical to scalar evaluation") {
  const Grid1D g(-1.0, 1.0, 24);
  const PolicySpec spec = PolicySpec::defaults(0.0);
  const PolicyParams p = random_params(spec, 21);
  const NormInfo norm{1.0, g.x_lo, g.x_hi};
  const SubProbGrid nu = bump_measure(g, 0.0, 0.5, 0.9);

  MlpScratch ws;
  std::vector<double> phi(static_cast<std::size_t>(spec.d0()));
  pool_features(nu, p, norm, phi, ws);

  std::vector<double> xs;
  for (int i = 1; i <= g.n; ++i) xs.push_back(g.node(i));
  std::vector<double> u(xs.size());
  policy_eval_grid(0.3, xs, phi, p, norm, u, ws);

  for (std::size_t i = 0; i < xs.size(); ++i) {
    MlpScratch ws2;
    const double us = policy_eval_feat(0.3, xs[i], phi, p, norm, ws2);
    CHECK(u[i] == us);  // same arithmetic path, bit-identical
    CHECK(policy_eval(0.3, xs[i], nu, p, norm) == us);
  }
}

TEST_CASE("controls respect the control set and stay finite") {
  const NormInfo norm{1.0, -2.0, 2.0};
  AtomicSubProb nu({-1.0, 0.5, 1.9}, {0.2, 0.3, 0.4});
  Rng rng(99);

  SUBCASE("half line [lo, inf)") {
    const PolicyParams p = random_params(PolicySpec::defaults(0.25), 5);
    for (int k = 0; k < 200; ++k) {
      const double t = rng.u01();
      const double x = -2.0 + 4.0 * rng.u01();
      const double u = policy_eval(t, x, nu, p, norm);
      CHECK(std::isfinite(u));
      CHECK(u >= 0.25);
    }
  }
  SUBCASE("interval [lo, hi]") {
    const PolicyParams p = random_params(PolicySpec::defaults(-1.0, 2.0), 6);
    for (int k = 0; k < 200; ++k) {
      const double t = rng.u01();
      const double x = -2.0 + 4.0 * rng.u01();
      const double u = policy_eval(t, x, nu, p, norm);
      CHECK(std::isfinite(u));
      CHECK(u >= -1.0);
      CHECK(u <= 2.0);
    }
  }
  SUBCASE("extreme inputs do not produce NaN") {
    const PolicyParams p = random_params(PolicySpec::defaults(0.0), 7);
    for (double x : {-1e6, 1e6, 0.0}) {
      for (double t : {0.0, 1.0, 1e3}) {
        CHECK(std::isfinite(policy_eval(t, x, nu, p, norm)));
      }
    }
  }
}

TEST_CASE("mlp_backward matches central finite differences") {
  MlpSpec spec;
  spec.sizes = {3, 5, 4, 2};
  const int np = spec.param_count();
  Rng rng(17);
  std::vector<double> theta(static_cast<std::size_t>(np));
  for (double& v : theta) v = 0.8 * (2.0 * rng.u01() - 1.0);
  std::vector<double> in = {0.3, -0.7, 0.45};
  std::vector<double> out_bar = {1.3, -0.8};

  // scalar objective J(theta, in) = <out_bar, mlp(theta, in)>
  auto J = [&](const std::vector<double>& th, const std::vector<double>& x) {
    MlpScratch w;
    std::vector<double> out(2);
    mlp_forward(spec, th, x, out, w);
    return out_bar[0] * out[0] + out_bar[1] * out[1];
  };

  MlpScratch ws;
  std::vector<double> out(2);
  mlp_forward(spec, theta, in, out, ws);
  std::vector<double> theta_bar(static_cast<std::size_t>(np), 0.0);
  std::vector<double> in_bar(3, 0.0);
  mlp_backward(spec, theta, out_bar, ws, theta_bar, in_bar);

  const double h = 1e-5;
  for (int k = 0; k < np; ++k) {
    std::vector<double> tp = theta, tm = theta;
    tp[static_cast<std::size_t>(k)] += h;
    tm[static_cast<std::size_t>(k)] -= h;
    const double fd = (J(tp, in) - J(tm, in)) / (2.0 * h);
    CHECK(theta_bar[static_cast<std::size_t>(k)] == doctest::Approx(fd).epsilon(1e-6).scale(1.0));
  }
  for (int k = 0; k < 3; ++k) {
    std::vector<double> xp = in, xm = in;
    xp[static_cast<std::size_t>(k)] += h;
    xm[static_cast<std::size_t>(k)] -= h;
    const double fd = (J(theta, xp) - J(theta, xm)) / (2.0 * h);
    CHECK(in_bar[static_cast<std::size_t>(k)] == doctest::Approx(fd).epsilon(1e-6).scale(1.0));
  }
}

TEST_CASE("mlp_backward accumulates rather than overwrites") {
  MlpSpec spec;
  spec.sizes = {2, 3, 1};
  Rng rng(4);
  std::vector<double> theta(static_cast<std::size_t>(spec.param_count()));
  for (double& v : theta) v = 2.0 * rng.u01() - 1.0;
  const std::vector<double> in = {0.2, -0.4};
  const std::vector<double> ob = {0.7};

  MlpScratch ws;
  std::vector<double> out(1);
  mlp_forward(spec, theta, in, out, ws);
  std::vector<double> tb1(theta.size(), 0.0), ib1(2, 0.0);
  mlp_backward(spec, theta, ob, ws, tb1, ib1);

  mlp_forward(spec, theta, in, out, ws);
  std::vector<double> tb2 = tb1, ib2 = ib1;
  mlp_backward(spec, theta, ob, ws, tb2, ib2);
  for (std::size_t k = 0; k < theta.size(); ++k) {
    CHECK(tb2[k] == doctest::Approx(2.0 * tb1[k]).epsilon(1e-14));
  }
  CHECK(ib2[0] == doctest::Approx(2.0 * ib1[0]).epsilon(1e-14));
}

TEST_CASE("policy_backward_feat matches finite differences in theta and phi") {
  const PolicySpec spec = PolicySpec::tiny(0.1, 1.7);
  const PolicyParams p = random_params(spec, 31);
  const NormInfo norm{1.0, -1.0, 1.0};
  const int d0 = spec.d0();
  std::vector<double> phi = {0.15, -0.2, 0.35};
  REQUIRE(static_cast<int>(phi.size()) == d0);
  const double t = 0.4, x = 0.3, u_bar = 1.7;

  MlpScratch ws;
  std::vector<double> theta_bar(p.theta.size(), 0.0), phi_bar(phi.size(), 0.0);
  policy_backward_feat(t, x, phi, u_bar, p, norm, theta_bar, phi_bar, ws);

  // g0 slice of the gradient must stay untouched: u depends on phi only
  for (int k = 0; k < spec.g1_offset(); ++k) {
    CHECK(theta_bar[static_cast<std::size_t>(k)] == 0.0);
  }

  const double h = 1e-6;
  auto eval_theta = [&](int k, double dv) {
    PolicyParams q = p;
    q.theta[static_cast<std::size_t>(k)] += dv;
    MlpScratch w;
    return u_bar * policy_eval_feat(t, x, phi, q, norm, w);
  };
  Rng rng(8);
  for (int rep = 0; rep < 40; ++rep) {
    const int k = spec.g1_offset() +
                  static_cast<int>(rng.u01() * static_cast<double>(spec.g1.param_count()));
    const double fd = (eval_theta(k, h) - eval_theta(k, -h)) / (2.0 * h);
    CHECK(theta_bar[static_cast<std::size_t>(k)] ==
          doctest::Approx(fd).epsilon(5e-6).scale(1.0));
  }
  for (int j = 0; j < d0; ++j) {
    std::vector<double> pp = phi, pm = phi;
    pp[static_cast<std::size_t>(j)] += h;
    pm[static_cast<std::size_t>(j)] -= h;
    MlpScratch w;
    const double fd = (u_bar * policy_eval_feat(t, x, pp, p, norm, w) -
                       u_bar * policy_eval_feat(t, x, pm, p, norm, w)) /
                      (2.0 * h);
    CHECK(phi_bar[static_cast<std::size_t>(j)] == doctest::Approx(fd).epsilon(5e-6).scale(1.0));
  }
}

TEST_CASE("g0_backward matches finite differences") {
  const PolicySpec spec = PolicySpec::tiny();
  const PolicyParams p = random_params(spec, 13);
  const NormInfo norm{1.0, -1.0, 1.0};
  const int d0 = spec.d0();
  const double x = 0.37;
  std::vector<double> out_bar = {0.6, -1.1, 0.3};
  REQUIRE(static_cast<int>(out_bar.size()) == d0);

  MlpScratch ws;
  std::vector<double> theta_bar(p.theta.size(), 0.0);
  g0_backward(x, out_bar, p, norm, theta_bar, ws);

  for (int k = spec.g1_offset(); k < spec.param_count(); ++k) {
    CHECK(theta_bar[static_cast<std::size_t>(k)] == 0.0);
  }

  const double h = 1e-6;
  auto J = [&](const PolicyParams& q) {
    MlpScratch w;
    std::vector<double> v(static_cast<std::size_t>(d0));
    g0_forward(x, q, norm, v, w);
    double s = 0.0;
    for (int j = 0; j < d0; ++j) s += out_bar[static_cast<std::size_t>(j)] * v[static_cast<std::size_t>(j)];
    return s;
  };
  for (int k = 0; k < spec.g1_offset(); ++k) {
    PolicyParams qp = p, qm = p;
    qp.theta[static_cast<std::size_t>(k)] += h;
    qm.theta[static_cast<std::size_t>(k)] -= h;
    const double fd = (J(qp) - J(qm)) / (2.0 * h);
    CHECK(theta_bar[static_cast<std::size_t>(k)] == doctest::Approx(fd).epsilon(5e-6).scale(1.0));
  }
}

TEST_CASE("policy_lipschitz_x bounds observed increments") {
  const PolicySpec spec = PolicySpec::defaults(0.0, 3.0);
  const PolicyParams p = random_params(spec, 23);
  const NormInfo norm{1.0, -2.0, 2.0};
  const double L = policy_lipschitz_x(p, norm);
  CHECK(L > 0.0);
  CHECK(std::isfinite(L));

  std::vector<double> phi(static_cast<std::size_t>(spec.d0()), 0.1);
  MlpScratch ws;
  Rng rng(61);
  for (int k = 0; k < 300; ++k) {
    const double t = rng.u01();
    const double x1 = -2.0 + 4.0 * rng.u01();
    const double x2 = -2.0 + 4.0 * rng.u01();
    const double u1 = policy_eval_feat(t, x1, phi, p, norm, ws);
    const double u2 = policy_eval_feat(t, x2, phi, p, norm, ws);
    CHECK(std::abs(u1 - u2) <= L * std::abs(x1 - x2) * (1.0 + 1e-9) + 1e-12);
  }
}

TEST_CASE("checkpoint round trip is bit exact") {
  const PolicySpec spec = PolicySpec::defaults(0.5, 4.5);
  const PolicyParams p = random_params(spec, 77);
  const std::string path = "policy_ckpt_roundtrip.bin";
  save_checkpoint(p, path);
  const PolicyParams q = load_checkpoint(path);
  CHECK(q.spec.g0.sizes == p.spec.g0.sizes);
  CHECK(q.spec.g1.sizes == p.spec.g1.sizes);
  CHECK(q.spec.control_lo == p.spec.control_lo);
  REQUIRE(q.spec.control_hi.has_value());
  CHECK(*q.spec.control_hi == 4.5);
  REQUIRE(q.theta.size() == p.theta.size());
  CHECK(std::memcmp(q.theta.data(), p.theta.data(), sizeof(double) * p.theta.size()) == 0);
  std::remove(path.c_str());
}

TEST_CASE("checkpoint loader rejects corrupt files") {
  const std::string path = "policy_ckpt_corrupt.bin";
  std::FILE* f = std::fopen(path.c_str(), "wb");
  REQUIRE(f != nullptr);
  const char junk[16] = "NOTACHECKPOINT!";
  std::fwrite(junk, 1, sizeof(junk), f);
  std::fclose(f);
  CHECK_THROWS_AS((void)load_checkpoint(path), std::runtime_error);
  CHECK_THROWS_AS((void)load_checkpoint("no_such_file_anywhere.bin"), std::runtime_error);
  std::remove(path.c_str());
}
