#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>

#include "mfc/reference.hpp"
#include "mfc/rng.hpp"

using namespace mfc;

TEST_CASE("serial and parallel mc_cost agree bit for bit") {
  const CoefficientBundle bundle = scenario_bailout(BailoutParams{});
  const Grid1D grid(-1.0, 1.0, 16);
  const PolicySpec spec = PolicySpec::tiny(bundle.control_lo, bundle.control_hi);
  const PolicyParams params = init_params(spec, 42);

  for (const PolicyParams* pol : {static_cast<const PolicyParams*>(nullptr), &params}) {
    const McCost serial = mc_cost_serial(bundle, pol, 6, 8, grid, 1234);
    for (const int workers : {0, 1, 3}) {
      const McCost par = mc_cost(bundle, pol, 6, 8, grid, 1234, workers);
      CHECK(par.mean == serial.mean);
      CHECK(par.se == serial.se);
      REQUIRE(par.costs.size() == serial.costs.size());
      CHECK(std::memcmp(par.costs.data(), serial.costs.data(),
                        serial.costs.size() * sizeof(double)) == 0);
    }
  }
}

TEST_CASE("serial and parallel chaos tables agree bit for bit") {
  const CoefficientBundle bundle = scenario_bailout(BailoutParams{});
  const Grid1D grid(-1.0, 1.0, 16);
  const std::vector<int> ns = {8, 24};

  const std::vector<ChaosRow> serial = chaos_table_serial(bundle, nullptr, ns, 3, grid, 8, 77);
  for (const int workers : {0, 1, 3}) {
    const std::vector<ChaosRow> par = chaos_table(bundle, nullptr, ns, 3, grid, 8, 77, workers);
    REQUIRE(par.size() == serial.size());
    for (std::size_t i = 0; i < par.size(); ++i) {
      CHECK(par[i].N == serial[i].N);
      CHECK(par[i].reps == serial[i].reps);
      CHECK(par[i].mean_d1 == serial[i].mean_d1);
      CHECK(par[i].se == serial[i].se);
    }
  }
}

TEST_CASE("the serial twins validate their inputs") {
  const CoefficientBundle bundle = scenario_bailout(BailoutParams{});
  const Grid1D grid(-1.0, 1.0, 8);
  CHECK_THROWS_AS((void)mc_cost_serial(bundle, nullptr, 0, 4, grid, 1), std::invalid_argument);
  CHECK_THROWS_AS((void)chaos_table_serial(bundle, nullptr, std::vector<int>{}, 2, grid, 4, 1),
                  std::invalid_argument);
  CHECK_THROWS_AS((void)chaos_table_serial(bundle, nullptr, std::vector<int>{4}, 0, grid, 4, 1),
                  std::invalid_argument);
}
