// Benchmark of the OpenMP kernels against their plain-loop twins. Besides the
// timings it hard-checks that both produce bitwise-identical results, so it
// doubles as a consistency test (run with --quick in CI).
#include <chrono>
#include <cstdio>
#include <cstring>
#include <vector>

#include <CLI11.hpp>

#include "mfc/reference.hpp"

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int report(const char* name, double serial_s, double parallel_s, bool equal) {
  std::printf("%-12s serial %8.3f s   parallel %8.3f s   speedup %5.2fx   %s\n", name, serial_s,
              parallel_s, serial_s / parallel_s, equal ? "bitwise-equal" : "MISMATCH");
  return equal ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kernel benchmark: OpenMP vs serial reference"};
  bool quick = false;
  app.add_flag("--quick", quick, "small problem sizes for CI");
  CLI11_PARSE(app, argc, argv);

  const mfc::CoefficientBundle bundle = mfc::scenario_bailout(mfc::BailoutParams{});
  const int n = quick ? 16 : 64;
  const int m = quick ? 16 : 64;
  const int K = quick ? 8 : 64;
  const std::vector<int> N_list = quick ? std::vector<int>{16, 32} : std::vector<int>{64, 256};
  const int reps = quick ? 3 : 8;
  const mfc::Grid1D grid(-1.0, 1.0, n);
  int failures = 0;

  {
    const auto t0 = Clock::now();
    const mfc::McCost s = mfc::mc_cost_serial(bundle, nullptr, K, m, grid, 1234);
    const double ts = seconds_since(t0);
    const auto t1 = Clock::now();
    const mfc::McCost p = mfc::mc_cost(bundle, nullptr, K, m, grid, 1234);
    const double tp = seconds_since(t1);
    const bool equal = p.mean == s.mean && p.se == s.se && p.costs.size() == s.costs.size() &&
                       std::memcmp(p.costs.data(), s.costs.data(),
                                   s.costs.size() * sizeof(double)) == 0;
    failures += report("mc_cost", ts, tp, equal);
  }

  {
    const auto t0 = Clock::now();
    const std::vector<mfc::ChaosRow> s =
        mfc::chaos_table_serial(bundle, nullptr, N_list, reps, grid, m, 77);
    const double ts = seconds_since(t0);
    const auto t1 = Clock::now();
    const std::vector<mfc::ChaosRow> p =
        mfc::chaos_table(bundle, nullptr, N_list, reps, grid, m, 77);
    const double tp = seconds_since(t1);
    bool equal = p.size() == s.size();
    for (std::size_t i = 0; equal && i < p.size(); ++i) {
      equal = p[i].N == s[i].N && p[i].reps == s[i].reps && p[i].mean_d1 == s[i].mean_d1 &&
              p[i].se == s[i].se;
    }
    failures += report("chaos_table", ts, tp, equal);
  }

  return failures == 0 ? 0 : 1;
}
