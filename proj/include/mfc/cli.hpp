#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mfc/model.hpp"
#include "mfc/policy.hpp"
#include "mfc/train.hpp"

namespace mfc {

inline constexpr const char* kCodeVersion = "0.1.0";

// Config parsing or validation problem; the message starts with a
// "<file>:<line>:" anchor when one can be attributed.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct GridConfig {
  int n = 64;
  double x_lo = -1.0;
  double x_hi = 1.0;
};

// Scenario preset plus parameter overrides. "bailout" is the only preset.
struct ScenarioConfig {
  std::string name = "bailout";
  BailoutParams params;
};

struct TrainSection {
  std::vector<TrainStage> stages = {{40, 32, 32, 32}};
  double eta = 0.1;
  Optimizer optimizer = Optimizer::Sgd;
  double momentum_beta = 0.9;
  GradMode grad_mode = GradMode::Adjoint;
  double fd_step = 1e-5;
  std::string policy = "default";  // "default" | "tiny"
  bool policy_named = false;       // true when the config spelled it out
};

struct SingularSection {
  std::vector<double> lambda0_list = {5.0, 10.0, 25.0, 50.0};
  double tol = 1e-8;
  int max_iter = 50;
  int kill_N = 200;
  int kill_reps = 16;
};

struct ChaosSection {
  std::vector<int> N_list = {64, 256, 1024};
  int reps = 20;
};

struct GradcheckSection {
  double fd_step = 1e-5;
};

// One batch run. Everything has an explicit deterministic default; nothing is
// ever seeded from the clock.
struct RunConfig {
  std::string subcommand;  // particle | fem | train | sweep-alpha | sweep-rho |
                           // sweep-lambda0 | singular | gradcheck | chaos
  std::string out = "out";
  std::uint64_t seed = 1;
  int workers = 0;  // 0 = all available
  ScenarioConfig scenario;
  GridConfig grid;
  int m = 64;   // time steps
  int K = 16;   // FEM Monte Carlo paths
  int N = 256;  // particles
  std::string policy_checkpoint;    // drives particle/fem/chaos when nonempty
  std::vector<double> snapshots;    // particle: per-particle dump times
  std::vector<double> sweep_values; // sweeps: subcommand default when empty
  TrainSection train;
  SingularSection singular;
  ChaosSection chaos;
  GradcheckSection gradcheck;
};

// Strict parse: unknown keys, wrong types, and out-of-range counts are
// ConfigErrors anchored to the offending line of `text`.
[[nodiscard]] RunConfig parse_run_config(const std::string& text, const std::string& filename);
[[nodiscard]] RunConfig load_run_config(const std::string& path);

// The materialized config as JSON text (all defaults filled in); feeding it
// back through parse_run_config reproduces the run bit-exactly.
[[nodiscard]] std::string echo_run_config(const RunConfig& config);

// Propagation-of-chaos table: per rep one common-noise path shared by the FEM
// reference and by every particle count (and one particle stream seed shared
// across counts, so ensembles couple as prefixes). mean_d1 is the average over
// reps of the time-averaged d_1 between the empirical measure and the FEM
// measure; se = 0 when reps == 1.
struct ChaosRow {
  int N = 0;
  int reps = 0;
  double mean_d1 = 0.0;
  double se = 0.0;
};
[[nodiscard]] std::vector<ChaosRow> chaos_table(const CoefficientBundle& bundle,
                                                const PolicyParams* policy,
                                                std::span<const int> N_list, int reps,
                                                const Grid1D& grid, int m,
                                                std::uint64_t seed, int workers = 0);

// Executes one validated config: creates the output directory, writes
// manifest.json first, then the subcommand's artifacts, then finalizes the
// manifest with status, wall-clock, and the output list. Returns 0 on
// success, 2 on configuration problems, 3 on numerical failure (manifest
// intact either way).
[[nodiscard]] int run(const RunConfig& config);

// Full command line: mfc [subcommand] [--config <path>] [--out <dir>]
// [--workers <k>] [--seed <u64>]. Flags override the config file.
[[nodiscard]] int run_cli(int argc, const char* const* argv);

}  // namespace mfc
