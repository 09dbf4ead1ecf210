#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mfc/cli.hpp"
#include "mfc/io.hpp"
#include "mfc/model.hpp"
#include "mfc/rng.hpp"

using namespace mfc;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / "mfc-cli-test" / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t line_count(const std::string& text) {
  std::size_t n = 0;
  for (const char ch : text) n += ch == '\n';
  return n;
}

std::size_t column_count(const std::string& text) {
  std::size_t n = 1;
  for (const char ch : text) {
    if (ch == '\n') break;
    n += ch == ',';
  }
  return n;
}

std::string parse_error_of(const std::string& text) {
  try {
    (void)parse_run_config(text, "cfg.json");
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

int run_argv(std::vector<std::string> args) {
  std::vector<const char*> argv = {"mfc"};
  for (const std::string& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace

TEST_CASE("a config round-trips through its own echo") {
  const RunConfig base = parse_run_config("{}", "cfg.json");
  const std::string once = echo_run_config(base);
  const std::string twice = echo_run_config(parse_run_config(once, "echo.json"));
  CHECK(once == twice);

  // defaults are the documented ones, never the clock
  CHECK(base.seed == 1);
  CHECK(base.subcommand.empty());
  CHECK(base.m == 64);
  CHECK(base.grid.n == 64);
  CHECK(base.train.stages.size() == 1);
  CHECK(base.chaos.N_list == std::vector<int>{64, 256, 1024});
}

TEST_CASE("config errors carry a file and line anchor") {
  const std::string unknown = parse_error_of("{\n  \"bogus\": 1\n}");
  CHECK(unknown.find("cfg.json:2:") != std::string::npos);
  CHECK(unknown.find("bogus") != std::string::npos);

  const std::string nested = parse_error_of("{\n  \"grid\": {\n    \"weird\": 2\n  }\n}");
  CHECK(nested.find("cfg.json:3:") != std::string::npos);
  CHECK(nested.find("weird") != std::string::npos);

  const std::string malformed = parse_error_of("{\n  \"m\": 4,\n");
  CHECK(malformed.find("cfg.json:3:") != std::string::npos);
  CHECK(malformed.find("invalid JSON") != std::string::npos);

  CHECK(parse_error_of("{\"m\": \"hello\"}").find("integer") != std::string::npos);
  CHECK(parse_error_of("{\"m\": 0}") != "");
  CHECK(parse_error_of("{\"K\": -3}") != "");
  CHECK(parse_error_of("{\"seed\": -1}").find("nonnegative") != std::string::npos);
  CHECK(parse_error_of("{\"subcommand\": \"nope\"}").find("unknown subcommand") !=
        std::string::npos);
  CHECK(parse_error_of("{\"out\": \"\"}") != "");
  CHECK(parse_error_of("{\"grid\": {\"x_lo\": 1.0, \"x_hi\": -1.0}}").find("empty") !=
        std::string::npos);
  CHECK(parse_error_of("{\"scenario\": {\"name\": \"other\"}}") != "");
  CHECK(parse_error_of("{\"scenario\": {\"sigma\": -0.5}}") != "");
  CHECK(parse_error_of("{\"train\": {\"optimizer\": \"adam\"}}") != "");
  CHECK(parse_error_of("{\"train\": {\"momentum_beta\": 1.0}}") != "");
  CHECK(parse_error_of("{\"train\": {\"stages\": []}}") != "");
  CHECK(parse_error_of("{\"singular\": {\"lambda0_list\": [5.0, 5.0]}}") != "");
  CHECK(parse_error_of("{\"singular\": {\"kill_reps\": 1}}") != "");
  CHECK(parse_error_of("{\"chaos\": {\"N_list\": []}}") != "");
  CHECK(parse_error_of("{\"snapshots\": [-0.5]}") != "");
  CHECK(parse_error_of("[1, 2]").find("object") != std::string::npos);
}

TEST_CASE("the fem run writes a manifest and matching artifacts") {
  const fs::path dir = fresh_dir("fem");
  RunConfig c = parse_run_config("{}", "cfg.json");
  c.subcommand = "fem";
  c.out = dir.string();
  c.seed = 7;
  c.grid.n = 12;
  c.m = 8;
  REQUIRE(run(c) == 0);

  const json man = json::parse(slurp(dir / "manifest.json"));
  CHECK(man["status"] == "ok");
  CHECK(man["code_version"] == kCodeVersion);
  CHECK(man["outputs"] == json({"heatmap.csv", "loss.csv"}));
  CHECK(man["derived_seeds"]["noise"] == derive_seed(7, "mc-path", 0));
  CHECK(man["design_flags"].contains("sign_convention"));
  CHECK(man["wall_clock_s"].get<double>() >= 0.0);

  const std::string heat = slurp(dir / "heatmap.csv");
  CHECK(line_count(heat) == 10);  // header + m+1 rows
  CHECK(column_count(heat) == 12);
  const std::string loss = slurp(dir / "loss.csv");
  CHECK(line_count(loss) == 10);
  CHECK(column_count(loss) == 2);

  // replaying the echoed config reproduces every artifact bit for bit
  const fs::path dir2 = fresh_dir("fem-rerun");
  RunConfig c2 = parse_run_config(man["config"].dump(), "rerun.json");
  c2.out = dir2.string();
  REQUIRE(run(c2) == 0);
  CHECK(slurp(dir2 / "heatmap.csv") == heat);
  CHECK(slurp(dir2 / "loss.csv") == loss);
}

TEST_CASE("the particle run writes snapshots at requested times") {
  const fs::path dir = fresh_dir("particle");
  RunConfig c = parse_run_config("{}", "cfg.json");
  c.subcommand = "particle";
  c.out = dir.string();
  c.seed = 11;
  c.grid.n = 16;
  c.m = 8;
  c.N = 20;
  c.snapshots = {0.0, 0.5, 0.5, 1.0};  // duplicates collapse
  REQUIRE(run(c) == 0);

  const json man = json::parse(slurp(dir / "manifest.json"));
  CHECK(man["outputs"] == json({"particle_path.csv", "particles_0.csv", "particles_4.csv",
                                "particles_8.csv"}));

  const std::string path = slurp(dir / "particle_path.csv");
  CHECK(line_count(path) == 10);
  CHECK(column_count(path) == 4);
  // mass and loss are complementary on every row
  std::istringstream in(path);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    double t = 0, loss = 0, mass = 0, mean_x = 0;
    REQUIRE(std::sscanf(line.c_str(), "%lf,%lf,%lf,%lf", &t, &loss, &mass, &mean_x) == 4);
    CHECK(loss + mass == doctest::Approx(1.0).epsilon(1e-15));
  }

  const std::string snap = slurp(dir / "particles_8.csv");
  CHECK(line_count(snap) == 21);  // header + N particles
  CHECK(column_count(snap) == 4);
}

TEST_CASE("gradcheck defaults to the small architecture") {
  const fs::path dir = fresh_dir("gradcheck");
  RunConfig c = parse_run_config("{}", "cfg.json");
  c.subcommand = "gradcheck";
  c.out = dir.string();
  c.seed = 5;
  c.grid.n = 16;
  c.m = 8;
  c.K = 2;
  REQUIRE(run(c) == 0);

  const json man = json::parse(slurp(dir / "manifest.json"));
  CHECK(man["config"]["train"]["policy"] == "tiny");
  const json rep = json::parse(slurp(dir / "gradcheck.json"));
  CHECK(rep["grad"].size() == 152);
  CHECK(rep["fd"].size() == 152);
  CHECK(rep["kink_free"] == true);
  CHECK(rep["max_rel_err"].get<double>() < 1e-3);
  CHECK(man["results"]["gradcheck"]["max_rel_err"] == rep["max_rel_err"]);
}

TEST_CASE("train writes a cost history and reloadable checkpoints") {
  const fs::path dir = fresh_dir("train");
  RunConfig c = parse_run_config("{}", "cfg.json");
  c.subcommand = "train";
  c.out = dir.string();
  c.seed = 21;
  c.grid.n = 16;
  c.train.stages = {{3, 16, 8, 2}};
  c.train.eta = 0.05;
  c.train.policy = "tiny";
  REQUIRE(run(c) == 0);

  const std::string hist = slurp(dir / "cost_history.csv");
  CHECK(line_count(hist) == 4);
  CHECK(column_count(hist) == 3);

  const PolicyParams final_params = load_checkpoint((dir / "params.ckpt").string());
  const PolicyParams stage0 = load_checkpoint((dir / "stage_0.ckpt").string());
  REQUIRE(final_params.theta.size() == stage0.theta.size());
  CHECK(std::memcmp(final_params.theta.data(), stage0.theta.data(),
                    stage0.theta.size() * sizeof(double)) == 0);

  // a saved policy can seed another run through policy_checkpoint
  const fs::path dir2 = fresh_dir("train-reuse");
  RunConfig c2 = parse_run_config("{}", "cfg.json");
  c2.subcommand = "fem";
  c2.out = dir2.string();
  c2.grid.n = 16;
  c2.m = 8;
  c2.policy_checkpoint = (dir / "params.ckpt").string();
  CHECK(run(c2) == 0);
  c2.policy_checkpoint = (dir / "missing.ckpt").string();
  CHECK(run(c2) == 2);
}

TEST_CASE("a sweep writes one row per parameter value") {
  const fs::path dir = fresh_dir("sweep");
  RunConfig c = parse_run_config("{}", "cfg.json");
  c.subcommand = "sweep-alpha";
  c.out = dir.string();
  c.seed = 9;
  c.grid.n = 16;
  c.sweep_values = {0.5, 1.5};
  c.train.stages = {{2, 16, 8, 2}};
  c.train.eta = 0.05;
  c.train.policy = "tiny";
  REQUIRE(run(c) == 0);

  const std::string table = slurp(dir / "sweep_alpha.csv");
  CHECK(line_count(table) == 3);
  CHECK(column_count(table) == 4);
  CHECK(table.rfind("alpha,total,running,terminal", 0) == 0);

  const json man = json::parse(slurp(dir / "manifest.json"));
  CHECK(man["config"]["sweep_values"] == json({0.5, 1.5}));
}

TEST_CASE("sweep defaults are materialized into the manifest") {
  RunConfig c = parse_run_config("{\"subcommand\": \"sweep-rho\"}", "cfg.json");
  CHECK(c.sweep_values.empty());
  const fs::path dir = fresh_dir("sweep-defaults");
  c.out = dir.string();
  c.grid.n = 16;
  c.train.stages = {{1, 16, 4, 1}};
  c.train.policy = "tiny";
  REQUIRE(run(c) == 0);
  const json man = json::parse(slurp(dir / "manifest.json"));
  CHECK(man["config"]["sweep_values"] == json({0.0, 0.25, 0.5, 0.75}));
  CHECK(line_count(slurp(dir / "sweep_rho.csv")) == 5);
}

TEST_CASE("the singular run reports diagnostics in the manifest") {
  const fs::path dir = fresh_dir("singular");
  RunConfig c = parse_run_config("{}", "cfg.json");
  c.subcommand = "singular";
  c.out = dir.string();
  c.seed = 13;
  c.grid.n = 16;
  c.m = 8;
  c.K = 2;
  c.singular.lambda0_list = {5.0, 25.0};
  c.singular.kill_N = 40;
  c.singular.kill_reps = 4;
  REQUIRE(run(c) == 0);

  CHECK(line_count(slurp(dir / "family.csv")) == 19);  // header + 2 members x 9 times
  CHECK(line_count(slurp(dir / "limit.csv")) == 10);
  CHECK(line_count(slurp(dir / "kill_gap.csv")) == 3);
  const std::string iter = slurp(dir / "minimal_iteration.csv");
  CHECK(line_count(iter) % 9 == 1);  // header + 9 rows per iterate

  const json man = json::parse(slurp(dir / "manifest.json"));
  const json& diag = man["results"]["diagnostics"];
  CHECK(diag["monotone"] == true);
  CHECK(diag["limit_gap"].size() == 2);
  CHECK(diag.contains("minimal_converged"));
  CHECK(man["derived_seeds"]["mc-path"].size() == 2);
}

TEST_CASE("chaos_table is deterministic and handles a single rep") {
  const CoefficientBundle bundle = scenario_bailout(BailoutParams{});
  const Grid1D grid(-1.0, 1.0, 16);
  const std::vector<int> ns = {8, 16};

  const std::vector<ChaosRow> a = chaos_table(bundle, nullptr, ns, 3, grid, 8, 3);
  const std::vector<ChaosRow> b = chaos_table(bundle, nullptr, ns, 3, grid, 8, 3);
  REQUIRE(a.size() == 2);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].N == ns[i]);
    CHECK(a[i].reps == 3);
    CHECK(a[i].mean_d1 == b[i].mean_d1);
    CHECK(a[i].se == b[i].se);
    CHECK(a[i].mean_d1 > 0.0);
    CHECK(a[i].se > 0.0);
  }

  const std::vector<ChaosRow> one = chaos_table(bundle, nullptr, ns, 1, grid, 8, 3);
  CHECK(one[0].se == 0.0);
  CHECK(one[0].mean_d1 > 0.0);

  CHECK_THROWS_AS((void)chaos_table(bundle, nullptr, std::vector<int>{}, 2, grid, 8, 3),
                  std::invalid_argument);
  CHECK_THROWS_AS((void)chaos_table(bundle, nullptr, ns, 0, grid, 8, 3), std::invalid_argument);
}

TEST_CASE("the chaos run tabulates the particle-to-fem distance") {
  const fs::path dir = fresh_dir("chaos");
  RunConfig c = parse_run_config("{}", "cfg.json");
  c.subcommand = "chaos";
  c.out = dir.string();
  c.seed = 3;
  c.grid.n = 16;
  c.m = 8;
  c.chaos.N_list = {8, 16};
  c.chaos.reps = 3;
  REQUIRE(run(c) == 0);

  const std::string table = slurp(dir / "chaos.csv");
  CHECK(line_count(table) == 3);
  CHECK(table.rfind("N,reps,mean_d1,se", 0) == 0);

  // the artifact matches a direct evaluation bit for bit
  const std::vector<ChaosRow> rows =
      chaos_table(scenario_bailout(BailoutParams{}), nullptr, c.chaos.N_list, 3,
                  Grid1D(-1.0, 1.0, 16), 8, 3);
  std::istringstream in(table);
  std::string line;
  std::getline(in, line);
  for (const ChaosRow& r : rows) {
    REQUIRE(std::getline(in, line));
    CHECK(line == format_g17(r.N) + "," + format_g17(r.reps) + "," + format_g17(r.mean_d1) +
                      "," + format_g17(r.se));
  }
}

TEST_CASE("exit codes distinguish config and numerical failures") {
  RunConfig bad = parse_run_config("{}", "cfg.json");
  bad.subcommand = "not-a-thing";
  CHECK(run(bad) == 2);

  const fs::path dir = fresh_dir("blowup");
  RunConfig c = parse_run_config("{}", "cfg.json");
  c.subcommand = "fem";
  c.out = dir.string();
  c.grid.n = 16;
  c.m = 8;
  c.scenario.params.alpha = 1e150;  // drift swamps the mass matrix
  CHECK(run(c) == 3);
  const json man = json::parse(slurp(dir / "manifest.json"));
  CHECK(man["status"] == "numerical-failure");
  CHECK(man["error"].get<std::string>().size() > 0);
  CHECK(man["outputs"] == json::array());
}

TEST_CASE("the command line overrides the config file") {
  const fs::path dir = fresh_dir("cli");
  const fs::path cfg = dir / "cfg.json";
  {
    std::ofstream out(cfg);
    out << "{\"subcommand\": \"fem\", \"grid\": {\"n\": 12}, \"m\": 4, \"seed\": 2}\n";
  }
  const fs::path run1 = dir / "run1";
  REQUIRE(run_argv({"--config", cfg.string(), "--out", run1.string()}) == 0);
  json man = json::parse(slurp(run1 / "manifest.json"));
  CHECK(man["config"]["seed"] == 2);
  CHECK(man["config"]["out"] == run1.string());

  const fs::path run2 = dir / "run2";
  REQUIRE(run_argv({"fem", "--config", cfg.string(), "--out", run2.string(), "--seed", "9"}) ==
          0);
  man = json::parse(slurp(run2 / "manifest.json"));
  CHECK(man["config"]["seed"] == 9);

  CHECK(run_argv({}) == 2);                                    // no subcommand anywhere
  CHECK(run_argv({"--config", (dir / "nope.json").string()}) == 2);
  CHECK(run_argv({"bogus-subcommand"}) == 2);
  CHECK(run_argv({"--frobnicate"}) == 2);
  CHECK(run_argv({"--help"}) == 0);
}
