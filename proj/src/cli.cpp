#include "mfc/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cinttypes>
#include <climits>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include <CLI11.hpp>
#include <json.hpp>

#include "mfc/errors.hpp"
#include "mfc/fem.hpp"
#include "mfc/io.hpp"
#include "mfc/measures.hpp"
#include "mfc/particle.hpp"
#include "mfc/rng.hpp"
#include "mfc/singular.hpp"

namespace mfc {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

const std::set<std::string>& subcommands() {
  static const std::set<std::string> names = {"particle",   "fem",       "train",
                                              "sweep-alpha", "sweep-rho", "sweep-lambda0",
                                              "singular",    "gradcheck", "chaos"};
  return names;
}

std::size_t uzt(int i) { return static_cast<std::size_t>(i); }

// 1-based line of the first occurrence of "key" in the raw text; the anchor
// for validation messages (parse errors carry exact byte offsets instead)
int line_of(const std::string& text, const std::string& key) {
  const std::string needle = "\"" + key + "\"";
  const std::size_t pos = text.find(needle);
  if (pos == std::string::npos) return 1;
  return 1 + static_cast<int>(std::count(text.begin(), text.begin() + static_cast<long>(pos), '\n'));
}

// One JSON object being consumed strictly: every key must be claimed by a
// typed getter, leftovers are unknown-key errors.
class Section {
 public:
  Section(const json& j, const std::string& text, const std::string& file, std::string ctx)
      : j_(j), text_(text), file_(file), ctx_(std::move(ctx)) {}

  [[noreturn]] void fail(const std::string& key, const std::string& msg) const {
    const std::string where = ctx_.empty() ? "" : " in \"" + ctx_ + "\"";
    throw ConfigError(file_ + ":" + std::to_string(line_of(text_, key)) + ": " + msg + where);
  }

  const json* find(const std::string& key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!seen_.contains(item.key())) fail(item.key(), "unknown key \"" + item.key() + "\"");
    }
  }

  void get_string(const std::string& key, std::string& dst) {
    if (const json* v = find(key)) {
      if (!v->is_string()) fail(key, "\"" + key + "\" must be a string");
      dst = v->get<std::string>();
    }
  }

  void get_double(const std::string& key, double& dst) {
    if (const json* v = find(key)) {
      if (!v->is_number()) fail(key, "\"" + key + "\" must be a number");
      dst = v->get<double>();
      if (!std::isfinite(dst)) fail(key, "\"" + key + "\" must be finite");
    }
  }

  void get_int(const std::string& key, int& dst, int lo) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer()) fail(key, "\"" + key + "\" must be an integer");
      const long long x = v->get<long long>();
      if (x < lo || x > INT_MAX) {
        fail(key, "\"" + key + "\" must be an integer >= " + std::to_string(lo));
      }
      dst = static_cast<int>(x);
    }
  }

  void get_u64(const std::string& key, std::uint64_t& dst) {
    if (const json* v = find(key)) {
      if (!v->is_number_unsigned() && !(v->is_number_integer() && v->get<long long>() >= 0)) {
        fail(key, "\"" + key + "\" must be a nonnegative integer");
      }
      dst = v->get<std::uint64_t>();
    }
  }

  void get_dlist(const std::string& key, std::vector<double>& dst) {
    if (const json* v = find(key)) {
      if (!v->is_array()) fail(key, "\"" + key + "\" must be an array of numbers");
      std::vector<double> out;
      for (const auto& e : *v) {
        if (!e.is_number()) fail(key, "\"" + key + "\" must contain only numbers");
        out.push_back(e.get<double>());
        if (!std::isfinite(out.back())) fail(key, "\"" + key + "\" must contain finite numbers");
      }
      dst = std::move(out);
    }
  }

  void get_ilist(const std::string& key, std::vector<int>& dst, int lo) {
    if (const json* v = find(key)) {
      if (!v->is_array()) fail(key, "\"" + key + "\" must be an array of integers");
      std::vector<int> out;
      for (const auto& e : *v) {
        if (!e.is_number_integer() || e.get<long long>() < lo || e.get<long long>() > INT_MAX) {
          fail(key, "\"" + key + "\" must contain integers >= " + std::to_string(lo));
        }
        out.push_back(static_cast<int>(e.get<long long>()));
      }
      dst = std::move(out);
    }
  }

  const json* object(const std::string& key) {
    const json* v = find(key);
    if (v && !v->is_object()) fail(key, "\"" + key + "\" must be an object");
    return v;
  }

 private:
  const json& j_;
  const std::string& text_;
  const std::string& file_;
  std::string ctx_;
  std::set<std::string> seen_;
};

void parse_scenario(Section& top, const std::string& text, const std::string& file,
                    ScenarioConfig& dst) {
  const json* v = top.object("scenario");
  if (!v) return;
  Section s(*v, text, file, "scenario");
  s.get_string("name", dst.name);
  if (dst.name != "bailout") s.fail("name", "unknown scenario \"" + dst.name + "\"");
  s.get_double("alpha", dst.params.alpha);
  s.get_double("lambda0", dst.params.lambda0);
  s.get_double("sigma", dst.params.sigma);
  s.get_double("sigma0", dst.params.sigma0);
  s.get_double("w", dst.params.w);
  s.get_double("gamma_k", dst.params.gamma_k);
  s.get_double("gamma_theta", dst.params.gamma_theta);
  s.finish();
  if (dst.params.alpha < 0) s.fail("alpha", "\"alpha\" must be >= 0");
  if (dst.params.lambda0 < 0) s.fail("lambda0", "\"lambda0\" must be >= 0");
  if (dst.params.sigma < 0) s.fail("sigma", "\"sigma\" must be >= 0");
  if (dst.params.sigma0 < 0) s.fail("sigma0", "\"sigma0\" must be >= 0");
  if (!(dst.params.gamma_k > 0)) s.fail("gamma_k", "\"gamma_k\" must be > 0");
  if (!(dst.params.gamma_theta > 0)) s.fail("gamma_theta", "\"gamma_theta\" must be > 0");
}

void parse_train(Section& top, const std::string& text, const std::string& file,
                 TrainSection& dst) {
  const json* v = top.object("train");
  if (!v) return;
  Section s(*v, text, file, "train");
  if (const json* st = s.find("stages")) {
    if (!st->is_array() || st->empty()) s.fail("stages", "\"stages\" must be a nonempty array");
    std::vector<TrainStage> stages;
    for (const auto& e : *st) {
      if (!e.is_object()) s.fail("stages", "\"stages\" entries must be objects");
      Section se(e, text, file, "train.stages");
      TrainStage stage;
      se.get_int("epochs", stage.epochs, 1);
      se.get_int("n", stage.n, 2);
      se.get_int("m", stage.m, 1);
      se.get_int("K", stage.K, 1);
      se.finish();
      stages.push_back(stage);
    }
    dst.stages = std::move(stages);
  }
  s.get_double("eta", dst.eta);
  if (dst.eta < 0) s.fail("eta", "\"eta\" must be >= 0");
  s.get_double("momentum_beta", dst.momentum_beta);
  if (!(dst.momentum_beta >= 0 && dst.momentum_beta < 1)) {
    s.fail("momentum_beta", "\"momentum_beta\" must lie in [0, 1)");
  }
  s.get_double("fd_step", dst.fd_step);
  if (!(dst.fd_step > 0)) s.fail("fd_step", "\"fd_step\" must be > 0");
  std::string opt = dst.optimizer == Optimizer::Momentum ? "momentum" : "sgd";
  s.get_string("optimizer", opt);
  if (opt == "sgd") {
    dst.optimizer = Optimizer::Sgd;
  } else if (opt == "momentum") {
    dst.optimizer = Optimizer::Momentum;
  } else {
    s.fail("optimizer", "\"optimizer\" must be \"sgd\" or \"momentum\"");
  }
  std::string gm = dst.grad_mode == GradMode::FiniteDiff ? "fd" : "adjoint";
  s.get_string("grad_mode", gm);
  if (gm == "adjoint") {
    dst.grad_mode = GradMode::Adjoint;
  } else if (gm == "fd") {
    dst.grad_mode = GradMode::FiniteDiff;
  } else {
    s.fail("grad_mode", "\"grad_mode\" must be \"adjoint\" or \"fd\"");
  }
  if (const json* p = s.find("policy")) {
    if (!p->is_string()) s.fail("policy", "\"policy\" must be a string");
    dst.policy = p->get<std::string>();
    dst.policy_named = true;
    if (dst.policy != "default" && dst.policy != "tiny") {
      s.fail("policy", "\"policy\" must be \"default\" or \"tiny\"");
    }
  }
  s.finish();
}

void parse_singular(Section& top, const std::string& text, const std::string& file,
                    SingularSection& dst) {
  const json* v = top.object("singular");
  if (!v) return;
  Section s(*v, text, file, "singular");
  s.get_dlist("lambda0_list", dst.lambda0_list);
  if (dst.lambda0_list.empty()) s.fail("lambda0_list", "\"lambda0_list\" must be nonempty");
  for (std::size_t i = 0; i < dst.lambda0_list.size(); ++i) {
    if (dst.lambda0_list[i] < 0 || (i > 0 && dst.lambda0_list[i] <= dst.lambda0_list[i - 1])) {
      s.fail("lambda0_list", "\"lambda0_list\" must be strictly increasing and >= 0");
    }
  }
  s.get_double("tol", dst.tol);
  if (!(dst.tol > 0)) s.fail("tol", "\"tol\" must be > 0");
  s.get_int("max_iter", dst.max_iter, 1);
  s.get_int("kill_N", dst.kill_N, 1);
  s.get_int("kill_reps", dst.kill_reps, 2);
  s.finish();
}

void parse_chaos(Section& top, const std::string& text, const std::string& file,
                 ChaosSection& dst) {
  const json* v = top.object("chaos");
  if (!v) return;
  Section s(*v, text, file, "chaos");
  s.get_ilist("N_list", dst.N_list, 1);
  if (dst.N_list.empty()) s.fail("N_list", "\"N_list\" must be nonempty");
  s.get_int("reps", dst.reps, 1);
  s.finish();
}

void parse_gradcheck(Section& top, const std::string& text, const std::string& file,
                     GradcheckSection& dst) {
  const json* v = top.object("gradcheck");
  if (!v) return;
  Section s(*v, text, file, "gradcheck");
  s.get_double("fd_step", dst.fd_step);
  if (!(dst.fd_step > 0)) s.fail("fd_step", "\"fd_step\" must be > 0");
  s.finish();
}

// Subcommand-dependent defaults, applied before the manifest echo so the
// echoed config replays with identical resolution.
RunConfig resolve(RunConfig c) {
  if (c.sweep_values.empty()) {
    if (c.subcommand == "sweep-alpha") c.sweep_values = {0.5, 1.0, 1.5, 2.0, 2.5};
    if (c.subcommand == "sweep-rho") c.sweep_values = {0.0, 0.25, 0.5, 0.75};
    if (c.subcommand == "sweep-lambda0") c.sweep_values = {5.0, 10.0, 25.0, 50.0};
  }
  // gradcheck defaults to the small architecture: central differences over the
  // full default parameter vector would dwarf the run being checked
  if (!c.train.policy_named && c.subcommand == "gradcheck") c.train.policy = "tiny";
  c.train.policy_named = true;
  return c;
}

std::string short_g(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string join(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

json seeds_for(const RunConfig& c) {
  json s = json::object();
  const auto paths = [&](int count) {
    json a = json::array();
    for (int k = 0; k < count; ++k) a.push_back(derive_seed(c.seed, "mc-path", static_cast<std::uint64_t>(k)));
    return a;
  };
  if (c.subcommand == "fem") {
    s["noise"] = derive_seed(c.seed, "mc-path", 0);
  } else if (c.subcommand == "particle") {
    s["noise"] = derive_seed(c.seed, "mc-path", 0);
    s["particles"] = derive_seed(c.seed, "particles");
  } else if (c.subcommand == "train" || c.subcommand.rfind("sweep-", 0) == 0) {
    s["init"] = derive_seed(c.seed, "init");
    json epochs = json::array();
    int total = 0;
    for (const TrainStage& st : c.train.stages) total += st.epochs;
    for (int e = 0; e < total; ++e) epochs.push_back(derive_seed(c.seed, "epoch", static_cast<std::uint64_t>(e)));
    s["epoch"] = std::move(epochs);
    if (c.subcommand != "train") s["eval"] = derive_seed(c.seed, "eval");
  } else if (c.subcommand == "singular") {
    s["mc-path"] = paths(c.K);
    s["kill-gap"] = derive_seed(c.seed, "kill-gap");
    s["minimal-noise"] = derive_seed(c.seed, "mc-path", 0);
  } else if (c.subcommand == "gradcheck") {
    s["init"] = derive_seed(c.seed, "init");
    s["mc-path"] = paths(c.K);
  } else if (c.subcommand == "chaos") {
    json noise = json::array();
    json parts = json::array();
    for (int r = 0; r < c.chaos.reps; ++r) {
      noise.push_back(derive_seed(c.seed, "chaos-noise", static_cast<std::uint64_t>(r)));
      parts.push_back(derive_seed(c.seed, "chaos-particles", static_cast<std::uint64_t>(r)));
    }
    s["rep-noise"] = std::move(noise);
    s["rep-particles"] = std::move(parts);
  }
  return s;
}

json make_manifest(const RunConfig& c) {
  json man;
  man["status"] = "running";
  man["code_version"] = kCodeVersion;
  man["config"] = json::parse(echo_run_config(c));
  man["design_flags"] = {
      {"sign_convention", "contagion enters the drift as -alpha * dL"},
      {"noise_form", "weak transport: B[i][j] = int sigma0 * v_j * v_i', applied as (B c) dW0"},
      {"activation", "tanh"},
      {"link", "lower bound + softplus; scaled sigmoid when two-sided"},
      {"eta", c.train.eta},
  };
  man["derived_seeds"] = seeds_for(c);
  man["started_unix_ms"] =
      std::chrono::duration_cast<std::chrono::milliseconds>(
          std::chrono::system_clock::now().time_since_epoch())
          .count();
  return man;
}

CoefficientBundle make_bundle(const RunConfig& c) { return scenario_bailout(c.scenario.params); }

Grid1D make_grid(const RunConfig& c) { return Grid1D(c.grid.x_lo, c.grid.x_hi, c.grid.n); }

PolicySpec make_spec(const RunConfig& c, const CoefficientBundle& bundle) {
  if (c.train.policy == "tiny") return PolicySpec::tiny(bundle.control_lo, bundle.control_hi);
  return PolicySpec::defaults(bundle.control_lo, bundle.control_hi);
}

TrainConfig make_train_config(const RunConfig& c) {
  TrainConfig tc;
  tc.stages = c.train.stages;
  tc.eta = c.train.eta;
  tc.optimizer = c.train.optimizer;
  tc.momentum_beta = c.train.momentum_beta;
  tc.grad_mode = c.train.grad_mode;
  tc.fd_step = c.train.fd_step;
  tc.seed = c.seed;
  tc.x_lo = c.grid.x_lo;
  tc.x_hi = c.grid.x_hi;
  tc.workers = c.workers;
  return tc;
}

std::optional<PolicyParams> maybe_policy(const RunConfig& c) {
  if (c.policy_checkpoint.empty()) return std::nullopt;
  try {
    return load_checkpoint(c.policy_checkpoint);
  } catch (const std::exception& e) {
    throw ConfigError("policy_checkpoint \"" + c.policy_checkpoint + "\": " + e.what());
  }
}

void emit(const RunConfig& c, std::vector<std::string>& outs, const std::string& name,
          std::span<const std::string> header, const std::vector<std::vector<double>>& rows) {
  write_csv(join(c.out, name), header, rows);
  outs.push_back(name);
}

void run_fem(const RunConfig& c, const CoefficientBundle& bundle, const PolicyParams* pol,
             std::vector<std::string>& outs, json&) {
  const Grid1D grid = make_grid(c);
  const NoisePath noise = NoisePath::make(c.m, bundle.T / c.m, derive_seed(c.seed, "mc-path", 0));
  const SpdePath path = evolve_spde(bundle, pol, grid, c.m, noise);

  std::vector<std::string> header;
  header.reserve(uzt(grid.n));
  for (int i = 1; i <= grid.n; ++i) header.push_back("rho@" + short_g(grid.node(i)));
  std::vector<std::vector<double>> rows;
  rows.reserve(path.clipped.size());
  for (const SubProbGrid& nu : path.clipped) rows.push_back(nu.c());
  emit(c, outs, "heatmap.csv", header, rows);

  const std::vector<std::string> lh = {"t", "loss"};
  std::vector<std::vector<double>> lr;
  for (int k = 0; k <= c.m; ++k) lr.push_back({k * path.dt, path.loss[uzt(k)]});
  emit(c, outs, "loss.csv", lh, lr);
}

void run_particle(const RunConfig& c, const CoefficientBundle& bundle, const PolicyParams* pol,
                  std::vector<std::string>& outs, json&) {
  const NormInfo norm{bundle.T, c.grid.x_lo, c.grid.x_hi};
  const double dt = bundle.T / c.m;
  const NoisePath noise = NoisePath::make(c.m, dt, derive_seed(c.seed, "mc-path", 0));
  const ParticleRun run =
      simulate_particles(bundle, pol, norm, c.N, noise, derive_seed(c.seed, "particles"));

  const std::vector<std::string> header = {"t", "loss", "mass", "mean_x"};
  std::vector<std::vector<double>> rows;
  for (int k = 0; k <= c.m; ++k) {
    const ParticleEnsemble& st = run.states[uzt(k)];
    double sx = 0.0;
    int alive = 0;
    for (int i = 0; i < c.N; ++i) {
      if (st.alive[uzt(i)]) {
        sx += st.x[uzt(i)];
        ++alive;
      }
    }
    const double mean_x = alive > 0 ? sx / alive : 0.0;
    rows.push_back({k * dt, run.loss[uzt(k)], 1.0 - run.loss[uzt(k)], mean_x});
  }
  emit(c, outs, "particle_path.csv", header, rows);

  std::set<int> steps;
  for (const double t : c.snapshots) {
    const int k = static_cast<int>(std::llround(t / dt));
    steps.insert(std::clamp(k, 0, c.m));
  }
  const std::vector<std::string> sh = {"particle", "x", "alive", "kill_time"};
  for (const int k : steps) {
    const ParticleEnsemble& st = run.states[uzt(k)];
    std::vector<std::vector<double>> sr;
    sr.reserve(uzt(c.N));
    for (int i = 0; i < c.N; ++i) {
      sr.push_back({static_cast<double>(i), st.x[uzt(i)],
                    st.alive[uzt(i)] ? 1.0 : 0.0, st.kill_time[uzt(i)]});
    }
    emit(c, outs, "particles_" + std::to_string(k) + ".csv", sh, sr);
  }
}

void run_train(const RunConfig& c, const CoefficientBundle& bundle, const PolicyParams*,
               std::vector<std::string>& outs, json& extra) {
  const PolicySpec spec = make_spec(c, bundle);
  const TrainResult res = train(bundle, make_train_config(c), &spec);

  const std::vector<std::string> header = {"epoch", "cost", "se"};
  std::vector<std::vector<double>> rows;
  for (int e = 0; e < res.epochs_run; ++e) {
    rows.push_back({static_cast<double>(e), res.cost_history[uzt(e)], res.cost_se[uzt(e)]});
  }
  emit(c, outs, "cost_history.csv", header, rows);

  for (std::size_t i = 0; i < res.stage_params.size(); ++i) {
    const std::string name = "stage_" + std::to_string(i) + ".ckpt";
    save_checkpoint(res.stage_params[i], join(c.out, name));
    outs.push_back(name);
  }
  save_checkpoint(res.params, join(c.out, "params.ckpt"));
  outs.push_back("params.ckpt");

  extra["train"] = {{"aborted", res.aborted}, {"epochs_run", res.epochs_run}};
  if (res.aborted) {
    throw NumericalBlowup("training aborted; the last good checkpoint was saved");
  }
}

void run_sweep(const RunConfig& c, std::vector<std::string>& outs, json&) {
  const BailoutParams base = c.scenario.params;
  std::function<CoefficientBundle(double)> factory;
  std::string col;
  if (c.subcommand == "sweep-alpha") {
    col = "alpha";
    factory = [base](double a) {
      BailoutParams p = base;
      p.alpha = a;
      return scenario_bailout(p);
    };
  } else if (c.subcommand == "sweep-rho") {
    col = "rho";
    const double total_var = base.sigma * base.sigma + base.sigma0 * base.sigma0;
    factory = [base, total_var](double r) {
      const VolSplit vs = vol_from_rho(r, total_var);
      BailoutParams p = base;
      p.sigma = vs.sigma;
      p.sigma0 = vs.sigma0;
      return scenario_bailout(p);
    };
  } else {
    col = "lambda0";
    factory = [base](double l0) {
      BailoutParams p = base;
      p.lambda0 = l0;
      return scenario_bailout(p);
    };
  }

  const PolicySpec spec = make_spec(c, make_bundle(c));
  const std::vector<SweepRow> rows = sweep(factory, c.sweep_values, make_train_config(c), &spec);

  const std::vector<std::string> header = {col, "total", "running", "terminal"};
  std::vector<std::vector<double>> table;
  for (const SweepRow& r : rows) table.push_back({r.parameter, r.total, r.running, r.terminal});
  emit(c, outs, "sweep_" + col + ".csv", header, table);
}

void run_singular(const RunConfig& c, const CoefficientBundle& bundle,
                  std::vector<std::string>& outs, json& extra) {
  const Grid1D grid = make_grid(c);
  const LossPathFamily family =
      intensity_sweep(bundle, c.singular.lambda0_list, grid, c.m, c.K, c.seed, c.workers,
                      c.singular.kill_N, c.singular.kill_reps);
  const MonotoneLimit lim = monotone_limit(family);

  const std::size_t L = family.loss.size();
  const std::size_t K = family.loss[0].size();
  const std::size_t T = family.loss[0][0].size();
  std::vector<std::vector<double>> mean(L, std::vector<double>(T, 0.0));
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t k = 0; k < K; ++k) {
      for (std::size_t t = 0; t < T; ++t) mean[l][t] += family.loss[l][k][t];
    }
    for (double& v : mean[l]) v /= static_cast<double>(K);
  }

  const std::vector<std::string> fh = {"lambda0", "t", "loss"};
  std::vector<std::vector<double>> fr;
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t t = 0; t < T; ++t) {
      fr.push_back({family.lambda0[l], static_cast<double>(t) * family.dt, mean[l][t]});
    }
  }
  emit(c, outs, "family.csv", fh, fr);

  const std::vector<std::string> lh = {"t", "limit", "last_pair_gap"};
  std::vector<std::vector<double>> lr;
  for (std::size_t t = 0; t < T; ++t) {
    lr.push_back({static_cast<double>(t) * family.dt, lim.limit[t], lim.per_time_gap[t]});
  }
  emit(c, outs, "limit.csv", lh, lr);

  const std::vector<std::string> kh = {"lambda0", "mean_gap", "se"};
  std::vector<std::vector<double>> kr;
  for (const KillGapRow& row : family.kill_gap) kr.push_back({row.lambda0, row.mean_gap, row.se});
  emit(c, outs, "kill_gap.csv", kh, kr);

  const NoisePath noise = NoisePath::make(c.m, bundle.T / c.m, derive_seed(c.seed, "mc-path", 0));
  const MinimalIteration mi = minimal_iteration(bundle, c.singular.lambda0_list.back(), grid,
                                                c.m, noise, c.singular.tol, c.singular.max_iter);
  const std::vector<std::string> mh = {"iteration", "t", "loss"};
  std::vector<std::vector<double>> mr;
  for (std::size_t j = 0; j < mi.iterates.size(); ++j) {
    for (std::size_t t = 0; t < mi.iterates[j].size(); ++t) {
      mr.push_back({static_cast<double>(j), static_cast<double>(t) * family.dt, mi.iterates[j][t]});
    }
  }
  emit(c, outs, "minimal_iteration.csv", mh, mr);

  extra["diagnostics"] = {{"monotone", lim.monotone},
                          {"worst_violation", lim.worst_violation},
                          {"limit_gap", lim.limit_gap},
                          {"minimal_converged", mi.converged},
                          {"minimal_iterations", mi.iterations},
                          {"minimal_last_gap", mi.last_gap}};
}

void run_gradcheck(const RunConfig& c, const CoefficientBundle& bundle,
                   std::vector<std::string>& outs, json& extra) {
  const Grid1D grid = make_grid(c);
  const PolicySpec spec = make_spec(c, bundle);
  const PolicyParams params = init_params(spec, derive_seed(c.seed, "init"));
  const GradReport rep =
      gradcheck(bundle, params, grid, c.m, c.K, c.seed, c.gradcheck.fd_step, c.workers);

  json g = {{"cost", rep.cost},
            {"cost_se", rep.cost_se},
            {"max_rel_err", rep.max_rel_err},
            {"kink_free", rep.kink_free},
            {"grad", rep.grad},
            {"fd", rep.fd},
            {"rel_err", rep.rel_err}};
  write_text(join(c.out, "gradcheck.json"), g.dump(2) + "\n");
  outs.push_back("gradcheck.json");
  extra["gradcheck"] = {{"max_rel_err", rep.max_rel_err}, {"kink_free", rep.kink_free}};
}

void run_chaos(const RunConfig& c, const CoefficientBundle& bundle, const PolicyParams* pol,
               std::vector<std::string>& outs, json&) {
  const Grid1D grid = make_grid(c);
  const std::vector<ChaosRow> rows =
      chaos_table(bundle, pol, c.chaos.N_list, c.chaos.reps, grid, c.m, c.seed, c.workers);
  const std::vector<std::string> header = {"N", "reps", "mean_d1", "se"};
  std::vector<std::vector<double>> table;
  for (const ChaosRow& r : rows) {
    table.push_back({static_cast<double>(r.N), static_cast<double>(r.reps), r.mean_d1, r.se});
  }
  emit(c, outs, "chaos.csv", header, table);
}

void dispatch(const RunConfig& c, const CoefficientBundle& bundle, const PolicyParams* pol,
              std::vector<std::string>& outs, json& extra) {
  if (c.subcommand == "fem") {
    run_fem(c, bundle, pol, outs, extra);
  } else if (c.subcommand == "particle") {
    run_particle(c, bundle, pol, outs, extra);
  } else if (c.subcommand == "train") {
    run_train(c, bundle, pol, outs, extra);
  } else if (c.subcommand.rfind("sweep-", 0) == 0) {
    run_sweep(c, outs, extra);
  } else if (c.subcommand == "singular") {
    run_singular(c, bundle, outs, extra);
  } else if (c.subcommand == "gradcheck") {
    run_gradcheck(c, bundle, outs, extra);
  } else {
    run_chaos(c, bundle, pol, outs, extra);
  }
}

}  // namespace

RunConfig parse_run_config(const std::string& text, const std::string& filename) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    const std::size_t byte = std::min(e.byte > 0 ? e.byte - 1 : 0, text.size());
    const int line =
        1 + static_cast<int>(std::count(text.begin(), text.begin() + static_cast<long>(byte), '\n'));
    throw ConfigError(filename + ":" + std::to_string(line) + ": invalid JSON: " + e.what());
  }
  if (!root.is_object()) throw ConfigError(filename + ":1: config must be a JSON object");

  RunConfig c;
  Section top(root, text, filename, "");
  top.get_string("subcommand", c.subcommand);
  if (!c.subcommand.empty() && !subcommands().contains(c.subcommand)) {
    top.fail("subcommand", "unknown subcommand \"" + c.subcommand + "\"");
  }
  top.get_string("out", c.out);
  if (c.out.empty()) top.fail("out", "\"out\" must be nonempty");
  top.get_u64("seed", c.seed);
  top.get_int("workers", c.workers, 0);
  top.get_int("m", c.m, 1);
  top.get_int("K", c.K, 1);
  top.get_int("N", c.N, 1);
  top.get_string("policy_checkpoint", c.policy_checkpoint);
  top.get_dlist("snapshots", c.snapshots);
  for (const double t : c.snapshots) {
    if (t < 0) top.fail("snapshots", "\"snapshots\" times must be >= 0");
  }
  top.get_dlist("sweep_values", c.sweep_values);

  if (const json* g = top.object("grid")) {
    Section s(*g, text, filename, "grid");
    s.get_int("n", c.grid.n, 1);
    s.get_double("x_lo", c.grid.x_lo);
    s.get_double("x_hi", c.grid.x_hi);
    s.finish();
    if (!(c.grid.x_lo < c.grid.x_hi)) s.fail("x_lo", "grid domain is empty");
  }
  parse_scenario(top, text, filename, c.scenario);
  parse_train(top, text, filename, c.train);
  parse_singular(top, text, filename, c.singular);
  parse_chaos(top, text, filename, c.chaos);
  parse_gradcheck(top, text, filename, c.gradcheck);
  top.finish();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(path + ": cannot open config file");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path);
}

std::string echo_run_config(const RunConfig& c) {
  json j;
  j["subcommand"] = c.subcommand;
  j["out"] = c.out;
  j["seed"] = c.seed;
  j["workers"] = c.workers;
  j["scenario"] = {{"name", c.scenario.name},
                   {"alpha", c.scenario.params.alpha},
                   {"lambda0", c.scenario.params.lambda0},
                   {"sigma", c.scenario.params.sigma},
                   {"sigma0", c.scenario.params.sigma0},
                   {"w", c.scenario.params.w},
                   {"gamma_k", c.scenario.params.gamma_k},
                   {"gamma_theta", c.scenario.params.gamma_theta}};
  j["grid"] = {{"n", c.grid.n}, {"x_lo", c.grid.x_lo}, {"x_hi", c.grid.x_hi}};
  j["m"] = c.m;
  j["K"] = c.K;
  j["N"] = c.N;
  j["policy_checkpoint"] = c.policy_checkpoint;
  j["snapshots"] = c.snapshots;
  j["sweep_values"] = c.sweep_values;
  json stages = json::array();
  for (const TrainStage& st : c.train.stages) {
    stages.push_back({{"epochs", st.epochs}, {"n", st.n}, {"m", st.m}, {"K", st.K}});
  }
  j["train"] = {{"stages", std::move(stages)},
                {"eta", c.train.eta},
                {"optimizer", c.train.optimizer == Optimizer::Momentum ? "momentum" : "sgd"},
                {"momentum_beta", c.train.momentum_beta},
                {"grad_mode", c.train.grad_mode == GradMode::FiniteDiff ? "fd" : "adjoint"},
                {"fd_step", c.train.fd_step},
                {"policy", c.train.policy}};
  j["singular"] = {{"lambda0_list", c.singular.lambda0_list},
                   {"tol", c.singular.tol},
                   {"max_iter", c.singular.max_iter},
                   {"kill_N", c.singular.kill_N},
                   {"kill_reps", c.singular.kill_reps}};
  j["chaos"] = {{"N_list", c.chaos.N_list}, {"reps", c.chaos.reps}};
  j["gradcheck"] = {{"fd_step", c.gradcheck.fd_step}};
  return j.dump(2) + "\n";
}

std::vector<ChaosRow> chaos_table(const CoefficientBundle& bundle, const PolicyParams* policy,
                                  std::span<const int> N_list, int reps, const Grid1D& grid,
                                  int m, std::uint64_t seed, int workers) {
  if (N_list.empty()) throw std::invalid_argument("chaos_table: empty N list");
  for (const int N : N_list) {
    if (N < 1) throw std::invalid_argument("chaos_table: N must be positive");
  }
  if (reps < 1) throw std::invalid_argument("chaos_table: reps must be positive");
  if (m < 1) throw std::invalid_argument("chaos_table: m must be positive");

  const double dt = bundle.T / m;
  const NormInfo norm{bundle.T, grid.x_lo, grid.x_hi};
  const int nN = static_cast<int>(N_list.size());

  // FEM reference once per rep, shared by every particle count
  std::vector<std::vector<DistMeasure>> fem_dm(uzt(reps));
  std::vector<std::exception_ptr> errs1(uzt(reps));
#ifdef _OPENMP
  const int nt = workers > 0 ? workers : omp_get_max_threads();
#pragma omp parallel for schedule(dynamic) num_threads(nt)
#else
  (void)workers;
#endif
  for (int r = 0; r < reps; ++r) {
    try {
      const NoisePath noise =
          NoisePath::make(m, dt, derive_seed(seed, "chaos-noise", static_cast<std::uint64_t>(r)));
      const SpdePath path = evolve_spde(bundle, policy, grid, m, noise);
      auto& dms = fem_dm[uzt(r)];
      dms.reserve(uzt(m) + 1);
      for (const SubProbGrid& nu : path.clipped) dms.emplace_back(nu);
    } catch (...) {
      errs1[uzt(r)] = std::current_exception();
    }
  }
  for (const auto& e : errs1) {
    if (e) std::rethrow_exception(e);
  }

  const int total = nN * reps;
  std::vector<double> val(uzt(total), 0.0);
  std::vector<std::exception_ptr> errs2(uzt(total));
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic) num_threads(nt)
#endif
  for (int idx = 0; idx < total; ++idx) {
    try {
      const int a = idx / reps;
      const int r = idx % reps;
      const NoisePath noise =
          NoisePath::make(m, dt, derive_seed(seed, "chaos-noise", static_cast<std::uint64_t>(r)));
      const ParticleRun run =
          simulate_particles(bundle, policy, norm, N_list[uzt(a)], noise,
                             derive_seed(seed, "chaos-particles", static_cast<std::uint64_t>(r)));
      double acc = 0.0;
      for (int k = 0; k <= m; ++k) {
        acc += dist_dp(DistMeasure(run.empirical[uzt(k)]), fem_dm[uzt(r)][uzt(k)], 1);
      }
      val[uzt(idx)] = acc / (m + 1);
    } catch (...) {
      errs2[uzt(idx)] = std::current_exception();
    }
  }
  for (const auto& e : errs2) {
    if (e) std::rethrow_exception(e);
  }

  std::vector<ChaosRow> rows(uzt(nN));
  for (int a = 0; a < nN; ++a) {
    double mean = 0.0;
    for (int r = 0; r < reps; ++r) mean += val[uzt(a * reps + r)];
    mean /= reps;
    double se = 0.0;
    if (reps > 1) {
      double ss = 0.0;
      for (int r = 0; r < reps; ++r) {
        const double d = val[uzt(a * reps + r)] - mean;
        ss += d * d;
      }
      se = std::sqrt(ss / (reps - 1) / reps);
    }
    rows[uzt(a)] = {N_list[uzt(a)], reps, mean, se};
  }
  return rows;
}

int run(const RunConfig& raw) {
  try {
    if (raw.subcommand.empty() || !subcommands().contains(raw.subcommand)) {
      throw ConfigError("unknown or missing subcommand \"" + raw.subcommand + "\"");
    }
    const RunConfig c = resolve(raw);
    const CoefficientBundle bundle = make_bundle(c);
    const std::optional<PolicyParams> pol = maybe_policy(c);

    fs::create_directories(c.out);
    json man = make_manifest(c);
    const std::string man_path = join(c.out, "manifest.json");
    write_text(man_path, man.dump(2) + "\n");

    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::string> outs;
    json extra = json::object();
    const auto finalize = [&](const char* status, const char* err) {
      man["status"] = status;
      if (err) man["error"] = err;
      man["wall_clock_s"] =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      man["outputs"] = outs;
      if (!extra.empty()) man["results"] = extra;
      write_text(man_path, man.dump(2) + "\n");
    };

    try {
      dispatch(c, bundle, pol ? &*pol : nullptr, outs, extra);
    } catch (const NumericalBlowup& e) {
      finalize("numerical-failure", e.what());
      std::fprintf(stderr, "numerical failure: %s\n", e.what());
      return 3;
    } catch (const IllConditionedStep& e) {
      finalize("numerical-failure", e.what());
      std::fprintf(stderr, "numerical failure: %s\n", e.what());
      return 3;
    }
    finalize("ok", nullptr);
    return 0;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"mean-field control laboratory: batch experiment runner"};
  std::string sub;
  std::string config_path;
  std::string out;
  int workers = 0;
  std::uint64_t seed = 0;
  app.add_option("subcommand", sub,
                 "particle | fem | train | sweep-alpha | sweep-rho | sweep-lambda0 | "
                 "singular | gradcheck | chaos (overrides the config file)");
  CLI::Option* oc = app.add_option("--config", config_path, "JSON config file");
  CLI::Option* oo = app.add_option("--out", out, "output directory");
  CLI::Option* ow = app.add_option("--workers", workers, "worker threads (0 = all)");
  CLI::Option* os = app.add_option("--seed", seed, "root seed override");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  RunConfig c;
  if (oc->count() > 0) {
    try {
      c = load_run_config(config_path);
    } catch (const ConfigError& e) {
      std::fprintf(stderr, "error: %s\n", e.what());
      return 2;
    }
  }
  if (!sub.empty()) {
    if (!subcommands().contains(sub)) {
      std::fprintf(stderr, "error: unknown subcommand \"%s\"\n", sub.c_str());
      return 2;
    }
    c.subcommand = sub;
  }
  if (oo->count() > 0) c.out = out;
  if (ow->count() > 0) {
    if (workers < 0) {
      std::fprintf(stderr, "error: --workers must be >= 0\n");
      return 2;
    }
    c.workers = workers;
  }
  if (os->count() > 0) c.seed = seed;
  if (c.subcommand.empty()) {
    std::fprintf(stderr, "error: no subcommand (give one positionally or in the config)\n");
    return 2;
  }
  return run(c);
}

}  // namespace mfc
