#include "mfc/policy.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <stdexcept>

#include "mfc/rng.hpp"

namespace mfc {

namespace {

constexpr char kCkptMagic[8] = {'M', 'F', 'C', 'P', 'O', 'L', '0', '1'};

void check_spec(const MlpSpec& s) {
  if (s.sizes.size() < 2) throw std::invalid_argument("MlpSpec: need at least in/out sizes");
  for (int v : s.sizes) {
    if (v < 1) throw std::invalid_argument("MlpSpec: layer sizes must be positive");
  }
}

}  // namespace

int MlpSpec::param_count() const {
  int c = 0;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    c += (sizes[l] + 1) * sizes[l + 1];
  }
  return c;
}

int MlpSpec::max_width() const {
  int w = 0;
  for (int v : sizes) w = std::max(w, v);
  return w;
}

PolicySpec PolicySpec::defaults(double lo, std::optional<double> hi) {
  PolicySpec s;
  s.g0.sizes = {1, 10, 10, 10};
  s.g1.sizes = {2 + 10, 50, 50, 1};
  s.control_lo = lo;
  s.control_hi = hi;
  return s;
}

PolicySpec PolicySpec::tiny(double lo, std::optional<double> hi) {
  PolicySpec s;
  s.g0.sizes = {1, 4, 3};
  s.g1.sizes = {2 + 3, 8, 8, 1};
  s.control_lo = lo;
  s.control_hi = hi;
  return s;
}

PolicyParams init_params(const PolicySpec& spec, std::uint64_t seed) {
  check_spec(spec.g0);
  check_spec(spec.g1);
  if (spec.g1.inputs() != 2 + spec.d0()) {
    throw std::invalid_argument("PolicySpec: g1 input size must be 2 + d0");
  }
  if (spec.g1.outputs() != 1) throw std::invalid_argument("PolicySpec: g1 must be scalar");
  PolicyParams p;
  p.spec = spec;
  p.theta.assign(static_cast<std::size_t>(spec.param_count()), 0.0);
  double* th = p.theta.data();
  int net_id = 0;
  for (const MlpSpec* net : {&spec.g0, &spec.g1}) {
    for (int l = 0; l < net->layers(); ++l) {
      const int fan_in = net->sizes[static_cast<std::size_t>(l)];
      const int fan_out = net->sizes[static_cast<std::size_t>(l + 1)];
      const double bound = std::sqrt(6.0 / (fan_in + fan_out));
      Rng rng(derive_seed(seed, "glorot", static_cast<std::uint64_t>(net_id),
                          static_cast<std::uint64_t>(l)));
      for (int o = 0; o < fan_out; ++o) {
        for (int i = 0; i < fan_in; ++i) *th++ = bound * (2.0 * rng.u01() - 1.0);
      }
      th += fan_out;  // biases stay zero
    }
    ++net_id;
  }
  return p;
}

void mlp_forward(const MlpSpec& spec, std::span<const double> theta,
                 std::span<const double> in, std::span<double> out, MlpScratch& ws) {
  int total = 0;
  for (int v : spec.sizes) total += v;
  if (static_cast<int>(ws.acts.size()) < total) ws.acts.resize(static_cast<std::size_t>(total));
  double* acts = ws.acts.data();
  std::memcpy(acts, in.data(), sizeof(double) * in.size());
  const double* th = theta.data();
  const double* src = acts;
  double* dst = acts + spec.sizes[0];
  const int L = spec.layers();
  for (int l = 0; l < L; ++l) {
    const int ni = spec.sizes[static_cast<std::size_t>(l)];
    const int no = spec.sizes[static_cast<std::size_t>(l + 1)];
    const double* bias = th + ni * no;
    for (int o = 0; o < no; ++o) {
      double s = bias[o];
      const double* w = th + o * ni;
      for (int i = 0; i < ni; ++i) s += w[i] * src[i];
      dst[o] = (l + 1 < L) ? std::tanh(s) : s;  // linear output layer
    }
    th += (ni + 1) * no;
    src = dst;
    dst += no;
  }
  std::memcpy(out.data(), src, sizeof(double) * out.size());
}

void mlp_backward(const MlpSpec& spec, std::span<const double> theta,
                  std::span<const double> out_bar, MlpScratch& ws,
                  std::span<double> theta_bar, std::span<double> in_bar) {
  int total = 0;
  for (int v : spec.sizes) total += v;
  if (static_cast<int>(ws.bars.size()) < total) ws.bars.resize(static_cast<std::size_t>(total));
  const double* acts = ws.acts.data();
  double* bars = ws.bars.data();
  const int L = spec.layers();
  // offsets of each layer's activations and parameters
  int act_off = total - spec.sizes.back();
  int th_off = static_cast<int>(theta.size());
  std::memcpy(bars + act_off, out_bar.data(), sizeof(double) * out_bar.size());
  for (int l = L - 1; l >= 0; --l) {
    const int ni = spec.sizes[static_cast<std::size_t>(l)];
    const int no = spec.sizes[static_cast<std::size_t>(l + 1)];
    th_off -= (ni + 1) * no;
    act_off -= ni;
    const double* th = theta.data() + th_off;
    const double* a_in = acts + act_off;
    const double* a_out = acts + act_off + ni;
    double* b_out = bars + act_off + ni;
    double* b_in = bars + act_off;
    // pre-activation bar: linear output layer passes through
    if (l + 1 < L) {
      for (int o = 0; o < no; ++o) b_out[o] *= 1.0 - a_out[o] * a_out[o];
    }
    double* tb = theta_bar.data() + th_off;
    for (int i = 0; i < ni; ++i) b_in[i] = 0.0;
    for (int o = 0; o < no; ++o) {
      const double g = b_out[o];
      const double* w = th + o * ni;
      double* wb = tb + o * ni;
      for (int i = 0; i < ni; ++i) {
        wb[i] += g * a_in[i];
        b_in[i] += g * w[i];
      }
      tb[ni * no + o] += g;  // bias
    }
  }
  if (!in_bar.empty()) {
    for (int i = 0; i < spec.sizes[0]; ++i) in_bar[static_cast<std::size_t>(i)] += bars[i];
  }
}

double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

double link_apply(double raw, double lo, const std::optional<double>& hi) {
  if (hi) return lo + (*hi - lo) * sigmoid(raw);
  return lo + softplus(raw);
}

double link_deriv(double raw, double lo, const std::optional<double>& hi) {
  const double s = sigmoid(raw);
  if (hi) return (*hi - lo) * s * (1.0 - s);
  return s;
}

namespace {

constexpr double kGaussX[3] = {-0.7745966692414834, 0.0, 0.7745966692414834};
constexpr double kGaussW[3] = {5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0};

}  // namespace

void pool_features(const SubProbGrid& nu, const PolicyParams& params, const NormInfo& norm,
                   std::span<double> phi_out, MlpScratch& ws) {
  const int d0 = params.spec.d0();
  for (int j = 0; j < d0; ++j) phi_out[static_cast<std::size_t>(j)] = 0.0;
  const Grid1D& g = nu.grid();
  const double h = g.h();
  std::vector<double> val(static_cast<std::size_t>(d0));
  const std::span<const double> th(params.theta.data(), static_cast<std::size_t>(params.spec.g0.param_count()));
  for (int e = 0; e <= g.n; ++e) {
    const double a = g.node(e);
    const double mid = a + 0.5 * h;
    for (int q = 0; q < 3; ++q) {
      const double x = mid + 0.5 * h * kGaussX[q];
      const double w = 0.5 * h * kGaussW[q] * nu.density(x);
      if (w == 0.0) continue;
      const double xin = norm.x_hat(x);
      mlp_forward(params.spec.g0, th, {&xin, 1}, val, ws);
      for (int j = 0; j < d0; ++j) phi_out[static_cast<std::size_t>(j)] += w * val[static_cast<std::size_t>(j)];
    }
  }
}

void pool_features(const AtomicSubProb& nu, const PolicyParams& params, const NormInfo& norm,
                   std::span<double> phi_out, MlpScratch& ws) {
  const int d0 = params.spec.d0();
  for (int j = 0; j < d0; ++j) phi_out[static_cast<std::size_t>(j)] = 0.0;
  std::vector<double> val(static_cast<std::size_t>(d0));
  const std::span<const double> th(params.theta.data(), static_cast<std::size_t>(params.spec.g0.param_count()));
  for (std::size_t i = 0; i < nu.size(); ++i) {
    const double w = nu.ws()[i];
    if (w == 0.0) continue;
    const double xin = norm.x_hat(nu.xs()[i]);
    mlp_forward(params.spec.g0, th, {&xin, 1}, val, ws);
    for (int j = 0; j < d0; ++j) phi_out[static_cast<std::size_t>(j)] += w * val[static_cast<std::size_t>(j)];
  }
}

double policy_eval_feat(double t, double x, std::span<const double> phi,
                        const PolicyParams& params, const NormInfo& norm, MlpScratch& ws,
                        double* raw_out) {
  const int d0 = params.spec.d0();
  double in[2 + 64];
  if (d0 > 64) throw std::invalid_argument("policy_eval_feat: d0 too large");
  in[0] = norm.t_hat(t);
  in[1] = norm.x_hat(x);
  for (int j = 0; j < d0; ++j) in[2 + j] = phi[static_cast<std::size_t>(j)];
  double raw = 0.0;
  const std::span<const double> th(params.theta.data() + params.spec.g1_offset(),
                                   static_cast<std::size_t>(params.spec.g1.param_count()));
  mlp_forward(params.spec.g1, th, {in, static_cast<std::size_t>(2 + d0)}, {&raw, 1}, ws);
  if (raw_out) *raw_out = raw;
  return link_apply(raw, params.spec.control_lo, params.spec.control_hi);
}

double policy_eval(double t, double x, const SubProbGrid& nu, const PolicyParams& params,
                   const NormInfo& norm) {
  MlpScratch ws;
  std::vector<double> phi(static_cast<std::size_t>(params.spec.d0()));
  pool_features(nu, params, norm, phi, ws);
  return policy_eval_feat(t, x, phi, params, norm, ws);
}

double policy_eval(double t, double x, const AtomicSubProb& nu, const PolicyParams& params,
                   const NormInfo& norm) {
  MlpScratch ws;
  std::vector<double> phi(static_cast<std::size_t>(params.spec.d0()));
  pool_features(nu, params, norm, phi, ws);
  return policy_eval_feat(t, x, phi, params, norm, ws);
}

void policy_eval_grid(double t, std::span<const double> xs, std::span<const double> phi,
                      const PolicyParams& params, const NormInfo& norm, std::span<double> u_out,
                      MlpScratch& ws) {
  for (std::size_t i = 0; i < xs.size(); ++i) {
    u_out[i] = policy_eval_feat(t, xs[i], phi, params, norm, ws);
  }
}

void policy_backward_feat(double t, double x, std::span<const double> phi, double u_bar,
                          const PolicyParams& params, const NormInfo& norm,
                          std::span<double> theta_bar, std::span<double> phi_bar, MlpScratch& ws) {
  const int d0 = params.spec.d0();
  double raw = 0.0;
  (void)policy_eval_feat(t, x, phi, params, norm, ws, &raw);
  const double raw_bar =
      u_bar * link_deriv(raw, params.spec.control_lo, params.spec.control_hi);
  double in_bar[2 + 64] = {0.0};
  const std::span<const double> th(params.theta.data() + params.spec.g1_offset(),
                                   static_cast<std::size_t>(params.spec.g1.param_count()));
  std::span<double> tb(theta_bar.data() + params.spec.g1_offset(),
                       static_cast<std::size_t>(params.spec.g1.param_count()));
  mlp_backward(params.spec.g1, th, {&raw_bar, 1}, ws, tb,
               {in_bar, static_cast<std::size_t>(2 + d0)});
  if (!phi_bar.empty()) {
    for (int j = 0; j < d0; ++j) phi_bar[static_cast<std::size_t>(j)] += in_bar[2 + j];
  }
}

void g0_forward(double x, const PolicyParams& params, const NormInfo& norm,
                std::span<double> g0_out, MlpScratch& ws) {
  const double xin = norm.x_hat(x);
  const std::span<const double> th(params.theta.data(),
                                   static_cast<std::size_t>(params.spec.g0.param_count()));
  mlp_forward(params.spec.g0, th, {&xin, 1}, g0_out, ws);
}

void g0_backward(double x, std::span<const double> out_bar, const PolicyParams& params,
                 const NormInfo& norm, std::span<double> theta_bar, MlpScratch& ws) {
  const double xin = norm.x_hat(x);
  const std::span<const double> th(params.theta.data(),
                                   static_cast<std::size_t>(params.spec.g0.param_count()));
  std::vector<double> tmp(static_cast<std::size_t>(params.spec.d0()));
  mlp_forward(params.spec.g0, th, {&xin, 1}, tmp, ws);
  std::span<double> tb(theta_bar.data(), static_cast<std::size_t>(params.spec.g0.param_count()));
  mlp_backward(params.spec.g0, th, out_bar, ws, tb, {});
}

namespace {

// Largest singular value by power iteration on W^T W.
double spectral_norm(const double* w, int rows, int cols) {
  std::vector<double> v(static_cast<std::size_t>(cols), 1.0 / std::sqrt(cols));
  std::vector<double> u(static_cast<std::size_t>(rows), 0.0);
  for (int it = 0; it < 100; ++it) {
    for (int r = 0; r < rows; ++r) {
      double acc = 0.0;
      for (int c = 0; c < cols; ++c) acc += w[r * cols + c] * v[static_cast<std::size_t>(c)];
      u[static_cast<std::size_t>(r)] = acc;
    }
    double nu2 = 0.0;
    for (double uv : u) nu2 += uv * uv;
    if (nu2 == 0.0) return 0.0;
    for (int c = 0; c < cols; ++c) {
      double acc = 0.0;
      for (int r = 0; r < rows; ++r) acc += w[r * cols + c] * u[static_cast<std::size_t>(r)];
      v[static_cast<std::size_t>(c)] = acc;
    }
    double nv2 = 0.0;
    for (double vv : v) nv2 += vv * vv;
    if (nv2 == 0.0) return 0.0;
    const double nv = std::sqrt(nv2);
    for (double& vv : v) vv /= nv;
  }
  // one more multiply to read off the Rayleigh quotient
  double num = 0.0;
  for (int r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (int c = 0; c < cols; ++c) acc += w[r * cols + c] * v[static_cast<std::size_t>(c)];
    num += acc * acc;
  }
  return std::sqrt(num);
}

}  // namespace

double policy_lipschitz_x(const PolicyParams& params, const NormInfo& norm) {
  // |du/dx| <= link' * prod ||W_l||_2 * |dx_hat/dx|; tanh and both links are
  // 1-Lipschitz in the raw output
  const MlpSpec& net = params.spec.g1;
  const double* th = params.theta.data() + params.spec.g1_offset();
  double prod = 1.0;
  for (int l = 0; l < net.layers(); ++l) {
    const int ni = net.sizes[static_cast<std::size_t>(l)];
    const int no = net.sizes[static_cast<std::size_t>(l + 1)];
    prod *= spectral_norm(th, no, ni);
    th += (ni + 1) * no;
  }
  double link_max = 1.0;
  if (params.spec.control_hi) link_max = 0.25 * (*params.spec.control_hi - params.spec.control_lo);
  return link_max * prod * 2.0 / (norm.x_hi - norm.x_lo);
}

void save_checkpoint(const PolicyParams& params, const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
  auto put_u32 = [&](std::uint32_t v) { std::fwrite(&v, sizeof(v), 1, f); };
  auto put_f64 = [&](double v) { std::fwrite(&v, sizeof(v), 1, f); };
  std::fwrite(kCkptMagic, 1, 8, f);
  put_u32(1);  // version
  for (const MlpSpec* net : {&params.spec.g0, &params.spec.g1}) {
    put_u32(static_cast<std::uint32_t>(net->sizes.size()));
    for (int v : net->sizes) put_u32(static_cast<std::uint32_t>(v));
  }
  put_f64(params.spec.control_lo);
  put_u32(params.spec.control_hi ? 1 : 0);
  put_f64(params.spec.control_hi ? *params.spec.control_hi : 0.0);
  put_u32(static_cast<std::uint32_t>(params.theta.size()));
  std::fwrite(params.theta.data(), sizeof(double), params.theta.size(), f);
  if (std::fclose(f) != 0) throw std::runtime_error("save_checkpoint: write failed");
}

PolicyParams load_checkpoint(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
  auto fail = [&](const char* msg) {
    std::fclose(f);
    throw std::runtime_error(std::string("load_checkpoint: ") + msg);
  };
  char magic[8];
  if (std::fread(magic, 1, 8, f) != 8 || std::memcmp(magic, kCkptMagic, 8) != 0) {
    fail("bad magic");
  }
  auto get_u32 = [&]() {
    std::uint32_t v = 0;
    if (std::fread(&v, sizeof(v), 1, f) != 1) fail("truncated");
    return v;
  };
  auto get_f64 = [&]() {
    double v = 0;
    if (std::fread(&v, sizeof(v), 1, f) != 1) fail("truncated");
    return v;
  };
  if (get_u32() != 1) fail("unsupported version");
  PolicyParams p;
  for (MlpSpec* net : {&p.spec.g0, &p.spec.g1}) {
    const std::uint32_t k = get_u32();
    if (k < 2 || k > 64) fail("bad layer count");
    net->sizes.resize(k);
    for (std::uint32_t i = 0; i < k; ++i) net->sizes[i] = static_cast<int>(get_u32());
  }
  p.spec.control_lo = get_f64();
  const bool has_hi = get_u32() != 0;
  const double hi = get_f64();
  if (has_hi) p.spec.control_hi = hi;
  const std::uint32_t cnt = get_u32();
  if (static_cast<int>(cnt) != p.spec.param_count()) fail("parameter count mismatch");
  p.theta.resize(cnt);
  if (std::fread(p.theta.data(), sizeof(double), cnt, f) != cnt) fail("truncated");
  std::fclose(f);
  return p;
}

}  // namespace mfc
