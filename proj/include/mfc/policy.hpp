#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mfc/measures.hpp"

namespace mfc {

// Fully connected net: tanh hidden layers, linear output.
struct MlpSpec {
  std::vector<int> sizes;  // [in, hidden..., out]

  [[nodiscard]] int inputs() const { return sizes.front(); }
  [[nodiscard]] int outputs() const { return sizes.back(); }
  [[nodiscard]] int layers() const { return static_cast<int>(sizes.size()) - 1; }
  [[nodiscard]] int param_count() const;
  [[nodiscard]] int max_width() const;
};

// Feedback control g(t, x, nu) = link(g1(t_hat, x_hat, <nu, g0>)) where g0
// embeds the measure through d0 pooled integrals and link maps onto the
// control set: lo + softplus(raw), or lo + (hi-lo)*sigmoid(raw) when capped.
struct PolicySpec {
  MlpSpec g0;
  MlpSpec g1;
  double control_lo = 0.0;
  std::optional<double> control_hi;

  [[nodiscard]] int d0() const { return g0.outputs(); }
  [[nodiscard]] int param_count() const { return g0.param_count() + g1.param_count(); }
  [[nodiscard]] int g1_offset() const { return g0.param_count(); }

  // d0 = 10, g0 hidden (10,10), g1 hidden (50,50)
  static PolicySpec defaults(double control_lo = 0.0,
                             std::optional<double> control_hi = std::nullopt);
  // scaled-down spec for gradient-check style runs
  static PolicySpec tiny(double control_lo = 0.0,
                         std::optional<double> control_hi = std::nullopt);
};

struct PolicyParams {
  PolicySpec spec;
  std::vector<double> theta;  // [g0 params | g1 params], each layer W row-major then b
};

// Input rescaling data: t -> 2t/T - 1, x -> affine onto [-1, 1].
struct NormInfo {
  double T = 1.0;
  double x_lo = -1.0;
  double x_hi = 1.0;

  [[nodiscard]] double t_hat(double t) const { return 2.0 * t / T - 1.0; }
  [[nodiscard]] double x_hat(double x) const {
    return 2.0 * (x - x_lo) / (x_hi - x_lo) - 1.0;
  }
};

// Glorot-uniform weights (+-sqrt(6/(fan_in+fan_out))), zero biases,
// deterministic in (spec, seed).
[[nodiscard]] PolicyParams init_params(const PolicySpec& spec, std::uint64_t seed);

// Reusable activation storage so hot loops do not allocate.
struct MlpScratch {
  std::vector<double> acts;  // concatenated post-activations, layer by layer
  std::vector<double> bars;  // same shape, used by backward
};

// Forward pass; post-activations stay in scratch for a following backward.
void mlp_forward(const MlpSpec& spec, std::span<const double> theta,
                 std::span<const double> in, std::span<double> out, MlpScratch& ws);

// Reverse pass for the immediately preceding forward with the same scratch.
// Accumulates (does not overwrite) into theta_bar and, if nonempty, in_bar.
void mlp_backward(const MlpSpec& spec, std::span<const double> theta,
                  std::span<const double> out_bar, MlpScratch& ws,
                  std::span<double> theta_bar, std::span<double> in_bar);

[[nodiscard]] double softplus(double x);
[[nodiscard]] double link_apply(double raw, double lo, const std::optional<double>& hi);
[[nodiscard]] double link_deriv(double raw, double lo, const std::optional<double>& hi);

// Pooled measure features <nu, g0 o x_hat>, one quadrature pass (plain
// per-element Gauss; the networks are smooth so no kink splits are needed).
void pool_features(const SubProbGrid& nu, const PolicyParams& params, const NormInfo& norm,
                   std::span<double> phi_out, MlpScratch& ws);
void pool_features(const AtomicSubProb& nu, const PolicyParams& params, const NormInfo& norm,
                   std::span<double> phi_out, MlpScratch& ws);

// Control value with a precomputed pooled feature; raw_out optionally receives
// the pre-link activation (needed by the adjoint).
[[nodiscard]] double policy_eval_feat(double t, double x, std::span<const double> phi,
                                      const PolicyParams& params, const NormInfo& norm,
                                      MlpScratch& ws, double* raw_out = nullptr);

// Convenience scalar evaluation (pools internally).
[[nodiscard]] double policy_eval(double t, double x, const SubProbGrid& nu,
                                 const PolicyParams& params, const NormInfo& norm);
[[nodiscard]] double policy_eval(double t, double x, const AtomicSubProb& nu,
                                 const PolicyParams& params, const NormInfo& norm);

// Batch evaluation at many x sharing one pooled feature; bit-identical to the
// scalar path.
void policy_eval_grid(double t, std::span<const double> xs, std::span<const double> phi,
                      const PolicyParams& params, const NormInfo& norm, std::span<double> u_out,
                      MlpScratch& ws);

// Adjoint of policy_eval_feat: propagates u_bar into the g1 parameter slice of
// theta_bar and into phi_bar (both accumulated).
void policy_backward_feat(double t, double x, std::span<const double> phi, double u_bar,
                          const PolicyParams& params, const NormInfo& norm,
                          std::span<double> theta_bar, std::span<double> phi_bar, MlpScratch& ws);

// g0 value at one point plus adjoint: accumulates scale * phi_bar-weighted
// parameter gradient into the g0 slice.
void g0_forward(double x, const PolicyParams& params, const NormInfo& norm,
                std::span<double> g0_out, MlpScratch& ws);
void g0_backward(double x, std::span<const double> out_bar, const PolicyParams& params,
                 const NormInfo& norm, std::span<double> theta_bar, MlpScratch& ws);

// Upper bound on |d u / d x| from layer spectral norms (power iteration) times
// the input scaling factor; the link and tanh are 1-Lipschitz.
[[nodiscard]] double policy_lipschitz_x(const PolicyParams& params, const NormInfo& norm);

// Versioned binary checkpoint; round trips bit-exactly.
void save_checkpoint(const PolicyParams& params, const std::string& path);
[[nodiscard]] PolicyParams load_checkpoint(const std::string& path);

}  // namespace mfc
