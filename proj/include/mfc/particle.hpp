#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mfc/measures.hpp"
#include "mfc/model.hpp"
#include "mfc/policy.hpp"
#include "mfc/rng.hpp"

namespace mfc {

// State of the N-particle system at one time. A particle is alive while its
// accumulated intensity stays below its Exp(1) threshold; dead particles are
// frozen (position and clock stop) from kill_time on.
struct ParticleEnsemble {
  int N = 0;
  double t = 0.0;
  std::vector<double> x;
  std::vector<double> lambda_acc;
  std::vector<double> theta;
  std::vector<double> kill_time;  // +inf while never killed
  std::vector<std::uint8_t> alive;

  // Dead fraction, equal to 1 - mass of the empirical measure.
  [[nodiscard]] double loss() const;
};

[[nodiscard]] AtomicSubProb empirical_of(const ParticleEnsemble& e);

// One full simulation: m+1 snapshots (post-kill each step), the loss path
// (nondecreasing with increments exactly 1/N), the matching empirical
// measures, and per-particle first times the position reached (-inf, 0]
// (+inf while never crossed).
struct ParticleRun {
  double dt = 0.0;
  std::vector<ParticleEnsemble> states;
  std::vector<double> loss;
  std::vector<AtomicSubProb> empirical;
  std::vector<double> first_hit;
};

// Euler-Maruyama march of the particle system under the shared common-noise
// path. Per step: controls and coefficients are evaluated at the left point
// (current time, pre-move positions, post-kill measure of the previous step);
// alive particles move and accumulate intensity; particles whose clock crossed
// its threshold are then killed in ascending index order, each kill applying
// the contagion jump -alpha(t, x_i, nu)/N to every particle still alive (nu is
// the empirical measure just before that individual kill). Null policy means
// the zero control clamped into the control set.
//
// Every particle owns a derived random stream (initial position, threshold,
// idiosyncratic increments), so results are bit-identical across runs and
// worker counts and particles couple across parameter sweeps sharing a seed.
// Throws NumericalBlowup if a position leaves the finite range.
[[nodiscard]] ParticleRun simulate_particles(const CoefficientBundle& bundle,
                                             const PolicyParams* policy, const NormInfo& norm,
                                             int N, const NoisePath& noise,
                                             std::uint64_t seed);

// Pathwise cost: left-point quadrature of the running cost over each
// particle's alive segments, averaged over particles, plus the terminal cost
// of the final empirical measure. Re-evaluates the same controls the
// simulation used.
[[nodiscard]] double particle_cost(const ParticleRun& run, const CoefficientBundle& bundle,
                                   const PolicyParams* policy, const NormInfo& norm);

// Monte-Carlo estimate of E|N^{-1} sum_i (M^i_T - 1)|^2 where
// M^i_t = I^i_t + Lambda^i_{t and tau_i} is the per-particle compensated
// survival martingale (left-point accumulation, same rule as the clock).
struct MartingaleRow {
  int N = 0;
  double estimate = 0.0;
  double se = 0.0;
};
[[nodiscard]] std::vector<MartingaleRow> martingale_variance(const CoefficientBundle& bundle,
                                                             std::span<const int> N_list,
                                                             int reps, int m,
                                                             std::uint64_t seed,
                                                             int workers = 0);

// Mean gap between the intensity kill time and the first hitting time of
// (-inf, 0], both capped at T, per intensity slope lambda0. The bundle's
// killing intensity is replaced by lambda0 * x_- per sweep entry; everything
// else (noise, thresholds, initial positions) is shared across entries, so
// the gaps are coupled. A particle that never crosses contributes 0.
struct KillGapRow {
  double lambda0 = 0.0;
  double mean_gap = 0.0;
  double se = 0.0;
  // per-repetition gaps; rep r uses the same seed in every row, so paired
  // differences between rows are far less noisy than the marginal se
  std::vector<double> rep_gaps;
};
[[nodiscard]] std::vector<KillGapRow> kill_gap_stats(const CoefficientBundle& bundle,
                                                     std::span<const double> lambda0_list,
                                                     int N, int reps, int m,
                                                     std::uint64_t seed, int workers = 0);

}  // namespace mfc
