#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "qnmarl/env.hpp"
#include "qnmarl/qsim.hpp"

namespace qnmarl::qaoa {

// Latent plan classes decoded from the top 3 bits of a measured bitstring.
enum Plan : int {
  kHold = 0,
  kAdvancePx = 1,
  kAdvanceNx = 2,
  kAdvancePy = 3,
  kAdvanceNy = 4,
  kClimb = 5,
  kDescend = 6,
  kSweep = 7,
};
inline constexpr int kPlanCount = 8;

// Cost-table weights: safety dominates, utility second, prior alignment last.
inline constexpr double kSafetyWeight = 5.0;
inline constexpr double kUtilityWeight = 1.0;
inline constexpr double kPriorWeight = 0.5;

struct PolicyConfig {
  int n_qubits = 6;
  int depth = 2;              // QAOA layers
  int shots = 500;
  double input_scale = 3.14159265358979323846;  // radians per unit feature
  double lr = 0.01;
  double lambda_temporal = 0.1;

  void validate() const;  // throws ConfigError
};

struct QaoaPolicy {
  PolicyConfig config;
  std::vector<double> gammas;       // size depth
  std::vector<double> betas;        // size depth
  std::vector<double> prev_gammas;  // parameters one update ago
  std::vector<double> prev_betas;

  // Random moderate initial angles; prev params start equal to the params.
  static QaoaPolicy init(const PolicyConfig& config, Rng& rng);
};

struct LatentPlan {
  int plan_id = 0;                 // 0..7, always the top 3 bits of raw
  std::uint64_t raw_bitstring = 0;
};

struct PriorPolicy {
  std::array<double, kPlanCount> probs{};
};

// Column-stochastic readout confusion matrix, m(i, j) = P(observe i | true j),
// stored row-major.
struct ConfusionMatrix {
  int dim = 0;
  std::vector<double> m;

  static ConfusionMatrix identity(int dim);
  double at(int i, int j) const { return m[static_cast<std::size_t>(i) * dim + j]; }
  double& at(int i, int j) { return m[static_cast<std::size_t>(i) * dim + j]; }
  void validate() const;  // square, entries >= 0, columns sum to 1
};

struct EncodedObservation {
  std::vector<double> angles;  // one rotation angle per qubit
  qsim::CostTable cost;        // 2^n entries, a function of the plan class
};

int plan_of_bitstring(std::uint64_t z, int n_qubits);

// First grid step of a plan under the given observation (sweep picks the
// most open lateral direction).
std::array<int, 3> plan_first_step(int plan, const env::Observation& obs);

// Graded safety severity of a plan's first step: 1.0 enters a no-fly voxel,
// 0.5 ends Chebyshev-adjacent to one, 0.0 otherwise. Blocked moves are
// evaluated at the position actually kept.
double plan_unsafe(int plan, const env::Observation& obs);

// Normalized expected coverage gain of a plan's first step, in [0, 1].
double plan_utility(int plan, const env::Observation& obs);

// Uniform over plans whose first step is strictly safe; uniform over all
// plans when none qualifies.
PriorPolicy prior_from_observation(const env::Observation& obs);

// Feature-to-angle encoding plus the per-basis-state diagonal cost
// cost[z] = w_s*unsafe + w_u*(1-utility) + w_p*(1-prior), all through the
// plan class of z.
EncodedObservation encode_observation(const QaoaPolicy& policy,
                                      const env::Observation& obs);

// Ansatz as an op list: H layer, input RY layer, open-chain CZ entanglement,
// then per QAOA layer a diagonal cost phase and an RX(2*beta) mixer layer.
qsim::Circuit build_circuit(const QaoaPolicy& policy,
                            const std::vector<double>& angles,
                            const qsim::CostTable& cost);

qsim::StateVector build_state(const QaoaPolicy& policy,
                              const std::vector<double>& angles,
                              const qsim::CostTable& cost);

// Exact plan marginal of a state.
std::array<double, kPlanCount> plan_distribution(const qsim::StateVector& state);

struct LatentSample {
  LatentPlan plan;
  std::array<double, kPlanCount> distribution{};  // empirical, from shots
};

// Samples `shots` bitstrings, aggregates them into the plan distribution,
// then draws one plan and a representative bitstring within it.
LatentSample sample_latent(const QaoaPolicy& policy,
                           const qsim::StateVector& state, Rng& rng);

enum class GradientMode { kStatevector, kSampled };

// d<observable>/d(angle of the rotation gate at op_index) by the +-pi/2
// two-point rule applied to that single gate.
double gate_shift_grad(int n_qubits, const qsim::Circuit& circuit,
                       std::size_t op_index,
                       const std::vector<double>& observable);

// Gradient of a diagonal observable expectation w.r.t. (gammas, betas).
// Each parameter is shifted at the individual gate level (+-pi/2 on the
// gate argument) and the terms are summed; the diagonal cost layer is
// decomposed into commuting multi-Z rotations via its Walsh spectrum, so the
// result is the exact derivative in statevector mode. Sampled mode estimates
// every expectation from `shots` draws.
std::vector<double> parameter_shift_grad(const QaoaPolicy& policy,
                                         const std::vector<double>& angles,
                                         const qsim::CostTable& cost,
                                         const std::vector<double>& observable,
                                         GradientMode mode = GradientMode::kStatevector,
                                         Rng* rng = nullptr);

// Gradient step with the temporal regularizer:
// theta <- theta - lr*(grad + 2*lambda*(theta - prev)); prev then holds the
// pre-step value so the next update is damped toward this one's start.
void update_params(QaoaPolicy& policy, const std::vector<double>& grad);

// Zero-noise extrapolation: quadratic through (1,e1),(2,e2),(3,e3)
// evaluated at 0, i.e. 3*e1 - 3*e2 + e3.
double zne_extrapolate(double e1, double e2, double e3);

// Odd-scale global folding: every op G becomes G (G' G)^((scale-1)/2) with
// G' its adjoint. Gate count multiplies by scale; the unitary is unchanged.
qsim::Circuit fold_noise(const qsim::Circuit& circuit, int scale);

// Folding for the ZNE ladder lambda in {1,2,3}; lambda=2 folds the first
// floor(N/2) ops at scale 3 and leaves the rest unfolded.
qsim::Circuit fold_noise_for_scale(const qsim::Circuit& circuit, int lambda);

struct MitigationResult {
  std::vector<double> probs;
  int clip_count = 0;      // negative entries clipped before renormalization
  double condition = 0.0;  // 1-norm condition estimate of the matrix
};

// Solves M * p_true = p_observed, clips negatives, renormalizes. Throws
// MitigationError when the matrix condition exceeds 1e8 (caller falls back
// to raw counts).
MitigationResult mitigate_readout(const ConfusionMatrix& m,
                                  const std::vector<double>& observed);

// Sum over i of p_i * ln(p_i / q_i) in nats, with q floored at 1e-9 and
// 0*ln(0) = 0. Never negative. `floored` (optional) reports whether the
// floor fired against nonzero p mass.
double kl_to_prior(const std::vector<double>& p, const std::vector<double>& q,
                   bool* floored = nullptr);

}  // namespace qnmarl::qaoa
