#include "qnmarl/qaoa.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <sstream>

namespace qnmarl::qaoa {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kKlFloor = 1e-9;
constexpr double kConditionLimit = 1e8;

void check_sizes(const QaoaPolicy& policy, const std::vector<double>& angles,
                 const qsim::CostTable& cost) {
  const int n = policy.config.n_qubits;
  if (static_cast<int>(angles.size()) != n) {
    std::ostringstream oss;
    oss << "angle vector length " << angles.size() << " != qubit count " << n;
    throw UsageError(oss.str());
  }
  if (cost.values.size() != (std::size_t{1} << n)) {
    std::ostringstream oss;
    oss << "cost table length " << cost.values.size()
        << " != 2^" << n;
    throw UsageError(oss.str());
  }
  if (policy.gammas.size() != static_cast<std::size_t>(policy.config.depth) ||
      policy.betas.size() != static_cast<std::size_t>(policy.config.depth)) {
    throw UsageError("policy parameter arrays do not match the configured depth");
  }
}

// In-place Walsh-Hadamard transform; w[S] = sum_z v[z] * (-1)^popcount(S&z).
void fwht(std::vector<double>& v) {
  for (std::size_t h = 1; h < v.size(); h <<= 1) {
    for (std::size_t i = 0; i < v.size(); i += h << 1) {
      for (std::size_t j = i; j < i + h; ++j) {
        const double a = v[j], b = v[j + h];
        v[j] = a + b;
        v[j + h] = a - b;
      }
    }
  }
}

// Diagonal phase op for exp(-i * angle * Z_S).
qsim::CircuitOp zs_phase(std::uint64_t subset, double angle, std::size_t dim) {
  std::vector<double> phase(dim);
  for (std::size_t z = 0; z < dim; ++z) {
    const int parity = __builtin_popcountll(z & subset) & 1;
    phase[z] = parity ? -angle : angle;
  }
  return qsim::CircuitOp::from_phase(std::move(phase));
}

// Patch lookup with offsets beyond the sensor radius reading as obstacles,
// matching the wall convention of the world grid.
double patch_code(const env::Observation& obs, int dx, int dy, int dz) {
  if (std::abs(dx) > obs.radius || std::abs(dy) > obs.radius ||
      std::abs(dz) > obs.radius) {
    return static_cast<double>(env::Cell::Obstacle);
  }
  return obs.patch_at(dx, dy, dz);
}

double eval_objective(int n_qubits, const qsim::Circuit& circuit,
                      const std::vector<double>& observable, GradientMode mode,
                      int shots, Rng* rng) {
  const qsim::StateVector state = qsim::run_circuit(n_qubits, circuit);
  if (mode == GradientMode::kStatevector) {
    return state.expectation(qsim::CostTable{observable});
  }
  const auto counts = state.sample(shots, *rng);
  double acc = 0.0;
  for (std::size_t z = 0; z < counts.size(); ++z) {
    acc += static_cast<double>(counts[z]) * observable[z];
  }
  return acc / static_cast<double>(shots);
}

}  // namespace

void PolicyConfig::validate() const {
  if (n_qubits < 3 || n_qubits > qsim::kMaxQubits) {
    throw ConfigError("quantum policy needs 3..10 qubits (3 bits decode the plan class)");
  }
  if (depth < 0) throw ConfigError("QAOA depth must be >= 0");
  if (shots < 1) throw ConfigError("shot count must be >= 1");
  if (!(lr > 0.0) || !std::isfinite(lr)) {
    throw ConfigError("quantum learning rate must be positive and finite");
  }
  if (lambda_temporal < 0.0 || !std::isfinite(lambda_temporal)) {
    throw ConfigError("temporal regularizer weight must be >= 0");
  }
  if (!std::isfinite(input_scale)) {
    throw ConfigError("input angle scale must be finite");
  }
}

QaoaPolicy QaoaPolicy::init(const PolicyConfig& config, Rng& rng) {
  config.validate();
  QaoaPolicy policy;
  policy.config = config;
  policy.gammas.resize(config.depth);
  policy.betas.resize(config.depth);
  for (double& g : policy.gammas) g = rng.next_range(0.05, 0.25);
  for (double& b : policy.betas) b = rng.next_range(0.05, 0.30);
  policy.prev_gammas = policy.gammas;
  policy.prev_betas = policy.betas;
  return policy;
}

ConfusionMatrix ConfusionMatrix::identity(int dim) {
  ConfusionMatrix cm;
  cm.dim = dim;
  cm.m.assign(static_cast<std::size_t>(dim) * dim, 0.0);
  for (int i = 0; i < dim; ++i) cm.at(i, i) = 1.0;
  return cm;
}

void ConfusionMatrix::validate() const {
  if (dim < 1 || m.size() != static_cast<std::size_t>(dim) * dim) {
    throw UsageError("confusion matrix storage does not match its dimension");
  }
  for (int j = 0; j < dim; ++j) {
    double col = 0.0;
    for (int i = 0; i < dim; ++i) {
      if (at(i, j) < -1e-12) {
        throw UsageError("confusion matrix entries must be non-negative");
      }
      col += at(i, j);
    }
    if (std::abs(col - 1.0) > 1e-6) {
      std::ostringstream oss;
      oss << "confusion matrix column " << j << " sums to " << col
          << ", expected 1";
      throw UsageError(oss.str());
    }
  }
}

int plan_of_bitstring(std::uint64_t z, int n_qubits) {
  if (n_qubits < 3) throw UsageError("plan decoding needs at least 3 qubits");
  return static_cast<int>(z >> (n_qubits - 3)) & 7;
}

std::array<int, 3> plan_first_step(int plan, const env::Observation& obs) {
  switch (plan) {
    case kAdvancePx: return {1, 0, 0};
    case kAdvanceNx: return {-1, 0, 0};
    case kAdvancePy: return {0, 1, 0};
    case kAdvanceNy: return {0, -1, 0};
    case kClimb: return {0, 0, 1};
    case kDescend: return {0, 0, -1};
    case kSweep: {
      // Most open lateral direction; ties resolve in +x, -x, +y, -y order.
      static constexpr std::array<std::array<int, 3>, 4> dirs{
          {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}}};
      int best = 0;
      for (int d = 1; d < 4; ++d) {
        if (obs.depth[static_cast<std::size_t>(d)] >
            obs.depth[static_cast<std::size_t>(best)]) {
          best = d;
        }
      }
      return dirs[static_cast<std::size_t>(best)];
    }
    default: return {0, 0, 0};  // kHold
  }
}

double plan_unsafe(int plan, const env::Observation& obs) {
  std::array<int, 3> step = plan_first_step(plan, obs);
  const double dest_code = patch_code(obs, step[0], step[1], step[2]);
  if (dest_code == static_cast<double>(env::Cell::Nofly)) return 1.0;
  if (dest_code == static_cast<double>(env::Cell::Obstacle)) {
    step = {0, 0, 0};  // blocked move keeps the current position
  }
  for (int dz = -1; dz <= 1; ++dz) {
    for (int dy = -1; dy <= 1; ++dy) {
      for (int dx = -1; dx <= 1; ++dx) {
        if (patch_code(obs, step[0] + dx, step[1] + dy, step[2] + dz) ==
            static_cast<double>(env::Cell::Nofly)) {
          return 0.5;
        }
      }
    }
  }
  return 0.0;
}

double plan_utility(int plan, const env::Observation& obs) {
  const double denom = std::max(1, obs.radius - 1);
  const auto open = [&](int depth_index) {
    return std::max(0.0, obs.depth[static_cast<std::size_t>(depth_index)] - 1.0) /
           denom;
  };
  switch (plan) {
    case kAdvancePx: return open(0);
    case kAdvanceNx: return open(1);
    case kAdvancePy: return open(2);
    case kAdvanceNy: return open(3);
    case kClimb: return 0.5 * open(4);
    case kDescend: return 0.5 * open(5);
    case kSweep:
      return 0.9 * std::max(std::max(open(0), open(1)),
                            std::max(open(2), open(3)));
    default: return 0.0;  // kHold
  }
}

PriorPolicy prior_from_observation(const env::Observation& obs) {
  PriorPolicy prior;
  std::array<bool, kPlanCount> safe{};
  int n_safe = 0;
  for (int p = 0; p < kPlanCount; ++p) {
    safe[static_cast<std::size_t>(p)] = plan_unsafe(p, obs) == 0.0;
    if (safe[static_cast<std::size_t>(p)]) ++n_safe;
  }
  for (int p = 0; p < kPlanCount; ++p) {
    if (n_safe == 0) {
      prior.probs[static_cast<std::size_t>(p)] = 1.0 / kPlanCount;
    } else {
      prior.probs[static_cast<std::size_t>(p)] =
          safe[static_cast<std::size_t>(p)] ? 1.0 / n_safe : 0.0;
    }
  }
  return prior;
}

EncodedObservation encode_observation(const QaoaPolicy& policy,
                                      const env::Observation& obs) {
  const int n = policy.config.n_qubits;
  const std::vector<double> features = obs.normalized_features();
  if (static_cast<std::size_t>(n) > features.size()) {
    throw UsageError("observation has fewer features than qubits");
  }

  EncodedObservation enc;
  enc.angles.resize(static_cast<std::size_t>(n));
  for (int q = 0; q < n; ++q) {
    enc.angles[static_cast<std::size_t>(q)] =
        policy.config.input_scale * features[static_cast<std::size_t>(q)];
  }

  const PriorPolicy prior = prior_from_observation(obs);
  std::array<double, kPlanCount> plan_cost{};
  for (int p = 0; p < kPlanCount; ++p) {
    plan_cost[static_cast<std::size_t>(p)] =
        kSafetyWeight * plan_unsafe(p, obs) +
        kUtilityWeight * (1.0 - plan_utility(p, obs)) +
        kPriorWeight * (1.0 - prior.probs[static_cast<std::size_t>(p)]);
  }

  const std::size_t dim = std::size_t{1} << n;
  enc.cost.values.resize(dim);
  for (std::size_t z = 0; z < dim; ++z) {
    enc.cost.values[z] =
        plan_cost[static_cast<std::size_t>(plan_of_bitstring(z, n))];
  }
  return enc;
}

qsim::Circuit build_circuit(const QaoaPolicy& policy,
                            const std::vector<double>& angles,
                            const qsim::CostTable& cost) {
  check_sizes(policy, angles, cost);
  const int n = policy.config.n_qubits;

  qsim::Circuit circuit;
  for (int q = 0; q < n; ++q) {
    circuit.push_back(qsim::CircuitOp::from_gate(qsim::Gate::h(q)));
  }
  for (int q = 0; q < n; ++q) {
    circuit.push_back(qsim::CircuitOp::from_gate(
        qsim::Gate::ry(q, angles[static_cast<std::size_t>(q)])));
  }
  for (int q = 0; q + 1 < n; ++q) {
    circuit.push_back(qsim::CircuitOp::from_gate(qsim::Gate::cz(q, q + 1)));
  }
  for (int l = 0; l < policy.config.depth; ++l) {
    std::vector<double> phase(cost.values.size());
    for (std::size_t z = 0; z < phase.size(); ++z) {
      phase[z] = policy.gammas[static_cast<std::size_t>(l)] * cost.values[z];
    }
    circuit.push_back(qsim::CircuitOp::from_phase(std::move(phase)));
    for (int q = 0; q < n; ++q) {
      circuit.push_back(qsim::CircuitOp::from_gate(
          qsim::Gate::rx(q, 2.0 * policy.betas[static_cast<std::size_t>(l)])));
    }
  }
  return circuit;
}

qsim::StateVector build_state(const QaoaPolicy& policy,
                              const std::vector<double>& angles,
                              const qsim::CostTable& cost) {
  return qsim::run_circuit(policy.config.n_qubits,
                           build_circuit(policy, angles, cost));
}

std::array<double, kPlanCount> plan_distribution(const qsim::StateVector& state) {
  std::array<double, kPlanCount> dist{};
  const auto probs = state.probabilities();
  for (std::size_t z = 0; z < probs.size(); ++z) {
    dist[static_cast<std::size_t>(
        plan_of_bitstring(z, state.n_qubits()))] += probs[z];
  }
  return dist;
}

LatentSample sample_latent(const QaoaPolicy& policy,
                           const qsim::StateVector& state, Rng& rng) {
  const int n = policy.config.n_qubits;
  if (state.n_qubits() != n) {
    throw UsageError("sample_latent: state does not match the policy's qubit count");
  }
  const auto counts = state.sample(policy.config.shots, rng);

  LatentSample out;
  std::array<double, kPlanCount> plan_counts{};
  for (std::size_t z = 0; z < counts.size(); ++z) {
    plan_counts[static_cast<std::size_t>(plan_of_bitstring(z, n))] +=
        static_cast<double>(counts[z]);
  }
  for (int p = 0; p < kPlanCount; ++p) {
    out.distribution[static_cast<std::size_t>(p)] =
        plan_counts[static_cast<std::size_t>(p)] /
        static_cast<double>(policy.config.shots);
  }

  // Plan draw from the empirical distribution, then a representative
  // bitstring from the counts inside that class.
  double u = rng.next_double();
  int plan = kPlanCount - 1;
  double acc = 0.0;
  for (int p = 0; p < kPlanCount; ++p) {
    acc += out.distribution[static_cast<std::size_t>(p)];
    if (u < acc) {
      plan = p;
      break;
    }
  }

  std::uint64_t class_total = 0;
  for (std::size_t z = 0; z < counts.size(); ++z) {
    if (plan_of_bitstring(z, n) == plan) class_total += counts[z];
  }
  std::uint64_t raw = static_cast<std::uint64_t>(plan) << (n - 3);
  if (class_total > 0) {
    std::uint64_t pick = rng.next_below(class_total);
    for (std::size_t z = 0; z < counts.size(); ++z) {
      if (plan_of_bitstring(z, n) != plan) continue;
      if (pick < counts[z]) {
        raw = z;
        break;
      }
      pick -= counts[z];
    }
  }
  out.plan = LatentPlan{plan, raw};
  return out;
}

double gate_shift_grad(int n_qubits, const qsim::Circuit& circuit,
                       std::size_t op_index,
                       const std::vector<double>& observable) {
  if (op_index >= circuit.size()) {
    throw UsageError("gate_shift_grad: op index out of range");
  }
  const qsim::CircuitOp& op = circuit[op_index];
  if (op.kind != qsim::CircuitOp::Kind::Gate ||
      (op.gate.kind != qsim::GateKind::RX &&
       op.gate.kind != qsim::GateKind::RY)) {
    throw UsageError("gate_shift_grad: op is not a rotation gate");
  }
  qsim::Circuit shifted = circuit;
  shifted[op_index].gate.angle = op.gate.angle + kPi / 2.0;
  const double fp = qsim::run_circuit(n_qubits, shifted)
                        .expectation(qsim::CostTable{observable});
  shifted[op_index].gate.angle = op.gate.angle - kPi / 2.0;
  const double fm = qsim::run_circuit(n_qubits, shifted)
                        .expectation(qsim::CostTable{observable});
  return 0.5 * (fp - fm);
}

std::vector<double> parameter_shift_grad(const QaoaPolicy& policy,
                                         const std::vector<double>& angles,
                                         const qsim::CostTable& cost,
                                         const std::vector<double>& observable,
                                         GradientMode mode, Rng* rng) {
  check_sizes(policy, angles, cost);
  const int n = policy.config.n_qubits;
  const int depth = policy.config.depth;
  const std::size_t dim = std::size_t{1} << n;
  if (observable.size() != dim) {
    throw UsageError("parameter_shift_grad: observable length != 2^n");
  }
  if (mode == GradientMode::kSampled && rng == nullptr) {
    throw UsageError("parameter_shift_grad: sampled mode needs an rng");
  }

  const qsim::Circuit base = build_circuit(policy, angles, cost);
  const std::size_t input_ops =
      static_cast<std::size_t>(2 * n + (n >= 2 ? n - 1 : 0));

  // Walsh spectrum of the cost table: cost[z] = sum_S coeff[S]*(-1)^|S&z|.
  std::vector<double> coeff = cost.values;
  fwht(coeff);
  for (double& c : coeff) c /= static_cast<double>(dim);

  const auto eval = [&](const qsim::Circuit& c) {
    return eval_objective(n, c, observable, mode, policy.config.shots, rng);
  };

  std::vector<double> grad(static_cast<std::size_t>(2 * depth), 0.0);
  for (int l = 0; l < depth; ++l) {
    const std::size_t phase_idx =
        input_ops + static_cast<std::size_t>(l) * (1 + static_cast<std::size_t>(n));

    // Cost layer: one two-point shift per multi-Z factor in its spectrum.
    for (std::size_t s = 1; s < dim; ++s) {
      if (std::abs(coeff[s]) < 1e-14) continue;
      qsim::Circuit shifted = base;
      shifted.insert(shifted.begin() + static_cast<std::ptrdiff_t>(phase_idx) + 1,
                     zs_phase(s, kPi / 4.0, dim));
      const double fp = eval(shifted);
      shifted[phase_idx + 1] = zs_phase(s, -kPi / 4.0, dim);
      const double fm = eval(shifted);
      grad[static_cast<std::size_t>(l)] += coeff[s] * (fp - fm);
    }

    // Mixer layer: shift each qubit's RX argument; d(2*beta)/d(beta) = 2
    // cancels the 1/2 of the two-point rule.
    for (int q = 0; q < n; ++q) {
      const std::size_t g_idx = phase_idx + 1 + static_cast<std::size_t>(q);
      qsim::Circuit shifted = base;
      shifted[g_idx].gate.angle += kPi / 2.0;
      const double fp = eval(shifted);
      shifted[g_idx].gate.angle -= kPi;
      const double fm = eval(shifted);
      grad[static_cast<std::size_t>(depth + l)] += fp - fm;
    }
  }
  return grad;
}

void update_params(QaoaPolicy& policy, const std::vector<double>& grad) {
  const std::size_t depth = policy.gammas.size();
  if (grad.size() != 2 * depth) {
    throw UsageError("update_params: gradient length != parameter count");
  }
  for (double g : grad) {
    if (!std::isfinite(g)) {
      throw TrainingError("update_params: non-finite gradient component");
    }
  }
  const double lr = policy.config.lr;
  const double lam = policy.config.lambda_temporal;
  std::vector<double> new_gammas = policy.gammas;
  std::vector<double> new_betas = policy.betas;
  for (std::size_t l = 0; l < depth; ++l) {
    new_gammas[l] -= lr * (grad[l] +
                           2.0 * lam * (policy.gammas[l] - policy.prev_gammas[l]));
    new_betas[l] -= lr * (grad[depth + l] +
                          2.0 * lam * (policy.betas[l] - policy.prev_betas[l]));
  }
  // prev holds the pre-step value: the next step is damped toward where this
  // one started, which keeps the regularizer from being identically zero.
  policy.prev_gammas = policy.gammas;
  policy.prev_betas = policy.betas;
  policy.gammas = std::move(new_gammas);
  policy.betas = std::move(new_betas);
}

double zne_extrapolate(double e1, double e2, double e3) {
  if (!std::isfinite(e1) || !std::isfinite(e2) || !std::isfinite(e3)) {
    throw UsageError("zne_extrapolate: non-finite input");
  }
  // Quadratic through (1,e1), (2,e2), (3,e3) evaluated at 0.
  return 3.0 * e1 - 3.0 * e2 + e3;
}

qsim::Circuit fold_noise(const qsim::Circuit& circuit, int scale) {
  if (scale < 1 || scale % 2 == 0) {
    std::ostringstream oss;
    oss << "fold_noise: scale must be an odd integer >= 1, got " << scale;
    throw UsageError(oss.str());
  }
  qsim::Circuit folded;
  folded.reserve(circuit.size() * static_cast<std::size_t>(scale));
  for (const auto& op : circuit) {
    folded.push_back(op);
    for (int k = 0; k < (scale - 1) / 2; ++k) {
      folded.push_back(op.adjoint());
      folded.push_back(op);
    }
  }
  return folded;
}

qsim::Circuit fold_noise_for_scale(const qsim::Circuit& circuit, int lambda) {
  if (lambda < 1 || lambda > 3) {
    throw UsageError("fold_noise_for_scale: lambda must be 1, 2, or 3");
  }
  if (lambda == 1) return circuit;
  if (lambda == 3) return fold_noise(circuit, 3);
  // lambda == 2: fold the first half of the ops (rounded down) at scale 3.
  const std::size_t half = circuit.size() / 2;
  qsim::Circuit folded;
  folded.reserve(circuit.size() + 2 * half);
  for (std::size_t i = 0; i < circuit.size(); ++i) {
    folded.push_back(circuit[i]);
    if (i < half) {
      folded.push_back(circuit[i].adjoint());
      folded.push_back(circuit[i]);
    }
  }
  return folded;
}

MitigationResult mitigate_readout(const ConfusionMatrix& cm,
                                  const std::vector<double>& observed) {
  cm.validate();
  if (observed.size() != static_cast<std::size_t>(cm.dim)) {
    throw UsageError("mitigate_readout: observed vector length != matrix dimension");
  }
  double total = 0.0;
  for (double v : observed) {
    if (v < 0.0 || !std::isfinite(v)) {
      throw UsageError("mitigate_readout: observed entries must be finite and >= 0");
    }
    total += v;
  }
  if (total <= 0.0) {
    throw UsageError("mitigate_readout: observed vector sums to zero");
  }

  Eigen::MatrixXd m(cm.dim, cm.dim);
  for (int i = 0; i < cm.dim; ++i)
    for (int j = 0; j < cm.dim; ++j) m(i, j) = cm.at(i, j);

  Eigen::VectorXd obs(cm.dim);
  for (int i = 0; i < cm.dim; ++i) obs(i) = observed[static_cast<std::size_t>(i)] / total;

  const Eigen::PartialPivLU<Eigen::MatrixXd> lu(m);
  const Eigen::MatrixXd inv = lu.inverse();

  const auto norm1 = [](const Eigen::MatrixXd& a) {
    double best = 0.0;
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      best = std::max(best, a.col(j).cwiseAbs().sum());
    }
    return best;
  };
  const double condition = norm1(m) * norm1(inv);
  if (!std::isfinite(condition) || condition > kConditionLimit) {
    std::ostringstream oss;
    oss << "confusion matrix condition " << condition
        << " exceeds " << kConditionLimit << "; falling back to raw counts";
    throw MitigationError(oss.str());
  }

  Eigen::VectorXd x = lu.solve(obs);
  MitigationResult result;
  result.condition = condition;
  result.probs.resize(static_cast<std::size_t>(cm.dim));
  double sum = 0.0;
  for (int i = 0; i < cm.dim; ++i) {
    double v = x(i);
    if (v < 0.0) {
      v = 0.0;
      ++result.clip_count;
    }
    result.probs[static_cast<std::size_t>(i)] = v;
    sum += v;
  }
  if (sum <= 0.0) {
    throw MitigationError("mitigated distribution collapsed to zero mass");
  }
  for (double& v : result.probs) v /= sum;
  return result;
}

double kl_to_prior(const std::vector<double>& p, const std::vector<double>& q,
                   bool* floored) {
  if (p.size() != q.size()) {
    throw UsageError("kl_to_prior: distribution lengths differ");
  }
  if (floored != nullptr) *floored = false;
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] < 0.0 || q[i] < 0.0 || !std::isfinite(p[i]) || !std::isfinite(q[i])) {
      throw UsageError("kl_to_prior: entries must be finite and >= 0");
    }
    if (p[i] == 0.0) continue;
    double qi = q[i];
    if (qi < kKlFloor) {
      qi = kKlFloor;
      if (floored != nullptr) *floored = true;
    }
    kl += p[i] * std::log(p[i] / qi);
  }
  return std::max(0.0, kl);
}

}  // namespace qnmarl::qaoa
