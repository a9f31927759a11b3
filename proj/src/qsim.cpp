#include "qnmarl/qsim.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace qnmarl::qsim {

namespace {

void check_qubit_index(int q, int n, const char* what) {
  if (q < 0 || q >= n) {
    std::ostringstream oss;
    oss << what << ": qubit index " << q << " out of range for " << n
        << "-qubit register";
    throw UsageError(oss.str());
  }
}

}  // namespace

Gate Gate::adjoint() const {
  Gate g = *this;
  if (kind == GateKind::RX || kind == GateKind::RY) g.angle = -g.angle;
  return g;
}

StateVector::StateVector(int n_qubits) : n_qubits_(n_qubits) {
  if (n_qubits < 1 || n_qubits > kMaxQubits) {
    std::ostringstream oss;
    oss << "StateVector: qubit count " << n_qubits << " outside supported 1.."
        << kMaxQubits;
    throw ConfigError(oss.str());
  }
  amps_.assign(std::size_t{1} << n_qubits, cplx(0.0, 0.0));
  amps_[0] = cplx(1.0, 0.0);
}

void StateVector::apply_gate(const Gate& g) {
  if (g.kind == GateKind::CZ) {
    check_qubit_index(g.target, n_qubits_, "apply_gate(CZ)");
    check_qubit_index(g.control, n_qubits_, "apply_gate(CZ)");
    if (g.target == g.control) {
      throw UsageError("apply_gate(CZ): control and target must differ");
    }
    const std::size_t both = (std::size_t{1} << g.target) |
                             (std::size_t{1} << g.control);
    for (std::size_t z = 0; z < amps_.size(); ++z) {
      if ((z & both) == both) amps_[z] = -amps_[z];
    }
    return;
  }

  check_qubit_index(g.target, n_qubits_, "apply_gate");
  cplx u00, u01, u10, u11;
  switch (g.kind) {
    case GateKind::H: {
      const double s = 1.0 / std::sqrt(2.0);
      u00 = s; u01 = s; u10 = s; u11 = -s;
      break;
    }
    case GateKind::RX: {
      const double c = std::cos(g.angle / 2.0), s = std::sin(g.angle / 2.0);
      u00 = c; u01 = cplx(0.0, -s); u10 = cplx(0.0, -s); u11 = c;
      break;
    }
    case GateKind::RY: {
      const double c = std::cos(g.angle / 2.0), s = std::sin(g.angle / 2.0);
      u00 = c; u01 = -s; u10 = s; u11 = c;
      break;
    }
    default:
      throw UsageError("apply_gate: unknown gate kind");
  }

  const std::size_t mask = std::size_t{1} << g.target;
  const std::size_t lo = mask - 1;
  const std::size_t half = amps_.size() >> 1;
  for (std::size_t i = 0; i < half; ++i) {
    const std::size_t i0 = ((i & ~lo) << 1) | (i & lo);
    const std::size_t i1 = i0 | mask;
    const cplx a0 = amps_[i0], a1 = amps_[i1];
    amps_[i0] = u00 * a0 + u01 * a1;
    amps_[i1] = u10 * a0 + u11 * a1;
  }
}

void StateVector::apply_cost_phase(const CostTable& cost, double gamma) {
  if (cost.values.size() != amps_.size()) {
    std::ostringstream oss;
    oss << "apply_cost_phase: cost table length " << cost.values.size()
        << " != state dimension " << amps_.size();
    throw UsageError(oss.str());
  }
  for (std::size_t z = 0; z < amps_.size(); ++z) {
    const double phi = gamma * cost.values[z];
    amps_[z] *= cplx(std::cos(phi), -std::sin(phi));
  }
}

void StateVector::apply_mixer(double beta) {
  for (int q = 0; q < n_qubits_; ++q) {
    apply_gate(Gate::rx(q, 2.0 * beta));
  }
}

std::vector<double> StateVector::probabilities() const {
  std::vector<double> p(amps_.size());
  for (std::size_t z = 0; z < amps_.size(); ++z) p[z] = std::norm(amps_[z]);
  return p;
}

std::vector<std::uint64_t> StateVector::sample(int shots, Rng& rng) const {
  if (shots < 1) throw UsageError("sample: shots must be >= 1");
  std::vector<double> cdf(amps_.size());
  double acc = 0.0;
  for (std::size_t z = 0; z < amps_.size(); ++z) {
    acc += std::norm(amps_[z]);
    cdf[z] = acc;
  }
  // Guards against rounding keeping the last entry fractionally below 1.
  cdf.back() = std::max(cdf.back(), 1.0);

  std::vector<std::uint64_t> counts(amps_.size(), 0);
  for (int s = 0; s < shots; ++s) {
    const double u = rng.next_double();
    const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    const std::size_t z = static_cast<std::size_t>(it - cdf.begin());
    counts[z < counts.size() ? z : counts.size() - 1] += 1;
  }
  return counts;
}

double StateVector::expectation(const CostTable& cost) const {
  if (cost.values.size() != amps_.size()) {
    std::ostringstream oss;
    oss << "expectation: cost table length " << cost.values.size()
        << " != state dimension " << amps_.size();
    throw UsageError(oss.str());
  }
  double e = 0.0;
  for (std::size_t z = 0; z < amps_.size(); ++z) {
    e += std::norm(amps_[z]) * cost.values[z];
  }
  return e;
}

double StateVector::norm() const {
  double n2 = 0.0;
  for (const cplx& a : amps_) n2 += std::norm(a);
  return std::sqrt(n2);
}

CircuitOp CircuitOp::adjoint() const {
  CircuitOp op = *this;
  if (kind == Kind::Gate) {
    op.gate = gate.adjoint();
  } else {
    for (double& v : op.phase) v = -v;
  }
  return op;
}

void apply_op(StateVector& sv, const CircuitOp& op) {
  if (op.kind == CircuitOp::Kind::Gate) {
    sv.apply_gate(op.gate);
  } else {
    sv.apply_cost_phase(CostTable{op.phase}, 1.0);
  }
}

StateVector run_circuit(int n_qubits, const Circuit& circuit) {
  StateVector sv(n_qubits);
  for (const CircuitOp& op : circuit) apply_op(sv, op);
  return sv;
}

}  // namespace qnmarl::qsim
