#pragma once

#include <complex>
#include <cstdint>
#include <vector>

#include "qnmarl/errors.hpp"
#include "qnmarl/rng.hpp"

namespace qnmarl::qsim {

using cplx = std::complex<double>;

// Dense simulation is exponential in qubit count; 10 qubits (16 KiB of
// amplitudes) is the supported ceiling.
inline constexpr int kMaxQubits = 10;

enum class GateKind { H, RX, RY, CZ };

// One element of the supported gate set {H, RX, RY, CZ}. Angles are radians
// and apply to RX/RY only; CZ is symmetric in (target, control).
struct Gate {
  GateKind kind = GateKind::H;
  int target = 0;
  int control = -1;    // CZ only
  double angle = 0.0;  // RX/RY only

  static Gate h(int q) { return {GateKind::H, q, -1, 0.0}; }
  static Gate rx(int q, double theta) { return {GateKind::RX, q, -1, theta}; }
  static Gate ry(int q, double theta) { return {GateKind::RY, q, -1, theta}; }
  static Gate cz(int a, int b) { return {GateKind::CZ, a, b, 0.0}; }

  // Adjoint within the same gate set: H and CZ are self-inverse, rotations
  // negate their angle.
  Gate adjoint() const;
};

// Diagonal cost operator: one real value per basis state. Basis index bit b
// is the value of qubit b (qubit 0 = least significant bit).
struct CostTable {
  std::vector<double> values;
};

// Dense statevector over n qubits, initialized to |0...0>.
class StateVector {
 public:
  explicit StateVector(int n_qubits);

  int n_qubits() const { return n_qubits_; }
  std::size_t dim() const { return amps_.size(); }
  const std::vector<cplx>& amplitudes() const { return amps_; }

  void apply_gate(const Gate& g);

  // amp[z] *= exp(-i * gamma * cost[z]).
  void apply_cost_phase(const CostTable& cost, double gamma);

  // exp(-i * beta * X) on every qubit, i.e. RX(2*beta) per qubit.
  void apply_mixer(double beta);

  // |amp[z]|^2 for every basis state; sums to 1 within rounding.
  std::vector<double> probabilities() const;

  // Draws `shots` basis-state outcomes by inverse-CDF sampling; returns
  // per-state counts. shots must be >= 1.
  std::vector<std::uint64_t> sample(int shots, Rng& rng) const;

  // Sum over z of p(z) * cost[z].
  double expectation(const CostTable& cost) const;

  double norm() const;

 private:
  int n_qubits_;
  std::vector<cplx> amps_;
};

// A circuit element: either a discrete gate or a diagonal phase
// (amp[z] *= exp(-i * phase[z])). Keeping the phase in the op list lets
// noise folding treat the whole ansatz uniformly.
struct CircuitOp {
  enum class Kind { Gate, Phase };
  Kind kind = Kind::Gate;
  Gate gate{};
  std::vector<double> phase{};

  static CircuitOp from_gate(const Gate& g) { return {Kind::Gate, g, {}}; }
  static CircuitOp from_phase(std::vector<double> p) {
    return {Kind::Phase, Gate{}, std::move(p)};
  }
  CircuitOp adjoint() const;
};

using Circuit = std::vector<CircuitOp>;

void apply_op(StateVector& sv, const CircuitOp& op);

// Applies the ops in order to |0...0> on n_qubits.
StateVector run_circuit(int n_qubits, const Circuit& circuit);

}  // namespace qnmarl::qsim
