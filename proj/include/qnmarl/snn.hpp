#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "qnmarl/errors.hpp"
#include "qnmarl/rng.hpp"

namespace qnmarl::snn {

// Leaky integrate-and-fire membrane with Euler dynamics
// u += (dt/tau)*(-u + I), a hard threshold, reset to u_reset, and an
// absolute refractory hold measured in steps.
struct LifParams {
  double threshold = 1.0;
  double tau_ms = 10.0;
  double dt_ms = 1.0;
  double u_reset = 0.0;
  int refractory_steps = 2;

  void validate() const;  // throws ConfigError
};

struct LifNeuron {
  double u = 0.0;
  int refractory = 0;
};

// Advances one step; returns whether the neuron fired. During the refractory
// hold the membrane stays at u_reset and input is ignored.
bool lif_step(LifNeuron& neuron, double input, const LifParams& params);

struct NetConfig {
  std::vector<int> layer_sizes;     // {input, hidden..., outputs}
  LifParams lif{};
  int t_steps = 20;                 // simulation window per forward pass
  double input_rate_scale = 0.5;    // spike probability per ms at feature 1.0
  double latent_bias = 0.3;         // extra drive for the cued hidden group
  double trace_weight = 0.1;        // final-membrane term in the Q readout
  double surrogate_alpha = 1.0;     // fast-sigmoid sharpness
  double lr = 0.001;
  double gamma = 0.95;              // TD discount
  double init_scale = 1.6;          // weight std = init_scale / sqrt(fan_in)

  void validate() const;  // throws ConfigError
};

// kSpiking is the real network: Bernoulli rate-coded inputs, hard
// thresholds, reset and refractory dynamics, surrogate gradients.
// kSmooth replaces spikes with the fast sigmoid and drops reset and
// refractory dynamics, making the forward pass exactly differentiable so
// the backward pass can be validated against finite differences.
enum class ForwardMode { kSpiking, kSmooth };

struct ForwardResult {
  std::vector<double> q;                     // one value per output neuron
  std::vector<std::uint32_t> spike_counts;   // hidden then output neurons
  std::uint64_t total_spikes = 0;
  double energy = 0.0;                       // spikes per ms of window
};

struct TdSample {
  std::span<const double> obs;
  std::span<const double> next_obs;
  int latent = -1;       // hidden group cue; -1 = none
  int next_latent = -1;
  int action = 0;
  double reward = 0.0;
  bool done = false;
  std::span<const std::uint8_t> next_mask;  // empty = every action allowed
};

class SpikingQNet {
 public:
  struct Layer {
    int fan_in = 0, fan_out = 0;
    std::vector<double> w;  // [fan_in][fan_out], contiguous per input
    std::vector<double> b;
    // Adam moments.
    std::vector<double> m_w, v_w, m_b, v_b;
  };

  static SpikingQNet init(const NetConfig& config, Rng& rng);

  const NetConfig& config() const { return config_; }
  const std::vector<Layer>& layers() const { return layers_; }
  std::uint64_t adam_step() const { return adam_step_; }

  // One simulated window. `latent_plan` >= 0 biases that group of the first
  // hidden layer (the layer is split into 8 equal groups).
  ForwardResult forward(std::span<const double> features, int latent_plan,
                        Rng& rng, ForwardMode mode = ForwardMode::kSpiking) const;

  // Greedy action among allowed ones (first index wins ties).
  int select_action(std::span<const double> features, int latent_plan,
                    std::span<const std::uint8_t> mask, Rng& rng) const;

  // One Adam step on the TD loss mean_b 0.5*(Q(s_b, a_b) - y_b)^2 with
  // y = r + gamma * max_allowed Q_target(s'), gradients through time with
  // the fast-sigmoid surrogate and stop-gradient resets. Returns the loss.
  double td_update(const std::vector<TdSample>& batch,
                   const SpikingQNet& target, Rng& rng,
                   ForwardMode mode = ForwardMode::kSpiking);

  // Flat parameter blob (weights, biases, Adam state, step counter) for
  // checkpointing; deserialize restores an exact training state.
  std::vector<double> serialize() const;
  static SpikingQNet deserialize(const NetConfig& config,
                                 const std::vector<double>& blob);

 private:
  NetConfig config_;
  std::vector<Layer> layers_;
  std::uint64_t adam_step_ = 0;
};

// Shannon entropy in nats of the normalized spike-count distribution;
// zero when nothing fired.
double spike_entropy(const std::vector<std::uint32_t>& counts);

}  // namespace qnmarl::snn
