#include "qnmarl/snn.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace qnmarl::snn {

namespace {

constexpr int kLatentGroups = 8;
constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

double fast_sigmoid(double x, double alpha) { return x / (1.0 + alpha * std::abs(x)); }

double surrogate_slope(double x, double alpha) {
  const double d = 1.0 + alpha * std::abs(x);
  return 1.0 / (d * d);
}

// Per-layer, per-step recordings the backward pass replays.
struct LayerTrace {
  std::vector<double> v;        // pre-reset membrane, t_steps * n
  std::vector<double> s;        // spike (0/1) or analog output, t_steps * n
  std::vector<std::uint8_t> held;  // refractory hold flags, t_steps * n
  std::vector<double> u_final;  // post-reset membrane after the last step
};

struct Trace {
  // Input activity: spike index lists per step (spiking mode) or one analog
  // vector reused every step (smooth mode).
  std::vector<std::vector<std::uint32_t>> active;
  std::vector<double> analog;
  std::vector<LayerTrace> layers;
};

}  // namespace

void LifParams::validate() const {
  if (!(tau_ms > 0.0) || !(dt_ms > 0.0)) {
    throw ConfigError("membrane tau and dt must be positive");
  }
  if (dt_ms > tau_ms) {
    throw ConfigError("Euler step dt must not exceed the membrane tau");
  }
  if (threshold <= u_reset) {
    throw ConfigError("spike threshold must sit above the reset potential");
  }
  if (refractory_steps < 0) {
    throw ConfigError("refractory hold must be >= 0 steps");
  }
}

bool lif_step(LifNeuron& neuron, double input, const LifParams& params) {
  if (neuron.refractory > 0) {
    --neuron.refractory;
    neuron.u = params.u_reset;
    return false;
  }
  neuron.u += (params.dt_ms / params.tau_ms) * (-neuron.u + input);
  if (neuron.u >= params.threshold) {
    neuron.u = params.u_reset;
    neuron.refractory = params.refractory_steps;
    return true;
  }
  return false;
}

void NetConfig::validate() const {
  lif.validate();
  if (layer_sizes.size() < 2) {
    throw ConfigError("network needs at least input and output layers");
  }
  for (int n : layer_sizes) {
    if (n < 1) throw ConfigError("every layer needs at least one neuron");
  }
  if (t_steps < 1) throw ConfigError("simulation window must be >= 1 step");
  if (!(input_rate_scale > 0.0) || input_rate_scale * lif.dt_ms > 1.0) {
    throw ConfigError("input rate scale must give spike probabilities in (0, 1]");
  }
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (gamma < 0.0 || gamma > 1.0) throw ConfigError("discount must be in [0, 1]");
  if (!(surrogate_alpha > 0.0)) {
    throw ConfigError("surrogate sharpness must be positive");
  }
  if (trace_weight < 0.0) throw ConfigError("trace weight must be >= 0");
  if (latent_bias < 0.0) throw ConfigError("latent bias must be >= 0");
  if (!(init_scale > 0.0)) throw ConfigError("init scale must be positive");
}

SpikingQNet SpikingQNet::init(const NetConfig& config, Rng& rng) {
  config.validate();
  SpikingQNet net;
  net.config_ = config;
  for (std::size_t l = 0; l + 1 < config.layer_sizes.size(); ++l) {
    Layer layer;
    layer.fan_in = config.layer_sizes[l];
    layer.fan_out = config.layer_sizes[l + 1];
    const std::size_t n_w = static_cast<std::size_t>(layer.fan_in) * layer.fan_out;
    layer.w.resize(n_w);
    const double std_dev = config.init_scale / std::sqrt(layer.fan_in);
    for (double& w : layer.w) w = std_dev * rng.next_gaussian();
    layer.b.assign(static_cast<std::size_t>(layer.fan_out), 0.0);
    layer.m_w.assign(n_w, 0.0);
    layer.v_w.assign(n_w, 0.0);
    layer.m_b.assign(static_cast<std::size_t>(layer.fan_out), 0.0);
    layer.v_b.assign(static_cast<std::size_t>(layer.fan_out), 0.0);
    net.layers_.push_back(std::move(layer));
  }
  return net;
}

namespace {

// Simulates the window and fills the trace when asked for.
ForwardResult run_window(const NetConfig& config,
                         const std::vector<SpikingQNet::Layer>& layers,
                         std::span<const double> features, int latent_plan,
                         Rng& rng, ForwardMode mode, Trace* trace) {
  const int input_size = config.layer_sizes.front();
  if (static_cast<int>(features.size()) != input_size) {
    std::ostringstream oss;
    oss << "forward: got " << features.size() << " features, expected "
        << input_size;
    throw UsageError(oss.str());
  }
  if (latent_plan < -1 || latent_plan >= kLatentGroups) {
    std::ostringstream oss;
    oss << "forward: latent cue " << latent_plan << " outside -1.."
        << kLatentGroups - 1;
    throw UsageError(oss.str());
  }
  if (latent_plan >= 0) {
    if (layers.size() < 2) {
      throw UsageError("latent cue needs a hidden layer");
    }
    if (layers[0].fan_out % kLatentGroups != 0) {
      throw UsageError("first hidden layer size must be divisible by 8 for latent cues");
    }
  }

  const int T = config.t_steps;
  const double k = config.lif.dt_ms / config.lif.tau_ms;
  const double theta = config.lif.threshold;
  const std::size_t n_layers = layers.size();

  std::vector<double> rate(static_cast<std::size_t>(input_size));
  for (int j = 0; j < input_size; ++j) {
    rate[static_cast<std::size_t>(j)] = std::clamp(
        config.input_rate_scale * config.lif.dt_ms * features[static_cast<std::size_t>(j)],
        0.0, 1.0);
  }

  if (trace != nullptr) {
    trace->layers.assign(n_layers, LayerTrace{});
    if (mode == ForwardMode::kSpiking) {
      trace->active.assign(static_cast<std::size_t>(T), {});
    } else {
      trace->analog = rate;
    }
    for (std::size_t l = 0; l < n_layers; ++l) {
      const std::size_t n = static_cast<std::size_t>(layers[l].fan_out);
      trace->layers[l].v.assign(static_cast<std::size_t>(T) * n, 0.0);
      trace->layers[l].s.assign(static_cast<std::size_t>(T) * n, 0.0);
      trace->layers[l].held.assign(static_cast<std::size_t>(T) * n, 0);
      trace->layers[l].u_final.assign(n, 0.0);
    }
  }

  std::vector<std::vector<double>> u(n_layers);
  std::vector<std::vector<int>> refractory(n_layers);
  for (std::size_t l = 0; l < n_layers; ++l) {
    u[l].assign(static_cast<std::size_t>(layers[l].fan_out), 0.0);
    refractory[l].assign(static_cast<std::size_t>(layers[l].fan_out), 0);
  }

  const std::size_t out_size = static_cast<std::size_t>(layers.back().fan_out);
  std::size_t count_size = 0;
  for (std::size_t l = 0; l < n_layers; ++l) {
    count_size += static_cast<std::size_t>(layers[l].fan_out);
  }

  ForwardResult result;
  result.spike_counts.assign(count_size, 0);
  std::vector<double> out_sum(out_size, 0.0);

  std::vector<std::uint32_t> active_in;   // spiking mode activity
  std::vector<double> analog_in;          // smooth mode activity
  std::vector<std::uint32_t> active_next;
  std::vector<double> analog_next;
  std::vector<double> current;

  for (int t = 0; t < T; ++t) {
    if (mode == ForwardMode::kSpiking) {
      active_in.clear();
      for (int j = 0; j < input_size; ++j) {
        if (rng.next_bernoulli(rate[static_cast<std::size_t>(j)])) {
          active_in.push_back(static_cast<std::uint32_t>(j));
        }
      }
      if (trace != nullptr) trace->active[static_cast<std::size_t>(t)] = active_in;
    } else {
      analog_in = rate;
    }

    std::size_t count_base = 0;
    for (std::size_t l = 0; l < n_layers; ++l) {
      const SpikingQNet::Layer& layer = layers[l];
      const std::size_t n = static_cast<std::size_t>(layer.fan_out);
      current.assign(layer.b.begin(), layer.b.end());
      if (mode == ForwardMode::kSpiking) {
        for (std::uint32_t j : active_in) {
          const double* col = layer.w.data() + static_cast<std::size_t>(j) * n;
          for (std::size_t i = 0; i < n; ++i) current[i] += col[i];
        }
      } else {
        for (std::size_t j = 0; j < analog_in.size(); ++j) {
          const double x = analog_in[j];
          if (x == 0.0) continue;
          const double* col = layer.w.data() + j * n;
          for (std::size_t i = 0; i < n; ++i) current[i] += x * col[i];
        }
      }
      if (l == 0 && latent_plan >= 0) {
        const std::size_t group = n / kLatentGroups;
        const std::size_t base = static_cast<std::size_t>(latent_plan) * group;
        for (std::size_t i = 0; i < group; ++i) {
          current[base + i] += config.latent_bias;
        }
      }

      if (mode == ForwardMode::kSpiking) active_next.clear();
      else analog_next.assign(n, 0.0);

      for (std::size_t i = 0; i < n; ++i) {
        double v, s;
        bool held = false;
        if (mode == ForwardMode::kSpiking) {
          if (refractory[l][i] > 0) {
            --refractory[l][i];
            v = config.lif.u_reset;
            s = 0.0;
            held = true;
            u[l][i] = config.lif.u_reset;
          } else {
            v = (1.0 - k) * u[l][i] + k * current[i];
            if (v >= theta) {
              s = 1.0;
              u[l][i] = config.lif.u_reset;
              refractory[l][i] = config.lif.refractory_steps;
              active_next.push_back(static_cast<std::uint32_t>(i));
              ++result.spike_counts[count_base + i];
              ++result.total_spikes;
            } else {
              s = 0.0;
              u[l][i] = v;
            }
          }
        } else {
          v = (1.0 - k) * u[l][i] + k * current[i];
          s = fast_sigmoid(v - theta, config.surrogate_alpha);
          u[l][i] = v;
          analog_next[i] = s;
          if (v >= theta) {
            ++result.spike_counts[count_base + i];
            ++result.total_spikes;
          }
        }
        if (trace != nullptr) {
          LayerTrace& lt = trace->layers[l];
          lt.v[static_cast<std::size_t>(t) * n + i] = v;
          lt.s[static_cast<std::size_t>(t) * n + i] = s;
          lt.held[static_cast<std::size_t>(t) * n + i] = held ? 1 : 0;
        }
        if (l + 1 == n_layers) out_sum[i] += s;
      }

      if (mode == ForwardMode::kSpiking) active_in = active_next;
      else analog_in = analog_next;
      count_base += n;
    }
  }

  result.q.resize(out_size);
  for (std::size_t i = 0; i < out_size; ++i) {
    result.q[i] = out_sum[i] / T + config.trace_weight * u.back()[i];
  }
  if (trace != nullptr) {
    for (std::size_t l = 0; l < n_layers; ++l) trace->layers[l].u_final = u[l];
  }
  result.energy = static_cast<double>(result.total_spikes) /
                  (T * config.lif.dt_ms);
  return result;
}

}  // namespace

ForwardResult SpikingQNet::forward(std::span<const double> features,
                                   int latent_plan, Rng& rng,
                                   ForwardMode mode) const {
  return run_window(config_, layers_, features, latent_plan, rng, mode, nullptr);
}

int SpikingQNet::select_action(std::span<const double> features,
                               int latent_plan,
                               std::span<const std::uint8_t> mask,
                               Rng& rng) const {
  const int n_actions = config_.layer_sizes.back();
  if (!mask.empty() && static_cast<int>(mask.size()) != n_actions) {
    throw UsageError("select_action: mask length != action count");
  }
  const ForwardResult result = forward(features, latent_plan, rng);
  int best = -1;
  for (int a = 0; a < n_actions; ++a) {
    if (!mask.empty() && mask[static_cast<std::size_t>(a)] == 0) continue;
    if (best < 0 || result.q[static_cast<std::size_t>(a)] >
                        result.q[static_cast<std::size_t>(best)]) {
      best = a;
    }
  }
  if (best < 0) throw UsageError("select_action: mask excludes every action");
  return best;
}

namespace {

struct Gradients {
  std::vector<std::vector<double>> w, b;  // per layer
};

// Backpropagation through the recorded window for one sample. gq is the
// loss gradient on the selected output's Q value.
void backward_window(const NetConfig& config,
                     const std::vector<SpikingQNet::Layer>& layers,
                     const Trace& trace, int action, double gq,
                     ForwardMode mode, Gradients* grads) {
  const int T = config.t_steps;
  const double k = config.lif.dt_ms / config.lif.tau_ms;
  const double theta = config.lif.threshold;
  const double alpha = config.surrogate_alpha;
  const std::size_t n_layers = layers.size();

  // dL/ds for the layer currently being processed, per step.
  std::vector<std::vector<double>> gs(
      static_cast<std::size_t>(T));
  const std::size_t out_size = static_cast<std::size_t>(layers.back().fan_out);
  for (int t = 0; t < T; ++t) {
    gs[static_cast<std::size_t>(t)].assign(out_size, 0.0);
    gs[static_cast<std::size_t>(t)][static_cast<std::size_t>(action)] = gq / T;
  }
  std::vector<double> gu_final(out_size, 0.0);
  gu_final[static_cast<std::size_t>(action)] = gq * config.trace_weight;

  std::vector<double> gu, gi;
  std::vector<std::vector<double>> gs_lower;
  for (std::size_t li = n_layers; li-- > 0;) {
    const SpikingQNet::Layer& layer = layers[li];
    const LayerTrace& lt = trace.layers[li];
    const std::size_t n = static_cast<std::size_t>(layer.fan_out);
    const std::size_t in_n = static_cast<std::size_t>(layer.fan_in);

    gu.assign(n, 0.0);
    if (li + 1 == n_layers) gu = gu_final;

    const bool need_lower = li > 0;
    if (need_lower) {
      gs_lower.assign(static_cast<std::size_t>(T), {});
      for (int t = 0; t < T; ++t) {
        gs_lower[static_cast<std::size_t>(t)].assign(in_n, 0.0);
      }
    }

    for (int t = T - 1; t >= 0; --t) {
      const std::size_t base = static_cast<std::size_t>(t) * n;
      gi.assign(n, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        if (lt.held[base + i]) {
          // Refractory hold pins the membrane; nothing flows through.
          gu[i] = 0.0;
          continue;
        }
        const double x = lt.v[base + i] - theta;
        double dv = gs[static_cast<std::size_t>(t)][i] * surrogate_slope(x, alpha);
        if (mode == ForwardMode::kSpiking) {
          // Reset factor with the spike treated as a constant.
          dv += gu[i] * (1.0 - lt.s[base + i]);
        } else {
          dv += gu[i];
        }
        gi[i] = k * dv;
        gu[i] = (1.0 - k) * dv;
      }

      std::vector<double>& gw = (*grads).w[li];
      std::vector<double>& gb = (*grads).b[li];
      for (std::size_t i = 0; i < n; ++i) gb[i] += gi[i];
      if (mode == ForwardMode::kSpiking) {
        if (li == 0) {
          for (std::uint32_t j : trace.active[static_cast<std::size_t>(t)]) {
            double* row = gw.data() + static_cast<std::size_t>(j) * n;
            for (std::size_t i = 0; i < n; ++i) row[i] += gi[i];
          }
        } else {
          const LayerTrace& below = trace.layers[li - 1];
          const std::size_t below_base = static_cast<std::size_t>(t) * in_n;
          for (std::size_t j = 0; j < in_n; ++j) {
            if (below.s[below_base + j] == 0.0) continue;
            double* row = gw.data() + j * n;
            for (std::size_t i = 0; i < n; ++i) row[i] += gi[i];
          }
        }
      } else {
        if (li == 0) {
          for (std::size_t j = 0; j < in_n; ++j) {
            const double x_in = trace.analog[j];
            if (x_in == 0.0) continue;
            double* row = gw.data() + j * n;
            for (std::size_t i = 0; i < n; ++i) row[i] += x_in * gi[i];
          }
        } else {
          const LayerTrace& below = trace.layers[li - 1];
          const std::size_t below_base = static_cast<std::size_t>(t) * in_n;
          for (std::size_t j = 0; j < in_n; ++j) {
            const double x_in = below.s[below_base + j];
            if (x_in == 0.0) continue;
            double* row = gw.data() + j * n;
            for (std::size_t i = 0; i < n; ++i) row[i] += x_in * gi[i];
          }
        }
      }

      if (need_lower) {
        std::vector<double>& gl = gs_lower[static_cast<std::size_t>(t)];
        for (std::size_t j = 0; j < in_n; ++j) {
          const double* row = layer.w.data() + j * n;
          double acc = 0.0;
          for (std::size_t i = 0; i < n; ++i) acc += row[i] * gi[i];
          gl[j] += acc;
        }
      }
    }

    if (need_lower) gs = gs_lower;
  }
}

void adam_apply(std::vector<double>& param, std::vector<double>& m,
                std::vector<double>& v, const std::vector<double>& grad,
                double lr, double bias1, double bias2) {
  for (std::size_t i = 0; i < param.size(); ++i) {
    m[i] = kAdamBeta1 * m[i] + (1.0 - kAdamBeta1) * grad[i];
    v[i] = kAdamBeta2 * v[i] + (1.0 - kAdamBeta2) * grad[i] * grad[i];
    const double mh = m[i] / bias1;
    const double vh = v[i] / bias2;
    param[i] -= lr * mh / (std::sqrt(vh) + kAdamEps);
  }
}

}  // namespace

double SpikingQNet::td_update(const std::vector<TdSample>& batch,
                              const SpikingQNet& target, Rng& rng,
                              ForwardMode mode) {
  if (batch.empty()) throw UsageError("td_update: empty batch");
  if (target.config_.layer_sizes != config_.layer_sizes) {
    throw UsageError("td_update: target network shape differs");
  }
  const int n_actions = config_.layer_sizes.back();

  Gradients grads;
  grads.w.resize(layers_.size());
  grads.b.resize(layers_.size());
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    grads.w[l].assign(layers_[l].w.size(), 0.0);
    grads.b[l].assign(layers_[l].b.size(), 0.0);
  }

  double loss = 0.0;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  Trace trace;
  for (const TdSample& sample : batch) {
    if (sample.action < 0 || sample.action >= n_actions) {
      throw UsageError("td_update: sample action out of range");
    }
    double y = sample.reward;
    if (!sample.done) {
      if (!sample.next_mask.empty() &&
          static_cast<int>(sample.next_mask.size()) != n_actions) {
        throw UsageError("td_update: next-state mask length != action count");
      }
      const ForwardResult next =
          run_window(target.config_, target.layers_, sample.next_obs,
                     sample.next_latent, rng, mode, nullptr);
      double best = 0.0;
      bool any = false;
      for (int a = 0; a < n_actions; ++a) {
        if (!sample.next_mask.empty() &&
            sample.next_mask[static_cast<std::size_t>(a)] == 0) {
          continue;
        }
        if (!any || next.q[static_cast<std::size_t>(a)] > best) {
          best = next.q[static_cast<std::size_t>(a)];
          any = true;
        }
      }
      if (!any) throw UsageError("td_update: next-state mask excludes every action");
      y += config_.gamma * best;
    }

    const ForwardResult now =
        run_window(config_, layers_, sample.obs, sample.latent, rng, mode,
                   &trace);
    const double delta = now.q[static_cast<std::size_t>(sample.action)] - y;
    // Huber loss: quadratic near zero, linear tails, so one bad target
    // cannot blow up the step.
    const double clipped = std::clamp(delta, -1.0, 1.0);
    loss += inv_b * (std::abs(delta) <= 1.0 ? 0.5 * delta * delta
                                            : std::abs(delta) - 0.5);
    backward_window(config_, layers_, trace, sample.action, clipped * inv_b,
                    mode, &grads);
  }

  ++adam_step_;
  const double bias1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(adam_step_));
  const double bias2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(adam_step_));
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    adam_apply(layers_[l].w, layers_[l].m_w, layers_[l].v_w, grads.w[l],
               config_.lr, bias1, bias2);
    adam_apply(layers_[l].b, layers_[l].m_b, layers_[l].v_b, grads.b[l],
               config_.lr, bias1, bias2);
  }
  return loss;
}

std::vector<double> SpikingQNet::serialize() const {
  std::vector<double> blob;
  for (const Layer& layer : layers_) {
    blob.insert(blob.end(), layer.w.begin(), layer.w.end());
    blob.insert(blob.end(), layer.b.begin(), layer.b.end());
    blob.insert(blob.end(), layer.m_w.begin(), layer.m_w.end());
    blob.insert(blob.end(), layer.v_w.begin(), layer.v_w.end());
    blob.insert(blob.end(), layer.m_b.begin(), layer.m_b.end());
    blob.insert(blob.end(), layer.v_b.begin(), layer.v_b.end());
  }
  blob.push_back(static_cast<double>(adam_step_));
  return blob;
}

SpikingQNet SpikingQNet::deserialize(const NetConfig& config,
                                     const std::vector<double>& blob) {
  Rng dummy(0);
  SpikingQNet net = init(config, dummy);
  std::size_t pos = 0;
  const auto take = [&](std::vector<double>& dst) {
    if (pos + dst.size() > blob.size()) {
      throw InputError("network blob is shorter than the configured shape");
    }
    std::copy(blob.begin() + static_cast<std::ptrdiff_t>(pos),
              blob.begin() + static_cast<std::ptrdiff_t>(pos + dst.size()),
              dst.begin());
    pos += dst.size();
  };
  for (Layer& layer : net.layers_) {
    take(layer.w);
    take(layer.b);
    take(layer.m_w);
    take(layer.v_w);
    take(layer.m_b);
    take(layer.v_b);
  }
  if (pos + 1 != blob.size()) {
    throw InputError("network blob does not match the configured shape");
  }
  net.adam_step_ = static_cast<std::uint64_t>(blob[pos]);
  return net;
}

double spike_entropy(const std::vector<std::uint32_t>& counts) {
  double total = 0.0;
  for (std::uint32_t c : counts) total += c;
  if (total <= 0.0) return 0.0;
  double h = 0.0;
  for (std::uint32_t c : counts) {
    if (c == 0) continue;
    const double p = c / total;
    h -= p * std::log(p);
  }
  return h;
}

}  // namespace qnmarl::snn
