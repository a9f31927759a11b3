#include "qnmarl/marl.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <string>
#include <utility>

namespace qnmarl::marl {

namespace {

constexpr std::size_t kPatchOffset = 11;  // depth 6 + temp 1 + prox 1 + pos 3

// Patch occupancy code at a relative offset, read from a feature vector.
// Offsets beyond the sensor radius are unknown; report Free (permissive).
int patch_code(std::span<const double> features, int radius, int dx, int dy,
               int dz) {
  if (std::abs(dx) > radius || std::abs(dy) > radius || std::abs(dz) > radius) {
    return static_cast<int>(env::Cell::Free);
  }
  const int w = 2 * radius + 1;
  const std::size_t idx =
      kPatchOffset + static_cast<std::size_t>((dz + radius) * w * w +
                                              (dy + radius) * w + (dx + radius));
  return static_cast<int>(std::llround(features[idx] * 3.0));
}

bool visibly_near_nofly(std::span<const double> features, int radius, int dx,
                        int dy, int dz) {
  if (patch_code(features, radius, dx, dy, dz) ==
      static_cast<int>(env::Cell::Nofly)) {
    return true;
  }
  for (int ez = -1; ez <= 1; ++ez) {
    for (int ey = -1; ey <= 1; ++ey) {
      for (int ex = -1; ex <= 1; ++ex) {
        if (patch_code(features, radius, dx + ex, dy + ey, dz + ez) ==
            static_cast<int>(env::Cell::Nofly)) {
          return true;
        }
      }
    }
  }
  return false;
}

std::vector<float> to_frame(const std::vector<double>& features) {
  std::vector<float> frame(features.size());
  for (std::size_t i = 0; i < features.size(); ++i) {
    frame[i] = static_cast<float>(features[i]);
  }
  return frame;
}

double finite_or_throw(double x, const char* what) {
  if (!std::isfinite(x)) {
    throw TrainingError(std::string(what) + " is not finite");
  }
  return x;
}

}  // namespace

void TrainConfig::validate() const {
  if (episodes < 1) throw ConfigError("train: episodes must be at least 1");
  if (batch < 1) throw ConfigError("train: batch must be at least 1");
  if (lambda_kl < 0.0 || !std::isfinite(lambda_kl)) {
    throw ConfigError("train: lambda_kl must be finite and non-negative");
  }
  if (beta_spike < 0.0 || !std::isfinite(beta_spike)) {
    throw ConfigError("train: beta_spike must be finite and non-negative");
  }
  if (!(delta_safety > 0.0 && delta_safety < 1.0)) {
    throw ConfigError("train: delta_safety must lie in (0, 1)");
  }
  if (hinge_rho < 0.0 || !std::isfinite(hinge_rho)) {
    throw ConfigError("train: hinge_rho must be finite and non-negative");
  }
  if (!(epsilon_start >= 0.0 && epsilon_start <= 1.0) ||
      !(epsilon_end >= 0.0 && epsilon_end <= 1.0) ||
      epsilon_end > epsilon_start) {
    throw ConfigError(
        "train: epsilon schedule needs 0 <= epsilon_end <= epsilon_start <= 1");
  }
  if (epsilon_decay_episodes < 1) {
    throw ConfigError("train: epsilon_decay_episodes must be at least 1");
  }
  if (eval_every < 1) throw ConfigError("train: eval_every must be at least 1");
  if (eval_episodes < 0) {
    throw ConfigError("train: eval_episodes must be non-negative");
  }
  if (target_sync_every < 1) {
    throw ConfigError("train: target_sync_every must be at least 1");
  }
  if (history_window < 1) {
    throw ConfigError("train: history_window must be at least 1");
  }
  if (replay_capacity < 1) {
    throw ConfigError("train: replay_capacity must be at least 1");
  }
  if (hidden_size < 8 || hidden_size % 8 != 0) {
    throw ConfigError("train: hidden_size must be a positive multiple of 8");
  }
}

double epsilon_at(const TrainConfig& config, int episode) {
  if (episode < 1) throw UsageError("epsilon_at: episodes are 1-based");
  if (episode >= config.epsilon_decay_episodes ||
      config.epsilon_decay_episodes == 1) {
    return config.epsilon_end;
  }
  const double t = static_cast<double>(episode - 1) /
                   static_cast<double>(config.epsilon_decay_episodes - 1);
  return config.epsilon_start + (config.epsilon_end - config.epsilon_start) * t;
}

void Setup::resolve() {
  if (net.layer_sizes.empty()) {
    const std::size_t f = env::Observation::feature_count(world.sensor_radius);
    net.layer_sizes = {
        static_cast<int>(static_cast<std::size_t>(train.history_window) * f),
        train.hidden_size, env::kActionCount};
  }
}

void Setup::validate() const {
  world.validate();
  policy.validate();
  net.validate();
  train.validate();
  const std::size_t f = env::Observation::feature_count(world.sensor_radius);
  const std::size_t want = static_cast<std::size_t>(train.history_window) * f;
  if (net.layer_sizes.front() != static_cast<int>(want)) {
    throw ConfigError("setup: network input width must equal history_window * "
                      "observation feature count (" +
                      std::to_string(want) + ")");
  }
  if (net.layer_sizes.back() != env::kActionCount) {
    throw ConfigError("setup: network output width must equal the action count");
  }
  if (net.layer_sizes.size() < 3 || net.layer_sizes[1] % 8 != 0) {
    throw ConfigError("setup: the latent cue needs a first hidden layer "
                      "divisible into 8 groups");
  }
}

ReplayBuffer::ReplayBuffer(std::size_t capacity, std::size_t frame_size)
    : capacity_(capacity), frame_size_(frame_size) {
  if (capacity_ == 0) throw UsageError("ReplayBuffer: capacity must be positive");
  if (frame_size_ == 0) {
    throw UsageError("ReplayBuffer: frame size must be positive");
  }
}

void ReplayBuffer::begin_episode() { episode_start_ = next_frame_index_; }

std::uint64_t ReplayBuffer::push_frame(std::span<const double> features) {
  if (features.size() != frame_size_) {
    throw UsageError("ReplayBuffer: frame has wrong feature count");
  }
  std::vector<float> frame(frame_size_);
  for (std::size_t i = 0; i < frame_size_; ++i) {
    frame[i] = static_cast<float>(features[i]);
  }
  frames_.push_back(std::move(frame));
  return next_frame_index_++;
}

void ReplayBuffer::push_transition(Transition t) {
  if (t.frame >= next_frame_index_ || t.next_frame >= next_frame_index_) {
    throw UsageError("ReplayBuffer: transition references an unknown frame");
  }
  if (ring_.size() < capacity_) {
    ring_.push_back(std::move(t));
    cursor_ = ring_.size() % capacity_;
  } else {
    ring_[cursor_] = std::move(t);
    cursor_ = (cursor_ + 1) % capacity_;
  }
  fill_ = ring_.size();
  prune_frames();
}

const Transition& ReplayBuffer::sample(Rng& rng) const {
  if (fill_ == 0) throw UsageError("ReplayBuffer: cannot sample while empty");
  return ring_[static_cast<std::size_t>(rng.next_below(fill_))];
}

std::vector<double> ReplayBuffer::digest(std::uint64_t frame,
                                         std::uint64_t episode_start,
                                         int window) const {
  if (window < 1) throw UsageError("ReplayBuffer: digest window must be >= 1");
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(window) * frame_size_);
  for (int k = window - 1; k >= 0; --k) {
    std::uint64_t idx = frame - std::min<std::uint64_t>(frame, k);
    idx = std::max(idx, episode_start);
    const float* src = frame_ptr(idx);
    for (std::size_t i = 0; i < frame_size_; ++i) {
      out.push_back(static_cast<double>(src[i]));
    }
  }
  return out;
}

const float* ReplayBuffer::frame_ptr(std::uint64_t index) const {
  if (index < frames_base_ || index >= next_frame_index_) {
    throw UsageError("ReplayBuffer: frame index pruned or never stored");
  }
  return frames_[static_cast<std::size_t>(index - frames_base_)].data();
}

void ReplayBuffer::prune_frames() {
  // Everything at or after the oldest live transition's episode start (or the
  // current episode's, for the still-pending step) must stay resident.
  std::uint64_t needed = episode_start_;
  if (fill_ > 0) {
    const Transition& oldest =
        fill_ == capacity_ ? ring_[cursor_] : ring_.front();
    needed = std::min(needed, oldest.episode_start);
  }
  while (frames_base_ < needed && !frames_.empty()) {
    frames_.pop_front();
    ++frames_base_;
  }
}

std::vector<double> stack_digest(const std::deque<std::vector<float>>& window,
                                 std::size_t frame_size, int target_window) {
  if (window.empty()) throw UsageError("stack_digest: window is empty");
  if (target_window < 1) {
    throw UsageError("stack_digest: target window must be >= 1");
  }
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(target_window) * frame_size);
  for (int k = target_window - 1; k >= 0; --k) {
    int idx = static_cast<int>(window.size()) - 1 - k;
    if (idx < 0) idx = 0;
    const std::vector<float>& frame = window[static_cast<std::size_t>(idx)];
    if (frame.size() != frame_size) {
      throw UsageError("stack_digest: frame has wrong feature count");
    }
    for (float v : frame) out.push_back(static_cast<double>(v));
  }
  return out;
}

std::vector<std::uint8_t> obs_action_mask(std::span<const double> features,
                                          int radius) {
  if (features.size() != env::Observation::feature_count(radius)) {
    throw UsageError("obs_action_mask: feature vector does not match radius");
  }
  std::vector<std::uint8_t> mask(env::kActionCount, 1);
  static constexpr int kDeltas[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0},
                                        {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
  for (int a = 0; a < 6; ++a) {
    const int* d = kDeltas[a];
    if (visibly_near_nofly(features, radius, d[0], d[1], d[2])) {
      mask[static_cast<std::size_t>(env::kMovePx) + a] = 0;
    }
  }
  return mask;
}

int observation_bucket(std::span<const double> features) {
  std::uint64_t h = 0x243F6A8885A308D3ULL;
  for (double f : features) {
    int q = static_cast<int>(f * 8.0);
    q = std::clamp(q, 0, 7);
    h ^= static_cast<std::uint64_t>(q) + 0x9E3779B97F4A7C15ULL + (h << 6) +
         (h >> 2);
  }
  return static_cast<int>(h & 15);
}

HybridDecision hybrid_act(const qaoa::QaoaPolicy& policy,
                          const snn::SpikingQNet& net,
                          const env::Observation& obs,
                          std::span<const double> digest, double epsilon,
                          Rng& rng) {
  HybridDecision d;
  qaoa::EncodedObservation enc = qaoa::encode_observation(policy, obs);
  const qsim::StateVector state =
      qaoa::build_state(policy, enc.angles, enc.cost);
  d.exact_plan_dist = qaoa::plan_distribution(state);
  d.latent = qaoa::sample_latent(policy, state, rng);
  d.prior = qaoa::prior_from_observation(obs).probs;
  const int shift = policy.config.n_qubits - 3;
  for (int k = 0; k < qaoa::kPlanCount; ++k) {
    d.plan_cost[static_cast<std::size_t>(k)] =
        enc.cost.values[static_cast<std::size_t>(k) << shift];
    d.plan_unsafe[static_cast<std::size_t>(k)] = qaoa::plan_unsafe(k, obs);
  }
  d.angles = std::move(enc.angles);

  snn::ForwardResult fwd =
      net.forward(digest, d.latent.plan.plan_id, rng);
  if (fwd.q.size() != static_cast<std::size_t>(env::kActionCount)) {
    throw UsageError("hybrid_act: controller output width must be 9 actions");
  }
  d.q = std::move(fwd.q);
  d.spike_counts = std::move(fwd.spike_counts);
  d.total_spikes = fwd.total_spikes;

  const std::size_t f = env::Observation::feature_count(obs.radius);
  if (digest.size() < f) {
    throw UsageError("hybrid_act: digest shorter than one observation frame");
  }
  d.mask = obs_action_mask(digest.last(f), obs.radius);

  int best = -1;
  for (int a = 0; a < env::kActionCount; ++a) {
    if (!d.mask[static_cast<std::size_t>(a)]) continue;
    if (best < 0 || d.q[static_cast<std::size_t>(a)] >
                        d.q[static_cast<std::size_t>(best)]) {
      best = a;
    }
  }
  d.greedy_action = best;
  // Exploration draws a uniform action over all nine, mask included: testing
  // locally forbidden proposals is what teaches the controller their cost,
  // and the safety filter keeps them from executing.
  d.explored = rng.next_double() < epsilon;
  d.action = d.explored ? static_cast<int>(rng.next_below(env::kActionCount))
                        : best;
  return d;
}

FilterOutcome safety_filter(const env::WorldState& world, int agent_id,
                            int proposed_action) {
  const env::SafetyVerdict verdict =
      env::check_safety(world, agent_id, proposed_action);
  if (!verdict.violated) {
    return {proposed_action, false, env::SafetyVerdict::kNone};
  }
  // Hover is the fallback. When hover itself is predicted unsafe there is
  // nothing safer to substitute, so it is kept and the flag stands.
  return {env::kHover, true, verdict.reason};
}

double hybrid_loss(const EpisodeRecord& record, const TrainConfig& config) {
  return record.mean_reward - config.lambda_kl * record.kl_nats -
         config.beta_spike * record.mean_spikes;
}

EpisodeRecord run_episode(const Setup& setup, std::vector<AgentRuntime>& agents,
                          const EpisodeOptions& options,
                          env::WorldState* world_out) {
  const env::WorldConfig& wc = setup.world;
  const TrainConfig& tc = setup.train;
  const int n = wc.n_agents;
  if (agents.size() != static_cast<std::size_t>(n)) {
    throw UsageError("run_episode: agent count does not match the world config");
  }
  const std::size_t frame_size =
      env::Observation::feature_count(wc.sensor_radius);
  const int window = tc.history_window;

  // A zero-step budget yields an empty record before any world is built
  // (the world generator itself rejects such configs).
  if (wc.max_steps <= 0) {
    EpisodeRecord empty;
    empty.episode = options.episode;
    empty.paths.resize(static_cast<std::size_t>(n));
    empty.plans.resize(static_cast<std::size_t>(n));
    empty.violation_steps.resize(static_cast<std::size_t>(n));
    return empty;
  }

  Rng world_rng(options.world_stream);
  env::WorldState world = env::init_world(wc, world_rng);

  std::vector<Rng> act_rng;
  act_rng.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    act_rng.push_back(
        Rng::derive(options.act_stream, {static_cast<std::uint64_t>(i)}));
  }

  EpisodeRecord rec;
  rec.episode = options.episode;
  rec.paths.resize(static_cast<std::size_t>(n));
  rec.plans.resize(static_cast<std::size_t>(n));
  rec.violation_steps.resize(static_cast<std::size_t>(n));

  std::vector<std::deque<std::vector<float>>> windows(
      static_cast<std::size_t>(n));
  std::vector<Transition> pending(static_cast<std::size_t>(n));
  std::vector<bool> has_pending(static_cast<std::size_t>(n), false);
  std::vector<bool> step_flag(static_cast<std::size_t>(n), false);
  std::vector<std::vector<std::uint32_t>> out_counts(
      static_cast<std::size_t>(n),
      std::vector<std::uint32_t>(env::kActionCount, 0));
  std::vector<double> reward_sum(static_cast<std::size_t>(n), 0.0);

  if (options.store_transitions) {
    for (auto& agent : agents) agent.buffer.begin_episode();
  }
  if (options.record_trace) {
    for (int i = 0; i < n; ++i) {
      const env::Vec3i& p = world.agents[static_cast<std::size_t>(i)].pos;
      rec.paths[static_cast<std::size_t>(i)].push_back({p.x, p.y, p.z});
    }
  }

  double kl_sum = 0.0;
  std::uint64_t spike_sum = 0;
  std::array<double, qaoa::kPlanCount> plan_dist_sum{};
  int decisions = 0;

  std::vector<int> actions(static_cast<std::size_t>(n), env::kHover);
  std::vector<bool> pre_active(static_cast<std::size_t>(n), false);

  while (world.clock < wc.max_steps && !world.all_landed()) {
    std::fill(actions.begin(), actions.end(), env::kHover);
    for (int i = 0; i < n; ++i) {
      const std::size_t ui = static_cast<std::size_t>(i);
      pre_active[ui] = !world.agents[ui].landed;
      step_flag[ui] = false;
      if (!pre_active[ui]) continue;
      ++rec.active_agent_steps;

      const env::Observation obs = env::observe(world, i);
      const std::vector<double> feats = obs.normalized_features();
      windows[ui].push_back(to_frame(feats));
      while (static_cast<int>(windows[ui].size()) > window) {
        windows[ui].pop_front();
      }
      std::uint64_t frame_idx = 0;
      if (options.store_transitions) {
        frame_idx = agents[ui].buffer.push_frame(feats);
      }
      const std::vector<double> digest =
          stack_digest(windows[ui], frame_size, window);

      AgentRuntime& agent = agents[ui];
      HybridDecision dec = hybrid_act(agent.policy, agent.net, obs, digest,
                                      options.epsilon, act_rng[ui]);

      {
        std::vector<double> p(dec.exact_plan_dist.begin(),
                              dec.exact_plan_dist.end());
        std::vector<double> q(dec.prior.begin(), dec.prior.end());
        kl_sum += qaoa::kl_to_prior(p, q);
      }
      spike_sum += dec.total_spikes;
      ++decisions;
      for (int k = 0; k < qaoa::kPlanCount; ++k) {
        plan_dist_sum[static_cast<std::size_t>(k)] +=
            dec.exact_plan_dist[static_cast<std::size_t>(k)];
      }
      const std::size_t out_base = dec.spike_counts.size() -
                                   static_cast<std::size_t>(env::kActionCount);
      for (int a = 0; a < env::kActionCount; ++a) {
        out_counts[ui][static_cast<std::size_t>(a)] +=
            dec.spike_counts[out_base + static_cast<std::size_t>(a)];
      }

      const FilterOutcome filter = safety_filter(world, i, dec.action);
      if (filter.flagged) {
        ++rec.violations;
        step_flag[ui] = true;
        if (options.record_trace) {
          rec.violation_steps[ui].push_back(world.clock);
        }
      }
      actions[ui] = filter.action;

      if (options.record_trace) {
        rec.plans[ui].push_back(dec.latent.plan.plan_id);
        rec.mi_pairs.push_back(
            {static_cast<std::uint8_t>(observation_bucket(feats)),
             static_cast<std::uint8_t>(dec.action)});
      }

      if (options.store_transitions) {
        if (has_pending[ui]) {
          pending[ui].next_frame = frame_idx;
          pending[ui].next_latent = dec.latent.plan.plan_id;
          pending[ui].done = false;
          agent.buffer.push_transition(std::move(pending[ui]));
        }
        Transition t;
        t.frame = frame_idx;
        t.episode_start = agent.buffer.episode_start();
        t.latent = dec.latent.plan.plan_id;
        t.action = dec.action;
        t.violation = filter.flagged;
        t.angles = std::move(dec.angles);
        t.plan_cost = dec.plan_cost;
        t.plan_unsafe = dec.plan_unsafe;
        t.prior = dec.prior;
        pending[ui] = std::move(t);
        has_pending[ui] = true;
      }
    }

    const env::StepOutcome outcome = env::step_world(world, actions);

    for (int i = 0; i < n; ++i) {
      const std::size_t ui = static_cast<std::size_t>(i);
      if (!pre_active[ui]) continue;
      const double env_r = outcome.rewards[ui];
      reward_sum[ui] += env_r;
      if (options.store_transitions && has_pending[ui]) {
        // A filtered proposal never executed, so the environment could not
        // charge it; the stored reward carries the penalty it would have
        // earned. Executed violations (unsafe hover) are already charged.
        const bool add_penalty =
            step_flag[ui] && !outcome.verdicts[ui].violated;
        pending[ui].reward = static_cast<float>(env_r - (add_penalty ? 1.0 : 0.0));
      }
      if (options.record_trace) {
        const env::Vec3i& p = world.agents[ui].pos;
        rec.paths[ui].push_back({p.x, p.y, p.z});
      }
      if (options.store_transitions && has_pending[ui] &&
          world.agents[ui].landed) {
        const std::vector<double> closing =
            env::observe(world, i).normalized_features();
        const std::uint64_t cidx = agents[ui].buffer.push_frame(closing);
        pending[ui].next_frame = cidx;
        pending[ui].next_latent = -1;
        pending[ui].done = true;  // landing is the absorbing terminal
        agents[ui].buffer.push_transition(std::move(pending[ui]));
        has_pending[ui] = false;
      }
    }
  }

  if (options.store_transitions) {
    for (int i = 0; i < n; ++i) {
      const std::size_t ui = static_cast<std::size_t>(i);
      if (!has_pending[ui]) continue;
      const std::vector<double> closing =
          env::observe(world, i).normalized_features();
      const std::uint64_t cidx = agents[ui].buffer.push_frame(closing);
      pending[ui].next_frame = cidx;
      pending[ui].next_latent = -1;
      pending[ui].done = false;  // step-budget end still bootstraps
      agents[ui].buffer.push_transition(std::move(pending[ui]));
      has_pending[ui] = false;
    }
  }

  rec.steps = world.clock;
  for (int i = 0; i < n; ++i) {
    rec.mean_reward += reward_sum[static_cast<std::size_t>(i)];
    rec.spike_entropy_nats +=
        snn::spike_entropy(out_counts[static_cast<std::size_t>(i)]);
  }
  rec.mean_reward /= n;
  rec.spike_entropy_nats /= n;
  rec.violation_rate =
      rec.active_agent_steps > 0
          ? static_cast<double>(rec.violations) / rec.active_agent_steps
          : 0.0;
  if (decisions > 0) {
    rec.kl_nats = kl_sum / decisions;
    rec.mean_spikes = static_cast<double>(spike_sum) / decisions;
    for (int k = 0; k < qaoa::kPlanCount; ++k) {
      rec.mean_plan_dist[static_cast<std::size_t>(k)] =
          plan_dist_sum[static_cast<std::size_t>(k)] / decisions;
    }
  }
  rec.coverage = env::coverage_stats(world).fraction;
  rec.hybrid_loss = hybrid_loss(rec, tc);

  if (world_out != nullptr) *world_out = std::move(world);
  return rec;
}

namespace {

// One Adam step of the spiking controller plus one shift-rule step of the
// quantum policy, from the agent's own buffer. Returns {td loss, quantum
// objective}, both with the hinge term folded in.
std::pair<double, double> update_agent(AgentRuntime& agent, const Setup& setup,
                                       double hinge, Rng& rng) {
  const TrainConfig& tc = setup.train;
  const std::size_t frame_size =
      env::Observation::feature_count(setup.world.sensor_radius);
  const std::size_t batch =
      std::min<std::size_t>(static_cast<std::size_t>(tc.batch),
                            agent.buffer.size());

  std::vector<const Transition*> picked;
  picked.reserve(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    picked.push_back(&agent.buffer.sample(rng));
  }

  std::vector<std::vector<double>> curs(batch), nexts(batch);
  std::vector<std::vector<std::uint8_t>> masks(batch);
  std::vector<snn::TdSample> samples(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const Transition& t = *picked[b];
    curs[b] = agent.buffer.digest(t.frame, t.episode_start, tc.history_window);
    nexts[b] =
        agent.buffer.digest(t.next_frame, t.episode_start, tc.history_window);
    masks[b] = obs_action_mask(
        std::span<const double>(nexts[b]).last(frame_size),
        setup.world.sensor_radius);
    samples[b].obs = curs[b];
    samples[b].next_obs = nexts[b];
    samples[b].latent = t.latent;
    samples[b].next_latent = t.next_latent;
    samples[b].action = t.action;
    samples[b].reward =
        static_cast<double>(t.reward) - hinge * (t.violation ? 1.0 : 0.0);
    samples[b].done = t.done;
    samples[b].next_mask = masks[b];
  }
  const double td_loss =
      agent.net.td_update(samples, agent.target, rng) + hinge;
  finite_or_throw(td_loss, "td loss");

  // Quantum policy step: the gradient of E[cost] + lambda*KL(plan || prior)
  // equals the shift-rule gradient of the effective diagonal observable
  // cost_z + lambda*(ln(P_plan/q_plan) + 1) (+ the hinge charge on unsafe
  // plans), averaged here over a few conditioning observations.
  const int nq = agent.policy.config.n_qubits;
  const int shift = nq - 3;
  const std::size_t dim = std::size_t{1} << nq;
  const std::size_t k_obs = std::min<std::size_t>(4, batch);
  std::vector<double> grad_sum(
      static_cast<std::size_t>(2 * agent.policy.config.depth), 0.0);
  double qaoa_loss = 0.0;
  for (std::size_t k = 0; k < k_obs; ++k) {
    const Transition& t = *picked[k];
    qsim::CostTable cost;
    cost.values.resize(dim);
    for (std::size_t z = 0; z < dim; ++z) {
      cost.values[z] = t.plan_cost[z >> shift];
    }
    const qsim::StateVector state =
        qaoa::build_state(agent.policy, t.angles, cost);
    const std::array<double, qaoa::kPlanCount> dist =
        qaoa::plan_distribution(state);

    std::vector<double> observable(dim);
    double expected_cost = 0.0;
    for (std::size_t z = 0; z < dim; ++z) {
      const std::size_t plan = z >> shift;
      const double p = std::max(dist[plan], 1e-12);
      const double q = std::max(t.prior[plan], 1e-9);
      observable[z] = cost.values[z] +
                      tc.lambda_kl * (std::log(p / q) + 1.0) +
                      hinge * t.plan_unsafe[plan];
    }
    for (int plan = 0; plan < qaoa::kPlanCount; ++plan) {
      expected_cost += dist[static_cast<std::size_t>(plan)] *
                       t.plan_cost[static_cast<std::size_t>(plan)];
    }
    const std::vector<double> g =
        qaoa::parameter_shift_grad(agent.policy, t.angles, cost, observable);
    for (std::size_t j = 0; j < g.size(); ++j) grad_sum[j] += g[j];

    std::vector<double> p(dist.begin(), dist.end());
    std::vector<double> q(t.prior.begin(), t.prior.end());
    qaoa_loss += expected_cost + tc.lambda_kl * qaoa::kl_to_prior(p, q) + hinge;
  }
  if (k_obs > 0) {
    for (double& g : grad_sum) {
      g /= static_cast<double>(k_obs);
      finite_or_throw(g, "quantum policy gradient");
    }
    qaoa::update_params(agent.policy, grad_sum);
    qaoa_loss /= static_cast<double>(k_obs);
  }
  finite_or_throw(qaoa_loss, "quantum policy loss");
  return {td_loss, qaoa_loss};
}

WorldSnapshot snapshot_world(const Setup& setup, std::uint64_t world_stream) {
  Rng rng(world_stream);
  const env::WorldState w = env::init_world(setup.world, rng);
  WorldSnapshot snap;
  snap.config = w.config;
  snap.world_seed = w.world_seed;
  snap.grid.reserve(w.grid.size());
  for (env::Cell c : w.grid) {
    snap.grid.push_back(static_cast<std::uint8_t>(c));
  }
  for (const env::AgentState& a : w.agents) {
    snap.spawns.push_back({a.pos.x, a.pos.y, a.pos.z});
  }
  return snap;
}

}  // namespace

RunResult train(const Setup& setup_in,
                const std::function<void(const EpisodeRecord&)>& on_episode,
                const std::function<void(const EvalSnapshot&)>& on_eval) {
  Setup setup = setup_in;
  setup.resolve();
  setup.validate();
  const TrainConfig& tc = setup.train;
  const int n = setup.world.n_agents;
  const std::uint64_t master = tc.master_seed;
  const std::size_t frame_size =
      env::Observation::feature_count(setup.world.sensor_radius);

  std::vector<AgentRuntime> agents;
  agents.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Rng init_rng = Rng::derive(master, {kStreamInit, static_cast<std::uint64_t>(i)});
    qaoa::QaoaPolicy policy = qaoa::QaoaPolicy::init(setup.policy, init_rng);
    snn::SpikingQNet net = snn::SpikingQNet::init(setup.net, init_rng);
    snn::SpikingQNet target = net;
    agents.push_back(AgentRuntime{
        std::move(policy), std::move(net), std::move(target),
        ReplayBuffer(static_cast<std::size_t>(tc.replay_capacity), frame_size)});
  }

  RunResult result;
  result.heat_x = setup.world.dims.x;
  result.heat_y = setup.world.dims.y;
  result.visit_totals.assign(
      static_cast<std::size_t>(setup.world.dims.x) *
          static_cast<std::size_t>(setup.world.dims.y),
      0);

  for (int ep = 1; ep <= tc.episodes; ++ep) {
    EpisodeOptions opt;
    opt.episode = ep;
    opt.epsilon = epsilon_at(tc, ep);
    opt.world_stream =
        Rng::derive(master, {kStreamWorld, static_cast<std::uint64_t>(ep)}).state();
    opt.act_stream =
        Rng::derive(master, {kStreamAgentAct, static_cast<std::uint64_t>(ep)})
            .state();
    opt.record_trace = true;
    opt.store_transitions = true;

    const auto t0 = std::chrono::steady_clock::now();
    env::WorldState final_world;
    EpisodeRecord rec = run_episode(setup, agents, opt, &final_world);
    if (ep == 1) {
      result.first_world = snapshot_world(setup, opt.world_stream);
    }
    for (std::size_t c = 0; c < result.visit_totals.size(); ++c) {
      result.visit_totals[c] += final_world.visit_counts[c];
    }

    const double hinge =
        std::max(0.0, rec.violation_rate - tc.delta_safety) * tc.hinge_rho;
    rec.hinge_penalty = hinge;

    double td_sum = 0.0, qaoa_sum = 0.0;
    int updated = 0;
    try {
      for (int i = 0; i < n; ++i) {
        AgentRuntime& agent = agents[static_cast<std::size_t>(i)];
        if (agent.buffer.size() == 0) continue;
        Rng train_rng = Rng::derive(
            master, {kStreamAgentTrain, static_cast<std::uint64_t>(ep),
                     static_cast<std::uint64_t>(i)});
        const auto [td, ql] = update_agent(agent, setup, hinge, train_rng);
        td_sum += td;
        qaoa_sum += ql;
        ++updated;
      }
    } catch (const TrainingError& e) {
      result.aborted = true;
      result.abort_reason = e.what();
    }
    if (updated > 0) {
      rec.td_loss = td_sum / updated;
      rec.qaoa_loss = qaoa_sum / updated;
    }
    if (tc.measure_wall_time) {
      rec.wall_ms = std::chrono::duration<double, std::milli>(
                        std::chrono::steady_clock::now() - t0)
                        .count();
    }

    result.episodes.push_back(std::move(rec));
    if (on_episode) on_episode(result.episodes.back());
    if (result.aborted) break;

    if (ep % tc.target_sync_every == 0) {
      for (auto& agent : agents) agent.target = agent.net;
    }

    if (ep % tc.eval_every == 0 && tc.eval_episodes > 0) {
      EvalSnapshot snap;
      snap.after_episode = ep;
      for (int k = 0; k < tc.eval_episodes; ++k) {
        EpisodeOptions ev;
        ev.episode = ep;
        ev.epsilon = 0.0;
        ev.world_stream =
            Rng::derive(master, {kStreamEval, static_cast<std::uint64_t>(ep),
                                 static_cast<std::uint64_t>(k)})
                .state();
        ev.act_stream =
            Rng::derive(master, {kStreamEval, static_cast<std::uint64_t>(ep),
                                 static_cast<std::uint64_t>(k), 1})
                .state();
        ev.record_trace = false;
        ev.store_transitions = false;
        const EpisodeRecord er = run_episode(setup, agents, ev, nullptr);
        snap.mean_reward += er.mean_reward;
        snap.violation_rate += er.violation_rate;
        snap.coverage += er.coverage;
      }
      snap.mean_reward /= tc.eval_episodes;
      snap.violation_rate /= tc.eval_episodes;
      snap.coverage /= tc.eval_episodes;
      result.evals.push_back(snap);
      if (on_eval) on_eval(snap);
    }
  }

  result.checkpoint.setup = setup;
  result.checkpoint.episodes_completed = static_cast<int>(result.episodes.size());
  result.checkpoint.master_seed = master;
  result.checkpoint.evals = result.evals;
  for (const AgentRuntime& agent : agents) {
    result.checkpoint.policies.push_back(agent.policy);
    result.checkpoint.net_blobs.push_back(agent.net.serialize());
  }
  return result;
}

EpisodeRecord replay_episode(const Checkpoint& checkpoint, int episode) {
  const Setup& setup = checkpoint.setup;
  if (episode < 1 || episode > setup.train.episodes) {
    throw UsageError("replay_episode: episode index out of the trained range");
  }
  const int n = setup.world.n_agents;
  if (checkpoint.policies.size() != static_cast<std::size_t>(n) ||
      checkpoint.net_blobs.size() != static_cast<std::size_t>(n)) {
    throw InputError("replay_episode: checkpoint does not hold one policy and "
                     "one network per agent");
  }
  const std::size_t frame_size =
      env::Observation::feature_count(setup.world.sensor_radius);
  std::vector<AgentRuntime> agents;
  agents.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const std::size_t ui = static_cast<std::size_t>(i);
    snn::SpikingQNet net =
        snn::SpikingQNet::deserialize(setup.net, checkpoint.net_blobs[ui]);
    snn::SpikingQNet target = net;
    agents.push_back(AgentRuntime{checkpoint.policies[ui], std::move(net),
                                  std::move(target),
                                  ReplayBuffer(1, frame_size)});
  }
  EpisodeOptions opt;
  opt.episode = episode;
  opt.epsilon = 0.0;
  opt.world_stream = Rng::derive(checkpoint.master_seed,
                                 {kStreamWorld, static_cast<std::uint64_t>(episode)})
                         .state();
  opt.act_stream = Rng::derive(checkpoint.master_seed,
                               {kStreamDemo, static_cast<std::uint64_t>(episode)})
                       .state();
  opt.record_trace = true;
  opt.store_transitions = false;
  return run_episode(setup, agents, opt, nullptr);
}

}  // namespace qnmarl::marl
