#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "qnmarl/env.hpp"
#include "qnmarl/qaoa.hpp"
#include "qnmarl/snn.hpp"

namespace qnmarl::marl {

struct TrainConfig {
  int episodes = 200;
  int batch = 32;
  double lambda_kl = 0.1;    // weight of the plan-distribution KL penalty
  double beta_spike = 0.05;  // weight of the spike-count penalty
  double delta_safety = 0.02;  // violation-rate budget per agent step
  double hinge_rho = 10.0;     // penalty slope once the budget is exceeded
  double epsilon_start = 1.0;
  double epsilon_end = 0.05;
  int epsilon_decay_episodes = 150;  // linear decay horizon, then flat
  int eval_every = 10;
  int eval_episodes = 5;
  int target_sync_every = 10;  // episodes between target-network copies
  int history_window = 4;      // observations stacked into one digest
  int replay_capacity = 10000;
  int hidden_size = 128;
  std::uint64_t master_seed = 1;
  bool measure_wall_time = false;  // off by default: keeps runs byte-identical

  void validate() const;  // throws ConfigError
};

// Exploration rate for a 1-based episode index.
double epsilon_at(const TrainConfig& config, int episode);

// All four module configs of one run. `resolve` fills the network's input
// and output widths from the world geometry when they are left empty.
struct Setup {
  env::WorldConfig world;
  qaoa::PolicyConfig policy;
  snn::NetConfig net;
  TrainConfig train;

  void resolve();
  void validate() const;
};

// One stored step of one agent. Observation digests are reconstructed from
// the frame store on demand; the quantum conditioning data (input angles and
// per-plan cost/safety/prior tables) is captured at decision time so policy
// updates never need the world again.
struct Transition {
  std::uint64_t frame = 0;       // pre-action frame, global index
  std::uint64_t next_frame = 0;  // post-action frame, global index
  std::uint64_t episode_start = 0;
  int latent = 0;
  int next_latent = -1;  // latent chosen at the next step, -1 at terminals
  int action = 0;        // the action the policy proposed (pre-filter)
  float reward = 0.0f;   // env reward plus the filtered-violation penalty
  bool violation = false;  // safety filter flagged the proposal
  bool done = false;       // absorbing terminal (agent landed)
  std::vector<double> angles;
  std::array<double, qaoa::kPlanCount> plan_cost{};
  std::array<double, qaoa::kPlanCount> plan_unsafe{};
  std::array<double, qaoa::kPlanCount> prior{};
};

// Per-agent ring buffer of transitions plus the frame store backing their
// observation digests. Frames older than every live transition's episode
// start are pruned, so memory stays bounded by the capacity.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity, std::size_t frame_size);

  void begin_episode();
  std::uint64_t push_frame(std::span<const double> features);
  void push_transition(Transition t);

  std::size_t size() const { return fill_; }
  std::size_t capacity() const { return capacity_; }
  std::uint64_t frame_count() const { return next_frame_index_; }
  std::uint64_t episode_start() const { return episode_start_; }
  std::size_t frame_size() const { return frame_size_; }

  // Uniform draw over the filled region.
  const Transition& sample(Rng& rng) const;

  // Live transitions in ring order (oldest position not normalized).
  const std::vector<Transition>& transitions() const { return ring_; }

  // Stacked digest of `window` frames ending at `frame`, front-padded by
  // repeating the episode's first frame.
  std::vector<double> digest(std::uint64_t frame, std::uint64_t episode_start,
                             int window) const;

 private:
  const float* frame_ptr(std::uint64_t index) const;
  void prune_frames();

  std::size_t capacity_;
  std::size_t frame_size_;
  std::vector<Transition> ring_;
  std::size_t cursor_ = 0;
  std::size_t fill_ = 0;
  std::deque<std::vector<float>> frames_;
  std::uint64_t frames_base_ = 0;
  std::uint64_t next_frame_index_ = 0;
  std::uint64_t episode_start_ = 0;
};

// Builds an observation digest from an explicit window of recent frames
// (newest last); pads by repeating the oldest entry. Used for live acting so
// the network sees bit-identical inputs at act and replay time (frames are
// stored in float32).
std::vector<double> stack_digest(const std::deque<std::vector<float>>& window,
                                 std::size_t frame_size, int target_window);

// Action mask derived from the agent's own sensor patch: unit moves whose
// destination is a visible no-fly voxel, or visibly adjacent to one, are
// blocked. Hover, land, and evade are always allowed, so the mask is never
// empty. Cells beyond the sensor radius are unknown and treated permissive.
std::vector<std::uint8_t> obs_action_mask(std::span<const double> features,
                                          int radius);

// 16-bucket observation hash for the mutual-information diagnostic: each
// feature is quantized to 8 levels and mixed into a 64-bit accumulator.
int observation_bucket(std::span<const double> features);

// Everything one decision produced, kept for explainability export.
struct HybridDecision {
  qaoa::LatentSample latent;  // sampled plan + empirical shot distribution
  std::array<double, qaoa::kPlanCount> exact_plan_dist{};
  std::array<double, qaoa::kPlanCount> prior{};
  std::array<double, qaoa::kPlanCount> plan_cost{};
  std::array<double, qaoa::kPlanCount> plan_unsafe{};
  std::vector<double> angles;
  std::vector<double> q;                 // readout conditioned on the latent
  std::vector<std::uint8_t> mask;        // observation-derived action mask
  std::vector<std::uint32_t> spike_counts;
  std::uint64_t total_spikes = 0;
  int greedy_action = 0;
  int action = 0;  // proposed action after the exploration draw
  bool explored = false;
};

// Composes the quantum plan sampler with the spiking controller: draws the
// latent plan from the observation-conditioned circuit, evaluates the
// controller conditioned on it, and picks the greedy masked action or, with
// probability epsilon, a uniform action over all nine (exploration is
// deliberately allowed to propose unsafe actions; the safety filter catches
// them and the attempt is what the violation metric counts).
HybridDecision hybrid_act(const qaoa::QaoaPolicy& policy,
                          const snn::SpikingQNet& net,
                          const env::Observation& obs,
                          std::span<const double> digest, double epsilon,
                          Rng& rng);

struct FilterOutcome {
  int action = 0;  // executed action: the proposal, or hover when flagged
  bool flagged = false;
  env::SafetyVerdict::Reason reason = env::SafetyVerdict::kNone;
};

// Pre-execution shield: a proposal the environment predicts to violate is
// replaced by hover. When hover itself is predicted unsafe it is kept (there
// is no safer fallback) and the reason recorded. The flag counts toward the
// violation metric either way.
FilterOutcome safety_filter(const env::WorldState& world, int agent_id,
                            int proposed_action);

struct AgentRuntime {
  qaoa::QaoaPolicy policy;
  snn::SpikingQNet net;
  snn::SpikingQNet target;
  ReplayBuffer buffer;
};

struct EpisodeRecord {
  int episode = 0;
  double mean_reward = 0.0;  // env reward summed per agent, mean over agents
  int violations = 0;        // safety-filter flags
  int active_agent_steps = 0;
  double violation_rate = 0.0;  // violations / active agent steps
  double kl_nats = 0.0;         // mean plan-distribution KL to prior
  double spike_entropy_nats = 0.0;
  double coverage = 0.0;
  double mean_spikes = 0.0;  // spikes per decision window
  double hybrid_loss = 0.0;  // mean reward - lambda*KL - beta*spikes
  double hinge_penalty = 0.0;  // max(0, rate - delta) * rho for this episode
  double td_loss = 0.0;        // mean over agents, includes hinge term
  double qaoa_loss = 0.0;      // mean over agents, includes hinge term
  double wall_ms = 0.0;
  int steps = 0;

  // Explainability trace.
  std::vector<std::vector<std::array<int, 3>>> paths;  // per agent, per tick
  std::vector<std::vector<int>> plans;                 // per agent, per step
  std::vector<std::vector<int>> violation_steps;       // per agent
  std::array<double, qaoa::kPlanCount> mean_plan_dist{};
  std::vector<std::array<std::uint8_t, 2>> mi_pairs;  // (obs bucket, action)
};

struct EvalSnapshot {
  int after_episode = 0;
  double mean_reward = 0.0;
  double violation_rate = 0.0;
  double coverage = 0.0;
};

struct Checkpoint {
  Setup setup;
  int episodes_completed = 0;
  std::uint64_t master_seed = 0;
  std::vector<qaoa::QaoaPolicy> policies;       // per agent
  std::vector<std::vector<double>> net_blobs;   // per agent, serialized
  std::vector<EvalSnapshot> evals;
};

struct WorldSnapshot {
  env::WorldConfig config;
  std::uint64_t world_seed = 0;
  std::vector<std::uint8_t> grid;  // cell codes
  std::vector<std::array<int, 3>> spawns;
};

struct RunResult {
  std::vector<EpisodeRecord> episodes;
  std::vector<EvalSnapshot> evals;
  Checkpoint checkpoint;
  WorldSnapshot first_world;                 // layout of episode 1's world
  std::vector<std::uint32_t> visit_totals;   // per column, summed over run
  int heat_x = 0, heat_y = 0;
  bool aborted = false;
  std::string abort_reason;
};

// Scalar objective of one episode record: mean reward minus the KL and
// spike-energy penalties.
double hybrid_loss(const EpisodeRecord& record, const TrainConfig& config);

struct EpisodeOptions {
  int episode = 1;              // 1-based label for the record
  double epsilon = 0.0;
  std::uint64_t world_stream = 0;  // seed of the world-generation stream
  std::uint64_t act_stream = 0;    // base seed; per-agent streams derive from it
  bool record_trace = true;
  bool store_transitions = true;  // false for evaluation rollouts
};

// Plays one full episode on a freshly generated world. Agent parameters are
// frozen; buffers receive transitions unless disabled.
EpisodeRecord run_episode(const Setup& setup, std::vector<AgentRuntime>& agents,
                          const EpisodeOptions& options,
                          env::WorldState* world_out = nullptr);

// Full training run. `on_episode` (optional) streams records as they finish,
// so callers can persist artifacts incrementally. Non-finite losses stop the
// run early with `aborted` set and the checkpoint intact.
RunResult train(const Setup& setup,
                const std::function<void(const EpisodeRecord&)>& on_episode = {},
                const std::function<void(const EvalSnapshot&)>& on_eval = {});

// Re-simulates one episode's world with checkpointed parameters, greedily.
EpisodeRecord replay_episode(const Checkpoint& checkpoint, int episode);

}  // namespace qnmarl::marl
