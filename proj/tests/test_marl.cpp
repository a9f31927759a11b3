#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <set>
#include <vector>

#include "doctest.h"
#include "qnmarl/marl.hpp"

using namespace qnmarl;
using namespace qnmarl::marl;

namespace {

env::WorldState manual_world(const env::Vec3i& dims,
                             const std::vector<env::Vec3i>& spawns,
                             int sensor_radius = 2, int max_steps = 50) {
  env::WorldState world;
  world.config.dims = dims;
  world.config.n_agents = static_cast<int>(spawns.size());
  world.config.sensor_radius = sensor_radius;
  world.config.max_steps = max_steps;
  world.config.nofly_zones = 0;
  world.config.n_targets = 0;
  world.config.obstacle_density = 0.0;

  const std::size_t n_cells =
      static_cast<std::size_t>(dims.x) * dims.y * dims.z;
  const std::size_t n_cols = static_cast<std::size_t>(dims.x) * dims.y;
  world.grid.assign(n_cells, env::Cell::Free);
  world.visit_counts.assign(n_cols, 0);
  world.visited.assign(n_cols, 0);
  world.column_claimed.assign(n_cols, 0);
  world.temperature.amp_sum = 3.0;
  world.drift_rng = Rng(99);

  for (const env::Vec3i& p : spawns) {
    world.agents.push_back(env::AgentState{p, false, false});
    world.visited[world.column(p.x, p.y)] = 1;
    world.column_claimed[world.column(p.x, p.y)] = 1;
  }
  return world;
}

void put(env::WorldState& world, const env::Vec3i& p, env::Cell c) {
  world.grid[world.index(p)] = c;
}

qaoa::QaoaPolicy small_policy(int shots = 200, std::uint64_t seed = 5) {
  qaoa::PolicyConfig pc;
  pc.n_qubits = 3;
  pc.depth = 1;
  pc.shots = shots;
  Rng rng(seed);
  return qaoa::QaoaPolicy::init(pc, rng);
}

snn::SpikingQNet small_net(int input, std::uint64_t seed = 7) {
  snn::NetConfig nc;
  nc.layer_sizes = {input, 16, env::kActionCount};
  Rng rng(seed);
  return snn::SpikingQNet::init(nc, rng);
}

Transition make_transition(std::uint64_t frame, std::uint64_t next,
                           std::uint64_t episode_start) {
  Transition t;
  t.frame = frame;
  t.next_frame = next;
  t.episode_start = episode_start;
  t.angles = {0.1, 0.2, 0.3};
  t.reward = 0.5f;
  return t;
}

Setup smoke_setup() {
  Setup s;
  s.world.dims = {10, 10, 4};
  s.world.n_agents = 3;
  s.world.sensor_radius = 2;
  s.world.obstacle_density = 0.05;
  s.world.nofly_zones = 1;
  s.world.n_targets = 3;
  s.world.max_steps = 12;
  s.policy.n_qubits = 3;
  s.policy.depth = 1;
  s.policy.shots = 100;
  s.train.episodes = 3;
  s.train.batch = 8;
  s.train.eval_every = 2;
  s.train.eval_episodes = 1;
  s.train.target_sync_every = 2;
  s.train.history_window = 2;
  s.train.replay_capacity = 300;
  s.train.hidden_size = 16;
  s.train.master_seed = 11;
  s.resolve();
  s.validate();
  return s;
}

std::vector<AgentRuntime> fresh_agents(const Setup& s) {
  const std::size_t f =
      env::Observation::feature_count(s.world.sensor_radius);
  std::vector<AgentRuntime> agents;
  for (int i = 0; i < s.world.n_agents; ++i) {
    Rng init_rng = Rng::derive(s.train.master_seed,
                               {kStreamInit, static_cast<std::uint64_t>(i)});
    qaoa::QaoaPolicy policy = qaoa::QaoaPolicy::init(s.policy, init_rng);
    snn::SpikingQNet net = snn::SpikingQNet::init(s.net, init_rng);
    snn::SpikingQNet target = net;
    agents.push_back(
        AgentRuntime{std::move(policy), std::move(net), std::move(target),
                     ReplayBuffer(static_cast<std::size_t>(s.train.replay_capacity), f)});
  }
  return agents;
}

EpisodeOptions training_options(const Setup& s, int episode, double epsilon) {
  EpisodeOptions opt;
  opt.episode = episode;
  opt.epsilon = epsilon;
  opt.world_stream =
      Rng::derive(s.train.master_seed,
                  {kStreamWorld, static_cast<std::uint64_t>(episode)})
          .state();
  opt.act_stream =
      Rng::derive(s.train.master_seed,
                  {kStreamAgentAct, static_cast<std::uint64_t>(episode)})
          .state();
  return opt;
}

}  // namespace

TEST_SUITE("marl") {

TEST_CASE("train config validation") {
  CHECK_NOTHROW(TrainConfig{}.validate());
  TrainConfig c;
  c.episodes = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.batch = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.lambda_kl = -0.1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.beta_spike = -1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.delta_safety = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.delta_safety = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.hinge_rho = -1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.epsilon_end = 0.9;
  c.epsilon_start = 0.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.epsilon_decay_episodes = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.eval_every = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.target_sync_every = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.history_window = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.replay_capacity = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.hidden_size = 12;  // not a multiple of 8
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("exploration schedule is linear then flat") {
  TrainConfig c;  // 1.0 -> 0.05 over episodes 1..150
  CHECK(epsilon_at(c, 1) == 1.0);
  CHECK(epsilon_at(c, 150) == 0.05);
  CHECK(epsilon_at(c, 151) == 0.05);
  CHECK(epsilon_at(c, 10000) == 0.05);
  for (int ep = 2; ep < 150; ++ep) {
    const double expected = 1.0 + (0.05 - 1.0) * (ep - 1) / 149.0;
    CHECK(epsilon_at(c, ep) == doctest::Approx(expected).epsilon(1e-12));
    CHECK(epsilon_at(c, ep) < epsilon_at(c, ep - 1));
  }
  CHECK_THROWS_AS(epsilon_at(c, 0), UsageError);

  c.epsilon_decay_episodes = 1;
  CHECK(epsilon_at(c, 1) == 0.05);
}

TEST_CASE("setup resolution fills the network geometry") {
  Setup s = smoke_setup();
  const std::size_t f = env::Observation::feature_count(2);
  REQUIRE(s.net.layer_sizes.size() == 3);
  CHECK(s.net.layer_sizes[0] == static_cast<int>(2 * f));
  CHECK(s.net.layer_sizes[1] == 16);
  CHECK(s.net.layer_sizes[2] == env::kActionCount);

  Setup bad = smoke_setup();
  bad.net.layer_sizes[0] = 10;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = smoke_setup();
  bad.net.layer_sizes[2] = 4;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = smoke_setup();
  bad.net.layer_sizes[1] = 12;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("replay digests stack with pad-by-repeat at episode starts") {
  ReplayBuffer buffer(8, 2);
  buffer.begin_episode();
  CHECK(buffer.push_frame(std::vector<double>{1.0, 10.0}) == 0);
  CHECK(buffer.push_frame(std::vector<double>{2.0, 20.0}) == 1);
  CHECK(buffer.push_frame(std::vector<double>{3.0, 30.0}) == 2);

  const std::vector<double> full = buffer.digest(2, 0, 3);
  CHECK(full == std::vector<double>{1.0, 10.0, 2.0, 20.0, 3.0, 30.0});
  const std::vector<double> padded = buffer.digest(0, 0, 3);
  CHECK(padded == std::vector<double>{1.0, 10.0, 1.0, 10.0, 1.0, 10.0});
  const std::vector<double> partial = buffer.digest(1, 0, 3);
  CHECK(partial == std::vector<double>{1.0, 10.0, 1.0, 10.0, 2.0, 20.0});

  // New episode: padding clamps at its first frame, not the buffer's.
  buffer.begin_episode();
  CHECK(buffer.push_frame(std::vector<double>{4.0, 40.0}) == 3);
  const std::vector<double> clamped = buffer.digest(3, 3, 3);
  CHECK(clamped == std::vector<double>{4.0, 40.0, 4.0, 40.0, 4.0, 40.0});

  CHECK_THROWS_AS(buffer.push_frame(std::vector<double>{1.0, 2.0, 3.0}),
                  UsageError);
  CHECK_THROWS_AS(buffer.digest(2, 0, 0), UsageError);
}

TEST_CASE("replay ring evicts oldest transitions and prunes their frames") {
  ReplayBuffer buffer(2, 1);
  Rng rng(3);
  CHECK_THROWS_AS(buffer.sample(rng), UsageError);

  buffer.begin_episode();
  buffer.push_frame(std::vector<double>{0.0});
  buffer.push_frame(std::vector<double>{1.0});
  buffer.push_transition(make_transition(0, 1, 0));
  buffer.begin_episode();
  buffer.push_frame(std::vector<double>{2.0});
  buffer.push_frame(std::vector<double>{3.0});
  buffer.push_transition(make_transition(2, 3, 2));
  CHECK(buffer.size() == 2);

  buffer.begin_episode();
  buffer.push_frame(std::vector<double>{4.0});
  buffer.push_frame(std::vector<double>{5.0});
  buffer.push_transition(make_transition(4, 5, 4));
  CHECK(buffer.size() == 2);

  // The first episode's transition was evicted, so its frames are pruned.
  CHECK_THROWS_AS(buffer.digest(0, 0, 1), UsageError);
  CHECK(buffer.digest(2, 2, 1) == std::vector<double>{2.0});
  CHECK(buffer.digest(5, 4, 2) == std::vector<double>{4.0, 5.0});

  for (int i = 0; i < 20; ++i) {
    const Transition& t = buffer.sample(rng);
    CHECK((t.frame == 2 || t.frame == 4));
  }
  CHECK_THROWS_AS(buffer.push_transition(make_transition(90, 91, 90)),
                  UsageError);
}

TEST_CASE("live digest window pads like the replay digest") {
  std::deque<std::vector<float>> window;
  window.push_back({1.0f, 10.0f});
  CHECK(stack_digest(window, 2, 3) ==
        std::vector<double>{1.0, 10.0, 1.0, 10.0, 1.0, 10.0});
  window.push_back({2.0f, 20.0f});
  CHECK(stack_digest(window, 2, 3) ==
        std::vector<double>{1.0, 10.0, 1.0, 10.0, 2.0, 20.0});
  window.push_back({3.0f, 30.0f});
  CHECK(stack_digest(window, 2, 3) ==
        std::vector<double>{1.0, 10.0, 2.0, 20.0, 3.0, 30.0});

  CHECK_THROWS_AS(stack_digest({}, 2, 3), UsageError);
  std::deque<std::vector<float>> bad;
  bad.push_back({1.0f});
  CHECK_THROWS_AS(stack_digest(bad, 2, 3), UsageError);
}

TEST_CASE("observation mask blocks visibly unsafe moves only") {
  env::WorldState world = manual_world({12, 12, 5}, {{5, 5, 1}});
  const auto features_of = [&]() {
    return env::observe(world, 0).normalized_features();
  };

  const std::vector<std::uint8_t> open = obs_action_mask(features_of(), 2);
  CHECK(open == std::vector<std::uint8_t>(env::kActionCount, 1));

  // One no-fly voxel ahead: entering or ending adjacent to it is blocked,
  // which rules out every unit move except the one leading away.
  put(world, {6, 5, 1}, env::Cell::Nofly);
  const std::vector<std::uint8_t> guarded = obs_action_mask(features_of(), 2);
  const std::vector<std::uint8_t> expected{1, 0, 1, 0, 0, 0, 0, 1, 1};
  CHECK(guarded == expected);

  // Two cells away: only the directly approaching move is blocked.
  put(world, {6, 5, 1}, env::Cell::Free);
  put(world, {7, 5, 1}, env::Cell::Nofly);
  const std::vector<std::uint8_t> distant = obs_action_mask(features_of(), 2);
  CHECK(distant[env::kMovePx] == 0);
  CHECK(distant[env::kMoveNx] == 1);
  CHECK(distant[env::kMovePy] == 1);
  CHECK(distant[env::kMoveNy] == 1);

  CHECK_THROWS_AS(obs_action_mask(std::vector<double>(7, 0.0), 2), UsageError);
}

TEST_CASE("observation bucketing is stable and spreads") {
  env::WorldState world = manual_world({12, 12, 5}, {{5, 5, 1}});
  const std::vector<double> f = env::observe(world, 0).normalized_features();
  const int b = observation_bucket(f);
  CHECK(b >= 0);
  CHECK(b < 16);
  CHECK(observation_bucket(f) == b);

  Rng rng(17);
  std::set<int> seen;
  for (int i = 0; i < 200; ++i) {
    std::vector<double> v(20);
    for (double& x : v) x = rng.next_double();
    const int bucket = observation_bucket(v);
    CHECK(bucket >= 0);
    CHECK(bucket < 16);
    seen.insert(bucket);
  }
  CHECK(seen.size() >= 8);
}

TEST_CASE("safety filter substitutes hover and keeps it when nothing is safer") {
  env::WorldState world = manual_world({12, 12, 5}, {{5, 5, 1}, {9, 9, 1}});

  const FilterOutcome clean = safety_filter(world, 0, env::kMovePx);
  CHECK(clean.action == env::kMovePx);
  CHECK_FALSE(clean.flagged);

  put(world, {6, 5, 1}, env::Cell::Nofly);
  const FilterOutcome blocked = safety_filter(world, 0, env::kMovePx);
  CHECK(blocked.action == env::kHover);
  CHECK(blocked.flagged);
  CHECK(blocked.reason == env::SafetyVerdict::kNoflyProximity);

  // The agent already stands adjacent to the no-fly voxel, so hover itself
  // is predicted unsafe; it is kept and the flag stands.
  const FilterOutcome degenerate = safety_filter(world, 0, env::kHover);
  CHECK(degenerate.action == env::kHover);
  CHECK(degenerate.flagged);
  CHECK(degenerate.reason == env::SafetyVerdict::kNoflyProximity);

  // Collision prediction against another agent's current voxel.
  put(world, {6, 5, 1}, env::Cell::Free);
  world.agents[1].pos = {6, 5, 1};
  const FilterOutcome crash = safety_filter(world, 0, env::kMovePx);
  CHECK(crash.action == env::kHover);
  CHECK(crash.flagged);
  CHECK(crash.reason == env::SafetyVerdict::kCollision);
}

TEST_CASE("hybrid decisions compose the plan sampler with the masked readout") {
  env::WorldState world = manual_world({12, 12, 5}, {{5, 5, 1}});
  put(world, {6, 5, 1}, env::Cell::Nofly);
  const env::Observation obs = env::observe(world, 0);
  const std::vector<double> feats = obs.normalized_features();
  const std::size_t f = feats.size();

  const qaoa::QaoaPolicy policy = small_policy();
  const snn::SpikingQNet net = small_net(static_cast<int>(2 * f));
  std::deque<std::vector<float>> window;
  window.push_back(std::vector<float>(feats.begin(), feats.end()));
  const std::vector<double> digest = stack_digest(window, f, 2);

  Rng r1(41), r2(41);
  const HybridDecision a = hybrid_act(policy, net, obs, digest, 0.0, r1);
  const HybridDecision b = hybrid_act(policy, net, obs, digest, 0.0, r2);
  CHECK(a.action == b.action);
  CHECK(a.latent.plan.plan_id == b.latent.plan.plan_id);
  CHECK(a.q == b.q);

  CHECK_FALSE(a.explored);
  CHECK(a.action == a.greedy_action);
  CHECK(a.latent.plan.plan_id >= 0);
  CHECK(a.latent.plan.plan_id < qaoa::kPlanCount);
  REQUIRE(a.q.size() == static_cast<std::size_t>(env::kActionCount));
  REQUIRE(a.mask.size() == static_cast<std::size_t>(env::kActionCount));
  CHECK(a.mask[env::kMovePx] == 0);
  CHECK(a.greedy_action != env::kMovePx);
  CHECK(a.mask[a.greedy_action] == 1);

  double dist_sum = 0.0, prior_sum = 0.0;
  for (int k = 0; k < qaoa::kPlanCount; ++k) {
    dist_sum += a.exact_plan_dist[static_cast<std::size_t>(k)];
    prior_sum += a.prior[static_cast<std::size_t>(k)];
    CHECK(a.plan_cost[static_cast<std::size_t>(k)] >= 0.0);
  }
  CHECK(dist_sum == doctest::Approx(1.0));
  CHECK(prior_sum == doctest::Approx(1.0));
  CHECK(a.angles.size() == 3);

  Rng r3(99);
  const HybridDecision forced = hybrid_act(policy, net, obs, digest, 1.0, r3);
  CHECK(forced.explored);
}

TEST_CASE("action marginal factorizes through the latent plan") {
  env::WorldState world = manual_world({10, 10, 3}, {{5, 5, 1}}, 1);
  put(world, {6, 6, 1}, env::Cell::Obstacle);
  const env::Observation obs = env::observe(world, 0);
  const std::vector<double> feats = obs.normalized_features();
  const std::size_t f = feats.size();

  const qaoa::QaoaPolicy policy = small_policy(150);
  const snn::SpikingQNet net = small_net(static_cast<int>(f));
  std::deque<std::vector<float>> window;
  window.push_back(std::vector<float>(feats.begin(), feats.end()));
  const std::vector<double> digest = stack_digest(window, f, 1);
  const std::vector<std::uint8_t> mask = obs_action_mask(digest, 1);

  const int n_trials = 10000;
  std::array<double, qaoa::kPlanCount> z_count{};
  std::array<double, env::kActionCount> direct{};
  Rng rng(2026);
  for (int t = 0; t < n_trials; ++t) {
    const HybridDecision d = hybrid_act(policy, net, obs, digest, 0.0, rng);
    z_count[static_cast<std::size_t>(d.latent.plan.plan_id)] += 1.0;
    direct[static_cast<std::size_t>(d.action)] += 1.0;
  }

  // Conditional action distribution per forced latent, estimated separately.
  const int n_cond = 4000;
  std::array<std::array<double, env::kActionCount>, qaoa::kPlanCount> cond{};
  Rng rng2(4052);
  for (int z = 0; z < qaoa::kPlanCount; ++z) {
    for (int m = 0; m < n_cond; ++m) {
      const snn::ForwardResult fwd = net.forward(digest, z, rng2);
      int best = -1;
      for (int a = 0; a < env::kActionCount; ++a) {
        if (!mask[static_cast<std::size_t>(a)]) continue;
        if (best < 0 || fwd.q[static_cast<std::size_t>(a)] >
                            fwd.q[static_cast<std::size_t>(best)]) {
          best = a;
        }
      }
      cond[static_cast<std::size_t>(z)][static_cast<std::size_t>(best)] += 1.0;
    }
  }

  double tv = 0.0;
  for (int a = 0; a < env::kActionCount; ++a) {
    double composed = 0.0;
    for (int z = 0; z < qaoa::kPlanCount; ++z) {
      composed += (z_count[static_cast<std::size_t>(z)] / n_trials) *
                  (cond[static_cast<std::size_t>(z)][static_cast<std::size_t>(a)] /
                   n_cond);
    }
    tv += std::abs(direct[static_cast<std::size_t>(a)] / n_trials - composed);
  }
  tv *= 0.5;
  CHECK(tv <= 0.05);
}

TEST_CASE("hybrid loss arithmetic") {
  TrainConfig c;  // lambda 0.1, beta 0.05
  EpisodeRecord rec;
  rec.mean_reward = 1.0;
  rec.kl_nats = 0.130812;
  rec.mean_spikes = 10.0;
  CHECK(hybrid_loss(rec, c) == doctest::Approx(0.4869188));

  rec.kl_nats = 0.0;
  rec.mean_spikes = 0.0;
  CHECK(hybrid_loss(rec, c) == 1.0);

  c.lambda_kl = 0.0;
  c.beta_spike = 0.0;
  rec.kl_nats = 5.0;
  rec.mean_spikes = 100.0;
  CHECK(hybrid_loss(rec, c) == 1.0);
}

TEST_CASE("zero step budget produces an empty record") {
  Setup s = smoke_setup();
  std::vector<AgentRuntime> agents = fresh_agents(s);
  s.world.max_steps = 0;
  const EpisodeRecord rec =
      run_episode(s, agents, training_options(s, 1, 0.5), nullptr);
  CHECK(rec.steps == 0);
  CHECK(rec.active_agent_steps == 0);
  CHECK(rec.violations == 0);
  CHECK(rec.mean_reward == 0.0);
  for (const auto& agent : agents) CHECK(agent.buffer.size() == 0);
}

TEST_CASE("episode accounting ties transitions to agent steps") {
  const Setup s = smoke_setup();
  std::vector<AgentRuntime> agents = fresh_agents(s);
  env::WorldState final_world;
  const EpisodeOptions opt = training_options(s, 1, 0.7);
  const EpisodeRecord rec = run_episode(s, agents, opt, &final_world);

  CHECK(rec.steps > 0);
  CHECK(rec.steps <= s.world.max_steps);
  CHECK(final_world.clock == rec.steps);
  CHECK(rec.active_agent_steps >= rec.steps);  // at least one live agent

  // Every decision became exactly one stored transition.
  std::size_t stored = 0, flagged = 0;
  for (const auto& agent : agents) {
    stored += agent.buffer.size();
    for (const Transition& t : agent.buffer.transitions()) {
      flagged += t.violation ? 1 : 0;
      CHECK(t.angles.size() == 3);
      CHECK(std::isfinite(static_cast<double>(t.reward)));
      const std::vector<double> digest =
          agent.buffer.digest(t.frame, t.episode_start, s.train.history_window);
      CHECK(digest.size() == static_cast<std::size_t>(s.net.layer_sizes[0]));
    }
  }
  CHECK(stored == static_cast<std::size_t>(rec.active_agent_steps));
  CHECK(flagged == static_cast<std::size_t>(rec.violations));

  // The filter tally and the trace agree.
  std::size_t trace_flags = 0, trace_plans = 0;
  for (int i = 0; i < s.world.n_agents; ++i) {
    trace_flags += rec.violation_steps[static_cast<std::size_t>(i)].size();
    trace_plans += rec.plans[static_cast<std::size_t>(i)].size();
    CHECK(rec.paths[static_cast<std::size_t>(i)].size() >= 2);
  }
  CHECK(trace_flags == static_cast<std::size_t>(rec.violations));
  CHECK(trace_plans == static_cast<std::size_t>(rec.active_agent_steps));
  CHECK(rec.mi_pairs.size() == static_cast<std::size_t>(rec.active_agent_steps));

  CHECK(rec.kl_nats >= 0.0);
  CHECK(rec.spike_entropy_nats >= 0.0);
  CHECK(rec.coverage >= 0.0);
  CHECK(rec.coverage <= 1.0);
  CHECK(rec.violation_rate ==
        doctest::Approx(static_cast<double>(rec.violations) /
                        rec.active_agent_steps));
  double dist_sum = 0.0;
  for (double p : rec.mean_plan_dist) dist_sum += p;
  CHECK(dist_sum == doctest::Approx(1.0));
  CHECK(rec.hybrid_loss ==
        doctest::Approx(rec.mean_reward - 0.1 * rec.kl_nats -
                        0.05 * rec.mean_spikes));
}

TEST_CASE("episodes are deterministic given their streams") {
  const Setup s = smoke_setup();
  const EpisodeOptions opt = training_options(s, 2, 0.4);

  std::vector<AgentRuntime> a1 = fresh_agents(s);
  std::vector<AgentRuntime> a2 = fresh_agents(s);
  const EpisodeRecord r1 = run_episode(s, a1, opt, nullptr);
  const EpisodeRecord r2 = run_episode(s, a2, opt, nullptr);
  CHECK(r1.mean_reward == r2.mean_reward);
  CHECK(r1.violations == r2.violations);
  CHECK(r1.kl_nats == r2.kl_nats);
  CHECK(r1.spike_entropy_nats == r2.spike_entropy_nats);
  CHECK(r1.paths == r2.paths);
  CHECK(r1.plans == r2.plans);

  // Disabling storage changes no decision.
  std::vector<AgentRuntime> a3 = fresh_agents(s);
  EpisodeOptions quiet = opt;
  quiet.store_transitions = false;
  const EpisodeRecord r3 = run_episode(s, a3, quiet, nullptr);
  CHECK(r3.mean_reward == r1.mean_reward);
  CHECK(r3.violations == r1.violations);
  for (const auto& agent : a3) CHECK(agent.buffer.size() == 0);

  std::vector<AgentRuntime> wrong;
  CHECK_THROWS_AS(run_episode(s, wrong, opt, nullptr), UsageError);
}

TEST_CASE("training smoke run produces finite records and a full checkpoint") {
  const Setup s = smoke_setup();
  std::vector<int> seen;
  const RunResult result =
      train(s, [&](const EpisodeRecord& rec) { seen.push_back(rec.episode); });

  CHECK_FALSE(result.aborted);
  REQUIRE(result.episodes.size() == 3);
  CHECK(seen == std::vector<int>{1, 2, 3});
  for (const EpisodeRecord& rec : result.episodes) {
    CHECK(std::isfinite(rec.mean_reward));
    CHECK(std::isfinite(rec.kl_nats));
    CHECK(std::isfinite(rec.spike_entropy_nats));
    CHECK(std::isfinite(rec.hybrid_loss));
    CHECK(std::isfinite(rec.td_loss));
    CHECK(std::isfinite(rec.qaoa_loss));
    CHECK(rec.wall_ms == 0.0);  // wall time off by default for determinism
    CHECK(rec.hinge_penalty ==
          doctest::Approx(std::max(0.0, rec.violation_rate - 0.02) * 10.0));
  }

  REQUIRE(result.evals.size() == 1);
  CHECK(result.evals[0].after_episode == 2);
  CHECK(std::isfinite(result.evals[0].mean_reward));

  CHECK(result.checkpoint.episodes_completed == 3);
  REQUIRE(result.checkpoint.policies.size() == 3);
  REQUIRE(result.checkpoint.net_blobs.size() == 3);
  CHECK(result.checkpoint.master_seed == 11);
  CHECK(result.checkpoint.evals.size() == 1);

  // World snapshot covers episode 1's layout.
  CHECK(result.first_world.grid.size() == 10 * 10 * 4);
  CHECK(result.first_world.spawns.size() == 3);
  CHECK(result.heat_x == 10);
  CHECK(result.heat_y == 10);
  REQUIRE(result.visit_totals.size() == 100);
  std::uint64_t visits = 0;
  for (std::uint32_t v : result.visit_totals) visits += v;
  CHECK(visits > 0);

  // Blobs restore byte-exact networks.
  const snn::SpikingQNet restored =
      snn::SpikingQNet::deserialize(s.net, result.checkpoint.net_blobs[0]);
  CHECK(restored.serialize() == result.checkpoint.net_blobs[0]);
}

TEST_CASE("training runs are reproducible end to end") {
  const Setup s = smoke_setup();
  const RunResult r1 = train(s);
  const RunResult r2 = train(s);
  REQUIRE(r1.episodes.size() == r2.episodes.size());
  for (std::size_t i = 0; i < r1.episodes.size(); ++i) {
    CHECK(r1.episodes[i].mean_reward == r2.episodes[i].mean_reward);
    CHECK(r1.episodes[i].violations == r2.episodes[i].violations);
    CHECK(r1.episodes[i].kl_nats == r2.episodes[i].kl_nats);
    CHECK(r1.episodes[i].spike_entropy_nats == r2.episodes[i].spike_entropy_nats);
    CHECK(r1.episodes[i].coverage == r2.episodes[i].coverage);
    CHECK(r1.episodes[i].hybrid_loss == r2.episodes[i].hybrid_loss);
    CHECK(r1.episodes[i].td_loss == r2.episodes[i].td_loss);
    CHECK(r1.episodes[i].qaoa_loss == r2.episodes[i].qaoa_loss);
    CHECK(r1.episodes[i].paths == r2.episodes[i].paths);
  }
  for (std::size_t i = 0; i < r1.checkpoint.net_blobs.size(); ++i) {
    CHECK(r1.checkpoint.net_blobs[i] == r2.checkpoint.net_blobs[i]);
  }

  // A different master seed gives a different run.
  Setup other = s;
  other.train.master_seed = 12;
  const RunResult r3 = train(other);
  bool differs = false;
  for (std::size_t i = 0; i < r3.episodes.size(); ++i) {
    if (r1.episodes[i].mean_reward != r3.episodes[i].mean_reward) differs = true;
  }
  CHECK(differs);
}

TEST_CASE("checkpointed episodes replay deterministically") {
  const Setup s = smoke_setup();
  const RunResult result = train(s);
  const EpisodeRecord a = replay_episode(result.checkpoint, 2);
  const EpisodeRecord b = replay_episode(result.checkpoint, 2);
  CHECK(a.mean_reward == b.mean_reward);
  CHECK(a.paths == b.paths);
  CHECK(a.plans == b.plans);
  CHECK(a.steps > 0);

  CHECK_THROWS_AS(replay_episode(result.checkpoint, 0), UsageError);
  CHECK_THROWS_AS(replay_episode(result.checkpoint, 99), UsageError);

  Checkpoint broken = result.checkpoint;
  broken.net_blobs.pop_back();
  CHECK_THROWS_AS(replay_episode(broken, 1), InputError);
}

TEST_CASE("zero regularizers reduce the hybrid loss to mean reward terms") {
  Setup s = smoke_setup();
  s.train.lambda_kl = 0.0;
  s.train.episodes = 1;
  s.train.eval_episodes = 0;
  const RunResult result = train(s);
  REQUIRE(result.episodes.size() == 1);
  const EpisodeRecord& rec = result.episodes[0];
  CHECK(rec.hybrid_loss ==
        doctest::Approx(rec.mean_reward - 0.05 * rec.mean_spikes));
}

}  // TEST_SUITE
