#include "qnmarl/env.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace qnmarl::env {

namespace {

constexpr double kStepCost = 0.01;
constexpr double kBumpPenalty = 0.05;
constexpr double kViolationPenalty = 1.0;
constexpr double kFreeColumnReward = 0.1;
constexpr double kTargetColumnReward = 1.0;
constexpr int kDriftPeriod = 5;        // ticks between drift opportunities
constexpr double kDriftProb = 0.1;     // per dynamic obstacle per opportunity
constexpr int kNoflyBlock = 3;         // no-fly zones are 3x3 column blocks

int sgn(int v) { return (v > 0) - (v < 0); }

int chebyshev(const Vec3i& a, const Vec3i& b) {
  return std::max({std::abs(a.x - b.x), std::abs(a.y - b.y),
                   std::abs(a.z - b.z)});
}

Vec3i action_delta(int action) {
  switch (action) {
    case kMovePx: return {1, 0, 0};
    case kMoveNx: return {-1, 0, 0};
    case kMovePy: return {0, 1, 0};
    case kMoveNy: return {0, -1, 0};
    case kMovePz: return {0, 0, 1};
    case kMoveNz: return {0, 0, -1};
    case kLand: return {0, 0, -1};
    default: return {0, 0, 0};  // kHover; kEvade is resolved separately
  }
}

// Nearest threat for the evade reflex: obstacle voxels within the sensor
// radius take precedence over other agents; Euclidean metric, scan order
// breaks ties.
bool nearest_threat(const WorldState& world, int agent_id, Vec3i* threat) {
  const Vec3i pos = world.agents[static_cast<std::size_t>(agent_id)].pos;
  const int r = world.config.sensor_radius;
  long best = -1;
  for (int dz = -r; dz <= r; ++dz) {
    for (int dy = -r; dy <= r; ++dy) {
      for (int dx = -r; dx <= r; ++dx) {
        if (dx == 0 && dy == 0 && dz == 0) continue;
        const Vec3i p{pos.x + dx, pos.y + dy, pos.z + dz};
        if (!world.in_bounds(p) || world.at(p) != Cell::Obstacle) continue;
        const long d2 = static_cast<long>(dx) * dx +
                        static_cast<long>(dy) * dy +
                        static_cast<long>(dz) * dz;
        if (best < 0 || d2 < best) {
          best = d2;
          *threat = p;
        }
      }
    }
  }
  if (best >= 0) return true;
  for (std::size_t j = 0; j < world.agents.size(); ++j) {
    if (static_cast<int>(j) == agent_id) continue;
    const Vec3i p = world.agents[j].pos;
    if (chebyshev(p, pos) > r) continue;
    const long d2 = static_cast<long>(p.x - pos.x) * (p.x - pos.x) +
                    static_cast<long>(p.y - pos.y) * (p.y - pos.y) +
                    static_cast<long>(p.z - pos.z) * (p.z - pos.z);
    if (best < 0 || d2 < best) {
      best = d2;
      *threat = p;
    }
  }
  return best >= 0;
}

// Kinematic resolution of one action: walls clamp, obstacles block. No-fly
// cells do not block: they are airspace that must not be entered, which is
// the safety layer's concern, not physics.
Vec3i resolve_move(const WorldState& world, int agent_id, int action,
                   bool* bumped) {
  *bumped = false;
  const AgentState& agent = world.agents[static_cast<std::size_t>(agent_id)];
  if (agent.landed) return agent.pos;

  Vec3i delta{};
  if (action == kEvade) {
    Vec3i threat{};
    if (nearest_threat(world, agent_id, &threat)) {
      delta = {sgn(agent.pos.x - threat.x), sgn(agent.pos.y - threat.y),
               sgn(agent.pos.z - threat.z)};
    }
  } else {
    delta = action_delta(action);
    if (action == kLand && agent.pos.z == 0) delta = {0, 0, 0};
  }

  Vec3i dest{agent.pos.x + delta.x, agent.pos.y + delta.y,
             agent.pos.z + delta.z};
  const Vec3i clamped{
      std::clamp(dest.x, 0, world.config.dims.x - 1),
      std::clamp(dest.y, 0, world.config.dims.y - 1),
      std::clamp(dest.z, 0, world.config.dims.z - 1)};
  if (!(clamped == dest)) {
    *bumped = true;
    dest = clamped;
  }
  if (world.at(dest) == Cell::Obstacle) {
    *bumped = true;
    dest = agent.pos;
  }
  return dest;
}

bool adjacent_to_nofly(const WorldState& world, const Vec3i& p) {
  for (int dz = -1; dz <= 1; ++dz) {
    for (int dy = -1; dy <= 1; ++dy) {
      for (int dx = -1; dx <= 1; ++dx) {
        const Vec3i q{p.x + dx, p.y + dy, p.z + dz};
        if (world.in_bounds(q) && world.at(q) == Cell::Nofly) return true;
      }
    }
  }
  return false;
}

bool is_target_column(const WorldState& world, int x, int y) {
  return world.at({x, y, 0}) == Cell::Target;
}

}  // namespace

void WorldConfig::validate() const {
  if (dims.x < 4 || dims.y < 4 || dims.z < 2) {
    throw ConfigError("world dims must be at least 4x4x2");
  }
  if (dims.x > 256 || dims.y > 256 || dims.z > 64) {
    throw ConfigError("world dims must be at most 256x256x64");
  }
  if (n_agents < 1) throw ConfigError("need at least one agent");
  if (n_agents > dims.x * dims.y / 4) {
    throw ConfigError("too many agents for the world footprint");
  }
  if (sensor_radius < 1 || sensor_radius > 8) {
    throw ConfigError("sensor radius must be in 1..8");
  }
  if (obstacle_density < 0.0 || obstacle_density > 0.5) {
    throw ConfigError("obstacle density must be in [0, 0.5]");
  }
  if (nofly_zones < 0) throw ConfigError("no-fly zone count must be >= 0");
  if (nofly_zones > 0 && (dims.x < kNoflyBlock || dims.y < kNoflyBlock)) {
    throw ConfigError("world footprint too small for a no-fly zone");
  }
  if (n_targets < 0) throw ConfigError("target count must be >= 0");
  if (max_steps < 1) throw ConfigError("episode length must be >= 1");
  if (velocity_limit < 1) throw ConfigError("velocity limit must be >= 1");
}

double TemperatureField::at(const Vec3i& p) const {
  double acc = 0.0;
  for (const Bump& b : bumps) {
    const double dx = p.x - b.cx, dy = p.y - b.cy, dz = p.z - b.cz;
    acc += b.amp *
           std::exp(-(dx * dx + dy * dy + dz * dz) / (2.0 * b.sigma * b.sigma));
  }
  const double v = acc / amp_sum;
  return std::clamp(v, 0.0, 1.0);
}

bool WorldState::all_landed() const {
  return std::all_of(agents.begin(), agents.end(),
                     [](const AgentState& a) { return a.landed; });
}

WorldState init_world(const WorldConfig& config, Rng& rng) {
  config.validate();
  WorldState world;
  world.config = config;
  world.world_seed = rng.next_u64();
  Rng gen = Rng::derive(world.world_seed, {0});
  world.drift_rng = Rng::derive(world.world_seed, {1});

  const std::size_t n_cells = static_cast<std::size_t>(config.dims.x) *
                              static_cast<std::size_t>(config.dims.y) *
                              static_cast<std::size_t>(config.dims.z);
  const std::size_t n_columns = static_cast<std::size_t>(config.dims.x) *
                                static_cast<std::size_t>(config.dims.y);
  world.grid.assign(n_cells, Cell::Free);
  world.visit_counts.assign(n_columns, 0);
  world.visited.assign(n_columns, 0);
  world.column_claimed.assign(n_columns, 0);

  for (int z = 0; z < config.dims.z; ++z) {
    for (int y = 0; y < config.dims.y; ++y) {
      for (int x = 0; x < config.dims.x; ++x) {
        if (gen.next_bernoulli(config.obstacle_density)) {
          world.grid[world.index({x, y, z})] = Cell::Obstacle;
        }
      }
    }
  }

  for (int zone = 0; zone < config.nofly_zones; ++zone) {
    const int x0 = static_cast<int>(
        gen.next_below(static_cast<std::uint64_t>(config.dims.x - kNoflyBlock + 1)));
    const int y0 = static_cast<int>(
        gen.next_below(static_cast<std::uint64_t>(config.dims.y - kNoflyBlock + 1)));
    for (int z = 0; z < config.dims.z; ++z) {
      for (int y = y0; y < y0 + kNoflyBlock; ++y) {
        for (int x = x0; x < x0 + kNoflyBlock; ++x) {
          world.grid[world.index({x, y, z})] = Cell::Nofly;
        }
      }
    }
  }

  // Ground targets on free cells; capped rejection sampling so degenerate
  // configs (everything blocked) still terminate.
  int placed = 0;
  for (int tries = 0; placed < config.n_targets && tries < 200000; ++tries) {
    const int x = static_cast<int>(
        gen.next_below(static_cast<std::uint64_t>(config.dims.x)));
    const int y = static_cast<int>(
        gen.next_below(static_cast<std::uint64_t>(config.dims.y)));
    if (world.at({x, y, 0}) != Cell::Free) continue;
    world.grid[world.index({x, y, 0})] = Cell::Target;
    ++placed;
  }
  if (placed < config.n_targets) {
    throw ConfigError("could not place all targets; world too congested");
  }

  // Every tenth obstacle (by placement scan order) drifts.
  std::size_t obstacle_rank = 0;
  for (int z = 0; z < config.dims.z; ++z) {
    for (int y = 0; y < config.dims.y; ++y) {
      for (int x = 0; x < config.dims.x; ++x) {
        if (world.at({x, y, z}) != Cell::Obstacle) continue;
        if (obstacle_rank % 10 == 0) {
          world.dynamic_obstacles.push_back({x, y, z});
        }
        ++obstacle_rank;
      }
    }
  }

  world.agents.resize(static_cast<std::size_t>(config.n_agents));
  int spawned = 0;
  for (int tries = 0; spawned < config.n_agents && tries < 200000; ++tries) {
    const int x = static_cast<int>(
        gen.next_below(static_cast<std::uint64_t>(config.dims.x)));
    const int y = static_cast<int>(
        gen.next_below(static_cast<std::uint64_t>(config.dims.y)));
    const Vec3i p{x, y, 1};
    if (world.at(p) != Cell::Free) continue;
    bool taken = false;
    for (int j = 0; j < spawned; ++j) {
      if (world.agents[static_cast<std::size_t>(j)].pos == p) taken = true;
    }
    if (taken) continue;
    world.agents[static_cast<std::size_t>(spawned)] = AgentState{p, false, false};
    ++spawned;
  }
  if (spawned < config.n_agents) {
    throw ConfigError("could not place all agents; world too congested");
  }
  for (const AgentState& a : world.agents) {
    const std::size_t col = world.column(a.pos.x, a.pos.y);
    world.visited[col] = 1;
    world.column_claimed[col] = 1;  // spawn columns never pay a visit reward
  }

  const double min_xy = std::min(config.dims.x, config.dims.y);
  double amp_sum = 0.0;
  for (TemperatureField::Bump& b : world.temperature.bumps) {
    b.cx = gen.next_range(0.0, config.dims.x - 1.0);
    b.cy = gen.next_range(0.0, config.dims.y - 1.0);
    b.cz = gen.next_range(0.0, config.dims.z - 1.0);
    b.sigma = gen.next_range(std::max(1.5, min_xy / 10.0),
                             std::max(2.5, min_xy / 4.0));
    b.amp = gen.next_range(0.5, 1.0);
    amp_sum += b.amp;
  }
  world.temperature.amp_sum = amp_sum;
  return world;
}

Observation observe(const WorldState& world, int agent_id) {
  if (agent_id < 0 || agent_id >= static_cast<int>(world.agents.size())) {
    std::ostringstream oss;
    oss << "observe: agent id " << agent_id << " out of range";
    throw UsageError(oss.str());
  }
  const AgentState& agent = world.agents[static_cast<std::size_t>(agent_id)];
  const int r = world.config.sensor_radius;
  const int w = 2 * r + 1;

  Observation obs;
  obs.radius = r;
  obs.n_agents = world.config.n_agents;
  obs.landed = agent.landed;
  obs.patch.assign(static_cast<std::size_t>(w) * w * w, 0.0);
  if (agent.landed) return obs;

  static constexpr std::array<Vec3i, 6> dirs{
      {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}}};
  for (std::size_t d = 0; d < dirs.size(); ++d) {
    int open = 0;
    for (int k = 1; k <= r; ++k) {
      const Vec3i p{agent.pos.x + k * dirs[d].x, agent.pos.y + k * dirs[d].y,
                    agent.pos.z + k * dirs[d].z};
      if (world.at(p) == Cell::Obstacle) break;  // walls read as obstacles
      ++open;
    }
    obs.depth[d] = static_cast<double>(open);
  }

  obs.temperature = world.temperature.at(agent.pos);

  for (std::size_t j = 0; j < world.agents.size(); ++j) {
    if (static_cast<int>(j) == agent_id) continue;
    if (chebyshev(world.agents[j].pos, agent.pos) <= r) ++obs.proximity;
  }

  obs.position = {
      static_cast<double>(agent.pos.x) / (world.config.dims.x - 1),
      static_cast<double>(agent.pos.y) / (world.config.dims.y - 1),
      static_cast<double>(agent.pos.z) / (world.config.dims.z - 1)};

  for (int dz = -r; dz <= r; ++dz) {
    for (int dy = -r; dy <= r; ++dy) {
      for (int dx = -r; dx <= r; ++dx) {
        const Vec3i p{agent.pos.x + dx, agent.pos.y + dy, agent.pos.z + dz};
        const std::size_t idx = static_cast<std::size_t>(
            (dz + r) * w * w + (dy + r) * w + (dx + r));
        obs.patch[idx] = static_cast<double>(world.at(p));
      }
    }
  }
  return obs;
}

std::vector<double> Observation::normalized_features() const {
  std::vector<double> f;
  f.reserve(feature_count(radius));
  for (double d : depth) f.push_back(d / radius);
  f.push_back(temperature);
  f.push_back(static_cast<double>(proximity) / std::max(1, n_agents - 1));
  for (double p : position) f.push_back(p);
  for (double c : patch) f.push_back(c / 3.0);
  return f;
}

SafetyVerdict check_safety(const WorldState& world, int agent_id, int action) {
  if (agent_id < 0 || agent_id >= static_cast<int>(world.agents.size())) {
    std::ostringstream oss;
    oss << "check_safety: agent id " << agent_id << " out of range";
    throw UsageError(oss.str());
  }
  if (action < 0 || action >= kActionCount) {
    std::ostringstream oss;
    oss << "check_safety: action " << action << " out of range";
    throw UsageError(oss.str());
  }
  const AgentState& agent = world.agents[static_cast<std::size_t>(agent_id)];
  SafetyVerdict verdict;
  if (agent.landed) return verdict;

  bool bumped = false;
  const Vec3i dest = resolve_move(world, agent_id, action, &bumped);

  if (world.at(dest) == Cell::Nofly || adjacent_to_nofly(world, dest)) {
    verdict.violated = true;
    verdict.reason = SafetyVerdict::kNoflyProximity;
    return verdict;
  }
  if (chebyshev(dest, agent.pos) > world.config.velocity_limit) {
    verdict.violated = true;
    verdict.reason = SafetyVerdict::kVelocityExceeded;
    return verdict;
  }
  for (std::size_t j = 0; j < world.agents.size(); ++j) {
    if (static_cast<int>(j) == agent_id) continue;
    if (world.agents[j].pos == dest) {
      verdict.violated = true;
      verdict.reason = SafetyVerdict::kCollision;
      return verdict;
    }
  }
  return verdict;
}

StepOutcome step_world(WorldState& world, const std::vector<int>& actions) {
  const std::size_t n = world.agents.size();
  if (actions.size() != n) {
    std::ostringstream oss;
    oss << "step_world: got " << actions.size() << " actions for " << n
        << " agents";
    throw UsageError(oss.str());
  }
  for (int a : actions) {
    if (a < 0 || a >= kActionCount) {
      std::ostringstream oss;
      oss << "step_world: action " << a << " out of range";
      throw UsageError(oss.str());
    }
  }

  StepOutcome out;
  out.rewards.assign(n, 0.0);
  out.verdicts.assign(n, SafetyVerdict{});
  out.bumped.assign(n, false);

  std::vector<bool> active(n);
  std::vector<Vec3i> origin(n), tentative(n);
  for (std::size_t i = 0; i < n; ++i) {
    active[i] = !world.agents[i].landed;
    origin[i] = world.agents[i].pos;
    bool bumped = false;
    tentative[i] = active[i] ? resolve_move(world, static_cast<int>(i),
                                            actions[i], &bumped)
                             : origin[i];
    out.bumped[i] = bumped;
  }

  // Shield pass 1: no-fly proximity and velocity violations revert in place.
  for (std::size_t i = 0; i < n; ++i) {
    if (!active[i]) continue;
    if (world.at(tentative[i]) == Cell::Nofly ||
        adjacent_to_nofly(world, tentative[i])) {
      out.verdicts[i] = {true, SafetyVerdict::kNoflyProximity};
      tentative[i] = origin[i];
    } else if (chebyshev(tentative[i], origin[i]) > world.config.velocity_limit) {
      out.verdicts[i] = {true, SafetyVerdict::kVelocityExceeded};
      tentative[i] = origin[i];
    }
  }

  // Shield pass 2: every mover that shares its destination voxel with anyone
  // reverts; all parties to a contested voxel are reverted in the same round,
  // never just the lower-indexed one. Reverts can expose new conflicts, so
  // iterate to a fixed point (origins are distinct, so this terminates).
  for (bool changed = true; changed;) {
    changed = false;
    std::vector<std::size_t> colliding;
    for (std::size_t i = 0; i < n; ++i) {
      if (!active[i] || tentative[i] == origin[i]) continue;
      for (std::size_t j = 0; j < n; ++j) {
        if (j != i && tentative[j] == tentative[i]) {
          colliding.push_back(i);
          break;
        }
      }
    }
    for (std::size_t i : colliding) {
      if (!out.verdicts[i].violated) {
        out.verdicts[i] = {true, SafetyVerdict::kCollision};
      }
      tentative[i] = origin[i];
      changed = true;
    }
  }

  for (std::size_t i = 0; i < n; ++i) {
    world.agents[i].pos = tentative[i];
    if (active[i] && actions[i] == kLand && origin[i].z == 0 &&
        tentative[i] == origin[i] && !out.verdicts[i].violated) {
      world.agents[i].landed = true;
      world.agents[i].landed_in_target =
          world.at(tentative[i]) == Cell::Target;
    }
  }

  for (std::size_t i = 0; i < n; ++i) {
    if (!active[i]) continue;
    out.rewards[i] -= kStepCost;
    if (out.verdicts[i].violated) {
      out.rewards[i] -= kViolationPenalty;
    } else if (out.bumped[i]) {
      out.rewards[i] -= kBumpPenalty;
    }
    const std::size_t col = world.column(world.agents[i].pos.x,
                                         world.agents[i].pos.y);
    ++world.visit_counts[col];
    world.visited[col] = 1;
    if (!world.column_claimed[col]) {
      world.column_claimed[col] = 1;
      out.rewards[i] += is_target_column(world, world.agents[i].pos.x,
                                         world.agents[i].pos.y)
                            ? kTargetColumnReward
                            : kFreeColumnReward;
    }
  }

  ++world.clock;
  if (world.clock % kDriftPeriod == 0) {
    static constexpr std::array<Vec3i, 4> lateral{
        {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}}};
    for (Vec3i& p : world.dynamic_obstacles) {
      if (!world.drift_rng.next_bernoulli(kDriftProb)) continue;
      const Vec3i d = lateral[world.drift_rng.next_below(4)];
      const Vec3i q{p.x + d.x, p.y + d.y, p.z + d.z};
      if (!world.in_bounds(q) || world.at(q) != Cell::Free) continue;
      bool occupied = false;
      for (const AgentState& a : world.agents) {
        if (a.pos == q) occupied = true;
      }
      if (occupied) continue;
      world.grid[world.index(p)] = Cell::Free;
      world.grid[world.index(q)] = Cell::Obstacle;
      p = q;
    }
  }

  out.done = world.clock >= world.config.max_steps || world.all_landed();
  return out;
}

CoverageStats coverage_stats(const WorldState& world) {
  CoverageStats stats;
  stats.dim_x = world.config.dims.x;
  stats.dim_y = world.config.dims.y;
  stats.heatmap = world.visit_counts;

  std::size_t free_cols = 0, visited_free = 0;
  for (int y = 0; y < world.config.dims.y; ++y) {
    for (int x = 0; x < world.config.dims.x; ++x) {
      // A column counts as coverable unless the no-fly mask blocks it at
      // every altitude (zones span the full height, so checking one z is
      // enough).
      if (world.at({x, y, 0}) == Cell::Nofly) continue;
      ++free_cols;
      if (world.visited[world.column(x, y)]) ++visited_free;
    }
  }
  stats.fraction = free_cols == 0
                       ? 0.0
                       : static_cast<double>(visited_free) /
                             static_cast<double>(free_cols);
  return stats;
}

}  // namespace qnmarl::env
