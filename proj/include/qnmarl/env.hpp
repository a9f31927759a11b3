#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "qnmarl/errors.hpp"
#include "qnmarl/rng.hpp"

namespace qnmarl::env {

struct Vec3i {
  int x = 0, y = 0, z = 0;
  bool operator==(const Vec3i&) const = default;
};

enum class Cell : std::uint8_t { Free = 0, Obstacle = 1, Nofly = 2, Target = 3 };

// Per-agent discrete actions.
enum Action : int {
  kHover = 0,
  kMovePx = 1,
  kMoveNx = 2,
  kMovePy = 3,
  kMoveNy = 4,
  kMovePz = 5,
  kMoveNz = 6,
  kLand = 7,
  kEvade = 8,
};
inline constexpr int kActionCount = 9;

struct WorldConfig {
  Vec3i dims{40, 40, 10};
  int n_agents = 10;
  int sensor_radius = 3;
  double obstacle_density = 0.08;
  int nofly_zones = 4;   // 3x3 full-height column blocks
  int n_targets = 12;
  int max_steps = 50;
  int velocity_limit = 1;  // max Chebyshev displacement per step

  void validate() const;  // throws ConfigError
};

// Synthetic smooth scalar field in [0, 1]: a sum of seeded Gaussian bumps
// normalized by total amplitude.
struct TemperatureField {
  struct Bump {
    double cx = 0, cy = 0, cz = 0, sigma = 1, amp = 1;
  };
  std::array<Bump, 3> bumps{};
  double amp_sum = 1.0;

  double at(const Vec3i& p) const;
};

struct AgentState {
  Vec3i pos{};
  bool landed = false;
  bool landed_in_target = false;
};

struct WorldState {
  WorldConfig config;
  std::uint64_t world_seed = 0;
  std::vector<Cell> grid;                 // index x + dims.x*(y + dims.y*z)
  std::vector<Vec3i> dynamic_obstacles;   // obstacle voxels that drift
  std::vector<AgentState> agents;
  std::vector<std::uint32_t> visit_counts;  // per column; step visits only
  std::vector<std::uint8_t> visited;        // per column; includes spawn cells
  std::vector<std::uint8_t> column_claimed; // first-visit reward already paid
  TemperatureField temperature;
  Rng drift_rng{0};  // drives dynamic-obstacle drift
  int clock = 0;

  bool in_bounds(const Vec3i& p) const {
    return p.x >= 0 && p.x < config.dims.x && p.y >= 0 && p.y < config.dims.y &&
           p.z >= 0 && p.z < config.dims.z;
  }
  std::size_t index(const Vec3i& p) const {
    return static_cast<std::size_t>(p.x) +
           static_cast<std::size_t>(config.dims.x) *
               (static_cast<std::size_t>(p.y) +
                static_cast<std::size_t>(config.dims.y) *
                    static_cast<std::size_t>(p.z));
  }
  std::size_t column(int x, int y) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(config.dims.x) * static_cast<std::size_t>(y);
  }
  // Out-of-bounds cells read as obstacles.
  Cell at(const Vec3i& p) const {
    return in_bounds(p) ? grid[index(p)] : Cell::Obstacle;
  }
  bool all_landed() const;
};

// Local sensor readout. The patch is scanned with dz as the outermost loop
// and dx innermost: index (dz+r)*(2r+1)^2 + (dy+r)*(2r+1) + (dx+r).
struct Observation {
  std::array<double, 6> depth{};    // +x, -x, +y, -y, +z, -z (voxels)
  double temperature = 0.0;         // [0, 1]
  int proximity = 0;                // other agents within Chebyshev radius
  std::array<double, 3> position{}; // normalized to [0, 1]
  std::vector<double> patch;        // occupancy codes 0..3
  int radius = 3;
  int n_agents = 10;
  bool landed = false;

  double patch_at(int dx, int dy, int dz) const {
    const int w = 2 * radius + 1;
    return patch[static_cast<std::size_t>((dz + radius) * w * w +
                                          (dy + radius) * w + (dx + radius))];
  }

  static std::size_t feature_count(int radius) {
    const std::size_t w = static_cast<std::size_t>(2 * radius + 1);
    return 6 + 1 + 1 + 3 + w * w * w;
  }

  // Canonical feature vector, every entry in [0, 1]:
  // depth/radius (6), temperature, proximity/(n_agents-1), position (3),
  // patch codes / 3.
  std::vector<double> normalized_features() const;
};

struct SafetyVerdict {
  enum Reason : int {
    kNone = 0,
    kNoflyProximity = 1,   // entering or ending adjacent to a no-fly voxel
    kVelocityExceeded = 2, // displacement beyond the per-step limit
    kCollision = 3,        // two agents on one voxel
  };
  bool violated = false;
  Reason reason = kNone;
};

struct StepOutcome {
  std::vector<double> rewards;          // per agent
  std::vector<SafetyVerdict> verdicts;  // per agent, on the executed actions
  std::vector<bool> bumped;             // boundary clamp or obstacle block
  bool done = false;
};

struct CoverageStats {
  double fraction = 0.0;                  // visited free columns / free columns
  std::vector<std::uint32_t> heatmap;     // per column step-visit counts
  int dim_x = 0, dim_y = 0;
};

// Builds a fresh world: Bernoulli(density) obstacles, no-fly column blocks,
// target voxels, and distinct agent spawns at z=1 (rejection-sampled).
WorldState init_world(const WorldConfig& config, Rng& rng);

// Pure sensor model; landed agents get an all-zero observation with the
// landed flag set.
Observation observe(const WorldState& world, int agent_id);

// Predicted verdict for one agent taking `action` against the current world,
// with all other agents held at their current positions.
SafetyVerdict check_safety(const WorldState& world, int agent_id, int action);

// Advances the world one tick: simultaneous agent moves with shield-style
// reverts (a violating move is counted but not entered), reward assignment,
// dynamic obstacle drift, visit accounting.
StepOutcome step_world(WorldState& world, const std::vector<int>& actions);

CoverageStats coverage_stats(const WorldState& world);

}  // namespace qnmarl::env
