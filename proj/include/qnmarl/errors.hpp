#pragma once

#include <stdexcept>
#include <string>

namespace qnmarl {

// Error taxonomy. Configuration problems are distinguished from runtime
// failures so the CLI can map them to distinct exit codes (1 vs 2).

// Invalid or out-of-range configuration detected at setup time.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// API contract misuse: bad indices, mismatched lengths, invalid arguments.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed external input (config files, checkpoints, CSV).
struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Numerical failure during optimization (non-finite gradients or losses).
struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Readout-mitigation failure (ill-conditioned confusion matrix). Callers are
// expected to catch this and fall back to unmitigated counts.
struct MitigationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace qnmarl
