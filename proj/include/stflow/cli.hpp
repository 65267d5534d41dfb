#pragma once

// Command-line front end. The verbs live in the library so tests can drive
// them in-process; tools/stflow.cpp only forwards argv.

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "stflow/model.hpp"
#include "stflow/trainer.hpp"

namespace stflow {

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitUsage = 2,
  kExitIo = 3,
  kExitCompatibility = 4,
  kExitNumerical = 5,
};

struct DataSection {
  std::string dir;
  /// Test split = the last `test_days` days, unless `test_start` is set.
  double test_days = 10;
  std::string test_start;
};

/// Applied on top of the model section. A flag set to false removes the
/// component even when the model section enables it; closeness 0 keeps the
/// model's value.
struct AblationSection {
  bool long_skip = true;
  bool attention = true;
  bool external = true;
  std::size_t closeness = 0;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataSection data;
  AblationSection ablation;

  /// Strict: unknown sections or keys, and wrong value types, throw ConfigError.
  static RunConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  /// Model section with the ablation applied.
  ModelConfig effective_model() const;
};

/// Applies "section.key=value" to a config document. The value is read as
/// JSON when it parses (numbers, booleans, arrays) and as a string otherwise.
void apply_override(nlohmann::json& doc, const std::string& assignment);

/// Reads a config file (or starts from defaults when `path` is empty) and
/// applies the overrides in order.
RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides);

/// Full-network gradient check in 64-bit: a batch of two random samples, MSE
/// against a random target, BN in training mode with frozen running stats,
/// and `samples` distinct parameter elements drawn uniformly.
GradcheckResult model_gradcheck(const ModelConfig& config, std::size_t samples, std::uint64_t seed);
inline constexpr double kGradcheckThreshold = 1e-5;

/// STFLOW_THREADS, default 1. Throws ConfigError on a malformed value.
std::size_t thread_budget();

/// Runs one command line (argv[0] is skipped). Diagnostics go to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace stflow
