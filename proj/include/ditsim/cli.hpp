#pragma once

// Experiment configuration and the verify / run / sweep / plan commands.
//
// Config file (JSON, schema_version 1):
//   { "schema_version": 1,
//     "model": {"num_layers": 4, "hidden_size": 32, "num_heads": 4, "ffn_multiplier": 4,
//               "conditioning": "adaln_zero", "topology": "linear",
//               "image_tokens": 64, "text_tokens": 8, "latent_channels": 4},
//     "diffusion": {"num_steps": 8, "alpha": 0.125, "guidance_scale": 0, "guided": false},
//     "parallel": {"strategy": "pipefusion", "cfg": 1, "pipefusion": 4, "ulysses": 1,
//                  "ring": 1, "tensor_parallel": 1, "distrifusion": 1, "patches": 4,
//                  "warmup": 1, "naive_sp": false},
//     "topology": "topo.json",
//     "seed": 2024, "out": "out",
//     "sweep": {"strategies": ["sp_ulysses"], "devices": [1, 2, 4], "patches": [4],
//               "tokens": [64]},
//     "plan": {"preset": "tokens-64k", "element_size": 2, "exhaustive_placement": false} }
// Every block is optional. Relative paths resolve against the config file.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "ditsim/planner.hpp"
#include "ditsim/strategies.hpp"

namespace ditsim::cli {

inline constexpr int kSchemaVersion = 1;

enum ExitCode : int { kOk = 0, kInvariantFailure = 1, kUsageError = 2 };

/// Bad or inconsistent configuration; maps to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SweepGrid {
  std::vector<Strategy> strategies;
  std::vector<std::size_t> devices;
  std::vector<std::size_t> patches = {1};
  std::vector<std::size_t> tokens;  // image tokens; empty keeps the model's
};

struct PlanSettings {
  std::string preset;  // empty: plan for the model block as written
  double element_size = 8;
  bool exhaustive_placement = false;
  std::vector<std::size_t> patch_sweep = {2, 4, 8, 16, 32};
};

struct ExperimentConfig {
  int schema_version = kSchemaVersion;
  DiTSpec model;
  DiffusionSpec diffusion;
  bool guided = false;
  ParallelConfig parallel;
  std::filesystem::path topology;  // empty: NVLink-like single node
  std::uint64_t seed = 2024;
  std::filesystem::path out = "out";
  SweepGrid sweep;
  PlanSettings plan;

  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& config);
/// `base` resolves relative paths.
ExperimentConfig config_from_json(const nlohmann::json& j, const std::filesystem::path& base = {});
ExperimentConfig load_config(const std::filesystem::path& path);

/// Planner-scale token presets. The source gives two figures for 1024px-class
/// images, so both are offered.
struct TokenPreset {
  std::string name;
  std::size_t image_tokens;
  std::string note;
};
const std::vector<TokenPreset>& token_presets();
const TokenPreset& find_preset(const std::string& name);

/// (pixels / (vae_factor * patch))^2 image tokens for a square image.
std::size_t tokens_for_resolution(std::size_t pixels, std::size_t vae_factor = 8,
                                  std::size_t patch = 2);

/// The topology named by the config, or a 600 GB/s single node of `devices`.
sim::Topology resolve_topology(const ExperimentConfig& config, std::size_t devices);
/// Same links, resized to `devices` (whole nodes once it exceeds one node).
sim::Topology resize_topology(const sim::Topology& topology, std::size_t devices);

/// Canonical configuration of `strategy` on n devices.
ParallelConfig config_for(Strategy strategy, std::size_t n, std::size_t patches,
                          std::size_t warmup);

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct VerifyReport {
  std::vector<CheckResult> checks;
  bool passed() const;
  nlohmann::json to_json() const;
};

/// Oracle-equivalence, warmup exactness, staleness conformance and hybrid
/// checks on the configured model, plus a run of the configured parallel
/// block against serial.
VerifyReport verify(const ExperimentConfig& config);

struct RunSummary {
  ParallelConfig parallel;
  std::vector<DivergenceRow> divergence;
  CostReport cost;
  planner::CostReport predicted;
  nlohmann::json to_json() const;
};

/// Throws ConfigError for infeasible parallel blocks.
RunSummary run(const ExperimentConfig& config);

struct SweepCell {
  Strategy strategy = Strategy::serial;
  std::size_t devices = 1;
  std::size_t patches = 1;
  std::size_t tokens = 0;
  std::string violation;        // empty when the cell ran
  std::optional<RunSummary> result;
};

std::vector<SweepCell> sweep(const ExperimentConfig& config);
void write_sweep_csv(std::ostream& out, const std::vector<SweepCell>& cells);
void write_infeasible_csv(std::ostream& out, const std::vector<SweepCell>& cells);

/// Ranked plans for the topology's device count.
std::vector<planner::PlanCandidate> plan(const ExperimentConfig& config);

/// Entry point shared by the tool and the tests. Writes files under the
/// configured output directory and a short log to `log`.
int main_entry(int argc, const char* const* argv, std::ostream& log, std::ostream& err);

}  // namespace ditsim::cli
