#pragma once

// Analytical per-step communication and memory model, a latency predictor on
// top of a simnet topology, and an exhaustive hybrid-plan search.

#include <array>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "ditsim/simnet.hpp"
#include "ditsim/strategies.hpp"

namespace ditsim::planner {

struct ModelDims {
  double p = 0;  // attended sequence length
  double hs = 0;
  std::size_t layers = 0;
  std::size_t heads = 0;
  double ffn = 0;
  double image_tokens = 0;
  double latent_channels = 0;
  bool u_skip = false;
  double element_size = 8;

  double param_bytes = 0;  // P
  double io_bytes = 0;
  double block_bytes = 0;       // one block without skip projection
  double skip_bytes = 0;        // one skip projection
  double tp_sharded_bytes = 0;  // per block

  double kv_bytes() const { return 2 * p * hs * element_size; }
  /// Whether block `l` consumes a skip connection.
  bool has_skip(std::size_t l) const { return u_skip && l >= layers / 2; }
  void validate() const;

  static ModelDims from_spec(const DiTSpec& spec, double element_size = 8);
};

/// Bytes one device sends in one timestep, keyed by collective kind
/// ("all_reduce", "all_gather", "all_to_all", "p2p"). Reported for the
/// busiest device.
struct CommCost {
  std::map<std::string, double> bytes;
  double overlapped = 0;  // part of the total that can hide behind compute

  double total() const;
  bool overlap() const { return total() > 0 && overlapped == total(); }
};

CommCost comm_cost(Strategy strategy, const ModelDims& dims, std::size_t n);
CommCost comm_cost(const ParallelConfig& config, const ModelDims& dims, bool guided);

struct MemoryCost {
  double param = 0;
  double kv = 0;
};

/// Closed-form per-device memory: weights and K/V activations.
MemoryCost memory_cost(Strategy strategy, const ModelDims& dims, std::size_t n);
/// Exact per-device maxima for what the engines allocate.
MemoryCost memory_cost(const ParallelConfig& config, const ModelDims& dims, bool guided);

/// Mesh axes listed outermost first. The engines use cfg, pipefusion, ring,
/// ulysses.
using Placement = std::array<sim::Axis, 4>;
inline constexpr Placement kDefaultPlacement = {sim::Axis::cfg, sim::Axis::pipefusion,
                                                sim::Axis::ring, sim::Axis::ulysses};
std::string to_string(const Placement& placement);

/// Device groups of one axis under a placement.
std::vector<std::vector<std::size_t>> axis_groups(const sim::MeshGrid& grid,
                                                  const Placement& placement, sim::Axis axis);

struct CostReport {
  CommCost comm;
  double compute_time = 0;
  double exposed_comm_time = 0;
  double overlapped_comm_time = 0;
  double param_bytes = 0;
  double kv_bytes = 0;
  double activation_bytes = 0;
  double step_latency = 0;
  double warmup_surcharge = 0;
  double end_to_end = 0;  // T * step_latency + warmup_surcharge
};

struct PlanCandidate {
  ParallelConfig config;
  Placement placement = kDefaultPlacement;
  std::optional<CostReport> cost;
  std::string violation;  // empty when feasible

  bool feasible() const { return violation.empty(); }
};

struct PlanOptions {
  bool guided = true;
  std::size_t warmup_steps = 1;
  std::vector<std::size_t> patch_sweep = {2, 4, 8, 16, 32};
  bool exhaustive_placement = false;
};

CostReport predict_latency(const PlanCandidate& candidate, const ModelDims& dims,
                           const DiffusionSpec& sched, const sim::Topology& topology,
                           bool guided = true);

/// Every cfg x pipefusion x ulysses x ring factorization of n, with the patch
/// count swept when pipefusion > 1. Infeasible candidates carry the reason.
std::vector<PlanCandidate> enumerate_plans(std::size_t n, const ModelDims& dims,
                                           const DiTSpec& spec, const DiffusionSpec& sched,
                                           const sim::Topology& topology,
                                           const PlanOptions& options = {});

/// Feasible candidates by ascending end-to-end latency, ties broken by
/// (cfg, pipefusion, ulysses, ring, patches, placement).
std::vector<PlanCandidate> rank_plans(std::vector<PlanCandidate> candidates);

void write_plans_csv(std::ostream& out, const std::vector<PlanCandidate>& plans);
nlohmann::json plans_to_json(const std::vector<PlanCandidate>& plans);

}  // namespace ditsim::planner
