#pragma once

// Parallel execution strategies simulated on a sim::Simulator.
//
// One engine covers the 4D mesh (cfg x pipefusion x ring x ulysses): serial,
// SP-Ulysses, SP-Ring, USP, PipeFusion, CFG parallel and their hybrids are
// all configurations of it. Tensor parallelism and DistriFusion replicate or
// shard the model differently and have their own engines.

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "ditsim/freshness.hpp"
#include "ditsim/model.hpp"
#include "ditsim/simnet.hpp"

namespace ditsim {

enum class Strategy {
  serial,
  tensor_parallel,
  sp_ulysses,
  sp_ring,
  usp,
  distrifusion,
  pipefusion,
  cfg_parallel,
  hybrid,
};

std::string to_string(Strategy s);
Strategy parse_strategy(const std::string& name);

/// Raised when devices of one SP group disagree about buffered K/V.
class KVConsistencyError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct ParallelConfig {
  Strategy strategy = Strategy::serial;
  std::size_t cfg = 1;
  std::size_t pipefusion = 1;
  std::size_t ulysses = 1;
  std::size_t ring = 1;
  std::size_t tensor_parallel = 1;
  std::size_t distrifusion = 1;
  std::size_t num_patches = 1;  // M
  std::size_t warmup_steps = 1;
  /// Ablation: each device keeps only the K/V rows it computed itself.
  bool naive_sp = false;
  /// Throw KVConsistencyError on the first inconsistent buffer; when false the
  /// violations are only counted.
  bool assert_kv_consistency = true;

  std::size_t num_devices() const {
    return cfg * pipefusion * ulysses * ring * tensor_parallel * distrifusion;
  }
  std::size_t sp() const { return ulysses * ring; }
  sim::MeshGrid grid() const { return {cfg, pipefusion, ulysses, ring}; }
  std::string label() const;

  /// Throws ContractError when the configuration cannot run `spec`.
  void validate(const DiTSpec& spec, bool guided) const;

  static ParallelConfig serial();
  static ParallelConfig tp(std::size_t n);
  static ParallelConfig ulysses_sp(std::size_t n);
  static ParallelConfig ring_sp(std::size_t n);
  static ParallelConfig usp(std::size_t ulysses, std::size_t ring);
  static ParallelConfig pipefusion_only(std::size_t n, std::size_t patches, std::size_t warmup);
  static ParallelConfig distrifusion_only(std::size_t n, std::size_t warmup);
};

/// How in_context text tokens are spread over patches.
enum class TextPlacement { first_patch, spread };

/// Splits the attended sequence into M patches and every patch into sp
/// shards. Token ids are positions in the attended sequence (text first in
/// in_context mode). Patch m covers image rows [m·p/M, (m+1)·p/M); shard i of
/// a patch is (text shard i, image shard i) so shapes agree across an SP group.
class PatchPlan {
 public:
  PatchPlan(const DiTSpec& spec, std::size_t patches, std::size_t sp,
            TextPlacement text = TextPlacement::first_patch);

  std::size_t patches() const { return patches_.size(); }
  std::size_t sp() const { return sp_; }
  std::size_t sequence_length() const { return seq_; }

  /// All token ids of patch m, ascending.
  const std::vector<std::size_t>& patch(std::size_t m) const { return patches_.at(m); }
  /// Token ids of shard i of patch m: its text rows then its image rows.
  const std::vector<std::size_t>& shard(std::size_t m, std::size_t i) const;
  std::size_t patch_of(std::size_t token) const { return owner_.at(token); }
  /// Image row range [begin, end) of patch m.
  std::pair<std::size_t, std::size_t> image_range(std::size_t m) const { return images_.at(m); }

 private:
  std::size_t seq_ = 0;
  std::size_t sp_ = 1;
  std::vector<std::vector<std::size_t>> patches_;
  std::vector<std::vector<std::vector<std::size_t>>> shards_;
  std::vector<std::size_t> owner_;
  std::vector<std::pair<std::size_t, std::size_t>> images_;
};

struct DivergenceRow {
  std::size_t step = 0;  // t of the compared latent
  double max_abs = 0;
  double rel_l2 = 0;
};

struct CostReport {
  sim::ElapsedReport sim;
  double comm_bytes = 0;              // max over devices of bytes sent in the run
  std::vector<double> param_bytes;    // weight bytes held per device
  std::vector<double> kv_bytes;       // KV-buffer bytes held per device
  std::size_t kv_violations = 0;      // inconsistent (block, unit) checks
  double makespan() const { return sim.makespan(); }
  double max_param_bytes() const;
  double max_kv_bytes() const;
};

struct RunResult {
  std::vector<LatentState> trace;  // x_T ... x_0
  CostReport cost;
  FreshnessTable freshness;        // empty for strategies without stale K/V
};

/// Dispatches on config.strategy. The simulator's topology must have exactly
/// config.num_devices() devices.
RunResult run_strategy(sim::Simulator& sim, const ParallelConfig& config, const DiTSpec& spec,
                       const DiffusionSpec& sched, const Weights& weights, const Tensor& x_T,
                       const Prompt& prompt);

/// The 4D-mesh engine (serial, SP, USP, PipeFusion, CFG and hybrids).
RunResult run_hybrid(sim::Simulator& sim, const ParallelConfig& config, const DiTSpec& spec,
                     const DiffusionSpec& sched, const Weights& weights, const Tensor& x_T,
                     const Prompt& prompt);

RunResult run_tensor_parallel(sim::Simulator& sim, const DiTSpec& spec,
                              const DiffusionSpec& sched, const Weights& weights,
                              const Tensor& x_T, const Prompt& prompt);
RunResult run_sp_ulysses(sim::Simulator& sim, const DiTSpec& spec, const DiffusionSpec& sched,
                         const Weights& weights, const Tensor& x_T, const Prompt& prompt);
RunResult run_sp_ring(sim::Simulator& sim, const DiTSpec& spec, const DiffusionSpec& sched,
                      const Weights& weights, const Tensor& x_T, const Prompt& prompt);
RunResult run_usp(sim::Simulator& sim, std::size_t ulysses, std::size_t ring,
                  const DiTSpec& spec, const DiffusionSpec& sched, const Weights& weights,
                  const Tensor& x_T, const Prompt& prompt);
RunResult run_pipefusion(sim::Simulator& sim, std::size_t patches, std::size_t warmup,
                         const DiTSpec& spec, const DiffusionSpec& sched,
                         const Weights& weights, const Tensor& x_T, const Prompt& prompt);
RunResult run_distrifusion(sim::Simulator& sim, std::size_t warmup, const DiTSpec& spec,
                           const DiffusionSpec& sched, const Weights& weights,
                           const Tensor& x_T, const Prompt& prompt);
/// Runs `inner` on each half of the mesh, one guidance branch per half.
RunResult run_cfg_parallel(sim::Simulator& sim, const ParallelConfig& inner,
                           const DiTSpec& spec, const DiffusionSpec& sched,
                           const Weights& weights, const Tensor& x_T, const Prompt& prompt);

/// Per-step distance between a strategy trace and the serial trace.
std::vector<DivergenceRow> divergence_report(const std::vector<LatentState>& trace,
                                             const std::vector<LatentState>& reference);
void write_divergence_csv(std::ostream& out, const std::vector<DivergenceRow>& rows);
void write_divergence_csv(const std::filesystem::path& path,
                          const std::vector<DivergenceRow>& rows);

/// Largest per-step max relative error (max|a-b| / max|b|) between traces.
double max_trace_relative_error(const std::vector<LatentState>& trace,
                                const std::vector<LatentState>& reference);
bool traces_bitwise_equal(const std::vector<LatentState>& a, const std::vector<LatentState>& b);

/// Floating-point work of one block for `rows` query rows attending over
/// `keys` keys with a fraction of the heads / FFN columns.
double block_flops(const DiTSpec& spec, double rows, double keys, double head_fraction = 1.0,
                   double ffn_fraction = 1.0);

}  // namespace ditsim
