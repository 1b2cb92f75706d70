#include <algorithm>
#include <fstream>
#include <ostream>

#include "ditsim/strategies.hpp"

namespace ditsim {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw ContractError(what);
}

}  // namespace

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::serial: return "serial";
    case Strategy::tensor_parallel: return "tensor_parallel";
    case Strategy::sp_ulysses: return "sp_ulysses";
    case Strategy::sp_ring: return "sp_ring";
    case Strategy::usp: return "usp";
    case Strategy::distrifusion: return "distrifusion";
    case Strategy::pipefusion: return "pipefusion";
    case Strategy::cfg_parallel: return "cfg_parallel";
    case Strategy::hybrid: return "hybrid";
  }
  return "?";
}

Strategy parse_strategy(const std::string& name) {
  for (Strategy s : {Strategy::serial, Strategy::tensor_parallel, Strategy::sp_ulysses,
                     Strategy::sp_ring, Strategy::usp, Strategy::distrifusion,
                     Strategy::pipefusion, Strategy::cfg_parallel, Strategy::hybrid})
    if (to_string(s) == name) return s;
  throw ContractError("unknown strategy '" + name + "'");
}

// ---- ParallelConfig ----------------------------------------------------------

std::string ParallelConfig::label() const {
  if (strategy == Strategy::tensor_parallel) return "tp" + std::to_string(tensor_parallel);
  if (strategy == Strategy::distrifusion) return "distrifusion" + std::to_string(distrifusion);
  std::string s = "cfg" + std::to_string(cfg) + "-pp" + std::to_string(pipefusion) + "-u" +
                  std::to_string(ulysses) + "-r" + std::to_string(ring) + "-M" +
                  std::to_string(num_patches);
  if (naive_sp) s += "-naive";
  return s;
}

void ParallelConfig::validate(const DiTSpec& spec, bool guided) const {
  spec.validate();
  require(cfg >= 1 && pipefusion >= 1 && ulysses >= 1 && ring >= 1 && tensor_parallel >= 1 &&
              distrifusion >= 1 && num_patches >= 1,
          "parallel degrees must be positive");
  require(cfg <= 2, "cfg degree must be 1 or 2");
  if (cfg == 2) require(guided, "cfg parallelism needs an unconditional prompt");

  if (strategy == Strategy::tensor_parallel) {
    require(num_devices() == tensor_parallel,
            "tensor parallelism does not combine with other axes here");
    require(spec.num_heads % tensor_parallel == 0, "heads not divisible by the TP degree");
    require(spec.ffn_hidden() % tensor_parallel == 0,
            "FFN hidden size not divisible by the TP degree");
    return;
  }
  require(tensor_parallel == 1, "tensor_parallel degree set for a non-TP strategy");

  if (strategy == Strategy::distrifusion) {
    const std::size_t n = distrifusion;
    require(num_devices() == n, "DistriFusion does not combine with other axes here");
    require(num_patches == n, "DistriFusion needs M == N");
    require(n == 1 || warmup_steps >= 1, "DistriFusion needs at least one warmup step");
    PatchPlan(spec, n, 1, TextPlacement::spread);
    return;
  }
  require(distrifusion == 1, "distrifusion degree set for another strategy");

  require(spec.num_heads % ulysses == 0,
          "heads (" + std::to_string(spec.num_heads) + ") not divisible by ulysses degree " +
              std::to_string(ulysses));
  require(spec.num_layers % pipefusion == 0, "layers do not split evenly into stages");
  require(num_patches >= pipefusion, "PipeFusion needs at least as many patches as stages");
  require(num_patches * sp() <= spec.image_tokens, "more shards than image tokens");
  require(num_patches == 1 || warmup_steps >= 1,
          "patched execution needs at least one warmup step");
  require(!naive_sp || num_patches > 1, "the naive-SP ablation needs a KV buffer (M > 1)");
  PatchPlan(spec, num_patches, sp(), TextPlacement::first_patch);
}

ParallelConfig ParallelConfig::serial() { return {}; }

ParallelConfig ParallelConfig::tp(std::size_t n) {
  ParallelConfig c;
  c.strategy = Strategy::tensor_parallel;
  c.tensor_parallel = n;
  return c;
}

ParallelConfig ParallelConfig::ulysses_sp(std::size_t n) {
  ParallelConfig c;
  c.strategy = Strategy::sp_ulysses;
  c.ulysses = n;
  return c;
}

ParallelConfig ParallelConfig::ring_sp(std::size_t n) {
  ParallelConfig c;
  c.strategy = Strategy::sp_ring;
  c.ring = n;
  return c;
}

ParallelConfig ParallelConfig::usp(std::size_t u, std::size_t r) {
  ParallelConfig c;
  c.strategy = Strategy::usp;
  c.ulysses = u;
  c.ring = r;
  return c;
}

ParallelConfig ParallelConfig::pipefusion_only(std::size_t n, std::size_t patches,
                                               std::size_t warmup) {
  ParallelConfig c;
  c.strategy = Strategy::pipefusion;
  c.pipefusion = n;
  c.num_patches = patches;
  c.warmup_steps = warmup;
  return c;
}

ParallelConfig ParallelConfig::distrifusion_only(std::size_t n, std::size_t warmup) {
  ParallelConfig c;
  c.strategy = Strategy::distrifusion;
  c.distrifusion = n;
  c.num_patches = n;
  c.warmup_steps = warmup;
  return c;
}

// ---- PatchPlan ---------------------------------------------------------------

PatchPlan::PatchPlan(const DiTSpec& spec, std::size_t patches, std::size_t sp,
                     TextPlacement text)
    : seq_(spec.sequence_length()), sp_(sp) {
  require(patches >= 1 && sp >= 1, "patch and shard counts must be positive");
  require(patches <= spec.image_tokens, "more patches than image tokens");
  const std::size_t p = spec.image_tokens;
  const std::size_t off = spec.image_offset();
  const std::size_t s_txt = off;
  owner_.assign(seq_, 0);
  for (std::size_t m = 0; m < patches; ++m) {
    const std::size_t i0 = m * p / patches, i1 = (m + 1) * p / patches;
    std::size_t t0 = 0, t1 = 0;
    if (text == TextPlacement::first_patch) {
      t1 = m == 0 ? s_txt : 0;
    } else {
      t0 = m * s_txt / patches;
      t1 = (m + 1) * s_txt / patches;
    }
    const std::size_t n_txt = t1 - t0, n_img = i1 - i0;
    require(n_img % sp == 0 && n_txt % sp == 0,
            "ragged shards: patch " + std::to_string(m) + " holds " + std::to_string(n_img) +
                " image and " + std::to_string(n_txt) + " text tokens for " +
                std::to_string(sp) + " shards");
    images_.emplace_back(i0, i1);
    std::vector<std::size_t> all;
    std::vector<std::vector<std::size_t>> shards(sp);
    for (std::size_t i = 0; i < sp; ++i) {
      for (std::size_t k = t0 + i * n_txt / sp; k < t0 + (i + 1) * n_txt / sp; ++k)
        shards[i].push_back(k);
      for (std::size_t k = i0 + i * n_img / sp; k < i0 + (i + 1) * n_img / sp; ++k)
        shards[i].push_back(off + k);
    }
    for (std::size_t k = t0; k < t1; ++k) all.push_back(k);
    for (std::size_t k = i0; k < i1; ++k) all.push_back(off + k);
    for (std::size_t id : all) owner_[id] = m;
    patches_.push_back(std::move(all));
    shards_.push_back(std::move(shards));
  }
}

const std::vector<std::size_t>& PatchPlan::shard(std::size_t m, std::size_t i) const {
  return shards_.at(m).at(i);
}

// ---- Reports -----------------------------------------------------------------

double CostReport::max_param_bytes() const {
  return param_bytes.empty() ? 0.0 : *std::max_element(param_bytes.begin(), param_bytes.end());
}

double CostReport::max_kv_bytes() const {
  return kv_bytes.empty() ? 0.0 : *std::max_element(kv_bytes.begin(), kv_bytes.end());
}

std::vector<DivergenceRow> divergence_report(const std::vector<LatentState>& trace,
                                             const std::vector<LatentState>& reference) {
  require(trace.size() == reference.size(), "divergence_report: traces differ in length");
  std::vector<DivergenceRow> rows;
  for (std::size_t k = 0; k < trace.size(); ++k) {
    require(trace[k].t == reference[k].t, "divergence_report: timesteps differ");
    rows.push_back({trace[k].t, max_abs_diff(trace[k].x, reference[k].x),
                    relative_l2(trace[k].x, reference[k].x)});
  }
  return rows;
}

void write_divergence_csv(std::ostream& out, const std::vector<DivergenceRow>& rows) {
  out << "step,max_abs,rel_l2\n";
  out.precision(17);
  for (const auto& r : rows) out << r.step << ',' << r.max_abs << ',' << r.rel_l2 << '\n';
}

void write_divergence_csv(const std::filesystem::path& path,
                          const std::vector<DivergenceRow>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_divergence_csv(out, rows);
}

double max_trace_relative_error(const std::vector<LatentState>& trace,
                                const std::vector<LatentState>& reference) {
  require(trace.size() == reference.size(), "traces differ in length");
  double worst = 0;
  for (std::size_t k = 0; k < trace.size(); ++k)
    worst = std::max(worst, max_relative_error(trace[k].x, reference[k].x));
  return worst;
}

bool traces_bitwise_equal(const std::vector<LatentState>& a, const std::vector<LatentState>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t k = 0; k < a.size(); ++k)
    if (a[k].t != b[k].t || !bitwise_equal(a[k].x, b[k].x)) return false;
  return true;
}

double block_flops(const DiTSpec& spec, double rows, double keys, double head_fraction,
                   double ffn_fraction) {
  const double hs = static_cast<double>(spec.hidden_size);
  const double ffn = static_cast<double>(spec.ffn_hidden());
  const double attn = 8.0 * rows * hs * hs * head_fraction + 4.0 * rows * keys * hs * head_fraction;
  const double mlp = 4.0 * rows * hs * ffn * ffn_fraction;
  return attn + mlp;
}

// ---- Dispatch ----------------------------------------------------------------

RunResult run_strategy(sim::Simulator& sim, const ParallelConfig& config, const DiTSpec& spec,
                       const DiffusionSpec& sched, const Weights& weights, const Tensor& x_T,
                       const Prompt& prompt) {
  switch (config.strategy) {
    case Strategy::tensor_parallel:
    case Strategy::distrifusion:
      break;
    default:
      return run_hybrid(sim, config, spec, sched, weights, x_T, prompt);
  }
  if (config.strategy == Strategy::tensor_parallel) {
    require(sim.num_devices() == config.tensor_parallel,
            "topology size does not match the TP degree");
    return run_tensor_parallel(sim, spec, sched, weights, x_T, prompt);
  }
  require(sim.num_devices() == config.distrifusion,
          "topology size does not match the DistriFusion degree");
  return run_distrifusion(sim, config.warmup_steps, spec, sched, weights, x_T, prompt);
}

RunResult run_sp_ulysses(sim::Simulator& sim, const DiTSpec& spec, const DiffusionSpec& sched,
                         const Weights& weights, const Tensor& x_T, const Prompt& prompt) {
  return run_hybrid(sim, ParallelConfig::ulysses_sp(sim.num_devices()), spec, sched, weights,
                    x_T, prompt);
}

RunResult run_sp_ring(sim::Simulator& sim, const DiTSpec& spec, const DiffusionSpec& sched,
                      const Weights& weights, const Tensor& x_T, const Prompt& prompt) {
  return run_hybrid(sim, ParallelConfig::ring_sp(sim.num_devices()), spec, sched, weights, x_T,
                    prompt);
}

RunResult run_usp(sim::Simulator& sim, std::size_t ulysses, std::size_t ring,
                  const DiTSpec& spec, const DiffusionSpec& sched, const Weights& weights,
                  const Tensor& x_T, const Prompt& prompt) {
  return run_hybrid(sim, ParallelConfig::usp(ulysses, ring), spec, sched, weights, x_T,
                    prompt);
}

RunResult run_pipefusion(sim::Simulator& sim, std::size_t patches, std::size_t warmup,
                         const DiTSpec& spec, const DiffusionSpec& sched,
                         const Weights& weights, const Tensor& x_T, const Prompt& prompt) {
  return run_hybrid(sim, ParallelConfig::pipefusion_only(sim.num_devices(), patches, warmup),
                    spec, sched, weights, x_T, prompt);
}

RunResult run_cfg_parallel(sim::Simulator& sim, const ParallelConfig& inner,
                           const DiTSpec& spec, const DiffusionSpec& sched,
                           const Weights& weights, const Tensor& x_T, const Prompt& prompt) {
  require(inner.cfg == 1, "inner strategy already uses the cfg axis");
  require(inner.strategy != Strategy::tensor_parallel &&
              inner.strategy != Strategy::distrifusion,
          "cfg parallelism composes with the mesh strategies only");
  ParallelConfig c = inner;
  c.cfg = 2;
  c.strategy = Strategy::cfg_parallel;
  return run_hybrid(sim, c, spec, sched, weights, x_T, prompt);
}

}  // namespace ditsim
