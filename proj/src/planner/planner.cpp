#include "ditsim/planner.hpp"

#include <algorithm>
#include <numeric>
#include <ostream>
#include <tuple>

namespace ditsim::planner {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw ContractError(what);
}

std::size_t branches_per_device(const ParallelConfig& c, bool guided) {
  return guided && c.cfg == 1 ? 2 : 1;
}

std::size_t stage_of(std::size_t layer, std::size_t layers, std::size_t stages) {
  return layer * stages / layers;
}

/// Blocks on `stage` whose output feeds a skip connection consumed on a
/// different stage.
std::size_t cross_stage_skips(const ModelDims& dims, std::size_t stages, std::size_t stage) {
  std::size_t n = 0;
  const std::size_t L = dims.layers;
  for (std::size_t consumer = 0; consumer < L; ++consumer) {
    if (!dims.has_skip(consumer)) continue;
    const std::size_t producer = L - 1 - consumer;
    if (producer >= consumer) continue;
    if (stage_of(producer, L, stages) == stage && stage_of(consumer, L, stages) != stage) ++n;
  }
  return n;
}

struct MeshBytes {
  double ulysses = 0;   // per block
  double ring = 0;      // per block
  double pipeline = 0;  // per step
  double skip = 0;      // per cross-stage skip per step
  double cfg = 0;       // per step, stage 0 only
};

MeshBytes mesh_bytes(const ParallelConfig& c, const ModelDims& d) {
  const double E = d.element_size;
  const double U = static_cast<double>(c.ulysses), R = static_cast<double>(c.ring);
  const double sp = U * R;
  const double shard = d.p / sp * d.hs * E;
  MeshBytes b;
  if (c.ulysses > 1) b.ulysses = 4 * shard;
  if (c.ring > 1) b.ring = 2 * (R - 1) * (d.p / R) * (d.hs / U) * E;
  if (c.pipefusion > 1) {
    b.pipeline = shard;
    b.skip = shard;
  }
  if (c.cfg == 2) b.cfg = d.image_tokens / sp * d.latent_channels * E;
  return b;
}

ParallelConfig single_axis(Strategy strategy, std::size_t n) {
  require(n >= 1, "device count must be positive");
  switch (strategy) {
    case Strategy::serial:
      require(n == 1, "serial runs on one device");
      return ParallelConfig::serial();
    case Strategy::tensor_parallel: return ParallelConfig::tp(n);
    case Strategy::sp_ulysses: return ParallelConfig::ulysses_sp(n);
    case Strategy::sp_ring: return ParallelConfig::ring_sp(n);
    case Strategy::distrifusion: return ParallelConfig::distrifusion_only(n, 1);
    case Strategy::pipefusion: return ParallelConfig::pipefusion_only(n, n, 1);
    case Strategy::cfg_parallel: {
      require(n <= 2, "cfg parallelism spans at most two devices");
      ParallelConfig c;
      c.strategy = Strategy::cfg_parallel;
      c.cfg = n;
      return c;
    }
    case Strategy::usp:
    case Strategy::hybrid: break;
  }
  throw ContractError(to_string(strategy) +
                      " has more than one degree; pass a ParallelConfig instead");
}

double block_flops(const ModelDims& d, double rows, double keys, double fraction) {
  return 8 * rows * d.hs * d.hs * fraction + 4 * rows * keys * d.hs * fraction +
         4 * rows * d.hs * d.ffn * fraction;
}

/// Time of `count` operations of `hops` latency each moving `bytes` in total.
double transfer_time(const sim::Link& link, double count, double hops, double bytes) {
  return count * hops * link.latency + bytes / link.bandwidth;
}

std::size_t placement_index(sim::Axis a) { return static_cast<std::size_t>(a); }

}  // namespace

// ---- ModelDims ----------------------------------------------------------------

void ModelDims::validate() const {
  require(p > 0 && hs > 0 && layers > 0 && heads > 0 && ffn > 0, "model dims must be positive");
  require(image_tokens > 0 && latent_channels > 0, "latent dims must be positive");
  require(element_size > 0, "element size must be positive");
  require(param_bytes > 0, "parameter bytes must be positive");
}

ModelDims ModelDims::from_spec(const DiTSpec& spec, double element_size) {
  spec.validate();
  const ParameterCounts pc = parameter_counts(spec);
  ModelDims d;
  d.p = static_cast<double>(spec.sequence_length());
  d.hs = static_cast<double>(spec.hidden_size);
  d.layers = spec.num_layers;
  d.heads = spec.num_heads;
  d.ffn = static_cast<double>(spec.ffn_hidden());
  d.image_tokens = static_cast<double>(spec.image_tokens);
  d.latent_channels = static_cast<double>(spec.latent_channels);
  d.u_skip = spec.topology == BlockTopology::u_skip;
  d.element_size = element_size;
  d.param_bytes = static_cast<double>(pc.total()) * element_size;
  d.io_bytes = static_cast<double>(pc.io) * element_size;
  d.block_bytes = static_cast<double>(pc.block) * element_size;
  d.skip_bytes = static_cast<double>(pc.skip) * element_size;
  d.tp_sharded_bytes = static_cast<double>(pc.tp_sharded) * element_size;
  return d;
}

// ---- Communication ------------------------------------------------------------

double CommCost::total() const {
  double t = 0;
  for (const auto& [kind, b] : bytes) t += b;
  return t;
}

CommCost comm_cost(Strategy strategy, const ModelDims& dims, std::size_t n) {
  return comm_cost(single_axis(strategy, n), dims, strategy == Strategy::cfg_parallel && n == 2);
}

CommCost comm_cost(const ParallelConfig& c, const ModelDims& d, bool guided) {
  d.validate();
  const double E = d.element_size, L = static_cast<double>(d.layers);
  const double seq = d.p * d.hs * E;
  const double branches = static_cast<double>(guided ? 2 : 1);
  CommCost out;
  if (c.strategy == Strategy::tensor_parallel) {
    const double n = static_cast<double>(c.tensor_parallel);
    if (c.tensor_parallel > 1) out.bytes["all_reduce"] = branches * 2 * L * (2 * (n - 1) * seq / n);
    return out;
  }
  if (c.strategy == Strategy::distrifusion) {
    const double n = static_cast<double>(c.distrifusion);
    if (c.distrifusion > 1) {
      out.bytes["all_gather"] = branches * 2 * L * ((n - 1) * seq / n);
      out.overlapped = out.bytes["all_gather"];
    }
    return out;
  }

  const MeshBytes mb = mesh_bytes(c, d);
  const double b = static_cast<double>(branches_per_device(c, guided));
  const double per_stage = L / static_cast<double>(c.pipefusion);
  for (std::size_t stage = 0; stage < c.pipefusion; ++stage) {
    const double skips = static_cast<double>(cross_stage_skips(d, c.pipefusion, stage));
    CommCost dev;
    const double a2a = b * per_stage * mb.ulysses;
    const double ring = b * per_stage * mb.ring;
    const double pipe = b * mb.pipeline;
    const double p2p = ring + pipe + b * skips * mb.skip;
    const double gather = stage == 0 ? mb.cfg : 0.0;
    if (a2a > 0) dev.bytes["all_to_all"] = a2a;
    if (p2p > 0) dev.bytes["p2p"] = p2p;
    if (gather > 0) dev.bytes["all_gather"] = gather;
    dev.overlapped = ring + pipe;
    if (stage == 0 || dev.total() > out.total()) out = dev;
  }
  return out;
}

// ---- Memory -------------------------------------------------------------------

MemoryCost memory_cost(Strategy strategy, const ModelDims& d, std::size_t n) {
  d.validate();
  require(n >= 1, "device count must be positive");
  const double N = static_cast<double>(n), P = d.param_bytes, KV = d.kv_bytes();
  const double L = static_cast<double>(d.layers);
  switch (strategy) {
    case Strategy::serial:
    case Strategy::cfg_parallel: return {P, KV};
    case Strategy::tensor_parallel: return {P / N, KV / N};
    case Strategy::sp_ulysses:
    case Strategy::sp_ring:
    case Strategy::usp: return {P, KV / N};
    case Strategy::distrifusion: return {P, KV * L};
    case Strategy::pipefusion: return {P / N, KV * L / N};
    case Strategy::hybrid: break;
  }
  throw ContractError("no closed-form memory model for " + to_string(strategy));
}

MemoryCost memory_cost(const ParallelConfig& c, const ModelDims& d, bool guided) {
  d.validate();
  const double E = d.element_size, L = static_cast<double>(d.layers);
  const double branches = static_cast<double>(guided ? 2 : 1);
  std::size_t skip_blocks = 0;
  for (std::size_t l = 0; l < d.layers; ++l) skip_blocks += d.has_skip(l) ? 1 : 0;
  const double skips = static_cast<double>(skip_blocks) * d.skip_bytes;

  if (c.strategy == Strategy::tensor_parallel) {
    const double n = static_cast<double>(c.tensor_parallel);
    const double block = d.block_bytes - d.tp_sharded_bytes + d.tp_sharded_bytes / n;
    return {d.io_bytes + L * block + skips, 0.0};
  }
  if (c.strategy == Strategy::distrifusion) return {d.param_bytes, branches * L * d.kv_bytes()};

  MemoryCost out;
  for (std::size_t stage = 0; stage < c.pipefusion; ++stage) {
    double params = stage == 0 ? d.io_bytes : 0.0;
    for (std::size_t l = 0; l < d.layers; ++l)
      if (stage_of(l, d.layers, c.pipefusion) == stage)
        params += d.block_bytes + (d.has_skip(l) ? d.skip_bytes : 0.0);
    out.param = std::max(out.param, params);
  }
  if (c.num_patches > 1) {
    const double b = static_cast<double>(branches_per_device(c, guided));
    const double width = d.hs / static_cast<double>(c.ulysses);
    out.kv = b * (L / static_cast<double>(c.pipefusion)) * 2 * d.p * width * E;
  }
  return out;
}

// ---- Placement ----------------------------------------------------------------

std::string to_string(const Placement& placement) {
  static const char* names[] = {"cfg", "pipefusion", "ring", "ulysses"};
  std::string s;
  for (sim::Axis a : placement) {
    if (!s.empty()) s += '>';
    s += names[placement_index(a)];
  }
  return s;
}

std::vector<std::vector<std::size_t>> axis_groups(const sim::MeshGrid& grid,
                                                  const Placement& placement, sim::Axis axis) {
  // Mixed radix with placement[0] most significant.
  std::array<std::size_t, 4> radix{}, stride{};
  std::size_t s = 1;
  for (std::size_t k = 4; k-- > 0;) {
    radix[k] = grid.degree(placement[k]);
    stride[k] = s;
    s *= radix[k];
  }
  std::size_t pos = 0;
  while (placement[pos] != axis) ++pos;
  std::vector<std::vector<std::size_t>> groups;
  for (std::size_t r = 0; r < grid.size(); ++r) {
    if ((r / stride[pos]) % radix[pos] != 0) continue;
    std::vector<std::size_t> g;
    for (std::size_t i = 0; i < radix[pos]; ++i) g.push_back(r + i * stride[pos]);
    groups.push_back(std::move(g));
  }
  return groups;
}

namespace {

sim::Link axis_link(const sim::Topology& topo, const sim::MeshGrid& grid,
                    const Placement& placement, sim::Axis axis) {
  sim::Link worst{sim::LinkKind::local, 0.0, 0.0};
  bool any = false;
  for (const auto& g : axis_groups(grid, placement, axis))
    for (std::size_t i = 0; i < g.size(); ++i)
      for (std::size_t j = i + 1; j < g.size(); ++j) {
        const sim::Link& l = topo.link(g[i], g[j]);
        if (!any || l.bandwidth < worst.bandwidth) {
          worst.bandwidth = l.bandwidth;
          worst.kind = l.kind;
        }
        worst.latency = std::max(worst.latency, l.latency);
        any = true;
      }
  if (!any) return sim::Link{sim::LinkKind::local, 1.0, 0.0};
  return worst;
}

}  // namespace

// ---- Latency ------------------------------------------------------------------

CostReport predict_latency(const PlanCandidate& cand, const ModelDims& d,
                           const DiffusionSpec& sched, const sim::Topology& topo, bool guided) {
  require(cand.feasible(), "cannot cost an infeasible plan: " + cand.violation);
  d.validate();
  const ParallelConfig& c = cand.config;
  require(c.num_devices() == topo.num_devices(), "plan size does not match the topology");
  const double E = d.element_size, L = static_cast<double>(d.layers);
  const double flops = topo.device_flops;
  const double w = static_cast<double>(std::min(c.warmup_steps, sched.num_steps));

  CostReport rep;
  rep.comm = comm_cost(c, d, guided);
  const MemoryCost mem = memory_cost(c, d, guided);
  rep.param_bytes = mem.param;
  rep.kv_bytes = mem.kv;

  double exposed = 0, overlapped = 0;
  if (c.strategy == Strategy::tensor_parallel || c.strategy == Strategy::distrifusion) {
    const bool tp = c.strategy == Strategy::tensor_parallel;
    const std::size_t n = tp ? c.tensor_parallel : c.distrifusion;
    const double N = static_cast<double>(n), b = guided ? 2.0 : 1.0;
    rep.compute_time =
        b * L * (tp ? block_flops(d, d.p, d.p, 1.0 / N) : block_flops(d, d.p / N, d.p, 1.0)) /
        flops;
    rep.activation_bytes = (tp ? d.p * (4 * d.hs + d.ffn / N) : d.p / N * (4 * d.hs + d.ffn)) * E;
    if (n > 1) {
      std::vector<std::size_t> all(n);
      std::iota(all.begin(), all.end(), 0);
      sim::Link link{sim::LinkKind::local, 0.0, 0.0};
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
          const sim::Link& l = topo.link(i, j);
          if (link.bandwidth == 0.0 || l.bandwidth < link.bandwidth) link.bandwidth = l.bandwidth;
          link.latency = std::max(link.latency, l.latency);
        }
      const double hops = tp ? 2 * (N - 1) : N - 1;
      const double t = transfer_time(link, 2 * L * b, hops, rep.comm.total());
      if (tp) {
        exposed = t;
      } else {
        overlapped = t;
        exposed = std::max(0.0, t - rep.compute_time);
        rep.warmup_surcharge = w * (t - exposed);
      }
    }
  } else {
    const sim::MeshGrid grid = c.grid();
    const double U = static_cast<double>(c.ulysses), R = static_cast<double>(c.ring);
    const double sp = U * R, P = static_cast<double>(c.pipefusion);
    const double M = static_cast<double>(c.num_patches);
    const double b = static_cast<double>(branches_per_device(c, guided));
    const double per_stage = L / P;
    const MeshBytes mb = mesh_bytes(c, d);
    rep.compute_time = b * per_stage * block_flops(d, d.p / sp, d.p, 1.0) / flops;
    rep.activation_bytes = d.p / (sp * M) * (4 * d.hs + d.ffn) * E;

    if (c.ulysses > 1) {
      const sim::Link link = axis_link(topo, grid, cand.placement, sim::Axis::ulysses);
      exposed += transfer_time(link, 4 * per_stage * M * b, 1, b * per_stage * mb.ulysses);
    }
    if (c.ring > 1) {
      const sim::Link link = axis_link(topo, grid, cand.placement, sim::Axis::ring);
      const double hops = (R - 1) * per_stage * M * b;
      const double hop_time = transfer_time(link, 1, 1, mb.ring / (R - 1) / M);
      const double rows = d.p / (M * R);
      const double window = 4 * rows * rows * (d.hs / U) / flops;
      overlapped += hops * hop_time;
      exposed += hops * std::max(0.0, hop_time - window);
    }
    if (c.pipefusion > 1) {
      const sim::Link link = axis_link(topo, grid, cand.placement, sim::Axis::pipefusion);
      const double t = transfer_time(link, M * b, 1, b * mb.pipeline);
      overlapped += t;
      exposed += std::max(0.0, t - rep.compute_time);
      double skips = 0;
      for (std::size_t s = 0; s < c.pipefusion; ++s)
        skips = std::max(skips, static_cast<double>(cross_stage_skips(d, c.pipefusion, s)));
      if (skips > 0) exposed += transfer_time(link, skips * M * b, 1, skips * b * mb.skip);
      rep.warmup_surcharge = (w * (P - 1) + (P - 1) / M) * rep.compute_time;
    }
    if (c.cfg == 2) {
      const sim::Link link = axis_link(topo, grid, cand.placement, sim::Axis::cfg);
      exposed += transfer_time(link, M, 1, mb.cfg);
    }
  }
  rep.exposed_comm_time = exposed;
  rep.overlapped_comm_time = overlapped;
  rep.step_latency = rep.compute_time + exposed;
  rep.end_to_end = static_cast<double>(sched.num_steps) * rep.step_latency + rep.warmup_surcharge;
  return rep;
}

// ---- Search -------------------------------------------------------------------

std::vector<PlanCandidate> enumerate_plans(std::size_t n, const ModelDims& dims,
                                           const DiTSpec& spec, const DiffusionSpec& sched,
                                           const sim::Topology& topology,
                                           const PlanOptions& options) {
  require(n >= 1, "device count must be positive");
  require(topology.num_devices() == n, "topology size does not match the device count");
  std::vector<PlanCandidate> out;
  for (std::size_t cfg : {1u, 2u}) {
    if (n % cfg) continue;
    for (std::size_t pp = 1; pp <= n / cfg; ++pp) {
      if ((n / cfg) % pp) continue;
      const std::size_t sp = n / cfg / pp;
      for (std::size_t u = 1; u <= sp; ++u) {
        if (sp % u) continue;
        const std::size_t r = sp / u;
        const std::vector<std::size_t> sweep =
            pp > 1 ? options.patch_sweep : std::vector<std::size_t>{1};
        for (std::size_t m : sweep) {
          ParallelConfig c;
          c.strategy = Strategy::hybrid;
          c.cfg = cfg;
          c.pipefusion = pp;
          c.ulysses = u;
          c.ring = r;
          c.num_patches = m;
          c.warmup_steps = options.warmup_steps;

          std::vector<Placement> ps = {kDefaultPlacement};
          if (options.exhaustive_placement) {
            // Axes of degree one do not change the groups; keep one ordering
            // per arrangement of the others.
            Placement perm = {sim::Axis::cfg, sim::Axis::pipefusion, sim::Axis::ring,
                              sim::Axis::ulysses};
            std::sort(perm.begin(), perm.end());
            std::vector<std::vector<sim::Axis>> seen;
            ps.clear();
            do {
              std::vector<sim::Axis> key;
              for (sim::Axis a : perm)
                if (c.grid().degree(a) > 1) key.push_back(a);
              if (std::find(seen.begin(), seen.end(), key) != seen.end()) continue;
              seen.push_back(key);
              ps.push_back(perm);
            } while (std::next_permutation(perm.begin(), perm.end()));
          }
          for (const Placement& pl : ps) {
            PlanCandidate cand;
            cand.config = c;
            cand.placement = pl;
            try {
              c.validate(spec, options.guided);
            } catch (const ContractError& e) {
              cand.violation = e.what();
            }
            if (cand.feasible())
              cand.cost = predict_latency(cand, dims, sched, topology, options.guided);
            out.push_back(std::move(cand));
          }
        }
      }
    }
  }
  return out;
}

std::vector<PlanCandidate> rank_plans(std::vector<PlanCandidate> candidates) {
  std::erase_if(candidates, [](const PlanCandidate& c) { return !c.feasible() || !c.cost; });
  require(!candidates.empty(), "no feasible plan to rank");
  auto key = [](const PlanCandidate& p) {
    const ParallelConfig& c = p.config;
    std::array<std::size_t, 4> pl{};
    for (std::size_t i = 0; i < 4; ++i) pl[i] = placement_index(p.placement[i]);
    return std::make_tuple(p.cost->end_to_end, c.cfg, c.pipefusion, c.ulysses, c.ring,
                           c.num_patches, pl);
  };
  std::sort(candidates.begin(), candidates.end(),
            [&](const PlanCandidate& a, const PlanCandidate& b) { return key(a) < key(b); });
  return candidates;
}

// ---- Output -------------------------------------------------------------------

void write_plans_csv(std::ostream& out, const std::vector<PlanCandidate>& plans) {
  out << "cfg,pipefusion,ulysses,ring,patches,placement,feasible,violation,comm_bytes,"
         "param_bytes,kv_bytes,step_latency_s,end_to_end_s\n";
  for (const auto& p : plans) {
    const ParallelConfig& c = p.config;
    out << c.cfg << ',' << c.pipefusion << ',' << c.ulysses << ',' << c.ring << ','
        << c.num_patches << ',' << to_string(p.placement) << ',' << (p.feasible() ? 1 : 0)
        << ",\"" << p.violation << "\",";
    if (p.cost)
      out << p.cost->comm.total() << ',' << p.cost->param_bytes << ',' << p.cost->kv_bytes << ','
          << p.cost->step_latency << ',' << p.cost->end_to_end;
    else
      out << ",,,,";
    out << '\n';
  }
}

nlohmann::json plans_to_json(const std::vector<PlanCandidate>& plans) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& p : plans) {
    const ParallelConfig& c = p.config;
    nlohmann::json j = {{"cfg", c.cfg},
                        {"pipefusion", c.pipefusion},
                        {"ulysses", c.ulysses},
                        {"ring", c.ring},
                        {"patches", c.num_patches},
                        {"placement", to_string(p.placement)},
                        {"feasible", p.feasible()}};
    if (!p.feasible()) j["violation"] = p.violation;
    if (p.cost) {
      const CostReport& r = *p.cost;
      j["comm_bytes"] = r.comm.bytes;
      j["compute_time_s"] = r.compute_time;
      j["exposed_comm_time_s"] = r.exposed_comm_time;
      j["overlapped_comm_time_s"] = r.overlapped_comm_time;
      j["param_bytes"] = r.param_bytes;
      j["kv_bytes"] = r.kv_bytes;
      j["activation_bytes"] = r.activation_bytes;
      j["step_latency_s"] = r.step_latency;
      j["warmup_surcharge_s"] = r.warmup_surcharge;
      j["end_to_end_s"] = r.end_to_end;
    }
    arr.push_back(std::move(j));
  }
  return arr;
}

}  // namespace ditsim::planner
