// DistriFusion: every device holds the whole model and one patch. Each block
// attends over a full-sequence K/V buffer where only the local patch is
// fresh; the others come from the previous step and are refreshed by an
// overlapped all_gather after the block. Warmup steps gather synchronously
// before attention instead.

#include <algorithm>

#include "engine_common.hpp"

namespace ditsim {

RunResult run_distrifusion(sim::Simulator& sim, std::size_t warmup, const DiTSpec& spec,
                           const DiffusionSpec& sched, const Weights& weights,
                           const Tensor& x_T, const Prompt& prompt) {
  const std::size_t n = sim.num_devices();
  ParallelConfig::distrifusion_only(n, warmup).validate(spec, prompt.guided());
  sched.validate();
  if (x_T.shape() != Shape{spec.image_tokens, spec.latent_channels})
    throw ContractError("x_T must be [image_tokens, latent_channels]");
  const PatchPlan plan(spec, n, 1, TextPlacement::spread);
  const std::size_t L = spec.num_layers, S = plan.sequence_length(), T = sched.num_steps;
  const std::size_t branches = prompt.branches();
  const double hs = static_cast<double>(spec.hidden_size);
  const double lat = static_cast<double>(spec.latent_channels);
  std::vector<std::size_t> all(n);
  for (std::size_t d = 0; d < n; ++d) all[d] = d;
  std::vector<std::size_t> gathered_ids;
  for (std::size_t d = 0; d < n; ++d) {
    const auto& ids = plan.shard(d, 0);
    gathered_ids.insert(gathered_ids.end(), ids.begin(), ids.end());
  }

  // kv[b][l][d]
  std::vector<std::vector<std::vector<detail::KVBuffer>>> kv(
      branches, std::vector<std::vector<detail::KVBuffer>>(
                    L, std::vector<detail::KVBuffer>(n, detail::KVBuffer(S, spec.hidden_size))));
  std::vector<std::vector<double>> ready(branches, std::vector<double>(L, 0.0));

  RunResult out;
  out.trace.push_back({x_T, T});
  Tensor x = x_T;
  for (std::size_t t = T; t >= 1; --t) {
    const bool warm = T - t < warmup;
    std::vector<std::vector<Tensor>> eps(branches, std::vector<Tensor>(n));
    for (std::size_t b = 0; b < branches; ++b) {
      const StepConditioning ctx = condition_step(spec, prompt.branch(b), t);
      std::vector<Tensor> h(n);
      std::vector<std::vector<Tensor>> saved(n, std::vector<Tensor>(L));
      for (std::size_t d = 0; d < n; ++d) {
        h[d] = detail::embed_shard(spec, weights, x, ctx, plan.shard(d, 0));
        sim.compute(d, 2.0 * h[d].rows() * lat * hs);
      }
      for (std::size_t l = 0; l < L; ++l) {
        const BlockWeights& bw = weights.blocks[l];
        const Modulation mod = block_modulation(bw, ctx);
        std::vector<Tensor> xin(n), q(n), k(n), v(n);
        for (std::size_t d = 0; d < n; ++d) {
          xin[d] = spec.has_skip(l) ? skip_merge(bw, h[d], saved[d][L - 1 - l]) : h[d];
          QKV p = project_qkv(bw, attention_norm(bw, mod, xin[d]));
          q[d] = std::move(p.q);
          k[d] = std::move(p.k);
          v[d] = std::move(p.v);
          sim.compute(d, 6.0 * xin[d].rows() * hs * hs);
        }
        auto& bufs = kv[b][l];
        if (warm) {
          const Tensor gk = sim.all_gather(all, k, "df_k/" + std::to_string(b)).results[0];
          const Tensor gv = sim.all_gather(all, v, "df_v/" + std::to_string(b)).results[0];
          for (auto& buf : bufs) buf.write(gathered_ids, gk, gv, t);
        } else {
          for (std::size_t d = 0; d < n; ++d) {
            sim.wait_until(d, ready[b][l]);
            bufs[d].write(plan.shard(d, 0), k[d], v[d], t);
          }
        }
        for (std::size_t d = 0; d < n; ++d) {
          const Tensor a = multi_head_attention(q[d], bufs[d].k, bufs[d].v, spec.num_heads);
          h[d] = detail::block_tail(spec, bw, mod, ctx, xin[d], a);
          saved[d][l] = h[d];
          const double rows = static_cast<double>(h[d].rows());
          sim.compute(d, 4.0 * rows * S * hs + 2.0 * rows * hs * hs +
                             4.0 * rows * hs * spec.ffn_hidden());
          for (std::size_t j = 0; j < n; ++j) {
            const auto& ids = plan.patch(j);
            const std::size_t s = bufs[d].stamp[ids.front()];
            for (std::size_t id : ids)
              if (bufs[d].stamp[id] != s) throw std::logic_error("patch K/V mixes steps");
            if (b == 0) out.freshness.record({t, d, l, j}, s);
          }
        }
        if (!warm) {
          auto gk = sim.all_gather(all, k, "df_k/" + std::to_string(b), true);
          auto gv = sim.all_gather(all, v, "df_v/" + std::to_string(b), true);
          for (auto& buf : bufs) buf.write(gathered_ids, gk.results[0], gv.results[0], t);
          ready[b][l] = std::max(gk.done, gv.done);
        }
      }
      for (std::size_t d = 0; d < n; ++d) {
        const auto pos = detail::positions_below(plan.shard(d, 0), spec.image_offset(), false);
        eps[b][d] = unembed_tokens(weights, gather_rows(h[d], pos));
        sim.compute(d, 2.0 * pos.size() * hs * lat);
      }
    }
    for (std::size_t d = 0; d < n; ++d) {
      const Tensor e = branches == 2 ? cfg_combine(eps[0][d], eps[1][d], sched.guidance_scale)
                                     : eps[0][d];
      const auto rows = detail::image_rows(spec, plan.shard(d, 0));
      scatter_rows(x, scheduler_update(gather_rows(x, rows), e, t, sched), rows);
    }
    out.trace.push_back({x, t - 1});
  }
  out.cost.sim = sim.elapsed_report();
  out.cost.comm_bytes = out.cost.sim.max_device_bytes();
  double kv_bytes = 0;
  for (const auto& per_block : kv)
    for (const auto& per_device : per_block) kv_bytes += per_device[0].bytes();
  const double params = static_cast<double>(weights.parameter_count() * sizeof(double));
  out.cost.param_bytes.assign(n, params);
  out.cost.kv_bytes.assign(n, kv_bytes);
  return out;
}

}  // namespace ditsim
