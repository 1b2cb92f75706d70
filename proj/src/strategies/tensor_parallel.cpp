// Megatron-style tensor parallelism: attention heads and FFN hidden columns
// are split across devices, the sequence is replicated, and the partial
// outputs of the attention projection and the FFN are summed by all_reduce.
// Cross-attention and the AdaLN modulation stay replicated.

#include <cmath>
#include <set>

#include "engine_common.hpp"

namespace ditsim {

namespace {

Tensor slice_vec(const Tensor& v, std::size_t begin, std::size_t end) {
  return Tensor({end - begin}, std::vector<double>(v.data() + begin, v.data() + end));
}

double tp_param_bytes(const Weights& weights, std::size_t n) {
  static const std::set<std::string> sharded = {"wq", "bq", "wk", "bk", "wv",
                                                "bv", "wo", "w1", "b1", "w2"};
  double total = 0;
  for (const auto& [name, t] : weights.named_tensors()) {
    const auto dot = name.find('.');
    const bool split = name.rfind("block", 0) == 0 && dot != std::string::npos &&
                       sharded.count(name.substr(dot + 1)) != 0;
    total += static_cast<double>(t->bytes()) / (split ? static_cast<double>(n) : 1.0);
  }
  return total;
}

}  // namespace

RunResult run_tensor_parallel(sim::Simulator& sim, const DiTSpec& spec,
                              const DiffusionSpec& sched, const Weights& weights,
                              const Tensor& x_T, const Prompt& prompt) {
  const std::size_t n = sim.num_devices();
  ParallelConfig::tp(n).validate(spec, prompt.guided());
  sched.validate();
  const std::size_t L = spec.num_layers, H = spec.num_heads, hd = spec.head_dim();
  const std::size_t F = spec.ffn_hidden(), S = spec.sequence_length();
  const std::size_t hpd = H / n, fpd = F / n;
  const double hs = static_cast<double>(spec.hidden_size);
  std::vector<std::size_t> all(n);
  for (std::size_t d = 0; d < n; ++d) all[d] = d;

  RunResult out;
  out.trace.push_back({x_T, sched.num_steps});
  Tensor x = x_T;
  for (std::size_t t = sched.num_steps; t >= 1; --t) {
    std::vector<Tensor> eps;
    for (std::size_t b = 0; b < prompt.branches(); ++b) {
      const StepConditioning ctx = condition_step(spec, prompt.branch(b), t);
      Tensor h = input_sequence(spec, weights, x, ctx);
      std::vector<Tensor> saved(L);
      for (std::size_t l = 0; l < L; ++l) {
        const BlockWeights& bw = weights.blocks[l];
        const Modulation mod = block_modulation(bw, ctx);
        Tensor xin = spec.has_skip(l) ? skip_merge(bw, h, saved[L - 1 - l]) : h;
        const Tensor hn = attention_norm(bw, mod, xin);

        std::vector<Tensor> partial(n);
        for (std::size_t d = 0; d < n; ++d) {
          const std::size_t c0 = d * hpd * hd, c1 = (d + 1) * hpd * hd;
          const Tensor q = linear(hn, slice_cols(bw.wq, c0, c1), slice_vec(bw.bq, c0, c1));
          const Tensor k = linear(hn, slice_cols(bw.wk, c0, c1), slice_vec(bw.bk, c0, c1));
          const Tensor v = linear(hn, slice_cols(bw.wv, c0, c1), slice_vec(bw.bv, c0, c1));
          partial[d] = matmul(multi_head_attention(q, k, v, hpd), slice_rows(bw.wo, c0, c1));
          sim.compute(d, 8.0 * S * hs * hs / n + 4.0 * S * S * hs / n);
        }
        Tensor attn = sim.all_reduce(all, partial, "tp_attn").results[0];
        Tensor x1 = gated_residual(xin, add_row_vector(std::move(attn), bw.bo),
                                   mod.active ? &mod.gate1 : nullptr);
        if (spec.conditioning == ConditioningMode::cross_attention)
          x1 = cross_attention_residual(bw, x1, cross_kv(bw, ctx.text), spec.num_heads);
        const Tensor h2 = ffn_norm(bw, mod, x1);
        for (std::size_t d = 0; d < n; ++d) {
          const std::size_t f0 = d * fpd, f1 = (d + 1) * fpd;
          const Tensor act = silu(linear(h2, slice_cols(bw.w1, f0, f1), slice_vec(bw.b1, f0, f1)));
          partial[d] = matmul(act, slice_rows(bw.w2, f0, f1));
          sim.compute(d, 4.0 * S * hs * F / n);
        }
        Tensor f = sim.all_reduce(all, partial, "tp_ffn").results[0];
        h = gated_residual(x1, add_row_vector(std::move(f), bw.b2),
                           mod.active ? &mod.gate2 : nullptr);
        saved[l] = h;
      }
      const std::size_t off = spec.image_offset();
      eps.push_back(unembed_tokens(weights, slice_rows(h, off, off + spec.image_tokens)));
    }
    const Tensor e = eps.size() == 2 ? cfg_combine(eps[0], eps[1], sched.guidance_scale) : eps[0];
    x = scheduler_update(x, e, t, sched);
    out.trace.push_back({x, t - 1});
  }
  out.cost.sim = sim.elapsed_report();
  out.cost.comm_bytes = out.cost.sim.max_device_bytes();
  out.cost.param_bytes.assign(n, tp_param_bytes(weights, n));
  out.cost.kv_bytes.assign(n, 0.0);
  return out;
}

}  // namespace ditsim
