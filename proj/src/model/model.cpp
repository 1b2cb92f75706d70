#include "ditsim/model.hpp"

#include <cmath>
#include <stdexcept>

namespace ditsim {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw ContractError(what);
}

template <typename Fn>
void for_each_block_tensor(BlockWeights& bw, Fn&& fn) {
  fn("norm1_gain", bw.norm1_gain);
  fn("norm1_bias", bw.norm1_bias);
  fn("wq", bw.wq); fn("bq", bw.bq);
  fn("wk", bw.wk); fn("bk", bw.bk);
  fn("wv", bw.wv); fn("bv", bw.bv);
  fn("wo", bw.wo); fn("bo", bw.bo);
  fn("norm2_gain", bw.norm2_gain);
  fn("norm2_bias", bw.norm2_bias);
  fn("w1", bw.w1); fn("b1", bw.b1);
  fn("w2", bw.w2); fn("b2", bw.b2);
  fn("mod_w", bw.mod_w); fn("mod_b", bw.mod_b);
  fn("normc_gain", bw.normc_gain);
  fn("normc_bias", bw.normc_bias);
  fn("cq_w", bw.cq_w); fn("cq_b", bw.cq_b);
  fn("ck_w", bw.ck_w); fn("ck_b", bw.ck_b);
  fn("cv_w", bw.cv_w); fn("cv_b", bw.cv_b);
  fn("co_w", bw.co_w); fn("co_b", bw.co_b);
  fn("skip_w", bw.skip_w); fn("skip_b", bw.skip_b);
}

template <typename Self, typename Out>
void collect(Self& w, Out& out) {
  out.emplace_back("embed_w", &w.embed_w);
  out.emplace_back("embed_b", &w.embed_b);
  for (std::size_t i = 0; i < w.blocks.size(); ++i) {
    auto& bw = const_cast<BlockWeights&>(w.blocks[i]);
    for_each_block_tensor(bw, [&](const char* name, Tensor& t) {
      if (!t.empty()) out.emplace_back("block" + std::to_string(i) + "." + name, &t);
    });
  }
  out.emplace_back("unembed_w", &w.unembed_w);
  out.emplace_back("unembed_b", &w.unembed_b);
}

Tensor vec_slice(const Tensor& v, std::size_t begin, std::size_t end) {
  return Tensor({end - begin},
                std::vector<double>(v.data() + begin, v.data() + end));
}

Tensor one_plus(const Tensor& g) {
  Tensor out = g;
  out.array() += 1.0;
  return out;
}

}  // namespace

std::string to_string(ConditioningMode mode) {
  switch (mode) {
    case ConditioningMode::adaln_zero: return "adaln_zero";
    case ConditioningMode::cross_attention: return "cross_attention";
    case ConditioningMode::in_context: return "in_context";
  }
  return "?";
}

std::string to_string(BlockTopology topology) {
  return topology == BlockTopology::linear ? "linear" : "u_skip";
}

ConditioningMode parse_conditioning_mode(const std::string& name) {
  if (name == "adaln_zero") return ConditioningMode::adaln_zero;
  if (name == "cross_attention") return ConditioningMode::cross_attention;
  if (name == "in_context") return ConditioningMode::in_context;
  throw ContractError("unknown conditioning mode '" + name + "'");
}

BlockTopology parse_block_topology(const std::string& name) {
  if (name == "linear") return BlockTopology::linear;
  if (name == "u_skip") return BlockTopology::u_skip;
  throw ContractError("unknown block topology '" + name + "'");
}

void DiTSpec::validate() const {
  require(hidden_size > 0 && num_heads > 0 && ffn_multiplier > 0,
          "hidden_size, num_heads and ffn_multiplier must be positive");
  require(hidden_size % num_heads == 0, "hidden_size must be divisible by num_heads");
  require(image_tokens > 0 && latent_channels > 0,
          "image_tokens and latent_channels must be positive");
  require(topology == BlockTopology::linear || num_layers % 2 == 0,
          "u_skip topology needs an even number of layers");
  require(conditioning == ConditioningMode::adaln_zero || text_tokens > 0,
          "text_tokens may only be zero with adaln_zero conditioning");
}

DiffusionSpec DiffusionSpec::uniform(std::size_t steps, double alpha,
                                     double guidance, std::size_t warmup) {
  DiffusionSpec s;
  s.num_steps = steps;
  s.alpha_schedule.assign(steps, alpha);
  s.guidance_scale = guidance;
  s.warmup_steps = warmup;
  return s;
}

void DiffusionSpec::validate() const {
  require(alpha_schedule.size() == num_steps,
          "alpha_schedule length must equal num_steps");
  for (double a : alpha_schedule)
    require(a > 0.0 && a <= 1.0, "alpha_schedule entries must lie in (0, 1]");
  require(guidance_scale >= 0.0, "guidance_scale must be non-negative");
}

Conditioning Conditioning::zeros_like(const DiTSpec& spec) {
  Conditioning c;
  c.mode = spec.conditioning;
  if (spec.conditioning == ConditioningMode::adaln_zero)
    c.values = Tensor({spec.hidden_size});
  else
    c.values = Tensor({spec.text_tokens, spec.hidden_size});
  return c;
}

Conditioning Conditioning::random(const DiTSpec& spec, SeededRng& rng) {
  Conditioning c = zeros_like(spec);
  for (auto& v : c.values.flat()) v = rng.uniform(-1.0, 1.0);
  return c;
}

std::vector<std::pair<std::string, const Tensor*>> Weights::named_tensors() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  collect(*this, out);
  return out;
}

std::vector<std::pair<std::string, Tensor*>> Weights::named_tensors() {
  std::vector<std::pair<std::string, Tensor*>> out;
  collect(*this, out);
  return out;
}

std::size_t Weights::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named_tensors()) n += t->size();
  return n;
}

ParameterCounts parameter_counts(const DiTSpec& spec) {
  const std::size_t hs = spec.hidden_size, f = spec.ffn_hidden();
  const std::size_t lat = spec.latent_channels;
  ParameterCounts c;
  c.layers = spec.num_layers;
  c.io = (lat * hs + hs) + (hs * lat + lat);
  c.block = 2 * hs                  // norm1
            + 3 * (hs * hs + hs)    // q, k, v
            + (hs * hs + hs)        // out projection
            + 2 * hs                // norm2
            + (hs * f + f) + (f * hs + hs);  // ffn
  if (spec.conditioning == ConditioningMode::adaln_zero) c.block += hs * 6 * hs + 6 * hs;
  if (spec.conditioning == ConditioningMode::cross_attention)
    c.block += 2 * hs + 4 * (hs * hs + hs);
  c.skip = hs * hs + hs;
  c.skip_blocks = spec.topology == BlockTopology::u_skip ? spec.num_layers / 2 : 0;
  c.tp_sharded = 3 * (hs * hs + hs) + hs * hs + (hs * f + f) + f * hs;
  return c;
}

Weights zero_weights(const DiTSpec& spec) {
  spec.validate();
  const std::size_t hs = spec.hidden_size, f = spec.ffn_hidden();
  const std::size_t lat = spec.latent_channels;
  Weights w;
  w.embed_w = Tensor({lat, hs});
  w.embed_b = Tensor({hs});
  w.blocks.resize(spec.num_layers);
  for (std::size_t i = 0; i < spec.num_layers; ++i) {
    BlockWeights& b = w.blocks[i];
    b.norm1_gain = Tensor({hs}); b.norm1_bias = Tensor({hs});
    b.wq = Tensor({hs, hs}); b.bq = Tensor({hs});
    b.wk = Tensor({hs, hs}); b.bk = Tensor({hs});
    b.wv = Tensor({hs, hs}); b.bv = Tensor({hs});
    b.wo = Tensor({hs, hs}); b.bo = Tensor({hs});
    b.norm2_gain = Tensor({hs}); b.norm2_bias = Tensor({hs});
    b.w1 = Tensor({hs, f}); b.b1 = Tensor({f});
    b.w2 = Tensor({f, hs}); b.b2 = Tensor({hs});
    if (spec.conditioning == ConditioningMode::adaln_zero) {
      b.mod_w = Tensor({hs, 6 * hs});
      b.mod_b = Tensor({6 * hs});
    }
    if (spec.conditioning == ConditioningMode::cross_attention) {
      b.normc_gain = Tensor({hs}); b.normc_bias = Tensor({hs});
      b.cq_w = Tensor({hs, hs}); b.cq_b = Tensor({hs});
      b.ck_w = Tensor({hs, hs}); b.ck_b = Tensor({hs});
      b.cv_w = Tensor({hs, hs}); b.cv_b = Tensor({hs});
      b.co_w = Tensor({hs, hs}); b.co_b = Tensor({hs});
    }
    if (spec.has_skip(i)) {
      b.skip_w = Tensor({hs, hs});
      b.skip_b = Tensor({hs});
    }
  }
  w.unembed_w = Tensor({hs, lat});
  w.unembed_b = Tensor({lat});
  return w;
}

Weights init_weights(const DiTSpec& spec, SeededRng& rng) {
  Weights w = zero_weights(spec);
  for (auto& [name, t] : w.named_tensors())
    for (auto& v : t->flat()) v = rng.uniform(-0.02, 0.02);
  return w;
}

Weights init_weights(const DiTSpec& spec, std::uint64_t seed) {
  SeededRng rng(seed);
  return init_weights(spec, rng);
}

Tensor timestep_embedding(std::size_t t, std::size_t dim) {
  Tensor out({dim});
  const std::size_t half = dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::pow(10000.0, -double(i) / double(half));
    out[i] = std::sin(double(t) * freq);
    out[half + i] = std::cos(double(t) * freq);
  }
  return out;
}

StepConditioning condition_step(const DiTSpec& spec, const Conditioning& cond,
                                std::size_t t) {
  require(cond.mode == spec.conditioning, "conditioning mode does not match the model");
  const Tensor temb = timestep_embedding(t, spec.hidden_size);
  StepConditioning ctx;
  ctx.mode = cond.mode;
  if (cond.mode == ConditioningMode::adaln_zero) {
    require(cond.values.size() == spec.hidden_size, "adaln conditioning must have hidden_size entries");
    ctx.adaln = cond.values.reshaped({spec.hidden_size});
    ctx.adaln.array() += temb.array();
  } else {
    require(cond.values.rank() == 2 && cond.values.rows() == spec.text_tokens &&
                cond.values.cols() == spec.hidden_size,
            "text conditioning must be [text_tokens, hidden_size]");
    ctx.text = add_row_vector(cond.values, temb);
  }
  return ctx;
}

Tensor silu(Tensor x) {
  for (auto& v : x.flat()) v = v / (1.0 + std::exp(-v));
  return x;
}

Modulation block_modulation(const BlockWeights& bw, const StepConditioning& ctx) {
  Modulation m;
  if (ctx.mode != ConditioningMode::adaln_zero) return m;
  const std::size_t hs = ctx.adaln.size();
  const Tensor c = silu(ctx.adaln).reshaped({1, hs});
  const Tensor mv = linear(c, bw.mod_w, bw.mod_b);
  m.active = true;
  m.shift1 = vec_slice(mv, 0, hs);
  m.scale1 = vec_slice(mv, hs, 2 * hs);
  m.gate1 = vec_slice(mv, 2 * hs, 3 * hs);
  m.shift2 = vec_slice(mv, 3 * hs, 4 * hs);
  m.scale2 = vec_slice(mv, 4 * hs, 5 * hs);
  m.gate2 = vec_slice(mv, 5 * hs, 6 * hs);
  return m;
}

Tensor skip_merge(const BlockWeights& bw, const Tensor& x, const Tensor& saved) {
  require(x.shape() == saved.shape(), "skip_merge: saved activation shape mismatch");
  Tensor out = x;
  out.array() += linear(saved, bw.skip_w, bw.skip_b).array();
  return out;
}

Tensor modulated_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                      const Tensor* shift, const Tensor* scale) {
  Tensor h = layer_norm(x, one_plus(gain), bias);
  if (shift && scale) {
    for (std::size_t i = 0; i < h.rows(); ++i) {
      auto r = h.row(i);
      for (std::size_t j = 0; j < r.size(); ++j)
        r[j] = r[j] * (1.0 + (*scale)[j]) + (*shift)[j];
    }
  }
  return h;
}

Tensor attention_norm(const BlockWeights& bw, const Modulation& mod, const Tensor& x) {
  return modulated_norm(x, bw.norm1_gain, bw.norm1_bias,
                        mod.active ? &mod.shift1 : nullptr,
                        mod.active ? &mod.scale1 : nullptr);
}

Tensor ffn_norm(const BlockWeights& bw, const Modulation& mod, const Tensor& x) {
  return modulated_norm(x, bw.norm2_gain, bw.norm2_bias,
                        mod.active ? &mod.shift2 : nullptr,
                        mod.active ? &mod.scale2 : nullptr);
}

QKV project_qkv(const BlockWeights& bw, const Tensor& h) {
  return {linear(h, bw.wq, bw.bq), linear(h, bw.wk, bw.bk), linear(h, bw.wv, bw.bv)};
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            std::size_t heads) {
  require(q.cols() == k.cols() && k.cols() == v.cols() && q.cols() % heads == 0,
          "multi_head_attention: column mismatch");
  const std::size_t d = q.cols() / heads;
  const double scale = 1.0 / std::sqrt(double(d));
  std::vector<Tensor> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    outs.push_back(attention(slice_cols(q, h * d, (h + 1) * d),
                             slice_cols(k, h * d, (h + 1) * d),
                             slice_cols(v, h * d, (h + 1) * d), scale));
  }
  return concat_cols<double>(outs);
}

Tensor gated_residual(const Tensor& x, const Tensor& y, const Tensor* gate) {
  require(x.shape() == y.shape(), "gated_residual: shape mismatch");
  Tensor out = x;
  if (!gate) {
    out.array() += y.array();
    return out;
  }
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    auto yr = y.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += (1.0 + (*gate)[j]) * yr[j];
  }
  return out;
}

CrossKV cross_kv(const BlockWeights& bw, const Tensor& text) {
  return {linear(text, bw.ck_w, bw.ck_b), linear(text, bw.cv_w, bw.cv_b)};
}

Tensor cross_attention_residual(const BlockWeights& bw, const Tensor& x,
                                const CrossKV& kv, std::size_t heads) {
  const Tensor h = modulated_norm(x, bw.normc_gain, bw.normc_bias, nullptr, nullptr);
  const Tensor q = linear(h, bw.cq_w, bw.cq_b);
  const Tensor a = multi_head_attention(q, kv.k, kv.v, heads);
  return gated_residual(x, linear(a, bw.co_w, bw.co_b), nullptr);
}

Tensor ffn_activation(const BlockWeights& bw, const Tensor& h) {
  return silu(linear(h, bw.w1, bw.b1));
}

BlockOutput block_forward(const DiTSpec& spec, const Weights& weights,
                          std::size_t block, const Tensor& x,
                          const StepConditioning& ctx,
                          const std::optional<KVOverride>& kv_override,
                          const Tensor* skip) {
  require(block < weights.blocks.size(), "block_forward: block index out of range");
  require(x.rank() == 2 && x.cols() == spec.hidden_size,
          "block_forward: input must be [tokens, hidden_size]");
  require(ctx.mode == spec.conditioning, "block_forward: conditioning mode mismatch");
  const BlockWeights& bw = weights.blocks[block];
  const Modulation mod = block_modulation(bw, ctx);

  Tensor xin = x;
  if (spec.has_skip(block)) {
    require(skip != nullptr, "block_forward: skip input required for this block");
    xin = skip_merge(bw, x, *skip);
  }
  const Tensor h = attention_norm(bw, mod, xin);
  QKV qkv = project_qkv(bw, h);
  const Tensor& k_used = kv_override ? kv_override->k : qkv.k;
  const Tensor& v_used = kv_override ? kv_override->v : qkv.v;
  const Tensor a = multi_head_attention(qkv.q, k_used, v_used, spec.num_heads);
  Tensor x1 = gated_residual(xin, linear(a, bw.wo, bw.bo), mod.active ? &mod.gate1 : nullptr);
  if (spec.conditioning == ConditioningMode::cross_attention)
    x1 = cross_attention_residual(bw, x1, cross_kv(bw, ctx.text), spec.num_heads);
  const Tensor h2 = ffn_norm(bw, mod, x1);
  const Tensor f = linear(ffn_activation(bw, h2), bw.w2, bw.b2);
  Tensor out = gated_residual(x1, f, mod.active ? &mod.gate2 : nullptr);
  return {std::move(out), std::move(qkv.k), std::move(qkv.v)};
}

Tensor embed_tokens(const Weights& weights, const Tensor& latent_rows) {
  return linear(latent_rows, weights.embed_w, weights.embed_b);
}

Tensor unembed_tokens(const Weights& weights, const Tensor& hidden_rows) {
  return linear(hidden_rows, weights.unembed_w, weights.unembed_b);
}

Tensor input_sequence(const DiTSpec& spec, const Weights& weights,
                      const Tensor& latent, const StepConditioning& ctx) {
  Tensor img = embed_tokens(weights, latent);
  if (spec.conditioning != ConditioningMode::in_context) return img;
  const Tensor parts[] = {ctx.text, img};
  return concat_rows<double>(parts);
}

Tensor model_forward(const DiTSpec& spec, const Weights& weights,
                     const LatentState& state, const Conditioning& cond) {
  spec.validate();
  require(state.x.rank() == 2 && state.x.rows() == spec.image_tokens &&
              state.x.cols() == spec.latent_channels,
          "model_forward: latent must be [image_tokens, latent_channels]");
  const StepConditioning ctx = condition_step(spec, cond, state.t);
  Tensor h = input_sequence(spec, weights, state.x, ctx);
  std::vector<Tensor> saved(spec.num_layers);
  for (std::size_t j = 0; j < spec.num_layers; ++j) {
    const Tensor* skip = spec.has_skip(j) ? &saved[spec.num_layers - 1 - j] : nullptr;
    h = block_forward(spec, weights, j, h, ctx, std::nullopt, skip).out;
    saved[j] = h;
  }
  const std::size_t off = spec.image_offset();
  return unembed_tokens(weights, slice_rows(h, off, off + spec.image_tokens));
}

Tensor scheduler_update(const Tensor& x_t, const Tensor& eps, std::size_t t,
                        const DiffusionSpec& sched) {
  require(x_t.shape() == eps.shape(), "scheduler_update: shape mismatch");
  require(t >= 1 && t <= sched.num_steps, "scheduler_update: timestep out of range");
  const double a = sched.alpha(t);
  Tensor out = x_t;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x_t[i] - a * eps[i];
  return out;
}

Tensor cfg_combine(const Tensor& eps_cond, const Tensor& eps_uncond, double g) {
  require(eps_cond.shape() == eps_uncond.shape(), "cfg_combine: shape mismatch");
  Tensor out = eps_uncond;
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = eps_uncond[i] + g * (eps_cond[i] - eps_uncond[i]);
  return out;
}

Tensor guided_forward(const DiTSpec& spec, const DiffusionSpec& sched,
                      const Weights& weights, const LatentState& state,
                      const Prompt& prompt) {
  Tensor eps = model_forward(spec, weights, state, prompt.cond);
  if (!prompt.guided()) return eps;
  const Tensor eps_u = model_forward(spec, weights, state, *prompt.uncond);
  return cfg_combine(eps, eps_u, sched.guidance_scale);
}

std::vector<LatentState> serial_diffusion(const DiTSpec& spec,
                                          const DiffusionSpec& sched,
                                          const Weights& weights,
                                          const Tensor& x_T, const Prompt& prompt) {
  sched.validate();
  std::vector<LatentState> trace;
  trace.reserve(sched.num_steps + 1);
  trace.push_back({x_T, sched.num_steps});
  for (std::size_t t = sched.num_steps; t >= 1; --t) {
    const LatentState& cur = trace.back();
    const Tensor eps = guided_forward(spec, sched, weights, cur, prompt);
    trace.push_back({scheduler_update(cur.x, eps, t, sched), t - 1});
  }
  return trace;
}

std::vector<LatentState> serial_diffusion(const DiTSpec& spec,
                                          const DiffusionSpec& sched,
                                          const Weights& weights,
                                          const Tensor& x_T,
                                          const Conditioning& cond) {
  return serial_diffusion(spec, sched, weights, x_T, Prompt{cond, std::nullopt});
}

Tensor random_latent(const DiTSpec& spec, SeededRng& rng) {
  return rng.uniform_tensor({spec.image_tokens, spec.latent_channels}, -1.0, 1.0);
}

}  // namespace ditsim
