#pragma once

// Tiny diffusion transformer used as the ground-truth oracle for every
// parallel strategy.
//
// Architecture notes:
//  * Layer-norm gains are stored as offsets: the effective gain is 1 + g.
//  * adaln_zero: per-block modulation m = silu(c + temb)·W_mod + b_mod is
//    split into (shift1, scale1, gate1, shift2, scale2, gate2) and applied as
//    h = LN(x)(1 + scale) + shift and x + (1 + gate)·f(h). A zero modulation
//    map therefore reproduces the unmodulated block exactly.
//  * cross_attention: a second attention over the text tokens follows
//    self-attention; the text tokens are projected per block.
//  * in_context: text tokens are prepended to the image tokens and travel
//    through every block; only image rows are unembedded.
//  * The timestep enters through a sinusoidal embedding added to the
//    conditioning (the AdaLN vector or every text row).
//  * u_skip: block j >= L/2 first adds saved(L-1-j)·W_skip + b_skip to its
//    input. No positional encodings are used anywhere.

#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ditsim/kernels.hpp"
#include "ditsim/rng.hpp"
#include "ditsim/tensor.hpp"

namespace ditsim {

enum class ConditioningMode { adaln_zero, cross_attention, in_context };
enum class BlockTopology { linear, u_skip };

std::string to_string(ConditioningMode mode);
std::string to_string(BlockTopology topology);
ConditioningMode parse_conditioning_mode(const std::string& name);
BlockTopology parse_block_topology(const std::string& name);

struct DiTSpec {
  std::size_t num_layers = 4;
  std::size_t hidden_size = 32;
  std::size_t num_heads = 4;
  std::size_t ffn_multiplier = 4;
  ConditioningMode conditioning = ConditioningMode::adaln_zero;
  BlockTopology topology = BlockTopology::linear;
  std::size_t image_tokens = 64;
  std::size_t text_tokens = 8;
  std::size_t latent_channels = 4;

  std::size_t head_dim() const { return hidden_size / num_heads; }
  std::size_t ffn_hidden() const { return ffn_multiplier * hidden_size; }
  /// Length of the sequence self-attention runs over.
  std::size_t sequence_length() const {
    return image_tokens + (conditioning == ConditioningMode::in_context ? text_tokens : 0);
  }
  /// Index of the first image token inside the attended sequence.
  std::size_t image_offset() const {
    return conditioning == ConditioningMode::in_context ? text_tokens : 0;
  }
  bool has_skip(std::size_t block) const {
    return topology == BlockTopology::u_skip && block >= num_layers / 2;
  }

  /// Throws ContractError when the hyperparameters are inconsistent.
  void validate() const;
};

struct DiffusionSpec {
  std::size_t num_steps = 8;
  /// alpha_schedule[t-1] is the step size used at timestep t.
  std::vector<double> alpha_schedule = std::vector<double>(8, 0.125);
  double guidance_scale = 0.0;
  std::size_t warmup_steps = 1;

  static DiffusionSpec uniform(std::size_t steps, double alpha,
                               double guidance = 0.0, std::size_t warmup = 1);
  double alpha(std::size_t t) const { return alpha_schedule.at(t - 1); }
  void validate() const;
};

/// Conditioning input `c`. adaln_zero carries a [hs] vector, the other modes a
/// [s_txt, hs] token matrix.
struct Conditioning {
  ConditioningMode mode = ConditioningMode::adaln_zero;
  Tensor values;

  static Conditioning zeros_like(const DiTSpec& spec);
  static Conditioning random(const DiTSpec& spec, SeededRng& rng);
};

/// The conditional prompt plus, when classifier-free guidance is used, the
/// unconditional one.
struct Prompt {
  Conditioning cond;
  std::optional<Conditioning> uncond;

  bool guided() const { return uncond.has_value(); }
  std::size_t branches() const { return guided() ? 2 : 1; }
  const Conditioning& branch(std::size_t b) const { return b == 0 ? cond : *uncond; }
};

struct LatentState {
  Tensor x;           // [image_tokens, latent_channels]
  std::size_t t = 0;  // timestep about to be denoised; 0 means finished
};

struct BlockWeights {
  Tensor norm1_gain, norm1_bias;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor norm2_gain, norm2_bias;
  Tensor w1, b1, w2, b2;
  Tensor mod_w, mod_b;  // adaln_zero only: [hs, 6hs], [6hs]
  Tensor normc_gain, normc_bias;  // cross_attention only
  Tensor cq_w, cq_b, ck_w, ck_b, cv_w, cv_b, co_w, co_b;
  Tensor skip_w, skip_b;  // u_skip blocks only
};

struct Weights {
  Tensor embed_w, embed_b;
  std::vector<BlockWeights> blocks;
  Tensor unembed_w, unembed_b;

  /// Every parameter tensor in initialization order. Absent optional tensors
  /// are skipped.
  std::vector<std::pair<std::string, const Tensor*>> named_tensors() const;
  std::vector<std::pair<std::string, Tensor*>> named_tensors();
  std::size_t parameter_count() const;
};

/// Closed-form parameter counts.
struct ParameterCounts {
  std::size_t io = 0;          // embed + unembed
  std::size_t block = 0;       // one block without its skip projection
  std::size_t skip = 0;        // one skip projection
  std::size_t skip_blocks = 0; // number of blocks that own a skip projection
  std::size_t tp_sharded = 0;  // per-block entries split by tensor parallelism
  std::size_t layers = 0;

  std::size_t total() const { return io + layers * block + skip_blocks * skip; }
};

ParameterCounts parameter_counts(const DiTSpec& spec);

/// Draws every entry i.i.d. from U[-0.02, 0.02) in named_tensors() order.
Weights init_weights(const DiTSpec& spec, SeededRng& rng);
Weights init_weights(const DiTSpec& spec, std::uint64_t seed);

/// Allocates zero tensors with the right shapes.
Weights zero_weights(const DiTSpec& spec);

// ---- Per-timestep conditioning -----------------------------------------------

Tensor timestep_embedding(std::size_t t, std::size_t dim);

/// Conditioning with the timestep folded in: the AdaLN vector c + temb, or
/// the text rows each shifted by temb.
struct StepConditioning {
  ConditioningMode mode = ConditioningMode::adaln_zero;
  Tensor adaln;  // [hs]
  Tensor text;   // [s_txt, hs]
};

StepConditioning condition_step(const DiTSpec& spec, const Conditioning& cond,
                                std::size_t t);

// ---- Block building blocks ---------------------------------------------------

struct Modulation {
  bool active = false;
  Tensor shift1, scale1, gate1, shift2, scale2, gate2;
};

Modulation block_modulation(const BlockWeights& bw, const StepConditioning& ctx);

Tensor silu(Tensor x);

/// x + saved·W_skip + b_skip.
Tensor skip_merge(const BlockWeights& bw, const Tensor& x, const Tensor& saved);

Tensor modulated_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                      const Tensor* shift, const Tensor* scale);
Tensor attention_norm(const BlockWeights& bw, const Modulation& mod, const Tensor& x);
Tensor ffn_norm(const BlockWeights& bw, const Modulation& mod, const Tensor& x);

struct QKV {
  Tensor q, k, v;
};
QKV project_qkv(const BlockWeights& bw, const Tensor& h);

/// Column range [begin, end) of the heads [h0, h1).
inline std::pair<std::size_t, std::size_t> head_columns(const DiTSpec& spec,
                                                        std::size_t h0,
                                                        std::size_t h1) {
  return {h0 * spec.head_dim(), h1 * spec.head_dim()};
}

/// Multi-head attention over heads concatenated along columns; each head is
/// attention(q_h, k_h, v_h, 1/sqrt(d)).
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            std::size_t heads);

/// x + (1 + gate)·y, or x + y without modulation.
Tensor gated_residual(const Tensor& x, const Tensor& y, const Tensor* gate);

struct CrossKV {
  Tensor k, v;
};
CrossKV cross_kv(const BlockWeights& bw, const Tensor& text);
Tensor cross_attention_residual(const BlockWeights& bw, const Tensor& x,
                                const CrossKV& kv, std::size_t heads);

Tensor ffn_activation(const BlockWeights& bw, const Tensor& h);

// ---- Whole-block / whole-model -----------------------------------------------

struct BlockOutput {
  Tensor out;
  Tensor k, v;  // fresh K/V computed from this block's input
};

/// Optional K/V source replacing the block's own K/V inside self-attention.
struct KVOverride {
  Tensor k, v;
};

BlockOutput block_forward(const DiTSpec& spec, const Weights& weights,
                          std::size_t block, const Tensor& x,
                          const StepConditioning& ctx,
                          const std::optional<KVOverride>& kv_override = std::nullopt,
                          const Tensor* skip = nullptr);

Tensor embed_tokens(const Weights& weights, const Tensor& latent_rows);
Tensor unembed_tokens(const Weights& weights, const Tensor& hidden_rows);

/// Full attended input sequence for the latent (text rows first in
/// in_context mode).
Tensor input_sequence(const DiTSpec& spec, const Weights& weights,
                      const Tensor& latent, const StepConditioning& ctx);

Tensor model_forward(const DiTSpec& spec, const Weights& weights,
                     const LatentState& state, const Conditioning& cond);

/// x_{t-1} = x_t - alpha_schedule[t-1]·eps.
Tensor scheduler_update(const Tensor& x_t, const Tensor& eps, std::size_t t,
                        const DiffusionSpec& sched);

/// eps_uncond + g·(eps_cond - eps_uncond).
Tensor cfg_combine(const Tensor& eps_cond, const Tensor& eps_uncond, double g);

/// Noise prediction for one step, combining both branches when guided.
Tensor guided_forward(const DiTSpec& spec, const DiffusionSpec& sched,
                      const Weights& weights, const LatentState& state,
                      const Prompt& prompt);

/// Canonical serial execution: [x_T, x_{T-1}, ..., x_0].
std::vector<LatentState> serial_diffusion(const DiTSpec& spec,
                                          const DiffusionSpec& sched,
                                          const Weights& weights,
                                          const Tensor& x_T, const Prompt& prompt);

std::vector<LatentState> serial_diffusion(const DiTSpec& spec,
                                          const DiffusionSpec& sched,
                                          const Weights& weights,
                                          const Tensor& x_T,
                                          const Conditioning& cond);

Tensor random_latent(const DiTSpec& spec, SeededRng& rng);

}  // namespace ditsim
