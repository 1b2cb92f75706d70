#include "engine_common.hpp"

#include <stdexcept>

namespace ditsim::detail {

void KVBuffer::write(const std::vector<std::size_t>& ids, const Tensor& krows,
                     const Tensor& vrows, std::size_t t) {
  for (std::size_t id : ids)
    if (stamp[id] != kNeverWritten && stamp[id] < t)
      throw std::logic_error("KV buffer row " + std::to_string(id) +
                             " would move back from step " + std::to_string(stamp[id]) +
                             " to step " + std::to_string(t));
  scatter_rows(k, krows, ids, 0);
  scatter_rows(v, vrows, ids, 0);
  for (std::size_t id : ids) stamp[id] = t;
}

double weight_bytes(const Weights& weights, const std::string& prefix) {
  double total = 0;
  for (const auto& [name, t] : weights.named_tensors())
    if (name.compare(0, prefix.size(), prefix) == 0) total += static_cast<double>(t->bytes());
  return total;
}

double io_weight_bytes(const Weights& weights) {
  return weight_bytes(weights, "embed_") + weight_bytes(weights, "unembed_");
}

double block_weight_bytes(const Weights& weights, std::size_t block) {
  return weight_bytes(weights, "block" + std::to_string(block) + ".");
}

std::vector<std::size_t> positions_below(const std::vector<std::size_t>& ids, std::size_t offset,
                                         bool below) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < ids.size(); ++i)
    if ((ids[i] < offset) == below) out.push_back(i);
  return out;
}

std::vector<std::size_t> image_rows(const DiTSpec& spec, const std::vector<std::size_t>& ids) {
  const std::size_t off = spec.image_offset();
  std::vector<std::size_t> out;
  for (std::size_t id : ids)
    if (id >= off) out.push_back(id - off);
  return out;
}

Tensor embed_shard(const DiTSpec& spec, const Weights& weights, const Tensor& latent,
                   const StepConditioning& ctx, const std::vector<std::size_t>& ids) {
  const std::size_t off = spec.image_offset();
  const Tensor img = embed_tokens(weights, gather_rows(latent, image_rows(spec, ids)));
  if (off == 0) return img;
  Tensor out({ids.size(), spec.hidden_size});
  std::vector<std::size_t> text_ids;
  for (std::size_t id : ids)
    if (id < off) text_ids.push_back(id);
  scatter_rows(out, gather_rows(ctx.text, text_ids), positions_below(ids, off, true), 0);
  scatter_rows(out, img, positions_below(ids, off, false), 0);
  return out;
}

Tensor block_tail(const DiTSpec& spec, const BlockWeights& bw, const Modulation& mod,
                  const StepConditioning& ctx, const Tensor& xin, const Tensor& attn) {
  Tensor x1 = gated_residual(xin, linear(attn, bw.wo, bw.bo), mod.active ? &mod.gate1 : nullptr);
  if (spec.conditioning == ConditioningMode::cross_attention)
    x1 = cross_attention_residual(bw, x1, cross_kv(bw, ctx.text), spec.num_heads);
  const Tensor h2 = ffn_norm(bw, mod, x1);
  const Tensor f = linear(ffn_activation(bw, h2), bw.w2, bw.b2);
  return gated_residual(x1, f, mod.active ? &mod.gate2 : nullptr);
}

}  // namespace ditsim::detail
