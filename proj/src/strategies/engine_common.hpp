#pragma once

// Pieces shared by the strategy engines.

#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "ditsim/strategies.hpp"

namespace ditsim::detail {

inline constexpr std::size_t kNeverWritten = std::numeric_limits<std::size_t>::max();

/// Full-sequence K/V store for one block on one device. Rows are token ids in
/// attended-sequence order; columns cover the device's head scope.
struct KVBuffer {
  Tensor k, v;
  std::vector<std::size_t> stamp;

  KVBuffer() = default;
  KVBuffer(std::size_t tokens, std::size_t cols)
      : k({tokens, cols}), v({tokens, cols}), stamp(tokens, kNeverWritten) {}

  /// Writes rows `ids` produced at step t. A buffered entry never moves back
  /// to an older step.
  void write(const std::vector<std::size_t>& ids, const Tensor& krows, const Tensor& vrows,
             std::size_t t);
  double bytes() const { return static_cast<double>(k.bytes() + v.bytes()); }
};

/// Bytes of every weight tensor whose name starts with `prefix`.
double weight_bytes(const Weights& weights, const std::string& prefix);
double io_weight_bytes(const Weights& weights);
double block_weight_bytes(const Weights& weights, std::size_t block);

/// Rows of `x` at positions whose token id is below `offset` (text) or not.
std::vector<std::size_t> positions_below(const std::vector<std::size_t>& ids, std::size_t offset,
                                         bool below);

/// Embeds the shard rows `ids` (text rows come from the step conditioning).
Tensor embed_shard(const DiTSpec& spec, const Weights& weights, const Tensor& latent,
                   const StepConditioning& ctx, const std::vector<std::size_t>& ids);
/// Image-row latent indices of `ids`.
std::vector<std::size_t> image_rows(const DiTSpec& spec, const std::vector<std::size_t>& ids);

/// Everything of a block after self-attention: output projection, gated
/// residual, optional cross-attention and the FFN.
Tensor block_tail(const DiTSpec& spec, const BlockWeights& bw, const Modulation& mod,
                  const StepConditioning& ctx, const Tensor& xin, const Tensor& attn);

}  // namespace ditsim::detail
