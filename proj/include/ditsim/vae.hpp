#pragma once

// Tiny convolutional decoder with serial and row-band parallel execution.
//
// Layout: conv_in (c -> widths[0], SiLU), then per stage a 2x nearest
// upsample followed by conv (widths[s] -> widths[s+1], SiLU), then conv_out
// (widths.back() -> 3). Every conv is 'same' with zero padding.

#include <cstdint>
#include <vector>

#include "ditsim/simnet.hpp"
#include "ditsim/tensor.hpp"

namespace ditsim::vae {

struct VAESpec {
  std::size_t in_channels = 4;
  std::vector<std::size_t> widths = {16, 16, 8};
  std::size_t kernel = 3;

  static constexpr std::size_t kOutChannels = 3;

  std::size_t stages() const { return widths.size() - 1; }
  std::size_t halo() const { return kernel / 2; }
  void validate() const;
  /// [3, h * 2^stages, w * 2^stages]
  Shape output_shape(std::size_t h, std::size_t w) const;
};

struct ConvLayer {
  Tensor kernel;  // [out, in, k, k]
  Tensor bias;    // [out]
  bool upsample_before = false;
  bool activation = true;
};

struct VAEWeights {
  std::vector<ConvLayer> layers;
};

/// Kernels and biases drawn from U[-0.2, 0.2) layer by layer.
VAEWeights init_vae_weights(const VAESpec& spec, std::uint64_t seed);
VAEWeights zero_vae_weights(const VAESpec& spec);

/// [c, h, w] -> [c, 2h, 2w]
Tensor upsample_nearest(const Tensor& x);

/// Rows [begin, end) of a [c, h, w] tensor.
Tensor slice_band(const Tensor& x, std::size_t begin, std::size_t end);
/// Stacks [c, h_i, w] tensors along h.
Tensor concat_bands(const std::vector<Tensor>& bands);

struct ChunkedConv {
  Tensor output;
  std::size_t temp_bytes = 0;  // largest im2col buffer
};

/// Same result as conv2d, computed chunk_rows output rows at a time through
/// an im2col buffer.
ChunkedConv chunked_conv(const Tensor& x, const Tensor& kernel, std::size_t chunk_rows);

struct Decode {
  Tensor image;
  std::size_t peak_bytes = 0;
};

/// chunk_rows == 0 processes each conv in one chunk.
Decode serial_decode(const VAESpec& spec, const VAEWeights& weights, const Tensor& latent,
                     std::size_t chunk_rows = 0);

enum class HaloTransport { p2p, allgather };

/// Extends every device's band by `width` rows from its neighbours; rows past
/// the global edges are zero.
std::vector<Tensor> halo_exchange(sim::Simulator& sim, const std::vector<Tensor>& bands,
                                  std::size_t width, HaloTransport transport = HaloTransport::p2p);

struct ParallelDecode {
  Tensor image;
  std::vector<std::size_t> peak_bytes;  // per device
  double halo_bytes = 0;                // summed over devices
  sim::ElapsedReport sim;
};

/// Splits the latent into sim.num_devices() row bands, one per device.
ParallelDecode patch_parallel_decode(sim::Simulator& sim, const VAESpec& spec,
                                     const VAEWeights& weights, const Tensor& latent,
                                     std::size_t chunk_rows = 0,
                                     HaloTransport transport = HaloTransport::p2p);

struct MemoryEstimate {
  double band = 0;  // input and output bands without halo rows
  double halo = 0;
  double temp = 0;
  double total() const { return band + halo + temp; }
};

/// Largest per-device (input + output + temp) over all layers.
MemoryEstimate peak_memory_estimate(const VAESpec& spec, std::size_t h, std::size_t w,
                                    std::size_t devices, std::size_t chunk_rows = 0,
                                    double element_size = 8);

}  // namespace ditsim::vae
