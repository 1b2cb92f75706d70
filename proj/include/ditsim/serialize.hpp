#pragma once

// Flat binary tensor files.
//
// Layout (all integers and doubles little-endian):
//   char[4]  magic "DTSR"
//   u32      version (1)
//   u64      tensor count
//   per tensor:
//     u32    rank
//     u64    extents[rank]
//     f64    data[product(extents)], row-major

#include <filesystem>
#include <vector>

#include "ditsim/model.hpp"
#include "ditsim/tensor.hpp"

namespace ditsim {

void write_tensor_file(const std::filesystem::path& path, const std::vector<Tensor>& tensors);
std::vector<Tensor> read_tensor_file(const std::filesystem::path& path);

/// Tensors in Weights::named_tensors() order.
void write_weights(const std::filesystem::path& path, const Weights& weights);
/// Fills a zero_weights(spec) skeleton; shapes must match exactly.
Weights read_weights(const std::filesystem::path& path, const DiTSpec& spec);

void write_trace(const std::filesystem::path& path, const std::vector<LatentState>& trace);
std::vector<Tensor> read_trace(const std::filesystem::path& path);

}  // namespace ditsim
