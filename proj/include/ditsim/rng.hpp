#pragma once

#include <cstdint>

#include "ditsim/tensor.hpp"

namespace ditsim {

/// SplitMix64 stream. The generator is fixed so that identical seeds produce
/// identical streams on every platform; doubles are built from the top 53
/// bits of each output.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1).
  double next_unit() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

  template <typename Scalar = double>
  DenseTensor<Scalar> uniform_tensor(Shape shape, double lo, double hi) {
    DenseTensor<Scalar> out(std::move(shape));
    for (auto& v : out.flat()) v = static_cast<Scalar>(uniform(lo, hi));
    return out;
  }

  std::uint64_t seed_state() const { return state_; }

 private:
  std::uint64_t state_;
};

}  // namespace ditsim
