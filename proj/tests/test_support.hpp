#pragma once

#include <cstdint>
#include <utility>

#include "ditsim/model.hpp"

namespace ditsim::testing {

inline constexpr std::uint64_t kSeed = 2024;

// Self-golden values produced by the serial oracle and frozen here.
inline constexpr double kGoldenEpsSum = 0.74096184426560896;
inline constexpr double kGoldenEpsSumSq = 0.061363130749046355;
inline constexpr double kGoldenTraceSum = -9.425028698068127;
inline constexpr double kGoldenTraceSumSq = 88.740689383060072;

/// The desk-scale model every strategy is checked on.
inline DiTSpec desk_spec(ConditioningMode mode, BlockTopology topology) {
  DiTSpec s;
  s.num_layers = 4;
  s.hidden_size = 32;
  s.num_heads = 4;
  s.ffn_multiplier = 4;
  s.conditioning = mode;
  s.topology = topology;
  s.image_tokens = 64;
  s.text_tokens = 8;
  s.latent_channels = 4;
  return s;
}

inline DiTSpec small_spec(ConditioningMode mode, BlockTopology topology) {
  DiTSpec s = desk_spec(mode, topology);
  s.hidden_size = 16;
  s.image_tokens = 12;
  s.text_tokens = 4;
  return s;
}

inline std::pair<double, double> checksum(const Tensor& t) {
  double s = 0, s2 = 0;
  for (double v : t.flat()) {
    s += v;
    s2 += v * v;
  }
  return {s, s2};
}

struct Problem {
  DiTSpec spec;
  DiffusionSpec sched;
  Weights weights;
  Tensor x_T;
  Prompt prompt;
};

inline Problem make_problem(const DiTSpec& spec, const DiffusionSpec& sched,
                            bool guided, std::uint64_t seed = kSeed) {
  Problem p{spec, sched, init_weights(spec, seed), {}, {}};
  SeededRng rng(seed + 1);
  p.x_T = random_latent(spec, rng);
  p.prompt.cond = Conditioning::random(spec, rng);
  if (guided) p.prompt.uncond = Conditioning::zeros_like(spec);
  return p;
}

}  // namespace ditsim::testing
