#include <cmath>
#include <cstring>

#include "doctest.h"
#include "ditsim/kernels.hpp"
#include "ditsim/rng.hpp"
#include "ditsim/vae.hpp"

using namespace ditsim;
using namespace ditsim::vae;

namespace {

constexpr double kBandTol = 1e-12;

sim::Simulator devices(std::size_t n) {
  return sim::Simulator(
      sim::Topology::single_node(n, sim::Link{sim::LinkKind::nvlink, 100e9, 1e-6}, 1e12));
}

Tensor seeded_latent(std::size_t c, std::size_t h, std::size_t w, std::uint64_t seed = 11) {
  SeededRng rng(seed);
  return rng.uniform_tensor<double>({c, h, w}, -1.0, 1.0);
}

bool same_bits(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Direct decoder on top of conv2d, no bands, no im2col.
Tensor direct_decode(const VAEWeights& w, const Tensor& latent) {
  Tensor x = latent;
  for (const ConvLayer& l : w.layers) {
    if (l.upsample_before) {
      Tensor up({x.dim(0), 2 * x.dim(1), 2 * x.dim(2)});
      for (std::size_t c = 0; c < up.dim(0); ++c)
        for (std::size_t y = 0; y < up.dim(1); ++y)
          for (std::size_t z = 0; z < up.dim(2); ++z) up(c, y, z) = x(c, y / 2, z / 2);
      x = up;
    }
    x = conv2d(x, l.kernel);
    const std::size_t plane = x.dim(1) * x.dim(2);
    for (std::size_t o = 0; o < x.dim(0); ++o)
      for (std::size_t i = 0; i < plane; ++i) {
        double v = x[o * plane + i] + l.bias[o];
        if (l.activation) v = v / (1.0 + std::exp(-v));
        x[o * plane + i] = v;
      }
  }
  return x;
}

}  // namespace

TEST_CASE("chunked conv matches conv2d for every chunk size") {
  SeededRng rng(3);
  const Tensor x = rng.uniform_tensor<double>({3, 9, 7}, -1, 1);
  for (std::size_t k : {1, 3, 5}) {
    const Tensor kernel = rng.uniform_tensor<double>({4, 3, k, k}, -0.5, 0.5);
    const Tensor ref = conv2d(x, kernel);
    for (std::size_t chunk = 1; chunk <= 10; ++chunk) {
      const ChunkedConv r = chunked_conv(x, kernel, chunk);
      CHECK(same_bits(r.output, ref));
      CHECK(r.temp_bytes == std::min<std::size_t>(chunk, 9) * 7 * 3 * k * k * sizeof(double));
    }
  }
  CHECK_THROWS_AS(chunked_conv(x, rng.uniform_tensor<double>({4, 3, 3, 3}, 0, 1), 0),
                  ContractError);
}

TEST_CASE("serial decode equals a direct conv2d decoder") {
  const VAESpec spec;
  const VAEWeights w = init_vae_weights(spec, 5);
  const Tensor latent = seeded_latent(4, 8, 8);
  const Decode d = serial_decode(spec, w, latent);
  CHECK(d.image.shape() == spec.output_shape(8, 8));
  CHECK(same_bits(d.image, direct_decode(w, latent)));
  for (std::size_t chunk : {1, 3, 8})
    CHECK(same_bits(serial_decode(spec, w, latent, chunk).image, d.image));
}

TEST_CASE("golden checksum of the seeded decode") {
  const VAESpec spec;
  const Decode d = serial_decode(spec, init_vae_weights(spec, 5), seeded_latent(4, 8, 8));
  double sum = 0, sq = 0;
  for (double v : d.image.flat()) {
    sum += v;
    sq += v * v;
  }
  CHECK(d.image.size() == 3 * 32 * 32);
  CHECK(sum == doctest::Approx(329.23492740090444).epsilon(1e-12));
  CHECK(sq == doctest::Approx(71.822777946674265).epsilon(1e-12));
}

TEST_CASE("patch-parallel decode matches serial") {
  const VAESpec spec;
  const VAEWeights w = init_vae_weights(spec, 5);
  const Tensor latent = seeded_latent(4, 8, 8);
  const Tensor ref = serial_decode(spec, w, latent).image;
  for (auto transport : {HaloTransport::p2p, HaloTransport::allgather})
    for (std::size_t n : {1, 2, 4}) {
      CAPTURE(n);
      auto s = devices(n);
      const ParallelDecode r = patch_parallel_decode(s, spec, w, latent, 0, transport);
      CHECK(max_abs_diff(r.image, ref) <= kBandTol);
      if (n == 1) {
        CHECK(same_bits(r.image, ref));
        CHECK(r.halo_bytes == 0);
      } else {
        CHECK(r.halo_bytes > 0);
      }
      CHECK(s.undelivered() == 0);
    }
}

TEST_CASE("parallel decode with 16 latent channels and a wider kernel") {
  VAESpec spec;
  spec.in_channels = 16;
  spec.widths = {8, 6};
  spec.kernel = 5;
  const VAEWeights w = init_vae_weights(spec, 9);
  const Tensor latent = seeded_latent(16, 8, 6, 2);
  const Tensor ref = serial_decode(spec, w, latent).image;
  auto s = devices(4);
  // Bands of 2 latent rows are exactly the halo width.
  CHECK(max_abs_diff(patch_parallel_decode(s, spec, w, latent, 3).image, ref) <= kBandTol);
}

TEST_CASE("halo exchange by hand") {
  // One channel, 4 rows of width 2, split over two devices.
  const Tensor x({1, 4, 2}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8});
  const std::vector<Tensor> bands = {slice_band(x, 0, 2), slice_band(x, 2, 4)};
  for (auto transport : {HaloTransport::p2p, HaloTransport::allgather}) {
    auto s = devices(2);
    const auto ext = halo_exchange(s, bands, 1, transport);
    REQUIRE(ext.size() == 2);
    CHECK(ext[0].storage() == std::vector<double>{0, 0, 1, 2, 3, 4, 5, 6});
    CHECK(ext[1].storage() == std::vector<double>{3, 4, 5, 6, 7, 8, 0, 0});
  }
  auto s = devices(2);
  halo_exchange(s, bands, 1, HaloTransport::p2p);
  REQUIRE(s.messages().size() == 2);
  CHECK(s.messages()[0].tag == "halo_down");
  CHECK(s.messages()[1].tag == "halo_up");
  CHECK(s.elapsed_report().link_bytes.at({0, 1}) == 2 * sizeof(double));

  auto t = devices(2);
  CHECK_THROWS_AS(halo_exchange(t, bands, 3), ContractError);
  CHECK(halo_exchange(t, bands, 0)[1].storage() == bands[1].storage());
}

TEST_CASE("parallel decode rejects uneven bands") {
  const VAESpec spec;
  auto s = devices(3);
  CHECK_THROWS_AS(
      patch_parallel_decode(s, spec, init_vae_weights(spec, 1), seeded_latent(4, 8, 8)),
      ContractError);
  VAESpec bad;
  bad.in_channels = 5;
  CHECK_THROWS_AS(bad.validate(), ContractError);
}

TEST_CASE("memory estimate agrees with the instrumented decode") {
  const VAESpec spec;
  const VAEWeights w = init_vae_weights(spec, 5);
  const Tensor latent = seeded_latent(4, 8, 8);
  for (std::size_t chunk : {0, 2, 8}) {
    const Decode d = serial_decode(spec, w, latent, chunk);
    CHECK(peak_memory_estimate(spec, 8, 8, 1, chunk).total() ==
          static_cast<double>(d.peak_bytes));
  }
  for (std::size_t n : {2, 4})
    for (std::size_t chunk : {0, 1, 4}) {
      auto s = devices(n);
      const ParallelDecode r = patch_parallel_decode(s, spec, w, latent, chunk);
      const double est = peak_memory_estimate(spec, 8, 8, n, chunk).total();
      for (std::size_t b : r.peak_bytes) CHECK(static_cast<double>(b) <= est);
    }
}

TEST_CASE("memory estimate falls with more devices") {
  VAESpec spec;
  spec.widths = {512, 512, 256, 128};
  double prev = peak_memory_estimate(spec, 128, 128, 1, 0, 2).total();
  for (std::size_t n = 2; n <= 16; n *= 2) {
    const MemoryEstimate a = peak_memory_estimate(spec, 128, 128, n / 2, 0, 2);
    const MemoryEstimate b = peak_memory_estimate(spec, 128, 128, n, 0, 2);
    CHECK(b.total() < prev);
    CHECK(b.band == doctest::Approx(a.band / 2));
    CHECK(b.halo == a.halo);
    prev = b.total();
  }
  // Chunking bounds the im2col buffer.
  CHECK(peak_memory_estimate(spec, 128, 128, 1, 16, 2).temp <
        peak_memory_estimate(spec, 128, 128, 1, 0, 2).temp);
}
