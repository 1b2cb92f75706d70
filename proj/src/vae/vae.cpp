#include "ditsim/vae.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ditsim/kernels.hpp"
#include "ditsim/rng.hpp"

namespace ditsim::vae {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw ContractError(what);
}

void require_image(const Tensor& x, const char* who) {
  require(x.rank() == 3, std::string(who) + ": expected a [c, h, w] tensor");
}

/// Output rows [begin, end) of a zero-padded 'same' conv over x.
Tensor conv_rows(const Tensor& x, const Tensor& kernel, std::size_t begin, std::size_t end,
                 std::size_t chunk_rows, std::size_t& temp_bytes) {
  require_image(x, "conv");
  require(kernel.rank() == 4 && kernel.dim(1) == x.dim(0), "conv: kernel/channel mismatch");
  require(kernel.dim(2) == kernel.dim(3) && kernel.dim(2) % 2 == 1,
          "conv: kernel must be square with odd extent");
  require(begin <= end && end <= x.dim(1), "conv: bad row range");
  const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t cout = kernel.dim(0), k = kernel.dim(2);
  const long half = static_cast<long>(k / 2);
  const std::size_t taps = cin * k * k;
  if (chunk_rows == 0) chunk_rows = std::max<std::size_t>(end - begin, 1);

  const Tensor kmat({cout, taps}, kernel.storage());
  Tensor out({cout, end - begin, w});
  for (std::size_t r0 = begin; r0 < end; r0 += chunk_rows) {
    const std::size_t r1 = std::min(r0 + chunk_rows, end);
    const std::size_t n = (r1 - r0) * w;
    Tensor cols({taps, n});
    for (std::size_t c = 0; c < cin; ++c)
      for (std::size_t ky = 0; ky < k; ++ky)
        for (std::size_t kx = 0; kx < k; ++kx) {
          double* row = cols.data() + ((c * k + ky) * k + kx) * n;
          for (std::size_t y = r0; y < r1; ++y) {
            const long sy = static_cast<long>(y) + static_cast<long>(ky) - half;
            for (std::size_t xx = 0; xx < w; ++xx) {
              const long sx = static_cast<long>(xx) + static_cast<long>(kx) - half;
              const bool inside = sy >= 0 && sy < static_cast<long>(h) && sx >= 0 &&
                                  sx < static_cast<long>(w);
              row[(y - r0) * w + xx] =
                  inside ? x(c, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx)) : 0.0;
            }
          }
        }
    temp_bytes = std::max(temp_bytes, cols.bytes());
    const Tensor part = matmul(kmat, cols);
    for (std::size_t o = 0; o < cout; ++o)
      std::copy(part.data() + o * n, part.data() + (o + 1) * n,
                out.data() + (o * (end - begin) + (r0 - begin)) * w);
  }
  return out;
}

void bias_activation(Tensor& x, const ConvLayer& layer) {
  const std::size_t c = x.dim(0), plane = x.dim(1) * x.dim(2);
  for (std::size_t o = 0; o < c; ++o) {
    double* p = x.data() + o * plane;
    const double b = layer.bias[o];
    for (std::size_t i = 0; i < plane; ++i) {
      double v = p[i] + b;
      if (layer.activation) v = v / (1.0 + std::exp(-v));
      p[i] = v;
    }
  }
}

Tensor zero_rows(std::size_t c, std::size_t rows, std::size_t w) { return Tensor({c, rows, w}); }

double conv_flops(const Tensor& kernel, std::size_t rows, std::size_t w) {
  return 2.0 * static_cast<double>(kernel.size() * rows * w);
}

}  // namespace

// ---- Spec and weights -----------------------------------------------------------

void VAESpec::validate() const {
  require(in_channels == 4 || in_channels == 16, "latent channels must be 4 or 16");
  require(!widths.empty(), "at least one channel width is required");
  for (std::size_t c : widths) require(c > 0, "channel widths must be positive");
  require(kernel % 2 == 1, "kernel size must be odd");
}

Shape VAESpec::output_shape(std::size_t h, std::size_t w) const {
  const std::size_t f = std::size_t{1} << stages();
  return {kOutChannels, h * f, w * f};
}

VAEWeights zero_vae_weights(const VAESpec& spec) {
  spec.validate();
  const std::size_t k = spec.kernel;
  VAEWeights wts;
  auto add = [&](std::size_t in, std::size_t out, bool up, bool act) {
    wts.layers.push_back({Tensor({out, in, k, k}), Tensor({out}), up, act});
  };
  add(spec.in_channels, spec.widths[0], false, true);
  for (std::size_t s = 0; s < spec.stages(); ++s) add(spec.widths[s], spec.widths[s + 1], true, true);
  add(spec.widths.back(), VAESpec::kOutChannels, false, false);
  return wts;
}

VAEWeights init_vae_weights(const VAESpec& spec, std::uint64_t seed) {
  VAEWeights wts = zero_vae_weights(spec);
  SeededRng rng(seed);
  for (ConvLayer& l : wts.layers) {
    for (double& v : l.kernel.flat()) v = rng.uniform(-0.2, 0.2);
    for (double& v : l.bias.flat()) v = rng.uniform(-0.2, 0.2);
  }
  return wts;
}

// ---- Kernels -----------------------------------------------------------------

Tensor upsample_nearest(const Tensor& x) {
  require_image(x, "upsample_nearest");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor out({c, 2 * h, 2 * w});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < 2 * h; ++y)
      for (std::size_t xx = 0; xx < 2 * w; ++xx) out(ch, y, xx) = x(ch, y / 2, xx / 2);
  return out;
}

Tensor slice_band(const Tensor& x, std::size_t begin, std::size_t end) {
  require_image(x, "slice_band");
  require(begin <= end && end <= x.dim(1), "slice_band: bad row range");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor out({c, end - begin, w});
  for (std::size_t ch = 0; ch < c; ++ch)
    std::copy(x.data() + (ch * h + begin) * w, x.data() + (ch * h + end) * w,
              out.data() + ch * (end - begin) * w);
  return out;
}

Tensor concat_bands(const std::vector<Tensor>& bands) {
  require(!bands.empty(), "concat_bands: nothing to concatenate");
  const std::size_t c = bands[0].dim(0), w = bands[0].dim(2);
  std::size_t h = 0;
  for (const Tensor& b : bands) {
    require_image(b, "concat_bands");
    require(b.dim(0) == c && b.dim(2) == w, "concat_bands: mismatched bands");
    h += b.dim(1);
  }
  Tensor out({c, h, w});
  std::size_t row = 0;
  for (const Tensor& b : bands) {
    const std::size_t r = b.dim(1);
    for (std::size_t ch = 0; ch < c; ++ch)
      std::copy(b.data() + ch * r * w, b.data() + (ch + 1) * r * w,
                out.data() + (ch * h + row) * w);
    row += r;
  }
  return out;
}

ChunkedConv chunked_conv(const Tensor& x, const Tensor& kernel, std::size_t chunk_rows) {
  require(chunk_rows >= 1, "chunk_rows must be at least 1");
  require_image(x, "chunked_conv");
  ChunkedConv r;
  r.output = conv_rows(x, kernel, 0, x.dim(1), chunk_rows, r.temp_bytes);
  return r;
}

// ---- Serial decode ---------------------------------------------------------------

Decode serial_decode(const VAESpec& spec, const VAEWeights& weights, const Tensor& latent,
                     std::size_t chunk_rows) {
  spec.validate();
  require_image(latent, "serial_decode");
  require(latent.dim(0) == spec.in_channels, "latent channels do not match the spec");
  const std::size_t half = spec.halo();
  Decode d;
  Tensor x = latent;
  for (const ConvLayer& layer : weights.layers) {
    if (layer.upsample_before) {
      Tensor up = upsample_nearest(x);
      d.peak_bytes = std::max(d.peak_bytes, x.bytes() + up.bytes());
      x = std::move(up);
    }
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const Tensor padded =
        concat_bands({zero_rows(c, half, w), x, zero_rows(c, half, w)});
    std::size_t temp = 0;
    Tensor out = conv_rows(padded, layer.kernel, half, half + h, chunk_rows, temp);
    d.peak_bytes = std::max(d.peak_bytes, padded.bytes() + out.bytes() + temp);
    bias_activation(out, layer);
    x = std::move(out);
  }
  d.image = std::move(x);
  return d;
}

// ---- Halo exchange ---------------------------------------------------------------

std::vector<Tensor> halo_exchange(sim::Simulator& sim, const std::vector<Tensor>& bands,
                                  std::size_t width, HaloTransport transport) {
  const std::size_t n = bands.size();
  require(n >= 1 && n <= sim.num_devices(), "one band per device");
  for (const Tensor& b : bands) {
    require_image(b, "halo_exchange");
    require(b.dim(1) >= width, "band of " + std::to_string(b.dim(1)) +
                                   " rows is thinner than the halo width " +
                                   std::to_string(width));
  }
  if (width == 0) return bands;
  const std::size_t c = bands[0].dim(0), w = bands[0].dim(2);

  std::vector<Tensor> above(n), below(n);
  if (transport == HaloTransport::p2p) {
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t rows = bands[i].dim(1);
      if (i > 0) sim.p2p_send(i, i - 1, slice_band(bands[i], 0, width), "halo_up", false);
      if (i + 1 < n) sim.p2p_send(i, i + 1, slice_band(bands[i], rows - width, rows), "halo_down",
                                false);
    }
    for (std::size_t i = 0; i < n; ++i) {
      above[i] = i > 0 ? sim.receive(i, i - 1, "halo_down") : zero_rows(c, width, w);
      below[i] = i + 1 < n ? sim.receive(i, i + 1, "halo_up") : zero_rows(c, width, w);
    }
  } else {
    // Every device publishes its top and bottom rows; neighbours pick theirs.
    std::vector<std::size_t> group(n);
    std::iota(group.begin(), group.end(), 0);
    std::vector<Tensor> parts(n);
    const std::size_t len = c * 2 * width * w;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t rows = bands[i].dim(1);
      const Tensor edge = concat_bands(
          {slice_band(bands[i], 0, width), slice_band(bands[i], rows - width, rows)});
      parts[i] = Tensor({1, len}, edge.storage());
    }
    const auto res = sim.all_gather(group, parts, "halo");
    auto edge_of = [&](std::size_t dst, std::size_t src) {
      return Tensor({c, 2 * width, w}, slice_rows(res.results[dst], src, src + 1).storage());
    };
    for (std::size_t i = 0; i < n; ++i) {
      above[i] = i > 0 ? slice_band(edge_of(i, i - 1), width, 2 * width) : zero_rows(c, width, w);
      below[i] = i + 1 < n ? slice_band(edge_of(i, i + 1), 0, width) : zero_rows(c, width, w);
    }
  }
  std::vector<Tensor> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = concat_bands({above[i], bands[i], below[i]});
  return out;
}

// ---- Patch-parallel decode ---------------------------------------------------------

ParallelDecode patch_parallel_decode(sim::Simulator& sim, const VAESpec& spec,
                                     const VAEWeights& weights, const Tensor& latent,
                                     std::size_t chunk_rows, HaloTransport transport) {
  spec.validate();
  require_image(latent, "patch_parallel_decode");
  require(latent.dim(0) == spec.in_channels, "latent channels do not match the spec");
  const std::size_t n = sim.num_devices(), h = latent.dim(1);
  require(h % n == 0, "latent height " + std::to_string(h) + " does not split into " +
                          std::to_string(n) + " equal row bands");
  const std::size_t half = spec.halo();

  ParallelDecode r;
  r.peak_bytes.assign(n, 0);
  std::vector<Tensor> bands(n);
  for (std::size_t i = 0; i < n; ++i) bands[i] = slice_band(latent, i * h / n, (i + 1) * h / n);

  auto sent = [&] {
    const auto rep = sim.elapsed_report();
    return std::accumulate(rep.device_bytes.begin(), rep.device_bytes.end(), 0.0);
  };
  for (const ConvLayer& layer : weights.layers) {
    if (layer.upsample_before)
      for (std::size_t i = 0; i < n; ++i) {
        Tensor up = upsample_nearest(bands[i]);
        r.peak_bytes[i] = std::max(r.peak_bytes[i], bands[i].bytes() + up.bytes());
        bands[i] = std::move(up);
      }
    const std::vector<Tensor> ext = halo_exchange(sim, bands, half, transport);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t rows = bands[i].dim(1);
      std::size_t temp = 0;
      Tensor out = conv_rows(ext[i], layer.kernel, half, half + rows, chunk_rows, temp);
      r.peak_bytes[i] = std::max(r.peak_bytes[i], ext[i].bytes() + out.bytes() + temp);
      sim.compute(i, conv_flops(layer.kernel, rows, bands[i].dim(2)));
      bias_activation(out, layer);
      bands[i] = std::move(out);
    }
  }
  r.halo_bytes = sent();

  for (std::size_t i = 1; i < n; ++i) sim.p2p_send(i, 0, bands[i], "vae_out", false);
  for (std::size_t i = 1; i < n; ++i) bands[i] = sim.receive(0, i, "vae_out");
  r.image = concat_bands(bands);
  r.sim = sim.elapsed_report();
  return r;
}

// ---- Memory estimate -----------------------------------------------------------

MemoryEstimate peak_memory_estimate(const VAESpec& spec, std::size_t h, std::size_t w,
                                    std::size_t devices, std::size_t chunk_rows,
                                    double element_size) {
  spec.validate();
  require(devices >= 1 && h >= 1 && w >= 1, "sizes must be positive");
  const double e = element_size, halo_rows = 2.0 * static_cast<double>(spec.halo());
  const double k2 = static_cast<double>(spec.kernel * spec.kernel);
  MemoryEstimate best;
  auto consider = [&](const MemoryEstimate& m) {
    if (m.total() > best.total()) best = m;
  };
  auto band_rows = [&](std::size_t rows) {
    return static_cast<double>((rows + devices - 1) / devices);
  };
  auto conv = [&](std::size_t rows, std::size_t cols, std::size_t cin, std::size_t cout) {
    const double band = band_rows(rows), W = static_cast<double>(cols);
    const double chunk = chunk_rows == 0 ? band : std::min(band, static_cast<double>(chunk_rows));
    MemoryEstimate m;
    m.band = band * W * static_cast<double>(cin + cout) * e;
    m.halo = halo_rows * W * static_cast<double>(cin) * e;
    m.temp = chunk * W * static_cast<double>(cin) * k2 * e;
    consider(m);
  };
  conv(h, w, spec.in_channels, spec.widths[0]);
  for (std::size_t s = 0; s < spec.stages(); ++s) {
    const double band = band_rows(h), W = static_cast<double>(w);
    const double c = static_cast<double>(spec.widths[s]);
    consider({band * W * c * e + 4 * band * W * c * e, 0.0, 0.0});
    h *= 2;
    w *= 2;
    conv(h, w, spec.widths[s], spec.widths[s + 1]);
  }
  conv(h, w, spec.widths.back(), VAESpec::kOutChannels);
  return best;
}

}  // namespace ditsim::vae
