#pragma once

// Exact dense kernels over DenseTensor.
//
// Determinism contract: every reduction accumulates in ascending index order
// starting from +0.0, one element at a time. In particular matmul computes
// out(i,j) = (((0 + a(i,0)b(0,j)) + a(i,1)b(1,j)) + ...), i.e. k is the
// innermost accumulation index. Row r of any row-wise kernel depends only on
// row r of its inputs, so computing a subset of rows reproduces the full
// computation bit for bit.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <span>
#include <vector>

#include "ditsim/tensor.hpp"

namespace ditsim {

namespace detail {
inline void require(bool ok, const char* what) {
  if (!ok) throw ContractError(what);
}
}  // namespace detail

template <typename Scalar>
DenseTensor<Scalar> matmul(const DenseTensor<Scalar>& a,
                           const DenseTensor<Scalar>& b) {
  detail::require(a.rank() == 2 && b.rank() == 2, "matmul: rank-2 operands required");
  detail::require(a.cols() == b.rows(), "matmul: inner extents differ");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  DenseTensor<Scalar> out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    Scalar* orow = out.data() + i * n;
    const Scalar* arow = a.data() + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const Scalar aik = arow[kk];
      const Scalar* brow = b.data() + kk * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

/// a · bᵀ with the same accumulation order as matmul(a, transpose(b)).
template <typename Scalar>
DenseTensor<Scalar> matmul_bt(const DenseTensor<Scalar>& a,
                              const DenseTensor<Scalar>& b) {
  detail::require(a.rank() == 2 && b.rank() == 2, "matmul_bt: rank-2 operands required");
  detail::require(a.cols() == b.cols(), "matmul_bt: inner extents differ");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  DenseTensor<Scalar> out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const Scalar* arow = a.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const Scalar* brow = b.data() + j * k;
      Scalar acc = Scalar(0);
      for (std::size_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
      out(i, j) = acc;
    }
  }
  return out;
}

template <typename Scalar>
DenseTensor<Scalar> transpose(const DenseTensor<Scalar>& a) {
  detail::require(a.rank() == 2, "transpose: rank-2 operand required");
  DenseTensor<Scalar> out({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

/// x + bias broadcast over rows.
template <typename Scalar>
DenseTensor<Scalar> add_row_vector(DenseTensor<Scalar> x,
                                   const DenseTensor<Scalar>& bias) {
  detail::require(x.rank() == 2 && bias.size() == x.cols(),
                  "add_row_vector: bias length must equal column count");
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto r = x.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += bias[j];
  }
  return x;
}

/// x·w + b.
template <typename Scalar>
DenseTensor<Scalar> linear(const DenseTensor<Scalar>& x,
                           const DenseTensor<Scalar>& w,
                           const DenseTensor<Scalar>& b) {
  return add_row_vector(matmul(x, w), b);
}

template <typename Scalar>
DenseTensor<Scalar> softmax_rows(const DenseTensor<Scalar>& x) {
  detail::require(x.rank() == 2, "softmax_rows: rank-2 operand required");
  DenseTensor<Scalar> out(x.shape());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto in = x.row(i);
    auto o = out.row(i);
    Scalar mx = -std::numeric_limits<Scalar>::infinity();
    for (Scalar v : in) mx = std::max(mx, v);
    Scalar sum = Scalar(0);
    for (std::size_t j = 0; j < in.size(); ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    for (auto& v : o) v /= sum;
  }
  return out;
}

/// Row-wise layer normalization: (x - mean)/sqrt(var + eps) * gain + bias.
template <typename Scalar>
DenseTensor<Scalar> layer_norm(const DenseTensor<Scalar>& x,
                               const DenseTensor<Scalar>& gain,
                               const DenseTensor<Scalar>& bias,
                               Scalar eps = Scalar(1e-5)) {
  detail::require(x.rank() == 2, "layer_norm: rank-2 operand required");
  detail::require(gain.size() == x.cols() && bias.size() == x.cols(),
                  "layer_norm: affine length must equal column count");
  detail::require(eps > 0, "layer_norm: eps must be positive");
  const std::size_t n = x.cols();
  DenseTensor<Scalar> out(x.shape());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto in = x.row(i);
    auto o = out.row(i);
    Scalar mean = Scalar(0);
    for (Scalar v : in) mean += v;
    mean /= Scalar(n);
    Scalar var = Scalar(0);
    for (Scalar v : in) var += (v - mean) * (v - mean);
    var /= Scalar(n);
    const Scalar inv = Scalar(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j)
      o[j] = (in[j] - mean) * inv * gain[j] + bias[j];
  }
  return out;
}

/// Online-softmax state for one attention head: running row max, running
/// denominator and running weighted numerator. Key blocks may be merged in
/// any order; finalize() divides numerator by denominator.
template <typename Scalar>
class BasicSoftmaxAccumulator {
 public:
  BasicSoftmaxAccumulator() = default;
  BasicSoftmaxAccumulator(std::size_t rows, std::size_t value_dim)
      : max_(rows, -std::numeric_limits<Scalar>::infinity()),
        denom_(rows, Scalar(0)),
        numer_({rows, value_dim}) {}

  std::size_t rows() const { return max_.size(); }
  std::size_t value_dim() const { return numer_.cols(); }
  bool empty() const { return rows() == 0; }

  const std::vector<Scalar>& running_max() const { return max_; }
  const std::vector<Scalar>& running_denominator() const { return denom_; }
  const DenseTensor<Scalar>& running_numerator() const { return numer_; }

  /// Folds one block of keys/values into the state.
  void merge_block(const DenseTensor<Scalar>& q, const DenseTensor<Scalar>& k,
                   const DenseTensor<Scalar>& v, Scalar scale) {
    detail::require(q.rank() == 2 && k.rank() == 2 && v.rank() == 2,
                    "attention: rank-2 operands required");
    detail::require(q.cols() == k.cols(), "attention: q/k head dims differ");
    detail::require(k.rows() == v.rows(), "attention: k/v lengths differ");
    if (empty()) *this = BasicSoftmaxAccumulator(q.rows(), v.cols());
    detail::require(q.rows() == rows() && v.cols() == value_dim(),
                    "attention: block does not match accumulator");
    if (k.rows() == 0) return;
    DenseTensor<Scalar> p = matmul_bt(q, k);
    for (auto& x : p.flat()) x *= scale;
    std::vector<Scalar> rescale(rows());
    for (std::size_t i = 0; i < rows(); ++i) {
      auto r = p.row(i);
      Scalar bmax = -std::numeric_limits<Scalar>::infinity();
      for (Scalar x : r) bmax = std::max(bmax, x);
      const Scalar new_max = std::max(max_[i], bmax);
      rescale[i] = std::exp(max_[i] - new_max);
      Scalar sum = Scalar(0);
      for (auto& x : r) {
        x = std::exp(x - new_max);
        sum += x;
      }
      denom_[i] = denom_[i] * rescale[i] + sum;
      max_[i] = new_max;
    }
    const DenseTensor<Scalar> pv = matmul(p, v);
    for (std::size_t i = 0; i < rows(); ++i) {
      auto n = numer_.row(i);
      auto add = pv.row(i);
      for (std::size_t j = 0; j < n.size(); ++j)
        n[j] = n[j] * rescale[i] + add[j];
    }
  }

  /// Combines two partial states over disjoint key sets.
  static BasicSoftmaxAccumulator merge(const BasicSoftmaxAccumulator& a,
                                       const BasicSoftmaxAccumulator& b) {
    if (a.empty()) return b;
    if (b.empty()) return a;
    detail::require(a.rows() == b.rows() && a.value_dim() == b.value_dim(),
                    "accumulator merge: shape mismatch");
    BasicSoftmaxAccumulator out(a.rows(), a.value_dim());
    for (std::size_t i = 0; i < a.rows(); ++i) {
      const Scalar m = std::max(a.max_[i], b.max_[i]);
      const Scalar sa = std::exp(a.max_[i] - m);
      const Scalar sb = std::exp(b.max_[i] - m);
      out.max_[i] = m;
      out.denom_[i] = a.denom_[i] * sa + b.denom_[i] * sb;
      auto o = out.numer_.row(i);
      auto na = a.numer_.row(i);
      auto nb = b.numer_.row(i);
      for (std::size_t j = 0; j < o.size(); ++j) o[j] = na[j] * sa + nb[j] * sb;
    }
    return out;
  }

  DenseTensor<Scalar> finalize() const {
    DenseTensor<Scalar> out = numer_;
    for (std::size_t i = 0; i < rows(); ++i)
      for (auto& x : out.row(i)) x /= denom_[i];
    return out;
  }

 private:
  std::vector<Scalar> max_;
  std::vector<Scalar> denom_;
  DenseTensor<Scalar> numer_;
};

using SoftmaxAccumulator = BasicSoftmaxAccumulator<double>;

template <typename Scalar>
BasicSoftmaxAccumulator<Scalar> streaming_attention_merge(
    BasicSoftmaxAccumulator<Scalar> acc, const DenseTensor<Scalar>& q,
    const DenseTensor<Scalar>& k_block, const DenseTensor<Scalar>& v_block,
    Scalar scale) {
  acc.merge_block(q, k_block, v_block, scale);
  return acc;
}

/// Unmasked single-head attention softmax(q·kᵀ·scale)·v. Implemented as a
/// single-block streaming merge so that a one-block streaming run reproduces
/// it exactly.
template <typename Scalar>
DenseTensor<Scalar> attention(const DenseTensor<Scalar>& q,
                              const DenseTensor<Scalar>& k,
                              const DenseTensor<Scalar>& v, Scalar scale) {
  detail::require(scale > 0, "attention: scale must be positive");
  detail::require(k.rows() > 0, "attention: at least one key required");
  BasicSoftmaxAccumulator<Scalar> acc;
  acc.merge_block(q, k, v, scale);
  return acc.finalize();
}

/// Zero-padded "same" 2D convolution, x[c_in,h,w] * kernel[c_out,c_in,k,k].
/// Each output pixel sums over (c_in, ky, kx) in ascending order, skipping
/// taps that fall outside the image.
template <typename Scalar>
DenseTensor<Scalar> conv2d(const DenseTensor<Scalar>& x,
                           const DenseTensor<Scalar>& kernel) {
  detail::require(x.rank() == 3 && kernel.rank() == 4, "conv2d: expected x[c,h,w], kernel[o,c,k,k]");
  detail::require(kernel.dim(1) == x.dim(0), "conv2d: channel mismatch");
  detail::require(kernel.dim(2) == kernel.dim(3) && kernel.dim(2) % 2 == 1,
                  "conv2d: kernel must be square with odd extent");
  const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t cout = kernel.dim(0), ks = kernel.dim(2);
  const long half = long(ks / 2);
  DenseTensor<Scalar> out({cout, h, w});
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx) {
        Scalar acc = Scalar(0);
        for (std::size_t c = 0; c < cin; ++c)
          for (std::size_t ky = 0; ky < ks; ++ky) {
            const long sy = long(y) + long(ky) - half;
            if (sy < 0 || sy >= long(h)) continue;
            for (std::size_t kx = 0; kx < ks; ++kx) {
              const long sx = long(xx) + long(kx) - half;
              if (sx < 0 || sx >= long(w)) continue;
              acc += x(c, std::size_t(sy), std::size_t(sx)) *
                     kernel[((o * cin + c) * ks + ky) * ks + kx];
            }
          }
        out(o, y, xx) = acc;
      }
  return out;
}

// ---- Row/column plumbing -------------------------------------------------

template <typename Scalar>
DenseTensor<Scalar> slice_rows(const DenseTensor<Scalar>& x, std::size_t begin,
                               std::size_t end) {
  detail::require(x.rank() == 2 && begin <= end && end <= x.rows(), "slice_rows: bad range");
  const std::size_t n = x.cols();
  return DenseTensor<Scalar>(
      {end - begin, n},
      std::vector<Scalar>(x.data() + begin * n, x.data() + end * n));
}

template <typename Scalar>
DenseTensor<Scalar> slice_cols(const DenseTensor<Scalar>& x, std::size_t begin,
                               std::size_t end) {
  detail::require(x.rank() == 2 && begin <= end && end <= x.cols(), "slice_cols: bad range");
  DenseTensor<Scalar> out({x.rows(), end - begin});
  for (std::size_t i = 0; i < x.rows(); ++i)
    std::copy(x.data() + i * x.cols() + begin, x.data() + i * x.cols() + end,
              out.data() + i * (end - begin));
  return out;
}

template <typename Scalar>
DenseTensor<Scalar> gather_rows(const DenseTensor<Scalar>& x,
                                std::span<const std::size_t> rows) {
  detail::require(x.rank() == 2, "gather_rows: rank-2 operand required");
  const std::size_t n = x.cols();
  DenseTensor<Scalar> out({rows.size(), n});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    detail::require(rows[i] < x.rows(), "gather_rows: index out of range");
    std::copy(x.data() + rows[i] * n, x.data() + (rows[i] + 1) * n,
              out.data() + i * n);
  }
  return out;
}

/// Writes src rows into dst at the given row indices and column offset.
template <typename Scalar>
void scatter_rows(DenseTensor<Scalar>& dst, const DenseTensor<Scalar>& src,
                  std::span<const std::size_t> rows, std::size_t col_offset = 0) {
  detail::require(src.rows() == rows.size() && col_offset + src.cols() <= dst.cols(),
                  "scatter_rows: shape mismatch");
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy(src.data() + i * src.cols(), src.data() + (i + 1) * src.cols(),
              dst.data() + rows[i] * dst.cols() + col_offset);
}

template <typename Scalar>
DenseTensor<Scalar> concat_rows(std::span<const DenseTensor<Scalar>> parts) {
  detail::require(!parts.empty(), "concat_rows: no parts");
  const std::size_t n = parts.front().cols();
  std::size_t m = 0;
  for (const auto& p : parts) {
    detail::require(p.rank() == 2 && p.cols() == n, "concat_rows: ragged columns");
    m += p.rows();
  }
  std::vector<Scalar> data;
  data.reserve(m * n);
  for (const auto& p : parts) data.insert(data.end(), p.storage().begin(), p.storage().end());
  return DenseTensor<Scalar>({m, n}, std::move(data));
}

template <typename Scalar>
DenseTensor<Scalar> concat_cols(std::span<const DenseTensor<Scalar>> parts) {
  detail::require(!parts.empty(), "concat_cols: no parts");
  const std::size_t m = parts.front().rows();
  std::size_t n = 0;
  for (const auto& p : parts) {
    detail::require(p.rank() == 2 && p.rows() == m, "concat_cols: ragged rows");
    n += p.cols();
  }
  DenseTensor<Scalar> out({m, n});
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < m; ++i)
      std::copy(p.data() + i * p.cols(), p.data() + (i + 1) * p.cols(),
                out.data() + i * n + off);
    off += p.cols();
  }
  return out;
}

/// True when both tensors have the same shape and identical bit patterns.
template <typename Scalar>
bool bitwise_equal(const DenseTensor<Scalar>& a, const DenseTensor<Scalar>& b) {
  return a.shape() == b.shape() &&
         std::equal(a.flat().begin(), a.flat().end(), b.flat().begin(),
                    [](Scalar x, Scalar y) {
                      return std::memcmp(&x, &y, sizeof(Scalar)) == 0;
                    });
}

template <typename Scalar>
Scalar max_abs_diff(const DenseTensor<Scalar>& a, const DenseTensor<Scalar>& b) {
  detail::require(a.shape() == b.shape(), "max_abs_diff: shape mismatch");
  if (a.empty()) return Scalar(0);
  return (a.array() - b.array()).abs().maxCoeff();
}

/// max|a-b| / max(max|b|, tiny): the relative error used by equivalence checks.
template <typename Scalar>
Scalar max_relative_error(const DenseTensor<Scalar>& a,
                          const DenseTensor<Scalar>& b) {
  const Scalar scale = b.empty() ? Scalar(0) : b.array().abs().maxCoeff();
  return max_abs_diff(a, b) / std::max(scale, std::numeric_limits<Scalar>::min());
}

/// ||a-b||₂ / ||b||₂ (0 when both vanish).
template <typename Scalar>
Scalar relative_l2(const DenseTensor<Scalar>& a, const DenseTensor<Scalar>& b) {
  detail::require(a.shape() == b.shape(), "relative_l2: shape mismatch");
  const Scalar num = (a.array() - b.array()).matrix().norm();
  const Scalar den = b.array().matrix().norm();
  if (den == Scalar(0)) return num == Scalar(0) ? Scalar(0) : num;
  return num / den;
}

}  // namespace ditsim
