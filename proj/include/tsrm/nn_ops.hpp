#pragma once

// Convolution, pooling, normalization, activation and loss primitives.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "tsrm/ops.hpp"
#include "tsrm/rng.hpp"

namespace tsrm {

/// Span covered by a dilated kernel: (k - 1) * dilation + 1.
inline Index effective_kernel(Index kernel, Index dilation) {
  return (kernel - 1) * dilation + 1;
}

/// Valid-convolution output length.
inline Index conv_output_length(Index length, Index kernel, Index dilation,
                                Index stride) {
  return (length - effective_kernel(kernel, dilation)) / stride + 1;
}

// ---------------------------------------------------------------------------
// Convolutions

/// Depth-wise valid 1-D convolution: x[B,C,L], kernel[C,k], bias[C]
/// (bias may be undefined) -> [B,C,L_out].
template <typename Scalar>
Tensor<Scalar> conv1d_depthwise(const Tensor<Scalar>& x,
                                const Tensor<Scalar>& kernel,
                                const Tensor<Scalar>& bias, Index dilation,
                                Index stride,
                                const std::string& label = "conv1d") {
  require(x.ndim() == 3 && kernel.ndim() == 2 && kernel.dim(0) == x.dim(1),
          ErrorKind::Config,
          label + ": expected x[B,C,L] and kernel[C,k], got " +
              shape_str(x.shape()) + " and " + shape_str(kernel.shape()));
  require(dilation >= 1 && stride >= 1, ErrorKind::Config,
          label + ": dilation and stride must be >= 1");
  const Index B = x.dim(0), C = x.dim(1), L = x.dim(2), k = kernel.dim(1);
  const Index k_eff = effective_kernel(k, dilation);
  require(k_eff <= L, ErrorKind::Config,
          label + ": effective kernel " + std::to_string(k_eff) +
              " exceeds sequence length " + std::to_string(L));
  const Index L_out = conv_output_length(L, k, dilation, stride);
  Buffer<Scalar> out(B * C * L_out);
  const Scalar* xv = x.data();
  const Scalar* w = kernel.data();
  for (Index bc = 0; bc < B * C; ++bc) {
    const Index c = bc % C;
    const Scalar b0 = bias.defined() ? bias.value()(c) : Scalar(0);
    const Scalar* row = xv + bc * L;
    const Scalar* wc = w + c * k;
    for (Index p = 0; p < L_out; ++p) {
      Scalar acc = b0;
      const Scalar* base = row + p * stride;
      for (Index j = 0; j < k; ++j) acc += wc[j] * base[j * dilation];
      out(bc * L_out + p) = acc;
    }
  }
  auto px = x.node(), pk = kernel.node();
  auto pb = bias.defined() ? bias.node() : nullptr;
  return detail::make_result<Scalar>(
      {B, C, L_out}, std::move(out), {x, kernel, bias},
      [=](Node<Scalar>& self) {
        if (px->requires_grad) px->ensure_grad();
        if (pk->requires_grad) pk->ensure_grad();
        if (pb && pb->requires_grad) pb->ensure_grad();
        for (Index bc = 0; bc < B * C; ++bc) {
          const Index c = bc % C;
          const Scalar* g = self.grad.data() + bc * L_out;
          for (Index p = 0; p < L_out; ++p) {
            const Scalar gp = g[p];
            const Index base = bc * L + p * stride;
            for (Index j = 0; j < k; ++j) {
              if (px->requires_grad)
                px->grad(base + j * dilation) += gp * pk->value(c * k + j);
              if (pk->requires_grad)
                pk->grad(c * k + j) += gp * px->value(base + j * dilation);
            }
            if (pb && pb->requires_grad) pb->grad(c) += gp;
          }
        }
      });
}

/// Depth-wise transposed 1-D convolution, the shape inverse of
/// conv1d_depthwise. The natural output length (L_out - 1) * stride + k_eff is
/// cropped or zero-padded on the right to exactly `target_len`.
template <typename Scalar>
Tensor<Scalar> conv1d_transpose_depthwise(const Tensor<Scalar>& x,
                                          const Tensor<Scalar>& kernel,
                                          Index dilation, Index stride,
                                          Index target_len) {
  require(x.ndim() == 3 && kernel.ndim() == 2 && kernel.dim(0) == x.dim(1),
          ErrorKind::Config,
          "conv1d_transpose: expected x[B,C,L] and kernel[C,k], got " +
              shape_str(x.shape()) + " and " + shape_str(kernel.shape()));
  const Index B = x.dim(0), C = x.dim(1), L = x.dim(2), k = kernel.dim(1);
  require(target_len >= effective_kernel(k, dilation), ErrorKind::Config,
          "conv1d_transpose: target length " + std::to_string(target_len) +
              " shorter than effective kernel");
  Buffer<Scalar> out = Buffer<Scalar>::Zero(B * C * target_len);
  for (Index bc = 0; bc < B * C; ++bc) {
    const Index c = bc % C;
    const Scalar* row = x.data() + bc * L;
    const Scalar* wc = kernel.data() + c * k;
    Scalar* dst = out.data() + bc * target_len;
    for (Index p = 0; p < L; ++p)
      for (Index j = 0; j < k; ++j) {
        const Index t = p * stride + j * dilation;
        if (t < target_len) dst[t] += row[p] * wc[j];
      }
  }
  auto px = x.node(), pk = kernel.node();
  return detail::make_result<Scalar>(
      {B, C, target_len}, std::move(out), {x, kernel},
      [=](Node<Scalar>& self) {
        if (px->requires_grad) px->ensure_grad();
        if (pk->requires_grad) pk->ensure_grad();
        for (Index bc = 0; bc < B * C; ++bc) {
          const Index c = bc % C;
          const Scalar* g = self.grad.data() + bc * target_len;
          for (Index p = 0; p < L; ++p)
            for (Index j = 0; j < k; ++j) {
              const Index t = p * stride + j * dilation;
              if (t >= target_len) continue;
              if (px->requires_grad)
                px->grad(bc * L + p) += g[t] * pk->value(c * k + j);
              if (pk->requires_grad)
                pk->grad(c * k + j) += g[t] * px->value(bc * L + p);
            }
        }
      });
}

/// Grouped full-channel 1-D convolution: x[B,G,Cin,L], weight[G,Cout,Cin,k],
/// bias[G,Cout] -> [B,G,Cout,L_out]. Each group owns its own filters.
template <typename Scalar>
Tensor<Scalar> conv1d_grouped(const Tensor<Scalar>& x,
                              const Tensor<Scalar>& weight,
                              const Tensor<Scalar>& bias, Index stride) {
  require(x.ndim() == 4 && weight.ndim() == 4 && weight.dim(0) == x.dim(1) &&
              weight.dim(2) == x.dim(2),
          ErrorKind::Config,
          "conv1d_grouped: expected x[B,G,Cin,L], weight[G,Cout,Cin,k], got " +
              shape_str(x.shape()) + " and " + shape_str(weight.shape()));
  const Index B = x.dim(0), G = x.dim(1), Cin = x.dim(2), L = x.dim(3);
  const Index Cout = weight.dim(1), k = weight.dim(3);
  require(k <= L, ErrorKind::Config,
          "conv1d_grouped: kernel " + std::to_string(k) + " exceeds length " +
              std::to_string(L));
  const Index L_out = (L - k) / stride + 1;
  Buffer<Scalar> out(B * G * Cout * L_out);
  for (Index b = 0; b < B; ++b)
    for (Index g = 0; g < G; ++g)
      for (Index co = 0; co < Cout; ++co) {
        Scalar* dst = out.data() + ((b * G + g) * Cout + co) * L_out;
        const Scalar b0 = bias.value()(g * Cout + co);
        for (Index p = 0; p < L_out; ++p) dst[p] = b0;
        for (Index ci = 0; ci < Cin; ++ci) {
          const Scalar* src = x.data() + ((b * G + g) * Cin + ci) * L;
          const Scalar* w = weight.data() + ((g * Cout + co) * Cin + ci) * k;
          for (Index p = 0; p < L_out; ++p) {
            Scalar acc = 0;
            for (Index j = 0; j < k; ++j) acc += w[j] * src[p * stride + j];
            dst[p] += acc;
          }
        }
      }
  auto px = x.node(), pw = weight.node(), pb = bias.node();
  return detail::make_result<Scalar>(
      {B, G, Cout, L_out}, std::move(out), {x, weight, bias},
      [=](Node<Scalar>& self) {
        if (px->requires_grad) px->ensure_grad();
        if (pw->requires_grad) pw->ensure_grad();
        if (pb->requires_grad) pb->ensure_grad();
        for (Index b = 0; b < B; ++b)
          for (Index g = 0; g < G; ++g)
            for (Index co = 0; co < Cout; ++co) {
              const Scalar* gr =
                  self.grad.data() + ((b * G + g) * Cout + co) * L_out;
              if (pb->requires_grad)
                for (Index p = 0; p < L_out; ++p) pb->grad(g * Cout + co) += gr[p];
              for (Index ci = 0; ci < Cin; ++ci) {
                const Index xoff = ((b * G + g) * Cin + ci) * L;
                const Index woff = ((g * Cout + co) * Cin + ci) * k;
                for (Index p = 0; p < L_out; ++p)
                  for (Index j = 0; j < k; ++j) {
                    if (px->requires_grad)
                      px->grad(xoff + p * stride + j) +=
                          gr[p] * pw->value(woff + j);
                    if (pw->requires_grad)
                      pw->grad(woff + j) +=
                          gr[p] * px->value(xoff + p * stride + j);
                  }
              }
            }
      });
}

// ---------------------------------------------------------------------------
// Pooling

namespace detail {

/// Max over windows [start_i, end_i) of the last axis; records argmax
/// (lowest index wins ties).
template <typename Scalar>
Tensor<Scalar> windowed_max(const Tensor<Scalar>& x,
                            const std::vector<std::pair<Index, Index>>& windows) {
  const Index L = x.dim(-1);
  const Index rows = x.size() / L;
  const Index n_out = static_cast<Index>(windows.size());
  Shape out_shape = x.shape();
  out_shape.back() = n_out;
  Buffer<Scalar> out(rows * n_out);
  std::vector<Index> argmax(rows * n_out);
  for (Index r = 0; r < rows; ++r) {
    const Scalar* src = x.data() + r * L;
    for (Index i = 0; i < n_out; ++i) {
      Index best = windows[i].first;
      for (Index t = best + 1; t < windows[i].second; ++t)
        if (src[t] > src[best]) best = t;
      out(r * n_out + i) = src[best];
      argmax[r * n_out + i] = r * L + best;
    }
  }
  auto px = x.node();
  return make_result<Scalar>(std::move(out_shape), std::move(out), {x},
                             [px, argmax](Node<Scalar>& self) {
                               if (!px->requires_grad) return;
                               px->ensure_grad();
                               for (std::size_t i = 0; i < argmax.size(); ++i)
                                 px->grad(argmax[i]) += self.grad(Index(i));
                             });
}

}  // namespace detail

/// Max pooling over the last axis of x[B,C,L].
template <typename Scalar>
Tensor<Scalar> maxpool1d(const Tensor<Scalar>& x, Index kernel, Index stride) {
  const Index L = x.dim(-1);
  require(kernel >= 1 && kernel <= L && stride >= 1, ErrorKind::Config,
          "maxpool1d: kernel " + std::to_string(kernel) +
              " invalid for length " + std::to_string(L));
  const Index L_out = (L - kernel) / stride + 1;
  std::vector<std::pair<Index, Index>> windows;
  for (Index p = 0; p < L_out; ++p)
    windows.emplace_back(p * stride, p * stride + kernel);
  return detail::windowed_max(x, windows);
}

/// Adaptive max pooling of the last axis to `out_len` bins; bins may overlap
/// or repeat when the input is shorter than `out_len`.
template <typename Scalar>
Tensor<Scalar> adaptive_maxpool1d(const Tensor<Scalar>& x, Index out_len) {
  const Index L = x.dim(-1);
  require(L >= 1 && out_len >= 1, ErrorKind::Config,
          "adaptive_maxpool1d: empty input");
  std::vector<std::pair<Index, Index>> windows;
  for (Index i = 0; i < out_len; ++i) {
    const Index start = (i * L) / out_len;
    const Index end = ((i + 1) * L + out_len - 1) / out_len;
    windows.emplace_back(start, std::max(end, start + 1));
  }
  return detail::windowed_max(x, windows);
}

// ---------------------------------------------------------------------------
// Normalization

/// Group normalization of x[B,L,C] with `groups` contiguous channel groups;
/// statistics are taken per sample over (L x channels-in-group). A group with
/// zero spread normalizes to exactly 0.
template <typename Scalar>
Tensor<Scalar> group_norm(const Tensor<Scalar>& x, Index groups,
                          const Tensor<Scalar>& gamma,
                          const Tensor<Scalar>& beta, Scalar eps) {
  require(x.ndim() == 3, ErrorKind::Config,
          "group_norm: expected [B,L,C], got " + shape_str(x.shape()));
  const Index B = x.dim(0), L = x.dim(1), C = x.dim(2);
  require(groups >= 1 && C % groups == 0, ErrorKind::Config,
          "group_norm: " + std::to_string(C) +
              " channels not divisible into " + std::to_string(groups) +
              " groups");
  require(gamma.size() == C && beta.size() == C, ErrorKind::Config,
          "group_norm: affine parameters must have " + std::to_string(C) +
              " entries");
  const Index width = C / groups;
  const Index count = L * width;
  Buffer<Scalar> xhat(x.size());
  Buffer<Scalar> inv_std(B * groups);
  for (Index b = 0; b < B; ++b)
    for (Index g = 0; g < groups; ++g) {
      const Scalar* base = x.data() + b * L * C + g * width;
      Scalar mean = 0, lo = base[0], hi = base[0];
      for (Index l = 0; l < L; ++l)
        for (Index c = 0; c < width; ++c) {
          const Scalar v = base[l * C + c];
          mean += v;
          lo = std::min(lo, v);
          hi = std::max(hi, v);
        }
      mean /= Scalar(count);
      Scalar var = 0;
      for (Index l = 0; l < L; ++l)
        for (Index c = 0; c < width; ++c) {
          const Scalar d = base[l * C + c] - mean;
          var += d * d;
        }
      var /= Scalar(count);
      const Scalar is = Scalar(1) / std::sqrt(var + eps);
      inv_std(b * groups + g) = is;
      for (Index l = 0; l < L; ++l)
        for (Index c = 0; c < width; ++c) {
          const Index idx = b * L * C + l * C + g * width + c;
          xhat(idx) = (lo == hi) ? Scalar(0) : (x.value()(idx) - mean) * is;
        }
    }
  Buffer<Scalar> out(x.size());
  {
    Eigen::Map<const RowMatrix<Scalar>> xh(xhat.data(), B * L, C);
    Eigen::Map<RowMatrix<Scalar>> y(out.data(), B * L, C);
    y = (xh.array().rowwise() * gamma.value().transpose()).rowwise() +
        beta.value().transpose();
  }
  auto px = x.node(), pg = gamma.node(), pb = beta.node();
  return detail::make_result<Scalar>(
      x.shape(), std::move(out), {x, gamma, beta},
      [=](Node<Scalar>& self) {
        Eigen::Map<const RowMatrix<Scalar>> dy(self.grad.data(), B * L, C);
        Eigen::Map<const RowMatrix<Scalar>> xh(xhat.data(), B * L, C);
        if (pg->requires_grad) {
          pg->ensure_grad();
          pg->grad += (dy.array() * xh.array()).colwise().sum().transpose();
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          pb->grad += dy.array().colwise().sum().transpose();
        }
        if (!px->requires_grad) return;
        px->ensure_grad();
        for (Index b = 0; b < B; ++b)
          for (Index g = 0; g < groups; ++g) {
            Scalar mean_d = 0, mean_dx = 0;
            for (Index l = 0; l < L; ++l)
              for (Index c = 0; c < width; ++c) {
                const Index ch = g * width + c;
                const Index idx = b * L * C + l * C + ch;
                const Scalar d = self.grad(idx) * pg->value(ch);
                mean_d += d;
                mean_dx += d * xhat(idx);
              }
            mean_d /= Scalar(count);
            mean_dx /= Scalar(count);
            const Scalar is = inv_std(b * groups + g);
            for (Index l = 0; l < L; ++l)
              for (Index c = 0; c < width; ++c) {
                const Index ch = g * width + c;
                const Index idx = b * L * C + l * C + ch;
                const Scalar d = self.grad(idx) * pg->value(ch);
                px->grad(idx) += is * (d - mean_d - xhat(idx) * mean_dx);
              }
          }
      });
}

// ---------------------------------------------------------------------------
// Activations

namespace detail {

template <typename Scalar, typename F, typename DF>
Tensor<Scalar> unary(const Tensor<Scalar>& x, F f, DF df) {
  Buffer<Scalar> out = x.value().unaryExpr(f);
  auto px = x.node();
  return make_result<Scalar>(
      x.shape(), std::move(out), {x}, [px, df](Node<Scalar>& self) {
        if (!px->requires_grad) return;
        px->ensure_grad();
        const Index n = px->value.size();
        for (Index i = 0; i < n; ++i)
          px->grad(i) += self.grad(i) * df(px->value(i), self.value(i));
      });
}

}  // namespace detail

/// Exact (erf-based) GELU.
template <typename Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& x) {
  constexpr Scalar inv_sqrt2 = Scalar(0.70710678118654752440);
  constexpr Scalar inv_sqrt2pi = Scalar(0.39894228040143267794);
  return detail::unary(
      x,
      [](Scalar v) {
        return Scalar(0.5) * v * (Scalar(1) + std::erf(v * inv_sqrt2));
      },
      [](Scalar v, Scalar) {
        const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(v * inv_sqrt2));
        return cdf + v * inv_sqrt2pi * std::exp(Scalar(-0.5) * v * v);
      });
}

template <typename Scalar>
Tensor<Scalar> elu(const Tensor<Scalar>& x, Scalar alpha = Scalar(1)) {
  return detail::unary(
      x,
      [alpha](Scalar v) { return v > 0 ? v : alpha * std::expm1(v); },
      [alpha](Scalar v, Scalar y) { return v > 0 ? Scalar(1) : y + alpha; });
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x) {
  return detail::unary(
      x,
      [](Scalar v) {
        if (v >= 0) return Scalar(1) / (Scalar(1) + std::exp(-v));
        const Scalar e = std::exp(v);
        return e / (Scalar(1) + e);
      },
      [](Scalar, Scalar y) { return y * (Scalar(1) - y); });
}

namespace detail {

/// Applies a row-wise probability map over the last axis. `forward` fills
/// one output row from one input row; `vjp` maps (row output, row upstream
/// grad) to the row input grad, accumulating.
template <typename Scalar, typename Fwd, typename Vjp>
Tensor<Scalar> rowwise_map(const Tensor<Scalar>& x, Fwd forward, Vjp vjp) {
  const Index n = x.dim(-1);
  const Index rows = n ? x.size() / n : 0;
  Buffer<Scalar> out(x.size());
  for (Index r = 0; r < rows; ++r) forward(r, x.data() + r * n, out.data() + r * n, n);
  auto px = x.node();
  return make_result<Scalar>(
      x.shape(), std::move(out), {x},
      [px, rows, n, vjp](Node<Scalar>& self) {
        if (!px->requires_grad) return;
        px->ensure_grad();
        for (Index r = 0; r < rows; ++r)
          vjp(r, self.value.data() + r * n, self.grad.data() + r * n,
              px->grad.data() + r * n, n);
      });
}

template <typename Scalar>
void softmax_row(const Scalar* z, Scalar* p, Index n) {
  Scalar m = z[0];
  for (Index i = 1; i < n; ++i) m = std::max(m, z[i]);
  Scalar s = 0;
  for (Index i = 0; i < n; ++i) {
    p[i] = std::exp(z[i] - m);
    s += p[i];
  }
  for (Index i = 0; i < n; ++i) p[i] /= s;
}

template <typename Scalar>
void softmax_row_vjp(const Scalar* p, const Scalar* g, Scalar* dz, Index n) {
  Scalar dot = 0;
  for (Index i = 0; i < n; ++i) dot += p[i] * g[i];
  for (Index i = 0; i < n; ++i) dz[i] += p[i] * (g[i] - dot);
}

}  // namespace detail

/// Max-stabilized softmax over the last axis.
template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& x) {
  return detail::rowwise_map(
      x, [](Index, const Scalar* z, Scalar* p, Index n) { detail::softmax_row(z, p, n); },
      [](Index, const Scalar* p, const Scalar* g, Scalar* dz, Index n) {
        detail::softmax_row_vjp(p, g, dz, n);
      });
}

/// Minimum number of bisection steps for entmax-1.5 thresholds.
inline constexpr int kEntmaxBisectionIters = 50;

namespace detail {

/// entmax-1.5 of one row: p_i = [(z_i/2 - tau)_+]^2 with sum(p) = 1, tau by
/// bisection on [min(z/2) - 1, max(z/2)] after shifting by max(z). The result is renormalized so the
/// support sums to exactly 1 up to rounding.
template <typename Scalar>
void entmax15_row(const Scalar* z, Scalar* p, Index n) {
  // Work on z - max(z) so uniform shifts cancel exactly.
  Scalar zmax = z[0];
  for (Index i = 1; i < n; ++i) zmax = std::max(zmax, z[i]);
  std::vector<Scalar> half(n);
  for (Index i = 0; i < n; ++i) half[i] = (z[i] - zmax) / 2;
  Scalar hi = 0, lo = half[0];
  for (Index i = 1; i < n; ++i) lo = std::min(lo, half[i]);
  lo -= Scalar(1);
  auto mass = [&](Scalar tau) {
    Scalar s = 0;
    for (Index i = 0; i < n; ++i) {
      const Scalar d = half[i] - tau;
      if (d > 0) s += d * d;
    }
    return s;
  };
  // mass() is decreasing in tau: mass(lo) >= 1 > mass(hi) = 0. Iterates
  // until the interval stops shrinking, which is >= kEntmaxBisectionIters
  // halvings for any non-degenerate double-precision row.
  for (int it = 0; it < 200; ++it) {
    const Scalar mid = lo + (hi - lo) / 2;
    if (mid <= lo || mid >= hi) break;  // interval exhausted at this precision
    if (mass(mid) >= Scalar(1))
      lo = mid;
    else
      hi = mid;
  }
  Scalar s = 0;
  for (Index i = 0; i < n; ++i) {
    const Scalar d = half[i] - lo;
    p[i] = d > 0 ? d * d : Scalar(0);
    s += p[i];
  }
  for (Index i = 0; i < n; ++i) p[i] /= s;
}

template <typename Scalar>
void entmax15_row_vjp(const Scalar* p, const Scalar* g, Scalar* dz, Index n) {
  Scalar num = 0, den = 0;
  for (Index i = 0; i < n; ++i) {
    const Scalar s = std::sqrt(p[i]);
    num += s * g[i];
    den += s;
  }
  const Scalar q = num / den;
  for (Index i = 0; i < n; ++i) {
    const Scalar s = std::sqrt(p[i]);
    dz[i] += s * (g[i] - q);
  }
}

}  // namespace detail

/// Sparse probability map entmax-1.5 over the last axis.
template <typename Scalar>
Tensor<Scalar> entmax15(const Tensor<Scalar>& x) {
  return detail::rowwise_map(
      x, [](Index, const Scalar* z, Scalar* p, Index n) { detail::entmax15_row(z, p, n); },
      [](Index, const Scalar* p, const Scalar* g, Scalar* dz, Index n) {
        detail::entmax15_row_vjp(p, g, dz, n);
      });
}

/// Softmax over the last axis for rows flagged in `selected`; every other row
/// becomes the uniform distribution and passes no gradient.
template <typename Scalar>
Tensor<Scalar> selective_softmax(const Tensor<Scalar>& x,
                                 std::vector<unsigned char> selected) {
  const Index rows = x.size() / x.dim(-1);
  require(static_cast<Index>(selected.size()) == rows, ErrorKind::Internal,
          "selective_softmax: selection size mismatch");
  auto sel = std::make_shared<std::vector<unsigned char>>(std::move(selected));
  return detail::rowwise_map(
      x,
      [sel](Index r, const Scalar* z, Scalar* p, Index n) {
        if ((*sel)[r]) {
          detail::softmax_row(z, p, n);
        } else {
          for (Index i = 0; i < n; ++i) p[i] = Scalar(1) / Scalar(n);
        }
      },
      [sel](Index r, const Scalar* p, const Scalar* g, Scalar* dz, Index n) {
        if ((*sel)[r]) detail::softmax_row_vjp(p, g, dz, n);
      });
}

/// Inverted dropout: survivors are scaled by 1/(1-p). Identity when not
/// training or p == 0.
template <typename Scalar>
Tensor<Scalar> dropout(const Tensor<Scalar>& x, double p, bool training,
                       Rng& rng) {
  require(p >= 0.0 && p < 1.0, ErrorKind::Config,
          "dropout: probability must be in [0,1), got " + std::to_string(p));
  if (!training || p == 0.0) return x;
  const Scalar keep_scale = Scalar(1.0 / (1.0 - p));
  Buffer<Scalar> mask(x.size());
  for (Index i = 0; i < x.size(); ++i)
    mask(i) = rng.uniform() < p ? Scalar(0) : keep_scale;
  Buffer<Scalar> out = x.value() * mask;
  auto px = x.node();
  return detail::make_result<Scalar>(
      x.shape(), std::move(out), {x}, [px, mask](Node<Scalar>& self) {
        detail::accumulate<Scalar>(px, self.grad * mask);
      });
}

// ---------------------------------------------------------------------------
// Losses

/// sum_i w_i (pred_i - target_i)^2 as a scalar tensor. Weights carry any
/// masking and normalization.
template <typename Scalar>
Tensor<Scalar> weighted_sq_error(const Tensor<Scalar>& pred,
                                 const Buffer<Scalar>& target,
                                 const Buffer<Scalar>& weights) {
  require(target.size() == pred.size() && weights.size() == pred.size(),
          ErrorKind::Internal, "weighted_sq_error: size mismatch");
  Buffer<Scalar> diff = pred.value() - target;
  Buffer<Scalar> out(1);
  out(0) = (weights * diff * diff).sum();
  auto pp = pred.node();
  return detail::make_result<Scalar>(
      {1}, std::move(out), {pred}, [pp, diff, weights](Node<Scalar>& self) {
        detail::accumulate<Scalar>(pp, Scalar(2) * self.grad(0) * weights * diff);
      });
}

/// Numerically stable binary cross-entropy on logits, weighted per sample:
/// sum_i w_i * [max(z,0) - z*y + log(1 + exp(-|z|))].
template <typename Scalar>
Tensor<Scalar> bce_with_logits(const Tensor<Scalar>& logits,
                               const Buffer<Scalar>& labels,
                               const Buffer<Scalar>& weights) {
  require(logits.size() == labels.size() && weights.size() == labels.size(),
          ErrorKind::Internal, "bce_with_logits: size mismatch");
  const auto& z = logits.value();
  Buffer<Scalar> out(1);
  out(0) = 0;
  for (Index i = 0; i < z.size(); ++i)
    out(0) += weights(i) * (std::max(z(i), Scalar(0)) - z(i) * labels(i) +
                            std::log1p(std::exp(-std::abs(z(i)))));
  auto pz = logits.node();
  return detail::make_result<Scalar>(
      {1}, std::move(out), {logits}, [pz, labels, weights](Node<Scalar>& self) {
        if (!pz->requires_grad) return;
        pz->ensure_grad();
        for (Index i = 0; i < labels.size(); ++i) {
          const Scalar v = pz->value(i);
          const Scalar sig = v >= 0 ? Scalar(1) / (Scalar(1) + std::exp(-v))
                                    : std::exp(v) / (Scalar(1) + std::exp(v));
          pz->grad(i) += self.grad(0) * weights(i) * (sig - labels(i));
        }
      });
}

/// Weighted softmax cross-entropy: logits[B,C], integer labels in [0,C).
template <typename Scalar>
Tensor<Scalar> cross_entropy(const Tensor<Scalar>& logits,
                             const std::vector<int>& labels,
                             const Buffer<Scalar>& weights) {
  const Index C = logits.dim(-1);
  const Index B = logits.size() / C;
  require(static_cast<Index>(labels.size()) == B && weights.size() == B,
          ErrorKind::Internal, "cross_entropy: batch size mismatch");
  Buffer<Scalar> probs(logits.size());
  Buffer<Scalar> out = Buffer<Scalar>::Zero(1);
  for (Index b = 0; b < B; ++b) {
    require(labels[b] >= 0 && labels[b] < C, ErrorKind::Data,
            "cross_entropy: label " + std::to_string(labels[b]) +
                " outside [0, " + std::to_string(C) + ")");
    detail::softmax_row(logits.data() + b * C, probs.data() + b * C, C);
    const Scalar* z = logits.data() + b * C;
    Scalar m = z[0];
    for (Index c = 1; c < C; ++c) m = std::max(m, z[c]);
    Scalar s = 0;
    for (Index c = 0; c < C; ++c) s += std::exp(z[c] - m);
    out(0) += weights(b) * (m + std::log(s) - z[labels[b]]);
  }
  auto pz = logits.node();
  return detail::make_result<Scalar>(
      {1}, std::move(out), {logits},
      [pz, probs, labels, weights, B, C](Node<Scalar>& self) {
        if (!pz->requires_grad) return;
        pz->ensure_grad();
        for (Index b = 0; b < B; ++b)
          for (Index c = 0; c < C; ++c)
            pz->grad(b * C + c) +=
                self.grad(0) * weights(b) *
                (probs(b * C + c) - (c == labels[b] ? Scalar(1) : Scalar(0)));
      });
}

}  // namespace tsrm
