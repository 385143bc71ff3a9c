#pragma once

// Structural and linear-algebra primitives over Tensor<Scalar>.

#include <cmath>
#include <vector>

#include "tsrm/tensor.hpp"

namespace tsrm {

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require(a.shape() == b.shape(), ErrorKind::Config,
          "add: shape mismatch " + shape_str(a.shape()) + " vs " +
              shape_str(b.shape()));
  Buffer<Scalar> out = a.value() + b.value();
  auto pa = a.node(), pb = b.node();
  return detail::make_result<Scalar>(a.shape(), std::move(out), {a, b},
                                     [pa, pb](Node<Scalar>& self) {
                                       detail::accumulate(pa, self.grad);
                                       detail::accumulate(pb, self.grad);
                                     });
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require(a.shape() == b.shape(), ErrorKind::Config,
          "sub: shape mismatch " + shape_str(a.shape()) + " vs " +
              shape_str(b.shape()));
  Buffer<Scalar> out = a.value() - b.value();
  auto pa = a.node(), pb = b.node();
  return detail::make_result<Scalar>(a.shape(), std::move(out), {a, b},
                                     [pa, pb](Node<Scalar>& self) {
                                       detail::accumulate(pa, self.grad);
                                       detail::accumulate<Scalar>(pb,
                                                                  -self.grad);
                                     });
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require(a.shape() == b.shape(), ErrorKind::Config,
          "mul: shape mismatch " + shape_str(a.shape()) + " vs " +
              shape_str(b.shape()));
  Buffer<Scalar> out = a.value() * b.value();
  auto pa = a.node(), pb = b.node();
  return detail::make_result<Scalar>(
      a.shape(), std::move(out), {a, b}, [pa, pb](Node<Scalar>& self) {
        detail::accumulate<Scalar>(pa, self.grad * pb->value);
        detail::accumulate<Scalar>(pb, self.grad * pa->value);
      });
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& x, Scalar factor) {
  Buffer<Scalar> out = x.value() * factor;
  auto px = x.node();
  return detail::make_result<Scalar>(
      x.shape(), std::move(out), {x}, [px, factor](Node<Scalar>& self) {
        detail::accumulate<Scalar>(px, self.grad * factor);
      });
}

/// x + bias, with bias broadcast along the last axis.
template <typename Scalar>
Tensor<Scalar> add_bias(const Tensor<Scalar>& x, const Tensor<Scalar>& bias) {
  const Index c = x.dim(-1);
  require(bias.size() == c, ErrorKind::Config,
          "add_bias: bias length " + std::to_string(bias.size()) +
              " vs last dim " + std::to_string(c));
  const Index rows = x.size() / c;
  Buffer<Scalar> out = x.value();
  Eigen::Map<RowMatrix<Scalar>> m(out.data(), rows, c);
  m.rowwise() += bias.value().matrix().transpose();
  auto px = x.node(), pb = bias.node();
  return detail::make_result<Scalar>(
      x.shape(), std::move(out), {x, bias},
      [px, pb, rows, c](Node<Scalar>& self) {
        detail::accumulate(px, self.grad);
        if (pb->requires_grad) {
          Eigen::Map<const RowMatrix<Scalar>> g(self.grad.data(), rows, c);
          pb->ensure_grad();
          pb->grad += g.colwise().sum().transpose().array();
        }
      });
}

/// Sum of all entries, as a scalar tensor of shape [1].
template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x) {
  Buffer<Scalar> out(1);
  out(0) = x.value().sum();
  auto px = x.node();
  return detail::make_result<Scalar>({1}, std::move(out), {x},
                                     [px](Node<Scalar>& self) {
                                       detail::accumulate<Scalar>(
                                           px, Buffer<Scalar>::Constant(
                                                   px->value.size(),
                                                   self.grad(0)));
                                     });
}

/// Weighted linear combination of scalar tensors.
template <typename Scalar>
Tensor<Scalar> weighted_sum(const std::vector<Tensor<Scalar>>& terms,
                            const std::vector<Scalar>& weights) {
  require(terms.size() == weights.size() && !terms.empty(), ErrorKind::Internal,
          "weighted_sum: terms/weights mismatch");
  Buffer<Scalar> out = Buffer<Scalar>::Zero(1);
  std::vector<typename Tensor<Scalar>::NodePtr> nodes;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    require(terms[i].size() == 1, ErrorKind::Internal,
            "weighted_sum: terms must be scalars");
    out(0) += weights[i] * terms[i].item();
    nodes.push_back(terms[i].node());
  }
  return detail::make_result<Scalar>(
      {1}, std::move(out), terms,
      [nodes, weights](Node<Scalar>& self) {
        for (std::size_t i = 0; i < nodes.size(); ++i)
          detail::accumulate<Scalar>(
              nodes[i], Buffer<Scalar>::Constant(1, weights[i] * self.grad(0)));
      });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape) {
  require(numel(shape) == x.size(), ErrorKind::Config,
          "reshape: cannot view " + shape_str(x.shape()) + " as " +
              shape_str(shape));
  Buffer<Scalar> out = x.value();
  auto px = x.node();
  return detail::make_result<Scalar>(std::move(shape), std::move(out), {x},
                                     [px](Node<Scalar>& self) {
                                       detail::accumulate(px, self.grad);
                                     });
}

namespace detail {

/// out[permuted index] = in[index]; `perm[i]` names the input axis that
/// becomes output axis i.
template <typename Scalar>
void permute_into(const Scalar* in, Scalar* out, const Shape& in_shape,
                  const std::vector<int>& perm, bool accumulate_out,
                  bool inverse) {
  const int nd = static_cast<int>(in_shape.size());
  std::vector<Index> in_stride(nd, 1);
  for (int i = nd - 2; i >= 0; --i)
    in_stride[i] = in_stride[i + 1] * in_shape[i + 1];
  Shape out_shape(nd);
  for (int i = 0; i < nd; ++i) out_shape[i] = in_shape[perm[i]];
  // Stride in the input for each output axis.
  std::vector<Index> src_stride(nd);
  for (int i = 0; i < nd; ++i) src_stride[i] = in_stride[perm[i]];

  const Index total = numel(in_shape);
  const Index last = out_shape[nd - 1];
  const Index last_stride = src_stride[nd - 1];
  std::vector<Index> counter(nd, 0);
  Index src = 0;
  for (Index dst = 0; dst < total; dst += last) {
    for (Index j = 0; j < last; ++j) {
      const Index s = src + j * last_stride;
      if (inverse) {
        // Scatter from permuted layout back to the original layout.
        if (accumulate_out)
          out[s] += in[dst + j];
        else
          out[s] = in[dst + j];
      } else {
        if (accumulate_out)
          out[dst + j] += in[s];
        else
          out[dst + j] = in[s];
      }
    }
    for (int a = nd - 2; a >= 0; --a) {
      src += src_stride[a];
      if (++counter[a] < out_shape[a]) break;
      src -= src_stride[a] * out_shape[a];
      counter[a] = 0;
    }
  }
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> permute(const Tensor<Scalar>& x, std::vector<int> perm) {
  const int nd = x.ndim();
  require(static_cast<int>(perm.size()) == nd, ErrorKind::Internal,
          "permute: rank mismatch");
  Shape out_shape(nd);
  for (int i = 0; i < nd; ++i) out_shape[i] = x.shape()[perm[i]];
  Buffer<Scalar> out(x.size());
  detail::permute_into(x.data(), out.data(), x.shape(), perm, false, false);
  auto px = x.node();
  Shape in_shape = x.shape();
  return detail::make_result<Scalar>(
      std::move(out_shape), std::move(out), {x},
      [px, perm, in_shape](Node<Scalar>& self) {
        if (!px->requires_grad) return;
        px->ensure_grad();
        detail::permute_into(self.grad.data(), px->grad.data(), in_shape, perm,
                             true, true);
      });
}

/// Swap the last two axes.
template <typename Scalar>
Tensor<Scalar> transpose_last2(const Tensor<Scalar>& x) {
  std::vector<int> perm(x.ndim());
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return permute(x, perm);
}

template <typename Scalar>
Tensor<Scalar> slice(const Tensor<Scalar>& x, int axis, Index start,
                     Index length) {
  axis = detail::normalize_axis(axis, x.ndim());
  require(start >= 0 && length >= 0 && start + length <= x.dim(axis),
          ErrorKind::Config,
          "slice: [" + std::to_string(start) + ", " +
              std::to_string(start + length) + ") outside axis of extent " +
              std::to_string(x.dim(axis)));
  const auto s = detail::split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  Buffer<Scalar> out(numel(out_shape));
  const Index chunk = length * s.inner;
  for (Index o = 0; o < s.outer; ++o)
    out.segment(o * chunk, chunk) =
        x.value().segment((o * s.extent + start) * s.inner, chunk);
  auto px = x.node();
  return detail::make_result<Scalar>(
      std::move(out_shape), std::move(out), {x},
      [px, s, start, chunk](Node<Scalar>& self) {
        if (!px->requires_grad) return;
        px->ensure_grad();
        for (Index o = 0; o < s.outer; ++o)
          px->grad.segment((o * s.extent + start) * s.inner, chunk) +=
              self.grad.segment(o * chunk, chunk);
      });
}

template <typename Scalar>
Tensor<Scalar> concat(const std::vector<Tensor<Scalar>>& parts, int axis) {
  require(!parts.empty(), ErrorKind::Internal, "concat: no inputs");
  axis = detail::normalize_axis(axis, parts[0].ndim());
  Shape out_shape = parts[0].shape();
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    Shape a = p.shape(), b = parts[0].shape();
    a[axis] = b[axis] = 0;
    require(a == b, ErrorKind::Config,
            "concat: incompatible shapes " + shape_str(p.shape()) + " vs " +
                shape_str(parts[0].shape()));
    out_shape[axis] += p.dim(axis);
  }
  const auto so = detail::split_axis(out_shape, axis);
  Buffer<Scalar> out(numel(out_shape));
  std::vector<Index> offsets;
  Index off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const Index chunk = p.dim(axis) * so.inner;
    for (Index o = 0; o < so.outer; ++o)
      out.segment((o * so.extent + off) * so.inner, chunk) =
          p.value().segment(o * chunk, chunk);
    off += p.dim(axis);
  }
  std::vector<typename Tensor<Scalar>::NodePtr> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return detail::make_result<Scalar>(
      std::move(out_shape), std::move(out), parts,
      [nodes, offsets, so, axis](Node<Scalar>& self) {
        for (std::size_t i = 0; i < nodes.size(); ++i) {
          auto& p = nodes[i];
          if (!p->requires_grad) continue;
          p->ensure_grad();
          const Index chunk = p->shape[axis] * so.inner;
          for (Index o = 0; o < so.outer; ++o)
            p->grad.segment(o * chunk, chunk) += self.grad.segment(
                (o * so.extent + offsets[i]) * so.inner, chunk);
        }
      });
}

/// Sum over one axis (the axis is removed).
template <typename Scalar>
Tensor<Scalar> sum_axis(const Tensor<Scalar>& x, int axis) {
  axis = detail::normalize_axis(axis, x.ndim());
  const auto s = detail::split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + axis);
  Buffer<Scalar> out = Buffer<Scalar>::Zero(s.outer * s.inner);
  for (Index o = 0; o < s.outer; ++o)
    for (Index a = 0; a < s.extent; ++a)
      out.segment(o * s.inner, s.inner) +=
          x.value().segment((o * s.extent + a) * s.inner, s.inner);
  auto px = x.node();
  return detail::make_result<Scalar>(
      std::move(out_shape), std::move(out), {x}, [px, s](Node<Scalar>& self) {
        if (!px->requires_grad) return;
        px->ensure_grad();
        for (Index o = 0; o < s.outer; ++o)
          for (Index a = 0; a < s.extent; ++a)
            px->grad.segment((o * s.extent + a) * s.inner, s.inner) +=
                self.grad.segment(o * s.inner, s.inner);
      });
}

template <typename Scalar>
Tensor<Scalar> mean_axis(const Tensor<Scalar>& x, int axis) {
  axis = detail::normalize_axis(axis, x.ndim());
  return scale(sum_axis(x, axis), Scalar(1) / Scalar(x.dim(axis)));
}

// ---------------------------------------------------------------------------
// Linear algebra

/// Batched matrix product a[..., m, k] x b[..., k, n] -> [..., m, n].
///
/// `b` either carries the same batch dimensions as `a` or is a plain matrix
/// broadcast over the batch. With `transpose_b`, b is read as [..., n, k].
template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b,
                      bool transpose_b = false) {
  require(a.ndim() >= 2 && b.ndim() >= 2, ErrorKind::Config,
          "matmul: operands must be at least 2-D, got " + shape_str(a.shape()) +
              " and " + shape_str(b.shape()));
  const Index m = a.dim(-2), k = a.dim(-1);
  const Index bk = transpose_b ? b.dim(-1) : b.dim(-2);
  const Index n = transpose_b ? b.dim(-2) : b.dim(-1);
  const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  const Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  const bool broadcast_b = b_batch.empty() && !a_batch.empty();
  if (k != bk || (!broadcast_b && a_batch != b_batch))
    fail(ErrorKind::Config, "matmul: shape mismatch " + shape_str(a.shape()) +
                                " x " + shape_str(b.shape()) +
                                (transpose_b ? " (b transposed)" : ""));
  const Index batch = numel(a_batch);
  Shape out_shape = a_batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Buffer<Scalar> out(batch * m * n);

  using CMap = Eigen::Map<const RowMatrix<Scalar>>;
  using MMap = Eigen::Map<RowMatrix<Scalar>>;
  const Index b_rows = transpose_b ? n : k, b_cols = transpose_b ? k : n;
  const Index b_step = broadcast_b ? 0 : k * n;
  for (Index i = 0; i < batch; ++i) {
    CMap A(a.data() + i * m * k, m, k);
    CMap B(b.data() + i * b_step, b_rows, b_cols);
    MMap C(out.data() + i * m * n, m, n);
    if (transpose_b)
      C.noalias() = A * B.transpose();
    else
      C.noalias() = A * B;
  }

  auto pa = a.node(), pb = b.node();
  return detail::make_result<Scalar>(
      std::move(out_shape), std::move(out), {a, b},
      [=](Node<Scalar>& self) {
        if (pa->requires_grad) pa->ensure_grad();
        if (pb->requires_grad) pb->ensure_grad();
        for (Index i = 0; i < batch; ++i) {
          Eigen::Map<const RowMatrix<Scalar>> G(self.grad.data() + i * m * n,
                                                m, n);
          CMap B(pb->value.data() + i * b_step, b_rows, b_cols);
          if (pa->requires_grad) {
            MMap dA(pa->grad.data() + i * m * k, m, k);
            if (transpose_b)
              dA.noalias() += G * B;
            else
              dA.noalias() += G * B.transpose();
          }
          if (pb->requires_grad) {
            CMap A(pa->value.data() + i * m * k, m, k);
            MMap dB(pb->grad.data() + i * b_step, b_rows, b_cols);
            if (transpose_b)
              dB.noalias() += G.transpose() * A;
            else
              dB.noalias() += A.transpose() * G;
          }
        }
      });
}

/// Block-diagonal linear map over the last axis.
///
/// x[..., G*in] is split into G contiguous groups; group g is multiplied by
/// weight[g] (in x out) and offset by bias[g]. G = 1 is an ordinary dense
/// layer. `bias` may be undefined.
template <typename Scalar>
Tensor<Scalar> grouped_linear(const Tensor<Scalar>& x,
                              const Tensor<Scalar>& weight,
                              const Tensor<Scalar>& bias) {
  require(weight.ndim() == 3, ErrorKind::Config,
          "grouped_linear: weight must be [G,in,out], got " +
              shape_str(weight.shape()));
  const Index groups = weight.dim(0), in = weight.dim(1), out = weight.dim(2);
  require(x.dim(-1) == groups * in, ErrorKind::Config,
          "grouped_linear: input width " + std::to_string(x.dim(-1)) +
              " does not match weight " + shape_str(weight.shape()));
  if (bias.defined())
    require(bias.size() == groups * out, ErrorKind::Config,
            "grouped_linear: bias size mismatch");
  const Index rows = x.size() / x.dim(-1);
  Shape out_shape = x.shape();
  out_shape.back() = groups * out;
  Buffer<Scalar> result(rows * groups * out);

  using CMap = Eigen::Map<const RowMatrix<Scalar>>;
  using MMap = Eigen::Map<RowMatrix<Scalar>>;
  CMap X(x.data(), rows, groups * in);
  MMap Y(result.data(), rows, groups * out);
  for (Index g = 0; g < groups; ++g) {
    CMap W(weight.data() + g * in * out, in, out);
    Y.middleCols(g * out, out).noalias() = X.middleCols(g * in, in) * W;
    if (bias.defined())
      Y.middleCols(g * out, out).rowwise() +=
          bias.value().segment(g * out, out).matrix().transpose();
  }

  auto px = x.node(), pw = weight.node();
  auto pb = bias.defined() ? bias.node() : nullptr;
  return detail::make_result<Scalar>(
      std::move(out_shape), std::move(result), {x, weight, bias},
      [=](Node<Scalar>& self) {
        CMap G(self.grad.data(), rows, groups * out);
        CMap Xv(px->value.data(), rows, groups * in);
        if (px->requires_grad) px->ensure_grad();
        if (pw->requires_grad) pw->ensure_grad();
        if (pb && pb->requires_grad) pb->ensure_grad();
        for (Index g = 0; g < groups; ++g) {
          CMap W(pw->value.data() + g * in * out, in, out);
          if (px->requires_grad) {
            MMap dX(px->grad.data(), rows, groups * in);
            dX.middleCols(g * in, in).noalias() +=
                G.middleCols(g * out, out) * W.transpose();
          }
          if (pw->requires_grad) {
            MMap dW(pw->grad.data() + g * in * out, in, out);
            dW.noalias() +=
                Xv.middleCols(g * in, in).transpose() * G.middleCols(g * out, out);
          }
          if (pb && pb->requires_grad)
            pb->grad.segment(g * out, out) +=
                G.middleCols(g * out, out).colwise().sum().transpose().array();
        }
      });
}

}  // namespace tsrm
