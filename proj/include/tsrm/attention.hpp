#pragma once

// Self-attention variants and the feature-separated multi-head wrapper.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "tsrm/nn_ops.hpp"

namespace tsrm {

enum class AttentionKind { Vanilla, Entmax15, ProbSparse };

/// Which axis of a [query, key] map is summed to produce the per-position
/// attention vector.
enum class ReduceAxis { Queries, Keys };

struct AttentionSettings {
  AttentionKind kind = AttentionKind::Vanilla;
  double probsparse_factor = 5.0;
};

/// Number of sampled keys and of fully attended queries for ProbSparse:
/// min(D, ceil(c * ln D)), at least 1.
inline Index probsparse_top_count(Index length, double factor) {
  if (length <= 1) return length;
  const auto u = static_cast<Index>(std::ceil(factor * std::log(double(length))));
  return std::clamp<Index>(u, 1, length);
}

/// Query sparsity measure M(q_i) = max_j s_ij - mean_j s_ij over `samples`
/// randomly drawn keys per query, for one [D, D] score block. Returns the
/// selection mask of the top-u queries (ties toward the lower index).
template <typename Scalar>
std::vector<unsigned char> probsparse_select(const Scalar* scores, Index D,
                                             double factor, Rng& rng) {
  const Index u = probsparse_top_count(D, factor);
  std::vector<unsigned char> selected(D, 0);
  if (u >= D) {
    std::fill(selected.begin(), selected.end(), 1);
    return selected;
  }
  std::vector<double> measure(D);
  for (Index i = 0; i < D; ++i) {
    double mx = -std::numeric_limits<double>::infinity(), total = 0;
    for (Index s = 0; s < u; ++s) {
      const Index j = rng.integer(0, D - 1);
      const double v = double(scores[i * D + j]);
      mx = std::max(mx, v);
      total += v;
    }
    measure[i] = mx - total / double(u);
  }
  std::vector<Index> order(D);
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Index a, Index b) { return measure[a] > measure[b]; });
  for (Index r = 0; r < u; ++r) selected[order[r]] = 1;
  return selected;
}

template <typename Scalar>
struct AttentionResult {
  Tensor<Scalar> context;  // [..., D, d_h]
  Tensor<Scalar> weights;  // [..., D, D], differentiable, rows sum to 1
};

/// Scaled dot-product self-attention over the last two axes of Q, K, V
/// ([..., D, d_h]) with the probability map chosen by `settings`.
template <typename Scalar>
AttentionResult<Scalar> scaled_attention(const Tensor<Scalar>& q,
                                         const Tensor<Scalar>& k,
                                         const Tensor<Scalar>& v,
                                         const AttentionSettings& settings,
                                         Rng& rng) {
  const Index D = q.dim(-2), dh = q.dim(-1);
  auto scores = scale(matmul(q, k, /*transpose_b=*/true),
                      Scalar(1.0 / std::sqrt(double(dh))));
  Tensor<Scalar> weights;
  switch (settings.kind) {
    case AttentionKind::Vanilla:
      weights = softmax(scores);
      break;
    case AttentionKind::Entmax15:
      weights = entmax15(scores);
      break;
    case AttentionKind::ProbSparse: {
      const Index blocks = scores.size() / (D * D);
      std::vector<unsigned char> selected;
      selected.reserve(blocks * D);
      for (Index b = 0; b < blocks; ++b) {
        auto s = probsparse_select(scores.data() + b * D * D, D,
                                   settings.probsparse_factor, rng);
        selected.insert(selected.end(), s.begin(), s.end());
      }
      // Unselected queries attend uniformly, i.e. return the mean of V.
      weights = selective_softmax(scores, std::move(selected));
      break;
    }
  }
  return {matmul(weights, v), weights};
}

/// Head-merged result of one multi-head attention call.
template <typename Scalar>
struct AttentionOutput {
  Tensor<Scalar> values;  // [B, D, h * d_h]
  Tensor<Scalar> map;     // [B, D, D], head-averaged, detached
};

/// Multi-head attention on already-projected heads Q, K, V [B, h, D, d_h].
template <typename Scalar>
AttentionOutput<Scalar> multihead_attention(const Tensor<Scalar>& q,
                                            const Tensor<Scalar>& k,
                                            const Tensor<Scalar>& v,
                                            const AttentionSettings& settings,
                                            Rng& rng) {
  require(q.ndim() == 4 && q.shape() == k.shape() && q.shape() == v.shape(),
          ErrorKind::Config,
          "attention: expected matching Q, K, V of shape [B,h,D,d_h], got " +
              shape_str(q.shape()));
  const Index B = q.dim(0), h = q.dim(1), D = q.dim(2), dh = q.dim(3);
  auto res = scaled_attention(q, k, v, settings, rng);
  auto merged = reshape(permute(res.context, {0, 2, 1, 3}), {B, D, h * dh});
  return {merged, mean_axis(res.weights, 1).detach()};
}

template <typename Scalar>
AttentionOutput<Scalar> vanilla_attention(const Tensor<Scalar>& q,
                                          const Tensor<Scalar>& k,
                                          const Tensor<Scalar>& v) {
  Rng unused;
  return multihead_attention(q, k, v, {AttentionKind::Vanilla}, unused);
}

template <typename Scalar>
AttentionOutput<Scalar> entmax_attention(const Tensor<Scalar>& q,
                                         const Tensor<Scalar>& k,
                                         const Tensor<Scalar>& v) {
  Rng unused;
  return multihead_attention(q, k, v, {AttentionKind::Entmax15}, unused);
}

template <typename Scalar>
AttentionOutput<Scalar> probsparse_attention(const Tensor<Scalar>& q,
                                             const Tensor<Scalar>& k,
                                             const Tensor<Scalar>& v,
                                             double factor, Rng& rng) {
  return multihead_attention(q, k, v, {AttentionKind::ProbSparse, factor}, rng);
}

/// Collapse [..., D, D] maps to [..., D] attention vectors. Summing over
/// queries gives the attention each position receives.
template <typename Scalar>
Tensor<Scalar> reduce_map(const Tensor<Scalar>& map,
                          ReduceAxis axis = ReduceAxis::Queries) {
  return sum_axis(map, axis == ReduceAxis::Queries ? -2 : -1);
}

/// Per-feature projection weights, stacked over features: weights are
/// [F, f_embed, f_embed], biases [F * f_embed].
template <typename Scalar>
struct FeatureAttentionParams {
  Tensor<Scalar> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <typename Scalar>
struct FeatureAttentionOutput {
  Tensor<Scalar> values;    // [B, D, F * f_embed]
  Tensor<Scalar> vectors;   // [B, F, D], differentiable reduced maps
  Tensor<Scalar> full_map;  // [B, F, D, D], head-averaged, detached
};

/// Feature-separated multi-head self-attention: the F segments of width
/// f_embed never interact. Each has its own projections and h heads.
template <typename Scalar>
FeatureAttentionOutput<Scalar> feature_separated_mha(
    const Tensor<Scalar>& r, const FeatureAttentionParams<Scalar>& p,
    Index features, Index heads, const AttentionSettings& settings,
    ReduceAxis axis, Rng& rng) {
  require(r.ndim() == 3, ErrorKind::Config,
          "feature_separated_mha: expected [B,D,d_embed], got " +
              shape_str(r.shape()));
  const Index B = r.dim(0), D = r.dim(1), d = r.dim(2);
  require(features >= 1 && d % features == 0, ErrorKind::Config,
          "feature_separated_mha: d_embed " + std::to_string(d) +
              " not divisible by F=" + std::to_string(features));
  const Index fe = d / features;
  require(heads >= 1 && fe % heads == 0, ErrorKind::Config,
          "feature_separated_mha: f_embed " + std::to_string(fe) +
              " not divisible by h=" + std::to_string(heads));
  const Index dh = fe / heads;
  auto split_heads = [&](const Tensor<Scalar>& t) {
    // [B, D, F*h*dh] -> [B, F, h, D, dh]
    return permute(reshape(t, {B, D, features, heads, dh}), {0, 2, 3, 1, 4});
  };
  auto q = split_heads(grouped_linear(r, p.wq, p.bq));
  auto k = split_heads(grouped_linear(r, p.wk, p.bk));
  auto v = split_heads(grouped_linear(r, p.wv, p.bv));
  auto res = scaled_attention(q, k, v, settings, rng);
  auto merged = reshape(permute(res.context, {0, 3, 1, 2, 4}), {B, D, d});
  auto out = grouped_linear(merged, p.wo, p.bo);
  auto averaged = mean_axis(res.weights, 2);  // [B, F, D, D]
  return {out, reduce_map(averaged, axis), averaged.detach()};
}

}  // namespace tsrm
