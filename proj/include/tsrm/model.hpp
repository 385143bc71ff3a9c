#pragma once

// The TSRM network: per-feature embedding, stacked encoding layers with
// representation / merge layers, de-embedding and the attention-map
// classifier.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "tsrm/attention.hpp"
#include "tsrm/config.hpp"
#include "tsrm/nn_ops.hpp"
#include "tsrm/optim.hpp"

namespace tsrm {

enum class Mode { Train, Eval };

template <typename Scalar>
struct ForwardTrace {
  Tensor<Scalar> output;                // [B, T, F]
  Tensor<Scalar> logits;                // [B, C]
  std::vector<Tensor<Scalar>> vectors;  // N x [B, F, D], differentiable
  std::vector<Tensor<Scalar>> maps;     // N x [B, F, D, D], detached
};

template <typename Scalar>
struct EncodingLayerOutput {
  Tensor<Scalar> encoding;  // [B, T, d_embed]
  Tensor<Scalar> residual;  // [B, D, d_embed]
  Tensor<Scalar> vectors;   // [B, F, D]
  Tensor<Scalar> map;       // [B, F, D, D], detached
};

/// Parameter-name helpers; the checkpoint format keys on these.
namespace names {
inline std::string layer(Index n) { return "layers." + std::to_string(n); }
inline std::string branch(Index n, Index m) {
  return layer(n) + ".branch." + std::to_string(m);
}
inline std::string merge(Index n, Index m) {
  return layer(n) + ".merge." + std::to_string(m);
}
inline std::string head(Index i) {
  return "classifier.head." + std::to_string(i);
}
}  // namespace names

template <typename Scalar>
class TsrmModel {
 public:
  explicit TsrmModel(ModelConfig config, std::uint64_t init_seed = 0)
      : config_(std::move(config)) {
    config_.validate();
    branches_ = config_.resolve_branches();
    Rng rng(init_seed);
    init_parameters(rng);
  }

  const ModelConfig& config() const { return config_; }
  const std::vector<ResolvedBranch>& branches() const { return branches_; }
  Index representation_length() const {
    Index d = 0;
    for (const auto& b : branches_) d += b.conv_len + b.pool_len;
    return d;
  }

  ParameterStore<Scalar>& params() { return params_; }
  const ParameterStore<Scalar>& params() const { return params_; }
  Tensor<Scalar> param(const std::string& name) const {
    return params_.at(name).tensor;
  }

  /// A model for a different window length that shares every parameter
  /// tensor with this one. Only valid while parameter shapes do not depend
  /// on T, i.e. with absolute kernel sizes.
  TsrmModel with_window(Index window) const {
    TsrmModel other(*this);
    other.config_.window = window;
    for (std::size_t i = 0; i < other.config_.branches.size(); ++i) {
      auto& b = other.config_.branches[i];
      if (b.is_percent()) {
        b.kernel = branches_[i].kernel;
        b.kernel_pct = 0.0;
      }
    }
    other.config_.validate();
    other.branches_ = other.config_.resolve_branches();
    return other;
  }

  /// Replace the three ensemble linears of the classifier with freshly
  /// initialized layers producing `classes` outputs.
  void reset_classifier_head(Index classes, std::uint64_t seed) {
    config_.num_classes = classes;
    Rng rng(seed);
    const Index F = config_.features, eh = config_.classifier.ensemble_hidden;
    const Index dims[4] = {F, eh, eh, classes};
    for (Index i = 0; i < 3; ++i) {
      const bool frozen = params_.at(names::head(i) + ".weight").frozen;
      params_.replace(names::head(i) + ".weight", {1, dims[i], dims[i + 1]},
                      uniform_init(dims[i] * dims[i + 1], dims[i], rng));
      params_.replace(names::head(i) + ".bias", {dims[i + 1]},
                      Buffer<Scalar>::Zero(dims[i + 1]));
      params_.set_frozen(names::head(i) + ".weight", frozen);
      params_.set_frozen(names::head(i) + ".bias", frozen);
    }
  }

  bool is_classifier_param(const std::string& name) const {
    return name.rfind("classifier.", 0) == 0;
  }

  // -------------------------------------------------------------------------
  // Forward pieces

  /// x[B,T,F] -> E[B,T,F*f_embed], one 1 -> f_embed affine map per feature.
  Tensor<Scalar> embed(const Tensor<Scalar>& x) const {
    require(x.ndim() == 3 && x.dim(2) == config_.features, ErrorKind::Config,
            "embed: expected input [B,T," + std::to_string(config_.features) +
                "], got " + shape_str(x.shape()));
    return grouped_linear(x, param("embed.weight"), param("embed.bias"));
  }

  /// E[B,T,d] -> R[B,D,d]; positions laid out as [conv_1, pool_1, conv_2, ...].
  Tensor<Scalar> representation_layer(const Tensor<Scalar>& e,
                                      Index layer) const {
    auto et = transpose_last2(e);
    std::vector<Tensor<Scalar>> parts;
    for (std::size_t m = 0; m < branches_.size(); ++m) {
      const auto& b = branches_[m];
      const auto base = names::branch(layer, Index(m));
      auto conv = conv1d_depthwise(et, param(base + ".conv.weight"),
                                   param(base + ".conv.bias"), b.dilation,
                                   b.stride, base);
      parts.push_back(conv);
      parts.push_back(maxpool1d(conv, b.pool_kernel, b.pool_stride));
    }
    return transpose_last2(concat(parts, 2));
  }

  /// P[B,D,d] -> E[B,T,d]: pooled segments dropped, conv segments inverted
  /// by transposed convolutions and merged per feature.
  Tensor<Scalar> merge_layer(const Tensor<Scalar>& p, Index layer) const {
    const Index T = config_.window;
    auto pt = transpose_last2(p);
    Tensor<Scalar> acc;
    Index offset = 0;
    for (std::size_t m = 0; m < branches_.size(); ++m) {
      const auto& b = branches_[m];
      const auto base = names::merge(layer, Index(m));
      auto seg = slice(pt, 2, offset, b.conv_len);
      offset += b.conv_len + b.pool_len;
      auto restored = transpose_last2(conv1d_transpose_depthwise(
          seg, param(base + ".tconv.weight"), b.dilation, b.stride, T));
      auto mixed =
          grouped_linear(restored, param(base + ".weight"), Tensor<Scalar>());
      acc = acc.defined() ? add(acc, mixed) : mixed;
    }
    return add_bias(acc, param(names::layer(layer) + ".merge.bias"));
  }

  EncodingLayerOutput<Scalar> encoding_layer(const Tensor<Scalar>& e,
                                             const Tensor<Scalar>& residual,
                                             Index layer, Mode mode,
                                             Rng& rng) const {
    const auto base = names::layer(layer);
    const bool training = mode == Mode::Train;
    auto r = representation_layer(e, layer);
    if (residual.defined()) r = add(r, residual);

    auto h1 = gelu(group_norm(r, config_.features, param(base + ".block1.norm.gamma"),
                              param(base + ".block1.norm.beta"),
                              Scalar(config_.norm_eps)));
    FeatureAttentionParams<Scalar> ap{
        param(base + ".block1.attn.q.weight"), param(base + ".block1.attn.q.bias"),
        param(base + ".block1.attn.k.weight"), param(base + ".block1.attn.k.bias"),
        param(base + ".block1.attn.v.weight"), param(base + ".block1.attn.v.bias"),
        param(base + ".block1.attn.o.weight"), param(base + ".block1.attn.o.bias")};
    auto att = feature_separated_mha(h1, ap, config_.features, config_.heads,
                                     config_.attention, config_.reduce_axis,
                                     rng);
    auto x = add(r, dropout(att.values, config_.dropout, training, rng));

    auto h2 = gelu(group_norm(x, config_.features, param(base + ".block2.norm.gamma"),
                              param(base + ".block2.norm.beta"),
                              Scalar(config_.norm_eps)));
    auto lin = grouped_linear(h2, param(base + ".block2.linear.weight"),
                              param(base + ".block2.linear.bias"));
    auto y = add(x, dropout(lin, config_.dropout, training, rng));

    auto fused = residual.defined() ? add(y, residual) : y;
    auto carried = config_.carry_residual ? fused : y;
    return {merge_layer(fused, layer), carried, att.vectors, att.full_map};
  }

  /// E[B,T,d] -> y[B,T,F], one f_embed -> 1 affine map per feature.
  Tensor<Scalar> de_embed(const Tensor<Scalar>& e) const {
    return grouped_linear(e, param("deembed.weight"), param("deembed.bias"));
  }

  /// Per-feature sigmoid scores of the classifier trunk, [B, F].
  Tensor<Scalar> feature_scores(
      const std::vector<Tensor<Scalar>>& vectors) const {
    const auto& ac = config_.classifier;
    const Index F = config_.features;
    std::vector<Tensor<Scalar>> stacked;
    for (const auto& v : vectors)
      stacked.push_back(reshape(v, {v.dim(0), F, 1, v.dim(2)}));
    // Each vector averages 1, so the trunk reads the excess over uniform
    // attention.
    auto x = concat(stacked, 2);  // [B, F, N, D]
    x = sub(x, Tensor<Scalar>::constant(x.shape(), Scalar(1)));
    const Index B = x.dim(0);
    x = conv1d_grouped(x, param("classifier.conv1.weight"),
                       param("classifier.conv1.bias"), ac.conv1_stride);
    x = conv1d_grouped(x, param("classifier.conv2.weight"),
                       param("classifier.conv2.bias"), ac.conv2_stride);
    x = adaptive_maxpool1d(elu(x), ac.pool_length);
    x = reshape(x, {B, F * ac.conv2_channels * ac.pool_length});
    x = grouped_linear(x, param("classifier.fc1.weight"),
                       param("classifier.fc1.bias"));
    x = grouped_linear(x, param("classifier.fc2.weight"),
                       param("classifier.fc2.bias"));
    return sigmoid(x);
  }

  /// N x [B,F,D] attention vectors -> [B,C] logits. Reads no sequence values.
  Tensor<Scalar> attention_classifier(
      const std::vector<Tensor<Scalar>>& vectors) const {
    auto x = feature_scores(vectors);
    x = gelu(grouped_linear(x, param(names::head(0) + ".weight"),
                            param(names::head(0) + ".bias")));
    x = gelu(grouped_linear(x, param(names::head(1) + ".weight"),
                            param(names::head(1) + ".bias")));
    return grouped_linear(x, param(names::head(2) + ".weight"),
                          param(names::head(2) + ".bias"));
  }

  /// Full pass. Missing inputs must already hold the -1 token. Deterministic
  /// for a fixed (input, mode, seed).
  ForwardTrace<Scalar> forward(const Tensor<Scalar>& x, Mode mode,
                               std::uint64_t seed = 0) const {
    require(x.ndim() == 3 && x.dim(1) == config_.window, ErrorKind::Config,
            "forward: expected input [B," + std::to_string(config_.window) +
                "," + std::to_string(config_.features) + "], got " +
                shape_str(x.shape()));
    Rng rng(seed);
    ForwardTrace<Scalar> trace;
    auto e = embed(x);
    Tensor<Scalar> residual;
    for (Index n = 0; n < config_.layers; ++n) {
      auto out = encoding_layer(e, residual, n, mode, rng);
      e = out.encoding;
      residual = out.residual;
      trace.vectors.push_back(out.vectors);
      trace.maps.push_back(out.map);
    }
    trace.output = de_embed(e);
    trace.logits = attention_classifier(trace.vectors);
    return trace;
  }

 private:
  static Buffer<Scalar> uniform_init(Index n, Index fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(double(std::max<Index>(fan_in, 1)));
    Buffer<Scalar> b(n);
    for (Index i = 0; i < n; ++i) b(i) = Scalar(rng.uniform(-bound, bound));
    return b;
  }

  /// One draw replicated across `copies` leading blocks.
  static Buffer<Scalar> replicated_init(Index copies, Index n, Index fan_in,
                                        Rng& rng) {
    Buffer<Scalar> one = uniform_init(n, fan_in, rng);
    Buffer<Scalar> b(copies * n);
    for (Index c = 0; c < copies; ++c) b.segment(c * n, n) = one;
    return b;
  }

  void init_parameters(Rng& rng) {
    const Index F = config_.features, fe = config_.f_embed;
    const Index d = config_.d_embed(), N = config_.layers;
    const Index M = Index(branches_.size());
    auto zeros = [](Index n) { return Buffer<Scalar>::Zero(n); };
    auto ones = [](Index n) { return Buffer<Scalar>::Ones(n); };

    params_.add("embed.weight", {F, 1, fe}, uniform_init(F * fe, 1, rng));
    params_.add("embed.bias", {d}, zeros(d));
    for (Index n = 0; n < N; ++n) {
      const auto base = names::layer(n);
      for (Index m = 0; m < M; ++m) {
        const Index k = branches_[m].kernel;
        params_.add(names::branch(n, m) + ".conv.weight", {d, k},
                    uniform_init(d * k, k, rng));
        params_.add(names::branch(n, m) + ".conv.bias", {d}, zeros(d));
      }
      params_.add(base + ".block1.norm.gamma", {d}, ones(d));
      params_.add(base + ".block1.norm.beta", {d}, zeros(d));
      for (const char* proj : {"q", "k", "v", "o"}) {
        const auto p = base + ".block1.attn." + proj;
        params_.add(p + ".weight", {F, fe, fe}, uniform_init(F * fe * fe, fe, rng));
        params_.add(p + ".bias", {d}, zeros(d));
      }
      params_.add(base + ".block2.norm.gamma", {d}, ones(d));
      params_.add(base + ".block2.norm.beta", {d}, zeros(d));
      params_.add(base + ".block2.linear.weight", {1, d, d},
                  uniform_init(d * d, d, rng));
      params_.add(base + ".block2.linear.bias", {d}, zeros(d));
      for (Index m = 0; m < M; ++m) {
        const Index k = branches_[m].kernel;
        params_.add(names::merge(n, m) + ".tconv.weight", {d, k},
                    uniform_init(d * k, k, rng));
        params_.add(names::merge(n, m) + ".weight", {F, fe, fe},
                    uniform_init(F * fe * fe, M * fe, rng));
      }
      params_.add(base + ".merge.bias", {d}, zeros(d));
    }
    params_.add("deembed.weight", {F, fe, 1}, uniform_init(F * fe, fe, rng));
    params_.add("deembed.bias", {F}, zeros(F));

    // Classifier trunks start identical across features.
    const auto& ac = config_.classifier;
    const Index c1 = ac.conv1_channels, c2 = ac.conv2_channels;
    const Index flat = c2 * ac.pool_length;
    params_.add("classifier.conv1.weight", {F, c1, N, ac.conv1_kernel},
                replicated_init(F, c1 * N * ac.conv1_kernel,
                                N * ac.conv1_kernel, rng));
    params_.add("classifier.conv1.bias", {F * c1}, zeros(F * c1));
    params_.add("classifier.conv2.weight", {F, c2, c1, ac.conv2_kernel},
                replicated_init(F, c2 * c1 * ac.conv2_kernel,
                                c1 * ac.conv2_kernel, rng));
    params_.add("classifier.conv2.bias", {F * c2}, zeros(F * c2));
    params_.add("classifier.fc1.weight", {F, flat, ac.hidden},
                replicated_init(F, flat * ac.hidden, flat, rng));
    params_.add("classifier.fc1.bias", {F * ac.hidden}, zeros(F * ac.hidden));
    params_.add("classifier.fc2.weight", {F, ac.hidden, 1},
                replicated_init(F, ac.hidden, ac.hidden, rng));
    params_.add("classifier.fc2.bias", {F}, zeros(F));
    const Index eh = ac.ensemble_hidden, C = config_.num_classes;
    const Index dims[4] = {F, eh, eh, C};
    for (Index i = 0; i < 3; ++i) {
      params_.add(names::head(i) + ".weight", {1, dims[i], dims[i + 1]},
                  uniform_init(dims[i] * dims[i + 1], dims[i], rng));
      params_.add(names::head(i) + ".bias", {dims[i + 1]}, zeros(dims[i + 1]));
    }
  }

  ModelConfig config_;
  std::vector<ResolvedBranch> branches_;
  ParameterStore<Scalar> params_;
};

/// Copy every parameter value of `src` into a model of another scalar type
/// with the same configuration.
template <typename To, typename From>
TsrmModel<To> convert_model(const TsrmModel<From>& src) {
  TsrmModel<To> dst(src.config());
  for (const auto& p : src.params().all()) {
    auto& q = dst.params().at(p.name);
    q.tensor.value() = p.tensor.value().template cast<To>();
    dst.params().set_frozen(p.name, p.frozen);
  }
  return dst;
}

}  // namespace tsrm
