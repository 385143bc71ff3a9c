#pragma once

// Self-supervised pretraining tasks: reconstruction, artificial imputation
// and validity classification, combined into one weighted loss.

#include <cmath>
#include <utility>
#include <vector>

#include "tsrm/data_io.hpp"
#include "tsrm/model.hpp"
#include "tsrm/rng.hpp"

namespace tsrm {

struct PretrainSample {
  Grid values;        // [T, F] in [0, 1]
  MaskGrid observed;  // false = originally missing
  MaskGrid eval;      // true = artificially removed, ground truth known
  Grid input;         // values at observed & !eval, kMissingToken elsewhere
  int validity = 1;   // 0 for invalid candidates
};

/// Inclusive bounds on one masked run: [ceil(0.05 T), floor(0.10 T)].
std::pair<Index, Index> mask_run_bounds(Index T);

/// Time-step mask of contiguous runs. `weight[t]` is the number of observed
/// values at step t; runs are added until the weighted masked share first
/// reaches a target drawn from [0.30, 0.50].
std::vector<unsigned char> generate_time_mask(const std::vector<double>& weight,
                                              Rng& rng);

/// Eval mask for one window. Time-step-wise masks every feature at the chosen
/// steps; per-feature draws one mask per column. The result is a subset of
/// `observed`.
MaskGrid generate_mask(const MaskGrid& observed, Rng& rng,
                       bool per_feature = false);

Grid make_model_input(const Grid& values, const MaskGrid& observed,
                      const MaskGrid& eval);

PretrainSample make_pretrain_sample(const WindowSample& window, Rng& rng,
                                    bool per_feature = false);

/// Label-0 copy of `sample`: uniform noise for F = 1, otherwise feature
/// columns rotated by an offset in [1, F-1] (column j moves to j+off mod F).
PretrainSample make_invalid_candidate(const PretrainSample& sample, Rng& rng);

/// Full per-sample draw: mask, then an i.i.d. Bernoulli(invalid_rate)
/// decision to replace the sample by an invalid candidate.
PretrainSample draw_pretrain_sample(const WindowSample& window, Rng& rng,
                                    double invalid_rate, bool per_feature);

struct LossWeights {
  double alpha = 3.5;
  double beta = 1.2;
  double gamma = 5.0;
};

inline LossWeights loss_weights(const ModelConfig& c) {
  return {c.alpha, c.beta, c.gamma};
}

struct LossBreakdown {
  double l_repr = 0;
  double l_imp = 0;
  double l_class = 0;
  double total = 0;
};

/// (l_repr + l_imp * alpha) * beta + l_class * gamma, with alpha = beta = 0
/// for invalid samples.
inline double combine_losses(double l_repr, double l_imp, double l_class,
                             bool valid, const LossWeights& w) {
  const double a = valid ? w.alpha : 0.0, b = valid ? w.beta : 0.0;
  return (l_repr + l_imp * a) * b + l_class * w.gamma;
}

template <typename Scalar>
struct PretrainLoss {
  Tensor<Scalar> objective;  // scalar; mean of per-sample totals
  LossBreakdown breakdown;   // per-sample means; reconstruction terms over
                             // valid samples only
};

template <typename Scalar>
Tensor<Scalar> batch_input(const std::vector<PretrainSample>& samples) {
  const Index B = Index(samples.size());
  const Index T = samples.front().input.rows(), F = samples.front().input.cols();
  Buffer<Scalar> x(B * T * F);
  for (Index b = 0; b < B; ++b)
    x.segment(b * T * F, T * F) =
        Eigen::Map<const Buffer<float>>(samples[b].input.data(), T * F)
            .template cast<Scalar>();
  return Tensor<Scalar>::from({B, T, F}, std::move(x));
}

/// Batch loss; each sample contributes its own weighted total / B.
template <typename Scalar>
PretrainLoss<Scalar> pretrain_loss(const ForwardTrace<Scalar>& trace,
                                   const std::vector<PretrainSample>& samples,
                                   const LossWeights& w) {
  const Index B = Index(samples.size());
  const Index T = samples.front().values.rows(), F = samples.front().values.cols();
  const Index TF = T * F;
  require(trace.output.size() == B * TF && trace.logits.size() == B,
          ErrorKind::Internal, "pretrain_loss: trace and batch disagree");
  Buffer<Scalar> target(B * TF), weight = Buffer<Scalar>::Zero(B * TF);
  Buffer<Scalar> labels(B), cls_w = Buffer<Scalar>::Constant(B, Scalar(w.gamma / double(B)));
  const auto& out = trace.output.value();
  LossBreakdown bd;
  Index valid_count = 0;
  for (Index b = 0; b < B; ++b) {
    const auto& s = samples[b];
    const bool valid = s.validity == 1;
    double se_repr = 0, se_imp = 0;
    Index n_repr = 0, n_imp = 0;
    for (Index t = 0; t < T; ++t)
      for (Index f = 0; f < F; ++f) {
        const Index i = b * TF + t * F + f;
        target(i) = Scalar(s.values(t, f));
        if (!s.observed(t, f)) continue;
        const double d = double(out(i)) - double(s.values(t, f));
        if (s.eval(t, f)) {
          se_imp += d * d;
          ++n_imp;
        } else {
          se_repr += d * d;
          ++n_repr;
        }
      }
    const double a = valid ? w.alpha : 0.0, bt = valid ? w.beta : 0.0;
    const double wr = n_repr ? bt / (double(B) * double(n_repr)) : 0.0;
    const double wi = n_imp ? bt * a / (double(B) * double(n_imp)) : 0.0;
    for (Index t = 0; t < T; ++t)
      for (Index f = 0; f < F; ++f) {
        if (!s.observed(t, f)) continue;
        weight(b * TF + t * F + f) = Scalar(s.eval(t, f) ? wi : wr);
      }
    labels(b) = Scalar(s.validity);

    const double l_repr = n_repr ? se_repr / double(n_repr) : 0.0;
    const double l_imp = n_imp ? se_imp / double(n_imp) : 0.0;
    const double z = double(trace.logits.value()(b)), y = double(s.validity);
    const double l_class =
        std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    if (valid) {
      bd.l_repr += l_repr;
      bd.l_imp += l_imp;
      ++valid_count;
    }
    bd.l_class += l_class;
    bd.total += combine_losses(l_repr, l_imp, l_class, valid, w);
  }
  if (valid_count) {
    bd.l_repr /= double(valid_count);
    bd.l_imp /= double(valid_count);
  }
  bd.l_class /= double(B);
  bd.total /= double(B);

  auto recon = weighted_sq_error(trace.output, target, weight);
  auto cls = bce_with_logits(trace.logits, labels, cls_w);
  return {add(recon, cls), bd};
}

/// Aggregate validation quality of a pretraining run.
struct PretrainMetrics {
  double imputation_mse = 0;  // pooled over eval positions of valid samples
  double reconstruction_mse = 0;
  double class_f1 = 0;        // macro F1 of the validity classifier
  double class_accuracy = 0;
  LossBreakdown loss;
};

}  // namespace tsrm
