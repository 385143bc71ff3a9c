#pragma once

// Task adapters for forecasting, imputation and classification.

#include <cmath>
#include <vector>

#include "tsrm/pretraining.hpp"

namespace tsrm {

/// One fine-tuning sample. `scored` marks the positions the loss and the
/// metrics read: the horizon (forecast) or the eval mask (impute).
struct TaskSample {
  Grid values;       // ground truth, [T, F]
  MaskGrid observed;
  MaskGrid scored;
  Grid input;        // model input with kMissingToken
  int label = -1;
};

/// Names of parameters a task keeps frozen.
bool frozen_for_task(const std::string& param_name, TaskKind kind);

/// Freezes per task. Classify replaces the three ensemble linears with fresh
/// ones of width `classes`; Forecast rebuilds the model at
/// input_length + horizon sharing every parameter tensor.
TsrmModel<float> prepare_finetune(const TsrmModel<float>& pretrained,
                                  const TaskSpec& task, std::uint64_t seed);

/// history [T_in, F] (missing already kMissingToken) followed by H rows of
/// kMissingToken.
Grid build_forecast_input(const Grid& history, Index horizon);

/// Split a window of input_length + H rows into history and horizon.
TaskSample make_forecast_sample(const WindowSample& window, Index input_length);
TaskSample make_impute_sample(const WindowSample& window, Rng& rng,
                              bool per_feature = false);
TaskSample make_classify_sample(const WindowSample& window);
TaskSample make_task_sample(const WindowSample& window, const TaskSpec& task,
                            Rng& rng, bool per_feature = false);

template <typename Scalar>
Tensor<Scalar> task_batch_input(const std::vector<TaskSample>& samples) {
  const Index B = Index(samples.size());
  const Index T = samples.front().input.rows(), F = samples.front().input.cols();
  Buffer<Scalar> x(B * T * F);
  for (Index b = 0; b < B; ++b)
    x.segment(b * T * F, T * F) =
        Eigen::Map<const Buffer<float>>(samples[b].input.data(), T * F)
            .template cast<Scalar>();
  return Tensor<Scalar>::from({B, T, F}, std::move(x));
}

template <typename Scalar>
struct TaskLoss {
  Tensor<Scalar> objective;
  double value = 0;
};

/// Forecast / Impute: mean over samples of the MSE over scored, observed
/// positions. Classify: BCE (C = 1) or cross-entropy (C > 1) on the logits.
template <typename Scalar>
TaskLoss<Scalar> finetune_loss(const ForwardTrace<Scalar>& trace,
                               const std::vector<TaskSample>& samples,
                               const TaskSpec& task) {
  const Index B = Index(samples.size());
  if (task.kind == TaskKind::Classify) {
    const Buffer<Scalar> w = Buffer<Scalar>::Constant(B, Scalar(1.0 / double(B)));
    Tensor<Scalar> loss;
    if (trace.logits.dim(-1) == 1) {
      Buffer<Scalar> y(B);
      for (Index b = 0; b < B; ++b) {
        require(samples[b].label == 0 || samples[b].label == 1, ErrorKind::Data,
                "binary classification needs labels 0/1, got " +
                    std::to_string(samples[b].label));
        y(b) = Scalar(samples[b].label);
      }
      loss = bce_with_logits(trace.logits, y, w);
    } else {
      std::vector<int> y;
      for (const auto& s : samples) y.push_back(s.label);
      loss = cross_entropy(trace.logits, y, w);
    }
    return {loss, double(loss.item())};
  }
  const Index T = samples.front().values.rows(), F = samples.front().values.cols();
  const Index TF = T * F;
  Buffer<Scalar> target = Buffer<Scalar>::Zero(B * TF);
  Buffer<Scalar> weight = Buffer<Scalar>::Zero(B * TF);
  const auto& out = trace.output.value();
  double value = 0;
  for (Index b = 0; b < B; ++b) {
    const auto& s = samples[b];
    const auto sel = (s.scored && s.observed).eval();
    const Index n = sel.count();
    require(n > 0, ErrorKind::Data,
            std::string(task.kind == TaskKind::Forecast ? "forecast" : "imputation") +
                " sample without scored positions");
    double se = 0;
    for (Index t = 0; t < T; ++t)
      for (Index f = 0; f < F; ++f) {
        const Index i = b * TF + t * F + f;
        target(i) = Scalar(s.values(t, f));
        if (!sel(t, f)) continue;
        weight(i) = Scalar(1.0 / (double(B) * double(n)));
        const double d = double(out(i)) - double(s.values(t, f));
        se += d * d;
      }
    value += se / double(n) / double(B);
  }
  return {weighted_sq_error(trace.output, target, weight), value};
}

struct TaskMetrics {
  TaskKind kind = TaskKind::Impute;
  std::size_t samples = 0;
  std::size_t positions = 0;
  double mae = 0, rmse = 0, mse = 0;
  double macro_f1 = 0, accuracy = 0;
  double trainable_params_millions = 0;
  Index horizon = 0;  // horizon the forecast metrics cover
};

Json to_json(const TaskMetrics& m);

/// Macro-averaged F1 over the classes present in `truth` or `pred`.
double macro_f1(const std::vector<int>& truth, const std::vector<int>& pred);
double accuracy(const std::vector<int>& truth, const std::vector<int>& pred);

/// Predicted class per row of logits[B, C] (C = 1: logit > 0).
std::vector<int> predicted_classes(const Tensor<float>& logits);

/// Evaluate in eval mode. For forecasts, `horizon_eval` > 0 scores only the
/// first horizon_eval horizon steps.
TaskMetrics evaluate_task(const TsrmModel<float>& model,
                          const std::vector<TaskSample>& samples,
                          const TaskSpec& task, Index horizon_eval = 0,
                          std::size_t batch_size = 64);

/// Validation quality of a pretrained model on prepared samples.
PretrainMetrics evaluate_pretraining(const TsrmModel<float>& model,
                                     const std::vector<PretrainSample>& samples,
                                     std::size_t batch_size = 64);

}  // namespace tsrm
