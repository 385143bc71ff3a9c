#include "tsrm/finetune.hpp"

#include <algorithm>
#include <map>
#include <set>

#include "tsrm/log.hpp"

namespace tsrm {

bool frozen_for_task(const std::string& name, TaskKind kind) {
  const bool classifier = name.rfind("classifier.", 0) == 0;
  return kind == TaskKind::Classify ? !classifier : classifier;
}

TsrmModel<float> prepare_finetune(const TsrmModel<float>& pretrained,
                                  const TaskSpec& task, std::uint64_t seed) {
  task.validate();
  TsrmModel<float> model = pretrained;
  if (task.kind == TaskKind::Forecast) {
    const auto& branches = pretrained.config().branches;
    if (std::any_of(branches.begin(), branches.end(),
                    [](const BranchSpec& b) { return b.is_percent(); }))
      log::warn("forecast rebuild: percent kernels keep their pretraining "
                "sizes so parameter shapes stay unchanged");
    model = pretrained.with_window(task.input_length + task.horizon);
  }
  if (task.kind == TaskKind::Classify)
    model.reset_classifier_head(task.classes, seed);
  for (const auto& p : model.params().all())
    model.params().set_frozen(p.name, frozen_for_task(p.name, task.kind));
  return model;
}

Grid build_forecast_input(const Grid& history, Index horizon) {
  Grid input(history.rows() + horizon, history.cols());
  input.topRows(history.rows()) = history;
  input.bottomRows(horizon).setConstant(kMissingToken);
  return input;
}

namespace {

Grid masked_values(const WindowSample& w) {
  return w.observed.select(w.values,
                           Grid::Constant(w.values.rows(), w.values.cols(),
                                          kMissingToken));
}

}  // namespace

TaskSample make_forecast_sample(const WindowSample& window,
                                Index input_length) {
  const Index T = window.values.rows(), F = window.values.cols();
  require(input_length >= 1 && input_length < T, ErrorKind::Config,
          "forecast window of " + std::to_string(T) +
              " rows leaves no horizon after input length " +
              std::to_string(input_length));
  TaskSample s;
  s.values = window.values;
  s.observed = window.observed;
  s.scored = MaskGrid::Constant(T, F, false);
  s.scored.bottomRows(T - input_length).setConstant(true);
  s.input = build_forecast_input(masked_values(window).topRows(input_length),
                                 T - input_length);
  s.label = window.label;
  return s;
}

TaskSample make_impute_sample(const WindowSample& window, Rng& rng,
                              bool per_feature) {
  TaskSample s;
  s.values = window.values;
  s.observed = window.observed;
  s.scored = generate_mask(window.observed, rng, per_feature);
  s.input = make_model_input(s.values, s.observed, s.scored);
  s.label = window.label;
  return s;
}

TaskSample make_classify_sample(const WindowSample& window) {
  TaskSample s;
  s.values = window.values;
  s.observed = window.observed;
  s.scored = MaskGrid::Constant(window.values.rows(), window.values.cols(), false);
  s.input = masked_values(window);
  s.label = window.label;
  return s;
}

TaskSample make_task_sample(const WindowSample& window, const TaskSpec& task,
                            Rng& rng, bool per_feature) {
  switch (task.kind) {
    case TaskKind::Forecast: return make_forecast_sample(window, task.input_length);
    case TaskKind::Impute: return make_impute_sample(window, rng, per_feature);
    case TaskKind::Classify: return make_classify_sample(window);
  }
  fail(ErrorKind::Internal, "unknown task kind");
}

Json to_json(const TaskMetrics& m) {
  Json j{{"task", to_string(m.kind)}, {"samples", m.samples}};
  if (m.kind == TaskKind::Classify) {
    j["macro_f1"] = m.macro_f1;
    j["accuracy"] = m.accuracy;
  } else {
    j["positions"] = m.positions;
    if (m.kind == TaskKind::Forecast) {
      j["horizon"] = m.horizon;
      j["mse"] = m.mse;
      j["mae"] = m.mae;
    } else {
      j["mae"] = m.mae;
      j["rmse"] = m.rmse;
    }
  }
  j["trainable_params_millions"] = m.trainable_params_millions;
  return j;
}

double macro_f1(const std::vector<int>& truth, const std::vector<int>& pred) {
  require(truth.size() == pred.size(), ErrorKind::Internal,
          "macro_f1: size mismatch");
  std::set<int> classes(truth.begin(), truth.end());
  classes.insert(pred.begin(), pred.end());
  if (classes.empty()) return 0.0;
  double total = 0;
  for (int c : classes) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
      if (pred[i] == c && truth[i] == c) ++tp;
      else if (pred[i] == c) ++fp;
      else if (truth[i] == c) ++fn;
    }
    total += tp > 0 ? 2 * tp / (2 * tp + fp + fn) : 0.0;
  }
  return total / double(classes.size());
}

double accuracy(const std::vector<int>& truth, const std::vector<int>& pred) {
  if (truth.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hit += truth[i] == pred[i];
  return double(hit) / double(truth.size());
}

std::vector<int> predicted_classes(const Tensor<float>& logits) {
  const Index C = logits.dim(-1), B = logits.size() / C;
  std::vector<int> out(B);
  for (Index b = 0; b < B; ++b) {
    const float* z = logits.data() + b * C;
    out[b] = C == 1 ? int(z[0] > 0) : int(std::max_element(z, z + C) - z);
  }
  return out;
}

TaskMetrics evaluate_task(const TsrmModel<float>& model,
                          const std::vector<TaskSample>& samples,
                          const TaskSpec& task, Index horizon_eval,
                          std::size_t batch_size) {
  TaskMetrics m;
  m.kind = task.kind;
  m.samples = samples.size();
  m.trainable_params_millions = double(model.params().count_values(true)) / 1e6;
  if (samples.empty()) return m;
  const Index T = samples.front().values.rows();
  Index last = T;
  if (task.kind == TaskKind::Forecast) {
    require(horizon_eval >= 0 && horizon_eval <= task.horizon, ErrorKind::Config,
            "evaluation horizon " + std::to_string(horizon_eval) +
                " exceeds the trained horizon " + std::to_string(task.horizon));
    m.horizon = horizon_eval > 0 ? horizon_eval : task.horizon;
    last = T - task.horizon + m.horizon;
  }
  std::vector<int> truth, pred;
  double abs_sum = 0, sq_sum = 0;
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    const std::size_t end = std::min(samples.size(), start + batch_size);
    std::vector<TaskSample> batch(samples.begin() + start, samples.begin() + end);
    const auto trace = model.forward(task_batch_input<float>(batch), Mode::Eval);
    if (task.kind == TaskKind::Classify) {
      const auto p = predicted_classes(trace.logits);
      pred.insert(pred.end(), p.begin(), p.end());
      for (const auto& s : batch) truth.push_back(s.label);
      continue;
    }
    const Index F = batch.front().values.cols();
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto& s = batch[b];
      for (Index t = 0; t < last; ++t)
        for (Index f = 0; f < F; ++f) {
          if (!s.scored(t, f) || !s.observed(t, f)) continue;
          const double d = double(trace.output.value()(Index(b) * T * F + t * F + f)) -
                           double(s.values(t, f));
          abs_sum += std::abs(d);
          sq_sum += d * d;
          ++m.positions;
        }
    }
  }
  if (task.kind == TaskKind::Classify) {
    m.macro_f1 = macro_f1(truth, pred);
    m.accuracy = accuracy(truth, pred);
  } else if (m.positions) {
    m.mae = abs_sum / double(m.positions);
    m.mse = sq_sum / double(m.positions);
    m.rmse = std::sqrt(m.mse);
  }
  return m;
}

PretrainMetrics evaluate_pretraining(const TsrmModel<float>& model,
                                     const std::vector<PretrainSample>& samples,
                                     std::size_t batch_size) {
  PretrainMetrics m;
  if (samples.empty()) return m;
  const auto w = loss_weights(model.config());
  std::vector<int> truth, pred;
  double imp_sq = 0, rec_sq = 0;
  std::size_t imp_n = 0, rec_n = 0;
  const Index T = samples.front().values.rows(), F = samples.front().values.cols();
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    const std::size_t end = std::min(samples.size(), start + batch_size);
    std::vector<PretrainSample> batch(samples.begin() + start, samples.begin() + end);
    const auto trace = model.forward(batch_input<float>(batch), Mode::Eval);
    const auto loss = pretrain_loss(trace, batch, w);
    const double share = double(batch.size()) / double(samples.size());
    m.loss.l_class += loss.breakdown.l_class * share;
    m.loss.total += loss.breakdown.total * share;
    const auto p = predicted_classes(trace.logits);
    pred.insert(pred.end(), p.begin(), p.end());
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto& s = batch[b];
      truth.push_back(s.validity);
      if (s.validity != 1) continue;
      for (Index t = 0; t < T; ++t)
        for (Index f = 0; f < F; ++f) {
          if (!s.observed(t, f)) continue;
          const double d = double(trace.output.value()(Index(b) * T * F + t * F + f)) -
                           double(s.values(t, f));
          if (s.eval(t, f)) {
            imp_sq += d * d;
            ++imp_n;
          } else {
            rec_sq += d * d;
            ++rec_n;
          }
        }
    }
  }
  m.imputation_mse = imp_n ? imp_sq / double(imp_n) : 0.0;
  m.reconstruction_mse = rec_n ? rec_sq / double(rec_n) : 0.0;
  m.loss.l_imp = m.imputation_mse;
  m.loss.l_repr = m.reconstruction_mse;
  m.class_f1 = macro_f1(truth, pred);
  m.class_accuracy = accuracy(truth, pred);
  return m;
}

}  // namespace tsrm
