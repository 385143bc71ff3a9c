#pragma once

// Seeded minibatch training with early stopping, plateau LR scheduling,
// gradient clipping and JSON-lines run logging.

#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "tsrm/finetune.hpp"
#include "tsrm/pretraining.hpp"

namespace tsrm {

struct BatchResult {
  Tensor<float> objective;  // scalar
  LossBreakdown breakdown;
};

/// A training problem: dataset sizes plus a function building and scoring
/// one batch. `seed` fixes every random draw of the batch (masks, invalid
/// candidates, dropout).
struct Objective {
  std::size_t train_size = 0;
  std::size_t val_size = 0;
  std::function<BatchResult(const TsrmModel<float>&,
                            const std::vector<std::size_t>& indices,
                            bool validation, Mode mode, std::uint64_t seed)>
      batch;
};

Objective pretraining_objective(const WindowedDataset& train,
                                const WindowedDataset& val,
                                const TrainConfig& cfg);
Objective finetune_objective(const WindowedDataset& train,
                             const WindowedDataset& val, const TaskSpec& task,
                             const TrainConfig& cfg);

/// Pretraining samples drawn exactly as the validation pass draws them.
std::vector<PretrainSample> pretraining_validation_samples(
    const WindowedDataset& val, const TrainConfig& cfg);
std::vector<TaskSample> task_validation_samples(const WindowedDataset& val,
                                                const TaskSpec& task,
                                                const TrainConfig& cfg);

struct EpochRecord {
  int epoch = 0;  // 1-based
  LossBreakdown train, val;
  double metric = 0;    // value compared for early stopping
  double best = 0;      // best metric so far
  double lr = 0;        // learning rate used in this epoch
  double seconds = 0;
  std::size_t steps = 0;
  std::size_t clipped = 0;
  bool improved = false;
};

struct RunLog {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  double best_metric = std::numeric_limits<double>::infinity();
  std::size_t parameters = 0;
  std::size_t trainable = 0;
  std::size_t total_steps = 0;
  std::string stop_reason;

  /// One JSON object per epoch; timing fields optional so logs of
  /// identical runs can be compared.
  std::string to_jsonl(bool with_timing = true) const;
};

/// True once `patience` consecutive epochs failed to improve on the best
/// value so far by at least `rel` (relative).
bool early_stop_check(const std::vector<double>& history, double rel,
                      int patience);

struct SchedulerState {
  double lr = 1e-3;
  double best = std::numeric_limits<double>::infinity();
  int stale = 0;
};

/// Plateau scheduling: after `patience` consecutive epochs without any
/// improvement, lr <- max(lr * factor, min_lr) and the counter restarts.
double scheduler_step(double val_loss, SchedulerState& state,
                      const TrainConfig& cfg);

struct TrainOptions {
  std::string out_dir;                // empty: nothing written
  Json checkpoint_extras = Json::object();
  /// Called after every epoch; returning true stops training.
  std::function<bool(const EpochRecord&, const TsrmModel<float>&)> on_epoch;
};

/// Trains in place and leaves the best-validation parameters in `model`.
/// A non-finite loss aborts with ErrorKind::Numerical.
RunLog train(TsrmModel<float>& model, const Objective& objective,
             const TrainConfig& cfg, const TrainOptions& options = {});

/// FNV-1a over the little-endian bytes of every parameter value.
std::uint64_t parameter_hash(const TsrmModel<float>& model);

}  // namespace tsrm
