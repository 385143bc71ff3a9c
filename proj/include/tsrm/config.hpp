#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "tsrm/attention.hpp"

namespace tsrm {

using Json = nlohmann::ordered_json;

/// One representation-layer branch: a depth-wise convolution followed by
/// max pooling. The kernel is either absolute or a percentage of T.
struct BranchSpec {
  Index kernel = 0;          // absolute size; 0 when kernel_pct is used
  double kernel_pct = 0.0;   // percent of T; 0 when kernel is used
  Index dilation = 1;
  Index stride = 0;          // 0 derives max(1, floor(k / 2))

  bool is_percent() const { return kernel == 0; }
};

/// A branch with every length resolved for a concrete window length.
struct ResolvedBranch {
  Index kernel = 1;
  Index dilation = 1;
  Index stride = 1;
  Index conv_len = 0;
  Index pool_kernel = 1;
  Index pool_stride = 1;
  Index pool_len = 0;

  Index effective_kernel() const { return (kernel - 1) * dilation + 1; }
};

/// Layer sizes of the attention-map classifier.
struct ClassifierDims {
  Index conv1_channels = 16;
  Index conv1_kernel = 7;
  Index conv1_stride = 2;
  Index conv2_channels = 4;
  Index conv2_kernel = 3;
  Index conv2_stride = 2;
  Index pool_length = 8;
  Index hidden = 16;
  Index ensemble_hidden = 32;

  /// Smallest representation length D the conv stack accepts:
  /// conv1_kernel + (conv2_kernel - 1) * conv1_stride.
  Index min_length() const {
    return conv1_kernel + (conv2_kernel - 1) * conv1_stride;
  }
};

struct ModelConfig {
  Index window = 96;  // T
  Index features = 1; // F
  Index f_embed = 32;
  Index layers = 2;   // N
  Index heads = 2;    // h
  AttentionSettings attention;
  std::vector<BranchSpec> branches{{5, 0.0, 1, 0}};
  double dropout = 0.1;
  double alpha = 3.5;
  double beta = 1.2;
  double gamma = 5.0;
  ReduceAxis reduce_axis = ReduceAxis::Queries;
  bool carry_residual = true;
  double norm_eps = 1e-5;
  Index num_classes = 1;
  ClassifierDims classifier;

  Index d_embed() const { return features * f_embed; }

  /// Throws ErrorKind::Config naming the first violated constraint.
  void validate() const;

  std::vector<ResolvedBranch> resolve_branches() const;

  /// Representation length D = sum over branches of (conv_len + pool_len).
  Index representation_length() const;
};

ResolvedBranch resolve_branch(const BranchSpec& spec, Index window,
                              std::size_t index = 0);

enum class EarlyStopMetric { Total, Imputation };

struct TrainConfig {
  int max_epochs = 100;
  int batch_size = 32;
  double initial_lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double early_stop_rel = 0.01;
  int early_stop_patience = 5;
  EarlyStopMetric early_stop_metric = EarlyStopMetric::Total;  // also drives the scheduler
  double scheduler_factor = 0.5;
  int scheduler_patience = 2;
  double min_lr = 1e-6;
  double grad_clip = 5.0;  // global norm; 0 disables
  std::uint64_t seed = 0;
  double invalid_rate = 0.2;
  bool per_feature_mask = false;

  void validate() const;
};

struct DataConfig {
  std::vector<std::string> columns;  // empty: every non-timestamp column
  std::string timestamp_column = "auto";
  std::string label_column;          // classification only
  Index window = 96;
  Index stride = 1;
  double train_fraction = 0.6;
  double val_fraction = 0.2;
  double max_missing = 0.8;

  void validate() const;
};

enum class TaskKind { Forecast, Impute, Classify };

struct TaskSpec {
  TaskKind kind = TaskKind::Impute;
  Index horizon = 0;      // forecast only
  Index classes = 1;      // classify only
  Index input_length = 96;

  void validate() const;
};

const char* to_string(TaskKind kind);
TaskKind parse_task_kind(const std::string& s);
const char* to_string(AttentionKind kind);
AttentionKind parse_attention_kind(const std::string& s);

Json to_json(const BranchSpec& b);
Json to_json(const ModelConfig& c);
Json to_json(const TrainConfig& c);
Json to_json(const DataConfig& c);
Json to_json(const TaskSpec& t);

/// Parsers reject unknown keys and fill defaults for absent ones.
ModelConfig model_config_from_json(const Json& j);
TrainConfig train_config_from_json(const Json& j);
DataConfig data_config_from_json(const Json& j);
TaskSpec task_spec_from_json(const Json& j);

/// The full run configuration file: {model, train, data, task}.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  std::optional<TaskSpec> task;
};

RunConfig run_config_from_json(const Json& j);
RunConfig load_run_config(const std::string& path);
Json to_json(const RunConfig& c);

}  // namespace tsrm
