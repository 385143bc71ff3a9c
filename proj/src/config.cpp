#include "tsrm/config.hpp"

#include <cmath>
#include <fstream>
#include <set>

namespace tsrm {

const char* to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::Config: return "config";
    case ErrorKind::Data: return "data";
    case ErrorKind::Io: return "io";
    case ErrorKind::CorruptCheckpoint: return "corrupt-checkpoint";
    case ErrorKind::ShapeMismatch: return "shape-mismatch";
    case ErrorKind::UnsupportedVersion: return "unsupported-version";
    case ErrorKind::Numerical: return "numerical";
    case ErrorKind::Internal: return "internal";
  }
  return "unknown";
}

ResolvedBranch resolve_branch(const BranchSpec& spec, Index window,
                              std::size_t index) {
  const std::string name = "branch " + std::to_string(index);
  ResolvedBranch r;
  if (spec.is_percent()) {
    require(spec.kernel_pct > 0, ErrorKind::Config,
            name + ": kernel or kernel_pct must be positive");
    r.kernel = std::max<Index>(
        1, static_cast<Index>(std::lround(spec.kernel_pct / 100.0 * window)));
  } else {
    require(spec.kernel >= 1, ErrorKind::Config,
            name + ": kernel must be >= 1");
    r.kernel = spec.kernel;
  }
  require(spec.dilation >= 1, ErrorKind::Config,
          name + ": dilation must be >= 1");
  r.dilation = spec.dilation;
  r.stride = spec.stride > 0 ? spec.stride : std::max<Index>(1, r.kernel / 2);
  require(r.effective_kernel() <= window, ErrorKind::Config,
          name + ": effective kernel " + std::to_string(r.effective_kernel()) +
              " (k=" + std::to_string(r.kernel) + ", d=" +
              std::to_string(r.dilation) + ") exceeds window length " +
              std::to_string(window));
  r.conv_len = (window - r.effective_kernel()) / r.stride + 1;
  r.pool_kernel = std::min<Index>(2, r.conv_len);
  r.pool_stride = r.pool_kernel;
  r.pool_len = (r.conv_len - r.pool_kernel) / r.pool_stride + 1;
  return r;
}

std::vector<ResolvedBranch> ModelConfig::resolve_branches() const {
  std::vector<ResolvedBranch> out;
  for (std::size_t i = 0; i < branches.size(); ++i)
    out.push_back(resolve_branch(branches[i], window, i));
  return out;
}

Index ModelConfig::representation_length() const {
  Index d = 0;
  for (const auto& b : resolve_branches()) d += b.conv_len + b.pool_len;
  return d;
}

void ModelConfig::validate() const {
  require(window >= 1, ErrorKind::Config, "model.window must be >= 1");
  require(features >= 1, ErrorKind::Config, "model.features must be >= 1");
  require(f_embed >= 1, ErrorKind::Config, "model.f_embed must be >= 1");
  require(layers >= 1, ErrorKind::Config, "model.layers (N) must be >= 1");
  require(heads >= 1 && f_embed % heads == 0, ErrorKind::Config,
          "model.f_embed (" + std::to_string(f_embed) +
              ") must be divisible by model.heads (" + std::to_string(heads) +
              ")");
  require(!branches.empty(), ErrorKind::Config,
          "model.branches must contain at least one branch");
  require(dropout >= 0 && dropout < 1, ErrorKind::Config,
          "model.dropout must be in [0,1)");
  require(attention.probsparse_factor > 0, ErrorKind::Config,
          "model.probsparse_factor must be positive");
  require(num_classes >= 1, ErrorKind::Config,
          "model.num_classes must be >= 1");
  require(norm_eps > 0, ErrorKind::Config, "model.norm_eps must be positive");
  const auto& ac = classifier;
  require(ac.conv1_channels >= 1 && ac.conv1_kernel >= 1 &&
              ac.conv1_stride >= 1 && ac.conv2_channels >= 1 &&
              ac.conv2_kernel >= 1 && ac.conv2_stride >= 1 &&
              ac.pool_length >= 1 && ac.hidden >= 1 && ac.ensemble_hidden >= 1,
          ErrorKind::Config, "model.classifier dimensions must be >= 1");
  const Index D = representation_length();  // also validates branches
  require(D >= ac.min_length(), ErrorKind::Config,
          "representation length D=" + std::to_string(D) +
              " too short for the attention-map classifier; need D >= "
              "conv1_kernel + (conv2_kernel - 1) * conv1_stride = " +
              std::to_string(ac.min_length()));
}

void TrainConfig::validate() const {
  require(max_epochs >= 1, ErrorKind::Config, "train.max_epochs must be >= 1");
  require(batch_size >= 1, ErrorKind::Config, "train.batch_size must be >= 1");
  require(initial_lr > 0, ErrorKind::Config, "train.initial_lr must be > 0");
  require(early_stop_patience >= 1 && scheduler_patience >= 1,
          ErrorKind::Config, "patience values must be >= 1");
  require(scheduler_factor > 0 && scheduler_factor < 1, ErrorKind::Config,
          "train.scheduler_factor must be in (0,1)");
  require(early_stop_rel >= 0, ErrorKind::Config,
          "train.early_stop_rel must be >= 0");
  require(invalid_rate >= 0 && invalid_rate < 1, ErrorKind::Config,
          "train.invalid_rate must be in [0,1)");
  require(beta1 > 0 && beta1 < 1 && beta2 > 0 && beta2 < 1, ErrorKind::Config,
          "Adam betas must be in (0,1)");
}

void DataConfig::validate() const {
  require(window >= 1 && stride >= 1, ErrorKind::Config,
          "data.window and data.stride must be >= 1");
  require(train_fraction > 0 && val_fraction >= 0 &&
              train_fraction + val_fraction <= 1.0 + 1e-12,
          ErrorKind::Config, "data split fractions must be positive and sum <= 1");
  require(max_missing >= 0 && max_missing <= 1, ErrorKind::Config,
          "data.max_missing must be in [0,1]");
}

void TaskSpec::validate() const {
  switch (kind) {
    case TaskKind::Forecast:
      require(horizon >= 1, ErrorKind::Config,
              "forecast task requires horizon >= 1");
      require(input_length >= 1, ErrorKind::Config,
              "forecast task requires input_length >= 1");
      break;
    case TaskKind::Classify:
      require(classes >= 1, ErrorKind::Config,
              "classify task requires classes >= 1");
      break;
    case TaskKind::Impute:
      break;
  }
}

const char* to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::Forecast: return "forecast";
    case TaskKind::Impute: return "impute";
    case TaskKind::Classify: return "classify";
  }
  return "?";
}

TaskKind parse_task_kind(const std::string& s) {
  if (s == "forecast") return TaskKind::Forecast;
  if (s == "impute") return TaskKind::Impute;
  if (s == "classify") return TaskKind::Classify;
  fail(ErrorKind::Config, "unknown task '" + s +
                              "' (expected forecast|impute|classify)");
}

const char* to_string(AttentionKind kind) {
  switch (kind) {
    case AttentionKind::Vanilla: return "vanilla";
    case AttentionKind::Entmax15: return "entmax15";
    case AttentionKind::ProbSparse: return "probsparse";
  }
  return "?";
}

AttentionKind parse_attention_kind(const std::string& s) {
  if (s == "vanilla") return AttentionKind::Vanilla;
  if (s == "entmax15" || s == "sparse") return AttentionKind::Entmax15;
  if (s == "probsparse") return AttentionKind::ProbSparse;
  fail(ErrorKind::Config, "unknown attention kind '" + s +
                              "' (expected vanilla|entmax15|probsparse)");
}

namespace {

void reject_unknown(const Json& j, const std::set<std::string>& allowed,
                    const std::string& section) {
  require(j.is_object(), ErrorKind::Config,
          "config section '" + section + "' must be an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    require(allowed.count(it.key()) > 0, ErrorKind::Config,
            "unknown key '" + it.key() + "' in config section '" + section +
                "'");
}

template <typename T>
void read(const Json& j, const char* key, T& out, const std::string& section) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Config, section + "." + key + ": " + e.what());
  }
}

}  // namespace

Json to_json(const BranchSpec& b) {
  Json j;
  if (b.is_percent())
    j["kernel_pct"] = b.kernel_pct;
  else
    j["kernel"] = b.kernel;
  j["dilation"] = b.dilation;
  if (b.stride > 0) j["stride"] = b.stride;
  return j;
}

Json to_json(const ModelConfig& c) {
  Json branches = Json::array();
  for (const auto& b : c.branches) branches.push_back(to_json(b));
  const auto& ac = c.classifier;
  return Json{
      {"window", c.window},
      {"features", c.features},
      {"f_embed", c.f_embed},
      {"layers", c.layers},
      {"heads", c.heads},
      {"attention", to_string(c.attention.kind)},
      {"probsparse_factor", c.attention.probsparse_factor},
      {"branches", branches},
      {"dropout", c.dropout},
      {"alpha", c.alpha},
      {"beta", c.beta},
      {"gamma", c.gamma},
      {"attention_reduce_axis",
       c.reduce_axis == ReduceAxis::Queries ? "queries" : "keys"},
      {"carry_residual", c.carry_residual},
      {"norm_eps", c.norm_eps},
      {"num_classes", c.num_classes},
      {"classifier",
       {{"conv1_channels", ac.conv1_channels},
        {"conv1_kernel", ac.conv1_kernel},
        {"conv1_stride", ac.conv1_stride},
        {"conv2_channels", ac.conv2_channels},
        {"conv2_kernel", ac.conv2_kernel},
        {"conv2_stride", ac.conv2_stride},
        {"pool_length", ac.pool_length},
        {"hidden", ac.hidden},
        {"ensemble_hidden", ac.ensemble_hidden}}},
  };
}

ModelConfig model_config_from_json(const Json& j) {
  const std::string s = "model";
  reject_unknown(j,
                 {"window", "features", "f_embed", "layers", "heads",
                  "attention", "probsparse_factor", "branches", "dropout",
                  "alpha", "beta", "gamma", "attention_reduce_axis",
                  "carry_residual", "norm_eps", "num_classes", "classifier"},
                 s);
  ModelConfig c;
  read(j, "window", c.window, s);
  read(j, "features", c.features, s);
  read(j, "f_embed", c.f_embed, s);
  read(j, "layers", c.layers, s);
  read(j, "heads", c.heads, s);
  std::string kind = to_string(c.attention.kind);
  read(j, "attention", kind, s);
  c.attention.kind = parse_attention_kind(kind);
  read(j, "probsparse_factor", c.attention.probsparse_factor, s);
  if (j.contains("branches")) {
    require(j["branches"].is_array(), ErrorKind::Config,
            "model.branches must be an array");
    c.branches.clear();
    for (const auto& bj : j["branches"]) {
      reject_unknown(bj, {"kernel", "kernel_pct", "dilation", "stride"},
                     "model.branches[]");
      BranchSpec b;
      read(bj, "kernel", b.kernel, s);
      read(bj, "kernel_pct", b.kernel_pct, s);
      read(bj, "dilation", b.dilation, s);
      read(bj, "stride", b.stride, s);
      require((b.kernel > 0) != (b.kernel_pct > 0), ErrorKind::Config,
              "each branch needs exactly one of kernel / kernel_pct");
      c.branches.push_back(b);
    }
  }
  read(j, "dropout", c.dropout, s);
  read(j, "alpha", c.alpha, s);
  read(j, "beta", c.beta, s);
  read(j, "gamma", c.gamma, s);
  std::string axis = "queries";
  read(j, "attention_reduce_axis", axis, s);
  require(axis == "queries" || axis == "keys", ErrorKind::Config,
          "model.attention_reduce_axis must be queries|keys");
  c.reduce_axis = axis == "queries" ? ReduceAxis::Queries : ReduceAxis::Keys;
  read(j, "carry_residual", c.carry_residual, s);
  read(j, "norm_eps", c.norm_eps, s);
  read(j, "num_classes", c.num_classes, s);
  if (j.contains("classifier")) {
    const auto& aj = j["classifier"];
    const std::string as = "model.classifier";
    reject_unknown(aj,
                   {"conv1_channels", "conv1_kernel", "conv1_stride",
                    "conv2_channels", "conv2_kernel", "conv2_stride",
                    "pool_length", "hidden", "ensemble_hidden"},
                   as);
    auto& ac = c.classifier;
    read(aj, "conv1_channels", ac.conv1_channels, as);
    read(aj, "conv1_kernel", ac.conv1_kernel, as);
    read(aj, "conv1_stride", ac.conv1_stride, as);
    read(aj, "conv2_channels", ac.conv2_channels, as);
    read(aj, "conv2_kernel", ac.conv2_kernel, as);
    read(aj, "conv2_stride", ac.conv2_stride, as);
    read(aj, "pool_length", ac.pool_length, as);
    read(aj, "hidden", ac.hidden, as);
    read(aj, "ensemble_hidden", ac.ensemble_hidden, as);
  }
  return c;
}

Json to_json(const TrainConfig& c) {
  return Json{
      {"max_epochs", c.max_epochs},
      {"batch_size", c.batch_size},
      {"initial_lr", c.initial_lr},
      {"beta1", c.beta1},
      {"beta2", c.beta2},
      {"adam_eps", c.adam_eps},
      {"early_stop_rel", c.early_stop_rel},
      {"early_stop_patience", c.early_stop_patience},
      {"early_stop_metric",
       c.early_stop_metric == EarlyStopMetric::Total ? "total" : "imputation"},
      {"scheduler_factor", c.scheduler_factor},
      {"scheduler_patience", c.scheduler_patience},
      {"min_lr", c.min_lr},
      {"grad_clip", c.grad_clip},
      {"seed", c.seed},
      {"invalid_rate", c.invalid_rate},
      {"per_feature_mask", c.per_feature_mask},
  };
}

TrainConfig train_config_from_json(const Json& j) {
  const std::string s = "train";
  reject_unknown(j,
                 {"max_epochs", "batch_size", "initial_lr", "beta1", "beta2",
                  "adam_eps", "early_stop_rel", "early_stop_patience",
                  "early_stop_metric", "scheduler_factor",
                  "scheduler_patience", "min_lr", "grad_clip", "seed",
                  "invalid_rate", "per_feature_mask"},
                 s);
  TrainConfig c;
  read(j, "max_epochs", c.max_epochs, s);
  read(j, "batch_size", c.batch_size, s);
  read(j, "initial_lr", c.initial_lr, s);
  read(j, "beta1", c.beta1, s);
  read(j, "beta2", c.beta2, s);
  read(j, "adam_eps", c.adam_eps, s);
  read(j, "early_stop_rel", c.early_stop_rel, s);
  read(j, "early_stop_patience", c.early_stop_patience, s);
  std::string metric = "total";
  read(j, "early_stop_metric", metric, s);
  require(metric == "total" || metric == "imputation", ErrorKind::Config,
          "train.early_stop_metric must be total|imputation");
  c.early_stop_metric =
      metric == "total" ? EarlyStopMetric::Total : EarlyStopMetric::Imputation;
  read(j, "scheduler_factor", c.scheduler_factor, s);
  read(j, "scheduler_patience", c.scheduler_patience, s);
  read(j, "min_lr", c.min_lr, s);
  read(j, "grad_clip", c.grad_clip, s);
  read(j, "seed", c.seed, s);
  read(j, "invalid_rate", c.invalid_rate, s);
  read(j, "per_feature_mask", c.per_feature_mask, s);
  return c;
}

Json to_json(const DataConfig& c) {
  return Json{
      {"columns", c.columns},
      {"timestamp_column", c.timestamp_column},
      {"label_column", c.label_column},
      {"window", c.window},
      {"stride", c.stride},
      {"train_fraction", c.train_fraction},
      {"val_fraction", c.val_fraction},
      {"max_missing", c.max_missing},
  };
}

DataConfig data_config_from_json(const Json& j) {
  const std::string s = "data";
  reject_unknown(j,
                 {"columns", "timestamp_column", "label_column", "window",
                  "stride", "train_fraction", "val_fraction", "max_missing"},
                 s);
  DataConfig c;
  read(j, "columns", c.columns, s);
  read(j, "timestamp_column", c.timestamp_column, s);
  read(j, "label_column", c.label_column, s);
  read(j, "window", c.window, s);
  read(j, "stride", c.stride, s);
  read(j, "train_fraction", c.train_fraction, s);
  read(j, "val_fraction", c.val_fraction, s);
  read(j, "max_missing", c.max_missing, s);
  return c;
}

Json to_json(const TaskSpec& t) {
  Json j{{"kind", to_string(t.kind)}};
  if (t.kind == TaskKind::Forecast) {
    j["horizon"] = t.horizon;
    j["input_length"] = t.input_length;
  }
  if (t.kind == TaskKind::Classify) j["classes"] = t.classes;
  return j;
}

TaskSpec task_spec_from_json(const Json& j) {
  const std::string s = "task";
  reject_unknown(j, {"kind", "horizon", "classes", "input_length"}, s);
  TaskSpec t;
  std::string kind = "impute";
  read(j, "kind", kind, s);
  t.kind = parse_task_kind(kind);
  read(j, "horizon", t.horizon, s);
  read(j, "classes", t.classes, s);
  read(j, "input_length", t.input_length, s);
  return t;
}

RunConfig run_config_from_json(const Json& j) {
  reject_unknown(j, {"model", "train", "data", "task"}, "<root>");
  RunConfig c;
  if (j.contains("model")) c.model = model_config_from_json(j["model"]);
  if (j.contains("train")) c.train = train_config_from_json(j["train"]);
  if (j.contains("data")) c.data = data_config_from_json(j["data"]);
  if (j.contains("task")) c.task = task_spec_from_json(j["task"]);
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::Io, "cannot open config file '" + path + "'");
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Config, "config file '" + path + "': " + e.what());
  }
  return run_config_from_json(j);
}

Json to_json(const RunConfig& c) {
  Json j{{"model", to_json(c.model)},
         {"train", to_json(c.train)},
         {"data", to_json(c.data)}};
  if (c.task) j["task"] = to_json(*c.task);
  return j;
}

}  // namespace tsrm
