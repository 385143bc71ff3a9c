#include "tsrm/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>

#include "tsrm/checkpoint.hpp"
#include "tsrm/data_io.hpp"
#include "tsrm/explain.hpp"
#include "tsrm/finetune.hpp"
#include "tsrm/log.hpp"
#include "tsrm/pretraining.hpp"
#include "tsrm/trainer.hpp"

namespace tsrm {
namespace fs = std::filesystem;
namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct PretrainArgs {
  std::string config, train_csv, val_csv, out;
  std::optional<std::uint64_t> seed;
};

struct FinetuneArgs {
  std::string task, model, config, train_csv, val_csv, out;
  std::optional<Index> horizon, classes, eval_horizon;
  std::optional<std::uint64_t> seed;
};

struct EvalArgs {
  std::string model, test_csv, task;
  std::optional<Index> horizon, eval_horizon;
  std::uint64_t seed = 0;
};

struct ExplainArgs {
  std::string model, input_csv, out, backmap = "sum";
  std::size_t sample = 0;
  bool svg = false;
  bool include_pooled = false;
};

struct MaskStatsArgs {
  Index t = 96;
  std::size_t n = 1000;
  std::uint64_t seed = 0;
};

struct SynthArgs {
  std::string kind = "sine", out;
  Index length = 2048, features = 1;
  std::uint64_t seed = 0;
};

void log_effective_config(const RunConfig& rc, const std::string& out_dir) {
  const auto text = to_json(rc).dump(2);
  log::info("effective config:\n" + text);
  if (out_dir.empty()) return;
  fs::create_directories(out_dir);
  std::ofstream f(fs::path(out_dir) / "effective_config.json");
  require(f.good(), ErrorKind::Io, "cannot write effective config in '" + out_dir + "'");
  f << text << '\n';
}

struct PreparedData {
  NormStats stats;
  Series train, val;
};

/// Loads and normalizes training / validation series. Statistics come from the
/// training part only.
PreparedData prepare_series(const DataConfig& dc, const std::string& train_csv,
                            const std::string& val_csv) {
  PreparedData p;
  p.train = load_csv(train_csv, dc);
  if (!val_csv.empty()) {
    p.val = load_csv(val_csv, dc);
  } else {
    const double share = dc.train_fraction / (dc.train_fraction + dc.val_fraction);
    auto parts = chronological_split(p.train, share, 1.0 - share);
    p.train = std::move(parts.train);
    p.val = std::move(parts.val);
    log::info("no validation CSV: split the training CSV chronologically");
  }
  p.stats = fit_norm_stats(p.train);
  normalize(p.train, p.stats);
  normalize(p.val, p.stats);
  return p;
}

WindowedDataset windows_or_fail(const Series& s, Index window, Index stride,
                                double max_missing, const std::string& what) {
  auto ds = make_windows(s, window, stride, max_missing);
  require(ds.size() > 0, ErrorKind::Data, what + ": no usable windows");
  return ds;
}

void check_features(const ModelConfig& mc, const Series& s) {
  require(mc.features == s.features(), ErrorKind::Config,
          "model.features is " + std::to_string(mc.features) + " but the data has " +
              std::to_string(s.features()) + " feature columns");
}

Json pretrain_metrics_json(const PretrainMetrics& m) {
  return Json{{"imputation_mse", m.imputation_mse},
              {"reconstruction_mse", m.reconstruction_mse},
              {"class_f1", m.class_f1},
              {"class_accuracy", m.class_accuracy},
              {"val_total", m.loss.total}};
}

int cmd_pretrain(const PretrainArgs& a, std::ostream& out) {
  RunConfig rc = load_run_config(a.config);
  if (a.seed) rc.train.seed = *a.seed;
  rc.model.validate();
  rc.train.validate();
  rc.data.validate();
  require(rc.data.window == rc.model.window, ErrorKind::Config,
          "data.window (" + std::to_string(rc.data.window) +
              ") must equal model.window (" + std::to_string(rc.model.window) + ")");
  log_effective_config(rc, a.out);

  auto data = prepare_series(rc.data, a.train_csv, a.val_csv);
  check_features(rc.model, data.train);
  const auto train_ds = windows_or_fail(data.train, rc.model.window, rc.data.stride,
                                        rc.data.max_missing, "training data");
  const auto val_ds = windows_or_fail(data.val, rc.model.window, rc.data.stride,
                                      rc.data.max_missing, "validation data");

  TsrmModel<float> model(rc.model, rc.train.seed);
  TrainOptions opt;
  opt.out_dir = a.out;
  opt.checkpoint_extras = Json{{"stage", "pretrain"},
                               {"normalization", to_json(data.stats)},
                               {"run_config", to_json(rc)}};
  const auto objective = pretraining_objective(train_ds, val_ds, rc.train);
  const auto run = train(model, objective, rc.train, opt);
  const auto metrics = evaluate_pretraining(
      model, pretraining_validation_samples(val_ds, rc.train));
  out << Json{{"checkpoint", a.out},
              {"best_epoch", run.best_epoch},
              {"epochs", run.epochs.size()},
              {"stop_reason", run.stop_reason},
              {"parameters", run.parameters},
              {"validation", pretrain_metrics_json(metrics)}}
             .dump()
      << '\n';
  return kExitOk;
}

TaskSpec task_from_flags(const std::string& kind_str, std::optional<Index> horizon,
                         std::optional<Index> classes,
                         const std::optional<TaskSpec>& base, Index default_input) {
  TaskSpec t = base.value_or(TaskSpec{});
  if (!base) t.input_length = default_input;
  try {
    t.kind = parse_task_kind(kind_str);
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  if (horizon && t.kind != TaskKind::Forecast)
    throw UsageError("--horizon applies only to --task forecast");
  if (classes && t.kind != TaskKind::Classify)
    throw UsageError("--classes applies only to --task classify");
  if (horizon) t.horizon = *horizon;
  if (classes) t.classes = *classes;
  if (t.kind == TaskKind::Forecast && t.horizon < 1)
    throw UsageError("--task forecast requires --horizon");
  if (t.kind == TaskKind::Classify && !classes && !(base && base->kind == TaskKind::Classify))
    throw UsageError("--task classify requires --classes");
  t.validate();
  return t;
}

Index task_window(const TaskSpec& task, Index model_window) {
  return task.kind == TaskKind::Forecast ? task.input_length + task.horizon
                                         : model_window;
}

int cmd_finetune(const FinetuneArgs& a, std::ostream& out) {
  auto ckpt = load_checkpoint(a.model);
  RunConfig rc;
  if (!a.config.empty()) {
    rc = load_run_config(a.config);
    if (ckpt.extras.contains("run_config") && !a.config.empty())
      log::info("model section of --config is ignored; the checkpoint's model is used");
  } else if (ckpt.extras.contains("run_config")) {
    rc = run_config_from_json(ckpt.extras["run_config"]);
  }
  rc.model = ckpt.model.config();
  if (a.seed) rc.train.seed = *a.seed;
  const TaskSpec task = task_from_flags(a.task, a.horizon, a.classes, rc.task,
                                        ckpt.model.config().window);
  rc.task = task;
  if (a.eval_horizon && task.kind != TaskKind::Forecast)
    throw UsageError("--eval-horizon applies only to --task forecast");
  if (task.kind == TaskKind::Classify && rc.data.label_column.empty())
    fail(ErrorKind::Config, "classification needs data.label_column in the config");
  rc.train.validate();
  rc.data.validate();

  auto model = prepare_finetune(ckpt.model, task, rc.train.seed);
  rc.model = model.config();
  log_effective_config(rc, a.out);

  auto data = prepare_series(rc.data, a.train_csv, a.val_csv);
  check_features(rc.model, data.train);
  const Index W = task_window(task, ckpt.model.config().window);
  const auto train_ds = windows_or_fail(data.train, W, rc.data.stride,
                                        rc.data.max_missing, "training data");
  const auto val_ds = windows_or_fail(data.val, W, rc.data.stride,
                                      rc.data.max_missing, "validation data");

  TrainOptions opt;
  opt.out_dir = a.out;
  opt.checkpoint_extras = Json{{"stage", "finetune"},
                               {"normalization", to_json(data.stats)},
                               {"task", to_json(task)},
                               {"run_config", to_json(rc)}};
  const auto objective = finetune_objective(train_ds, val_ds, task, rc.train);
  const auto run = train(model, objective, rc.train, opt);
  const auto val_samples = task_validation_samples(val_ds, task, rc.train);
  Json result{{"checkpoint", a.out},
              {"best_epoch", run.best_epoch},
              {"epochs", run.epochs.size()},
              {"stop_reason", run.stop_reason},
              {"validation", to_json(evaluate_task(model, val_samples, task))}};
  if (a.eval_horizon)
    result["validation_truncated"] =
        to_json(evaluate_task(model, val_samples, task, *a.eval_horizon));
  out << result.dump() << '\n';
  return kExitOk;
}

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  auto ckpt = load_checkpoint(a.model);
  require(ckpt.extras.contains("normalization"), ErrorKind::CorruptCheckpoint,
          "checkpoint has no normalization statistics");
  const auto stats = norm_stats_from_json(ckpt.extras["normalization"]);
  RunConfig rc;
  if (ckpt.extras.contains("run_config"))
    rc = run_config_from_json(ckpt.extras["run_config"]);
  std::optional<TaskSpec> stored;
  if (ckpt.extras.contains("task")) stored = task_spec_from_json(ckpt.extras["task"]);
  TaskSpec task;
  if (!a.task.empty()) {
    task = task_from_flags(a.task, a.horizon, std::nullopt, stored,
                           ckpt.model.config().window);
  } else {
    if (a.horizon) throw UsageError("--horizon needs --task");
    task = stored.value_or(TaskSpec{});
    if (!stored) task.input_length = ckpt.model.config().window;
  }
  if (task.kind == TaskKind::Forecast)
    require(task.input_length + task.horizon == ckpt.model.config().window,
            ErrorKind::Config,
            "forecast evaluation needs a model fine-tuned for input " +
                std::to_string(task.input_length) + " + horizon " +
                std::to_string(task.horizon));
  if (task.kind == TaskKind::Classify)
    require(!rc.data.label_column.empty(), ErrorKind::Config,
            "classification evaluation needs a label column in the checkpoint config");
  if (a.eval_horizon && task.kind != TaskKind::Forecast)
    throw UsageError("--eval-horizon applies only to forecast evaluation");

  auto series = load_csv(a.test_csv, rc.data);
  check_features(ckpt.model.config(), series);
  normalize(series, stats);
  const auto ds = windows_or_fail(series, ckpt.model.config().window, rc.data.stride,
                                  rc.data.max_missing, "test data");
  TrainConfig tc = rc.train;
  tc.seed = a.seed;
  const auto samples = task_validation_samples(ds, task, tc);
  Json result = to_json(evaluate_task(ckpt.model, samples, task));
  if (a.eval_horizon)
    result["truncated"] = to_json(evaluate_task(ckpt.model, samples, task, *a.eval_horizon));
  out << result.dump() << '\n';
  return kExitOk;
}

int cmd_explain(const ExplainArgs& a, std::ostream& out) {
  auto ckpt = load_checkpoint(a.model);
  require(ckpt.extras.contains("normalization"), ErrorKind::CorruptCheckpoint,
          "checkpoint has no normalization statistics");
  const auto stats = norm_stats_from_json(ckpt.extras["normalization"]);
  RunConfig rc;
  if (ckpt.extras.contains("run_config"))
    rc = run_config_from_json(ckpt.extras["run_config"]);
  std::optional<TaskSpec> task;
  if (ckpt.extras.contains("task")) task = task_spec_from_json(ckpt.extras["task"]);

  auto series = load_csv(a.input_csv, rc.data);
  check_features(ckpt.model.config(), series);
  normalize(series, stats);
  const Index T = ckpt.model.config().window;
  const auto ds = windows_or_fail(series, T, rc.data.stride, 1.0, "input data");
  require(a.sample < ds.size(), ErrorKind::Data,
          "--sample " + std::to_string(a.sample) + " out of range; the input has " +
              std::to_string(ds.size()) + " windows");
  const auto& w = ds.samples[a.sample];
  Grid input;
  if (task && task->kind == TaskKind::Forecast)
    input = make_forecast_sample(w, task->input_length).input;
  else
    input = make_classify_sample(w).input;

  BackmapOptions bo;
  bo.mode = parse_backmap_mode(a.backmap);
  bo.include_pooled = a.include_pooled;
  const auto files = export_attention(ckpt.model, input, a.out, a.svg, bo);
  out << Json{{"files", files}}.dump() << '\n';
  return kExitOk;
}

int cmd_mask_stats(const MaskStatsArgs& a, std::ostream& out) {
  if (a.n == 0) throw UsageError("--n must be positive");
  const auto [lmin, lmax] = mask_run_bounds(a.t);
  std::map<Index, std::size_t> hist;
  double lo = 1, hi = 0, mean = 0;
  std::size_t out_of_bounds = 0;
  const MaskGrid observed = MaskGrid::Constant(a.t, 1, true);
  for (std::size_t i = 0; i < a.n; ++i) {
    Rng rng(mix_seed(a.seed, i));
    const auto m = generate_mask(observed, rng);
    const double frac = double(m.count()) / double(a.t);
    lo = std::min(lo, frac);
    hi = std::max(hi, frac);
    mean += frac / double(a.n);
    for (Index t = 0; t < a.t;) {
      if (!m(t, 0)) {
        ++t;
        continue;
      }
      Index run = 0;
      while (t < a.t && m(t, 0)) ++run, ++t;
      ++hist[run];
      if (run < lmin || run > lmax) ++out_of_bounds;
    }
  }
  Json h = Json::object();
  for (auto [len, c] : hist) h[std::to_string(len)] = c;
  out << Json{{"t", a.t},
              {"n", a.n},
              {"seed", a.seed},
              {"run_length_bounds", {lmin, lmax}},
              {"fraction", {{"min", lo}, {"max", hi}, {"mean", mean}}},
              {"run_lengths", h},
              {"runs_out_of_bounds", out_of_bounds}}
             .dump()
      << '\n';
  return kExitOk;
}

int cmd_synth(const SynthArgs& a, std::ostream& out) {
  const auto s = synth_series(parse_synth_kind(a.kind), a.length, a.features, a.seed);
  write_csv(a.out, s);
  out << Json{{"file", a.out}, {"rows", a.length}, {"features", a.features}}.dump()
      << '\n';
  return kExitOk;
}

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config: return kExitUsage;
    case ErrorKind::Numerical: return kExitNumerical;
    default: return kExitRuntime;
  }
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out,
            std::ostream& err) {
  CLI::App app{"Time series representation models: pretraining, fine-tuning, "
               "evaluation and attention export."};
  app.name("tsrm");
  app.require_subcommand(1);

  PretrainArgs pa;
  auto* pre = app.add_subcommand("pretrain", "Self-supervised pretraining");
  pre->add_option("--config", pa.config, "Run configuration (JSON)")->required();
  pre->add_option("--train-csv", pa.train_csv, "Training CSV")->required();
  pre->add_option("--val-csv", pa.val_csv, "Validation CSV (default: split training CSV)");
  pre->add_option("--out", pa.out, "Checkpoint directory")->required();
  pre->add_option("--seed", pa.seed, "Override train.seed");

  FinetuneArgs fa;
  auto* fin = app.add_subcommand("finetune", "Fine-tune a pretrained checkpoint");
  fin->add_option("--task", fa.task, "forecast|impute|classify")->required();
  fin->add_option("--horizon", fa.horizon, "Forecast horizon H");
  fin->add_option("--classes", fa.classes, "Number of classes");
  fin->add_option("--model", fa.model, "Pretrained checkpoint directory")->required();
  fin->add_option("--config", fa.config, "Run configuration (train/data sections)");
  fin->add_option("--train-csv", fa.train_csv, "Training CSV")->required();
  fin->add_option("--val-csv", fa.val_csv, "Validation CSV");
  fin->add_option("--out", fa.out, "Output checkpoint directory")->required();
  fin->add_option("--seed", fa.seed, "Override train.seed");
  fin->add_option("--eval-horizon", fa.eval_horizon,
                  "Also report forecast metrics truncated to this horizon");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint; metrics JSON on stdout");
  ev->add_option("--model", ea.model, "Checkpoint directory")->required();
  ev->add_option("--test-csv", ea.test_csv, "Test CSV")->required();
  ev->add_option("--task", ea.task, "forecast|impute|classify (default: checkpoint task)");
  ev->add_option("--horizon", ea.horizon, "Forecast horizon of the checkpoint");
  ev->add_option("--eval-horizon", ea.eval_horizon, "Truncate forecast metrics");
  ev->add_option("--seed", ea.seed, "Seed for imputation masks");

  ExplainArgs xa;
  auto* ex = app.add_subcommand("explain", "Export back-mapped attention weights");
  ex->add_option("--model", xa.model, "Checkpoint directory")->required();
  ex->add_option("--input-csv", xa.input_csv, "Input CSV")->required();
  ex->add_option("--sample", xa.sample, "Window index");
  ex->add_option("--out", xa.out, "Output directory")->required();
  ex->add_flag("--svg", xa.svg, "Also write SVG plots");
  ex->add_option("--backmap", xa.backmap, "sum|mean");
  ex->add_flag("--include-pooled", xa.include_pooled,
               "Back-map pooled-segment weights too");

  MaskStatsArgs ma;
  auto* ms = app.add_subcommand("mask-stats", "Masking protocol statistics");
  ms->add_option("--t", ma.t, "Window length");
  ms->add_option("--n", ma.n, "Number of draws");
  ms->add_option("--seed", ma.seed, "Seed");

  SynthArgs sa;
  auto* sy = app.add_subcommand("synth", "Write a synthetic series as CSV");
  sy->add_option("--kind", sa.kind, "sine|noise");
  sy->add_option("--length", sa.length, "Rows");
  sy->add_option("--features", sa.features, "Feature columns");
  sy->add_option("--seed", sa.seed, "Seed");
  sy->add_option("--out", sa.out, "Output CSV path")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    log::set_level(log::level_from_env());
    if (pre->parsed()) return cmd_pretrain(pa, out);
    if (fin->parsed()) return cmd_finetune(fa, out);
    if (ev->parsed()) return cmd_eval(ea, out);
    if (ex->parsed()) return cmd_explain(xa, out);
    if (ms->parsed()) return cmd_mask_stats(ma, out);
    if (sy->parsed()) return cmd_synth(sa, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const Error& e) {
    err << "error (" << to_string(e.kind()) << "): " << e.what() << '\n';
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace tsrm
