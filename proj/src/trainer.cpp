#include "tsrm/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "tsrm/checkpoint.hpp"
#include "tsrm/log.hpp"

namespace tsrm {
namespace {

constexpr std::uint64_t kValidationSalt = 0x76616c6964ULL;

std::uint64_t validation_seed(const TrainConfig& cfg) {
  return mix_seed(cfg.seed, kValidationSalt);
}

Json breakdown_json(const LossBreakdown& b) {
  return Json{{"l_repr", b.l_repr},
              {"l_imp", b.l_imp},
              {"l_class", b.l_class},
              {"total", b.total}};
}

bool finite(const LossBreakdown& b) {
  return std::isfinite(b.l_repr) && std::isfinite(b.l_imp) &&
         std::isfinite(b.l_class) && std::isfinite(b.total);
}

std::string describe(const LossBreakdown& b) {
  std::ostringstream os;
  os << "l_repr=" << b.l_repr << " l_imp=" << b.l_imp
     << " l_class=" << b.l_class << " total=" << b.total;
  return os.str();
}

void accumulate(LossBreakdown& acc, const LossBreakdown& b, double share) {
  acc.l_repr += b.l_repr * share;
  acc.l_imp += b.l_imp * share;
  acc.l_class += b.l_class * share;
  acc.total += b.total * share;
}

}  // namespace

std::vector<PretrainSample> pretraining_validation_samples(
    const WindowedDataset& val, const TrainConfig& cfg) {
  std::vector<PretrainSample> out;
  const auto seed = validation_seed(cfg);
  for (std::size_t i = 0; i < val.size(); ++i) {
    Rng rng(mix_seed(seed, i));
    out.push_back(draw_pretrain_sample(val.samples[i], rng, cfg.invalid_rate,
                                       cfg.per_feature_mask));
  }
  return out;
}

std::vector<TaskSample> task_validation_samples(const WindowedDataset& val,
                                                const TaskSpec& task,
                                                const TrainConfig& cfg) {
  std::vector<TaskSample> out;
  const auto seed = validation_seed(cfg);
  for (std::size_t i = 0; i < val.size(); ++i) {
    Rng rng(mix_seed(seed, i));
    out.push_back(make_task_sample(val.samples[i], task, rng, cfg.per_feature_mask));
  }
  return out;
}

Objective pretraining_objective(const WindowedDataset& train,
                                const WindowedDataset& val,
                                const TrainConfig& cfg) {
  Objective obj;
  obj.train_size = train.size();
  obj.val_size = val.size();
  auto val_samples = std::make_shared<std::vector<PretrainSample>>(
      pretraining_validation_samples(val, cfg));
  obj.batch = [&train, val_samples, cfg](const TsrmModel<float>& model,
                                         const std::vector<std::size_t>& idx,
                                         bool validation, Mode mode,
                                         std::uint64_t seed) {
    std::vector<PretrainSample> batch;
    batch.reserve(idx.size());
    for (auto i : idx) {
      if (validation) {
        batch.push_back((*val_samples)[i]);
      } else {
        Rng rng(mix_seed(seed, i));
        batch.push_back(draw_pretrain_sample(train.samples[i], rng,
                                             cfg.invalid_rate,
                                             cfg.per_feature_mask));
      }
    }
    const auto trace = model.forward(batch_input<float>(batch), mode, seed);
    auto loss = pretrain_loss(trace, batch, loss_weights(model.config()));
    return BatchResult{loss.objective, loss.breakdown};
  };
  return obj;
}

Objective finetune_objective(const WindowedDataset& train,
                             const WindowedDataset& val, const TaskSpec& task,
                             const TrainConfig& cfg) {
  Objective obj;
  obj.train_size = train.size();
  obj.val_size = val.size();
  auto val_samples = std::make_shared<std::vector<TaskSample>>(
      task_validation_samples(val, task, cfg));
  obj.batch = [&train, val_samples, task, cfg](
                  const TsrmModel<float>& model,
                  const std::vector<std::size_t>& idx, bool validation,
                  Mode mode, std::uint64_t seed) {
    std::vector<TaskSample> batch;
    batch.reserve(idx.size());
    for (auto i : idx) {
      if (validation) {
        batch.push_back((*val_samples)[i]);
      } else {
        Rng rng(mix_seed(seed, i));
        batch.push_back(make_task_sample(train.samples[i], task, rng,
                                         cfg.per_feature_mask));
      }
    }
    const auto trace = model.forward(task_batch_input<float>(batch), mode, seed);
    auto loss = finetune_loss(trace, batch, task);
    LossBreakdown b;
    b.total = loss.value;
    (task.kind == TaskKind::Classify ? b.l_class : b.l_imp) = loss.value;
    return BatchResult{loss.objective, b};
  };
  return obj;
}

std::string RunLog::to_jsonl(bool with_timing) const {
  std::ostringstream os;
  for (const auto& e : epochs) {
    Json j{{"epoch", e.epoch},
           {"train", breakdown_json(e.train)},
           {"val", breakdown_json(e.val)},
           {"metric", e.metric},
           {"best", e.best},
           {"lr", e.lr},
           {"steps", e.steps},
           {"clipped", e.clipped},
           {"improved", e.improved}};
    if (with_timing) j["seconds"] = e.seconds;
    os << j.dump() << '\n';
  }
  Json summary{{"best_epoch", best_epoch},
               {"best_metric", best_metric},
               {"parameters", parameters},
               {"trainable", trainable},
               {"total_steps", total_steps},
               {"stop_reason", stop_reason}};
  os << Json{{"summary", summary}}.dump() << '\n';
  return os.str();
}

bool early_stop_check(const std::vector<double>& history, double rel,
                      int patience) {
  require(!history.empty(), ErrorKind::Internal,
          "early_stop_check: empty history");
  double best = history.front();
  int stale = 0;
  for (std::size_t i = 1; i < history.size(); ++i) {
    const double cur = history[i];
    if ((best - cur) / best >= rel) {
      stale = 0;
    } else {
      ++stale;
    }
    best = std::min(best, cur);
  }
  return stale >= patience;
}

double scheduler_step(double val_loss, SchedulerState& state,
                      const TrainConfig& cfg) {
  if (val_loss < state.best) {
    state.best = val_loss;
    state.stale = 0;
    return state.lr;
  }
  if (++state.stale >= cfg.scheduler_patience) {
    state.lr = std::max(state.lr * cfg.scheduler_factor, cfg.min_lr);
    state.stale = 0;
  }
  return state.lr;
}

std::uint64_t parameter_hash(const TsrmModel<float>& model) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : model.params().all()) {
    for (char c : p.name) h = (h ^ std::uint8_t(c)) * 0x100000001b3ULL;
    for (Index i = 0; i < p.tensor.size(); ++i) {
      std::uint32_t u;
      const float v = p.tensor.value()(i);
      std::memcpy(&u, &v, 4);
      for (int k = 0; k < 4; ++k)
        h = (h ^ ((u >> (8 * k)) & 0xff)) * 0x100000001b3ULL;
    }
  }
  return h;
}

RunLog train(TsrmModel<float>& model, const Objective& objective,
             const TrainConfig& cfg, const TrainOptions& options) {
  cfg.validate();
  require(objective.train_size > 0 && objective.val_size > 0, ErrorKind::Data,
          "training needs non-empty training and validation sets");
  RunLog log;
  log.parameters = model.params().count_values(false);
  log.trainable = model.params().count_values(true);

  AdamState<float> adam;
  adam.config = {cfg.initial_lr, cfg.beta1, cfg.beta2, cfg.adam_eps};
  SchedulerState sched;
  sched.lr = cfg.initial_lr;
  std::vector<double> history;
  std::vector<Buffer<float>> best_values;
  const auto snapshot = [&] {
    best_values.clear();
    for (const auto& p : model.params().all()) best_values.push_back(p.tensor.value());
  };
  const auto write_runlog = [&] {
    if (options.out_dir.empty()) return;
    std::filesystem::create_directories(options.out_dir);
    std::ofstream out(std::filesystem::path(options.out_dir) / "runlog.jsonl");
    require(out.good(), ErrorKind::Io,
            "cannot write run log in '" + options.out_dir + "'");
    out << log.to_jsonl();
  };

  const std::size_t bs = std::size_t(cfg.batch_size);
  const auto vseed = validation_seed(cfg);
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = sched.lr;
    adam.config.lr = sched.lr;
    const std::uint64_t epoch_seed = mix_seed(cfg.seed, std::uint64_t(epoch));

    std::vector<std::size_t> order(objective.train_size);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle(epoch_seed);
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[std::size_t(shuffle.integer(0, std::int64_t(i) - 1))]);

    const std::size_t n_batches = (order.size() + bs - 1) / bs;
    for (std::size_t k = 0; k < n_batches; ++k) {
      std::vector<std::size_t> idx(order.begin() + k * bs,
                                   order.begin() + std::min(order.size(), (k + 1) * bs));
      const auto seed = mix_seed(epoch_seed, k + 1);
      auto res = objective.batch(model, idx, false, Mode::Train, seed);
      if (!finite(res.breakdown) || !std::isfinite(double(res.objective.item())))
        fail(ErrorKind::Numerical, "non-finite loss at epoch " +
                                       std::to_string(epoch) + ", batch " +
                                       std::to_string(k + 1) + ": " +
                                       describe(res.breakdown));
      model.params().zero_grad();
      res.objective.backward();
      if (cfg.grad_clip > 0) {
        const double norm = clip_grad_norm(model.params(), cfg.grad_clip);
        require(std::isfinite(norm), ErrorKind::Numerical,
                "non-finite gradient norm at epoch " + std::to_string(epoch) +
                    ", batch " + std::to_string(k + 1) + ": " +
                    describe(res.breakdown));
        if (norm > cfg.grad_clip) {
          ++rec.clipped;
          log::debug("gradient norm " + std::to_string(norm) + " clipped to " +
                     std::to_string(cfg.grad_clip));
        }
      }
      adam_step(model.params(), adam);
      accumulate(rec.train, res.breakdown, double(idx.size()) / double(order.size()));
      ++rec.steps;
    }
    log.total_steps += rec.steps;

    for (std::size_t start = 0; start < objective.val_size; start += bs) {
      std::vector<std::size_t> idx;
      for (std::size_t i = start; i < std::min(objective.val_size, start + bs); ++i)
        idx.push_back(i);
      const auto res = objective.batch(model, idx, true, Mode::Eval, vseed);
      accumulate(rec.val, res.breakdown,
                 double(idx.size()) / double(objective.val_size));
    }
    require(finite(rec.val), ErrorKind::Numerical,
            "non-finite validation loss at epoch " + std::to_string(epoch) +
                ": " + describe(rec.val));

    rec.metric = cfg.early_stop_metric == EarlyStopMetric::Imputation
                     ? rec.val.l_imp
                     : rec.val.total;
    history.push_back(rec.metric);
    if (rec.metric < log.best_metric) {
      log.best_metric = rec.metric;
      log.best_epoch = epoch;
      rec.improved = true;
      snapshot();
      if (!options.out_dir.empty())
        save_checkpoint(model, options.out_dir, options.checkpoint_extras);
    }
    rec.best = log.best_metric;
    scheduler_step(rec.metric, sched, cfg);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.epochs.push_back(rec);
    write_runlog();
    log::info("epoch " + std::to_string(epoch) + " train " + describe(rec.train) +
              " | val " + describe(rec.val) + " | lr " + std::to_string(rec.lr));

    if (options.on_epoch && options.on_epoch(rec, model)) {
      log.stop_reason = "callback";
      break;
    }
    if (early_stop_check(history, cfg.early_stop_rel, cfg.early_stop_patience)) {
      log.stop_reason = "early_stop";
      break;
    }
  }
  if (log.stop_reason.empty()) log.stop_reason = "max_epochs";

  auto& params = model.params().all();
  for (std::size_t i = 0; i < params.size() && i < best_values.size(); ++i)
    params[i].tensor.value() = best_values[i];
  write_runlog();
  return log;
}

}  // namespace tsrm
