#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "tsrm/checkpoint.hpp"
#include "tsrm/trainer.hpp"

using namespace tsrm;

namespace fs = std::filesystem;

namespace {

ModelConfig small_model() {
  ModelConfig c;
  c.window = 24;
  c.features = 1;
  c.f_embed = 4;
  c.heads = 2;
  c.layers = 1;
  c.branches = {{3, 0.0, 1, 0}};
  c.classifier = {4, 3, 2, 2, 3, 1, 4, 5, 6};
  return c;
}

TrainConfig small_train(int epochs = 3) {
  TrainConfig t;
  t.max_epochs = epochs;
  t.batch_size = 5;
  t.initial_lr = 3e-3;
  t.seed = 11;
  return t;
}

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

}  // namespace

TEST_CASE("early stop: rule examples") {
  CHECK_FALSE(early_stop_check({1.0}, 0.01, 5));
  const std::vector<double> slow{1.0, 0.995, 0.994, 0.993, 0.992, 0.991};
  for (std::size_t n = 1; n < slow.size(); ++n)
    CHECK_FALSE(early_stop_check({slow.begin(), slow.begin() + n}, 0.01, 5));
  CHECK(early_stop_check(slow, 0.01, 5));

  // 0.98 improves by 2%; four stale epochs follow, a fifth is needed.
  std::vector<double> h{1.0, 0.98, 0.985, 0.984, 0.983, 0.982};
  CHECK_FALSE(early_stop_check(h, 0.01, 5));
  h.push_back(0.981);
  CHECK(early_stop_check(h, 0.01, 5));

  std::vector<double> fast{1.0};
  for (int i = 0; i < 40; ++i) {
    fast.push_back(fast.back() * 0.98);
    CHECK_FALSE(early_stop_check(fast, 0.01, 5));
  }
  // Ten-percent steps never stop either.
  std::vector<double> tenth{1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3};
  CHECK_FALSE(early_stop_check(tenth, 0.01, 5));
}

TEST_CASE("early stop: matches a direct simulation") {
  Rng rng(3);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> h{1.0};
    for (int i = 0; i < 12; ++i) h.push_back(h.back() * rng.uniform(0.97, 1.02));
    // Simulate: count epochs since the last >= 1% improvement over the best.
    double best = h[0];
    int stale = 0;
    for (std::size_t i = 1; i < h.size(); ++i) {
      if (h[i] <= best * (1 - 0.01)) stale = 0;
      else ++stale;
      best = std::min(best, h[i]);
    }
    CHECK(early_stop_check(h, 0.01, 5) == (stale >= 5));
  }
}

TEST_CASE("scheduler: plateau rule") {
  TrainConfig cfg;
  SchedulerState s;
  s.lr = 1e-3;
  for (double v : {1.0, 0.9, 0.8, 0.7}) CHECK(scheduler_step(v, s, cfg) == 1e-3);

  SchedulerState f;
  f.lr = 1e-3;
  CHECK(scheduler_step(1.0, f, cfg) == 1e-3);
  CHECK(scheduler_step(1.0, f, cfg) == 1e-3);
  CHECK(scheduler_step(1.0, f, cfg) == doctest::Approx(5e-4));
  CHECK(scheduler_step(1.0, f, cfg) == doctest::Approx(5e-4));
  CHECK(scheduler_step(1.0, f, cfg) == doctest::Approx(2.5e-4));

  SchedulerState m;
  m.lr = cfg.min_lr;
  for (int i = 0; i < 10; ++i) CHECK(scheduler_step(2.0, m, cfg) == cfg.min_lr);
}

TEST_CASE("train: deterministic, counted and reproducible from the checkpoint") {
  auto train_set = synth_dataset(SynthKind::Sine, 24, 1, 13, 1);
  auto val_set = synth_dataset(SynthKind::Sine, 24, 1, 7, 2);
  auto cfg = small_train(3);
  const auto dir = fs::temp_directory_path() / "tsrm_test_trainer";
  fs::remove_all(dir);

  TsrmModel<float> a(small_model(), 5), b(small_model(), 5);
  TrainOptions opts;
  opts.out_dir = dir.string();
  opts.checkpoint_extras = Json{{"stage", "test"}};
  auto la = train(a, pretraining_objective(train_set, val_set, cfg), cfg, opts);
  auto lb = train(b, pretraining_objective(train_set, val_set, cfg), cfg);
  CHECK(la.to_jsonl(false) == lb.to_jsonl(false));
  CHECK(parameter_hash(a) == parameter_hash(b));
  REQUIRE(la.epochs.size() == 3);
  CHECK(la.total_steps == 3 * ceil_div(13, 5));
  for (const auto& e : la.epochs) CHECK(e.steps == ceil_div(13, 5));
  CHECK(la.stop_reason == "max_epochs");
  for (std::size_t i = 1; i < la.epochs.size(); ++i)
    CHECK(la.epochs[i].best <= la.epochs[i - 1].best);

  // Another seed gives another run.
  auto cfg2 = cfg;
  cfg2.seed = 12;
  TsrmModel<float> c(small_model(), 5);
  auto lc = train(c, pretraining_objective(train_set, val_set, cfg2), cfg2);
  CHECK(parameter_hash(c) != parameter_hash(a));

  // The checkpoint holds the best epoch and reproduces its validation loss.
  auto ck = load_checkpoint(dir.string());
  CHECK(ck.extras["stage"] == "test");
  CHECK(parameter_hash(ck.model) == parameter_hash(a));
  auto obj = pretraining_objective(train_set, val_set, cfg);
  const auto vseed = mix_seed(cfg.seed, 0x76616c6964ULL);
  double val = 0;
  for (std::size_t start = 0; start < val_set.size(); start += 5) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(val_set.size(), start + 5); ++i) idx.push_back(i);
    val += obj.batch(ck.model, idx, true, Mode::Eval, vseed).breakdown.total *
           double(idx.size()) / double(val_set.size());
  }
  CHECK(val == doctest::Approx(la.best_metric).epsilon(1e-6));

  std::ifstream in(dir / "runlog.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) {
    auto j = Json::parse(line);
    if (++lines <= 3) CHECK(j.contains("seconds"));
  }
  CHECK(lines == 4);
  fs::remove_all(dir);
}

TEST_CASE("train: callback and early stopping end the run") {
  auto train_set = synth_dataset(SynthKind::Sine, 24, 1, 6, 3);
  auto val_set = synth_dataset(SynthKind::Sine, 24, 1, 4, 4);
  auto cfg = small_train(10);
  TsrmModel<float> m(small_model(), 6);
  TrainOptions opts;
  opts.on_epoch = [](const EpochRecord& r, const TsrmModel<float>&) { return r.epoch == 2; };
  auto log = train(m, pretraining_objective(train_set, val_set, cfg), cfg, opts);
  CHECK(log.epochs.size() == 2);
  CHECK(log.stop_reason == "callback");

  cfg.initial_lr = 1e-9;
  cfg.max_epochs = 30;
  TsrmModel<float> s(small_model(), 6);
  auto stalled = train(s, pretraining_objective(train_set, val_set, cfg), cfg);
  CHECK(stalled.stop_reason == "early_stop");
  CHECK(stalled.epochs.size() == 6);
}

TEST_CASE("train: non-finite loss aborts with a diagnostic") {
  Objective bad;
  bad.train_size = 4;
  bad.val_size = 2;
  bad.batch = [](const TsrmModel<float>& model, const std::vector<std::size_t>&, bool,
                 Mode, std::uint64_t) {
    BatchResult r;
    r.objective = Tensor<float>::constant({1}, std::nanf(""));
    r.breakdown.l_imp = std::nan("");
    r.breakdown.total = std::nan("");
    (void)model;
    return r;
  };
  TsrmModel<float> m(small_model(), 7);
  auto cfg = small_train(2);
  try {
    train(m, bad, cfg);
    FAIL("expected a numerical error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Numerical);
    const std::string msg = e.what();
    CHECK(msg.find("epoch 1") != std::string::npos);
    CHECK(msg.find("batch 1") != std::string::npos);
    CHECK(msg.find("l_imp") != std::string::npos);
  }
}

TEST_CASE("train: empty data is rejected") {
  WindowedDataset empty;
  auto val_set = synth_dataset(SynthKind::Sine, 24, 1, 4, 4);
  TsrmModel<float> m(small_model(), 8);
  auto cfg = small_train(1);
  CHECK_THROWS_AS(train(m, pretraining_objective(empty, val_set, cfg), cfg), Error);
}

TEST_CASE("train: fine-tuning leaves frozen parameters alone") {
  auto train_set = synth_dataset(SynthKind::Sine, 24, 1, 10, 5);
  auto val_set = synth_dataset(SynthKind::Sine, 24, 1, 4, 6);
  auto cfg = small_train(2);
  TsrmModel<float> pre(small_model(), 9);
  TaskSpec task{TaskKind::Impute, 0, 1, 24};
  auto m = prepare_finetune(pre, task, 1);
  std::vector<Buffer<float>> before;
  for (const auto& p : m.params().all()) before.push_back(p.tensor.value());
  auto log = train(m, finetune_objective(train_set, val_set, task, cfg), cfg);
  CHECK(log.trainable < log.parameters);
  const auto& ps = m.params().all();
  for (std::size_t i = 0; i < ps.size(); ++i)
    if (ps[i].frozen) CHECK((ps[i].tensor.value() == before[i]).all());
}
