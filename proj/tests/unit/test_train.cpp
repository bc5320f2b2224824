#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <vector>

#include <unistd.h>

#include <nlohmann/json.hpp>

#include "icdyn/checkpoint.hpp"
#include "icdyn/errors.hpp"
#include "icdyn/rng.hpp"
#include "icdyn/train.hpp"

using namespace icdyn;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_model() {
  ModelConfig c;
  c.vocab_size = 6;
  c.d_model = 32;
  c.d_k = 16;
  c.n_layers = 2;
  c.block_size = 16;
  return c;
}

TrainConfig tiny_train() {
  TrainConfig t;
  t.lr = 3e-3;
  t.batch_size = 4;
  t.total_steps = 200;
  t.val_every = 50;
  t.window = 16;
  t.seed = 12;
  return t;
}

std::vector<Token> periodic(std::size_t n, std::initializer_list<Token> period) {
  std::vector<Token> s;
  s.reserve(n);
  while (s.size() < n)
    for (Token t : period)
      if (s.size() < n) s.push_back(t);
  return s;
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("icdyn_train_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

ModelParams<double> scalar_params(double value) {
  ModelParams<double> p;
  p.values = {value};
  return p;
}

}  // namespace

TEST(AdamW, FirstStepIsMinusLearningRate) {
  auto p = scalar_params(0.0);
  auto opt = OptState<double>::zeros(1);
  TrainConfig cfg;
  cfg.lr = 5e-5;
  const std::vector<double> g{1.0};
  adamw_step<double>(p, g, opt, cfg);
  // m_hat = 1, v_hat = 1 after bias correction.
  EXPECT_NEAR(p.values[0], -5e-5 / (1.0 + 1e-8), 1e-15);
  EXPECT_NEAR(opt.m[0], 0.1, 1e-15);
  EXPECT_NEAR(opt.v[0], 1e-3, 1e-15);
  EXPECT_EQ(opt.step, 1);
}

TEST(AdamW, SecondStepMatchesHandRecurrence) {
  auto p = scalar_params(1.0);
  auto opt = OptState<double>::zeros(1);
  TrainConfig cfg;
  cfg.lr = 0.01;
  cfg.clip_norm = 100.0;
  const std::vector<double> g1{2.0}, g2{-1.0};
  adamw_step<double>(p, g1, opt, cfg);
  adamw_step<double>(p, g2, opt, cfg);
  const double m = 0.9 * 0.2 + 0.1 * -1.0;
  const double v = 0.999 * 0.004 + 0.001 * 1.0;
  const double mhat = m / (1 - 0.81), vhat = v / (1 - 0.998001);
  const double p1 = 1.0 - 0.01 * 2.0 / (2.0 + 1e-8);
  const double expected = p1 - 0.01 * mhat / (std::sqrt(vhat) + 1e-8);
  EXPECT_NEAR(p.values[0], expected, 1e-12);
}

TEST(AdamW, ZeroGradientIsNoOp) {
  ModelParams<double> p;
  p.values = {0.5, -1.5, 2.0};
  auto opt = OptState<double>::zeros(3);
  const std::vector<double> g(3, 0.0);
  adamw_step<double>(p, g, opt, TrainConfig{});
  EXPECT_EQ(p.values[0], 0.5);
  EXPECT_EQ(p.values[1], -1.5);
  EXPECT_EQ(p.values[2], 2.0);
  EXPECT_EQ(opt.m[1], 0.0);
  EXPECT_EQ(opt.v[2], 0.0);
}

TEST(AdamW, ClipsGlobalNormBeforeMoments) {
  ModelParams<double> p;
  p.values = {0.0, 0.0};
  auto opt = OptState<double>::zeros(2);
  const std::vector<double> g{6.0, 8.0};  // norm 10
  const auto report = adamw_step<double>(p, g, opt, TrainConfig{});
  EXPECT_NEAR(report.grad_norm, 10.0, 1e-12);
  EXPECT_NEAR(report.clip_scale, 0.1, 1e-15);
  EXPECT_NEAR(opt.m[0], 0.1 * 0.6, 1e-15);
  EXPECT_NEAR(opt.m[1], 0.1 * 0.8, 1e-15);
  EXPECT_NEAR(opt.v[1], 0.001 * 0.64, 1e-15);
}

TEST(AdamW, GradientsBelowClipPassUnchanged) {
  ModelParams<double> p;
  p.values = {0.0, 0.0};
  auto opt = OptState<double>::zeros(2);
  const std::vector<double> g{0.3, -0.4};
  const auto report = adamw_step<double>(p, g, opt, TrainConfig{});
  EXPECT_EQ(report.clip_scale, 1.0);
  EXPECT_EQ(opt.m[0], (1.0 - 0.9) * 0.3);
  EXPECT_EQ(opt.m[1], (1.0 - 0.9) * -0.4);
}

TEST(AdamW, DecoupledWeightDecay) {
  auto p = scalar_params(2.0);
  auto opt = OptState<double>::zeros(1);
  TrainConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.5;
  const std::vector<double> g{0.0};
  adamw_step<double>(p, g, opt, cfg);
  EXPECT_NEAR(p.values[0], 2.0 * (1 - 0.05), 1e-15);
}

TEST(AdamW, NonFiniteGradientAborts) {
  auto p = scalar_params(0.0);
  auto opt = OptState<double>::zeros(1);
  opt.step = 6;
  const std::vector<double> g{std::numeric_limits<double>::quiet_NaN()};
  try {
    adamw_step<double>(p, g, opt, TrainConfig{});
    FAIL() << "expected TrainingAbort";
  } catch (const TrainingAbort& e) {
    EXPECT_EQ(e.step(), 7);
  }
  const std::vector<double> wrong(2, 0.0);
  EXPECT_THROW(adamw_step<double>(p, wrong, opt, TrainConfig{}), InvalidArgument);
}

TEST(Windows, ShiftSemantics) {
  const std::vector<Token> s{1, 2, 3, 4, 5};
  const auto w = window_at(s, 3, 0);
  EXPECT_EQ(w.input, (std::vector<Token>{1, 2, 3}));
  EXPECT_EQ(w.target, (std::vector<Token>{2, 3, 4}));
  const auto last = window_at(s, 3, 1);
  EXPECT_EQ(last.target, (std::vector<Token>{3, 4, 5}));
  EXPECT_THROW(window_at(s, 3, 2), InvalidArgument);
  Rng rng(1);
  EXPECT_THROW(sample_window(s, 5, rng), InvalidArgument);
}

TEST(Windows, LengthTPlusOneHasOneOffset) {
  const std::vector<Token> s{4, 5, 6, 1};
  Rng rng(2);
  for (int i = 0; i < 20; ++i) {
    const auto w = sample_window(s, 3, rng);
    EXPECT_EQ(w.input, (std::vector<Token>{4, 5, 6}));
  }
}

TEST(Windows, OffsetsAreUniform) {
  std::vector<Token> s(30);
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = static_cast<Token>(i + 1);
  const int T = 10;
  const int offsets = 20;
  std::vector<int> counts(offsets, 0);
  Rng rng(3);
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) ++counts[sample_window(s, T, rng).input[0] - 1];
  double chi2 = 0;
  const double expected = static_cast<double>(draws) / offsets;
  for (int c : counts) chi2 += (c - expected) * (c - expected) / expected;
  // 19 degrees of freedom; the 0.999 quantile is 43.8.
  EXPECT_LT(chi2, 43.8);
  for (int c : counts) EXPECT_GT(c, 0);
}

TEST(Trainer, LearnsPeriodFourPattern) {
  const auto stream = periodic(400, {1, 3, 5, 2});
  auto trainer = Trainer::fresh(tiny_model(), tiny_train(), stream, stream, stream);
  trainer.run();
  const auto& loss = trainer.record().train_loss;
  ASSERT_EQ(loss.size(), 200u);
  EXPECT_LT(loss.back(), 0.25 * loss.front());
}

TEST(Trainer, BeatsOrderZeroEntropyAfterThousandSteps) {
  const auto stream = periodic(600, {2, 6, 6, 1, 4});
  auto cfg = tiny_train();
  cfg.total_steps = 1000;
  cfg.val_every = 500;
  auto trainer = Trainer::fresh(tiny_model(), cfg, stream, stream, stream);
  trainer.run();
  // Marginal entropy: probabilities 1/5, 2/5, 1/5, 1/5.
  const double h0 = -(3 * 0.2 * std::log(0.2) + 0.4 * std::log(0.4));
  EXPECT_LT(trainer.record().train_loss.back(), h0);
  EXPECT_LT(trainer.record().validation.back().id_loss, h0);
}

TEST(Trainer, ValidationScheduleAndRecord) {
  const auto stream = periodic(200, {1, 2, 3});
  auto cfg = tiny_train();
  cfg.total_steps = 40;
  cfg.val_every = 10;
  const auto dir = scratch("schedule");
  TrainOptions opts;
  opts.checkpoint_dir = (dir / "ckpt").string();
  auto trainer = Trainer::fresh(tiny_model(), cfg, stream, stream, periodic(200, {4, 5}), opts);
  trainer.run();
  const auto& rec = trainer.record();
  ASSERT_EQ(rec.validation.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(rec.validation[i].step, 10 * static_cast<long>(i + 1));
    EXPECT_TRUE(std::isfinite(rec.validation[i].id_loss));
    EXPECT_TRUE(std::isfinite(rec.validation[i].ood_loss));
  }
  ASSERT_EQ(rec.checkpoints.size(), 4u);
  EXPECT_EQ(rec.checkpoints[0], "step_00000010.json");
  for (const auto& c : rec.checkpoints) EXPECT_TRUE(fs::exists(dir / "ckpt" / c));
  rec.write_csv((dir / "record.csv").string());
  rec.write_json((dir / "record.json").string(), cfg);
  std::ifstream csv(dir / "record.csv");
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ(header, "step,split,loss");
  long lines = 0;
  for (std::string line; std::getline(csv, line);) ++lines;
  EXPECT_EQ(lines, 40 + 2 * 4);
  std::ifstream js(dir / "record.json");
  const auto j = nlohmann::json::parse(js);
  EXPECT_EQ(j["validation"].size(), 4u);
  EXPECT_DOUBLE_EQ(j["validation"][0]["epoch"].get<double>(), 10.0 * 4 / 10000.0);
  fs::remove_all(dir);
}

TEST(Trainer, DeterministicPerSeed) {
  const auto stream = periodic(300, {1, 4, 2, 6, 3});
  auto cfg = tiny_train();
  cfg.total_steps = 30;
  auto a = Trainer::fresh(tiny_model(), cfg, stream, stream, stream);
  auto b = Trainer::fresh(tiny_model(), cfg, stream, stream, stream);
  a.run();
  b.run();
  EXPECT_EQ(a.record().train_loss, b.record().train_loss);
  EXPECT_EQ(a.params().values, b.params().values);
  cfg.seed = 13;
  auto c = Trainer::fresh(tiny_model(), cfg, stream, stream, stream);
  c.run();
  EXPECT_NE(a.record().train_loss, c.record().train_loss);
}

TEST(Trainer, ThreadCountDoesNotChangeTrajectory) {
  const auto stream = periodic(300, {1, 4, 2, 6, 3});
  auto cfg = tiny_train();
  cfg.total_steps = 20;
  TrainOptions one, four;
  one.threads = 1;
  four.threads = 4;
  auto a = Trainer::fresh(tiny_model(), cfg, stream, stream, stream, one);
  auto b = Trainer::fresh(tiny_model(), cfg, stream, stream, stream, four);
  a.run();
  b.run();
  EXPECT_EQ(a.record().train_loss, b.record().train_loss);
  EXPECT_EQ(a.params().values, b.params().values);
}

TEST(Trainer, ResumeReproducesTrajectoryBitExactly) {
  const auto stream = periodic(300, {2, 5, 1, 1, 3, 6});
  auto cfg = tiny_train();
  cfg.total_steps = 60;
  cfg.val_every = 20;
  const auto dir = scratch("resume");
  TrainOptions opts;
  opts.checkpoint_dir = (dir / "ckpt").string();
  auto full = Trainer::fresh(tiny_model(), cfg, stream, stream, stream, opts);
  full.run();

  auto resumed = Trainer::fresh(tiny_model(), cfg, stream, stream, stream);
  resumed.resume((dir / "ckpt" / "step_00000020.json").string());
  EXPECT_EQ(resumed.steps_done(), 20);
  resumed.run();
  const auto& all = full.record().train_loss;
  const std::vector<double> tail(all.begin() + 20, all.end());
  EXPECT_EQ(resumed.record().train_loss, tail);
  EXPECT_EQ(resumed.record().start_step, 20);
  EXPECT_EQ(resumed.params().values, full.params().values);
  ASSERT_EQ(resumed.record().validation.size(), 2u);
  EXPECT_EQ(resumed.record().validation[1].id_loss, full.record().validation[2].id_loss);
  fs::remove_all(dir);
}

TEST(Checkpoint, RoundTripsWeightsMomentsAndRng) {
  const auto stream = periodic(100, {1, 2});
  auto cfg = tiny_train();
  cfg.total_steps = 3;
  auto t = Trainer::fresh(tiny_model(), cfg, stream, stream, stream);
  t.run();
  const auto dir = scratch("ckpt");
  const auto path = (dir / "c.json").string();
  t.save_checkpoint(path);
  const auto ckpt = load_checkpoint(path);
  EXPECT_EQ(ckpt.params.values, t.params().values);
  EXPECT_EQ(ckpt.opt.m, t.opt_state().m);
  EXPECT_EQ(ckpt.opt.v, t.opt_state().v);
  EXPECT_EQ(ckpt.opt.step, 3);
  EXPECT_TRUE(ckpt.params.config == tiny_model());
  EXPECT_EQ(ckpt.train.seed, cfg.seed);
  auto other = tiny_model();
  other.d_model = 16;
  auto mismatch = Trainer::fresh(other, cfg, stream, stream, stream);
  EXPECT_THROW(mismatch.resume(path), InvalidArgument);
  fs::remove_all(dir);
}

TEST(Trainer, NonFiniteLossAbortsWithLastCheckpoint) {
  const auto stream = periodic(100, {1, 2, 3});
  auto cfg = tiny_train();
  cfg.total_steps = 20;
  cfg.val_every = 5;
  const auto dir = scratch("abort");
  auto good = Trainer::fresh(tiny_model(), cfg, stream, stream, stream);
  for (int i = 0; i < 3; ++i) good.step();
  const auto path = (dir / "last_good.json").string();
  good.save_checkpoint(path);

  auto poisoned = good.params();
  for (auto& x : poisoned.values) x = std::numeric_limits<float>::quiet_NaN();
  Trainer bad(poisoned, cfg, stream, stream, stream);
  bad.resume(path);
  EXPECT_NO_THROW(bad.step());  // resumed weights are finite again

  Trainer nan_model(poisoned, cfg, stream, stream, stream);
  try {
    nan_model.step();
    FAIL() << "expected TrainingAbort";
  } catch (const TrainingAbort& e) {
    EXPECT_EQ(e.step(), 1);
    EXPECT_EQ(e.last_checkpoint(), "");
  }
  nan_model.save_checkpoint((dir / "nan.json").string());
  try {
    nan_model.step();
    FAIL() << "expected TrainingAbort";
  } catch (const TrainingAbort& e) {
    EXPECT_EQ(e.last_checkpoint(), (dir / "nan.json").string());
  }
  fs::remove_all(dir);
}

TEST(Config, RejectsInvalidValues) {
  TrainConfig c;
  c.lr = 0;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = TrainConfig{};
  c.micro_batches = 64;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = TrainConfig{};
  c.beta2 = 1.0;
  EXPECT_THROW(c.validate(), InvalidArgument);
  const std::vector<Token> shortstream(10, 1);
  EXPECT_THROW(Trainer::fresh(tiny_model(), tiny_train(), shortstream, shortstream, shortstream),
               InvalidArgument);
}
