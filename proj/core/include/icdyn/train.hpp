#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "icdyn/model.hpp"
#include "icdyn/quant.hpp"
#include "icdyn/rng.hpp"

namespace icdyn {

struct TrainConfig {
  double lr = 5e-5;
  double weight_decay = 0.0;
  int batch_size = 32;
  int micro_batches = 1;
  double clip_norm = 1.0;
  long total_steps = 50'000;
  long val_every = 1000;
  int window = 512;
  long virtual_epoch = 10'000;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
};

template <class Real>
struct OptState {
  ParamVector<Real> m;
  ParamVector<Real> v;
  long step = 0;

  static OptState zeros(std::size_t n) { return {ParamVector<Real>(n), ParamVector<Real>(n), 0}; }
};

struct AdamWReport {
  double grad_norm = 0.0;
  double clip_scale = 1.0;
};

// Global-norm clipping to clip_norm, then one AdamW update with bias
// correction and decoupled weight decay. Non-finite gradients throw
// TrainingAbort carrying the optimizer step index.
template <class Real>
AdamWReport adamw_step(ModelParams<Real>& params, std::span<const Real> grads, OptState<Real>& opt,
                       const TrainConfig& cfg);

// Window at a uniform random offset in [0, N - T - 1]; target is the input shifted by one.
TrainingPair sample_window(std::span<const Token> stream, int T, Rng& rng);
TrainingPair window_at(std::span<const Token> stream, int T, std::size_t offset);

struct ValidationEntry {
  long step = 0;
  double id_loss = 0.0;
  double ood_loss = 0.0;
};

struct TrainingRecord {
  long start_step = 0;              // first step this record covers
  std::vector<double> train_loss;   // loss before each update, step start_step+1...
  std::vector<ValidationEntry> validation;
  std::vector<std::string> checkpoints;  // file names inside the checkpoint directory

  void write_csv(const std::string& path) const;
  void write_json(const std::string& path, const TrainConfig& cfg) const;
};

struct TrainOptions {
  std::string checkpoint_dir;  // empty: no checkpoints
  int threads = 0;
  std::function<void(long step, double loss)> on_step;
};

class Trainer {
 public:
  Trainer(ModelParams<float> params, const TrainConfig& cfg, std::span<const Token> train_stream,
          std::span<const Token> val_id, std::span<const Token> val_ood, TrainOptions options = {});

  // Fresh model initialised from the "init" sub-stream of cfg.seed.
  static Trainer fresh(const ModelConfig& model, const TrainConfig& cfg,
                       std::span<const Token> train_stream, std::span<const Token> val_id,
                       std::span<const Token> val_ood, TrainOptions options = {});

  // Runs one optimisation step (plus validation/checkpoint when due).
  double step();
  void run();

  long steps_done() const { return opt_.step; }
  const ModelParams<float>& params() const { return params_; }
  const OptState<float>& opt_state() const { return opt_; }
  const TrainingRecord& record() const { return record_; }

  std::string save_checkpoint(const std::string& manifest_path) const;
  void resume(const std::string& manifest_path);

  ValidationEntry validate();

 private:
  std::vector<TrainingPair> batch_from(std::span<const Token> stream, Rng& rng) const;

  ModelParams<float> params_;
  TrainConfig cfg_;
  std::span<const Token> train_, val_id_, val_ood_;
  TrainOptions options_;
  OptState<float> opt_;
  Rng window_rng_;
  Rng validation_rng_;
  TrainingRecord record_;
  mutable std::string last_checkpoint_;
};

}  // namespace icdyn
