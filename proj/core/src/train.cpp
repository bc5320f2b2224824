#include "icdyn/train.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>

#include <nlohmann/json.hpp>

#include "icdyn/checkpoint.hpp"
#include "icdyn/dataset.hpp"
#include "icdyn/errors.hpp"
#include "icdyn/serialization.hpp"

namespace icdyn {

void TrainConfig::validate() const {
  if (!(lr > 0.0) || weight_decay < 0.0 || batch_size < 1 || micro_batches < 1 ||
      !(clip_norm > 0.0) || total_steps < 0 || val_every < 1 || window < 1 || virtual_epoch < 1) {
    throw InvalidArgument("TrainConfig: values out of range");
  }
  if (micro_batches > batch_size) throw InvalidArgument("TrainConfig: micro_batches > batch_size");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && adam_eps > 0.0)) {
    throw InvalidArgument("TrainConfig: AdamW constants out of range");
  }
}

template <class Real>
AdamWReport adamw_step(ModelParams<Real>& params, std::span<const Real> grads, OptState<Real>& opt,
                       const TrainConfig& cfg) {
  const std::size_t n = params.values.size();
  if (grads.size() != n) throw InvalidArgument("adamw_step: gradient size mismatch");
  if (opt.m.size() != n || opt.v.size() != n) throw InvalidArgument("adamw_step: moment size mismatch");
  const long step = opt.step + 1;

  double sq = 0.0;
  for (Real g : grads) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) {
    throw TrainingAbort("adamw_step: non-finite gradient at step " + std::to_string(step), step, "");
  }
  AdamWReport report;
  report.grad_norm = norm;
  const bool clip = norm > cfg.clip_norm;
  report.clip_scale = clip ? cfg.clip_norm / norm : 1.0;
  const Real scale = static_cast<Real>(report.clip_scale);

  const Real b1 = static_cast<Real>(cfg.beta1), b2 = static_cast<Real>(cfg.beta2);
  const Real lr = static_cast<Real>(cfg.lr);
  const Real eps = static_cast<Real>(cfg.adam_eps);
  const Real decay = static_cast<Real>(1.0 - cfg.lr * cfg.weight_decay);
  const Real bc1 = static_cast<Real>(1.0 - std::pow(cfg.beta1, static_cast<double>(step)));
  const Real bc2 = static_cast<Real>(1.0 - std::pow(cfg.beta2, static_cast<double>(step)));
  for (std::size_t i = 0; i < n; ++i) {
    const Real g = clip ? grads[i] * scale : grads[i];
    opt.m[i] = b1 * opt.m[i] + (Real(1) - b1) * g;
    opt.v[i] = b2 * opt.v[i] + (Real(1) - b2) * g * g;
    const Real mhat = opt.m[i] / bc1;
    const Real vhat = opt.v[i] / bc2;
    Real& p = params.values[i];
    if (cfg.weight_decay != 0.0) p *= decay;
    p -= lr * mhat / (std::sqrt(vhat) + eps);
  }
  opt.step = step;
  return report;
}

template AdamWReport adamw_step<float>(ModelParams<float>&, std::span<const float>, OptState<float>&,
                                       const TrainConfig&);
template AdamWReport adamw_step<double>(ModelParams<double>&, std::span<const double>,
                                        OptState<double>&, const TrainConfig&);

TrainingPair window_at(std::span<const Token> stream, int T, std::size_t offset) {
  if (T < 1) throw InvalidArgument("window_at: T must be positive");
  if (offset + static_cast<std::size_t>(T) + 1 > stream.size()) {
    throw InvalidArgument("window_at: window exceeds stream");
  }
  TrainingPair p;
  p.input.assign(stream.begin() + static_cast<std::ptrdiff_t>(offset),
                 stream.begin() + static_cast<std::ptrdiff_t>(offset + T));
  p.target.assign(stream.begin() + static_cast<std::ptrdiff_t>(offset + 1),
                  stream.begin() + static_cast<std::ptrdiff_t>(offset + T + 1));
  return p;
}

TrainingPair sample_window(std::span<const Token> stream, int T, Rng& rng) {
  if (T < 1 || stream.size() < static_cast<std::size_t>(T) + 1) {
    throw InvalidArgument("sample_window: stream of length " + std::to_string(stream.size()) +
                          " is too short for window " + std::to_string(T));
  }
  const std::size_t offsets = stream.size() - static_cast<std::size_t>(T);
  return window_at(stream, T, static_cast<std::size_t>(rng.below(offsets)));
}

void TrainingRecord::write_csv(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write " + path);
  os << "step,split,loss\n" << std::setprecision(9);
  for (std::size_t i = 0; i < train_loss.size(); ++i) {
    os << start_step + static_cast<long>(i) + 1 << ",train," << train_loss[i] << '\n';
  }
  for (const auto& v : validation) {
    os << v.step << ",test_id," << v.id_loss << '\n';
    os << v.step << ",test_ood," << v.ood_loss << '\n';
  }
}

void TrainingRecord::write_json(const std::string& path, const TrainConfig& cfg) const {
  nlohmann::json j;
  j["start_step"] = start_step;
  j["train_loss"] = train_loss;
  auto val = nlohmann::json::array();
  for (const auto& v : validation) {
    const double epoch = static_cast<double>(v.step) * cfg.batch_size /
                         static_cast<double>(cfg.virtual_epoch);
    val.push_back({{"step", v.step}, {"epoch", epoch}, {"id_loss", v.id_loss}, {"ood_loss", v.ood_loss}});
  }
  j["validation"] = val;
  j["checkpoints"] = checkpoints;
  j["train_config"] = cfg;
  write_json_file(j, path);
}

Trainer::Trainer(ModelParams<float> params, const TrainConfig& cfg, std::span<const Token> train_stream,
                 std::span<const Token> val_id, std::span<const Token> val_ood, TrainOptions options)
    : params_(std::move(params)),
      cfg_(cfg),
      train_(train_stream),
      val_id_(val_id),
      val_ood_(val_ood),
      options_(std::move(options)),
      opt_(OptState<float>::zeros(params_.values.size())),
      window_rng_(Rng::derive(cfg.seed, "windows")),
      validation_rng_(Rng::derive(cfg.seed, "validation")) {
  cfg_.validate();
  if (cfg_.window > params_.config.block_size) {
    throw InvalidArgument("Trainer: window exceeds model block size");
  }
  const auto need = static_cast<std::size_t>(cfg_.window) + 1;
  if (train_.size() < need || val_id_.size() < need || val_ood_.size() < need) {
    throw InvalidArgument("Trainer: every stream needs at least window + 1 tokens");
  }
}

Trainer Trainer::fresh(const ModelConfig& model, const TrainConfig& cfg,
                       std::span<const Token> train_stream, std::span<const Token> val_id,
                       std::span<const Token> val_ood, TrainOptions options) {
  return Trainer(init_params<float>(model, Rng::derive_seed(cfg.seed, "init")), cfg, train_stream,
                 val_id, val_ood, std::move(options));
}

std::vector<TrainingPair> Trainer::batch_from(std::span<const Token> stream, Rng& rng) const {
  std::vector<TrainingPair> batch;
  batch.reserve(cfg_.batch_size);
  for (int b = 0; b < cfg_.batch_size; ++b) batch.push_back(sample_window(stream, cfg_.window, rng));
  return batch;
}

ValidationEntry Trainer::validate() {
  ValidationEntry e;
  e.step = opt_.step;
  e.id_loss = batch_loss<float>(batch_from(val_id_, validation_rng_), params_, options_.threads);
  e.ood_loss = batch_loss<float>(batch_from(val_ood_, validation_rng_), params_, options_.threads);
  return e;
}

double Trainer::step() {
  const long step_index = opt_.step + 1;
  const auto batch = batch_from(train_, window_rng_);
  auto result = loss_and_gradients<float>(batch, params_, cfg_.micro_batches, options_.threads);
  if (!std::isfinite(result.loss)) {
    throw TrainingAbort("train: non-finite loss at step " + std::to_string(step_index), step_index,
                        last_checkpoint_);
  }
  try {
    adamw_step<float>(params_, result.grads, opt_, cfg_);
  } catch (const TrainingAbort& e) {
    throw TrainingAbort(e.what(), e.step(), last_checkpoint_);
  }
  if (record_.train_loss.empty()) record_.start_step = step_index - 1;
  record_.train_loss.push_back(result.loss);
  if (options_.on_step) options_.on_step(step_index, result.loss);

  if (opt_.step % cfg_.val_every == 0) {
    const auto entry = validate();
    if (!std::isfinite(entry.id_loss) || !std::isfinite(entry.ood_loss)) {
      throw TrainingAbort("train: non-finite validation loss at step " + std::to_string(opt_.step),
                          opt_.step, last_checkpoint_);
    }
    record_.validation.push_back(entry);
    if (!options_.checkpoint_dir.empty()) {
      char name[32];
      std::snprintf(name, sizeof(name), "step_%08ld.json", opt_.step);
      const auto path = (std::filesystem::path(options_.checkpoint_dir) / name).string();
      save_checkpoint(path);
      record_.checkpoints.push_back(name);
    }
  }
  return result.loss;
}

void Trainer::run() {
  if (!options_.checkpoint_dir.empty()) std::filesystem::create_directories(options_.checkpoint_dir);
  while (opt_.step < cfg_.total_steps) step();
}

std::string Trainer::save_checkpoint(const std::string& manifest_path) const {
  Checkpoint ckpt{params_, opt_, cfg_, window_rng_.state(), validation_rng_.state()};
  icdyn::save_checkpoint(ckpt, manifest_path);
  last_checkpoint_ = manifest_path;
  return manifest_path;
}

void Trainer::resume(const std::string& manifest_path) {
  auto ckpt = load_checkpoint(manifest_path);
  if (!(ckpt.params.config == params_.config)) {
    throw InvalidArgument("Trainer::resume: checkpoint model config differs");
  }
  if (ckpt.opt.m.size() != ckpt.params.values.size()) {
    throw FormatError("Trainer::resume: checkpoint has no optimizer moments");
  }
  params_ = std::move(ckpt.params);
  opt_ = std::move(ckpt.opt);
  window_rng_.set_state(ckpt.window_rng_state);
  validation_rng_.set_state(ckpt.validation_rng_state);
  record_ = TrainingRecord{};
  record_.start_step = opt_.step;
  last_checkpoint_ = manifest_path;
}

}  // namespace icdyn
