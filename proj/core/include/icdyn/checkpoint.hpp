#pragma once

#include <string>

#include "icdyn/model.hpp"
#include "icdyn/train.hpp"

namespace icdyn {

// Model weights, AdamW moments and both training RNG states. Restoring one
// reproduces the remaining loss trajectory bit for bit.
struct Checkpoint {
  ModelParams<float> params;
  OptState<float> opt;
  TrainConfig train;
  std::string window_rng_state;
  std::string validation_rng_state;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& manifest_path);
Checkpoint load_checkpoint(const std::string& manifest_path);

}  // namespace icdyn
