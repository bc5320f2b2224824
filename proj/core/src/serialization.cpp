#include "icdyn/serialization.hpp"

#include <algorithm>
#include <cstring>

#include "icdyn/errors.hpp"

namespace icdyn {

void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                         const std::string& context) {
  if (!j.is_object()) throw InvalidArgument(context + ": expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    const bool known = std::any_of(allowed.begin(), allowed.end(),
                                   [&](const char* a) { return key == a; });
    if (!known) throw InvalidArgument(context + ": unknown key '" + key + "'");
  }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},       {"d_k", c.d_k},
       {"n_layers", c.n_layers},     {"ffn_mult", c.ffn_mult},     {"block_size", c.block_size},
       {"alibi_slope", c.alibi_slope}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  reject_unknown_keys(j, {"vocab_size", "d_model", "d_k", "n_layers", "ffn_mult", "block_size",
                          "alibi_slope"},
                      "model");
  const ModelConfig d;
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.d_model = j.value("d_model", d.d_model);
  c.d_k = j.value("d_k", d.d_k);
  c.n_layers = j.value("n_layers", d.n_layers);
  c.ffn_mult = j.value("ffn_mult", d.ffn_mult);
  c.block_size = j.value("block_size", d.block_size);
  c.alibi_slope = j.value("alibi_slope", d.alibi_slope);
  c.validate();
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lr", c.lr},
       {"weight_decay", c.weight_decay},
       {"batch_size", c.batch_size},
       {"micro_batches", c.micro_batches},
       {"clip_norm", c.clip_norm},
       {"total_steps", c.total_steps},
       {"val_every", c.val_every},
       {"window", c.window},
       {"virtual_epoch", c.virtual_epoch},
       {"seed", c.seed},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"adam_eps", c.adam_eps}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  reject_unknown_keys(j, {"lr", "weight_decay", "batch_size", "micro_batches", "clip_norm",
                          "total_steps", "val_every", "window", "virtual_epoch", "seed", "beta1",
                          "beta2", "adam_eps"},
                      "train");
  const TrainConfig d;
  c.lr = j.value("lr", d.lr);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.micro_batches = j.value("micro_batches", d.micro_batches);
  c.clip_norm = j.value("clip_norm", d.clip_norm);
  c.total_steps = j.value("total_steps", d.total_steps);
  c.val_every = j.value("val_every", d.val_every);
  c.window = j.value("window", d.window);
  c.virtual_epoch = j.value("virtual_epoch", d.virtual_epoch);
  c.seed = j.value("seed", d.seed);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.adam_eps = j.value("adam_eps", d.adam_eps);
  c.validate();
}

nlohmann::json quantizer_to_json(const QuantizerSpec& q) {
  return {{"vocab_size", q.vocab_size()},
          {"c_min", q.c_min()},
          {"c_max", q.c_max()},
          {"epsilon", q.epsilon()}};
}

QuantizerSpec quantizer_from_json(const nlohmann::json& j) {
  reject_unknown_keys(j, {"vocab_size", "c_min", "c_max", "epsilon"}, "quant");
  return QuantizerSpec(j.value("vocab_size", 100), j.value("c_min", -15.0), j.value("c_max", 15.0),
                       j.value("epsilon", 1e-8));
}

}  // namespace icdyn
