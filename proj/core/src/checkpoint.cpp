#include "icdyn/checkpoint.hpp"

#include "icdyn/dataset.hpp"
#include "icdyn/errors.hpp"
#include "icdyn/serialization.hpp"

namespace icdyn {

void save_checkpoint(const Checkpoint& ckpt, const std::string& manifest_path) {
  const ParamLayout layout(ckpt.params.config);
  Float32Bundle bundle;
  bundle.kind = "checkpoint";
  bundle.meta = {{"config", ckpt.params.config},
                 {"train_config", ckpt.train},
                 {"step", ckpt.opt.step},
                 {"rng_state", {{"windows", ckpt.window_rng_state},
                                {"validation", ckpt.validation_rng_state}}}};
  const bool with_moments = ckpt.opt.m.size() == layout.total();
  bundle.meta["has_moments"] = with_moments;
  auto slice = [](const ParamVector<float>& src, const TensorInfo& t) {
    return std::vector<float>(src.begin() + static_cast<std::ptrdiff_t>(t.offset),
                              src.begin() + static_cast<std::ptrdiff_t>(t.offset + t.size()));
  };
  for (const auto& t : layout.tensors()) {
    bundle.arrays.push_back({t.name, {t.rows, t.cols}, slice(ckpt.params.values, t)});
  }
  if (with_moments) {
    for (const auto& t : layout.tensors()) {
      bundle.arrays.push_back({"adam.m." + t.name, {t.rows, t.cols}, slice(ckpt.opt.m, t)});
    }
    for (const auto& t : layout.tensors()) {
      bundle.arrays.push_back({"adam.v." + t.name, {t.rows, t.cols}, slice(ckpt.opt.v, t)});
    }
  }
  write_bundle(bundle, manifest_path);
}

Checkpoint load_checkpoint(const std::string& manifest_path) {
  const auto bundle = read_bundle(manifest_path);
  if (bundle.kind != "checkpoint") throw FormatError(manifest_path + ": not a checkpoint");
  Checkpoint ckpt;
  try {
    ckpt.params.config = bundle.meta.at("config").get<ModelConfig>();
    ckpt.train = bundle.meta.at("train_config").get<TrainConfig>();
    ckpt.opt.step = bundle.meta.at("step").get<long>();
    ckpt.window_rng_state = bundle.meta.at("rng_state").at("windows").get<std::string>();
    ckpt.validation_rng_state = bundle.meta.at("rng_state").at("validation").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(manifest_path + ": " + e.what());
  }
  const ParamLayout layout(ckpt.params.config);
  auto gather = [&](const std::string& prefix, ParamVector<float>& dst) {
    dst.assign(layout.total(), 0.0f);
    for (const auto& t : layout.tensors()) {
      const auto& a = bundle.at(prefix + t.name);
      if (a.data.size() != t.size()) {
        throw FormatError(manifest_path + ": tensor '" + a.name + "' has the wrong size");
      }
      std::copy(a.data.begin(), a.data.end(), dst.begin() + static_cast<std::ptrdiff_t>(t.offset));
    }
  };
  gather("", ckpt.params.values);
  if (bundle.meta.value("has_moments", false)) {
    gather("adam.m.", ckpt.opt.m);
    gather("adam.v.", ckpt.opt.v);
  }
  return ckpt;
}

}  // namespace icdyn
