#include "icdyn/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "icdyn/dynamics.hpp"
#include "icdyn/errors.hpp"
#include "icdyn/serialization.hpp"

namespace icdyn::cli {

namespace {

using nlohmann::json;

// 1-based line of the first occurrence of "key" in the text, 0 if absent.
// Line of the first occurrence of `key`, searched after `parent` when given.
int locate_key(const std::string& text, const std::string& key, const std::string& parent = "") {
  std::size_t from = 0;
  if (!parent.empty()) {
    if (const auto p = text.find('"' + parent + '"'); p != std::string::npos) from = p + parent.size() + 2;
  }
  auto pos = text.find('"' + key + '"', from);
  if (pos == std::string::npos) pos = text.find('"' + key + '"');
  if (pos == std::string::npos) return 0;
  return 1 + static_cast<int>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(pos), '\n'));
}

int line_of_offset(const std::string& text, std::size_t offset) {
  offset = std::min(offset, text.size());
  return 1 + static_cast<int>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(offset), '\n'));
}

class Reader {
 public:
  Reader(std::string source, const std::string& text) : source_(std::move(source)), text_(text) {}

  [[noreturn]] void fail(const std::string& key, const std::string& message, const std::string& parent = "") const {
    const int line = key.empty() ? 0 : locate_key(text_, key, parent);
    std::string prefix = source_ + ":";
    if (line > 0) prefix += std::to_string(line) + ":";
    throw ConfigError(prefix + " " + message);
  }

  void known(const json& j, std::initializer_list<const char*> keys, const std::string& where) const {
    if (!j.is_object()) fail("", where + ": expected a JSON object");
    for (const auto& [key, value] : j.items()) {
      if (std::none_of(keys.begin(), keys.end(), [&](const char* k) { return key == k; })) {
        fail(key, where + ": unknown key '" + key + "'", where);
      }
    }
  }

  template <class T>
  void get(const json& j, const char* key, T& out, const std::string& where) const {
    if (!j.contains(key)) return;
    try {
      out = j.at(key).get<T>();
    } catch (const json::exception&) {
      fail(key, where + "." + key + ": wrong type", where == "config" ? "" : where);
    }
  }

  // Runs a core parser (serialization.hpp) and anchors its errors.
  template <class Fn>
  auto wrap(const char* key, const std::string& where, Fn&& fn) const {
    try {
      return fn();
    } catch (const InvalidArgument& e) {
      fail(key, where + ": " + e.what());
    } catch (const json::exception& e) {
      fail(key, where + ": " + e.what());
    }
  }

 private:
  std::string source_;
  const std::string& text_;
};

TrajectoryConfig read_trajectory(const Reader& r, const json& j, const char* where, TrajectoryConfig base) {
  r.known(j, {"system", "dimension", "dt", "samples", "transient", "coordinate"}, where);
  r.get(j, "system", base.system, where);
  r.get(j, "dimension", base.dimension, where);
  r.get(j, "dt", base.dt, where);
  r.get(j, "samples", base.samples, where);
  r.get(j, "transient", base.transient, where);
  r.get(j, "coordinate", base.coordinate, where);
  return base;
}

json trajectory_json(const TrajectoryConfig& t) {
  return {{"system", t.system}, {"dimension", t.dimension}, {"dt", t.dt},
          {"samples", t.samples}, {"transient", t.transient}, {"coordinate", t.coordinate}};
}

void check_trajectory(const TrajectoryConfig& t, const std::string& where) {
  const auto names = catalog_names();
  if (std::find(names.begin(), names.end(), t.system) == names.end()) {
    throw InvalidArgument(where + ".system: unknown system '" + t.system + "'");
  }
  const auto spec = make_system(t.system, t.dimension);
  if (t.dt < 0.0) throw InvalidArgument(where + ".dt: must be >= 0");
  if (t.samples < 2) throw InvalidArgument(where + ".samples: must be >= 2");
  if (t.transient < 0) throw InvalidArgument(where + ".transient: must be >= 0");
  if (t.coordinate < 0 || t.coordinate >= spec.dimension) {
    throw InvalidArgument(where + ".coordinate: out of range for " + t.system);
  }
}

}  // namespace

double TrajectoryConfig::t_end(double default_dt) const {
  return static_cast<double>(samples + transient - 1) * sample_dt(default_dt);
}

ExperimentConfig ExperimentConfig::defaults() {
  ExperimentConfig c;
  c.train_system = {"lorenz63", 0, 0.0, 20'000, 1'000, 0};
  c.test_id = c.train_system;
  c.test_id.samples = 5'000;
  c.test_ood = {"rossler", 0, 0.0, 5'000, 1'000, 0};
  c.model.d_model = 64;
  c.model.d_k = 32;
  c.model.block_size = 128;
  c.train.lr = 1e-3;
  c.train.batch_size = 16;
  c.train.total_steps = 3'000;
  c.train.val_every = 250;
  c.train.window = 128;
  return c;
}

void ExperimentConfig::validate() const {
  if (schema_version != kSchemaVersion) throw InvalidArgument("schema_version: unsupported version");
  if (output_dir.empty()) throw InvalidArgument("output_dir: must not be empty");
  if (threads < 0) throw InvalidArgument("threads: must be >= 0");
  check_trajectory(train_system, "train_system");
  check_trajectory(test_id, "test_id");
  check_trajectory(test_ood, "test_ood");
  if (test_id.system != train_system.system || test_id.dimension != train_system.dimension) {
    throw InvalidArgument("test_id.system: must match train_system");
  }
  model.validate();
  train.validate();
  if (quant.vocab_size() != model.vocab_size) throw InvalidArgument("quant.vocab_size: must equal model.vocab_size");
  if (train.window > model.block_size) throw InvalidArgument("train.window: exceeds model.block_size");
  const auto need = train.window + 1;
  if (train_system.samples < need || test_id.samples < need || test_ood.samples < need) {
    throw InvalidArgument("samples: every stream needs at least train.window + 1 samples");
  }
  if (generation.horizon < 0) throw InvalidArgument("generation.horizon: must be >= 0");
  if (!(generation.temperature >= 0.0)) throw InvalidArgument("generation.temperature: must be >= 0");
  if (generation.context_length < 1 || generation.context_length > model.block_size) {
    throw InvalidArgument("generation.context_length: must be in [1, model.block_size]");
  }
  if (generation.n_forecasts < 0) throw InvalidArgument("generation.n_forecasts: must be >= 0");
  const auto& a = analysis;
  if (a.stream != "test_id" && a.stream != "test_ood") {
    throw InvalidArgument("analysis.stream: must be test_id or test_ood");
  }
  auto positive = [](const std::vector<int>& v, const char* name, int lo) {
    if (std::any_of(v.begin(), v.end(), [&](int x) { return x < lo; })) {
      throw InvalidArgument(std::string("analysis.") + name + ": entries must be >= " + std::to_string(lo));
    }
  };
  positive(a.k_values, "k_values", 1);
  positive(a.K_candidates, "K_candidates", 1);
  positive(a.lags, "lags", 0);
  positive(a.orders, "orders", 1);
  for (int k : a.k_values) {
    if (k >= model.block_size) throw InvalidArgument("analysis.k_values: k must be below model.block_size");
  }
  if (a.samples_per_gram < 1) throw InvalidArgument("analysis.samples_per_gram: must be >= 1");
  if (a.n_modes < 1) throw InvalidArgument("analysis.n_modes: must be >= 1");
  if (!(a.markov_smoothing >= 0.0)) throw InvalidArgument("analysis.markov_smoothing: must be >= 0");
  if (a.ground_truth_length < 100) throw InvalidArgument("analysis.ground_truth_length: must be >= 100");
  if (a.rollout_contexts < 1) throw InvalidArgument("analysis.rollout_contexts: must be >= 1");
  if (a.dimension_points < 100) throw InvalidArgument("analysis.dimension_points: must be >= 100");
  if (a.ulam_points < 2) throw InvalidArgument("analysis.ulam_points: must be >= 2");
}

json to_json(const ExperimentConfig& c) {
  json train = c.train;
  train.erase("seed");
  const auto& a = c.analysis;
  return {{"schema_version", c.schema_version},
          {"seed", c.seed},
          {"output_dir", c.output_dir},
          {"threads", c.threads},
          {"train_system", trajectory_json(c.train_system)},
          {"test_id", trajectory_json(c.test_id)},
          {"test_ood", trajectory_json(c.test_ood)},
          {"quant", quantizer_to_json(c.quant)},
          {"model", c.model},
          {"train", train},
          {"generation",
           {{"horizon", c.generation.horizon},
            {"temperature", c.generation.temperature},
            {"context_length", c.generation.context_length},
            {"n_forecasts", c.generation.n_forecasts}}},
          {"analysis",
           {{"stream", a.stream},
            {"k_values", a.k_values},
            {"K_candidates", a.K_candidates},
            {"lags", a.lags},
            {"orders", a.orders},
            {"samples_per_gram", a.samples_per_gram},
            {"n_modes", a.n_modes},
            {"markov_smoothing", a.markov_smoothing},
            {"ground_truth_length", a.ground_truth_length},
            {"rollout_contexts", a.rollout_contexts},
            {"dimension_points", a.dimension_points},
            {"ulam_points", a.ulam_points},
            {"operators", a.operators},
            {"markov_order", a.markov_order},
            {"lagged", a.lagged},
            {"rollout", a.rollout},
            {"dimension", a.dimension},
            {"ulam", a.ulam}}}};
}

ExperimentConfig from_json(const json& j, const std::string& source, const std::string& text) {
  const Reader r(source, text);
  r.known(j, {"schema_version", "seed", "output_dir", "threads", "train_system", "test_id", "test_ood", "quant",
              "model", "train", "generation", "analysis"},
          "config");
  ExperimentConfig c = ExperimentConfig::defaults();
  if (!j.contains("schema_version")) r.fail("", "config: missing schema_version");
  r.get(j, "schema_version", c.schema_version, "config");
  if (c.schema_version != kSchemaVersion) {
    r.fail("schema_version", "schema_version: expected " + std::to_string(kSchemaVersion));
  }
  r.get(j, "seed", c.seed, "config");
  r.get(j, "output_dir", c.output_dir, "config");
  r.get(j, "threads", c.threads, "config");
  if (j.contains("train_system")) c.train_system = read_trajectory(r, j["train_system"], "train_system", c.train_system);
  {
    TrajectoryConfig base = c.test_id;
    base.system = c.train_system.system;
    base.dimension = c.train_system.dimension;
    base.dt = c.train_system.dt;
    base.coordinate = c.train_system.coordinate;
    c.test_id = j.contains("test_id") ? read_trajectory(r, j["test_id"], "test_id", base) : base;
  }
  if (j.contains("test_ood")) c.test_ood = read_trajectory(r, j["test_ood"], "test_ood", c.test_ood);
  if (j.contains("quant")) {
    r.known(j["quant"], {"vocab_size", "c_min", "c_max", "epsilon"}, "quant");
    c.quant = r.wrap("quant", "quant", [&] { return quantizer_from_json(j["quant"]); });
  }
  if (j.contains("model")) {
    json merged = c.model;
    if (!j["model"].is_object()) r.fail("model", "model: expected a JSON object");
    r.known(j["model"], {"vocab_size", "d_model", "d_k", "n_layers", "ffn_mult", "block_size", "alibi_slope"},
            "model");
    merged.update(j["model"]);
    c.model = r.wrap("model", "model", [&] { return merged.get<ModelConfig>(); });
  }
  if (j.contains("train")) {
    if (!j["train"].is_object()) r.fail("train", "train: expected a JSON object");
    if (j["train"].contains("seed")) r.fail("seed", "train.seed: not configurable; set the top-level seed", "train");
    r.known(j["train"], {"lr", "weight_decay", "batch_size", "micro_batches", "clip_norm", "total_steps", "val_every",
                         "window", "virtual_epoch", "beta1", "beta2", "adam_eps"},
            "train");
    json merged = c.train;
    merged.update(j["train"]);
    c.train = r.wrap("train", "train", [&] { return merged.get<TrainConfig>(); });
  }
  if (j.contains("generation")) {
    const auto& g = j["generation"];
    r.known(g, {"horizon", "temperature", "context_length", "n_forecasts"}, "generation");
    r.get(g, "horizon", c.generation.horizon, "generation");
    r.get(g, "temperature", c.generation.temperature, "generation");
    r.get(g, "context_length", c.generation.context_length, "generation");
    r.get(g, "n_forecasts", c.generation.n_forecasts, "generation");
  }
  if (j.contains("analysis")) {
    const auto& a = j["analysis"];
    auto& o = c.analysis;
    r.known(a, {"stream", "k_values", "K_candidates", "lags", "orders", "samples_per_gram", "n_modes",
                "markov_smoothing", "ground_truth_length", "rollout_contexts", "dimension_points", "ulam_points",
                "operators", "markov_order", "lagged", "rollout", "dimension", "ulam"},
            "analysis");
    r.get(a, "stream", o.stream, "analysis");
    r.get(a, "k_values", o.k_values, "analysis");
    r.get(a, "K_candidates", o.K_candidates, "analysis");
    r.get(a, "lags", o.lags, "analysis");
    r.get(a, "orders", o.orders, "analysis");
    r.get(a, "samples_per_gram", o.samples_per_gram, "analysis");
    r.get(a, "n_modes", o.n_modes, "analysis");
    r.get(a, "markov_smoothing", o.markov_smoothing, "analysis");
    r.get(a, "ground_truth_length", o.ground_truth_length, "analysis");
    r.get(a, "rollout_contexts", o.rollout_contexts, "analysis");
    r.get(a, "dimension_points", o.dimension_points, "analysis");
    r.get(a, "ulam_points", o.ulam_points, "analysis");
    r.get(a, "operators", o.operators, "analysis");
    r.get(a, "markov_order", o.markov_order, "analysis");
    r.get(a, "lagged", o.lagged, "analysis");
    r.get(a, "rollout", o.rollout, "analysis");
    r.get(a, "dimension", o.dimension, "analysis");
    r.get(a, "ulam", o.ulam, "analysis");
  }
  try {
    c.validate();
  } catch (const InvalidArgument& e) {
    const std::string msg = e.what();
    const auto colon = msg.find(':');
    std::string key = msg.substr(0, colon);
    if (const auto dot = key.rfind('.'); dot != std::string::npos) key = key.substr(dot + 1);
    r.fail(key, msg);
  }
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError(path + ": cannot open config file");
  std::stringstream ss;
  ss << is.rdbuf();
  const std::string text = ss.str();
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ":" + std::to_string(line_of_offset(text, e.byte)) + ": invalid JSON: " + e.what());
  }
  return from_json(j, path, text);
}

}  // namespace icdyn::cli
