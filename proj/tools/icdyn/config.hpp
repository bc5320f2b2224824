#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "icdyn/infer.hpp"
#include "icdyn/model.hpp"
#include "icdyn/quant.hpp"
#include "icdyn/train.hpp"

namespace icdyn::cli {

inline constexpr int kSchemaVersion = 1;

// Raised for anything wrong with the configuration; carries a
// "<file>:<line>: " prefix when the offending key can be located.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrajectoryConfig {
  std::string system = "lorenz63";
  int dimension = 0;       // lorenz96 only
  double dt = 0.0;         // 0: catalog default
  long samples = 20'000;   // kept after the transient
  long transient = 1'000;  // discarded leading samples
  int coordinate = 0;      // observed coordinate

  double t_end(double default_dt) const;
  double sample_dt(double default_dt) const { return dt > 0.0 ? dt : default_dt; }
};

struct GenerationBlock {
  long horizon = 20;
  double temperature = 0.0;
  int context_length = 128;
  int n_forecasts = 8;
};

struct AnalysisConfig {
  std::string stream = "test_ood";  // stream the model is probed on
  std::vector<int> k_values{1, 2};
  std::vector<int> K_candidates{16, 32, 64};
  std::vector<int> lags{0, 1, 2};
  std::vector<int> orders{1, 2, 3, 4};
  int samples_per_gram = 64;
  int n_modes = 4;
  double markov_smoothing = 0.01;
  long ground_truth_length = 100'000;
  int rollout_contexts = 32;
  long dimension_points = 2'000;
  long ulam_points = 20'000;
  bool operators = true;
  bool markov_order = true;
  bool lagged = true;
  bool rollout = true;
  bool dimension = true;
  bool ulam = true;
};

struct ExperimentConfig {
  int schema_version = kSchemaVersion;
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
  int threads = 0;
  TrajectoryConfig train_system;
  TrajectoryConfig test_id;
  TrajectoryConfig test_ood;
  QuantizerSpec quant;
  ModelConfig model;
  TrainConfig train;
  GenerationBlock generation;
  AnalysisConfig analysis;

  // Model and train defaults scaled down to a desk-sized run.
  static ExperimentConfig defaults();
  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& c);
// `source` names the file in error messages; `text` is used to locate keys.
ExperimentConfig from_json(const nlohmann::json& j, const std::string& source = "<config>",
                           const std::string& text = "");
ExperimentConfig load_config(const std::string& path);

}  // namespace icdyn::cli
