#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "icdyn/config.hpp"

namespace icdyn::cli {

enum ExitCode : int { kOk = 0, kConfigError = 1, kRuntimeFailure = 2, kNumericalAbort = 3 };

// Exclusive ownership of an output directory for the lifetime of the object.
class OutputLock {
 public:
  explicit OutputLock(const std::filesystem::path& dir);
  ~OutputLock();
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  std::filesystem::path path_;
};

// Per-invocation settings that are not part of the experiment config.
struct StageOptions {
  std::optional<std::string> checkpoint;  // generate / analyze; default checkpoints/final.json
  bool quiet = false;
};

// Artifact layout under the output directory.
namespace layout {
inline constexpr const char* kTrajectories = "trajectories";
inline constexpr const char* kDataset = "tokens/dataset.json";
inline constexpr const char* kCheckpoints = "checkpoints";
inline constexpr const char* kFinalCheckpoint = "checkpoints/final.json";
inline constexpr const char* kRecordCsv = "training/record.csv";
inline constexpr const char* kRecordJson = "training/record.json";
inline constexpr const char* kForecasts = "forecasts";
inline constexpr const char* kAnalysis = "analysis";
inline constexpr const char* kSummary = "summary.json";
inline constexpr const char* kFailure = "failure.json";
}  // namespace layout

void stage_simulate(const ExperimentConfig& cfg, const StageOptions& opts = {});
void stage_tokenize(const ExperimentConfig& cfg, const StageOptions& opts = {});
void stage_train(const ExperimentConfig& cfg, const StageOptions& opts = {});
void stage_generate(const ExperimentConfig& cfg, const StageOptions& opts = {});
void stage_analyze(const ExperimentConfig& cfg, const StageOptions& opts = {});
void stage_report(const ExperimentConfig& cfg, const StageOptions& opts = {});
// All of the above in order.
void stage_run(const ExperimentConfig& cfg, const StageOptions& opts = {});

// Takes the lock, runs `stage` ("simulate", ..., "run"), and converts
// exceptions into an exit code plus failure.json.
int execute(const std::string& stage, const ExperimentConfig& cfg, const StageOptions& opts = {});

}  // namespace icdyn::cli
