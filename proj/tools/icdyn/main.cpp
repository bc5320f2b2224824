#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "icdyn/config.hpp"
#include "icdyn/pipeline.hpp"

using namespace icdyn::cli;

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> threads;
  std::optional<long> steps;
  std::optional<long> horizon;
  std::optional<double> temperature;
  std::optional<std::string> checkpoint;
  bool quiet = false;
};

void common(CLI::App* sub, Flags& f) {
  sub->add_option("--config", f.config, "Experiment config (JSON); defaults apply when omitted");
  sub->add_option("--seed", f.seed, "Global seed (overrides config)");
  sub->add_option("--out", f.out, "Output directory (overrides config)");
  sub->add_option("--threads", f.threads, "Worker threads, 0 = all cores (overrides config)");
  sub->add_flag("--quiet", f.quiet, "No progress output");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"icdyn: in-context learning of chaotic dynamics, numerical lab"};
  app.require_subcommand(1);
  Flags f;

  auto* simulate = app.add_subcommand("simulate", "Integrate the configured trajectories");
  auto* tokenize = app.add_subcommand("tokenize", "Scale and quantize observed trajectories");
  auto* train = app.add_subcommand("train", "Train the transformer on the tokenized training stream");
  auto* gen = app.add_subcommand("generate", "Autoregressive forecasts from Test-ID contexts");
  auto* analyze = app.add_subcommand("analyze", "Operator, Markov-order, rollout and dimension diagnostics");
  auto* report = app.add_subcommand("report", "Re-emit summary.json from existing artifacts");
  auto* run = app.add_subcommand("run", "simulate, tokenize, train, generate, analyze, report");
  for (auto* sub : {simulate, tokenize, train, gen, analyze, report, run}) common(sub, f);
  for (auto* sub : {train, run}) sub->add_option("--steps", f.steps, "Total optimizer steps (overrides config)");
  for (auto* sub : {gen, run}) {
    sub->add_option("--horizon", f.horizon, "Forecast horizon H (overrides config)");
    sub->add_option("--temperature", f.temperature, "Sampling temperature, 0 = argmax (overrides config)");
  }
  for (auto* sub : {gen, analyze}) sub->add_option("--checkpoint", f.checkpoint, "Checkpoint manifest to load");

  if (argc > 1 && argv[1][0] != '-' && app.get_subcommand_no_throw(argv[1]) == nullptr) {
    std::cerr << "icdyn: unknown subcommand '" << argv[1] << "'\n\n" << app.help();
    return kConfigError;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "icdyn: " << e.what() << "\n\n" << app.help();
    return kConfigError;
  }

  ExperimentConfig cfg;
  try {
    cfg = f.config.empty() ? ExperimentConfig::defaults() : load_config(f.config);
    if (f.seed) cfg.seed = *f.seed;
    if (f.out) cfg.output_dir = *f.out;
    if (f.threads) cfg.threads = *f.threads;
    if (f.steps) cfg.train.total_steps = *f.steps;
    if (f.horizon) cfg.generation.horizon = *f.horizon;
    if (f.temperature) cfg.generation.temperature = *f.temperature;
    cfg.train.seed = cfg.seed;
    cfg.validate();
  } catch (const std::exception& e) {
    std::cerr << "icdyn: " << e.what() << '\n';
    return kConfigError;
  }

  StageOptions opts;
  opts.checkpoint = f.checkpoint;
  opts.quiet = f.quiet;
  return execute(app.get_subcommands().front()->get_name(), cfg, opts);
}
