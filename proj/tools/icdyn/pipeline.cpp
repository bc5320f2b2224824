#include "icdyn/pipeline.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

#include <nlohmann/json.hpp>

#include "icdyn/checkpoint.hpp"
#include "icdyn/dataset.hpp"
#include "icdyn/dynamics.hpp"
#include "icdyn/embedding.hpp"
#include "icdyn/errors.hpp"
#include "icdyn/infer.hpp"
#include "icdyn/operator.hpp"
#include "icdyn/rng.hpp"
#include "icdyn/serialization.hpp"

namespace icdyn::cli {

namespace fs = std::filesystem;
using nlohmann::json;

OutputLock::OutputLock(const fs::path& dir) : path_(dir / ".lock") {
  fs::create_directories(dir);
  std::FILE* f = std::fopen(path_.c_str(), "wx");
  if (!f) {
    path_.clear();
    throw std::runtime_error("output directory " + dir.string() + " is locked by another process (" +
                             (dir / ".lock").string() + ")");
  }
  std::fclose(f);
}

OutputLock::~OutputLock() {
  if (path_.empty()) return;
  std::error_code ec;
  fs::remove(path_, ec);
}

namespace {

constexpr const char* kRoles[] = {"train", "test_id", "test_ood"};

fs::path out_dir(const ExperimentConfig& cfg) { return fs::path(cfg.output_dir); }

std::string path_in(const ExperimentConfig& cfg, const std::string& rel) { return (out_dir(cfg) / rel).string(); }

void ensure_parent(const std::string& path) {
  const auto parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
}

void log(const StageOptions& opts, const std::string& msg) {
  if (!opts.quiet) std::cerr << "[icdyn] " << msg << '\n';
}

const TrajectoryConfig& role_config(const ExperimentConfig& cfg, const std::string& role) {
  if (role == "train") return cfg.train_system;
  if (role == "test_id") return cfg.test_id;
  return cfg.test_ood;
}

std::string trajectory_path(const ExperimentConfig& cfg, const std::string& role) {
  return path_in(cfg, std::string(layout::kTrajectories) + "/" + role + ".csv");
}

Trajectory simulate_one(const TrajectoryConfig& t, Rng& rng) {
  const auto spec = make_system(t.system, t.dimension);
  const auto y0 = perturbed_initial_condition(spec, rng);
  const double dt = t.sample_dt(spec.default_dt);
  auto traj = integrate(spec, y0, t.t_end(spec.default_dt), dt);
  return discard_transient(traj, t.transient);
}

Trajectory load_trajectory(const ExperimentConfig& cfg, const std::string& role) {
  const auto path = trajectory_path(cfg, role);
  if (!fs::exists(path)) throw std::runtime_error("trajectory not found: " + path + " (run simulate first)");
  return read_trajectory_csv(path);
}

struct Dataset {
  std::vector<Token> train, test_id, test_ood;
  double scale_train = 1.0, scale_id = 1.0, scale_ood = 1.0;

  const std::vector<Token>& stream(const std::string& role) const {
    if (role == "train") return train;
    if (role == "test_id") return test_id;
    return test_ood;
  }
  double scale(const std::string& role) const {
    if (role == "train") return scale_train;
    if (role == "test_id") return scale_id;
    return scale_ood;
  }
};

Dataset load_dataset(const ExperimentConfig& cfg) {
  const auto path = path_in(cfg, layout::kDataset);
  if (!fs::exists(path)) throw std::runtime_error("token dataset not found: " + path + " (run tokenize first)");
  const auto bundle = read_bundle(path);
  Dataset d;
  auto tokens = [&](const char* name) {
    const auto& a = bundle.at(name);
    std::vector<Token> out(a.data.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<Token>(a.data[i]);
    return out;
  };
  d.train = tokens("train");
  d.test_id = tokens("test_id");
  d.test_ood = tokens("test_ood");
  d.scale_train = bundle.meta.at("scales").at("train").get<double>();
  d.scale_id = bundle.meta.at("scales").at("test_id").get<double>();
  d.scale_ood = bundle.meta.at("scales").at("test_ood").get<double>();
  return d;
}

std::string checkpoint_path(const ExperimentConfig& cfg, const StageOptions& opts) {
  const auto path = opts.checkpoint ? *opts.checkpoint : path_in(cfg, layout::kFinalCheckpoint);
  if (!fs::exists(path)) throw std::runtime_error("checkpoint not found: " + path);
  return path;
}

ModelParams<float> load_model(const ExperimentConfig& cfg, const StageOptions& opts) {
  auto ckpt = load_checkpoint(checkpoint_path(cfg, opts));
  if (!(ckpt.params.config == cfg.model)) {
    throw std::runtime_error("checkpoint model configuration differs from the config's model block");
  }
  return std::move(ckpt.params);
}

void write_config_copy(const ExperimentConfig& cfg) { write_json_file(to_json(cfg), path_in(cfg, "config.json")); }

json matrix_json(const Matrix& M) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < M.rows(); ++i) {
    rows.push_back(std::vector<double>(M.row(i).data(), M.row(i).data() + M.cols()));
  }
  return rows;
}

std::vector<double> uniform_over(std::size_t n) { return std::vector<double>(n, 1.0 / static_cast<double>(n)); }

// Runs one named analysis, recording the written files or the skip reason.
class AnalysisIndex {
 public:
  template <class Fn>
  void attempt(const std::string& name, bool enabled, Fn&& fn) {
    if (!enabled) {
      entries_[name] = {{"status", "skipped"}, {"reason", "disabled in config"}};
      return;
    }
    try {
      std::vector<std::string> files = fn();
      entries_[name] = {{"status", "ok"}, {"files", files}};
    } catch (const std::exception& e) {
      entries_[name] = {{"status", "skipped"}, {"reason", e.what()}};
    }
  }
  const json& entries() const { return entries_; }

 private:
  json entries_ = json::object();
};

}  // namespace

void stage_simulate(const ExperimentConfig& cfg, const StageOptions& opts) {
  write_config_copy(cfg);
  fs::create_directories(out_dir(cfg) / layout::kTrajectories);
  Rng rng = Rng::derive(cfg.seed, "integrate");
  for (const std::string role : kRoles) {
    const auto& t = role_config(cfg, role);
    log(opts, "simulate " + role + ": " + t.system);
    write_trajectory_csv(simulate_one(t, rng), trajectory_path(cfg, role));
  }
}

void stage_tokenize(const ExperimentConfig& cfg, const StageOptions& opts) {
  write_config_copy(cfg);
  Float32Bundle bundle;
  bundle.kind = "tokens";
  json scales = json::object();
  json sources = json::object();
  for (const std::string role : kRoles) {
    const auto& t = role_config(cfg, role);
    const auto series = observe(load_trajectory(cfg, role), t.coordinate, 0);
    const auto seq = encode(series.values, cfg.quant);
    scales[role] = seq.scale;
    sources[role] = {{"system", t.system}, {"coordinate", t.coordinate}, {"length", seq.size()}};
    NamedArray a{role, {static_cast<std::int64_t>(seq.size())}, std::vector<float>(seq.size())};
    for (std::size_t i = 0; i < seq.size(); ++i) a.data[i] = static_cast<float>(seq.tokens[i]);
    bundle.arrays.push_back(std::move(a));
    log(opts, "tokenize " + role + ": " + std::to_string(seq.size()) + " tokens");
  }
  bundle.meta = {{"quant", quantizer_to_json(cfg.quant)}, {"scales", scales}, {"sources", sources}};
  const auto path = path_in(cfg, layout::kDataset);
  ensure_parent(path);
  write_bundle(bundle, path);
}

void stage_train(const ExperimentConfig& cfg, const StageOptions& opts) {
  write_config_copy(cfg);
  const auto data = load_dataset(cfg);
  TrainConfig tc = cfg.train;
  tc.seed = cfg.seed;
  TrainOptions to;
  to.checkpoint_dir = path_in(cfg, layout::kCheckpoints);
  to.threads = cfg.threads;
  if (!opts.quiet) {
    const long every = std::max<long>(1, tc.total_steps / 20);
    to.on_step = [every](long step, double loss) {
      if (step % every == 0) std::cerr << "[icdyn] train step " << step << " loss " << loss << '\n';
    };
  }
  auto trainer = Trainer::fresh(cfg.model, tc, data.train, data.test_id, data.test_ood, to);
  ensure_parent(path_in(cfg, layout::kRecordCsv));
  try {
    trainer.run();
  } catch (...) {
    trainer.record().write_csv(path_in(cfg, layout::kRecordCsv));
    trainer.record().write_json(path_in(cfg, layout::kRecordJson), tc);
    throw;
  }
  trainer.save_checkpoint(path_in(cfg, layout::kFinalCheckpoint));
  trainer.record().write_csv(path_in(cfg, layout::kRecordCsv));
  trainer.record().write_json(path_in(cfg, layout::kRecordJson), tc);
}

void stage_generate(const ExperimentConfig& cfg, const StageOptions& opts) {
  write_config_copy(cfg);
  const auto params = load_model(cfg, opts);
  const auto data = load_dataset(cfg);
  const auto& tokens = data.test_id;
  const auto truth = observe(load_trajectory(cfg, "test_id"), cfg.test_id.coordinate, 0).values;
  const auto& g = cfg.generation;
  const auto C = static_cast<std::size_t>(g.context_length);
  const auto H = static_cast<std::size_t>(g.horizon);
  if (tokens.size() < C + H) throw std::runtime_error("generate: test_id stream shorter than context + horizon");

  fs::create_directories(out_dir(cfg) / layout::kForecasts);
  json forecasts = json::array();
  long wins = 0;
  const std::size_t span = tokens.size() - C - H;
  for (int i = 0; i < g.n_forecasts; ++i) {
    const std::size_t start = g.n_forecasts == 1 ? 0 : span * static_cast<std::size_t>(i) / static_cast<std::size_t>(g.n_forecasts - 1);
    TokenSequence ctx{std::vector<Token>(tokens.begin() + static_cast<std::ptrdiff_t>(start),
                                         tokens.begin() + static_cast<std::ptrdiff_t>(start + C)),
                      data.scale_id};
    GenerationConfig gen{g.horizon, g.temperature, g.context_length, cfg.seed + static_cast<std::uint64_t>(i)};
    const auto out = generate(params, ctx, gen);
    const auto values = decode(out, cfg.quant);
    char name[40];
    std::snprintf(name, sizeof(name), "forecast_%03d.csv", i);
    write_forecast_csv(out.tokens, values, (out_dir(cfg) / layout::kForecasts / name).string());

    json entry = {{"file", name}, {"start", start}, {"context_length", C}, {"horizon", H}};
    if (H > 0) {
      const auto base = mean_regression_baseline(
          std::span<const double>(truth.data() + start, C), g.horizon);
      double mse_model = 0.0, mse_base = 0.0;
      for (std::size_t h = 0; h < H; ++h) {
        const double y = truth[start + C + h];
        mse_model += (values[C + h] - y) * (values[C + h] - y);
        mse_base += (base[h] - y) * (base[h] - y);
      }
      mse_model /= static_cast<double>(H);
      mse_base /= static_cast<double>(H);
      wins += mse_model < mse_base ? 1 : 0;
      entry["mse_model"] = mse_model;
      entry["mse_mean_baseline"] = mse_base;
    }
    forecasts.push_back(entry);
  }
  json index = {{"stream", "test_id"},
                {"context_length", C},
                {"horizon", H},
                {"temperature", g.temperature},
                {"forecasts", forecasts}};
  if (H > 0 && g.n_forecasts > 0) index["fraction_beating_mean_baseline"] = static_cast<double>(wins) / g.n_forecasts;
  write_json_file(index, (out_dir(cfg) / layout::kForecasts / "index.json").string());
  log(opts, "generate: " + std::to_string(g.n_forecasts) + " forecasts");
}

void stage_analyze(const ExperimentConfig& cfg, const StageOptions& opts) {
  write_config_copy(cfg);
  const auto params = load_model(cfg, opts);
  const auto data = load_dataset(cfg);
  const auto& a = cfg.analysis;
  const auto& role = a.stream;
  const auto& tokens = data.stream(role);
  const auto& tcfg = role_config(cfg, role);
  const TransformerProvider model(params, cfg.model.block_size);
  const fs::path dir = out_dir(cfg) / layout::kAnalysis;
  fs::create_directories(dir);
  auto file = [&](const std::string& name) { return (dir / name).string(); };
  AnalysisIndex index;

  std::optional<ObservationSeries> truth_series;
  auto ground_truth = [&]() -> const ObservationSeries& {
    if (!truth_series) {
      TrajectoryConfig t = tcfg;
      t.samples = a.ground_truth_length;
      Rng rng = Rng::derive(Rng::derive_seed(cfg.seed, "integrate"), "ground_truth");
      truth_series = observe(simulate_one(t, rng), t.coordinate, 0);
    }
    return *truth_series;
  };

  for (int k : a.k_values) {
    const std::string ks = "k" + std::to_string(k);
    index.attempt("operator_" + ks, a.operators, [&] {
      log(opts, "analyze: operators " + ks);
      Rng rng = Rng::derive(Rng::derive_seed(cfg.seed, "sampling"), "operator_" + ks);
      const auto implied = recurrent_restriction(model_implied_operator(model, tokens, k, a.samples_per_gram, rng));
      const auto truth = recurrent_restriction(
          ground_truth_delay_operator(ground_truth(), cfg.quant, k, 1, data.scale(role)));
      const auto spec_model = transfer_spectrum(implied.P, a.n_modes);
      const auto spec_truth = transfer_spectrum(truth.P, a.n_modes);
      const auto aligned = align_distributions(truth.labels, spec_truth.modes[0], implied.labels, spec_model.modes[0]);
      const double kl_model = kl_divergence(aligned.p, aligned.q);
      const double kl_uniform = kl_divergence(aligned.p, uniform_over(aligned.labels.size()));

      write_operator_csv(implied, file("model_operator_" + ks + ".csv"));
      write_json_file(operator_labels_json(implied), file("model_operator_" + ks + "_states.json"));
      write_json_file(spectrum_json(spec_model, implied.labels), file("model_spectrum_" + ks + ".json"));
      write_operator_csv(truth, file("truth_operator_" + ks + ".csv"));
      write_json_file(operator_labels_json(truth), file("truth_operator_" + ks + "_states.json"));
      write_json_file(spectrum_json(spec_truth, truth.labels), file("truth_spectrum_" + ks + ".json"));
      json labels = json::array();
      for (const auto& l : aligned.labels) labels.push_back(label_string(l));
      write_json_file({{"k", k},
                       {"stream", role},
                       {"labels", labels},
                       {"pi_truth", aligned.p},
                       {"pi_model", aligned.q},
                       {"kl_truth_model", kl_model},
                       {"kl_truth_uniform", kl_uniform}},
                      file("stationary_" + ks + ".json"));
      return std::vector<std::string>{"model_operator_" + ks + ".csv", "model_operator_" + ks + "_states.json",
                                      "model_spectrum_" + ks + ".json", "truth_operator_" + ks + ".csv",
                                      "truth_operator_" + ks + "_states.json", "truth_spectrum_" + ks + ".json",
                                      "stationary_" + ks + ".json"};
    });
  }

  index.attempt("markov_order", a.markov_order, [&] {
    log(opts, "analyze: markov order");
    const auto r = best_markov_order(model, tokens, a.orders, a.markov_smoothing);
    write_json_file({{"stream", role},
                     {"orders", r.orders},
                     {"mean_kl", r.mean_kl},
                     {"best_order", r.best_order},
                     {"positions", r.positions},
                     {"smoothing", a.markov_smoothing}},
                    file("markov_order.json"));
    return std::vector<std::string>{"markov_order.json"};
  });

  for (int lag : a.lags) {
    const std::string name = "lagged_conditional_lag" + std::to_string(lag);
    index.attempt(name, a.lagged, [&] {
      log(opts, "analyze: " + name);
      const auto lc = lagged_conditional(model, tokens, lag);
      std::vector<bool> empty(lc.empty_rows.begin(), lc.empty_rows.end());
      write_json_file({{"lag", lag},
                       {"stream", role},
                       {"vocab_size", cfg.model.vocab_size},
                       {"rows", matrix_json(lc.P)},
                       {"occurrences", lc.occurrences},
                       {"empty_rows", empty}},
                      file(name + ".json"));
      write_matrix_csv(lc.P, file(name + ".csv"));
      return std::vector<std::string>{name + ".json", name + ".csv"};
    });
  }

  index.attempt("rollout", a.rollout, [&] {
    log(opts, "analyze: attention rollout");
    const auto T = static_cast<std::size_t>(cfg.model.block_size);
    if (tokens.size() < T) throw InvalidArgument("stream shorter than the block size");
    std::vector<std::vector<Token>> contexts;
    const std::size_t span = tokens.size() - T;
    const auto n = static_cast<std::size_t>(a.rollout_contexts);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t start = n == 1 ? 0 : span * i / (n - 1);
      contexts.emplace_back(tokens.begin() + static_cast<std::ptrdiff_t>(start),
                            tokens.begin() + static_cast<std::ptrdiff_t>(start + T));
    }
    const auto r = latent_dimension(params, contexts);
    write_json_file({{"stream", role}, {"T", T}, {"contexts", r.contexts}, {"d_latent", r.d_latent},
                     {"n_layers", cfg.model.n_layers}},
                    file("rollout.json"));
    write_matrix_csv(r.mean_rollout, file("rollout.csv"));
    return std::vector<std::string>{"rollout.json", "rollout.csv"};
  });

  index.attempt("dimension", a.dimension, [&] {
    log(opts, "analyze: manifold dimension");
    const auto traj = load_trajectory(cfg, role);
    const auto n = std::min<Eigen::Index>(traj.size(), a.dimension_points);
    Matrix pts(n, traj.dimension());
    for (Eigen::Index i = 0; i < n; ++i) pts.row(i) = traj.states.row(n == 1 ? 0 : i * (traj.size() - 1) / (n - 1));
    const auto d = gp_dimension(pts);
    auto j = dimension_json(d);
    j["stream"] = role;
    j["system"] = tcfg.system;
    j["points"] = n;
    j["takens_embedding_dim"] = EmbeddingSpec::sufficient_for(d.d_M).dim;
    write_json_file(j, file("dimension.json"));
    return std::vector<std::string>{"dimension.json"};
  });

  index.attempt("ulam", a.ulam, [&] {
    log(opts, "analyze: Ulam operator");
    const auto traj = load_trajectory(cfg, role);
    const auto n = std::min<Eigen::Index>(traj.size(), a.ulam_points);
    const Matrix pts = traj.states.topRows(n);
    const auto sel = select_partition_size(pts, a.K_candidates, 1, cfg.seed);
    const auto partition = kmeans_partition(pts, sel.best_K, cfg.seed);
    const auto ulam = recurrent_restriction(ulam_matrix(symbolize(pts, partition), sel.best_K, 1));
    const auto spec = transfer_spectrum(ulam.P, a.n_modes);
    auto j = spectrum_json(spec, ulam.labels);
    j["best_K"] = sel.best_K;
    j["candidates"] = sel.candidates;
    j["mean_row_entropy"] = sel.mean_entropy;
    j["centers"] = matrix_json(partition.centers);
    write_json_file(j, file("ulam_spectrum.json"));
    write_operator_csv(ulam, file("ulam_operator.csv"));
    return std::vector<std::string>{"ulam_spectrum.json", "ulam_operator.csv"};
  });

  write_json_file({{"stream", role}, {"analyses", index.entries()}}, file("index.json"));
}

void stage_report(const ExperimentConfig& cfg, const StageOptions& opts) {
  auto read_if = [&](const std::string& rel) -> std::optional<json> {
    const auto p = path_in(cfg, rel);
    if (!fs::exists(p)) return std::nullopt;
    return read_json_file(p);
  };
  json s = {{"id_loss", nullptr},        {"ood_loss", nullptr}, {"kl_pi0", nullptr},
            {"kl_pi0_uniform", nullptr}, {"d_latent", nullptr}, {"d_M", nullptr},
            {"best_markov_order", nullptr}};
  if (auto r = read_if(layout::kRecordJson); r && !r->at("validation").empty()) {
    s["id_loss"] = r->at("validation").back().at("id_loss");
    s["ood_loss"] = r->at("validation").back().at("ood_loss");
    s["final_step"] = r->at("validation").back().at("step");
  }
  if (!cfg.analysis.k_values.empty()) {
    const int k = cfg.analysis.k_values.back();
    if (auto st = read_if(std::string(layout::kAnalysis) + "/stationary_k" + std::to_string(k) + ".json")) {
      s["kl_pi0"] = st->at("kl_truth_model");
      s["kl_pi0_uniform"] = st->at("kl_truth_uniform");
      s["kl_pi0_k"] = k;
    }
  }
  if (auto r = read_if(std::string(layout::kAnalysis) + "/rollout.json")) s["d_latent"] = r->at("d_latent");
  if (auto d = read_if(std::string(layout::kAnalysis) + "/dimension.json")) s["d_M"] = d->at("d_M");
  if (auto m = read_if(std::string(layout::kAnalysis) + "/markov_order.json")) s["best_markov_order"] = m->at("best_order");
  if (auto f = read_if(std::string(layout::kForecasts) + "/index.json"); f && f->contains("fraction_beating_mean_baseline")) {
    s["forecast_fraction_beating_mean"] = f->at("fraction_beating_mean_baseline");
  }
  s["seed"] = cfg.seed;
  write_json_file(s, path_in(cfg, layout::kSummary));
  log(opts, "report: " + path_in(cfg, layout::kSummary));
}

void stage_run(const ExperimentConfig& cfg, const StageOptions& opts) {
  stage_simulate(cfg, opts);
  stage_tokenize(cfg, opts);
  stage_train(cfg, opts);
  stage_generate(cfg, opts);
  stage_analyze(cfg, opts);
  stage_report(cfg, opts);
}

int execute(const std::string& stage, const ExperimentConfig& cfg, const StageOptions& opts) {
  using StageFn = void (*)(const ExperimentConfig&, const StageOptions&);
  StageFn fn = nullptr;
  if (stage == "simulate") fn = stage_simulate;
  else if (stage == "tokenize") fn = stage_tokenize;
  else if (stage == "train") fn = stage_train;
  else if (stage == "generate") fn = stage_generate;
  else if (stage == "analyze") fn = stage_analyze;
  else if (stage == "report") fn = stage_report;
  else if (stage == "run") fn = stage_run;
  if (!fn) {
    std::cerr << "icdyn: unknown stage '" << stage << "'\n";
    return kConfigError;
  }

  std::optional<OutputLock> lock;
  try {
    lock.emplace(out_dir(cfg));
  } catch (const std::exception& e) {
    std::cerr << "icdyn: " << e.what() << '\n';
    return kRuntimeFailure;
  }
  int code = kOk;
  json failure = {{"stage", stage}};
  try {
    fn(cfg, opts);
    std::error_code ec;
    fs::remove(out_dir(cfg) / layout::kFailure, ec);
    return kOk;
  } catch (const TrainingAbort& e) {
    code = kNumericalAbort;
    failure["error"] = e.what();
    failure["step"] = e.step();
    failure["last_checkpoint"] = e.last_checkpoint();
  } catch (const NumericalError& e) {
    code = kNumericalAbort;
    failure["error"] = e.what();
  } catch (const ConfigError& e) {
    code = kConfigError;
    failure["error"] = e.what();
  } catch (const std::exception& e) {
    code = kRuntimeFailure;
    failure["error"] = e.what();
  }
  failure["exit_code"] = code;
  std::cerr << "icdyn " << stage << ": " << failure["error"].get<std::string>() << '\n';
  try {
    write_json_file(failure, path_in(cfg, layout::kFailure));
  } catch (const std::exception&) {
  }
  return code;
}

}  // namespace icdyn::cli
