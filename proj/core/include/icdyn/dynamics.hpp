#pragma once

#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "icdyn/numerics.hpp"

namespace icdyn {

class Rng;

// Vector field f: R^D -> R^D writing the derivative into `out`.
using VectorField = std::function<void(std::span<const double> y, std::span<double> out)>;

struct SystemSpec {
  std::string name;
  int dimension = 0;
  std::map<std::string, double> params;
  VectorField rhs;
  std::vector<double> default_y0;
  // Sampling interval giving roughly 20-40 samples per dominant oscillation.
  double default_dt = 0.0;

  void evaluate(std::span<const double> y, std::span<double> out) const;
};

// Catalog: "lorenz63", "rossler", "thomas", "lorenz96" (dimension 4..25).
// `dimension` is only consulted for lorenz96 (F = 8).
SystemSpec make_system(const std::string& name, int dimension = 0);
std::vector<std::string> catalog_names();

// (X_{i+1} - X_{i-2}) X_{i-1} - X_i + F, indices taken modulo D.
std::vector<double> lorenz96_rhs(std::span<const double> state, double forcing);

struct IntegratorTolerances {
  double rtol = 1e-9;
  double atol = 1e-11;
  long max_steps = 50'000'000;
};

struct Trajectory {
  Matrix states;  // N x D, rows ordered by time
  double dt_sample = 0.0;
  std::string system;
  long discarded_transient = 0;

  Eigen::Index size() const { return states.rows(); }
  Eigen::Index dimension() const { return states.cols(); }
};

struct ObservationSeries {
  std::vector<double> values;
  std::string source;
  int coordinate_index = 0;
};

// Dormand-Prince 5(4) with the order-4 continuous extension, resampled on the
// grid t_k = k * dt_sample for 0 <= t_k <= t_end.
Trajectory integrate(const SystemSpec& system, std::span<const double> y0, double t_end,
                     double dt_sample, const IntegratorTolerances& tol = {});

// Rows [discard, N) of column `coordinate`.
ObservationSeries observe(const Trajectory& trajectory, int coordinate, long discard);

// Drops the first `discard` rows and records the count.
Trajectory discard_transient(const Trajectory& trajectory, long discard);

// System default initial condition with N(0, scale^2) added to the first coordinate.
std::vector<double> perturbed_initial_condition(const SystemSpec& system, Rng& rng,
                                                double scale = 1e-2);

void write_trajectory_csv(const Trajectory& trajectory, const std::string& path);
Trajectory read_trajectory_csv(const std::string& path);

}  // namespace icdyn
