#include "icdyn/dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "icdyn/errors.hpp"
#include "icdyn/rng.hpp"

namespace icdyn {

void SystemSpec::evaluate(std::span<const double> y, std::span<double> out) const {
  if (static_cast<int>(y.size()) != dimension || static_cast<int>(out.size()) != dimension) {
    throw InvalidArgument("SystemSpec::evaluate: state length " + std::to_string(y.size()) +
                          " does not match dimension " + std::to_string(dimension));
  }
  rhs(y, out);
}

std::vector<double> lorenz96_rhs(std::span<const double> state, double forcing) {
  const auto D = static_cast<long>(state.size());
  if (D < 4) throw InvalidArgument("lorenz96_rhs: dimension must be >= 4, got " + std::to_string(D));
  std::vector<double> out(D);
  for (long i = 0; i < D; ++i) {
    const double xp1 = state[(i + 1) % D];
    const double xm1 = state[(i + D - 1) % D];
    const double xm2 = state[(i + D - 2) % D];
    out[i] = (xp1 - xm2) * xm1 - state[i] + forcing;
  }
  return out;
}

std::vector<std::string> catalog_names() { return {"lorenz63", "rossler", "thomas", "lorenz96"}; }

SystemSpec make_system(const std::string& name, int dimension) {
  SystemSpec s;
  s.name = name;
  if (name == "lorenz63") {
    const double sigma = 10.0, rho = 28.0, beta = 8.0 / 3.0;
    s.dimension = 3;
    s.params = {{"sigma", sigma}, {"rho", rho}, {"beta", beta}};
    s.rhs = [=](std::span<const double> y, std::span<double> f) {
      f[0] = sigma * (y[1] - y[0]);
      f[1] = y[0] * (rho - y[2]) - y[1];
      f[2] = y[0] * y[1] - beta * y[2];
    };
    s.default_y0 = {1.0, 1.0, 1.0};
    s.default_dt = 0.03;
  } else if (name == "rossler") {
    const double a = 0.2, b = 0.2, c = 5.7;
    s.dimension = 3;
    s.params = {{"a", a}, {"b", b}, {"c", c}};
    s.rhs = [=](std::span<const double> y, std::span<double> f) {
      f[0] = -y[1] - y[2];
      f[1] = y[0] + a * y[1];
      f[2] = b + y[2] * (y[0] - c);
    };
    s.default_y0 = {1.0, 1.0, 0.0};
    s.default_dt = 0.2;
  } else if (name == "thomas") {
    const double b = 0.208;
    s.dimension = 3;
    s.params = {{"b", b}};
    s.rhs = [=](std::span<const double> y, std::span<double> f) {
      f[0] = std::sin(y[1]) - b * y[0];
      f[1] = std::sin(y[2]) - b * y[1];
      f[2] = std::sin(y[0]) - b * y[2];
    };
    s.default_y0 = {0.1, 0.0, 0.0};
    s.default_dt = 1.0;
  } else if (name == "lorenz96") {
    if (dimension < 4 || dimension > 25) {
      throw InvalidArgument("make_system: lorenz96 dimension must be in [4, 25], got " +
                            std::to_string(dimension));
    }
    const double F = 8.0;
    s.name = "lorenz96";
    s.dimension = dimension;
    s.params = {{"F", F}};
    s.rhs = [F](std::span<const double> y, std::span<double> f) {
      const auto D = static_cast<long>(y.size());
      for (long i = 0; i < D; ++i) {
        f[i] = (y[(i + 1) % D] - y[(i + D - 2) % D]) * y[(i + D - 1) % D] - y[i] + F;
      }
    };
    s.default_y0.assign(dimension, F);
    s.default_dt = 0.05;
  } else {
    throw InvalidArgument("make_system: unknown system '" + name + "'");
  }
  return s;
}

std::vector<double> perturbed_initial_condition(const SystemSpec& system, Rng& rng, double scale) {
  std::vector<double> y0 = system.default_y0;
  if (!y0.empty()) y0[0] += scale * rng.normal();
  return y0;
}

namespace {

// Dormand-Prince 5(4) tableau.
constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
constexpr double a21 = 1.0 / 5;
constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                 a54 = -212.0 / 729;
constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                 a65 = -5103.0 / 18656;
constexpr double a71 = 35.0 / 384, a73 = 500.0 / 1113, a74 = 125.0 / 192, a75 = -2187.0 / 6784,
                 a76 = 11.0 / 84;
constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200,
                 e6 = 22.0 / 525, e7 = -1.0 / 40;
// Continuous extension coefficients.
constexpr double d1 = -12715105075.0 / 11282082432, d3 = 87487479700.0 / 32700410799,
                 d4 = -10690763975.0 / 1880347072, d5 = 701980252875.0 / 199316789632,
                 d6 = -1453857185.0 / 822651844, d7 = 69997945.0 / 29380423;

using State = std::vector<double>;

bool all_finite(const State& y) {
  return std::all_of(y.begin(), y.end(), [](double v) { return std::isfinite(v); });
}

double error_norm(const State& err, const State& y0, const State& y1, const IntegratorTolerances& tol) {
  double acc = 0.0;
  for (std::size_t i = 0; i < err.size(); ++i) {
    const double sc = tol.atol + tol.rtol * std::max(std::abs(y0[i]), std::abs(y1[i]));
    const double r = err[i] / sc;
    acc += r * r;
  }
  return std::sqrt(acc / static_cast<double>(err.size()));
}

std::string time_string(double t) {
  std::ostringstream os;
  os << std::setprecision(10) << t;
  return os.str();
}

}  // namespace

Trajectory integrate(const SystemSpec& system, std::span<const double> y0_in, double t_end,
                     double dt_sample, const IntegratorTolerances& tol) {
  const int D = system.dimension;
  if (D < 1) throw InvalidArgument("integrate: system dimension must be >= 1");
  if (static_cast<int>(y0_in.size()) != D) throw InvalidArgument("integrate: y0 length mismatch");
  if (!(t_end > 0.0)) throw InvalidArgument("integrate: t_end must be positive");
  if (!(dt_sample > 0.0)) throw InvalidArgument("integrate: dt_sample must be positive");
  State y(y0_in.begin(), y0_in.end());
  if (!all_finite(y)) throw InvalidArgument("integrate: y0 has non-finite entries");

  const long n_samples = static_cast<long>(std::floor(t_end / dt_sample + 1e-9)) + 1;
  if (n_samples < 2) throw InvalidArgument("integrate: t_end shorter than one sampling interval");

  Trajectory traj;
  traj.states.resize(n_samples, D);
  traj.dt_sample = dt_sample;
  traj.system = system.name;
  for (int j = 0; j < D; ++j) traj.states(0, j) = y[j];

  auto f = [&](const State& x, State& out) { system.rhs(x, out); };

  State k1(D), k2(D), k3(D), k4(D), k5(D), k6(D), k7(D), tmp(D), y1(D), err(D);
  State r1(D), r2(D), r3(D), r4(D), r5(D);
  f(y, k1);

  // Initial step following Hairer's heuristic.
  double h;
  {
    double d0 = 0.0, d1n = 0.0;
    for (int i = 0; i < D; ++i) {
      const double sc = tol.atol + tol.rtol * std::abs(y[i]);
      d0 += (y[i] / sc) * (y[i] / sc);
      d1n += (k1[i] / sc) * (k1[i] / sc);
    }
    d0 = std::sqrt(d0 / D);
    d1n = std::sqrt(d1n / D);
    h = (d0 < 1e-5 || d1n < 1e-5) ? 1e-6 : 0.01 * d0 / d1n;
    h = std::min(h, dt_sample);
  }

  const double t_final = static_cast<double>(n_samples - 1) * dt_sample;
  double t = 0.0;
  long next = 1;
  long steps = 0;
  while (next < n_samples) {
    if (++steps > tol.max_steps) {
      throw IntegrationBlowup("integrate: step budget exhausted at t=" + time_string(t), t);
    }
    if (h < 1e-14 * std::max(1.0, std::abs(t))) {
      throw IntegrationBlowup("integrate: step size underflow at t=" + time_string(t), t);
    }
    if (t + h > t_final) h = t_final - t;
    for (int i = 0; i < D; ++i) tmp[i] = y[i] + h * a21 * k1[i];
    f(tmp, k2);
    for (int i = 0; i < D; ++i) tmp[i] = y[i] + h * (a31 * k1[i] + a32 * k2[i]);
    f(tmp, k3);
    for (int i = 0; i < D; ++i) tmp[i] = y[i] + h * (a41 * k1[i] + a42 * k2[i] + a43 * k3[i]);
    f(tmp, k4);
    for (int i = 0; i < D; ++i) {
      tmp[i] = y[i] + h * (a51 * k1[i] + a52 * k2[i] + a53 * k3[i] + a54 * k4[i]);
    }
    f(tmp, k5);
    for (int i = 0; i < D; ++i) {
      tmp[i] = y[i] + h * (a61 * k1[i] + a62 * k2[i] + a63 * k3[i] + a64 * k4[i] + a65 * k5[i]);
    }
    f(tmp, k6);
    for (int i = 0; i < D; ++i) {
      y1[i] = y[i] + h * (a71 * k1[i] + a73 * k3[i] + a74 * k4[i] + a75 * k5[i] + a76 * k6[i]);
    }
    f(y1, k7);
    for (int i = 0; i < D; ++i) {
      err[i] = h * (e1 * k1[i] + e3 * k3[i] + e4 * k4[i] + e5 * k5[i] + e6 * k6[i] + e7 * k7[i]);
    }
    if (!all_finite(y1) || !all_finite(k7)) {
      if (h < 1e-12 * std::max(1.0, std::abs(t))) {
        throw IntegrationBlowup("integrate: non-finite state at t=" + time_string(t), t);
      }
      h *= 0.1;
      continue;
    }
    const double en = error_norm(err, y, y1, tol);
    if (!std::isfinite(en)) {
      throw IntegrationBlowup("integrate: non-finite error estimate at t=" + time_string(t), t);
    }
    if (en <= 1.0) {
      const double t_new = t + h;
      if (next < n_samples && static_cast<double>(next) * dt_sample <= t_new + 1e-12 * dt_sample) {
        for (int i = 0; i < D; ++i) {
          const double ydiff = y1[i] - y[i];
          const double bspl = h * k1[i] - ydiff;
          r1[i] = y[i];
          r2[i] = ydiff;
          r3[i] = bspl;
          r4[i] = ydiff - h * k7[i] - bspl;
          r5[i] = h * (d1 * k1[i] + d3 * k3[i] + d4 * k4[i] + d5 * k5[i] + d6 * k6[i] + d7 * k7[i]);
        }
        while (next < n_samples &&
               static_cast<double>(next) * dt_sample <= t_new + 1e-12 * dt_sample) {
          const double theta = std::clamp((static_cast<double>(next) * dt_sample - t) / h, 0.0, 1.0);
          const double theta1 = 1.0 - theta;
          for (int i = 0; i < D; ++i) {
            traj.states(next, i) =
                r1[i] + theta * (r2[i] + theta1 * (r3[i] + theta * (r4[i] + theta1 * r5[i])));
          }
          ++next;
        }
      }
      t = t_new;
      y.swap(y1);
      k1.swap(k7);  // first-same-as-last
      const double fac = en == 0.0 ? 10.0 : std::clamp(0.9 * std::pow(en, -0.2), 0.2, 10.0);
      h *= fac;
    } else {
      h *= std::clamp(0.9 * std::pow(en, -0.2), 0.2, 1.0);
    }
  }
  return traj;
}

ObservationSeries observe(const Trajectory& trajectory, int coordinate, long discard) {
  if (coordinate < 0 || coordinate >= trajectory.dimension()) {
    throw InvalidArgument("observe: coordinate " + std::to_string(coordinate) +
                          " out of range for dimension " + std::to_string(trajectory.dimension()));
  }
  if (discard < 0 || discard >= trajectory.size()) {
    throw InvalidArgument("observe: discard " + std::to_string(discard) +
                          " leaves no samples of " + std::to_string(trajectory.size()));
  }
  ObservationSeries out;
  out.source = trajectory.system;
  out.coordinate_index = coordinate;
  out.values.reserve(trajectory.size() - discard);
  for (Eigen::Index r = discard; r < trajectory.size(); ++r) {
    out.values.push_back(trajectory.states(r, coordinate));
  }
  return out;
}

Trajectory discard_transient(const Trajectory& trajectory, long discard) {
  if (discard < 0 || discard >= trajectory.size() - 1) {
    throw InvalidArgument("discard_transient: discard must leave at least two samples");
  }
  Trajectory out = trajectory;
  out.states = trajectory.states.bottomRows(trajectory.size() - discard);
  out.discarded_transient = trajectory.discarded_transient + discard;
  return out;
}

void write_trajectory_csv(const Trajectory& trajectory, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw FormatError("write_trajectory_csv: cannot open " + path);
  os << "t";
  for (Eigen::Index j = 0; j < trajectory.dimension(); ++j) os << ",y" << j;
  os << '\n';
  os << std::setprecision(17);
  for (Eigen::Index r = 0; r < trajectory.size(); ++r) {
    os << static_cast<double>(r + trajectory.discarded_transient) * trajectory.dt_sample;
    for (Eigen::Index j = 0; j < trajectory.dimension(); ++j) os << ',' << trajectory.states(r, j);
    os << '\n';
  }
}

Trajectory read_trajectory_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("read_trajectory_csv: cannot open " + path);
  std::string line;
  if (!std::getline(is, line) || line.rfind("t", 0) != 0) {
    throw FormatError("read_trajectory_csv: missing header in " + path);
  }
  const auto D = static_cast<Eigen::Index>(std::count(line.begin(), line.end(), ','));
  std::vector<double> times, values;
  long lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    Eigen::Index col = 0;
    while (std::getline(ls, cell, ',')) {
      char* end = nullptr;
      const double v = std::strtod(cell.c_str(), &end);
      if (end == cell.c_str()) {
        throw FormatError(path + ":" + std::to_string(lineno) + ": malformed number '" + cell + "'");
      }
      (col == 0 ? times : values).push_back(v);
      ++col;
    }
    if (col != D + 1) throw FormatError(path + ":" + std::to_string(lineno) + ": wrong column count");
  }
  Trajectory out;
  const auto N = static_cast<Eigen::Index>(times.size());
  if (N < 2) throw FormatError("read_trajectory_csv: fewer than two rows in " + path);
  out.states = Eigen::Map<Matrix>(values.data(), N, D);
  out.dt_sample = times[1] - times[0];
  out.discarded_transient = std::lround(times[0] / out.dt_sample);
  return out;
}

}  // namespace icdyn
