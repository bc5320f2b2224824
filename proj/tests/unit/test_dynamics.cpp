#include <gtest/gtest.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <vector>

#include <boost/numeric/odeint.hpp>

#include "icdyn/dynamics.hpp"
#include "icdyn/errors.hpp"
#include "icdyn/rng.hpp"

using namespace icdyn;

namespace {

SystemSpec custom(int D, VectorField f) {
  SystemSpec s;
  s.name = "custom";
  s.dimension = D;
  s.rhs = std::move(f);
  s.default_y0.assign(D, 0.0);
  s.default_dt = 0.1;
  return s;
}

}  // namespace

TEST(Lorenz96Rhs, ConstantStateIsFixedPoint) {
  const auto out = lorenz96_rhs(std::vector<double>(5, 8.0), 8.0);
  for (double x : out) EXPECT_EQ(x, 0.0);
}

TEST(Lorenz96Rhs, HandEvaluated) {
  const auto out = lorenz96_rhs(std::vector<double>{1, 2, 3, 4}, 8.0);
  EXPECT_EQ(out, (std::vector<double>{3, 5, 11, 1}));
}

TEST(Lorenz96Rhs, ZeroStateLeavesForcing) {
  EXPECT_EQ(lorenz96_rhs(std::vector<double>(4, 0.0), 8.0), std::vector<double>(4, 8.0));
}

TEST(Lorenz96Rhs, RejectsSmallDimension) {
  EXPECT_THROW(lorenz96_rhs(std::vector<double>{1, 2, 3}, 8.0), InvalidArgument);
  EXPECT_THROW(make_system("lorenz96", 3), InvalidArgument);
  EXPECT_THROW(make_system("lorenz96", 26), InvalidArgument);
}

TEST(Lorenz96Rhs, CyclicEquivariance) {
  Rng rng(4);
  for (int D : {4, 7, 12}) {
    std::vector<double> x(D);
    for (double& v : x) v = rng.normal() * 3.0;
    const auto fx = lorenz96_rhs(x, 8.0);
    std::vector<double> rx(D);
    for (int i = 0; i < D; ++i) rx[(i + 1) % D] = x[i];
    const auto frx = lorenz96_rhs(rx, 8.0);
    for (int i = 0; i < D; ++i) EXPECT_DOUBLE_EQ(frx[(i + 1) % D], fx[i]);
  }
}

TEST(Catalog, LookupIsTotalOverDocumentedNames) {
  for (const auto& name : catalog_names()) {
    const auto s = make_system(name, 6);
    EXPECT_GE(s.dimension, 1);
    EXPECT_EQ(static_cast<int>(s.default_y0.size()), s.dimension);
    EXPECT_GT(s.default_dt, 0.0);
    std::vector<double> out(s.dimension);
    s.evaluate(s.default_y0, out);
    for (double v : out) EXPECT_TRUE(std::isfinite(v));
  }
  EXPECT_THROW(make_system("duffing"), InvalidArgument);
  EXPECT_EQ(make_system("lorenz96", 9).dimension, 9);
  EXPECT_EQ(make_system("lorenz96", 9).params.at("F"), 8.0);
}

TEST(Integrate, ZeroFieldKeepsState) {
  const auto s = custom(2, [](std::span<const double>, std::span<double> out) { out[0] = out[1] = 0.0; });
  const std::vector<double> y0{1, 2};
  const auto traj = integrate(s, y0, 1.0, 0.25);
  ASSERT_EQ(traj.size(), 5);
  for (Eigen::Index i = 0; i < traj.size(); ++i) {
    EXPECT_EQ(traj.states(i, 0), 1.0);
    EXPECT_EQ(traj.states(i, 1), 2.0);
  }
}

TEST(Integrate, HarmonicOscillatorClosedForm) {
  const auto s = custom(2, [](std::span<const double> y, std::span<double> out) {
    out[0] = y[1];
    out[1] = -y[0];
  });
  const double T = 2.0 * std::numbers::pi;
  const auto traj = integrate(s, std::vector<double>{1, 0}, T, T / 64);
  ASSERT_EQ(traj.size(), 65);
  for (Eigen::Index k = 0; k < traj.size(); ++k) {
    const double t = static_cast<double>(k) * T / 64;
    EXPECT_NEAR(traj.states(k, 0), std::cos(t), 1e-6);
    EXPECT_NEAR(traj.states(k, 1), -std::sin(t), 1e-6);
  }
  EXPECT_NEAR(traj.states(64, 0), 1.0, 1e-6);
  EXPECT_NEAR(traj.states(64, 1), 0.0, 1e-6);
}

TEST(Integrate, SampleGridCount) {
  const auto s = make_system("rossler");
  const auto traj = integrate(s, s.default_y0, 10.0, 0.2);
  EXPECT_EQ(traj.size(), 51);
  EXPECT_EQ(traj.dt_sample, 0.2);
}

// Independent oracle: Boost.Odeint Runge-Kutta-Fehlberg 7(8) at tight tolerance.
TEST(Integrate, MatchesOdeintOnLorenz63) {
  const auto s = make_system("lorenz63");
  using State = std::vector<double>;
  const double dt = 0.05, t_end = 3.0;
  const auto traj = integrate(s, s.default_y0, t_end, dt);

  State y = s.default_y0;
  auto rhs = [&](const State& x, State& dx, double) {
    dx.resize(3);
    s.evaluate(x, dx);
  };
  namespace odeint = boost::numeric::odeint;
  auto stepper = odeint::make_controlled(1e-13, 1e-13, odeint::runge_kutta_fehlberg78<State>());
  std::vector<double> times(static_cast<std::size_t>(traj.size()));
  for (std::size_t k = 0; k < times.size(); ++k) times[k] = static_cast<double>(k) * dt;
  std::vector<State> samples;
  odeint::integrate_times(stepper, rhs, y, times.begin(), times.end(), dt,
                          [&](const State& x, double) { samples.push_back(x); });
  ASSERT_EQ(static_cast<Eigen::Index>(samples.size()), traj.size());
  for (std::size_t k = 0; k < samples.size(); ++k) {
    for (int d = 0; d < 3; ++d) {
      EXPECT_NEAR(traj.states(static_cast<Eigen::Index>(k), d), samples[k][d], 1e-6) << "sample " << k;
    }
  }
}

TEST(Integrate, Lorenz96LongRunStaysBounded) {
  const auto s = make_system("lorenz96", 5);
  auto y0 = s.default_y0;
  y0[0] += 1e-2;
  const auto traj = integrate(s, y0, 1000.0, 0.05);
  EXPECT_TRUE(traj.states.allFinite());
  EXPECT_LT(traj.states.cwiseAbs().maxCoeff(), 50.0);
  // Short-horizon agreement with odeint. The start sits next to the unstable
  // equilibrium, so errors grow fast and both sides use tight tolerances.
  IntegratorTolerances tight;
  tight.rtol = 1e-13;
  tight.atol = 1e-15;
  const auto ref = integrate(s, y0, 2.0, 0.05, tight);
  using State = std::vector<double>;
  State y = y0;
  namespace odeint = boost::numeric::odeint;
  auto rhs = [&](const State& x, State& dx, double) {
    dx.resize(5);
    s.evaluate(x, dx);
  };
  odeint::integrate_adaptive(odeint::make_controlled(1e-13, 1e-13, odeint::runge_kutta_fehlberg78<State>()), rhs,
                             y, 0.0, 2.0, 0.01);
  for (int d = 0; d < 5; ++d) EXPECT_NEAR(ref.states(40, d), y[d], 1e-8);
}

TEST(Integrate, FixedPointsArePreserved) {
  const auto l63 = make_system("lorenz63");
  const double b = 8.0 / 3.0, r = 28.0;
  const std::vector<double> c{std::sqrt(b * (r - 1)), std::sqrt(b * (r - 1)), r - 1};
  auto traj = integrate(l63, c, 5.0, 0.1);
  for (Eigen::Index i = 0; i < traj.size(); ++i) {
    for (int d = 0; d < 3; ++d) EXPECT_NEAR(traj.states(i, d), c[d], 1e-6);
  }
  const auto l96 = make_system("lorenz96", 6);
  traj = integrate(l96, std::vector<double>(6, 8.0), 5.0, 0.1);
  EXPECT_NEAR((traj.states.array() - 8.0).abs().maxCoeff(), 0.0, 1e-9);
  const auto origin = integrate(l63, std::vector<double>(3, 0.0), 5.0, 0.1);
  EXPECT_EQ(origin.states.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Integrate, Deterministic) {
  const auto s = make_system("thomas");
  const auto a = integrate(s, s.default_y0, 50.0, 1.0);
  const auto b = integrate(s, s.default_y0, 50.0, 1.0);
  EXPECT_TRUE(a.states == b.states);
}

TEST(Integrate, BlowupNamesTime) {
  const auto s = custom(1, [](std::span<const double> y, std::span<double> out) { out[0] = y[0] * y[0]; });
  try {
    integrate(s, std::vector<double>{1.0}, 2.0, 0.1);
    FAIL() << "expected IntegrationBlowup";
  } catch (const IntegrationBlowup& e) {
    EXPECT_NEAR(e.time(), 1.0, 0.05);
  }
}

TEST(Integrate, RejectsBadArguments) {
  const auto s = make_system("lorenz63");
  EXPECT_THROW(integrate(s, s.default_y0, 0.0, 0.1), InvalidArgument);
  EXPECT_THROW(integrate(s, s.default_y0, 1.0, 0.0), InvalidArgument);
  EXPECT_THROW(integrate(s, std::vector<double>{1, 2}, 1.0, 0.1), InvalidArgument);
  EXPECT_THROW(integrate(s, std::vector<double>{NAN, 0, 0}, 1.0, 0.1), InvalidArgument);
}

TEST(Observe, SlicingSemantics) {
  Trajectory t;
  t.states = Matrix(3, 2);
  t.states << 1, 2, 3, 4, 5, 6;
  EXPECT_EQ(observe(t, 0, 1).values, (std::vector<double>{3, 5}));
  EXPECT_EQ(observe(t, 1, 0).values, (std::vector<double>{2, 4, 6}));
  EXPECT_EQ(observe(t, 1, 0).coordinate_index, 1);
  EXPECT_THROW(observe(t, 0, 3), InvalidArgument);
  EXPECT_THROW(observe(t, 2, 0), InvalidArgument);
  EXPECT_THROW(observe(t, -1, 0), InvalidArgument);
}

TEST(Observe, DiscardTransientRecordsCount) {
  const auto s = make_system("rossler");
  const auto traj = integrate(s, s.default_y0, 20.0, 0.2);
  const auto cut = discard_transient(traj, 10);
  EXPECT_EQ(cut.size(), traj.size() - 10);
  EXPECT_EQ(cut.discarded_transient, 10);
  EXPECT_TRUE(cut.states.row(0) == traj.states.row(10));
}

TEST(InitialCondition, PerturbsOnlyFirstCoordinate) {
  const auto s = make_system("lorenz96", 8);
  Rng rng(1);
  const auto y0 = perturbed_initial_condition(s, rng);
  EXPECT_NE(y0[0], 8.0);
  EXPECT_LT(std::abs(y0[0] - 8.0), 0.06);
  for (int i = 1; i < 8; ++i) EXPECT_EQ(y0[i], 8.0);
}

TEST(TrajectoryCsv, RoundTripIsExact) {
  const auto s = make_system("lorenz63");
  const auto traj = integrate(s, s.default_y0, 3.0, 0.03);
  const auto path = (std::filesystem::temp_directory_path() / "icdyn_traj_test.csv").string();
  write_trajectory_csv(traj, path);
  const auto back = read_trajectory_csv(path);
  EXPECT_TRUE(back.states == traj.states);
  EXPECT_EQ(back.dt_sample, traj.dt_sample);
  std::filesystem::remove(path);
}
