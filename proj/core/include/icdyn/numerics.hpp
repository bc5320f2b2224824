#pragma once

#include <complex>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include <Eigen/Core>

namespace icdyn {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

struct PowerIterationOptions {
  double tol = 1e-12;
  long max_iter = 100'000;
  std::uint64_t seed = 0x5eed;
};

bool is_row_stochastic(const Matrix& P, double tol = 1e-9);

struct StationaryDistribution {
  std::vector<double> pi;
  double residual = 0.0;  // ||pi^T P - pi^T||_1
  long iterations = 0;
};

// Left Perron vector of a row-stochastic matrix by power iteration on
// (P^T + I)/2. The lazy form shares the fixed point with P^T and converges on
// periodic chains. Two independent starts must agree, otherwise the
// stationary distribution is not unique and ConvergenceError is thrown.
StationaryDistribution stationary_distribution(const Matrix& P,
                                               const PowerIterationOptions& opts = {});

struct Mode {
  std::complex<double> eigenvalue;
  // Unit-norm left eigenvector. For a complex pair the first member carries
  // the real part and the conjugate member the imaginary part.
  std::vector<double> vector;
  double residual = 0.0;
};

// Leading subdominant left modes of P after removing the stationary mode,
// P~ = P - 1 pi^T, with each found mode deflated before the next search.
// Plain power iteration is tried first; when its residual stagnates (complex
// or equal-magnitude pairs) block subspace iteration with Rayleigh-Ritz takes over.
std::vector<Mode> metastable_modes(const Matrix& P, std::span<const double> pi, int m,
                                   const PowerIterationOptions& opts = {});

struct SpectrumResult {
  std::vector<std::complex<double>> eigenvalues;  // |lambda_0| >= |lambda_1| >= ...
  std::vector<std::vector<double>> modes;         // modes[0] is the stationary distribution
  std::vector<double> residuals;
};

// Stationary distribution plus (n_modes - 1) metastable modes, capped at K.
SpectrumResult transfer_spectrum(const Matrix& P, int n_modes,
                                 const PowerIterationOptions& opts = {});

// ||M||_F^2 / ||M||_2^2 with ||M||_2 from power iteration on M^T M.
double stable_rank(const Matrix& M, const PowerIterationOptions& opts = {});

// sum p_i ln(p_i / q'_i), q' = (q + smoothing) / (1 + K smoothing). Returns
// +infinity when p has mass where q' is zero.
double kl_divergence(std::span<const double> p, std::span<const double> q,
                     double smoothing = 1e-9);

// Shannon entropy (nats) of one distribution; zero entries contribute nothing.
double entropy(std::span<const double> p);

using ScalarFunction = std::function<double(std::span<const double>)>;

// Max over checked coordinates of |fd - g| / max(|fd|, |g|, 1e-8) where fd is
// the central difference. `coordinates` empty means all coordinates.
double finite_difference_gradcheck(const ScalarFunction& loss, std::span<const double> theta,
                                   std::span<const double> analytic_grad, double eps,
                                   std::span<const std::size_t> coordinates = {});

}  // namespace icdyn
