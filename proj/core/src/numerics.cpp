#include "icdyn/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include <Eigen/Eigenvalues>
#include <Eigen/LU>
#include <Eigen/QR>

#include "icdyn/errors.hpp"
#include "icdyn/rng.hpp"

namespace icdyn {

bool is_row_stochastic(const Matrix& P, double tol) {
  if (P.rows() == 0 || P.rows() != P.cols()) return false;
  for (Eigen::Index i = 0; i < P.rows(); ++i) {
    double sum = 0.0;
    for (Eigen::Index j = 0; j < P.cols(); ++j) {
      const double x = P(i, j);
      if (!std::isfinite(x) || x < 0.0) return false;
      sum += x;
    }
    if (std::abs(sum - 1.0) > tol) return false;
  }
  return true;
}

namespace {

Vector random_positive(Eigen::Index n, Rng& rng, int power) {
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double u = rng.uniform() + 1e-3;
    for (int p = 1; p < power; ++p) u *= u;
    v(i) = u;
  }
  return v / v.sum();
}

Vector random_unit(Eigen::Index n, Rng& rng) {
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = rng.uniform() - 0.5;
  return v.normalized();
}

struct StationaryRun {
  Vector pi;
  double residual;
  long iterations;
};

StationaryRun lazy_power(const Matrix& P, Vector v, const PowerIterationOptions& opts) {
  for (long it = 1; it <= opts.max_iter; ++it) {
    Vector w = P.transpose() * v;
    const double residual = (w - v).lpNorm<1>();
    if (residual <= opts.tol) return {std::move(v), residual, it};
    v = 0.5 * (v + w);
    v /= v.sum();
  }
  throw ConvergenceError("stationary_distribution: no convergence within " +
                         std::to_string(opts.max_iter) +
                         " iterations (reducible or ill-conditioned chain)");
}

void normalize_sign(Vector& v) {
  Eigen::Index arg = 0;
  v.cwiseAbs().maxCoeff(&arg);
  if (v(arg) < 0) v = -v;
}

}  // namespace

StationaryDistribution stationary_distribution(const Matrix& P, const PowerIterationOptions& opts) {
  if (!is_row_stochastic(P)) {
    throw InvalidArgument("stationary_distribution: matrix is not row-stochastic");
  }
  Rng rng(opts.seed);
  auto first = lazy_power(P, random_positive(P.rows(), rng, 1), opts);
  auto second = lazy_power(P, random_positive(P.rows(), rng, 3), opts);
  if ((first.pi - second.pi).lpNorm<1>() > 1e-6) {
    throw ConvergenceError(
        "stationary_distribution: stationary distribution is not unique "
        "(independent starts converged to different fixed points)");
  }
  StationaryDistribution out;
  out.pi.assign(first.pi.data(), first.pi.data() + first.pi.size());
  out.residual = first.residual;
  out.iterations = first.iterations + second.iterations;
  return out;
}

namespace {

// Deflated operator B = P (I - sum_i R_i W_i), applied without forming B.
class DeflatedOperator {
 public:
  explicit DeflatedOperator(const Matrix& P) : P_(P) {}

  void add(Matrix R, Matrix W) {
    R_.push_back(std::move(R));
    W_.push_back(std::move(W));
  }

  Vector left(const Vector& y) const {
    Vector z = P_.transpose() * y;
    for (std::size_t i = 0; i < R_.size(); ++i) z -= W_[i].transpose() * (R_[i].transpose() * z);
    return z;
  }

  Vector right(const Vector& x) const {
    Vector u = x;
    for (std::size_t i = 0; i < R_.size(); ++i) u -= R_[i] * (W_[i] * x);
    return P_ * u;
  }

  Eigen::Index size() const { return P_.rows(); }

 private:
  const Matrix& P_;
  std::vector<Matrix> R_;
  std::vector<Matrix> W_;
};

struct Dominant {
  bool complex_pair = false;
  std::complex<double> eigenvalue;
  Matrix basis;  // K x 1 eigenvector, or K x 2 [Re u, Im u] with ||u|| = 1
  double residual = 0.0;
};

enum class Side { kLeft, kRight };

Vector apply(const DeflatedOperator& B, Side side, const Vector& v) {
  return side == Side::kLeft ? B.left(v) : B.right(v);
}

// The deflation uses pi, which is only accurate to the power-iteration
// tolerance; eigenvalues below this are indistinguishable from zero.
constexpr double kNumericalZero = 1e-10;

constexpr long kStagnationWindow = 200;
constexpr double kStagnationFactor = 0.9;

// Returns false (and leaves `out` untouched) when the residual stagnates.
bool power_iteration(const DeflatedOperator& B, Side side, Rng& rng,
                     const PowerIterationOptions& opts, Dominant& out) {
  Vector v = random_unit(B.size(), rng);
  double best = std::numeric_limits<double>::infinity();
  double best_at_check = best;
  for (long it = 1; it <= opts.max_iter; ++it) {
    Vector w = apply(B, side, v);
    const double norm = w.norm();
    if (norm < kNumericalZero) {
      out.complex_pair = false;
      out.eigenvalue = 0.0;
      out.basis = v;
      out.residual = norm;
      return true;
    }
    const double lambda = v.dot(w);
    const double residual = (w - lambda * v).norm();
    if (residual <= opts.tol) {
      out.complex_pair = false;
      out.eigenvalue = lambda;
      out.basis = v;
      out.residual = residual;
      return true;
    }
    best = std::min(best, residual);
    if (it % kStagnationWindow == 0) {
      if (best > kStagnationFactor * best_at_check) return false;
      best_at_check = best;
    }
    v = w / norm;
  }
  return false;
}

Matrix orthonormalize(const Matrix& Z) {
  Eigen::HouseholderQR<Matrix> qr(Z);
  Matrix Q = qr.householderQ() * Matrix::Identity(Z.rows(), Z.cols());
  return Q;
}

// Largest-magnitude Ritz value; near-equal magnitudes prefer the larger real
// part, then the positive imaginary part, so left and right searches agree.
Eigen::Index leading_ritz(const Eigen::VectorXcd& mu) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < mu.size(); ++i) {
    const double a = std::abs(mu(i)), b = std::abs(mu(best));
    const double tie = 1e-10 * std::max(a, b);
    if (a > b + tie) {
      best = i;
    } else if (std::abs(a - b) <= tie) {
      if (mu(i).real() > mu(best).real() + tie ||
          (std::abs(mu(i).real() - mu(best).real()) <= tie && mu(i).imag() > mu(best).imag())) {
        best = i;
      }
    }
  }
  return best;
}

constexpr Eigen::Index kBlockSize = 8;

// Block subspace iteration with Rayleigh-Ritz extraction. The block holds
// more vectors than the mode sought, so clusters of near-equal magnitude
// (several complex pairs, or +-lambda) still separate.
Dominant subspace_iteration(const DeflatedOperator& B, Side side, Rng& rng,
                            const PowerIterationOptions& opts) {
  const Eigen::Index K = B.size();
  const Eigen::Index p = std::min(K, kBlockSize);
  Matrix V(K, p);
  for (Eigen::Index j = 0; j < p; ++j) V.col(j) = random_unit(K, rng);
  V = orthonormalize(V);
  Matrix Z(K, p);
  std::complex<double> mu;
  Eigen::VectorXcd u;
  double residual = std::numeric_limits<double>::infinity();
  bool converged = false;
  for (long it = 1; it <= opts.max_iter; ++it) {
    for (Eigen::Index j = 0; j < p; ++j) Z.col(j) = apply(B, side, V.col(j));
    const Eigen::MatrixXd H = V.transpose() * Z;
    Eigen::EigenSolver<Eigen::MatrixXd> es(H);
    if (es.info() != Eigen::Success) break;
    const Eigen::Index i = leading_ritz(es.eigenvalues());
    mu = es.eigenvalues()(i);
    Eigen::VectorXcd y = es.eigenvectors().col(i);
    y.normalize();
    u = V.cast<std::complex<double>>() * y;
    residual = (Z.cast<std::complex<double>>() * y - mu * u).norm();
    if (residual <= opts.tol) {
      converged = true;
      break;
    }
    V = orthonormalize(Z);
  }
  if (!converged) {
    throw ConvergenceError("metastable_modes: subspace iteration did not converge (residual " +
                           std::to_string(residual) + ")");
  }
  Dominant out;
  out.residual = residual;
  // Rotate the phase so the largest entry is real positive.
  Eigen::Index arg = 0;
  u.cwiseAbs().maxCoeff(&arg);
  u *= std::conj(u(arg)) / std::abs(u(arg));
  const double scale = std::max(1.0, std::abs(mu));
  if (std::abs(mu.imag()) > 1e-10 * scale && u.imag().norm() > 1e-8) {
    if (mu.imag() < 0.0) {
      mu = std::conj(mu);
      u = u.conjugate();
    }
    out.complex_pair = true;
    out.eigenvalue = mu;
    out.basis.resize(K, 2);
    out.basis.col(0) = u.real();
    out.basis.col(1) = u.imag();
  } else {
    Vector r = u.real();
    r.normalize();
    out.complex_pair = false;
    out.eigenvalue = mu.real();
    out.basis = r;
  }
  return out;
}

Dominant dominant_mode(const DeflatedOperator& B, Side side, Rng& rng,
                       const PowerIterationOptions& opts) {
  Dominant out;
  if (power_iteration(B, side, rng, opts, out)) return out;
  return subspace_iteration(B, side, rng, opts);
}

}  // namespace

std::vector<Mode> metastable_modes(const Matrix& P, std::span<const double> pi, int m,
                                   const PowerIterationOptions& opts) {
  const Eigen::Index K = P.rows();
  if (P.rows() != P.cols()) throw InvalidArgument("metastable_modes: matrix must be square");
  if (static_cast<Eigen::Index>(pi.size()) != K) {
    throw InvalidArgument("metastable_modes: distribution length does not match matrix");
  }
  if (m < 0 || m >= K) {
    throw InvalidArgument("metastable_modes: need 0 <= m < K (m=" + std::to_string(m) +
                          ", K=" + std::to_string(K) + ")");
  }
  DeflatedOperator B(P);
  B.add(Matrix::Ones(K, 1), Eigen::Map<const Eigen::RowVectorXd>(pi.data(), K));

  Rng rng(opts.seed + 1);
  std::vector<Mode> modes;
  while (static_cast<int>(modes.size()) < m) {
    Dominant left = dominant_mode(B, Side::kLeft, rng, opts);
    if (std::abs(left.eigenvalue) < kNumericalZero) {
      // Remaining spectrum is numerically zero.
      while (static_cast<int>(modes.size()) < m) {
        Vector v = left.basis.col(0);
        modes.push_back({0.0, std::vector<double>(v.data(), v.data() + K), left.residual});
      }
      break;
    }
    Dominant right = dominant_mode(B, Side::kRight, rng, opts);
    const double scale = std::max(1.0, std::abs(left.eigenvalue));
    const bool matches =
        left.complex_pair == right.complex_pair &&
        (std::abs(right.eigenvalue - left.eigenvalue) <= 1e-6 * scale ||
         std::abs(right.eigenvalue - std::conj(left.eigenvalue)) <= 1e-6 * scale);
    if (!matches) {
      throw ConvergenceError("metastable_modes: left and right iterations found different "
                             "dominant eigenvalues");
    }
    const Matrix& L = left.basis;
    const Matrix& R = right.basis;
    Matrix gram = L.transpose() * R;
    Eigen::FullPivLU<Matrix> lu(gram);
    if (!lu.isInvertible()) {
      throw ConvergenceError("metastable_modes: defective eigenvalue, cannot deflate");
    }
    B.add(R, lu.inverse() * L.transpose());

    if (!left.complex_pair) {
      Vector v = L.col(0);
      normalize_sign(v);
      modes.push_back({left.eigenvalue, std::vector<double>(v.data(), v.data() + K), left.residual});
    } else {
      Vector re = L.col(0);
      Vector im = L.col(1);
      modes.push_back({left.eigenvalue, std::vector<double>(re.data(), re.data() + K),
                       left.residual});
      if (static_cast<int>(modes.size()) < m) {
        modes.push_back({std::conj(left.eigenvalue), std::vector<double>(im.data(), im.data() + K),
                         left.residual});
      }
    }
  }
  return modes;
}

SpectrumResult transfer_spectrum(const Matrix& P, int n_modes, const PowerIterationOptions& opts) {
  if (n_modes < 1) throw InvalidArgument("transfer_spectrum: n_modes must be >= 1");
  const auto stationary = stationary_distribution(P, opts);
  const Eigen::Map<const Vector> pi(stationary.pi.data(), P.rows());
  SpectrumResult out;
  out.eigenvalues.push_back(pi.dot(P.transpose() * pi) / pi.squaredNorm());
  out.modes.push_back(stationary.pi);
  out.residuals.push_back(stationary.residual);
  const int extra = static_cast<int>(std::min<Eigen::Index>(n_modes - 1, P.rows() - 1));
  for (auto& mode : metastable_modes(P, stationary.pi, extra, opts)) {
    out.eigenvalues.push_back(mode.eigenvalue);
    out.modes.push_back(std::move(mode.vector));
    out.residuals.push_back(mode.residual);
  }
  return out;
}

double stable_rank(const Matrix& M, const PowerIterationOptions& opts) {
  const double frob2 = M.squaredNorm();
  if (!(frob2 > 0.0)) throw InvalidArgument("stable_rank: matrix is zero");
  if (!std::isfinite(frob2)) throw InvalidArgument("stable_rank: non-finite entries");
  Rng rng(opts.seed);
  Vector v = random_unit(M.cols(), rng);
  double sigma2 = 0.0;
  for (long it = 1; it <= opts.max_iter; ++it) {
    Vector Mv = M * v;
    const double rayleigh = Mv.squaredNorm();
    Vector w = M.transpose() * Mv;
    const double norm = w.norm();
    if (norm == 0.0) {  // start orthogonal to the row space
      v = random_unit(M.cols(), rng);
      continue;
    }
    if (std::abs(rayleigh - sigma2) <= opts.tol * rayleigh) {
      sigma2 = std::max(sigma2, rayleigh);
      return frob2 / sigma2;
    }
    sigma2 = rayleigh;
    v = w / norm;
  }
  throw ConvergenceError("stable_rank: power iteration did not converge");
}

namespace {

void check_distribution(std::span<const double> p, const char* name) {
  double sum = 0.0;
  for (double x : p) {
    if (!std::isfinite(x) || x < 0.0) {
      throw InvalidArgument(std::string("kl_divergence: ") + name + " has invalid entries");
    }
    sum += x;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw InvalidArgument(std::string("kl_divergence: ") + name + " does not sum to 1");
  }
}

}  // namespace

double kl_divergence(std::span<const double> p, std::span<const double> q, double smoothing) {
  if (p.size() != q.size()) throw InvalidArgument("kl_divergence: length mismatch");
  if (smoothing < 0.0) throw InvalidArgument("kl_divergence: negative smoothing");
  check_distribution(p, "p");
  check_distribution(q, "q");
  const double denom = 1.0 + static_cast<double>(q.size()) * smoothing;
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    const double qi = (q[i] + smoothing) / denom;
    if (qi == 0.0) return std::numeric_limits<double>::infinity();
    kl += p[i] * std::log(p[i] / qi);
  }
  return std::max(kl, 0.0);
}

double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double x : p) {
    if (x > 0.0) h -= x * std::log(x);
  }
  return h;
}

double finite_difference_gradcheck(const ScalarFunction& loss, std::span<const double> theta,
                                   std::span<const double> analytic_grad, double eps,
                                   std::span<const std::size_t> coordinates) {
  if (theta.size() != analytic_grad.size()) {
    throw InvalidArgument("finite_difference_gradcheck: gradient length mismatch");
  }
  if (!(eps > 0.0)) throw InvalidArgument("finite_difference_gradcheck: eps must be positive");
  std::vector<double> x(theta.begin(), theta.end());
  double worst = 0.0;
  auto check = [&](std::size_t i) {
    if (i >= x.size()) throw InvalidArgument("finite_difference_gradcheck: coordinate out of range");
    const double saved = x[i];
    x[i] = saved + eps;
    const double plus = loss(x);
    x[i] = saved - eps;
    const double minus = loss(x);
    x[i] = saved;
    if (!std::isfinite(plus) || !std::isfinite(minus)) {
      throw NumericalError("finite_difference_gradcheck: non-finite loss at coordinate " +
                           std::to_string(i));
    }
    const double fd = (plus - minus) / (2.0 * eps);
    const double g = analytic_grad[i];
    const double err = std::abs(fd - g) / std::max({std::abs(fd), std::abs(g), 1e-8});
    worst = std::max(worst, err);
  };
  if (coordinates.empty()) {
    for (std::size_t i = 0; i < x.size(); ++i) check(i);
  } else {
    for (std::size_t i : coordinates) check(i);
  }
  return worst;
}

}  // namespace icdyn
