#include "icdyn/embedding.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "icdyn/errors.hpp"
#include "icdyn/rng.hpp"

namespace icdyn {

EmbeddingSpec EmbeddingSpec::sufficient_for(double manifold_dimension, int lag) {
  if (!(manifold_dimension > 0.0)) throw InvalidArgument("EmbeddingSpec: manifold dimension must be positive");
  return {2 * static_cast<int>(std::ceil(manifold_dimension)) + 1, lag};
}

Matrix delay_embed(std::span<const double> series, int dim, int lag) {
  if (dim < 1 || lag < 1) throw InvalidArgument("delay_embed: dim and lag must be >= 1");
  const auto span = static_cast<std::size_t>(dim - 1) * static_cast<std::size_t>(lag);
  if (series.size() < span + 1) throw InvalidArgument("delay_embed: series too short for the embedding");
  const auto M = static_cast<Eigen::Index>(series.size() - span);
  Matrix out(M, dim);
  for (Eigen::Index m = 0; m < M; ++m) {
    for (int j = 0; j < dim; ++j) out(m, j) = series[static_cast<std::size_t>(m) + static_cast<std::size_t>(j * lag)];
  }
  return out;
}

double power_law_exponent(std::span<const double> retained) {
  if (retained.empty()) throw InvalidArgument("power_law_exponent: no distances");
  const double rho_min = *std::min_element(retained.begin(), retained.end());
  if (!(rho_min > 0.0)) throw InvalidArgument("power_law_exponent: distances must be positive");
  double sum = 0.0;
  for (double r : retained) sum += std::log(r / rho_min);
  const double mean = sum / static_cast<double>(retained.size());
  if (!(mean > 0.0)) throw NumericalError("power_law_exponent: degenerate sample (all distances equal)");
  return 1.0 + 1.0 / mean;
}

namespace {

// 1-based nearest rank ceil(p/100 n), clamped to [1, n], on a sorted sample.
std::size_t nearest_rank(double p, std::size_t n) {
  const auto r = static_cast<std::size_t>(std::ceil(p / 100.0 * static_cast<double>(n)));
  return std::clamp<std::size_t>(r, 1, n);
}

}  // namespace

DimensionEstimate gp_dimension(const Matrix& points, const DimensionOptions& opts) {
  if (!(opts.low_percentile >= 0.0 && opts.low_percentile < opts.high_percentile && opts.high_percentile <= 100.0)) {
    throw InvalidArgument("gp_dimension: invalid percentile window");
  }
  if (opts.max_distances < 1) throw InvalidArgument("gp_dimension: max_distances must be >= 1");
  const auto N = static_cast<std::size_t>(points.rows());
  if (N < opts.min_points) {
    throw InvalidArgument("gp_dimension: need at least " + std::to_string(opts.min_points) + " points");
  }

  std::vector<double> sample;
  sample.reserve(std::min(opts.max_distances, N * (N - 1) / 2));
  Rng rng = Rng::derive(opts.seed, "gp_dimension");
  std::uint64_t seen = 0;
  constexpr Eigen::Index block = 256;
  const auto rows = points.rows();
  for (Eigen::Index bi = 0; bi < rows; bi += block) {
    const Eigen::Index ei = std::min(rows, bi + block);
    for (Eigen::Index bj = bi; bj < rows; bj += block) {
      const Eigen::Index ej = std::min(rows, bj + block);
      for (Eigen::Index i = bi; i < ei; ++i) {
        for (Eigen::Index j = std::max(bj, i + 1); j < ej; ++j) {
          const double d = (points.row(i) - points.row(j)).norm();
          if (!(d > 0.0)) continue;
          ++seen;
          if (sample.size() < opts.max_distances) {
            sample.push_back(d);
          } else {
            const auto slot = rng.below(seen);
            if (slot < opts.max_distances) sample[static_cast<std::size_t>(slot)] = d;
          }
        }
      }
    }
  }
  if (sample.empty()) throw NumericalError("gp_dimension: no positive pairwise distances");

  std::sort(sample.begin(), sample.end());
  const std::size_t lo = nearest_rank(opts.low_percentile, sample.size()) - 1;
  const std::size_t hi = nearest_rank(opts.high_percentile, sample.size()) - 1;
  const std::span<const double> retained(sample.data() + lo, hi - lo + 1);
  if (retained.size() < 10) throw NumericalError("gp_dimension: fewer than 10 retained distances");

  DimensionEstimate est;
  est.d_M = power_law_exponent(retained);
  est.n_distances_used = static_cast<long>(retained.size());
  est.n_distances_total = static_cast<long>(seen);
  est.rho_min = retained.front();
  est.low_percentile = opts.low_percentile;
  est.high_percentile = opts.high_percentile;
  return est;
}

Matrix attention_rollout(std::span<const Matrix> attentions) {
  if (attentions.empty()) throw InvalidArgument("attention_rollout: no layers");
  const auto T = attentions.front().rows();
  for (const auto& A : attentions) {
    if (A.rows() != T || A.cols() != T) throw InvalidArgument("attention_rollout: matrices must be square and equal size");
  }
  Matrix out = Matrix::Identity(T, T) + attentions.front();
  for (std::size_t l = 1; l < attentions.size(); ++l) {
    out = (Matrix::Identity(T, T) + attentions[l]) * out;
  }
  return out;
}

RolloutSummary latent_dimension(const ModelParams<float>& params, const std::vector<std::vector<Token>>& contexts) {
  if (contexts.empty()) throw InvalidArgument("latent_dimension: no contexts");
  const auto T = static_cast<Eigen::Index>(contexts.front().size());
  RolloutSummary out;
  out.mean_rollout = Matrix::Zero(T, T);
  for (const auto& ctx : contexts) {
    if (static_cast<Eigen::Index>(ctx.size()) != T) throw InvalidArgument("latent_dimension: contexts differ in length");
    const auto trace = forward<float>(ctx, params);
    std::vector<Matrix> attn;
    attn.reserve(trace.attentions.size());
    for (const auto& A : trace.attentions) attn.push_back(A.cast<double>());
    out.mean_rollout += attention_rollout(attn);
  }
  out.mean_rollout /= static_cast<double>(contexts.size());
  out.contexts = static_cast<long>(contexts.size());
  out.d_latent = stable_rank(out.mean_rollout);
  return out;
}

nlohmann::json dimension_json(const DimensionEstimate& d) {
  return {{"d_M", d.d_M},
          {"n_distances_used", d.n_distances_used},
          {"n_distances_total", d.n_distances_total},
          {"rho_min", d.rho_min},
          {"percentile_window", {d.low_percentile, d.high_percentile}}};
}

void write_matrix_csv(const Matrix& M, const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw FormatError("cannot write " + path);
  for (Eigen::Index i = 0; i < M.rows(); ++i) {
    for (Eigen::Index j = 0; j < M.cols(); ++j) std::fprintf(f, j ? ",%.17g" : "%.17g", M(i, j));
    std::fputc('\n', f);
  }
  std::fclose(f);
}

}  // namespace icdyn
