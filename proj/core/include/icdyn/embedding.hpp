#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "icdyn/model.hpp"
#include "icdyn/numerics.hpp"

namespace icdyn {

struct EmbeddingSpec {
  int dim = 1;
  int lag = 1;

  // Takens-sufficient embedding dimension 2 d + 1 for a d-dimensional manifold.
  static EmbeddingSpec sufficient_for(double manifold_dimension, int lag = 1);
};

// Row m = [x_m, x_{m+lag}, ..., x_{m+(dim-1)lag}], M = N - (dim-1) lag rows.
Matrix delay_embed(std::span<const double> series, int dim, int lag = 1);

struct DimensionOptions {
  double low_percentile = 5.0;
  double high_percentile = 50.0;
  std::size_t max_distances = 5'000'000;  // uniform reservoir beyond this
  std::uint64_t seed = 0x6770;
  std::size_t min_points = 100;
};

struct DimensionEstimate {
  double d_M = 0.0;
  long n_distances_used = 0;
  long n_distances_total = 0;
  double rho_min = 0.0;
  double low_percentile = 5.0;
  double high_percentile = 50.0;
};

// 1 + 1 / mean ln(rho / rho_min) over already-truncated distances.
double power_law_exponent(std::span<const double> retained);

// Pairwise distances, truncated to the nearest-rank percentile window, fed
// into power_law_exponent.
DimensionEstimate gp_dimension(const Matrix& points, const DimensionOptions& opts = {});

// (I + A_L)(I + A_{L-1}) ... (I + A_1).
Matrix attention_rollout(std::span<const Matrix> attentions);

struct RolloutSummary {
  Matrix mean_rollout;  // T x T average over contexts
  double d_latent = 0.0;
  long contexts = 0;
};

// Rollouts of the model's attention on each context (all of one length),
// averaged before taking the stable rank.
RolloutSummary latent_dimension(const ModelParams<float>& params,
                                const std::vector<std::vector<Token>>& contexts);

nlohmann::json dimension_json(const DimensionEstimate& d);
void write_matrix_csv(const Matrix& M, const std::string& path);

}  // namespace icdyn
