#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "icdyn/dynamics.hpp"
#include "icdyn/infer.hpp"
#include "icdyn/markov.hpp"
#include "icdyn/numerics.hpp"
#include "icdyn/quant.hpp"

namespace icdyn {

struct Partition {
  Matrix centers;  // K x D

  int K() const { return static_cast<int>(centers.rows()); }
};

// Lloyd iterations from farthest-point seeding (first center drawn from the
// "kmeans" sub-stream of `seed`) until the assignment stops changing or 300
// iterations. Empty clusters keep their previous center.
Partition kmeans_partition(const Matrix& points, int K, std::uint64_t seed, int max_iter = 300);

// Nearest center per row, 1-based, ties to the lowest index.
std::vector<int> symbolize(const Matrix& points, const Partition& partition);

// Row-normalized transition counts between labelled states. Rows without
// observed transitions are all zero and flagged in `empty_rows`.
struct TransitionMatrix {
  Matrix P;
  Matrix counts;
  int lag = 1;
  std::vector<KGram> labels;  // cluster index {i} or k-gram token tuple
  std::vector<bool> empty_rows;

  int size() const { return static_cast<int>(P.rows()); }
};

TransitionMatrix ulam_matrix(std::span<const int> symbols, int K, int tau = 1);

// Mean row entropy over non-empty rows of the lag-tau Ulam matrix.
double mean_row_entropy(const TransitionMatrix& T);

struct PartitionSelection {
  int best_K = 0;
  std::vector<int> candidates;
  std::vector<double> mean_entropy;
};

PartitionSelection select_partition_size(const Matrix& points, std::span<const int> candidates,
                                         int tau, std::uint64_t seed);

struct MarkovOrderResult {
  int best_order = 0;
  std::vector<int> orders;
  std::vector<double> mean_kl;  // mean KL(model || fitted chain) per order
  long positions = 0;
};

// Fits each order on `tokens` and compares the model's next-token
// distribution (restricted to 1..V) against the chain's prediction at every
// position t >= max(orders) - 1. Ties go to the smallest order.
MarkovOrderResult best_markov_order(const NextTokenProvider& model, std::span<const Token> tokens,
                                    std::span<const int> orders, double smoothing = 0.0);

struct LaggedConditional {
  Matrix P;  // V x V, row v-1 = mean p(x_{t+1} | x_{t-lag} = v)
  std::vector<long> occurrences;
  std::vector<bool> empty_rows;
  int lag = 0;
};

LaggedConditional lagged_conditional(const NextTokenProvider& model, std::span<const Token> tokens,
                                     int lag);

// Operator over the distinct k-grams ending at positions t >= C - 1. Each
// k-gram row averages the model's next-token distribution over up to
// `samples_per_gram` randomly drawn length-C contexts ending in it; the mass
// on x moves to the shifted k-gram (..., x). Mass landing on k-grams outside
// the visited set is dropped and rows renormalized; rows left empty are
// removed repeatedly until the state set is closed.
TransitionMatrix model_implied_operator(const NextTokenProvider& model, std::span<const Token> tokens,
                                        int k, int samples_per_gram, Rng& rng);

// Empirical k-gram -> k-gram transitions at lag tau.
TransitionMatrix kgram_transition_matrix(std::span<const Token> tokens, int k, int tau = 1);

// Tokenizes the series (with `scale` when given, otherwise its own mean
// scale) and tabulates k-gram transitions at lag tau.
TransitionMatrix ground_truth_delay_operator(const ObservationSeries& series, const QuantizerSpec& quant,
                                             int k, int tau = 1, std::optional<double> scale = {});

// Restriction to the closed communicating class carrying the most observed
// mass: the operator on which a unique stationary distribution exists.
TransitionMatrix recurrent_restriction(const TransitionMatrix& T);

// Probability vectors keyed by state label, aligned on the union of labels.
struct AlignedDistributions {
  std::vector<KGram> labels;
  std::vector<double> p;
  std::vector<double> q;
};

AlignedDistributions align_distributions(const std::vector<KGram>& labels_p, std::span<const double> p,
                                         const std::vector<KGram>& labels_q, std::span<const double> q);

std::string label_string(const KGram& label);

void write_operator_csv(const TransitionMatrix& T, const std::string& path);
nlohmann::json operator_labels_json(const TransitionMatrix& T);
nlohmann::json spectrum_json(const SpectrumResult& spectrum, const std::vector<KGram>& labels);

}  // namespace icdyn
