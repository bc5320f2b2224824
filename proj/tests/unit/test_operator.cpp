#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <vector>

#include "icdyn/dynamics.hpp"
#include "icdyn/errors.hpp"
#include "icdyn/markov.hpp"
#include "icdyn/numerics.hpp"
#include "icdyn/operator.hpp"
#include "icdyn/quant.hpp"
#include "icdyn/rng.hpp"
#include "icdyn/train.hpp"

using namespace icdyn;

namespace {

// Order-k chain over 1..V with every transition probability >= floor.
MarkovChain random_chain(int k, int V, Rng& rng, double floor = 0.05) {
  std::map<KGram, std::vector<double>> table;
  KGram gram(static_cast<std::size_t>(k), 1);
  for (;;) {
    std::vector<double> row(static_cast<std::size_t>(V) + 1, 0.0);
    double sum = 0;
    for (int v = 1; v <= V; ++v) sum += row[v] = floor + rng.uniform();
    for (int v = 1; v <= V; ++v) row[v] /= sum;
    table[gram] = row;
    int i = k - 1;
    while (i >= 0 && gram[i] == V) gram[i--] = 1;
    if (i < 0) break;
    ++gram[i];
  }
  std::vector<double> marginal(static_cast<std::size_t>(V) + 1, 1.0 / V);
  marginal[0] = 0.0;
  return MarkovChain(k, V, table, marginal, 16);
}

MarkovChain two_state_chain(double p11, double p22, int context_limit = 16) {
  std::map<KGram, std::vector<double>> table{{{1}, {0, p11, 1 - p11}}, {{2}, {0, 1 - p22, p22}}};
  const double pi1 = (1 - p22) / (2 - p11 - p22);
  return MarkovChain(1, 2, table, {0, pi1, 1 - pi1}, context_limit);
}

void expect_row_stochastic(const TransitionMatrix& T) {
  for (int i = 0; i < T.size(); ++i) {
    if (T.empty_rows[i]) {
      EXPECT_EQ(T.P.row(i).sum(), 0.0);
      continue;
    }
    EXPECT_NEAR(T.P.row(i).sum(), 1.0, 1e-12);
    EXPECT_GE(T.P.row(i).minCoeff(), 0.0);
  }
}

int label_index(const TransitionMatrix& T, const KGram& g) {
  const auto it = std::find(T.labels.begin(), T.labels.end(), g);
  return it == T.labels.end() ? -1 : static_cast<int>(it - T.labels.begin());
}

}  // namespace

TEST(KMeans, SingleClusterIsTheMean) {
  Matrix X(4, 2);
  X << 0, 0, 2, 0, 0, 4, 2, 4;
  const auto p = kmeans_partition(X, 1, 3);
  ASSERT_EQ(p.K(), 1);
  EXPECT_NEAR(p.centers(0, 0), 1.0, 1e-12);
  EXPECT_NEAR(p.centers(0, 1), 2.0, 1e-12);
}

TEST(KMeans, SeparatedCloudsAreFound) {
  Rng rng(5);
  const int n = 200;
  Matrix X(2 * n, 2);
  for (int i = 0; i < n; ++i) {
    X.row(i) << rng.normal() * 0.1, rng.normal() * 0.1;
    X.row(n + i) << 10 + rng.normal() * 0.1, -10 + rng.normal() * 0.1;
  }
  const Eigen::RowVector2d m0 = X.topRows(n).colwise().mean(), m1 = X.bottomRows(n).colwise().mean();
  const auto p = kmeans_partition(X, 2, 7);
  const Eigen::RowVector2d c0 = p.centers.row(0), c1 = p.centers.row(1);
  const bool direct = (c0 - m0).norm() < 0.1 && (c1 - m1).norm() < 0.1;
  const bool swapped = (c0 - m1).norm() < 0.1 && (c1 - m0).norm() < 0.1;
  EXPECT_TRUE(direct || swapped);
  const auto again = kmeans_partition(X, 2, 7);
  EXPECT_EQ(again.centers, p.centers);
}

TEST(KMeans, OneCenterPerPoint) {
  Matrix X(5, 1);
  X << 0, 1, 3, 7, 15;
  const auto p = kmeans_partition(X, 5, 1);
  const auto s = symbolize(X, p);
  for (int i = 0; i < 5; ++i) EXPECT_EQ((p.centers.row(s[i] - 1) - X.row(i)).norm(), 0.0);
  std::vector<int> sorted = s;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(sorted, (std::vector<int>{1, 2, 3, 4, 5}));
}

TEST(KMeans, Errors) {
  Matrix X(3, 1);
  X << 0, 1, 2;
  EXPECT_THROW(kmeans_partition(X, 4, 1), InvalidArgument);
  EXPECT_THROW(kmeans_partition(X, 0, 1), InvalidArgument);
}

TEST(Symbolize, NearestCenterLowestOnTies) {
  Partition p;
  p.centers.resize(3, 1);
  p.centers << 0, 10, 20;
  Matrix X(4, 1);
  X << 20, 4, 5, 15;
  EXPECT_EQ(symbolize(X, p), (std::vector<int>{3, 1, 1, 2}));
  Matrix bad(1, 2);
  bad << 0, 0;
  EXPECT_THROW(symbolize(bad, p), InvalidArgument);
}

TEST(Ulam, AlternationAndLagTwo) {
  const std::vector<int> s{1, 2, 1, 2, 1};
  const auto T1 = ulam_matrix(s, 2, 1);
  EXPECT_EQ(T1.P, (Matrix(2, 2) << 0, 1, 1, 0).finished());
  const auto T2 = ulam_matrix(s, 2, 2);
  EXPECT_EQ(T2.P, Matrix::Identity(2, 2));
  EXPECT_EQ(T2.counts(0, 0), 2.0);
  EXPECT_EQ(T2.counts(1, 1), 1.0);
  EXPECT_THROW(ulam_matrix(s, 2, 5), InvalidArgument);
  EXPECT_THROW(ulam_matrix(std::vector<int>{1, 3}, 2, 1), InvalidArgument);
}

TEST(Ulam, EmptyRowsAreFlagged) {
  const auto T = ulam_matrix(std::vector<int>{1, 1, 2}, 3, 1);
  EXPECT_FALSE(T.empty_rows[0]);
  EXPECT_TRUE(T.empty_rows[1]);
  EXPECT_TRUE(T.empty_rows[2]);
  expect_row_stochastic(T);
}

TEST(Ulam, RecoversSampledChain) {
  const auto chain = two_state_chain(0.7, 0.6);
  Rng rng(13);
  const auto tokens = chain.sample({1}, 100000, rng);
  const std::vector<int> s(tokens.begin(), tokens.end());
  const auto T = ulam_matrix(s, 2, 1);
  const Matrix truth = (Matrix(2, 2) << 0.7, 0.3, 0.4, 0.6).finished();
  EXPECT_LT((T.P - truth).cwiseAbs().maxCoeff(), 0.02);
}

TEST(Ulam, PermutationEquivariant) {
  Rng rng(14);
  std::vector<int> s(5000);
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = 1 + static_cast<int>(rng.below(i % 7 == 0 ? 2 : 5));
  const std::vector<int> sigma{3, 5, 1, 2, 4};  // symbol i -> sigma[i-1]
  std::vector<int> relabeled(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) relabeled[i] = sigma[s[i] - 1];
  const auto T = ulam_matrix(s, 5, 1);
  const auto R = ulam_matrix(relabeled, 5, 1);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j) EXPECT_EQ(T.P(i, j), R.P(sigma[i] - 1, sigma[j] - 1));
}

TEST(PartitionSize, SingleCandidate) {
  Matrix X(10, 1);
  for (int i = 0; i < 10; ++i) X(i, 0) = i;
  const std::vector<int> c{3};
  EXPECT_EQ(select_partition_size(X, c, 1, 1).best_K, 3);
}

TEST(PartitionSize, DeterministicAlternationPrefersRicherPartition) {
  Rng rng(15);
  const int n = 2000;
  Matrix X(n, 2);
  for (int i = 0; i < n; ++i) {
    const double cx = i % 2 == 0 ? 0.0 : 50.0;
    X.row(i) << cx + rng.normal(), rng.normal();
  }
  const std::vector<int> c{2, 8};
  const auto sel = select_partition_size(X, c, 1, 2);
  EXPECT_NEAR(sel.mean_entropy[0], 0.0, 1e-12);
  EXPECT_GT(sel.mean_entropy[1], 0.1);
  EXPECT_EQ(sel.best_K, 8);
}

TEST(PartitionSize, ConstantTrajectoryTiesToSmallest) {
  const Matrix X = Matrix::Constant(50, 2, 3.0);
  const std::vector<int> c{8, 4, 16};
  const auto sel = select_partition_size(X, c, 1, 3);
  for (double h : sel.mean_entropy) EXPECT_EQ(h, 0.0);
  EXPECT_EQ(sel.best_K, 4);
}

TEST(MarkovOrder, RecoversExactChainOrder) {
  Rng rng(16);
  for (int k : {1, 2, 3}) {
    const auto chain = random_chain(k, 3, rng);
    const auto tokens = chain.sample(KGram(static_cast<std::size_t>(k), 1), 20000, rng);
    const std::vector<int> orders{1, 2, 3, 4};
    const auto res = best_markov_order(chain, tokens, orders);
    EXPECT_EQ(res.best_order, k) << "true order " << k;
    ASSERT_EQ(res.mean_kl.size(), 4u);
    EXPECT_GT(res.positions, 0);
  }
}

TEST(MarkovOrder, TieGoesToSmallestOrder) {
  const std::vector<Token> tokens(200, 1);
  const MarkovChain chain(1, 2, {{{1}, {0, 1, 0}}}, {0, 1, 0});
  const std::vector<int> orders{3, 2, 1};
  const auto res = best_markov_order(chain, tokens, orders);
  for (double kl : res.mean_kl) EXPECT_NEAR(kl, 0.0, 1e-9);
  EXPECT_EQ(res.best_order, 1);
}

TEST(MarkovOrder, UniformModelOnIidStream) {
  Rng rng(17);
  std::vector<Token> tokens(20000);
  for (auto& t : tokens) t = 1 + static_cast<Token>(rng.below(3));
  const MarkovChain uniform(1, 3, {}, {0, 1.0 / 3, 1.0 / 3, 1.0 / 3});
  const std::vector<int> orders{1, 2, 3};
  EXPECT_EQ(best_markov_order(uniform, tokens, orders).best_order, 1);
}

TEST(Lagged, LagZeroRecoversChainRows) {
  Rng rng(18);
  const auto chain = random_chain(1, 4, rng);
  const auto tokens = chain.sample({1}, 3000, rng);
  const auto L = lagged_conditional(chain, tokens, 0);
  for (int v = 1; v <= 4; ++v) {
    ASSERT_FALSE(L.empty_rows[v - 1]);
    EXPECT_NEAR(L.P.row(v - 1).sum(), 1.0, 1e-12);
    for (int w = 1; w <= 4; ++w) EXPECT_NEAR(L.P(v - 1, w - 1), chain.table().at({v})[w], 1e-12);
  }
}

TEST(Lagged, HigherLagMixesAndFlagsMissingTokens) {
  const auto chain = two_state_chain(0.9, 0.8);
  Rng rng(19);
  auto tokens = chain.sample({1}, 50000, rng);
  const auto L = lagged_conditional(chain, tokens, 1);
  // Two-step kernel P^2 row-wise.
  const Matrix P = (Matrix(2, 2) << 0.9, 0.1, 0.2, 0.8).finished();
  const Matrix P2 = P * P;
  EXPECT_NEAR(L.P(0, 0), P2(0, 0), 0.01);
  EXPECT_NEAR(L.P(1, 1), P2(1, 1), 0.01);
  const MarkovChain three(1, 3, {}, {0, 0.2, 0.3, 0.5});
  const std::vector<Token> no_three{1, 2, 1, 1, 2};
  const auto E = lagged_conditional(three, no_three, 1);
  EXPECT_TRUE(E.empty_rows[2]);
  EXPECT_EQ(E.occurrences[2], 0);
  EXPECT_THROW(lagged_conditional(three, no_three, 4), InvalidArgument);
  EXPECT_THROW(lagged_conditional(three, no_three, -1), InvalidArgument);
}

TEST(ImpliedOperator, MatchesExactOrderOneChain) {
  Rng rng(20);
  const auto chain = random_chain(1, 3, rng);
  const auto tokens = chain.sample({1}, 5000, rng);
  Rng pick(1);
  const auto T = model_implied_operator(chain, tokens, 1, 64, pick);
  ASSERT_EQ(T.size(), 3);
  expect_row_stochastic(T);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) EXPECT_NEAR(T.P(i, j), chain.table().at(T.labels[i])[T.labels[j][0]], 0.02);
}

TEST(ImpliedOperator, OrderTwoStatesShiftCorrectly) {
  Rng rng(21);
  const auto chain = random_chain(1, 2, rng);
  const auto tokens = chain.sample({1}, 4000, rng);
  Rng pick(2);
  const auto T = model_implied_operator(chain, tokens, 2, 16, pick);
  ASSERT_EQ(T.size(), 4);
  expect_row_stochastic(T);
  const int from = label_index(T, {1, 2});
  EXPECT_EQ(T.P(from, label_index(T, {1, 1})), 0.0);
  EXPECT_NEAR(T.P(from, label_index(T, {2, 1})), chain.table().at({2})[1], 1e-12);
  EXPECT_NEAR(T.P(from, label_index(T, {2, 2})), chain.table().at({2})[2], 1e-12);
}

TEST(ImpliedOperator, AgreesWithGroundTruthWithinSamplingError) {
  Rng rng(22);
  const auto chain = random_chain(1, 3, rng);
  const auto tokens = chain.sample({2}, 40000, rng);
  Rng pick(3);
  const auto implied = model_implied_operator(chain, tokens, 1, 64, pick);
  const auto truth = kgram_transition_matrix(tokens, 1, 1);
  for (int i = 0; i < 3; ++i) {
    const int ti = label_index(truth, implied.labels[i]);
    const double n = truth.counts.row(ti).sum();
    for (int j = 0; j < 3; ++j) {
      const int tj = label_index(truth, implied.labels[j]);
      const double p = implied.P(i, j);
      EXPECT_LE(std::abs(truth.P(ti, tj) - p), 3.0 * std::sqrt(p * (1 - p) / n));
    }
  }
}

TEST(ImpliedOperator, Errors) {
  const auto chain = two_state_chain(0.5, 0.5, 4);
  Rng rng(1);
  const std::vector<Token> tokens{1, 2, 1, 2, 2, 1};
  EXPECT_THROW(model_implied_operator(chain, tokens, 4, 8, rng), InvalidArgument);
  EXPECT_THROW(model_implied_operator(chain, tokens, 0, 8, rng), InvalidArgument);
  EXPECT_THROW(model_implied_operator(chain, std::vector<Token>{1, 2}, 1, 8, rng), InvalidArgument);
}

TEST(ImpliedOperator, TrainedPeriodTwoModelIsPermutation) {
  std::vector<Token> stream(400);
  for (std::size_t i = 0; i < stream.size(); ++i) stream[i] = i % 2 == 0 ? 1 : 4;
  ModelConfig mc;
  mc.vocab_size = 4;
  mc.d_model = 32;
  mc.d_k = 16;
  mc.block_size = 16;
  TrainConfig tc;
  tc.lr = 3e-3;
  tc.batch_size = 4;
  tc.total_steps = 300;
  tc.val_every = 300;
  tc.window = 16;
  tc.seed = 8;
  auto trainer = Trainer::fresh(mc, tc, stream, stream, stream);
  trainer.run();
  const TransformerProvider model(trainer.params(), 16);
  Rng rng(4);
  const auto T = model_implied_operator(model, std::span<const Token>(stream).first(200), 1, 64, rng);
  ASSERT_EQ(T.size(), 2);
  EXPECT_EQ(T.labels[0], KGram{1});
  EXPECT_EQ(T.labels[1], KGram{4});
  EXPECT_LT(T.P(0, 0), 0.02);
  EXPECT_LT(T.P(1, 1), 0.02);
  const auto spec = transfer_spectrum(T.P, 2);
  EXPECT_NEAR(std::abs(spec.eigenvalues[0]), 1.0, 1e-9);
  EXPECT_NEAR(std::abs(spec.eigenvalues[1]), 1.0, 0.04);
}

TEST(KgramMatrix, CountsAndLag) {
  const std::vector<Token> tokens{1, 2, 3, 1, 2, 3, 1};
  const auto T = kgram_transition_matrix(tokens, 2, 1);
  ASSERT_EQ(T.size(), 3);
  expect_row_stochastic(T);
  EXPECT_EQ(T.P(label_index(T, {1, 2}), label_index(T, {2, 3})), 1.0);
  EXPECT_EQ(T.P(label_index(T, {3, 1}), label_index(T, {1, 2})), 1.0);
  // The last 2-gram (3, 1) has a successor only once; (2, 3) twice.
  EXPECT_EQ(T.counts(label_index(T, {2, 3}), label_index(T, {3, 1})), 2.0);
  const auto T2 = kgram_transition_matrix(tokens, 1, 3);
  EXPECT_EQ(T2.P, Matrix::Identity(3, 3));
  EXPECT_THROW(kgram_transition_matrix(tokens, 0, 1), InvalidArgument);
}

TEST(GroundTruth, PeriodTwoIsPermutation) {
  ObservationSeries s;
  for (int i = 0; i < 1000; ++i) s.values.push_back(i % 2 == 0 ? 1.0 : -1.0);
  const QuantizerSpec q(10, -2.0, 2.0);
  const auto T = ground_truth_delay_operator(s, q, 1);
  ASSERT_EQ(T.size(), 2);
  EXPECT_EQ(T.P, (Matrix(2, 2) << 0, 1, 1, 0).finished());
  const auto spec = transfer_spectrum(T.P, 2);
  EXPECT_NEAR(std::accumulate(spec.modes[0].begin(), spec.modes[0].end(), 0.0), 1.0, 1e-12);
  EXPECT_NEAR(std::abs(spec.eigenvalues[1]), 1.0, 1e-9);
  ObservationSeries tiny;
  tiny.values = {1.0, 2.0};
  EXPECT_THROW(ground_truth_delay_operator(tiny, q, 1, 1), InvalidArgument);
}

TEST(GroundTruth, LorenzTwoSampleSelfConsistency) {
  const auto sys = make_system("lorenz63");
  const double dt = sys.default_dt;
  const long n = 100000, transient = 1000;
  const auto traj = integrate(sys, sys.default_y0, static_cast<double>(2 * n + transient - 1) * dt, dt);
  const auto a = observe(traj, 0, transient);
  ObservationSeries first, second;
  first.values.assign(a.values.begin(), a.values.begin() + n);
  second.values.assign(a.values.begin() + n, a.values.end());
  const QuantizerSpec q;
  const double scale = fit_scale(first.values);
  for (int k : {1, 2}) {
    const auto T1 = recurrent_restriction(ground_truth_delay_operator(first, q, k, 1, scale));
    const auto T2 = recurrent_restriction(ground_truth_delay_operator(second, q, k, 1, scale));
    const auto pi1 = stationary_distribution(T1.P).pi;
    const auto pi2 = stationary_distribution(T2.P).pi;
    const auto al = align_distributions(T1.labels, pi1, T2.labels, pi2);
    EXPECT_LT(kl_divergence(al.p, al.q), 0.05) << "k=" << k;
  }
}

TEST(Recurrent, DropsTransientAndPicksHeaviestClass) {
  TransitionMatrix T;
  T.counts = Matrix::Zero(5, 5);
  // 0 -> 1 (transient), {1, 2} closed, {3, 4} closed and heavier.
  T.counts(0, 1) = 1;
  T.counts(1, 2) = 2;
  T.counts(2, 1) = 2;
  T.counts(3, 4) = 10;
  T.counts(4, 3) = 10;
  T.P = T.counts;
  for (int i = 0; i < 5; ++i) T.P.row(i) /= T.P.row(i).sum();
  for (int i = 0; i < 5; ++i) T.labels.push_back({i + 1});
  T.empty_rows.assign(5, false);
  const auto R = recurrent_restriction(T);
  ASSERT_EQ(R.size(), 2);
  EXPECT_EQ(R.labels[0], KGram{4});
  EXPECT_EQ(R.labels[1], KGram{5});
  EXPECT_NO_THROW(stationary_distribution(R.P));
}

TEST(Recurrent, PrunesStatesLeadingToDeadEnds) {
  // 0 <-> 1, 1 -> 2, and 2 has no outgoing transitions.
  const std::vector<Token> tokens{1, 2, 1, 2, 3};
  const auto T = kgram_transition_matrix(tokens, 1, 1);
  const auto R = recurrent_restriction(T);
  ASSERT_EQ(R.size(), 2);
  expect_row_stochastic(R);
  EXPECT_EQ(R.P, (Matrix(2, 2) << 0, 1, 1, 0).finished());
}

TEST(Align, UnionOfLabels) {
  const std::vector<KGram> lp{{1, 2}, {2, 2}}, lq{{2, 2}, {3, 1}};
  const std::vector<double> p{0.4, 0.6}, q{0.5, 0.5};
  const auto al = align_distributions(lp, p, lq, q);
  ASSERT_EQ(al.labels.size(), 3u);
  EXPECT_EQ(al.labels[0], (KGram{1, 2}));
  EXPECT_EQ(al.p, (std::vector<double>{0.4, 0.6, 0.0}));
  EXPECT_EQ(al.q, (std::vector<double>{0.0, 0.5, 0.5}));
  EXPECT_EQ(label_string({12, 13}), "12-13");
  EXPECT_EQ(label_string({7}), "7");
}

TEST(Export, OperatorCsvAndJson) {
  const auto T = kgram_transition_matrix(std::vector<Token>{1, 2, 1, 1, 2}, 1, 1);
  const auto path = (std::filesystem::temp_directory_path() / "icdyn_operator_test.csv").string();
  write_operator_csv(T, path);
  std::ifstream is(path);
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "from_state,to_state,probability");
  int rows = 0;
  while (std::getline(is, line)) ++rows;
  EXPECT_EQ(rows, 3);
  std::filesystem::remove(path);
  const auto j = operator_labels_json(T);
  EXPECT_EQ(j["size"], 2);
  EXPECT_EQ(j["states"][1]["label"], "2");
  const auto spec = transfer_spectrum(T.P, 2);
  const auto sj = spectrum_json(spec, T.labels);
  EXPECT_EQ(sj["eigenvalue_magnitudes"].size(), 2u);
  EXPECT_TRUE(sj["modes"][0]["vector"].contains("1"));
}
