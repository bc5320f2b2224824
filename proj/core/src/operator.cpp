#include "icdyn/operator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>

#include "icdyn/errors.hpp"
#include "icdyn/rng.hpp"

namespace icdyn {

namespace {

int nearest_center(const Matrix& points, Eigen::Index row, const Matrix& centers) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index c = 0; c < centers.rows(); ++c) {
    const double d = (points.row(row) - centers.row(c)).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  return best;
}

std::vector<double> non_padding(const std::vector<double>& p) {
  std::vector<double> out(p.begin() + 1, p.end());
  const double sum = std::accumulate(out.begin(), out.end(), 0.0);
  if (!(sum > 0.0)) throw NumericalError("provider distribution has no mass outside padding");
  for (double& x : out) x /= sum;
  return out;
}

bool has_padding(std::span<const Token> window) {
  return std::find(window.begin(), window.end(), kPaddingToken) != window.end();
}

void normalize_rows(TransitionMatrix& T) {
  const auto n = static_cast<int>(T.counts.rows());
  T.empty_rows.assign(static_cast<std::size_t>(n), false);
  T.P = Matrix::Zero(n, n);
  for (int i = 0; i < n; ++i) {
    const double sum = T.counts.row(i).sum();
    if (sum > 0.0) {
      T.P.row(i) = T.counts.row(i) / sum;
    } else {
      T.empty_rows[static_cast<std::size_t>(i)] = true;
    }
  }
}

// Keeps states in `keep` (sorted), renormalizing.
TransitionMatrix subset(const TransitionMatrix& T, const std::vector<int>& keep) {
  TransitionMatrix out;
  out.lag = T.lag;
  const auto n = static_cast<Eigen::Index>(keep.size());
  out.counts = Matrix::Zero(n, n);
  for (Eigen::Index a = 0; a < n; ++a) {
    out.labels.push_back(T.labels[static_cast<std::size_t>(keep[a])]);
    for (Eigen::Index b = 0; b < n; ++b) out.counts(a, b) = T.counts(keep[a], keep[b]);
  }
  normalize_rows(out);
  return out;
}

// Repeatedly drops states whose row has no mass inside the surviving set.
std::vector<int> closed_support(const Matrix& counts) {
  const auto n = counts.rows();
  std::vector<bool> alive(static_cast<std::size_t>(n), true);
  for (bool changed = true; changed;) {
    changed = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (!alive[i]) continue;
      double mass = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        if (alive[j]) mass += counts(i, j);
      }
      if (!(mass > 0.0)) {
        alive[i] = false;
        changed = true;
      }
    }
  }
  std::vector<int> keep;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (alive[i]) keep.push_back(static_cast<int>(i));
  }
  return keep;
}

// Tarjan's strongly connected components, iterative. comp[i] is the component id.
std::vector<int> strong_components(const std::vector<std::vector<int>>& adj, int& n_comp) {
  const int n = static_cast<int>(adj.size());
  std::vector<int> index(n, -1), low(n, 0), comp(n, -1), stack;
  std::vector<bool> on_stack(n, false);
  int counter = 0;
  n_comp = 0;
  struct Frame {
    int v;
    std::size_t next;
  };
  for (int s = 0; s < n; ++s) {
    if (index[s] >= 0) continue;
    std::vector<Frame> call{{s, 0}};
    index[s] = low[s] = counter++;
    stack.push_back(s);
    on_stack[s] = true;
    while (!call.empty()) {
      Frame& f = call.back();
      if (f.next < adj[f.v].size()) {
        const int w = adj[f.v][f.next++];
        if (index[w] < 0) {
          index[w] = low[w] = counter++;
          stack.push_back(w);
          on_stack[w] = true;
          call.push_back({w, 0});
        } else if (on_stack[w]) {
          low[f.v] = std::min(low[f.v], index[w]);
        }
        continue;
      }
      const int v = f.v;
      call.pop_back();
      if (!call.empty()) low[call.back().v] = std::min(low[call.back().v], low[v]);
      if (low[v] == index[v]) {
        for (;;) {
          const int w = stack.back();
          stack.pop_back();
          on_stack[w] = false;
          comp[w] = n_comp;
          if (w == v) break;
        }
        ++n_comp;
      }
    }
  }
  return comp;
}

}  // namespace

Partition kmeans_partition(const Matrix& points, int K, std::uint64_t seed, int max_iter) {
  const auto N = points.rows();
  if (K < 1) throw InvalidArgument("kmeans_partition: K must be >= 1");
  if (K > N) throw InvalidArgument("kmeans_partition: K exceeds the number of points");
  if (points.cols() < 1) throw InvalidArgument("kmeans_partition: points have no columns");
  if (max_iter < 1) throw InvalidArgument("kmeans_partition: max_iter must be >= 1");

  Rng rng = Rng::derive(seed, "kmeans");
  Matrix centers(K, points.cols());
  const auto first = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(N)));
  centers.row(0) = points.row(first);
  Vector dmin(N);
  for (Eigen::Index i = 0; i < N; ++i) dmin[i] = (points.row(i) - centers.row(0)).squaredNorm();
  for (int c = 1; c < K; ++c) {
    Eigen::Index far = 0;
    for (Eigen::Index i = 1; i < N; ++i) {
      if (dmin[i] > dmin[far]) far = i;
    }
    centers.row(c) = points.row(far);
    for (Eigen::Index i = 0; i < N; ++i) {
      dmin[i] = std::min(dmin[i], (points.row(i) - centers.row(c)).squaredNorm());
    }
  }

  std::vector<int> assign(static_cast<std::size_t>(N), -1);
  for (int it = 0; it < max_iter; ++it) {
    bool changed = false;
    for (Eigen::Index i = 0; i < N; ++i) {
      const int c = nearest_center(points, i, centers);
      if (c != assign[i]) {
        assign[i] = c;
        changed = true;
      }
    }
    if (!changed) break;
    Matrix sums = Matrix::Zero(K, points.cols());
    std::vector<long> size(static_cast<std::size_t>(K), 0);
    for (Eigen::Index i = 0; i < N; ++i) {
      sums.row(assign[i]) += points.row(i);
      ++size[assign[i]];
    }
    for (int c = 0; c < K; ++c) {
      if (size[c] > 0) centers.row(c) = sums.row(c) / static_cast<double>(size[c]);
    }
  }
  return Partition{centers};
}

std::vector<int> symbolize(const Matrix& points, const Partition& partition) {
  if (partition.K() < 1) throw InvalidArgument("symbolize: empty partition");
  if (points.cols() != partition.centers.cols()) throw InvalidArgument("symbolize: dimension mismatch");
  std::vector<int> out(static_cast<std::size_t>(points.rows()));
  for (Eigen::Index i = 0; i < points.rows(); ++i) out[i] = nearest_center(points, i, partition.centers) + 1;
  return out;
}

TransitionMatrix ulam_matrix(std::span<const int> symbols, int K, int tau) {
  if (K < 1) throw InvalidArgument("ulam_matrix: K must be >= 1");
  if (tau < 1) throw InvalidArgument("ulam_matrix: tau must be >= 1");
  if (static_cast<std::size_t>(tau) >= symbols.size()) throw InvalidArgument("ulam_matrix: tau >= sequence length");
  TransitionMatrix T;
  T.lag = tau;
  T.counts = Matrix::Zero(K, K);
  for (int i = 1; i <= K; ++i) T.labels.push_back({i});
  for (int s : symbols) {
    if (s < 1 || s > K) throw InvalidArgument("ulam_matrix: symbol outside 1..K");
  }
  for (std::size_t t = 0; t + static_cast<std::size_t>(tau) < symbols.size(); ++t) {
    T.counts(symbols[t] - 1, symbols[t + tau] - 1) += 1.0;
  }
  normalize_rows(T);
  return T;
}

double mean_row_entropy(const TransitionMatrix& T) {
  double sum = 0.0;
  long rows = 0;
  for (int i = 0; i < T.size(); ++i) {
    if (T.empty_rows[i]) continue;
    sum += entropy(std::span<const double>(T.P.row(i).data(), static_cast<std::size_t>(T.P.cols())));
    ++rows;
  }
  return rows == 0 ? 0.0 : sum / static_cast<double>(rows);
}

PartitionSelection select_partition_size(const Matrix& points, std::span<const int> candidates, int tau,
                                         std::uint64_t seed) {
  if (candidates.empty()) throw InvalidArgument("select_partition_size: no candidates");
  PartitionSelection out;
  double best = -1.0;
  for (int K : candidates) {
    const auto partition = kmeans_partition(points, K, seed);
    const auto symbols = symbolize(points, partition);
    const double h = mean_row_entropy(ulam_matrix(symbols, K, tau));
    out.candidates.push_back(K);
    out.mean_entropy.push_back(h);
    constexpr double tie = 1e-12;
    if (out.best_K == 0 || h > best + tie || (std::abs(h - best) <= tie && K < out.best_K)) {
      best = h;
      out.best_K = K;
    }
  }
  return out;
}

MarkovOrderResult best_markov_order(const NextTokenProvider& model, std::span<const Token> tokens,
                                    std::span<const int> orders, double smoothing) {
  if (orders.empty()) throw InvalidArgument("best_markov_order: no orders");
  const int max_order = *std::max_element(orders.begin(), orders.end());
  if (*std::min_element(orders.begin(), orders.end()) < 1) throw InvalidArgument("best_markov_order: orders must be >= 1");
  if (tokens.size() < static_cast<std::size_t>(max_order) + 2) {
    throw InvalidArgument("best_markov_order: token stream too short for the largest order");
  }
  const int V = model.vocab_size();
  const std::size_t first = static_cast<std::size_t>(max_order) - 1;
  const auto model_rows = stream_distributions(model, tokens, first);
  std::vector<std::vector<double>> model_p;
  model_p.reserve(model_rows.size());
  for (const auto& row : model_rows) model_p.push_back(non_padding(row));

  MarkovOrderResult out;
  out.positions = static_cast<long>(model_p.size());
  double best = std::numeric_limits<double>::infinity();
  for (int k : orders) {
    const auto chain = fit_markov(tokens, k, V, smoothing);
    double sum = 0.0;
    for (std::size_t i = 0; i < model_p.size(); ++i) {
      const std::size_t t = first + i;
      const auto q = non_padding(chain.next_token_distribution(tokens.first(t + 1)));
      sum += kl_divergence(model_p[i], q);
    }
    const double mean = sum / static_cast<double>(model_p.size());
    out.orders.push_back(k);
    out.mean_kl.push_back(mean);
    constexpr double tie = 1e-12;
    if (out.best_order == 0 || mean < best - tie || (std::abs(mean - best) <= tie && k < out.best_order)) {
      best = mean;
      out.best_order = k;
    }
  }
  return out;
}

LaggedConditional lagged_conditional(const NextTokenProvider& model, std::span<const Token> tokens, int lag) {
  if (lag < 0 || static_cast<std::size_t>(lag) + 2 > tokens.size()) {
    throw InvalidArgument("lagged_conditional: lag out of range for the token stream");
  }
  const int V = model.vocab_size();
  LaggedConditional out;
  out.lag = lag;
  out.P = Matrix::Zero(V, V);
  out.occurrences.assign(static_cast<std::size_t>(V), 0);
  const auto rows = stream_distributions(model, tokens, static_cast<std::size_t>(lag));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const std::size_t t = static_cast<std::size_t>(lag) + i;
    const Token v = tokens[t - static_cast<std::size_t>(lag)];
    if (v < 1 || v > V) continue;
    const auto p = non_padding(rows[i]);
    out.P.row(v - 1) += Eigen::Map<const Eigen::RowVectorXd>(p.data(), V);
    ++out.occurrences[static_cast<std::size_t>(v - 1)];
  }
  out.empty_rows.assign(static_cast<std::size_t>(V), false);
  for (int v = 0; v < V; ++v) {
    if (out.occurrences[v] > 0) {
      out.P.row(v) /= static_cast<double>(out.occurrences[v]);
    } else {
      out.empty_rows[v] = true;
    }
  }
  return out;
}

TransitionMatrix model_implied_operator(const NextTokenProvider& model, std::span<const Token> tokens, int k,
                                        int samples_per_gram, Rng& rng) {
  const int C = model.context_limit();
  if (k < 1) throw InvalidArgument("model_implied_operator: k must be >= 1");
  if (k >= C) throw InvalidArgument("model_implied_operator: k must be smaller than the context limit");
  if (samples_per_gram < 1) throw InvalidArgument("model_implied_operator: samples_per_gram must be >= 1");
  if (tokens.size() < static_cast<std::size_t>(C)) {
    throw InvalidArgument("model_implied_operator: stream shorter than one context window");
  }
  const auto kk = static_cast<std::size_t>(k);
  const auto CC = static_cast<std::size_t>(C);

  std::map<KGram, std::vector<std::size_t>> ends;
  for (std::size_t t = CC - 1; t < tokens.size(); ++t) {
    const auto gram = tokens.subspan(t + 1 - kk, kk);
    if (has_padding(gram)) continue;
    ends[KGram(gram.begin(), gram.end())].push_back(t);
  }
  if (ends.empty()) throw InvalidArgument("model_implied_operator: no k-grams found");

  TransitionMatrix T;
  T.lag = 1;
  std::map<KGram, int> index;
  for (const auto& [gram, _] : ends) {
    index.emplace(gram, static_cast<int>(T.labels.size()));
    T.labels.push_back(gram);
  }
  const auto n = static_cast<Eigen::Index>(T.labels.size());
  T.counts = Matrix::Zero(n, n);
  const int V = model.vocab_size();

  for (const auto& [gram, positions] : ends) {
    std::vector<std::size_t> pick = positions;
    const auto take = std::min(pick.size(), static_cast<std::size_t>(samples_per_gram));
    if (take < pick.size()) {
      for (std::size_t i = 0; i < take; ++i) {
        const auto j = i + static_cast<std::size_t>(rng.below(pick.size() - i));
        std::swap(pick[i], pick[j]);
      }
      pick.resize(take);
    }
    std::vector<double> mean(static_cast<std::size_t>(V) + 1, 0.0);
    for (std::size_t t : pick) {
      const auto p = model.next_token_distribution(tokens.subspan(t + 1 - CC, CC));
      for (std::size_t x = 0; x < mean.size(); ++x) mean[x] += p[x];
    }
    const int row = index.at(gram);
    KGram next(gram.begin() + 1, gram.end());
    next.push_back(0);
    for (int x = 1; x <= V; ++x) {
      next.back() = x;
      const auto it = index.find(next);
      if (it != index.end()) T.counts(row, it->second) += mean[static_cast<std::size_t>(x)];
    }
  }
  const auto keep = closed_support(T.counts);
  if (keep.empty()) throw NumericalError("model_implied_operator: no closed set of visited k-grams");
  return subset(T, keep);
}

TransitionMatrix kgram_transition_matrix(std::span<const Token> tokens, int k, int tau) {
  if (k < 1) throw InvalidArgument("kgram_transition_matrix: k must be >= 1");
  if (tau < 1) throw InvalidArgument("kgram_transition_matrix: tau must be >= 1");
  const auto kk = static_cast<std::size_t>(k);
  const auto tt = static_cast<std::size_t>(tau);
  if (tokens.size() < kk + tt) throw InvalidArgument("kgram_transition_matrix: token stream too short");

  std::map<KGram, int> index;
  for (std::size_t t = kk - 1; t < tokens.size(); ++t) {
    const auto gram = tokens.subspan(t + 1 - kk, kk);
    if (!has_padding(gram)) index.emplace(KGram(gram.begin(), gram.end()), 0);
  }
  TransitionMatrix T;
  T.lag = tau;
  for (auto& [gram, id] : index) {
    id = static_cast<int>(T.labels.size());
    T.labels.push_back(gram);
  }
  const auto n = static_cast<Eigen::Index>(T.labels.size());
  T.counts = Matrix::Zero(n, n);
  for (std::size_t t = kk - 1; t + tt < tokens.size(); ++t) {
    const auto from = tokens.subspan(t + 1 - kk, kk);
    const auto to = tokens.subspan(t + tt + 1 - kk, kk);
    if (has_padding(from) || has_padding(to)) continue;
    T.counts(index.at(KGram(from.begin(), from.end())), index.at(KGram(to.begin(), to.end()))) += 1.0;
  }
  normalize_rows(T);
  return T;
}

TransitionMatrix ground_truth_delay_operator(const ObservationSeries& series, const QuantizerSpec& quant, int k,
                                             int tau, std::optional<double> scale) {
  if (k < 1 || tau < 1) throw InvalidArgument("ground_truth_delay_operator: k and tau must be >= 1");
  if (series.values.size() < static_cast<std::size_t>(k + tau) + 1) {
    throw InvalidArgument("ground_truth_delay_operator: series too short");
  }
  const auto tokens = scale ? encode_with_scale(series.values, *scale, quant) : encode(series.values, quant);
  return kgram_transition_matrix(tokens.tokens, k, tau);
}

TransitionMatrix recurrent_restriction(const TransitionMatrix& T) {
  const auto alive = closed_support(T.counts);
  if (alive.empty()) throw NumericalError("recurrent_restriction: no state has a surviving transition");
  const TransitionMatrix S = subset(T, alive);
  const int n = S.size();
  std::vector<std::vector<int>> adj(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (S.counts(i, j) > 0.0) adj[i].push_back(j);
    }
  }
  int n_comp = 0;
  const auto comp = strong_components(adj, n_comp);
  std::vector<bool> closed(static_cast<std::size_t>(n_comp), true);
  std::vector<double> mass(static_cast<std::size_t>(n_comp), 0.0);
  for (int i = 0; i < n; ++i) {
    mass[comp[i]] += S.counts.row(i).sum();
    for (int j : adj[i]) {
      if (comp[j] != comp[i]) closed[comp[i]] = false;
    }
  }
  int best = -1;
  for (int c = 0; c < n_comp; ++c) {
    if (closed[c] && (best < 0 || mass[c] > mass[best])) best = c;
  }
  std::vector<int> keep;
  for (int i = 0; i < n; ++i) {
    if (comp[i] == best) keep.push_back(i);
  }
  return subset(S, keep);
}

AlignedDistributions align_distributions(const std::vector<KGram>& labels_p, std::span<const double> p,
                                         const std::vector<KGram>& labels_q, std::span<const double> q) {
  if (labels_p.size() != p.size() || labels_q.size() != q.size()) {
    throw InvalidArgument("align_distributions: label and value counts differ");
  }
  std::map<KGram, std::pair<double, double>> merged;
  for (std::size_t i = 0; i < p.size(); ++i) merged[labels_p[i]].first += p[i];
  for (std::size_t i = 0; i < q.size(); ++i) merged[labels_q[i]].second += q[i];
  AlignedDistributions out;
  for (const auto& [label, pq] : merged) {
    out.labels.push_back(label);
    out.p.push_back(pq.first);
    out.q.push_back(pq.second);
  }
  return out;
}

std::string label_string(const KGram& label) {
  std::string s;
  for (std::size_t i = 0; i < label.size(); ++i) {
    if (i) s += '-';
    s += std::to_string(label[i]);
  }
  return s;
}

void write_operator_csv(const TransitionMatrix& T, const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw FormatError("cannot write " + path);
  std::fprintf(f, "from_state,to_state,probability\n");
  for (int i = 0; i < T.size(); ++i) {
    for (int j = 0; j < T.size(); ++j) {
      if (T.P(i, j) != 0.0) std::fprintf(f, "%d,%d,%.17g\n", i, j, T.P(i, j));
    }
  }
  std::fclose(f);
}

nlohmann::json operator_labels_json(const TransitionMatrix& T) {
  nlohmann::json states = nlohmann::json::array();
  for (int i = 0; i < T.size(); ++i) {
    states.push_back({{"index", i},
                      {"label", label_string(T.labels[i])},
                      {"tokens", T.labels[i]},
                      {"empty", static_cast<bool>(T.empty_rows[i])}});
  }
  return {{"lag", T.lag}, {"size", T.size()}, {"states", states}};
}

nlohmann::json spectrum_json(const SpectrumResult& spectrum, const std::vector<KGram>& labels) {
  nlohmann::json modes = nlohmann::json::array();
  for (std::size_t m = 0; m < spectrum.eigenvalues.size(); ++m) {
    const auto lambda = spectrum.eigenvalues[m];
    nlohmann::json vec = nlohmann::json::object();
    for (std::size_t i = 0; i < spectrum.modes[m].size() && i < labels.size(); ++i) {
      vec[label_string(labels[i])] = spectrum.modes[m][i];
    }
    modes.push_back({{"real", lambda.real()},
                     {"imag", lambda.imag()},
                     {"magnitude", std::abs(lambda)},
                     {"residual", spectrum.residuals[m]},
                     {"vector", vec}});
  }
  nlohmann::json magnitudes = nlohmann::json::array();
  for (const auto& l : spectrum.eigenvalues) magnitudes.push_back(std::abs(l));
  return {{"eigenvalue_magnitudes", magnitudes}, {"modes", modes}};
}

}  // namespace icdyn
