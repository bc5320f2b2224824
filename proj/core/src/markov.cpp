#include "icdyn/markov.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "icdyn/errors.hpp"

namespace icdyn {

namespace {

void check_row(const std::vector<double>& row, int vocab_size, const char* what) {
  if (row.size() != static_cast<std::size_t>(vocab_size) + 1) {
    throw InvalidArgument(std::string("MarkovChain: ") + what + " has the wrong length");
  }
  double sum = 0.0;
  for (double x : row) {
    if (!(x >= 0.0)) throw InvalidArgument(std::string("MarkovChain: ") + what + " has a negative entry");
    sum += x;
  }
  if (row[0] != 0.0) throw InvalidArgument(std::string("MarkovChain: ") + what + " puts mass on padding");
  if (std::abs(sum - 1.0) > 1e-9) throw InvalidArgument(std::string("MarkovChain: ") + what + " does not sum to 1");
}

}  // namespace

MarkovChain::MarkovChain(int order, int vocab_size, std::map<KGram, std::vector<double>> table,
                         std::vector<double> marginal, int context_limit)
    : order_(order),
      vocab_size_(vocab_size),
      table_(std::move(table)),
      marginal_(std::move(marginal)),
      context_limit_(context_limit) {
  if (order < 1) throw InvalidArgument("MarkovChain: order must be >= 1");
  if (context_limit < order) throw InvalidArgument("MarkovChain: context_limit below order");
  if (vocab_size < 1) throw InvalidArgument("MarkovChain: vocab_size must be >= 1");
  check_row(marginal_, vocab_size, "marginal");
  for (const auto& [gram, row] : table_) {
    if (gram.size() != static_cast<std::size_t>(order)) throw InvalidArgument("MarkovChain: k-gram of wrong length");
    for (Token t : gram) {
      if (t < 1 || t > vocab_size) throw InvalidArgument("MarkovChain: k-gram token outside 1..V");
    }
    check_row(row, vocab_size, "row");
  }
}

void MarkovChain::set_context_limit(int limit) {
  if (limit < order_) throw InvalidArgument("MarkovChain: context_limit below order");
  context_limit_ = limit;
}

std::vector<double> MarkovChain::next_token_distribution(std::span<const Token> context) const {
  if (context.empty()) throw InvalidArgument("MarkovChain: empty context");
  if (context.size() < static_cast<std::size_t>(order_)) return marginal_;
  const auto last = context.last(static_cast<std::size_t>(order_));
  const auto it = table_.find(KGram(last.begin(), last.end()));
  return it == table_.end() ? marginal_ : it->second;
}

std::vector<Token> MarkovChain::sample(const KGram& prefix, std::size_t length, Rng& rng) const {
  if (prefix.size() < static_cast<std::size_t>(order_)) throw InvalidArgument("MarkovChain::sample: prefix too short");
  std::vector<Token> out(prefix.begin(), prefix.end());
  out.reserve(std::max(length, prefix.size()));
  while (out.size() < length) {
    const auto p = next_token_distribution(out);
    const double u = rng.uniform();
    double acc = 0.0;
    Token pick = 0;
    for (std::size_t i = 1; i < p.size(); ++i) {
      if (p[i] <= 0.0) continue;
      pick = static_cast<Token>(i);
      acc += p[i];
      if (u < acc) break;
    }
    out.push_back(pick);
  }
  return out;
}

MarkovChain fit_markov(std::span<const Token> tokens, int order, int vocab_size, double smoothing) {
  if (order < 1) throw InvalidArgument("fit_markov: order must be >= 1");
  if (vocab_size < 1) throw InvalidArgument("fit_markov: vocab_size must be >= 1");
  if (!(smoothing >= 0.0)) throw InvalidArgument("fit_markov: smoothing must be >= 0");
  const auto k = static_cast<std::size_t>(order);
  if (tokens.size() < k + 1) throw InvalidArgument("fit_markov: need at least order + 1 tokens");
  for (Token t : tokens) {
    if (t < 0 || t > vocab_size) throw InvalidArgument("fit_markov: token outside vocabulary");
  }

  const std::size_t R = static_cast<std::size_t>(vocab_size) + 1;
  std::map<KGram, std::vector<double>> counts;
  std::vector<double> successor(R, 0.0);
  for (std::size_t t = k; t < tokens.size(); ++t) {
    const auto window = tokens.subspan(t - k, k + 1);
    if (std::find(window.begin(), window.end(), kPaddingToken) != window.end()) continue;
    auto& row = counts[KGram(window.begin(), window.end() - 1)];
    if (row.empty()) row.assign(R, 0.0);
    row[static_cast<std::size_t>(tokens[t])] += 1.0;
    successor[static_cast<std::size_t>(tokens[t])] += 1.0;
  }
  if (counts.empty()) throw InvalidArgument("fit_markov: no padding-free windows");

  std::vector<bool> support(R, false);
  for (std::size_t i = 1; i < R; ++i) support[i] = successor[i] > 0.0;
  const double total = std::accumulate(successor.begin(), successor.end(), 0.0);
  std::vector<double> marginal(R, 0.0);
  for (std::size_t i = 1; i < R; ++i) marginal[i] = successor[i] / total;

  for (auto& [gram, row] : counts) {
    double sum = 0.0;
    for (std::size_t i = 1; i < R; ++i) {
      if (support[i]) row[i] += smoothing;
      sum += row[i];
    }
    for (double& x : row) x /= sum;
  }
  return MarkovChain(order, vocab_size, std::move(counts), std::move(marginal));
}

}  // namespace icdyn
