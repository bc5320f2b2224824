#pragma once

#include <map>
#include <span>
#include <vector>

#include "icdyn/infer.hpp"
#include "icdyn/quant.hpp"
#include "icdyn/rng.hpp"

namespace icdyn {

using KGram = std::vector<Token>;

// Order-k chain over tokens 1..V. Rows are length V + 1 (entry 0, padding,
// is always zero). Contexts whose last k tokens were never seen fall back to
// the marginal next-token distribution. As a provider it advertises a
// context limit like a transformer would; only the last `order` tokens matter.
class MarkovChain : public NextTokenProvider {
 public:
  MarkovChain(int order, int vocab_size, std::map<KGram, std::vector<double>> table,
              std::vector<double> marginal, int context_limit = 512);

  int order() const { return order_; }
  int vocab_size() const override { return vocab_size_; }
  int context_limit() const override { return context_limit_; }
  void set_context_limit(int limit);
  std::vector<double> next_token_distribution(std::span<const Token> context) const override;

  const std::map<KGram, std::vector<double>>& table() const { return table_; }
  const std::vector<double>& marginal() const { return marginal_; }

  // Stream of `length` tokens starting from `prefix` (at least `order` tokens).
  std::vector<Token> sample(const KGram& prefix, std::size_t length, Rng& rng) const;

 private:
  int order_;
  int vocab_size_;
  std::map<KGram, std::vector<double>> table_;
  std::vector<double> marginal_;
  int context_limit_;
};

// k-gram counts with additive smoothing over the set of tokens that occur as
// a successor anywhere in the stream. Windows containing padding are skipped.
MarkovChain fit_markov(std::span<const Token> tokens, int order, int vocab_size,
                       double smoothing = 0.0);

}  // namespace icdyn
