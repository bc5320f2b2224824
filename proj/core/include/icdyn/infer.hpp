#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "icdyn/model.hpp"
#include "icdyn/quant.hpp"
#include "icdyn/rng.hpp"

namespace icdyn {

struct GenerationConfig {
  long horizon = 0;
  double temperature = 1.0;  // 0 selects the argmax
  int context_limit = 512;
  std::uint64_t seed = 0;

  void validate() const;
};

// Anything that maps a token context to a distribution over the next token.
// Distributions have V + 1 entries; entry 0 is the padding token.
class NextTokenProvider {
 public:
  virtual ~NextTokenProvider() = default;

  virtual int vocab_size() const = 0;
  // Longest context the provider looks at; longer contexts are truncated.
  virtual int context_limit() const = 0;
  virtual std::vector<double> next_token_distribution(std::span<const Token> context) const = 0;

  // Row t is the distribution after window[0..t]. The default queries every
  // prefix; providers with a cheaper batched path override it.
  virtual std::vector<std::vector<double>> window_distributions(std::span<const Token> window) const;
};

class TransformerProvider : public NextTokenProvider {
 public:
  // Keeps a reference: `params` must outlive the provider.
  TransformerProvider(const ModelParams<float>& params, int context_limit = 512);

  int vocab_size() const override { return params_.config.vocab_size; }
  int context_limit() const override { return context_limit_; }
  std::vector<double> next_token_distribution(std::span<const Token> context) const override;
  std::vector<std::vector<double>> window_distributions(std::span<const Token> window) const override;

 private:
  const ModelParams<float>& params_;
  int context_limit_;
};

// Next-token distributions for every position t in [first, N - 2] of a
// stream, i.e. predictions of x_{t+1}. Positions before the context limit see
// the whole prefix; later ones come from windows of length C advanced by C/2,
// so every context holds between C/2 and C tokens. Entry i belongs to
// position first + i.
std::vector<std::vector<double>> stream_distributions(const NextTokenProvider& model,
                                                      std::span<const Token> tokens,
                                                      std::size_t first = 0);

// Softmax of the final-position logits over the last C tokens of `context`.
std::vector<double> next_token_distribution(const ModelParams<float>& params,
                                            std::span<const Token> context, int context_limit = 512);

// Picks a token from logits with padding masked out. temperature 0 takes the
// argmax (lowest index on ties); otherwise samples softmax(logits / temperature).
Token select_token(std::span<const double> logits, double temperature, Rng& rng);

// Appends gen.horizon tokens to `context`, each conditioned on the last
// context_limit tokens. Sampling draws from the "sampling" sub-stream of gen.seed.
TokenSequence generate(const ModelParams<float>& params, const TokenSequence& context,
                       const GenerationConfig& gen);
// Same loop driven by a provider; its log-probabilities act as logits.
TokenSequence generate(const NextTokenProvider& model, const TokenSequence& context,
                       const GenerationConfig& gen);

std::vector<double> mean_regression_baseline(std::span<const double> context, long horizon);

// CSV with columns step, token, value, one row per position of the returned
// sequence (context first, then the generated tokens).
void write_forecast_csv(std::span<const Token> generated, std::span<const double> values,
                        const std::string& path);

}  // namespace icdyn
