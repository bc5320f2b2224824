#include "icdyn/infer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>

#include "icdyn/errors.hpp"

namespace icdyn {

void GenerationConfig::validate() const {
  if (horizon < 0) throw InvalidArgument("GenerationConfig: horizon must be >= 0");
  if (!(temperature >= 0.0) || !std::isfinite(temperature)) {
    throw InvalidArgument("GenerationConfig: temperature must be finite and >= 0");
  }
  if (context_limit < 1) throw InvalidArgument("GenerationConfig: context_limit must be >= 1");
}

std::vector<std::vector<double>> NextTokenProvider::window_distributions(
    std::span<const Token> window) const {
  std::vector<std::vector<double>> out;
  out.reserve(window.size());
  for (std::size_t t = 0; t < window.size(); ++t) out.push_back(next_token_distribution(window.first(t + 1)));
  return out;
}

namespace {

std::vector<double> softmax_row(const float* logits, int n) {
  double hi = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) hi = std::max(hi, static_cast<double>(logits[i]));
  std::vector<double> p(static_cast<std::size_t>(n));
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    p[i] = std::exp(static_cast<double>(logits[i]) - hi);
    sum += p[i];
  }
  for (double& x : p) x /= sum;
  return p;
}

std::span<const Token> tail(std::span<const Token> context, int limit) {
  if (context.size() > static_cast<std::size_t>(limit)) return context.last(static_cast<std::size_t>(limit));
  return context;
}

int effective_limit(const ModelParams<float>& params, int context_limit) {
  if (context_limit < 1) throw InvalidArgument("context_limit must be >= 1");
  return std::min(context_limit, params.config.block_size);
}

}  // namespace

TransformerProvider::TransformerProvider(const ModelParams<float>& params, int context_limit)
    : params_(params), context_limit_(effective_limit(params, context_limit)) {}

std::vector<double> TransformerProvider::next_token_distribution(std::span<const Token> context) const {
  return icdyn::next_token_distribution(params_, context, context_limit_);
}

std::vector<std::vector<double>> TransformerProvider::window_distributions(
    std::span<const Token> window) const {
  if (window.empty()) throw InvalidArgument("window_distributions: empty window");
  if (window.size() > static_cast<std::size_t>(context_limit_)) {
    throw InvalidArgument("window_distributions: window longer than the context limit");
  }
  const auto trace = forward<float>(window, params_);
  const int n = static_cast<int>(trace.logits.cols());
  std::vector<std::vector<double>> out;
  out.reserve(window.size());
  for (Eigen::Index t = 0; t < trace.logits.rows(); ++t) out.push_back(softmax_row(trace.logits.row(t).data(), n));
  return out;
}

std::vector<std::vector<double>> stream_distributions(const NextTokenProvider& model,
                                                      std::span<const Token> tokens,
                                                      std::size_t first) {
  const std::size_t N = tokens.size();
  if (N < 2 || first > N - 2) return {};
  const auto C = static_cast<std::size_t>(model.context_limit());
  std::vector<std::vector<double>> out;
  out.reserve(N - 1 - first);
  const std::size_t last = N - 2;

  if (first < C) {
    const std::size_t len = std::min(C, N - 1);
    auto rows = model.window_distributions(tokens.first(len));
    for (std::size_t t = first; t < len && t <= last; ++t) out.push_back(std::move(rows[t]));
  }
  const std::size_t hop = std::max<std::size_t>(1, C / 2);
  // Window starting at o serves positions [o + C - hop, o + C - 1].
  std::size_t next = std::max(first, C);
  while (next <= last) {
    const std::size_t o = std::min(next + hop - C - (next - C) % hop, N - C);
    auto rows = model.window_distributions(tokens.subspan(o, C));
    for (std::size_t t = next; t < o + C && t <= last; ++t) out.push_back(std::move(rows[t - o]));
    next = o + C;
  }
  return out;
}

std::vector<double> next_token_distribution(const ModelParams<float>& params,
                                            std::span<const Token> context, int context_limit) {
  if (context.empty()) throw InvalidArgument("next_token_distribution: empty context");
  const auto ctx = tail(context, effective_limit(params, context_limit));
  const auto trace = forward<float>(ctx, params);
  const auto last = trace.logits.rows() - 1;
  return softmax_row(trace.logits.row(last).data(), static_cast<int>(trace.logits.cols()));
}

Token select_token(std::span<const double> logits, double temperature, Rng& rng) {
  if (logits.size() < 2) throw InvalidArgument("select_token: need at least one non-padding logit");
  if (temperature == 0.0) {
    std::size_t best = 1;
    for (std::size_t i = 2; i < logits.size(); ++i) {
      if (logits[i] > logits[best]) best = i;
    }
    return static_cast<Token>(best);
  }
  double hi = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 1; i < logits.size(); ++i) hi = std::max(hi, logits[i] / temperature);
  std::vector<double> w(logits.size(), 0.0);
  double sum = 0.0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    w[i] = std::exp(logits[i] / temperature - hi);
    sum += w[i];
  }
  const double u = rng.uniform() * sum;
  double acc = 0.0;
  std::size_t last_positive = 1;
  for (std::size_t i = 1; i < w.size(); ++i) {
    if (w[i] <= 0.0) continue;
    last_positive = i;
    acc += w[i];
    if (u < acc) return static_cast<Token>(i);
  }
  return static_cast<Token>(last_positive);
}

namespace {

template <class LogitFn>
TokenSequence generate_loop(const TokenSequence& context, const GenerationConfig& gen, int limit,
                            LogitFn&& logits_for) {
  gen.validate();
  if (context.tokens.empty() && gen.horizon > 0) throw InvalidArgument("generate: empty context");
  TokenSequence out = context;
  out.tokens.reserve(context.tokens.size() + static_cast<std::size_t>(gen.horizon));
  Rng rng = Rng::derive(gen.seed, "sampling");
  for (long h = 0; h < gen.horizon; ++h) {
    const auto ctx = tail(std::span<const Token>(out.tokens), limit);
    const auto logits = logits_for(ctx);
    out.tokens.push_back(select_token(logits, gen.temperature, rng));
  }
  return out;
}

}  // namespace

TokenSequence generate(const ModelParams<float>& params, const TokenSequence& context,
                       const GenerationConfig& gen) {
  const int limit = effective_limit(params, gen.context_limit);
  return generate_loop(context, gen, limit, [&](std::span<const Token> ctx) {
    const auto trace = forward<float>(ctx, params);
    const auto row = trace.logits.row(trace.logits.rows() - 1);
    return std::vector<double>(row.data(), row.data() + row.size());
  });
}

TokenSequence generate(const NextTokenProvider& model, const TokenSequence& context,
                       const GenerationConfig& gen) {
  const int limit = std::min(gen.context_limit, model.context_limit());
  return generate_loop(context, gen, limit, [&](std::span<const Token> ctx) {
    auto p = model.next_token_distribution(ctx);
    for (double& x : p) x = x > 0.0 ? std::log(x) : -std::numeric_limits<double>::infinity();
    return p;
  });
}

std::vector<double> mean_regression_baseline(std::span<const double> context, long horizon) {
  if (context.empty()) throw InvalidArgument("mean_regression_baseline: empty context");
  if (horizon < 0) throw InvalidArgument("mean_regression_baseline: negative horizon");
  const double mean = std::accumulate(context.begin(), context.end(), 0.0) / static_cast<double>(context.size());
  return std::vector<double>(static_cast<std::size_t>(horizon), mean);
}

void write_forecast_csv(std::span<const Token> generated, std::span<const double> values,
                        const std::string& path) {
  if (generated.size() != values.size()) throw InvalidArgument("write_forecast_csv: length mismatch");
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write " + path);
  os << "step,token,value\n" << std::setprecision(17);
  for (std::size_t i = 0; i < generated.size(); ++i) os << i << ',' << generated[i] << ',' << values[i] << '\n';
}

}  // namespace icdyn
