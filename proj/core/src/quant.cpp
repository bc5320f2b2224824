#include "icdyn/quant.hpp"

#include <cmath>
#include <fstream>
#include <limits>

#include "icdyn/errors.hpp"

namespace icdyn {

QuantizerSpec::QuantizerSpec(int vocab_size, double c_min, double c_max, double epsilon)
    : vocab_size_(vocab_size), c_min_(c_min), c_max_(c_max), epsilon_(epsilon) {
  if (vocab_size < 2) throw InvalidArgument("QuantizerSpec: vocab_size must be >= 2");
  if (!(c_min < c_max)) throw InvalidArgument("QuantizerSpec: need c_min < c_max");
  if (!(epsilon > 0.0)) throw InvalidArgument("QuantizerSpec: epsilon must be positive");
  spacing_ = (c_max - c_min) / static_cast<double>(vocab_size - 1);
  centers_.resize(vocab_size);
  for (int j = 0; j < vocab_size; ++j) centers_[j] = c_min + spacing_ * static_cast<double>(j);
  centers_.back() = c_max;
}

Token QuantizerSpec::bin(double normalized) const {
  const double position = (normalized - c_min_) / spacing_ + 0.5;
  if (position <= 0.0) return 1;
  if (position >= static_cast<double>(vocab_size_)) return static_cast<Token>(vocab_size_);
  return static_cast<Token>(std::floor(position)) + 1;
}

double fit_scale(std::span<const double> series, double epsilon) {
  if (series.empty()) throw InvalidArgument("fit_scale: empty series");
  double sum = 0.0;
  for (double x : series) {
    if (!std::isnan(x)) sum += std::abs(x);
  }
  return std::max(sum / static_cast<double>(series.size()), epsilon);
}

TokenSequence encode_with_scale(std::span<const double> series, double scale,
                                const QuantizerSpec& spec) {
  if (!(scale > 0.0) || !std::isfinite(scale)) throw InvalidArgument("encode: scale must be positive");
  TokenSequence out;
  out.scale = scale;
  out.tokens.reserve(series.size());
  for (double x : series) {
    out.tokens.push_back(std::isnan(x) ? kPaddingToken : spec.bin(x / scale));
  }
  return out;
}

TokenSequence encode(std::span<const double> series, const QuantizerSpec& spec) {
  return encode_with_scale(series, fit_scale(series, spec.epsilon()), spec);
}

std::vector<double> decode(std::span<const Token> tokens, double scale, const QuantizerSpec& spec) {
  std::vector<double> out;
  out.reserve(tokens.size());
  for (Token t : tokens) {
    if (t < 0 || t > spec.vocab_size()) {
      throw InvalidArgument("decode: token " + std::to_string(t) + " outside vocabulary");
    }
    out.push_back(t == kPaddingToken ? std::numeric_limits<double>::quiet_NaN()
                                     : scale * spec.centers()[t - 1]);
  }
  return out;
}

std::vector<double> decode(const TokenSequence& tokens, const QuantizerSpec& spec) {
  return decode(tokens.tokens, tokens.scale, spec);
}

void write_tokens_text(const TokenSequence& tokens, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw FormatError("write_tokens_text: cannot open " + path);
  for (Token t : tokens.tokens) os << t << '\n';
}

TokenSequence read_tokens_text(const std::string& path, double scale) {
  std::ifstream is(path);
  if (!is) throw FormatError("read_tokens_text: cannot open " + path);
  TokenSequence out;
  out.scale = scale;
  long t;
  while (is >> t) out.tokens.push_back(static_cast<Token>(t));
  if (!is.eof()) throw FormatError("read_tokens_text: malformed token in " + path);
  return out;
}

}  // namespace icdyn
