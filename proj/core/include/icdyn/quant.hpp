#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace icdyn {

using Token = std::int32_t;
inline constexpr Token kPaddingToken = 0;

// Mean scaling followed by uniform scalar quantization onto V bin centers
// spanning [c_min, c_max]. Token IDs are 1..V; 0 is reserved for padding.
class QuantizerSpec {
 public:
  QuantizerSpec(int vocab_size = 100, double c_min = -15.0, double c_max = 15.0,
                double epsilon = 1e-8);

  int vocab_size() const { return vocab_size_; }
  double c_min() const { return c_min_; }
  double c_max() const { return c_max_; }
  double epsilon() const { return epsilon_; }
  double spacing() const { return spacing_; }
  const std::vector<double>& centers() const { return centers_; }

  // Nearest center for a normalized value; exact midpoints go to the upper bin.
  Token bin(double normalized) const;

 private:
  int vocab_size_;
  double c_min_;
  double c_max_;
  double epsilon_;
  double spacing_;
  std::vector<double> centers_;
};

struct TokenSequence {
  std::vector<Token> tokens;
  double scale = 1.0;

  std::size_t size() const { return tokens.size(); }
};

// max(mean |x_i|, epsilon), NaN entries counted as 0.
double fit_scale(std::span<const double> series, double epsilon = 1e-8);

TokenSequence encode(std::span<const double> series, const QuantizerSpec& spec);
// Encode with a previously stored scale.
TokenSequence encode_with_scale(std::span<const double> series, double scale,
                                const QuantizerSpec& spec);

std::vector<double> decode(const TokenSequence& tokens, const QuantizerSpec& spec);
std::vector<double> decode(std::span<const Token> tokens, double scale, const QuantizerSpec& spec);

void write_tokens_text(const TokenSequence& tokens, const std::string& path);
TokenSequence read_tokens_text(const std::string& path, double scale);

}  // namespace icdyn
