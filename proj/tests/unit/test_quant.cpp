#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <vector>

#include "icdyn/errors.hpp"
#include "icdyn/quant.hpp"
#include "icdyn/rng.hpp"

using namespace icdyn;

namespace {
const double kNaN = std::numeric_limits<double>::quiet_NaN();
QuantizerSpec four() { return QuantizerSpec(4, -1.5, 1.5); }
}  // namespace

TEST(Quantizer, CentersUniformlySpaced) {
  const auto q = four();
  EXPECT_EQ(q.centers(), (std::vector<double>{-1.5, -0.5, 0.5, 1.5}));
  EXPECT_DOUBLE_EQ(q.spacing(), 1.0);
  const QuantizerSpec d;
  EXPECT_EQ(d.vocab_size(), 100);
  EXPECT_EQ(d.c_min(), -15.0);
  EXPECT_EQ(d.c_max(), 15.0);
  EXPECT_EQ(d.centers().front(), -15.0);
  EXPECT_EQ(d.centers().back(), 15.0);
  EXPECT_THROW(QuantizerSpec(1, -1, 1), InvalidArgument);
  EXPECT_THROW(QuantizerSpec(4, 1, 1), InvalidArgument);
  EXPECT_THROW(QuantizerSpec(4, -1, 1, 0.0), InvalidArgument);
}

TEST(FitScale, Examples) {
  EXPECT_DOUBLE_EQ(fit_scale(std::vector<double>{1, -1, 2, 0}), 1.0);
  EXPECT_DOUBLE_EQ(fit_scale(std::vector<double>{0, 0, 0}), 1e-8);
  EXPECT_DOUBLE_EQ(fit_scale(std::vector<double>{1.0, kNaN, 3.0}), 4.0 / 3.0);
  EXPECT_THROW(fit_scale(std::vector<double>{}), InvalidArgument);
}

TEST(Encode, Examples) {
  const auto q = four();
  auto t = encode(std::vector<double>{0.3, -0.9}, q);
  EXPECT_EQ(t.tokens, (std::vector<Token>{3, 1}));
  EXPECT_DOUBLE_EQ(t.scale, 0.6);
  t = encode(std::vector<double>{100.0}, q);
  EXPECT_EQ(t.tokens, (std::vector<Token>{4}));
  EXPECT_DOUBLE_EQ(t.scale, 100.0);
  t = encode(std::vector<double>{5.0, kNaN}, q);
  EXPECT_EQ(t.tokens, (std::vector<Token>{4, 0}));
  EXPECT_DOUBLE_EQ(t.scale, 2.5);
}

TEST(Encode, MidpointsGoToUpperBin) {
  const auto q = four();
  EXPECT_EQ(q.bin(0.0), 3);
  EXPECT_EQ(q.bin(-1.0), 2);
  EXPECT_EQ(q.bin(1.0), 4);
  EXPECT_EQ(q.bin(-1e9), 1);
  EXPECT_EQ(q.bin(1e9), 4);
}

TEST(Decode, Examples) {
  const auto q = four();
  const auto x = decode(TokenSequence{{3, 1}, 0.6}, q);
  EXPECT_NEAR(x[0], 0.3, 1e-15);
  EXPECT_NEAR(x[1], -0.9, 1e-15);
  EXPECT_TRUE(std::isnan(decode(TokenSequence{{0}, 7.0}, q)[0]));
  EXPECT_THROW(decode(TokenSequence{{5}, 1.0}, q), InvalidArgument);
  EXPECT_THROW(decode(TokenSequence{{-1}, 1.0}, q), InvalidArgument);
}

TEST(QuantProperties, RoundTripBound) {
  const QuantizerSpec q;
  Rng rng(17);
  std::vector<double> x(10000);
  for (double& v : x) v = (rng.uniform() * 2 - 1) * 14.0;
  const auto t = encode_with_scale(x, 1.3, q);
  const auto back = decode(t, q);
  for (std::size_t i = 0; i < x.size(); ++i) {
    ASSERT_LE(std::abs(back[i] - x[i]), 1.3 * q.spacing() / 2 * (1 + 1e-12));
  }
}

TEST(QuantProperties, ScaleInvarianceAndMonotonicity) {
  const QuantizerSpec q(50, -4, 4);
  Rng rng(5);
  std::vector<double> x(2000);
  for (double& v : x) v = rng.normal() * 3;
  const auto base = encode(x, q);
  for (double lambda : {0.5, 4.0, 1024.0}) {
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = lambda * x[i];
    EXPECT_EQ(encode(y, q).tokens, base.tokens) << "lambda " << lambda;
  }
  auto sorted = x;
  std::sort(sorted.begin(), sorted.end());
  const auto ts = encode_with_scale(sorted, 1.0, q);
  for (std::size_t i = 1; i < ts.size(); ++i) EXPECT_LE(ts.tokens[i - 1], ts.tokens[i]);
}

TEST(QuantProperties, NaNRoundTrip) {
  const QuantizerSpec q;
  const auto t = encode(std::vector<double>{1.0, kNaN, -2.0}, q);
  EXPECT_EQ(t.tokens[1], kPaddingToken);
  EXPECT_TRUE(std::isnan(decode(t, q)[1]));
}

TEST(TokensText, RoundTrip) {
  const auto path = (std::filesystem::temp_directory_path() / "icdyn_tokens.txt").string();
  const TokenSequence t{{1, 5, 0, 100}, 2.5};
  write_tokens_text(t, path);
  const auto back = read_tokens_text(path, 2.5);
  EXPECT_EQ(back.tokens, t.tokens);
  EXPECT_EQ(back.scale, 2.5);
  std::filesystem::remove(path);
}
