#include <gtest/gtest.h>

#include <cmath>

#include "disac/channel.hpp"

using namespace disac;
using namespace disac::channel;

TEST(Context, Template) {
  EXPECT_EQ(render_context(5, 50).text, "the snr is 5.0 db and the distance is 50.0 m");
  EXPECT_EQ(render_context(0, 141.4).text, "the snr is 0.0 db and the distance is 141.4 m");
  auto back = parse_context(render_context(5, 50).text);
  ASSERT_TRUE(back.has_value());
  EXPECT_DOUBLE_EQ(back->snr_db, 5.0);
  EXPECT_DOUBLE_EQ(back->distance_m, 50.0);
  EXPECT_FALSE(parse_context("the snr is five db").has_value());
}

TEST(Modulate, UnitExample) {
  std::vector<float> e = {1, 0, 0, 1};
  auto m = modulate<float>(e);
  ASSERT_EQ(m.symbols.size(), 2u);
  EXPECT_DOUBLE_EQ(m.scale, 1.0);
  EXPECT_EQ(m.symbols[0], cd(1, 0));
  EXPECT_EQ(m.symbols[1], cd(0, 1));
}

TEST(Modulate, OddLengthRejected) {
  std::vector<float> e = {1, 2, 3};
  EXPECT_THROW(modulate<float>(e), ContractError);
}

TEST(Modulate, RoundTripIsExactAndPowerIsUnit) {
  Rng rng(4);
  std::normal_distribution<float> n(0.f, 3.f);
  for (int c = 0; c < 200; ++c) {
    std::vector<float> e(2 * (1 + c % 300));
    for (auto& x : e) x = n(rng);
    auto m = modulate<float>(e);
    double p = 0;
    for (auto s : m.symbols) p += std::norm(s);
    EXPECT_NEAR(p / double(m.symbols.size()), 1.0, 1e-6);
    EXPECT_EQ(demodulate<float>(m.symbols, m.scale), e);
  }
}

TEST(Transmit, LosslessIsIdentity) {
  std::vector<cd> c = {{1, 2}, {-3, 0.5}};
  Rng rng(1);
  EXPECT_EQ(transmit(c, kLossless, rng), c);
}

TEST(Transmit, EmpiricalSnr) {
  const std::size_t n = 1000000;
  std::vector<cd> c(n);
  Rng src(2);
  std::uniform_real_distribution<double> ph(0, 2 * M_PI);
  for (auto& s : c) s = std::polar(1.0, ph(src));
  for (double snr : {0.0, 10.0, 25.0}) {
    Rng rng(3);
    auto y = transmit(c, snr, rng);
    ASSERT_EQ(y.size(), n);
    double noise = 0, out = 0;
    for (std::size_t i = 0; i < n; ++i) {
      noise += std::norm(y[i] - c[i]);
      out += std::norm(y[i]);
    }
    EXPECT_NEAR(10 * std::log10(double(n) / noise), snr, 0.1);
    EXPECT_NEAR(out / double(n), 1.0 + std::pow(10.0, -snr / 10), 0.01);
  }
}

TEST(Transmit, SameSeedSameNoise) {
  std::vector<cd> c(100, cd(1, 0));
  Rng a(9), b(9);
  EXPECT_EQ(transmit(c, 5.0, a), transmit(c, 5.0, b));
}

TEST(Rate, Examples) {
  ChannelConfig cfg;
  EXPECT_DOUBLE_EQ(rate(cfg, 1.0, 1.0), 1000.0);
  EXPECT_DOUBLE_EQ(rate(cfg, 3.0, 1.0), 2000.0);
  ChannelConfig zero;
  zero.bandwidth_hz = 0;
  EXPECT_DOUBLE_EQ(rate(zero, 1.0, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(rate_at_snr(cfg, 10 * std::log10(3.0)), 2000.0);
}

TEST(Rate, MonotoneInPowerAndGain) {
  ChannelConfig cfg;
  double prev = 0;
  for (double p = 0.1; p < 10; p *= 1.5) {
    cfg.power_w = p;
    const double r = rate(cfg, 1.0, 1.0);
    EXPECT_GT(r, prev);
    prev = r;
  }
  prev = 0;
  for (double h = 0.1; h < 10; h *= 1.5) {
    const double r = rate(cfg, h, 1.0);
    EXPECT_GT(r, prev);
    prev = r;
  }
}

TEST(Delay, Examples) {
  EXPECT_DOUBLE_EQ(delay(8000, 1000), 8.0);
  EXPECT_DOUBLE_EQ(delay(0, 1000), 0.0);
  EXPECT_DOUBLE_EQ(payload_bits(512), 32768.0);
  EXPECT_DOUBLE_EQ(delay(payload_bits(128), 1000), 8.192);
  EXPECT_THROW(delay(10, 0), DomainError);
  EXPECT_THROW(delay(10, -1), DomainError);
}

TEST(Pass, GradientPassesThroughAndNoiseMatchesSnr) {
  Rng rng(5);
  std::normal_distribution<double> n(0, 1);
  std::vector<double> v(4 * 257);
  for (auto& x : v) x = n(rng);
  nn::Tensor<double> codes({4, 257}, v, true);
  std::vector<double> snr = {0, 10, 25, kLossless};
  auto out = pass(codes, std::span<const double>(snr), rng);
  EXPECT_EQ(out.shape(), codes.shape());
  for (std::size_t j = 0; j < 257; ++j) EXPECT_EQ(out[3 * 257 + j], codes[3 * 257 + j]);
  nn::sum(out).backward();
  for (double g : codes.grad()) EXPECT_EQ(g, 1.0);
  EXPECT_THROW(pass(codes, std::span<const double>(snr.data(), 3), rng), ContractError);
}
