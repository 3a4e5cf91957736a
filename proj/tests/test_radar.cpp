#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <numbers>

#include "disac/radar.hpp"

using namespace disac;
using namespace disac::radar;

TEST(Radar, Wavelength) {
  RadarConfig cfg;
  EXPECT_DOUBLE_EQ(wavelength(cfg), 0.03);
  cfg.carrier_hz = 3e8;
  EXPECT_DOUBLE_EQ(wavelength(cfg), 1.0);
  cfg.carrier_hz = 24e9;
  EXPECT_DOUBLE_EQ(wavelength(cfg), 0.0125);
}

TEST(Radar, DefaultShape) {
  RadarConfig cfg;
  EXPECT_EQ(cfg.antennas(), 16u);
  EXPECT_EQ(cfg.samples(), 60u);
  cfg.sample_rate_hz = 5e6;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Radar, DelayDopplerAmplitude) {
  RadarConfig cfg;
  EXPECT_DOUBLE_EQ(delay(150.0), 1e-6);
  EXPECT_NEAR(doppler(cfg, 15.0), 1000.0, 1e-9);
  // 0.03 * 100 / ((4 pi)^1.5 * 100^2), evaluated independently.
  const double four_pi = 4.0 * 3.14159265358979323846;
  const double oracle = 0.03 * 100.0 / (four_pi * std::sqrt(four_pi) * 1e4);
  EXPECT_NEAR(amplitude(cfg, 100.0, 100.0), oracle, 1e-18);
  EXPECT_NEAR(amplitude(cfg, 100.0, 100.0), 6.73e-6, 0.01e-6);
}

TEST(Steering, ZeroAnglesAllOnes) {
  for (auto c : steering_vector(0.0, 0.0, 4, 4)) {
    EXPECT_DOUBLE_EQ(c.real(), 1.0);
    EXPECT_DOUBLE_EQ(c.imag(), 0.0);
  }
}

TEST(Steering, PitchNinetyKillsAzimuth) {
  auto a = steering_vector(std::numbers::pi / 2, 1.234, 2, 2);
  // {1, e^{-j pi}} ⊗ {1, 1}
  const std::array<double, 4> expect = {1, 1, -1, -1};
  for (int i = 0; i < 4; ++i) {
    EXPECT_NEAR(a[i].real(), expect[i], 1e-12);
    EXPECT_NEAR(a[i].imag(), 0.0, 1e-12);
  }
}

TEST(Steering, MatchesKroneckerOracle) {
  Rng rng(3);
  std::uniform_real_distribution<double> u(-std::numbers::pi, std::numbers::pi);
  for (int c = 0; c < 100; ++c) {
    const double theta = u(rng) / 2, phi = u(rng);
    const int nz = 1 + c % 4, ny = 1 + (c / 4) % 5;
    Eigen::VectorXcd az(nz), ay(ny);
    for (int p = 0; p < nz; ++p) az(p) = std::exp(cd(0, -std::numbers::pi * p * std::sin(theta)));
    for (int q = 0; q < ny; ++q) ay(q) = std::exp(cd(0, -std::numbers::pi * q * std::sin(phi) * std::cos(theta)));
    auto a = steering_vector(theta, phi, nz, ny);
    ASSERT_EQ(a.size(), std::size_t(nz * ny));
    for (int p = 0; p < nz; ++p)
      for (int q = 0; q < ny; ++q) {
        const cd want = az(p) * ay(q);
        EXPECT_NEAR(std::abs(a[std::size_t(p * ny + q)] - want), 0.0, 1e-12);
        EXPECT_NEAR(std::abs(a[std::size_t(p * ny + q)]), 1.0, 1e-12);
      }
  }
}

namespace {
Echo noiseless(const RadarConfig& cfg, double d, double v = 3.0, double theta = 0.2, double phi = -0.7,
               double rcs = 10.0, bool occ = false) {
  Rng rng(0);
  return echo(cfg, d, v, theta, phi, rcs, occ, kNoiseless, rng);
}

double power(const Echo& e) {
  double p = 0;
  for (auto x : e.values) p += std::norm(x);
  return p / double(e.values.size());
}
}  // namespace

TEST(Echo, ShapeAndFinite) {
  RadarConfig cfg;
  Rng rng(1);
  auto e = echo(cfg, 80.0, -4.0, 0.1, 0.3, 100.0, false, 10.0, rng);
  EXPECT_EQ(e.antennas, 16u);
  EXPECT_EQ(e.samples, 60u);
  for (auto x : e.values) EXPECT_TRUE(std::isfinite(x.real()) && std::isfinite(x.imag()));
}

TEST(Echo, NoiselessIsRankOne) {
  RadarConfig cfg;
  auto e = noiseless(cfg, 70.0);
  Eigen::MatrixXcd m(e.antennas, e.samples);
  for (std::size_t a = 0; a < e.antennas; ++a)
    for (std::size_t s = 0; s < e.samples; ++s) m(long(a), long(s)) = e.at(a, s);
  Eigen::JacobiSVD<Eigen::MatrixXcd> svd(m);
  const auto sv = svd.singularValues();
  EXPECT_GE(sv(0), 1e6 * sv(1));
}

TEST(Echo, AntennaRatioIsSteeringRatio) {
  RadarConfig cfg;
  const double theta = 0.3, phi = 1.1;
  auto e = noiseless(cfg, 60.0, 2.0, theta, phi);
  auto a = steering_vector(theta, phi, cfg.n_z, cfg.n_y);
  for (std::size_t s = 0; s < e.samples; ++s)
    EXPECT_NEAR(std::abs(e.at(5, s) / e.at(0, s) - a[5] / a[0]), 0.0, 1e-9);
}

TEST(Echo, PowerFallsAsInverseFourthPower) {
  RadarConfig cfg;
  const double p1 = power(noiseless(cfg, 50.0)), p2 = power(noiseless(cfg, 100.0));
  EXPECT_NEAR(p1 / p2, 16.0, 16.0 * 1e-9);
}

TEST(Echo, OcclusionAttenuates20dB) {
  RadarConfig cfg;
  EXPECT_NEAR(power(noiseless(cfg, 50.0, 1, 0, 0, 1, false)) / power(noiseless(cfg, 50.0, 1, 0, 0, 1, true)), 100.0,
              1e-9);
}

TEST(Echo, EmpiricalSnr) {
  RadarConfig cfg;
  for (double snr : {0.0, 10.0, 20.0}) {
    Rng rng(11);
    double sig = 0, noise = 0;
    std::size_t n = 0;
    for (int r = 0; r < 11; ++r) {
      auto clean = noiseless(cfg, 40.0 + r);
      auto noisy = echo(cfg, 40.0 + r, 3.0, 0.2, -0.7, 10.0, false, snr, rng);
      for (std::size_t i = 0; i < clean.values.size(); ++i) {
        sig += std::norm(clean.values[i]) / std::norm(clean.values[0]);
        noise += std::norm(noisy.values[i] - clean.values[i]) / std::norm(clean.values[0]);
      }
      n += clean.values.size();
    }
    ASSERT_GE(n, 10000u);
    EXPECT_NEAR(10 * std::log10(sig / noise), snr, 0.5);
  }
}

TEST(Echo, DeterministicGivenSeed) {
  RadarConfig cfg;
  Rng a(7), b(7);
  auto e1 = echo(cfg, 33.0, 1.0, 0.1, 0.2, 1.0, true, 5.0, a);
  auto e2 = echo(cfg, 33.0, 1.0, 0.1, 0.2, 1.0, true, 5.0, b);
  EXPECT_EQ(e1.values, e2.values);
}

TEST(Echo, Errors) {
  RadarConfig cfg;
  Rng rng(0);
  EXPECT_THROW(echo(cfg, 0.0, 0, 0, 0, 1, false, 10, rng), DomainError);
  EXPECT_THROW(echo(cfg, -1.0, 0, 0, 0, 1, false, 10, rng), DomainError);
  EXPECT_THROW(echo(cfg, 150.0, 0, 0, 0, 1, false, 10, rng), DomainError);
  EXPECT_NO_THROW(echo(cfg, 149.0, 0, 0, 0, 1, false, 10, rng));
}
