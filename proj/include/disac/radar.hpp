#pragma once

#include <cmath>
#include <complex>
#include <limits>
#include <numbers>
#include <random>
#include <vector>

#include <json.hpp>

#include "disac/numerics/tensor.hpp"

namespace disac::radar {

inline constexpr double kSpeedOfLight = 3e8;

using cd = std::complex<double>;

struct RadarConfig {
  double carrier_hz = 10e9;
  double pri_s = 1e-6;
  double sample_rate_hz = 60e6;
  double chirp_slope = 3e13;  // Hz/s
  int n_y = 4;
  int n_z = 4;
  double snr_min_db = 0.0;
  double snr_max_db = 25.0;
  double occlusion_db = 20.0;

  std::size_t antennas() const { return std::size_t(n_y) * std::size_t(n_z); }
  // Samples m*dt in [0, T_r); the tiny slack absorbs F_s*T_r rounding.
  std::size_t samples() const { return std::size_t(std::floor(sample_rate_hz * pri_s + 1e-9)); }

  void validate() const {
    if (!(carrier_hz > 0)) throw ConfigError("radar.carrier_hz: must be positive");
    if (!(pri_s > 0) || !(sample_rate_hz > 0)) throw ConfigError("radar.pri_s/sample_rate_hz: must be positive");
    if (samples() < 8) throw ConfigError("radar: F_s*T_r must give at least 8 samples");
    if (n_y < 1 || n_z < 1) throw ConfigError("radar.n_y/n_z: must be >= 1");
    if (snr_min_db > snr_max_db) throw ConfigError("radar.snr range: min > max");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RadarConfig, carrier_hz, pri_s, sample_rate_hz, chirp_slope, n_y, n_z,
                                                snr_min_db, snr_max_db, occlusion_db)

inline double wavelength(const RadarConfig& cfg) {
  if (!(cfg.carrier_hz > 0)) throw DomainError("wavelength: carrier must be positive");
  return kSpeedOfLight / cfg.carrier_hz;
}

inline double delay(double d) { return 2 * d / kSpeedOfLight; }
inline double doppler(const RadarConfig& cfg, double v) { return 2 * cfg.carrier_hz * v / kSpeedOfLight; }

inline double amplitude(const RadarConfig& cfg, double d, double rcs) {
  return wavelength(cfg) * rcs / (std::pow(4 * std::numbers::pi, 1.5) * d * d);
}

/// Kronecker product of the two array phase vectors; element (p, q) sits at
/// p * n_y + q with phase -pi (p sin(theta) + q sin(phi) cos(theta)).
inline std::vector<cd> steering_vector(double theta, double phi, int n_z, int n_y) {
  std::vector<cd> a(std::size_t(n_z) * std::size_t(n_y));
  const double st = std::sin(theta), sp = std::sin(phi) * std::cos(theta);
  for (int p = 0; p < n_z; ++p)
    for (int q = 0; q < n_y; ++q) a[std::size_t(p) * n_y + q] = std::polar(1.0, -std::numbers::pi * (p * st + q * sp));
  return a;
}

/// Complex echo, antennas × samples, row-major.
struct Echo {
  std::size_t antennas = 0, samples = 0;
  std::vector<cd> values;
  cd at(std::size_t a, std::size_t m) const { return values[a * samples + m]; }
};

inline constexpr double kNoiseless = std::numeric_limits<double>::infinity();

/// Single-pulse SIMO echo of one target. `snr_db` is the signal-to-noise
/// ratio of the returned samples; kNoiseless skips the noise draw.
inline Echo echo(const RadarConfig& cfg, double d, double v, double theta, double phi, double rcs, bool is_occluded,
                 double snr_db, Rng& noise_rng) {
  cfg.validate();
  if (!(d > 0)) throw DomainError("echo: distance must be positive");
  const double tau = delay(d);
  if (tau >= cfg.pri_s) throw DomainError("echo: delay outside the receive window");
  double amp = amplitude(cfg, d, rcs);
  if (is_occluded) amp *= std::pow(10.0, -cfg.occlusion_db / 20.0);
  const double mu = doppler(cfg, v);
  const auto a = steering_vector(theta, phi, cfg.n_z, cfg.n_y);

  Echo e;
  e.antennas = cfg.antennas();
  e.samples = cfg.samples();
  std::vector<cd> pulse(e.samples);
  const double dt = 1.0 / cfg.sample_rate_hz;
  for (std::size_t m = 0; m < e.samples; ++m) {
    const double t = double(m) * dt;
    const double tt = t - tau;
    // Reduce the carrier phase in cycles before scaling by 2*pi.
    double cycles = cfg.carrier_hz * tt + 0.5 * cfg.chirp_slope * tt * tt + mu * t;
    cycles -= std::floor(cycles);
    pulse[m] = std::polar(amp, 2 * std::numbers::pi * cycles);
  }
  e.values.resize(e.antennas * e.samples);
  for (std::size_t i = 0; i < e.antennas; ++i)
    for (std::size_t m = 0; m < e.samples; ++m) e.values[i * e.samples + m] = a[i] * pulse[m];

  if (std::isfinite(snr_db)) {
    const double sigma = std::sqrt(amp * amp * std::pow(10.0, -snr_db / 10.0) / 2.0);
    std::normal_distribution<double> n(0.0, sigma);
    for (auto& x : e.values) {
      const double re = n(noise_rng);
      const double im = n(noise_rng);
      x += cd(re, im);
    }
  }
  return e;
}

}  // namespace disac::radar
