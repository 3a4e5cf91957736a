#pragma once

#include <cmath>
#include <complex>
#include <cstdio>
#include <limits>
#include <optional>
#include <random>
#include <regex>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "disac/numerics/ops.hpp"

namespace disac::channel {

using cd = std::complex<double>;

struct ChannelContext {
  double snr_db = 0.0;
  double distance_m = 0.0;
  std::string text;
};

inline ChannelContext render_context(double snr_db, double distance_m) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "the snr is %.1f db and the distance is %.1f m", snr_db, distance_m);
  return {snr_db, distance_m, buf};
}

inline std::optional<ChannelContext> parse_context(const std::string& text) {
  static const std::regex re(R"(^the snr is (-?[0-9]+\.[0-9]) db and the distance is (-?[0-9]+\.[0-9]) m$)");
  std::smatch m;
  if (!std::regex_match(text, m, re)) return std::nullopt;
  return ChannelContext{std::stod(m[1].str()), std::stod(m[2].str()), text};
}

struct ChannelConfig {
  double bandwidth_hz = 1000.0;
  double power_w = 1.0;
  double gain = 1.0;  // H; AWGN channel
  double snr_min_db = 0.0;
  double snr_max_db = 25.0;

  void validate() const {
    if (!(bandwidth_hz > 0)) throw ConfigError("channel.bandwidth_hz: must be positive");
    if (!(power_w > 0)) throw ConfigError("channel.power_w: must be positive");
    if (!(gain > 0)) throw ConfigError("channel.gain: must be positive");
    if (snr_min_db > snr_max_db) throw ConfigError("channel.snr range: min > max");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ChannelConfig, bandwidth_hz, power_w, gain, snr_min_db, snr_max_db)

/// Unit-power symbols plus the scale that undoes the normalization.
struct Modulated {
  std::vector<cd> symbols;
  double scale = 1.0;
};

/// Pairs consecutive reals into I/Q symbols and normalizes to mean power 1.
/// Symbols are kept in double so float codes survive the round trip exactly.
template <typename T>
Modulated modulate(std::span<const T> e) {
  if (e.size() % 2) throw ContractError("modulate: odd element count " + std::to_string(e.size()));
  Modulated m;
  const std::size_t n = e.size() / 2;
  double power = 0;
  for (std::size_t i = 0; i < n; ++i) power += double(e[2 * i]) * double(e[2 * i]) + double(e[2 * i + 1]) * double(e[2 * i + 1]);
  m.scale = n && power > 0 ? std::sqrt(power / double(n)) : 1.0;
  m.symbols.resize(n);
  for (std::size_t i = 0; i < n; ++i) m.symbols[i] = cd(double(e[2 * i]) / m.scale, double(e[2 * i + 1]) / m.scale);
  return m;
}

template <typename T>
std::vector<T> demodulate(const std::vector<cd>& y, double scale) {
  std::vector<T> e(2 * y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    e[2 * i] = T(y[i].real() * scale);
    e[2 * i + 1] = T(y[i].imag() * scale);
  }
  return e;
}

inline constexpr double kLossless = std::numeric_limits<double>::infinity();

/// AWGN with unit gain. kLossless (or any +inf SNR) returns c unchanged.
inline std::vector<cd> transmit(const std::vector<cd>& c, double snr_db, Rng& rng) {
  if (std::isnan(snr_db) || snr_db == -std::numeric_limits<double>::infinity())
    throw DomainError("transmit: SNR must be finite or +inf (lossless)");
  if (std::isinf(snr_db)) return c;
  const double sigma = std::sqrt(std::pow(10.0, -snr_db / 10.0) / 2.0);
  std::normal_distribution<double> n(0.0, sigma);
  std::vector<cd> y(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) {
    const double re = n(rng);
    const double im = n(rng);
    y[i] = c[i] + cd(re, im);
  }
  return y;
}

/// B log2(1 + P H / N0).
inline double rate(const ChannelConfig& cfg, double gain, double noise_power) {
  if (cfg.bandwidth_hz == 0) return 0.0;
  return cfg.bandwidth_hz * std::log2(1.0 + cfg.power_w * gain / noise_power);
}

/// Rate when P H / N0 equals the given SNR.
inline double rate_at_snr(const ChannelConfig& cfg, double snr_db) {
  return cfg.bandwidth_hz * std::log2(1.0 + std::pow(10.0, snr_db / 10.0));
}

inline double delay(double payload_bits, double rate_bps) {
  if (!(rate_bps > 0)) throw DomainError("delay: rate must be positive");
  return payload_bits / rate_bps;
}

/// Float32 I and Q per complex symbol.
inline double payload_bits(std::size_t symbols) { return double(symbols) * 2 * 32; }

/// Differentiable pass of a batch of codes [B, ...] through the channel.
/// Each sample is modulated, transmitted at its own SNR and demodulated;
/// odd-length codes are zero-padded before modulation and truncated after.
/// The noise enters as a constant, so the gradient passes through unchanged.
template <typename T>
nn::Tensor<T> pass(const nn::Tensor<T>& codes, std::span<const double> snr_db, Rng& rng) {
  const std::size_t b = codes.dim(0);
  if (snr_db.size() != b)
    throw ContractError("channel::pass: " + std::to_string(snr_db.size()) + " SNR values for batch " + std::to_string(b));
  const std::size_t n = codes.numel() / std::max<std::size_t>(b, 1);
  std::vector<T> noise(codes.numel(), T(0));
  std::vector<T> padded(n + n % 2, T(0));
  for (std::size_t i = 0; i < b; ++i) {
    if (std::isinf(snr_db[i]) && snr_db[i] > 0) continue;
    std::copy_n(codes.data().begin() + long(i * n), n, padded.begin());
    auto m = modulate<T>(padded);
    auto out = demodulate<T>(transmit(m.symbols, snr_db[i], rng), m.scale);
    for (std::size_t j = 0; j < n; ++j) noise[i * n + j] = out[j] - padded[j];
  }
  return nn::add(codes, nn::Tensor<T>(codes.shape(), std::move(noise)));
}

}  // namespace disac::channel
