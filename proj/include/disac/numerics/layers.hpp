#pragma once

#include <string>

#include "disac/numerics/attention.hpp"
#include "disac/numerics/parameters.hpp"

namespace disac::nn {

/// Forward-pass mode: training enables dropout and drop-path, which draw
/// from `rng`.
struct Mode {
  bool training = false;
  Rng* rng = nullptr;

  Rng& stream() const {
    if (!rng) throw ContractError("forward pass in training mode needs an RNG stream");
    return *rng;
  }
};

inline Mode eval_mode() { return {}; }

/// y = x W^T + b with W[out, in].
template <typename T>
struct Linear {
  Tensor<T> w, b;

  static Linear make(ParameterStore<T>& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                     bool bias = true) {
    Linear l;
    l.w = ps.add_fan_in(name + ".w", {out, in}, in, rng);
    if (bias) l.b = ps.add_fan_in(name + ".b", {out}, in, rng);
    return l;
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, w, b); }
};

/// Layer normalization over the last axis with affine parameters.
template <typename T>
struct LayerNorm {
  Tensor<T> gamma, beta;

  static LayerNorm make(ParameterStore<T>& ps, const std::string& name, std::size_t d) {
    return {ps.add_constant(name + ".g", {d}, T(1)), ps.add_constant(name + ".b", {d}, T(0))};
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta); }
};

}  // namespace disac::nn
