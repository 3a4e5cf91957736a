#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "disac/numerics/tensor.hpp"

namespace disac::nn {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  bool trainable = true;
};

/// Ordered registry of named model parameters. Names are unique paths such
/// as "rvfn.rf.conv1.w_real"; a frozen parameter never receives gradients.
template <typename T>
class ParameterStore {
 public:
  Tensor<T> add(const std::string& name, Tensor<T> value) {
    if (index_.count(name)) throw ConfigError("parameter '" + name + "' registered twice");
    value.set_requires_grad(true);
    index_[name] = params_.size();
    params_.push_back({name, value, true});
    return value;
  }

  /// Uniform(-bound, bound) initialization.
  Tensor<T> add_uniform(const std::string& name, Shape shape, double bound, Rng& rng) {
    std::uniform_real_distribution<double> u(-bound, bound);
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = T(u(rng));
    return add(name, Tensor<T>(std::move(shape), std::move(v)));
  }

  /// Default fan-in scaled init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  Tensor<T> add_fan_in(const std::string& name, Shape shape, std::size_t fan_in, Rng& rng) {
    return add_uniform(name, std::move(shape), 1.0 / std::sqrt(double(fan_in)), rng);
  }

  Tensor<T> add_constant(const std::string& name, Shape shape, T fill) {
    return add(name, Tensor<T>::full(std::move(shape), fill));
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Parameter<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return params_[it->second];
  }
  const Parameter<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return params_[it->second];
  }

  std::vector<Parameter<T>>& all() { return params_; }
  const std::vector<Parameter<T>>& all() const { return params_; }
  std::size_t size() const { return params_.size(); }

  void set_trainable(std::string_view prefix, bool on) {
    for (auto& p : params_)
      if (std::string_view(p.name).starts_with(prefix)) {
        p.trainable = on;
        p.value.set_requires_grad(on);
      }
  }
  void freeze_all() { set_trainable("", false); }

  void zero_grad() {
    for (auto& p : params_) p.value.zero_grad();
  }

  std::size_t scalar_count(bool trainable_only = false) const {
    std::size_t n = 0;
    for (const auto& p : params_)
      if (!trainable_only || p.trainable) n += p.value.numel();
    return n;
  }

  /// FNV-1a over names and raw bytes of every parameter under `prefix`.
  std::uint64_t hash(std::string_view prefix = "") const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const void* data, std::size_t n) {
      auto* b = static_cast<const unsigned char*>(data);
      for (std::size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 1099511628211ull;
    };
    for (const auto& p : params_) {
      if (!std::string_view(p.name).starts_with(prefix)) continue;
      mix(p.name.data(), p.name.size());
      mix(p.value.data().data(), p.value.numel() * sizeof(T));
    }
    return h;
  }

 private:
  std::vector<Parameter<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Adaptive-moment optimizer over the trainable parameters of a store.
template <typename T>
class Adam {
 public:
  struct Options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 0.0;  // global grad-norm clip, 0 disables
  };

  Adam(ParameterStore<T>& store, Options opt) : store_(store), opt_(opt) {
    if (!(opt.lr > 0)) throw ConfigError("Adam: learning rate must be positive");
  }

  /// Applies one update to every trainable parameter holding a gradient.
  /// Frozen parameters are never touched.
  void step() {
    ++t_;
    double scale = 1.0;
    if (opt_.clip_norm > 0) {
      double sq = 0;
      for (auto& p : store_.all())
        if (p.trainable)
          for (T g : p.value.grad()) sq += double(g) * double(g);
      const double norm = std::sqrt(sq);
      if (norm > opt_.clip_norm) scale = opt_.clip_norm / norm;
    }
    const double bc1 = 1.0 - std::pow(opt_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, double(t_));
    for (auto& p : store_.all()) {
      if (!p.trainable || p.value.grad().empty()) continue;
      auto& [m, v] = moments_[p.name];
      if (m.empty()) {
        m.assign(p.value.numel(), 0.0);
        v.assign(p.value.numel(), 0.0);
      }
      auto w = p.value.mutable_data();
      auto g = p.value.grad();
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = double(g[i]) * scale;
        m[i] = opt_.beta1 * m[i] + (1 - opt_.beta1) * gi;
        v[i] = opt_.beta2 * v[i] + (1 - opt_.beta2) * gi * gi;
        w[i] -= T(opt_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + opt_.eps));
      }
    }
  }

  std::size_t steps() const { return t_; }
  double lr() const { return opt_.lr; }
  void set_lr(double lr) {
    if (!(lr > 0)) throw ConfigError("Adam: learning rate must be positive");
    opt_.lr = lr;
  }

 private:
  ParameterStore<T>& store_;
  Options opt_;
  std::size_t t_ = 0;
  std::unordered_map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments_;
};

}  // namespace disac::nn
