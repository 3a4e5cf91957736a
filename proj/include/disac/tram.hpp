#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "disac/numerics/layers.hpp"

namespace disac::model {

using nn::Tensor;

struct TramConfig {
  int layers = 2;
  int heads = 4;
  int d_sd = 64;
  double dropout = 0.1;
  int classes = 3;
  std::string aggregation = "sum";  // "sum" | "mean"
  bool center_as_device = true;

  void validate() const {
    if (layers < 1) throw ConfigError("tram.layers: must be >= 1");
    if (d_sd < 1 || heads < 1 || d_sd % heads) throw ConfigError("tram.d_sd: must be divisible by heads");
    if (dropout < 0 || dropout >= 1) throw ConfigError("tram.dropout: must be in [0,1)");
    if (classes < 2) throw ConfigError("tram.classes: must be >= 2");
    if (aggregation != "sum" && aggregation != "mean")
      throw ConfigError("tram.aggregation: '" + aggregation + "' (expected sum or mean)");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TramConfig, layers, heads, d_sd, dropout, classes, aggregation,
                                                center_as_device)

/// Four sigmoid regressions (distance, azimuth, pitch, radial velocity, all
/// normalized) and the class logits.
template <typename T>
struct SensingOutput {
  Tensor<T> regression;  // [B, 4]
  Tensor<T> logits;      // [B, M]
};

/// g = GELU(W1 LN(mean over sequence)), then five parallel heads on g.
template <typename T>
struct PredictionHead {
  nn::LayerNorm<T> ln;
  nn::Linear<T> hidden;
  std::array<nn::Linear<T>, 4> reg;
  nn::Linear<T> cls;

  static PredictionHead make(nn::ParameterStore<T>& ps, const std::string& prefix, std::size_t d, std::size_t classes,
                             Rng& rng) {
    PredictionHead h;
    h.ln = nn::LayerNorm<T>::make(ps, prefix + ".ln", d);
    h.hidden = nn::Linear<T>::make(ps, prefix + ".mlp", d, 2 * d, rng);
    const char* names[4] = {".distance", ".azimuth", ".pitch", ".velocity"};
    for (std::size_t i = 0; i < 4; ++i) h.reg[i] = nn::Linear<T>::make(ps, prefix + names[i], 2 * d, 1, rng);
    h.cls = nn::Linear<T>::make(ps, prefix + ".class", 2 * d, classes, rng);
    return h;
  }

  /// Features after pooling, normalization and the hidden layer.
  Tensor<T> embed(const Tensor<T>& s) const {
    if (s.rank() != 3) nn::shape_error("predict", s.shape(), {0, 0, ln.gamma.dim(0)});
    return nn::gelu(hidden(ln(nn::mean_axis(s, 1))));
  }

  SensingOutput<T> from_embedding(const Tensor<T>& g) const {
    std::vector<Tensor<T>> r;
    for (const auto& h : reg) r.push_back(nn::sigmoid(h(g)));
    return {nn::concat(r, 1), cls(g)};
  }

  SensingOutput<T> operator()(const Tensor<T>& s) const { return from_embedding(embed(s)); }
};

template <typename T>
struct TramLayer {
  Tensor<T> wq, wk, wv;
};

/// Cross-aggregation attention: per layer the current center feature queries
/// every device feature with shared projections and the K outputs are summed
/// (order-independently). The result is layer-normalized and dropped out.
template <typename T>
class Tram {
 public:
  Tram() = default;
  Tram(nn::ParameterStore<T>& ps, const TramConfig& cfg, Rng& rng, const std::string& prefix = "tram") : cfg_(cfg) {
    cfg.validate();
    const std::size_t d = std::size_t(cfg.d_sd);
    for (int l = 0; l < cfg.layers; ++l) {
      const std::string n = prefix + ".l" + std::to_string(l);
      layers_.push_back({ps.add_fan_in(n + ".wq", {d, d}, d, rng), ps.add_fan_in(n + ".wk", {d, d}, d, rng),
                         ps.add_fan_in(n + ".wv", {d, d}, d, rng)});
    }
    ln_ = nn::LayerNorm<T>::make(ps, prefix + ".ln", d);
  }

  const TramConfig& config() const { return cfg_; }
  std::vector<TramLayer<T>>& layers() { return layers_; }
  const nn::LayerNorm<T>& norm() const { return ln_; }

  /// Stacked attention layers only (no normalization or dropout).
  Tensor<T> attend(const Tensor<T>& center, const std::vector<Tensor<T>>& devices) const {
    if (devices.empty()) throw ContractError("aggregate: at least one device feature is required");
    for (const auto& f : devices)
      if (f.rank() != 3 || f.dim(0) != center.dim(0) || f.dim(2) != center.dim(2))
        nn::shape_error("aggregate", center.shape(), f.shape());
    const Tensor<T> none;
    Tensor<T> s = center;
    for (const auto& layer : layers_) {
      auto q = nn::linear(s, layer.wq, none);
      std::vector<Tensor<T>> terms;
      terms.reserve(devices.size());
      for (const auto& f : devices)
        terms.push_back(nn::multi_head_attention(q, nn::linear(f, layer.wk, none), nn::linear(f, layer.wv, none),
                                                 std::size_t(cfg_.heads)));
      s = nn::sum_sorted(terms);
      if (cfg_.aggregation == "mean") s = nn::scale(s, T(1) / T(devices.size()));
    }
    return s;
  }

  /// Dropout(LayerNorm(stacked attention)) over the given device list.
  Tensor<T> aggregate(const Tensor<T>& center, const std::vector<Tensor<T>>& devices, const nn::Mode& mode) const {
    auto s = ln_(attend(center, devices));
    if (mode.training && cfg_.dropout > 0) s = nn::dropout(s, cfg_.dropout, mode.stream(), true);
    return s;
  }

  /// Applies the center-as-device policy before aggregating.
  Tensor<T> forward(const Tensor<T>& center, std::vector<Tensor<T>> devices, const nn::Mode& mode) const {
    if (cfg_.center_as_device) devices.insert(devices.begin(), center);
    return aggregate(center, devices, mode);
  }

 private:
  TramConfig cfg_;
  std::vector<TramLayer<T>> layers_;
  nn::LayerNorm<T> ln_;
};

}  // namespace disac::model
