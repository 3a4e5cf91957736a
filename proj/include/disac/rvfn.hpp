#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "disac/numerics/complex.hpp"
#include "disac/numerics/layers.hpp"

namespace disac::model {

using nn::Tensor;

enum class Modality { Multimodal, Rf, Cv };

inline std::string to_string(Modality m) {
  switch (m) {
    case Modality::Multimodal: return "mm";
    case Modality::Rf: return "rf";
    case Modality::Cv: return "cv";
  }
  return "?";
}

inline Modality parse_modality(const std::string& s) {
  if (s == "mm") return Modality::Multimodal;
  if (s == "rf") return Modality::Rf;
  if (s == "cv") return Modality::Cv;
  throw ConfigError("unknown modality '" + s + "' (expected mm, rf or cv)");
}

struct RvfnConfig {
  int l_sf = 16;
  int d_sf = 64;
  std::vector<int> rf_widths = {16, 32, 64};
  int rf_kernel = 3;
  int rf_pool = 2;
  std::vector<int> cv_widths = {32, 64, 128, 128};
  std::vector<int> cv_depths = {1, 1, 2, 1};
  int heads = 4;
  double drop_path = 0.05;
  double layer_scale = 0.1;  // initial value of the per-channel block scale
  int image_h = 64;
  int image_w = 64;
  int antennas = 16;
  int samples = 60;

  void validate() const {
    if (l_sf < 1 || d_sf < 1) throw ConfigError("rvfn.l_sf/d_sf: must be positive");
    if (heads < 1 || d_sf % heads) throw ConfigError("rvfn.heads: d_sf must be divisible by heads");
    if (rf_widths.size() != 3) throw ConfigError("rvfn.rf_widths: exactly 3 RF stages required");
    if (rf_kernel < 1 || rf_kernel % 2 == 0) throw ConfigError("rvfn.rf_kernel: must be odd and positive");
    if (rf_pool < 1) throw ConfigError("rvfn.rf_pool: must be positive");
    const int min_len = rf_pool * rf_pool * rf_pool;
    if (antennas < min_len || samples < min_len)
      throw ConfigError("rvfn: echo " + std::to_string(antennas) + "x" + std::to_string(samples) +
                        " too short for 3 pooling stages");
    if (cv_widths.size() != 4 || cv_depths.size() != 4) throw ConfigError("rvfn.cv_widths/cv_depths: 4 stages required");
    for (int w : cv_widths)
      if (w < 1) throw ConfigError("rvfn.cv_widths: must be positive");
    if (image_h % 32 || image_w % 32 || image_h < 32 || image_w < 32)
      throw ConfigError("rvfn.image: height and width must be divisible by 32");
    if (drop_path < 0 || drop_path >= 1) throw ConfigError("rvfn.drop_path: must be in [0,1)");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RvfnConfig, l_sf, d_sf, rf_widths, rf_kernel, rf_pool, cv_widths,
                                                cv_depths, heads, drop_path, layer_scale, image_h, image_w, antennas,
                                                samples)

/// The six fusion projections (no bias) and the output normalization.
template <typename T>
struct FusionParams {
  Tensor<T> wq1, wk1, wv1;  // applied to the RF feature
  Tensor<T> wq2, wk2, wv2;  // applied to the CV feature
  nn::LayerNorm<T> ln;
};

/// Bidirectional cross-attention fusion:
///   z_cv = Attn(rf Wq1, cv Wk2, cv Wv2), z_rf = Attn(cv Wq2, rf Wk1, rf Wv1),
///   out  = LN(z_cv + z_rf) + rf + cv.
template <typename T>
Tensor<T> fuse(const Tensor<T>& rf, const Tensor<T>& cv, const FusionParams<T>& p, std::size_t heads) {
  if (rf.shape() != cv.shape()) nn::shape_error("fuse", rf.shape(), cv.shape());
  const Tensor<T> none;
  auto z_cv = nn::multi_head_attention(nn::linear(rf, p.wq1, none), nn::linear(cv, p.wk2, none),
                                       nn::linear(cv, p.wv2, none), heads);
  auto z_rf = nn::multi_head_attention(nn::linear(cv, p.wq2, none), nn::linear(rf, p.wk1, none),
                                       nn::linear(rf, p.wv1, none), heads);
  return nn::add(nn::add(p.ln(nn::add(z_cv, z_rf)), rf), cv);
}

template <typename T>
struct ConvNextBlock {
  Tensor<T> dw_w, dw_b;
  nn::LayerNorm<T> ln;
  nn::Linear<T> pw1, pw2;
  Tensor<T> gamma;
};

/// z + drop_path(gamma * MLP(LN(dwconv(z)))), MLP = Linear(C,4C), GELU, Linear(4C,C).
template <typename T>
Tensor<T> convnext_block(const Tensor<T>& z, const ConvNextBlock<T>& b, double drop_path, const nn::Mode& mode) {
  auto y = nn::depthwise_conv2d(z, b.dw_w, b.dw_b, 1, b.dw_w.dim(2) / 2);
  y = nn::permute(y, {0, 2, 3, 1});
  y = b.pw2(nn::gelu(b.pw1(b.ln(y))));
  y = nn::mul(y, b.gamma);
  y = nn::permute(y, {0, 3, 1, 2});
  if (mode.training && drop_path > 0) y = nn::drop_path(y, drop_path, mode.stream(), true);
  return nn::add(z, y);
}

/// Channel layer norm on an NCHW map.
template <typename T>
Tensor<T> channel_norm(const Tensor<T>& x, const nn::LayerNorm<T>& ln) {
  return nn::permute(ln(nn::permute(x, {0, 2, 3, 1})), {0, 3, 1, 2});
}

/// RF–vision bimodal fusion network. With a unimodal setting only the
/// corresponding extractor exists and its output is the feature.
template <typename T>
class Rvfn {
 public:
  Rvfn(nn::ParameterStore<T>& ps, const RvfnConfig& cfg, Modality modality, Rng& rng, const std::string& prefix = "rvfn")
      : cfg_(cfg), modality_(modality) {
    cfg.validate();
    const std::size_t L = std::size_t(cfg.l_sf), d = std::size_t(cfg.d_sf);
    if (modality != Modality::Cv) {
      std::size_t cin = 1, h = std::size_t(cfg.antennas), w = std::size_t(cfg.samples);
      const std::size_t k = std::size_t(cfg.rf_kernel);
      for (std::size_t i = 0; i < 3; ++i) {
        const std::size_t cout = std::size_t(cfg.rf_widths[i]);
        const std::string n = prefix + ".rf.conv" + std::to_string(i + 1);
        const std::size_t fan = 2 * cin * k * k;
        rf_wr_.push_back(ps.add_fan_in(n + ".w_real", {cout, cin, k, k}, fan, rng));
        rf_wi_.push_back(ps.add_fan_in(n + ".w_imag", {cout, cin, k, k}, fan, rng));
        cin = cout;
        h /= std::size_t(cfg.rf_pool);
        w /= std::size_t(cfg.rf_pool);
      }
      rf_flat_ = 2 * cin * h * w;
      rf_proj_ = nn::Linear<T>::make(ps, prefix + ".rf.proj", rf_flat_, L * d, rng);
    }
    if (modality != Modality::Rf) {
      const std::string c = prefix + ".cv";
      const std::size_t w0 = std::size_t(cfg.cv_widths[0]);
      stem_w_ = ps.add_fan_in(c + ".stem.w", {w0, 3, 4, 4}, 48, rng);
      stem_b_ = ps.add_fan_in(c + ".stem.b", {w0}, 48, rng);
      stem_ln_ = nn::LayerNorm<T>::make(ps, c + ".stem_ln", w0);
      std::size_t cin = w0;
      for (std::size_t s = 0; s < 4; ++s) {
        const std::size_t cs = std::size_t(cfg.cv_widths[s]);
        const std::string sn = c + ".s" + std::to_string(s + 1);
        Stage st;
        if (s > 0) {
          st.down_ln = nn::LayerNorm<T>::make(ps, sn + ".down_ln", cin);
          st.down_w = ps.add_fan_in(sn + ".down.w", {cs, cin, 2, 2}, cin * 4, rng);
          st.down_b = ps.add_fan_in(sn + ".down.b", {cs}, cin * 4, rng);
        }
        for (int b = 0; b < cfg.cv_depths[s]; ++b) {
          const std::string bn = sn + ".b" + std::to_string(b);
          ConvNextBlock<T> blk;
          blk.dw_w = ps.add_fan_in(bn + ".dw.w", {cs, 1, 7, 7}, 49, rng);
          blk.dw_b = ps.add_fan_in(bn + ".dw.b", {cs}, 49, rng);
          blk.ln = nn::LayerNorm<T>::make(ps, bn + ".ln", cs);
          blk.pw1 = nn::Linear<T>::make(ps, bn + ".pw1", cs, 4 * cs, rng);
          blk.pw2 = nn::Linear<T>::make(ps, bn + ".pw2", 4 * cs, cs, rng);
          blk.gamma = ps.add_constant(bn + ".gamma", {cs}, T(cfg.layer_scale));
          st.blocks.push_back(blk);
        }
        stages_.push_back(std::move(st));
        cin = cs;
      }
      const std::size_t hw = std::size_t(cfg.image_h / 32) * std::size_t(cfg.image_w / 32);
      cv_proj_ = nn::Linear<T>::make(ps, c + ".proj", cin * hw, L * d, rng);
    }
    if (modality == Modality::Multimodal) {
      const std::string f = prefix + ".fuse";
      fusion_.wq1 = ps.add_fan_in(f + ".wq1", {d, d}, d, rng);
      fusion_.wk1 = ps.add_fan_in(f + ".wk1", {d, d}, d, rng);
      fusion_.wv1 = ps.add_fan_in(f + ".wv1", {d, d}, d, rng);
      fusion_.wq2 = ps.add_fan_in(f + ".wq2", {d, d}, d, rng);
      fusion_.wk2 = ps.add_fan_in(f + ".wk2", {d, d}, d, rng);
      fusion_.wv2 = ps.add_fan_in(f + ".wv2", {d, d}, d, rng);
      fusion_.ln = nn::LayerNorm<T>::make(ps, f + ".ln", d);
    }
  }

  Modality modality() const { return modality_; }
  const RvfnConfig& config() const { return cfg_; }
  const FusionParams<T>& fusion() const { return fusion_; }

  /// First-stage complex convolution before the activation.
  Tensor<T> rf_stage1_preactivation(const Tensor<T>& echo) const {
    check_echo(echo);
    return nn::complex_conv_stacked(echo, rf_wr_[0], rf_wi_[0], 1, std::size_t(cfg_.rf_kernel / 2));
  }

  /// echo[B,2,A,S] (real plane, imaginary plane) -> [B, L_sf, d_sf].
  Tensor<T> rf_extract(const Tensor<T>& echo) const {
    if (rf_wr_.empty()) throw ContractError("rvfn: model has no RF branch");
    check_echo(echo);
    Tensor<T> x = echo;
    for (std::size_t i = 0; i < 3; ++i) {
      x = nn::complex_conv_stacked(x, rf_wr_[i], rf_wi_[i], 1, std::size_t(cfg_.rf_kernel / 2));
      x = nn::relu(x);
      x = nn::complex_max_pool2d(x, std::size_t(cfg_.rf_pool), std::size_t(cfg_.rf_pool));
    }
    const std::size_t b = echo.dim(0);
    auto y = rf_proj_(nn::reshape(x, {b, rf_flat_}));
    return nn::reshape(y, {b, std::size_t(cfg_.l_sf), std::size_t(cfg_.d_sf)});
  }

  /// image[B,3,H,W] -> [B, L_sf, d_sf].
  Tensor<T> vision_extract(const Tensor<T>& image, const nn::Mode& mode) const {
    if (stages_.empty()) throw ContractError("rvfn: model has no vision branch");
    if (image.rank() != 4 || image.dim(1) != 3 || image.dim(2) != std::size_t(cfg_.image_h) ||
        image.dim(3) != std::size_t(cfg_.image_w))
      nn::shape_error("vision_extract", image.shape(),
                      {image.rank() ? image.dim(0) : 0, 3, std::size_t(cfg_.image_h), std::size_t(cfg_.image_w)});
    auto x = channel_norm(nn::conv2d(image, stem_w_, stem_b_, 4, 0), stem_ln_);
    for (const auto& st : stages_) {
      if (st.down_w) x = nn::conv2d(channel_norm(x, st.down_ln), st.down_w, st.down_b, 2, 0);
      for (const auto& blk : st.blocks) x = convnext_block(x, blk, cfg_.drop_path, mode);
    }
    const std::size_t b = image.dim(0);
    auto y = cv_proj_(nn::reshape(x, {b, x.numel() / b}));
    return nn::reshape(y, {b, std::size_t(cfg_.l_sf), std::size_t(cfg_.d_sf)});
  }

  /// Fused (or unimodal) feature s^mul.
  Tensor<T> forward(const Tensor<T>& image, const Tensor<T>& echo, const nn::Mode& mode) const {
    switch (modality_) {
      case Modality::Rf: return rf_extract(echo);
      case Modality::Cv: return vision_extract(image, mode);
      case Modality::Multimodal: break;
    }
    return fuse(rf_extract(echo), vision_extract(image, mode), fusion_, std::size_t(cfg_.heads));
  }

 private:
  struct Stage {
    nn::LayerNorm<T> down_ln;
    Tensor<T> down_w, down_b;
    std::vector<ConvNextBlock<T>> blocks;
  };

  void check_echo(const Tensor<T>& echo) const {
    if (echo.rank() != 4 || echo.dim(1) != 2 || echo.dim(2) != std::size_t(cfg_.antennas) ||
        echo.dim(3) != std::size_t(cfg_.samples))
      nn::shape_error("rf_extract", echo.shape(),
                      {echo.rank() ? echo.dim(0) : 0, 2, std::size_t(cfg_.antennas), std::size_t(cfg_.samples)});
  }

  RvfnConfig cfg_;
  Modality modality_;
  std::vector<Tensor<T>> rf_wr_, rf_wi_;
  nn::Linear<T> rf_proj_;
  std::size_t rf_flat_ = 0;
  Tensor<T> stem_w_, stem_b_;
  nn::LayerNorm<T> stem_ln_;
  std::vector<Stage> stages_;
  nn::Linear<T> cv_proj_;
  FusionParams<T> fusion_;
};

}  // namespace disac::model
