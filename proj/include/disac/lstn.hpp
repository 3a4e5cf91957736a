#pragma once

#include <array>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "disac/channel.hpp"
#include "disac/numerics/layers.hpp"

namespace disac::model {

using nn::Tensor;

// ------------------------------------------------------------------ tokenizer

inline constexpr std::int32_t kPadId = 0;
inline constexpr std::int32_t kBosId = 1;

inline const std::array<std::string_view, 21>& vocabulary() {
  static const std::array<std::string_view, 21> v = {"<pad>", "<bos>", "the", "snr", "is", "db", "and",
                                                     "distance", "m", ".", "-", "0", "1", "2", "3", "4",
                                                     "5", "6", "7", "8", "9"};
  return v;
}

inline std::size_t vocab_size() { return vocabulary().size(); }

inline std::int32_t token_id(std::string_view tok) {
  const auto& v = vocabulary();
  for (std::size_t i = 2; i < v.size(); ++i)
    if (v[i] == tok) return std::int32_t(i);
  return -1;
}

namespace detail {
inline bool numeric_char(char c) { return (c >= '0' && c <= '9') || c == '.' || c == '-'; }
inline bool numeric_token(std::int32_t id) { return id >= token_id(".") && id < std::int32_t(vocab_size()); }
}  // namespace detail

struct Tokenized {
  std::vector<std::int32_t> ids;  // right-padded to the requested length
  std::vector<std::uint8_t> mask;
  std::size_t count = 0;  // non-pad tokens
};

/// Words come from the vocabulary; numbers are split into digit, point and
/// minus tokens. Non-empty text starts with <bos>; empty text is all padding.
inline Tokenized tokenize(const std::string& text, std::size_t length) {
  std::vector<std::int32_t> ids;
  std::size_t pos = 0;
  while (pos < text.size()) {
    if (text[pos] == ' ') {
      ++pos;
      continue;
    }
    const std::size_t end = std::min(text.find(' ', pos), text.size());
    const std::string word = text.substr(pos, end - pos);
    pos = end;
    if (ids.empty()) ids.push_back(kBosId);
    if (const auto id = token_id(word); id >= 0 && !detail::numeric_char(word[0])) {
      ids.push_back(id);
      continue;
    }
    for (char c : word) {
      if (!detail::numeric_char(c)) throw ContractError("tokenize: out-of-vocabulary token '" + word + "'");
      ids.push_back(token_id(std::string_view(&c, 1)));
    }
  }
  if (ids.size() > length)
    throw ContractError("tokenize: " + std::to_string(ids.size()) + " tokens exceed text length " +
                        std::to_string(length));
  Tokenized t;
  t.count = ids.size();
  t.ids = ids;
  t.ids.resize(length, kPadId);
  t.mask.assign(length, 0);
  std::fill_n(t.mask.begin(), t.count, std::uint8_t(1));
  return t;
}

inline std::string detokenize(std::span<const std::int32_t> ids) {
  std::string out;
  std::int32_t prev = kPadId;
  for (auto id : ids) {
    if (id == kPadId || id == kBosId) continue;
    if (id < 0 || std::size_t(id) >= vocab_size()) throw ContractError("detokenize: bad id " + std::to_string(id));
    if (!out.empty() && !(detail::numeric_token(prev) && detail::numeric_token(id))) out += ' ';
    out += vocabulary()[std::size_t(id)];
    prev = id;
  }
  return out;
}

/// Token ids and key mask for a batch of contexts, [B, L_text] row-major.
struct TextBatch {
  std::size_t batch = 0, length = 0;
  std::vector<std::int32_t> ids;
  std::vector<std::uint8_t> mask;
};

inline TextBatch tokenize_batch(const std::vector<std::string>& texts, std::size_t length) {
  TextBatch b{texts.size(), length, {}, {}};
  for (const auto& s : texts) {
    auto t = tokenize(s, length);
    b.ids.insert(b.ids.end(), t.ids.begin(), t.ids.end());
    b.mask.insert(b.mask.end(), t.mask.begin(), t.mask.end());
  }
  return b;
}

// --------------------------------------------------------------------- config

struct DecoderConfig {
  std::string kind = "transformer";  // "transformer" | "recurrent"
  int layers = 2;
  int heads = 4;
  int d_sd = 64;
  int ff = 128;
  int lora_rank = 4;
  int lora_layers = 1;  // adapters on the attention projections of the last N layers
  int l_text = 24;
  bool positional = true;

  void validate() const {
    if (kind != "transformer" && kind != "recurrent")
      throw ConfigError("decoder.kind: '" + kind + "' (expected transformer or recurrent)");
    if (layers < 1) throw ConfigError("decoder.layers: must be >= 1");
    if (d_sd < 1 || heads < 1 || d_sd % heads) throw ConfigError("decoder.d_sd: must be divisible by heads");
    if (ff < 1) throw ConfigError("decoder.ff: must be positive");
    if (lora_rank < 1) throw ConfigError("decoder.lora_rank: must be >= 1");
    if (lora_layers < 0 || lora_layers > layers) throw ConfigError("decoder.lora_layers: must be in [0, layers]");
    if (l_text < 1) throw ConfigError("decoder.l_text: must be >= 1");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DecoderConfig, kind, layers, heads, d_sd, ff, lora_rank, lora_layers,
                                                l_text, positional)

struct LstnConfig {
  int l_se = 8;
  int d_se = 32;
  DecoderConfig decoder;

  std::size_t l_fusion() const { return std::size_t(l_se + decoder.l_text); }

  void validate(int l_sf, int d_sf) const {
    if (l_se < 1 || d_se < 1) throw ConfigError("lstn.l_se/d_se: must be positive");
    if (std::int64_t(l_se) * d_se >= std::int64_t(l_sf) * d_sf)
      throw ConfigError("lstn: code size " + std::to_string(l_se * d_se) + " must be smaller than feature size " +
                        std::to_string(l_sf * d_sf));
    decoder.validate();
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(LstnConfig, l_se, d_se, decoder)

// ----------------------------------------------------------------------- LoRA

/// W + A B with A[out, r], B[r, in].
template <typename T>
Tensor<T> lora_apply(const Tensor<T>& w, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0) || a.dim(0) != w.dim(0) || b.dim(1) != w.dim(1))
    throw ContractError("lora_apply: W " + nn::shape_str(w.shape()) + ", A " + nn::shape_str(a.shape()) + ", B " +
                        nn::shape_str(b.shape()) + " are not compatible");
  return nn::add(w, nn::matmul(a, b));
}

/// Linear layer with an optional low-rank adapter on its weight.
template <typename T>
struct LoraLinear {
  Tensor<T> w, b, a, bm;

  static LoraLinear make(nn::ParameterStore<T>& ps, const std::string& name, const std::string& lora_name,
                         std::size_t in, std::size_t out, std::size_t rank, Rng& rng) {
    LoraLinear l;
    l.w = ps.add_fan_in(name + ".w", {out, in}, in, rng);
    l.b = ps.add_fan_in(name + ".b", {out}, in, rng);
    if (rank) {
      l.a = ps.add_constant(lora_name + ".A", {out, rank}, T(0));
      l.bm = ps.add_fan_in(lora_name + ".B", {rank, in}, in, rng);
    }
    return l;
  }

  bool adapted() const { return bool(a); }
  Tensor<T> weight() const { return adapted() ? lora_apply(w, a, bm) : w; }
  Tensor<T> operator()(const Tensor<T>& x) const { return nn::linear(x, weight(), b); }

  /// W <- W + A B, A <- 0.
  void merge() {
    if (!adapted()) return;
    nn::NoGradGuard ng;
    auto delta = nn::matmul(a, bm);
    auto wd = w.mutable_data();
    for (std::size_t i = 0; i < wd.size(); ++i) wd[i] += delta[i];
    for (auto& v : a.mutable_data()) v = T(0);
  }
};

// -------------------------------------------------------------------- decoder

template <typename T>
struct DecoderLayer {
  nn::LayerNorm<T> ln1, ln2;
  LoraLinear<T> wq, wk, wv, wo;
  nn::Linear<T> ff1, ff2;
};

/// Decoder stand-in: projects the received code to d_sd, appends the
/// embedded context tokens and runs a non-causal transformer (or a GRU)
/// over the concatenation with key mask [1..1, M_text].
template <typename T>
class Decoder {
 public:
  Decoder() = default;
  Decoder(nn::ParameterStore<T>& ps, const LstnConfig& cfg, Rng& rng, const std::string& prefix = "lstn")
      : cfg_(cfg.decoder), l_se_(std::size_t(cfg.l_se)) {
    cfg_.validate();
    const std::size_t d = std::size_t(cfg_.d_sd);
    const std::string p = prefix + ".decoder", lp = prefix + ".lora";
    feat_proj_ = nn::Linear<T>::make(ps, p + ".feat_proj", std::size_t(cfg.d_se), d, rng);
    embed_ = ps.add_uniform(p + ".embed", {vocab_size(), d}, 1.0, rng);
    if (cfg_.positional && cfg_.kind == "transformer") pos_ = ps.add_uniform(p + ".pos", {cfg.l_fusion(), d}, 0.1, rng);
    if (cfg_.kind == "transformer") {
      for (int l = 0; l < cfg_.layers; ++l) {
        const std::string n = p + ".l" + std::to_string(l);
        const std::string ln = lp + ".l" + std::to_string(l);
        const std::size_t r = l >= cfg_.layers - cfg_.lora_layers ? std::size_t(cfg_.lora_rank) : 0;
        DecoderLayer<T> layer;
        layer.ln1 = nn::LayerNorm<T>::make(ps, n + ".ln1", d);
        layer.wq = LoraLinear<T>::make(ps, n + ".wq", ln + ".wq", d, d, r, rng);
        layer.wk = LoraLinear<T>::make(ps, n + ".wk", ln + ".wk", d, d, r, rng);
        layer.wv = LoraLinear<T>::make(ps, n + ".wv", ln + ".wv", d, d, r, rng);
        layer.wo = LoraLinear<T>::make(ps, n + ".wo", ln + ".wo", d, d, r, rng);
        layer.ln2 = nn::LayerNorm<T>::make(ps, n + ".ln2", d);
        layer.ff1 = nn::Linear<T>::make(ps, n + ".ff1", d, std::size_t(cfg_.ff), rng);
        layer.ff2 = nn::Linear<T>::make(ps, n + ".ff2", std::size_t(cfg_.ff), d, rng);
        layers_.push_back(layer);
      }
    } else {
      gru_x_ = nn::Linear<T>::make(ps, p + ".gru.x", d, 3 * d, rng);
      gru_h_ = nn::Linear<T>::make(ps, p + ".gru.h", d, 3 * d, rng);
    }
    ln_f_ = nn::LayerNorm<T>::make(ps, p + ".ln_f", d);
  }

  const DecoderConfig& config() const { return cfg_; }

  /// code[B, L_se, d_se] plus optional text -> [B, L_se + L_text, d_sd].
  Tensor<T> operator()(const Tensor<T>& code, const TextBatch* text) const {
    if (code.rank() != 3 || code.dim(1) != l_se_ || code.dim(2) != feat_proj_.w.dim(1))
      nn::shape_error("decode", code.shape(), {code.rank() ? code.dim(0) : 0, l_se_, feat_proj_.w.dim(1)});
    const std::size_t b = code.dim(0);
    auto x = feat_proj_(code);
    std::vector<T> mask;
    if (text && text->length) {
      if (text->batch != b || text->ids.size() != b * text->length || text->mask.size() != text->ids.size())
        throw ContractError("decode: text batch " + std::to_string(text->batch) + "x" +
                            std::to_string(text->length) + " does not match code batch " + std::to_string(b));
      if (l_se_ + text->length > l_fusion_max())
        throw ContractError("decode: sequence length " + std::to_string(l_se_ + text->length) +
                            " exceeds L_fusion " + std::to_string(l_fusion_max()));
      x = nn::concat<T>({x, nn::embedding(embed_, text->ids, {b, text->length})}, 1);
      mask.reserve(b * (l_se_ + text->length));
      for (std::size_t i = 0; i < b; ++i) {
        mask.insert(mask.end(), l_se_, T(1));
        for (std::size_t j = 0; j < text->length; ++j) mask.push_back(T(text->mask[i * text->length + j]));
      }
    }
    const std::size_t len = x.dim(1);
    if (cfg_.kind == "recurrent") return ln_f_(gru(x, mask));
    if (pos_) x = nn::add(x, nn::slice(pos_, 0, 0, len));
    const std::span<const T> m(mask);
    for (const auto& layer : layers_) {
      auto h = layer.ln1(x);
      auto a = nn::multi_head_attention(layer.wq(h), layer.wk(h), layer.wv(h), std::size_t(cfg_.heads), m);
      x = nn::add(x, layer.wo(a));
      x = nn::add(x, layer.ff2(nn::gelu(layer.ff1(layer.ln2(x)))));
    }
    return ln_f_(x);
  }

  /// Folds every adapter into its base weight.
  void merge_lora() {
    for (auto& l : layers_)
      for (auto* p : {&l.wq, &l.wk, &l.wv, &l.wo}) p->merge();
  }

  bool has_lora() const {
    for (const auto& l : layers_)
      if (l.wq.adapted()) return true;
    return false;
  }

 private:
  std::size_t l_fusion_max() const { return l_se_ + std::size_t(cfg_.l_text); }

  // Single-layer GRU over the sequence; masked steps keep the previous state.
  Tensor<T> gru(const Tensor<T>& x, const std::vector<T>& mask) const {
    const std::size_t b = x.dim(0), len = x.dim(1), d = std::size_t(cfg_.d_sd);
    auto xp = gru_x_(x);
    Tensor<T> h(nn::Shape{b, d}, std::vector<T>(b * d, T(0)));
    std::vector<Tensor<T>> outs;
    for (std::size_t t = 0; t < len; ++t) {
      auto xt = nn::reshape(nn::slice(xp, 1, t, 1), {b, 3 * d});
      auto hp = gru_h_(h);
      auto r = nn::sigmoid(nn::add(nn::slice(xt, 1, 0, d), nn::slice(hp, 1, 0, d)));
      auto z = nn::sigmoid(nn::add(nn::slice(xt, 1, d, d), nn::slice(hp, 1, d, d)));
      auto n = nn::tanh(nn::add(nn::slice(xt, 1, 2 * d, d), nn::mul(r, nn::slice(hp, 1, 2 * d, d))));
      auto next = nn::add(n, nn::mul(z, nn::sub(h, n)));
      if (!mask.empty()) {
        std::vector<T> m(b * d);
        for (std::size_t i = 0; i < b; ++i) std::fill_n(m.begin() + std::ptrdiff_t(i * d), d, mask[i * len + t]);
        next = nn::add(h, nn::mul(Tensor<T>(nn::Shape{b, d}, std::move(m)), nn::sub(next, h)));
      }
      h = next;
      outs.push_back(nn::reshape(h, {b, 1, d}));
    }
    return nn::concat(outs, 1);
  }

  DecoderConfig cfg_;
  std::size_t l_se_ = 0;
  nn::Linear<T> feat_proj_;
  Tensor<T> embed_, pos_;
  std::vector<DecoderLayer<T>> layers_;
  nn::Linear<T> gru_x_, gru_h_;
  nn::LayerNorm<T> ln_f_;
};

// ----------------------------------------------------------------------- LSTN

/// Semantic encoder (one linear map over the flattened feature) and decoder.
template <typename T>
class Lstn {
 public:
  Lstn() = default;
  Lstn(nn::ParameterStore<T>& ps, const LstnConfig& cfg, int l_sf, int d_sf, Rng& rng,
       const std::string& prefix = "lstn")
      : cfg_(cfg), l_sf_(std::size_t(l_sf)), d_sf_(std::size_t(d_sf)) {
    cfg.validate(l_sf, d_sf);
    encoder_ = nn::Linear<T>::make(ps, prefix + ".encoder", l_sf_ * d_sf_, code_size(), rng);
    decoder_ = Decoder<T>(ps, cfg, rng, prefix);
  }

  const LstnConfig& config() const { return cfg_; }
  std::size_t code_size() const { return std::size_t(cfg_.l_se) * std::size_t(cfg_.d_se); }
  Decoder<T>& decoder() { return decoder_; }
  const Decoder<T>& decoder() const { return decoder_; }

  /// s_mul[B, L_sf, d_sf] -> code[B, L_se, d_se].
  Tensor<T> encode(const Tensor<T>& s) const {
    if (s.rank() != 3 || s.dim(1) != l_sf_ || s.dim(2) != d_sf_)
      nn::shape_error("encode", s.shape(), {s.rank() ? s.dim(0) : 0, l_sf_, d_sf_});
    const std::size_t b = s.dim(0);
    auto y = encoder_(nn::reshape(s, {b, l_sf_ * d_sf_}));
    return nn::reshape(y, {b, std::size_t(cfg_.l_se), std::size_t(cfg_.d_se)});
  }

  Tensor<T> decode(const Tensor<T>& code, const TextBatch* text) const { return decoder_(code, text); }

 private:
  LstnConfig cfg_;
  std::size_t l_sf_ = 0, d_sf_ = 0;
  nn::Linear<T> encoder_;
  Decoder<T> decoder_;
};

/// LoRA-only fine-tuning: the decoder base weights are frozen, adapters and
/// everything outside the decoder keep training.
template <typename T>
void set_lora_only(nn::ParameterStore<T>& ps, bool on, const std::string& prefix = "lstn") {
  ps.set_trainable(prefix + ".decoder.", !on);
}

/// Bytes of one code sent as float32 I/Q: two real values per symbol, so
/// 4 bytes per real value after zero-padding to even length.
inline std::size_t code_channel_bytes(std::size_t code_values) { return (code_values + code_values % 2) * 4; }

}  // namespace disac::model
