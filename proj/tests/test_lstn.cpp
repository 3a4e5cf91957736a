#include <gtest/gtest.h>

#include <random>

#include "disac/lstn.hpp"
#include "disac/numerics/checkpoint.hpp"
#include "disac/numerics/grad_check.hpp"

using namespace disac;
using namespace disac::nn;
using namespace disac::model;

namespace {

template <typename T = double>
Tensor<T> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = T(u(rng));
  return Tensor<T>(std::move(shape), std::move(v));
}

LstnConfig tiny_config() {
  LstnConfig c;
  c.l_se = 3;
  c.d_se = 4;
  c.decoder.layers = 2;
  c.decoder.heads = 2;
  c.decoder.d_sd = 6;
  c.decoder.ff = 8;
  c.decoder.lora_rank = 2;
  c.decoder.l_text = 20;
  return c;
}

TextBatch contexts(const std::vector<std::pair<double, double>>& snr_dist, std::size_t length) {
  std::vector<std::string> texts;
  for (auto [s, d] : snr_dist) texts.push_back(channel::render_context(s, d).text);
  return tokenize_batch(texts, length);
}

}  // namespace

TEST(Tokenizer, TemplateExample) {
  auto t = tokenize("the snr is 5.0 db and the distance is 50.0 m", 24);
  EXPECT_EQ(t.count, 17u);
  EXPECT_EQ(std::count(t.mask.begin(), t.mask.end(), 1), 17);
  EXPECT_EQ(t.ids.size(), 24u);
  EXPECT_EQ(t.ids[0], kBosId);
  EXPECT_EQ(t.ids[17], kPadId);
}

TEST(Tokenizer, EmptyAndRoundTrip) {
  auto e = tokenize("", 24);
  EXPECT_EQ(e.count, 0u);
  EXPECT_TRUE(std::all_of(e.ids.begin(), e.ids.end(), [](auto i) { return i == kPadId; }));
  EXPECT_TRUE(std::all_of(e.mask.begin(), e.mask.end(), [](auto m) { return m == 0; }));
  Rng rng(1);
  std::uniform_real_distribution<double> snr(-5, 25), dist(0, 141.5);
  for (int i = 0; i < 200; ++i) {
    const auto text = channel::render_context(snr(rng), dist(rng)).text;
    EXPECT_EQ(detokenize(tokenize(text, 24).ids), text);
  }
}

TEST(Tokenizer, OutOfVocabularyNamesToken) {
  try {
    tokenize("the snr is high", 24);
    FAIL();
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("'high'"), std::string::npos) << e.what();
  }
  EXPECT_THROW(tokenize("the snr is 5.0 db and the distance is 50.0 m", 10), ContractError);
}

TEST(Encode, BiasLinearityAndCompression) {
  LstnConfig cfg;
  ParameterStore<double> ps;
  Rng rng(2);
  Lstn<double> m(ps, cfg, 16, 64, rng);
  EXPECT_EQ(m.code_size(), 256u);
  EXPECT_EQ(16u * 64u / m.code_size(), 4u);
  Tensor<double> zero({2, 16, 64}, std::vector<double>(2048, 0.0));
  auto z = m.encode(zero);
  EXPECT_EQ(z.shape(), (Shape{2, 8, 32}));
  const auto& bias = ps.at("lstn.encoder.b").value;
  for (std::size_t i = 0; i < 256; ++i) EXPECT_EQ(z[256 + i], bias[i]);
  auto a = random_tensor({2, 16, 64}, rng), b = random_tensor({2, 16, 64}, rng);
  auto lhs = m.encode(add(a, b));
  auto rhs = sub(add(m.encode(a), m.encode(b)), z);
  for (std::size_t i = 0; i < lhs.numel(); ++i) EXPECT_NEAR(lhs[i], rhs[i], 1e-12);
  EXPECT_THROW(m.encode(random_tensor({2, 16, 63}, rng)), ContractError);
  EXPECT_THROW(Lstn<double>(ps, [] { LstnConfig c; c.d_se = 128; return c; }(), 16, 64, rng), ConfigError);
}

TEST(Encode, ChannelBytesWithinTenPercentOfRaw) {
  const std::size_t raw = 64 * 64 * 3 + 16 * 60 * 8;
  EXPECT_EQ(raw, 19968u);
  EXPECT_EQ(code_channel_bytes(256), 1024u);
  EXPECT_LE(double(code_channel_bytes(256)), 0.10 * double(raw));
  EXPECT_EQ(code_channel_bytes(255), 1024u);
}

TEST(Decode, LengthAndFeatureOnlyEquivalence) {
  LstnConfig cfg;
  ParameterStore<double> ps;
  Rng rng(3);
  Lstn<double> m(ps, cfg, 16, 64, rng);
  auto code = random_tensor({2, 8, 32}, rng);
  auto text = contexts({{5, 50}, {20, 10}}, 24);
  EXPECT_EQ(m.decode(code, &text).shape(), (Shape{2, 32, 64}));

  auto pad = tokenize_batch({"", ""}, 24);
  auto full = m.decode(code, &pad);
  auto feat = m.decode(code, nullptr);
  ASSERT_EQ(feat.shape(), (Shape{2, 8, 64}));
  double worst = 0;
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 8 * 64; ++i) worst = std::max(worst, std::abs(full[b * 32 * 64 + i] - feat[b * 8 * 64 + i]));
  EXPECT_LT(worst, 1e-12);

  TextBatch bad = text;
  bad.batch = 3;
  EXPECT_THROW(m.decode(code, &bad), ContractError);
}

TEST(Decode, SensitiveToContext) {
  LstnConfig cfg;
  ParameterStore<double> ps;
  Rng rng(4);
  Lstn<double> m(ps, cfg, 16, 64, rng);
  auto code = random_tensor({1, 8, 32}, rng);
  auto a = contexts({{5, 50}}, 24), b = contexts({{15, 50}}, 24);
  auto ya = m.decode(code, &a), yb = m.decode(code, &b);
  double diff = 0;
  for (std::size_t i = 0; i < 8 * 64; ++i) diff = std::max(diff, std::abs(ya[i] - yb[i]));
  EXPECT_GT(diff, 0.0);
}

TEST(Decode, FeaturePermutationEquivarianceWithoutPositions) {
  auto cfg = tiny_config();
  cfg.decoder.positional = false;
  ParameterStore<double> ps;
  Rng rng(5);
  Lstn<double> m(ps, cfg, 4, 8, rng);
  auto code = random_tensor({2, 3, 4}, rng);
  auto text = contexts({{5, 50}, {0, 1}}, 20);
  const std::vector<std::size_t> perm = {2, 0, 1};
  auto permuted = concat<double>({slice(code, 1, 2, 1), slice(code, 1, 0, 1), slice(code, 1, 1, 1)}, 1);
  auto y = m.decode(code, &text), yp = m.decode(permuted, &text);
  const std::size_t len = 23, d = 6;
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < d; ++j)
        EXPECT_NEAR(yp[(b * len + i) * d + j], y[(b * len + perm[i]) * d + j], 1e-12);
    for (std::size_t i = 3; i < len; ++i)
      for (std::size_t j = 0; j < d; ++j) EXPECT_NEAR(yp[(b * len + i) * d + j], y[(b * len + i) * d + j], 1e-12);
  }
}

TEST(Lora, ZeroAdapterIsBitIdentical) {
  auto cfg = tiny_config();
  Rng rng(6);
  ParameterStore<double> with, without;
  Lstn<double> a(with, cfg, 4, 8, rng);
  auto plain = cfg;
  plain.decoder.lora_layers = 0;
  Lstn<double> b(without, plain, 4, 8, rng);
  Archive ar;
  export_parameters(with, ar, "lstn.encoder");
  export_parameters(with, ar, "lstn.decoder");
  import_parameters(without, ar);
  auto code = random_tensor({2, 3, 4}, rng);
  auto text = contexts({{5, 50}, {0, 1}}, 20);
  auto ya = a.decode(code, &text), yb = b.decode(code, &text);
  ASSERT_TRUE(a.decoder().has_lora());
  ASSERT_FALSE(b.decoder().has_lora());
  for (std::size_t i = 0; i < ya.numel(); ++i) EXPECT_EQ(ya[i], yb[i]);

  auto w = random_tensor({3, 5}, rng);
  auto applied = lora_apply(w, Tensor<double>({3, 2}, std::vector<double>(6, 0.0)), random_tensor({2, 5}, rng));
  for (std::size_t i = 0; i < w.numel(); ++i) EXPECT_EQ(applied[i], w[i]);
}

TEST(Lora, RankOneAlgebraAndRankMismatch) {
  Rng rng(7);
  auto w = random_tensor({4, 3}, rng), u = random_tensor({4, 1}, rng), v = random_tensor({1, 3}, rng);
  auto x = random_tensor({5, 3}, rng);
  auto y = linear(x, lora_apply(w, u, v), Tensor<double>());
  auto want = add(linear(x, w, Tensor<double>()), matmul(matmul(x, permute(v, {1, 0})), permute(u, {1, 0})));
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], want[i], 1e-12);
  EXPECT_THROW(lora_apply(w, random_tensor({4, 2}, rng), v), ContractError);
}

TEST(Lora, MergedMatchesAdapterForward) {
  LstnConfig cfg;
  Rng rng(8);
  ParameterStore<float> ps;
  Lstn<float> m(ps, cfg, 16, 64, rng);
  for (auto& p : ps.all())
    if (p.name.starts_with("lstn.lora.") && p.name.ends_with(".A"))
      for (auto& v : p.value.mutable_data()) v = float(std::uniform_real_distribution<double>(-0.2, 0.2)(rng));
  auto code = random_tensor<float>({2, 8, 32}, rng);
  auto text = contexts({{5, 50}, {25, 141.4}}, 24);
  auto before = m.decode(code, &text);
  m.decoder().merge_lora();
  for (const auto& p : ps.all()) {
    if (!p.name.ends_with(".A")) continue;
    for (float v : p.value.data()) EXPECT_EQ(v, 0.0f);
  }
  auto after = m.decode(code, &text);
  double worst = 0;
  for (std::size_t i = 0; i < before.numel(); ++i) worst = std::max(worst, double(std::abs(before[i] - after[i])));
  EXPECT_LT(worst, 1e-6);
}

TEST(Lora, LoraOnlyStepLeavesBaseWeights) {
  auto cfg = tiny_config();
  Rng rng(9);
  ParameterStore<double> ps;
  Lstn<double> m(ps, cfg, 4, 8, rng);
  set_lora_only(ps, true);
  const auto base = ps.hash("lstn.decoder."), lora = ps.hash("lstn.lora."), enc = ps.hash("lstn.encoder.");
  Adam<double> opt(ps, {});
  auto text = contexts({{5, 50}, {0, 1}}, 20);
  for (int step = 0; step < 3; ++step) {
    ps.zero_grad();
    auto y = m.decode(m.encode(random_tensor({2, 4, 8}, rng)), &text);
    mse_loss(y, random_tensor(y.shape(), rng)).backward();
    opt.step();
  }
  EXPECT_EQ(ps.hash("lstn.decoder."), base);
  EXPECT_NE(ps.hash("lstn.lora."), lora);
  EXPECT_NE(ps.hash("lstn.encoder."), enc);
}

TEST(Lstn, GradientThroughLosslessChannel) {
  for (const std::string kind : {"transformer", "recurrent"}) {
    auto cfg = tiny_config();
    cfg.decoder.kind = kind;
    Rng rng(10);
    ParameterStore<double> ps;
    Lstn<double> m(ps, cfg, 4, 8, rng);
    auto s = random_tensor({2, 4, 8}, rng);
    auto text = contexts({{5, 50}, {12.5, 3}}, 20);
    // A starts at zero, which would leave B with a zero gradient.
    for (auto& p : ps.all())
      if (p.name.ends_with(".A"))
        for (auto& v : p.value.mutable_data()) v = std::uniform_real_distribution<double>(-0.3, 0.3)(rng);
    const std::vector<double> snr = {channel::kLossless, channel::kLossless};
    Tensor<double> target = random_tensor({2, 23, 6}, rng);
    auto f = [&] {
      Rng ch(1);
      auto received = channel::pass(m.encode(s), snr, ch);
      return mse_loss(m.decode(received, &text), target);
    };
    auto rep = grad_check<double>(f, ps, 1e-5, 1e-4);
    EXPECT_TRUE(rep.passed) << kind << ": worst " << rep.worst_parameter << "[" << rep.worst_index << "] rel "
                            << rep.max_rel_error << " abs " << rep.max_abs_error;
  }
}

TEST(Lstn, RecurrentShapeAndConfigErrors) {
  auto cfg = tiny_config();
  cfg.decoder.kind = "recurrent";
  Rng rng(11);
  ParameterStore<double> ps;
  Lstn<double> m(ps, cfg, 4, 8, rng);
  auto text = contexts({{5, 50}}, 20);
  EXPECT_EQ(m.decode(random_tensor({1, 3, 4}, rng), &text).shape(), (Shape{1, 23, 6}));
  cfg.decoder.kind = "lstm";
  EXPECT_THROW(cfg.decoder.validate(), ConfigError);
  cfg.decoder.kind = "transformer";
  cfg.decoder.heads = 4;
  EXPECT_THROW(cfg.decoder.validate(), ConfigError);
}
