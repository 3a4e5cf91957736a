#include <gtest/gtest.h>

#include <complex>
#include <random>

#include "disac/numerics/grad_check.hpp"
#include "disac/rvfn.hpp"

using namespace disac;
using namespace disac::nn;
using namespace disac::model;

namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor<double>(std::move(shape), std::move(v));
}

Tensor<double> probe(const Tensor<double>& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  return sum(mul(y, random_tensor(y.shape(), rng)));
}

RvfnConfig tiny_config() {
  RvfnConfig c;
  c.l_sf = 2;
  c.d_sf = 4;
  c.heads = 2;
  c.rf_widths = {2, 2, 2};
  c.cv_widths = {4, 4, 6, 4};
  c.cv_depths = {1, 1, 1, 1};
  c.image_h = c.image_w = 32;
  c.antennas = 8;
  c.samples = 10;
  c.drop_path = 0.0;
  return c;
}

void expect_grad_ok(const std::function<Tensor<double>()>& f, ParameterStore<double>& ps, double h = 1e-6) {
  auto rep = grad_check<double>(f, ps, h, 1e-4);
  EXPECT_TRUE(rep.passed) << "worst " << rep.worst_parameter << "[" << rep.worst_index << "] rel "
                          << rep.max_rel_error << " abs " << rep.max_abs_error << " over " << rep.coordinates << " coords";
}

}  // namespace

TEST(ComplexConv, IdentityAndMultiplyByJ) {
  Rng rng(1);
  ComplexTensor<double> x{random_tensor({2, 1, 3, 5}, rng), random_tensor({2, 1, 3, 5}, rng)};
  Tensor<double> one({1, 1, 1, 1}, {1.0}), zero({1, 1, 1, 1}, {0.0});
  auto id = complex_conv(x, one, zero, 1, 0);
  auto j = complex_conv(x, zero, one, 1, 0);
  for (std::size_t i = 0; i < x.real.numel(); ++i) {
    EXPECT_EQ(id.real[i], x.real[i]);
    EXPECT_EQ(id.imag[i], x.imag[i]);
    EXPECT_EQ(j.real[i], -x.imag[i]);
    EXPECT_EQ(j.imag[i], x.real[i]);
  }
}

TEST(ComplexConv, MatchesBruteForceComplexMac) {
  Rng rng(2);
  std::uniform_int_distribution<std::size_t> dim(1, 4), kd(1, 3), sd(1, 2);
  double worst = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = dim(rng), ci = dim(rng), co = dim(rng), k = kd(rng), stride = sd(rng);
    const std::size_t pad = trial % 2 ? k / 2 : 0;
    const std::size_t h = k + dim(rng), w = k + dim(rng) + 2;
    ComplexTensor<double> x{random_tensor({n, ci, h, w}, rng), random_tensor({n, ci, h, w}, rng)};
    auto wr = random_tensor({co, ci, k, k}, rng), wi = random_tensor({co, ci, k, k}, rng);
    auto z = complex_conv(x, wr, wi, stride, pad);
    const std::size_t ho = (h + 2 * pad - k) / stride + 1, wo = (w + 2 * pad - k) / stride + 1;
    ASSERT_EQ(z.real.shape(), (Shape{n, co, ho, wo}));
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t o = 0; o < co; ++o)
        for (std::size_t y = 0; y < ho; ++y)
          for (std::size_t xo = 0; xo < wo; ++xo) {
            std::complex<double> acc = 0;
            for (std::size_t c = 0; c < ci; ++c)
              for (std::size_t a = 0; a < k; ++a)
                for (std::size_t e = 0; e < k; ++e) {
                  const long iy = long(y * stride + a) - long(pad), ix = long(xo * stride + e) - long(pad);
                  if (iy < 0 || ix < 0 || iy >= long(h) || ix >= long(w)) continue;
                  const std::size_t xi = ((b * ci + c) * h + std::size_t(iy)) * w + std::size_t(ix);
                  const std::size_t wi_ = ((o * ci + c) * k + a) * k + e;
                  acc += std::complex<double>(wr[wi_], wi[wi_]) * std::complex<double>(x.real[xi], x.imag[xi]);
                }
            const std::size_t zi = ((b * co + o) * ho + y) * wo + xo;
            worst = std::max({worst, std::abs(z.real[zi] - acc.real()), std::abs(z.imag[zi] - acc.imag())});
          }
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(ComplexConv, RejectsChannelMismatch) {
  Rng rng(3);
  ComplexTensor<double> x{random_tensor({1, 2, 4, 4}, rng), random_tensor({1, 2, 4, 4}, rng)};
  EXPECT_THROW(complex_conv(x, random_tensor({1, 3, 1, 1}, rng), random_tensor({1, 3, 1, 1}, rng), 1, 0),
               ContractError);
}

TEST(ComplexPool, PicksLargestModulus) {
  // One channel, 2x2 window: moduli 1, 5, 2, 5 -> first maximum (3+4j).
  Tensor<double> x({1, 2, 2, 2}, {1, 3, 2, 0, 0, 4, 0, 5});
  auto y = complex_max_pool2d(x, 2, 2);
  ASSERT_EQ(y.shape(), (Shape{1, 2, 1, 1}));
  EXPECT_EQ(y[0], 3.0);
  EXPECT_EQ(y[1], 4.0);
}

TEST(ComplexPool, Gradient) {
  Rng rng(4);
  ParameterStore<double> ps;
  auto x = ps.add("x", random_tensor({2, 4, 4, 6}, rng));
  expect_grad_ok([&] { return probe(complex_max_pool2d(x, 2, 2)); }, ps);
}

TEST(SumSorted, OrderIndependentAndGradient) {
  Rng rng(5);
  std::vector<Tensor<double>> parts;
  for (int i = 0; i < 5; ++i) parts.push_back(random_tensor({3, 7}, rng, -1e3, 1e3));
  auto a = sum_sorted(parts);
  std::reverse(parts.begin(), parts.end());
  std::swap(parts[1], parts[3]);
  auto b = sum_sorted(parts);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
  ParameterStore<double> ps;
  auto p = ps.add("p", random_tensor({3, 7}, rng));
  auto q = ps.add("q", random_tensor({3, 7}, rng));
  expect_grad_ok([&] { return probe(sum_sorted<double>({p, q, mul(p, q)})); }, ps);
}

TEST(RfExtract, DefaultShapeAndZeroEcho) {
  RvfnConfig cfg;
  ParameterStore<float> ps;
  Rng rng(6);
  Rvfn<float> m(ps, cfg, Modality::Rf, rng);
  Tensor<float> echo({2, 2, 16, 60}, std::vector<float>(2 * 2 * 16 * 60, 0.f));
  auto y = m.rf_extract(echo);
  EXPECT_EQ(y.shape(), (Shape{2, 16, 64}));
  // Zero echo: every conv output is zero, so the projection emits its bias.
  const auto& bias = ps.at("rvfn.rf.proj.b").value;
  for (std::size_t i = 0; i < 1024; ++i) {
    EXPECT_EQ(y[i], bias[i]);
    EXPECT_EQ(y[1024 + i], bias[i]);
  }
}

TEST(RfExtract, StageOneIsLinearBeforeActivation) {
  auto cfg = tiny_config();
  ParameterStore<double> ps;
  Rng rng(7);
  Rvfn<double> m(ps, cfg, Modality::Rf, rng);
  auto e = random_tensor({2, 2, 8, 10}, rng);
  auto a = m.rf_stage1_preactivation(e);
  auto b = m.rf_stage1_preactivation(scale(e, 2.0));
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(b[i], 2 * a[i], 1e-12);
}

TEST(RfExtract, TooShortEchoIsConfigError) {
  auto cfg = tiny_config();
  cfg.samples = 7;
  ParameterStore<double> ps;
  Rng rng(8);
  EXPECT_THROW(Rvfn<double>(ps, cfg, Modality::Rf, rng), ConfigError);
}

TEST(VisionExtract, StemAndShapes) {
  RvfnConfig cfg;
  ParameterStore<float> ps;
  Rng rng(9);
  Rvfn<float> m(ps, cfg, Modality::Cv, rng);
  Tensor<float> img({1, 3, 64, 64}, std::vector<float>(3 * 64 * 64, 0.5f));
  auto stem = conv2d(img, ps.at("rvfn.cv.stem.w").value, ps.at("rvfn.cv.stem.b").value, 4, 0);
  EXPECT_EQ(stem.shape(), (Shape{1, 32, 16, 16}));
  EXPECT_EQ(m.vision_extract(img, eval_mode()).shape(), (Shape{1, 16, 64}));
  cfg.image_h = 48;
  ParameterStore<float> ps2;
  EXPECT_THROW(Rvfn<float>(ps2, cfg, Modality::Cv, rng), ConfigError);
}

TEST(VisionExtract, BlockScaleCases) {
  Rng rng(10);
  ParameterStore<double> ps;
  const std::size_t c = 3;
  ConvNextBlock<double> blk;
  blk.dw_w = ps.add("dw.w", random_tensor({c, 1, 7, 7}, rng));
  blk.dw_b = ps.add("dw.b", random_tensor({c}, rng));
  blk.ln = LayerNorm<double>::make(ps, "ln", c);
  blk.pw1 = Linear<double>::make(ps, "pw1", c, 4 * c, rng);
  blk.pw2 = Linear<double>::make(ps, "pw2", 4 * c, c, rng);
  blk.gamma = ps.add_constant("gamma", {c}, 0.0);
  auto z = random_tensor({2, c, 5, 5}, rng);
  Rng dr(1);
  Mode train{true, &dr};
  auto y0 = convnext_block(z, blk, 0.5, train);
  for (std::size_t i = 0; i < z.numel(); ++i) EXPECT_EQ(y0[i], z[i]);

  std::fill(blk.gamma.mutable_data().begin(), blk.gamma.mutable_data().end(), 1.0);
  auto y1 = convnext_block(z, blk, 0.0, train);
  auto path = depthwise_conv2d(z, blk.dw_w, blk.dw_b, 1, 3);
  path = permute(blk.pw2(gelu(blk.pw1(blk.ln(permute(path, {0, 2, 3, 1}))))), {0, 3, 1, 2});
  for (std::size_t i = 0; i < z.numel(); ++i) EXPECT_EQ(y1[i], z[i] + path[i]);
}

TEST(Fuse, SingleTokenIdentityProjections) {
  ParameterStore<double> ps;
  const std::size_t d = 4;
  std::vector<double> eye(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) eye[i * d + i] = 1.0;
  FusionParams<double> p;
  for (auto* w : {&p.wq1, &p.wk1, &p.wv1, &p.wq2, &p.wk2, &p.wv2}) *w = Tensor<double>({d, d}, eye);
  p.ln = LayerNorm<double>::make(ps, "ln", d);
  Tensor<double> s({1, 1, d}, {0.3, -1.2, 2.0, 0.1});
  auto out = fuse(s, s, p, 2);
  auto want = add(layer_norm(scale(s, 2.0), p.ln.gamma, p.ln.beta), scale(s, 2.0));
  for (std::size_t i = 0; i < d; ++i) EXPECT_NEAR(out[i], want[i], 1e-12);
}

TEST(Fuse, TokenPermutationEquivariance) {
  auto cfg = tiny_config();
  cfg.l_sf = 5;
  Rng rng(11);
  ParameterStore<double> ps;
  Rvfn<double> m(ps, cfg, Modality::Multimodal, rng);
  auto rf = random_tensor({2, 5, 4}, rng), cv = random_tensor({2, 5, 4}, rng);
  const std::vector<std::size_t> perm = {3, 0, 4, 1, 2};
  auto permute_tokens = [&](const Tensor<double>& x) {
    std::vector<Tensor<double>> parts;
    for (auto i : perm) parts.push_back(slice(x, 1, i, 1));
    return concat(parts, 1);
  };
  auto a = permute_tokens(fuse(rf, cv, m.fusion(), 2));
  auto b = fuse(permute_tokens(rf), permute_tokens(cv), m.fusion(), 2);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Fuse, ZeroInputsFinite) {
  auto cfg = tiny_config();
  Rng rng(12);
  ParameterStore<double> ps;
  Rvfn<double> m(ps, cfg, Modality::Multimodal, rng);
  Tensor<double> z({1, 2, 4}, std::vector<double>(8, 0.0));
  auto y = fuse(z, z, m.fusion(), 2);
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_TRUE(std::isfinite(y[i]));
  EXPECT_THROW(fuse(z, Tensor<double>({1, 3, 4}, std::vector<double>(12, 0.0)), m.fusion(), 2), ContractError);
}

TEST(Fuse, SwapSymmetry) {
  auto cfg = tiny_config();
  Rng rng(13);
  ParameterStore<double> ps;
  Rvfn<double> m(ps, cfg, Modality::Multimodal, rng);
  auto rf = random_tensor({2, 2, 4}, rng), cv = random_tensor({2, 2, 4}, rng);
  auto swapped = m.fusion();
  std::swap(swapped.wq1, swapped.wq2);
  std::swap(swapped.wk1, swapped.wk2);
  std::swap(swapped.wv1, swapped.wv2);
  auto a = fuse(rf, cv, m.fusion(), 2);
  auto b = fuse(cv, rf, swapped, 2);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Rvfn, EndToEndGradient) {
  auto cfg = tiny_config();
  Rng rng(14);
  ParameterStore<double> ps;
  Rvfn<double> m(ps, cfg, Modality::Multimodal, rng);
  auto img = random_tensor({2, 3, 32, 32}, rng);
  auto echo = random_tensor({2, 2, 8, 10}, rng);
  auto target = random_tensor({2, 2, 4}, rng);
  expect_grad_ok([&] { return mse_loss(m.forward(img, echo, eval_mode()), target); }, ps);
}

TEST(Rvfn, DeterministicInEvalAndModalityNames) {
  auto cfg = tiny_config();
  Rng rng(15);
  ParameterStore<double> ps;
  Rvfn<double> m(ps, cfg, Modality::Multimodal, rng);
  auto img = random_tensor({1, 3, 32, 32}, rng);
  auto echo = random_tensor({1, 2, 8, 10}, rng);
  auto a = m.forward(img, echo, eval_mode()), b = m.forward(img, echo, eval_mode());
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
  for (auto mod : {Modality::Multimodal, Modality::Rf, Modality::Cv}) EXPECT_EQ(parse_modality(to_string(mod)), mod);
  EXPECT_THROW(parse_modality("xx"), ConfigError);
}
