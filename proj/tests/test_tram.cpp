#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "disac/numerics/grad_check.hpp"
#include "disac/tram.hpp"

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

TramConfig tiny_config() {
  TramConfig c;
  c.layers = 2;
  c.heads = 2;
  c.d_sd = 4;
  c.dropout = 0.0;
  return c;
}

}  // namespace

TEST(Aggregate, SingleTokenIdentityIsKTimesF) {
  TramConfig cfg = tiny_config();
  cfg.layers = 1;
  ParameterStore<double> ps;
  Rng rng(1);
  Tram<double> t(ps, cfg, rng);
  std::vector<double> eye(16, 0.0);
  for (std::size_t i = 0; i < 4; ++i) eye[i * 5] = 1.0;
  for (auto* w : {&t.layers()[0].wq, &t.layers()[0].wk, &t.layers()[0].wv})
    std::copy(eye.begin(), eye.end(), w->mutable_data().begin());
  Tensor<double> f({1, 1, 4}, {0.5, -1.5, 2.25, 3.0});
  auto center = random_tensor({1, 1, 4}, rng);
  for (std::size_t k = 1; k <= 4; ++k) {
    std::vector<Tensor<double>> devs(k, f);
    auto s = t.attend(center, devs);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(s[i], double(k) * f[i]);
  }
}

TEST(Aggregate, EmptyDeviceListRejected) {
  ParameterStore<double> ps;
  Rng rng(2);
  Tram<double> t(ps, tiny_config(), rng);
  EXPECT_THROW(t.aggregate(random_tensor({1, 3, 4}, rng), {}, eval_mode()), ContractError);
  EXPECT_THROW(t.aggregate(random_tensor({1, 3, 4}, rng), {random_tensor({2, 3, 4}, rng)}, eval_mode()),
               ContractError);
}

TEST(Aggregate, DeviceOrderInvariance) {
  TramConfig cfg;
  ParameterStore<float> ps;
  Rng rng(3);
  Tram<float> t(ps, cfg, rng);
  auto center = random_tensor<float>({2, 32, 64}, rng);
  std::vector<Tensor<float>> devs;
  for (int k = 0; k < 4; ++k) devs.push_back(random_tensor<float>({2, 32, 64}, rng));
  auto ref = t.aggregate(center, devs, eval_mode());
  std::vector<std::size_t> order = {0, 1, 2, 3};
  double worst = 0;
  while (std::next_permutation(order.begin(), order.end())) {
    std::vector<Tensor<float>> p;
    for (auto i : order) p.push_back(devs[i]);
    auto y = t.aggregate(center, p, eval_mode());
    for (std::size_t i = 0; i < y.numel(); ++i) worst = std::max(worst, double(std::abs(y[i] - ref[i])));
  }
  EXPECT_LE(worst, 1e-6);
  EXPECT_EQ(worst, 0.0);  // sorted summation makes it exact
}

TEST(Aggregate, AddingDeviceChangesOutputAndVariableK) {
  ParameterStore<double> ps;
  Rng rng(4);
  Tram<double> t(ps, tiny_config(), rng);
  auto center = random_tensor({1, 3, 4}, rng);
  std::vector<Tensor<double>> devs;
  Tensor<double> prev;
  for (int k = 1; k <= 4; ++k) {
    devs.push_back(random_tensor({1, 3, 4}, rng));
    auto y = t.aggregate(center, devs, eval_mode());
    EXPECT_EQ(y.shape(), (Shape{1, 3, 4}));
    if (prev) {
      double diff = 0;
      for (std::size_t i = 0; i < y.numel(); ++i) diff = std::max(diff, std::abs(y[i] - prev[i]));
      EXPECT_GT(diff, 0.0);
    }
    prev = y;
  }
}

TEST(Aggregate, CenterAsDeviceAndMean) {
  ParameterStore<double> ps;
  Rng rng(5);
  auto cfg = tiny_config();
  Tram<double> t(ps, cfg, rng);
  auto center = random_tensor({1, 3, 4}, rng), dev = random_tensor({1, 3, 4}, rng);
  auto a = t.forward(center, {dev}, eval_mode());
  auto b = t.aggregate(center, {center, dev}, eval_mode());
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
  cfg.aggregation = "avg";
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Predict, RangesPoolingAndBias) {
  ParameterStore<double> ps;
  Rng rng(6);
  auto head = PredictionHead<double>::make(ps, "head", 4, 3, rng);
  auto s = random_tensor({3, 5, 4}, rng, -20, 20);
  auto out = head(s);
  EXPECT_EQ(out.regression.shape(), (Shape{3, 4}));
  EXPECT_EQ(out.logits.shape(), (Shape{3, 3}));
  for (double v : out.regression.data()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  auto dup = head(concat<double>({s, s}, 1));
  for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(dup.regression[i], out.regression[i], 1e-12);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(dup.logits[i], out.logits[i], 1e-12);
  auto zero = head.from_embedding(Tensor<double>({2, 8}, std::vector<double>(16, 0.0)));
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(zero.logits[r * 3 + c], ps.at("head.class.b").value[c]);
}

TEST(Tram, GradientThroughAggregateAndHead) {
  ParameterStore<double> ps;
  Rng rng(7);
  Tram<double> t(ps, tiny_config(), rng);
  auto head = PredictionHead<double>::make(ps, "head", 4, 3, rng);
  auto center = random_tensor({2, 3, 4}, rng);
  std::vector<Tensor<double>> devs = {random_tensor({2, 3, 4}, rng), random_tensor({2, 3, 4}, rng)};
  auto labels = random_tensor({2, 4}, rng, 0.1, 0.9);
  const std::vector<std::int32_t> cls = {2, 0};
  auto f = [&] {
    auto out = head(t.forward(center, devs, eval_mode()));
    return add(scale(mse_loss(out.regression, labels), 50.0), cross_entropy(out.logits, cls));
  };
  auto rep = grad_check<double>(f, ps, 1e-5, 1e-4);
  EXPECT_TRUE(rep.passed) << "worst " << rep.worst_parameter << "[" << rep.worst_index << "] rel "
                          << rep.max_rel_error << " abs " << rep.max_abs_error;
}
