#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>
#include <sstream>
#include <unistd.h>

#include "disac/pipeline.hpp"

using namespace disac;
using namespace disac::eval;
namespace fs = std::filesystem;

namespace {

double rel_err(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

std::vector<double> random_vec(std::mt19937_64& g, std::size_t n, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(g);
  return v;
}

RunConfig tiny_run() {
  RunConfig rc;
  rc.data.samples = 8;
  rc.data.chunk_records = 16;
  auto& r = rc.model.rvfn;
  r.l_sf = 4, r.d_sf = 8, r.heads = 2;
  r.rf_widths = {2, 2, 2};
  r.cv_widths = {4, 4, 8, 8};
  r.cv_depths = {1, 1, 1, 1};
  rc.model.lstn.l_se = 2, rc.model.lstn.d_se = 8;
  auto& d = rc.model.lstn.decoder;
  d.layers = 1, d.heads = 2, d.d_sd = 8, d.ff = 16;
  rc.model.tram.layers = 1, rc.model.tram.heads = 2, rc.model.tram.d_sd = 8;
  rc.train.batch = 8;
  rc.train.epochs_stage1 = 1;
  rc.train.epochs_stage2 = 1;
  rc.resolve();
  rc.validate();
  return rc;
}

}  // namespace

TEST(Metrics, MatchScalarLoopOracles) {
  std::mt19937_64 g(11);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 1 + g() % 300;
    auto x = random_vec(g, n, 0.01, 1.0), p = random_vec(g, n, 0.0, 1.0);
    long double e = 0, s = 0;
    for (std::size_t i = 0; i < n; ++i) {
      e += (long double)(p[i] - x[i]) * (p[i] - x[i]);
      s += (long double)x[i] * x[i];
    }
    EXPECT_LT(rel_err(nmse_db(p, x), double(10 * std::log10(e / s))), 1e-10);
    EXPECT_LT(rel_err(rmse(p, x), double(std::sqrt(e / n))), 1e-10);
  }
}

TEST(Metrics, TrivialCases) {
  const std::vector<double> x(8, 1.0), p01(8, 1.1), twice(8, 2.0);
  EXPECT_NEAR(nmse_db(p01, x), -20.0, 1e-9);
  EXPECT_EQ(nmse_db(twice, x), 0.0);
  const std::vector<double> y = {0.3, -2.0, 5.5};
  EXPECT_EQ(nmse_db(y, y), -std::numeric_limits<double>::infinity());
  const std::vector<double> zero(3, 0.0);
  EXPECT_THROW(nmse_db(y, zero), DomainError);

  const std::vector<double> o = {0, 0}, q = {3, 4};
  EXPECT_NEAR(rmse(q, o), std::sqrt(12.5), 1e-15);
  EXPECT_EQ(rmse(y, y), 0.0);
  const std::vector<double> shifted = {0.3 - 0.25, -2.0 - 0.25, 5.5 - 0.25};
  EXPECT_NEAR(rmse(shifted, y), 0.25, 1e-15);
  EXPECT_THROW(rmse({}, {}), ContractError);
}

TEST(Metrics, Accuracy) {
  const std::vector<double> logits = {2, 1, 0, 0, 3, 1, 1, 1, 5, 0, 9, 0};
  const std::vector<std::int32_t> labels = {0, 1, 2, 0};
  EXPECT_DOUBLE_EQ(accuracy(logits, 3, labels), 0.75);
  const std::vector<std::int32_t> all = {0, 1, 2, 1};
  EXPECT_DOUBLE_EQ(accuracy(logits, 3, all), 1.0);
  const std::vector<double> tie = {1, 1, 1};
  EXPECT_EQ(argmax(tie), 0u);
  EXPECT_THROW(accuracy({}, 3, {}), ContractError);

  std::mt19937_64 g(5);
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 1 + g() % 40;
    auto lg = random_vec(g, n * 3, -2, 2);
    std::vector<std::int32_t> lab(n);
    for (auto& l : lab) l = std::int32_t(g() % 3);
    std::size_t hits = 0;
    for (std::size_t r = 0; r < n; ++r) {
      std::size_t b = 0;
      for (std::size_t c = 0; c < 3; ++c)
        if (lg[r * 3 + c] > lg[r * 3 + b]) b = c;
      hits += std::int32_t(b) == lab[r];
    }
    EXPECT_LT(std::abs(accuracy(lg, 3, lab) - double(hits) / double(n)), 1e-10);
  }
}

TEST(Metrics, BatchPartitionInvariance) {
  std::mt19937_64 g(8);
  const std::size_t n = 97;
  auto p = random_vec(g, n * 4, 0, 1), x = random_vec(g, n * 4, 0.05, 0.95), lg = random_vec(g, n * 3, -1, 1);
  std::vector<std::int32_t> lab(n);
  for (auto& l : lab) l = std::int32_t(g() % 3);
  data::NormSpec norm;
  auto fill = [&](MetricAccumulator& a, std::size_t lo, std::size_t hi) {
    for (std::size_t r = lo; r < hi; ++r)
      a.add({p.data() + r * 4, 4}, {x.data() + r * 4, 4}, {lg.data() + r * 3, 3}, lab[r]);
  };
  MetricAccumulator whole(norm);
  fill(whole, 0, n);
  MetricAccumulator a(norm), b(norm), c(norm);
  fill(a, 0, 10), fill(b, 10, 64), fill(c, 64, n);
  a.merge(b), a.merge(c);
  const auto m1 = whole.finish(), m2 = a.finish();
  for (std::size_t j = 0; j < 4; ++j) {
    EXPECT_NEAR(m1.nmse_db[j], m2.nmse_db[j], 1e-10);
    EXPECT_NEAR(m1.rmse[j], m2.rmse[j], 1e-10);
    std::vector<double> pj, xj;
    for (std::size_t r = 0; r < n; ++r) pj.push_back(p[r * 4 + j]), xj.push_back(x[r * 4 + j]);
    EXPECT_LT(rel_err(m1.nmse_db[j], nmse_db(pj, xj)), 1e-10);
    EXPECT_LT(rel_err(m1.rmse[j], label_scales(norm)[j] * rmse(pj, xj)), 1e-10);
  }
  EXPECT_DOUBLE_EQ(m1.accuracy, accuracy(lg, 3, lab));
}

TEST(Compression, ByteAccounting) {
  auto paper = compression_ratio(100352, 1370112);
  EXPECT_NEAR(paper.ratio, 0.0733, 1e-4);
  EXPECT_NEAR(paper.reduction, 0.9267, 1e-4);  // quoted figure is truncated
  EXPECT_EQ(raw_record_bytes(64, 64, 16, 60), 19968u);
  auto def = default_compression(RunConfig{});
  EXPECT_EQ(def.code_bytes, 1024u);
  EXPECT_EQ(def.raw_bytes, 19968u);
  EXPECT_NEAR(def.ratio, 1024.0 / 19968.0, 1e-15);
  EXPECT_EQ(compression_ratio(0, 100).ratio, 0.0);
}

TEST(Modes, NamesAndErrors) {
  EXPECT_EQ(modes().size(), 7u);
  EXPECT_TRUE(parse_mode("no-sc-loss").lossless);
  EXPECT_FALSE(parse_mode("mm-sd").multi_device);
  try {
    parse_mode("fusion");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("sm-sd-rf, sm-sd-cv, mm-sd"), std::string::npos);
  }
}

TEST(Report, CsvRoundTripWithInf) {
  ReportRow r{"full", 2, 15, {}, 0.05, 1.25};
  r.metrics.nmse_db = {-std::numeric_limits<double>::infinity(), -12.5, -3, 0};
  r.metrics.rmse = {1, 2, 3, 4};
  r.metrics.accuracy = 0.5;
  std::stringstream ss;
  write_report(ss, {r});
  const auto text = ss.str();
  EXPECT_EQ(text.substr(0, text.find('\n')),
            "mode,center_position,snr_db,nmse_d,nmse_a,nmse_p,nmse_v,rmse_d,rmse_a,rmse_p,rmse_v,accuracy,"
            "compression_ratio,t_exe_s");
  EXPECT_NE(text.find("full,3,15,-inf,-12.5"), std::string::npos);
  auto back = read_report(ss);
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back[0].center, 2u);
  EXPECT_TRUE(std::isinf(back[0].metrics.nmse_db[0]));
  EXPECT_EQ(back[0].metrics.rmse[3], 4.0);
}

TEST(Ablation, FullMatrixOnTinyRun) {
  auto rc = tiny_run();
  const auto root = fs::temp_directory_path() / ("disac_eval_" + std::to_string(::getpid()));
  fs::remove_all(root);
  const std::vector<double> snrs(kDefaultSnrs.begin(), kDefaultSnrs.end());
  auto s = pipeline::run_all(rc, root, snrs);
  ASSERT_EQ(s.rows.size(), 140u);
  std::set<std::tuple<std::string, std::size_t, double>> cells;
  for (const auto& r : s.rows) {
    cells.insert({r.mode, r.center, r.snr_db});
    EXPECT_GE(r.metrics.accuracy, 0.0);
    EXPECT_LE(r.metrics.accuracy, 1.0);
    for (double v : r.metrics.rmse) EXPECT_GE(v, 0.0);
    EXPECT_GE(r.t_exe, 0.0);
  }
  EXPECT_EQ(cells.size(), 140u);
  // Single-device modes never transmit; transmission at 0 dB costs the
  // analytic airtime of a code.
  const double air0 = train::code_airtime(8, 0.0, rc.data.channel);
  for (const auto& r : s.rows) {
    if (r.mode == "mm-sd") {
      EXPECT_LT(r.t_exe, 1.0);
    }
    if (r.mode == "full" && r.snr_db == 0) {
      EXPECT_GE(r.t_exe, air0);
    }
  }
  // no-sc-loss metrics ignore the SNR; only the airtime follows it.
  for (const auto& a : s.rows)
    for (const auto& b : s.rows)
      if (a.mode == "no-sc-loss" && b.mode == a.mode && a.center == b.center) {
        EXPECT_EQ(a.metrics.accuracy, b.metrics.accuracy);
        EXPECT_EQ(a.metrics.rmse, b.metrics.rmse);
        if (a.snr_db < b.snr_db) {
          EXPECT_GT(a.t_exe, b.t_exe);
        }
      }

  EXPECT_TRUE(fs::exists(root / "plots" / "accuracy.svg"));
  EXPECT_TRUE(fs::exists(root / "plots" / "nmse_d.svg"));

  // Subsets and missing artifacts.
  auto sub = pipeline::evaluate(rc, root / "data", {root / "ckpts"}, {"full"}, {0, 25}, {});
  EXPECT_EQ(sub.size(), 2u * 4u);
  fs::remove(root / "ckpts" / "cv" / "center.ckpt");
  EXPECT_THROW(pipeline::evaluate(rc, root / "data", {root / "ckpts"}, {"sm-md-cv"}, {0}, {}), train::MissingArtifact);
  EXPECT_NO_THROW(pipeline::evaluate(rc, root / "data", {root / "ckpts"}, {"sm-sd-cv"}, {0}, {}));
  EXPECT_THROW(pipeline::evaluate(rc, root / "data", {root / "ckpts"}, {"bogus"}, {0}, {}), ConfigError);
  // no-sc-loss runs on the center trained without channel noise.
  EXPECT_TRUE(nn::read_archive(root / "ckpts" / "mm" / "center_lossless.ckpt").meta.at("lossless").get<bool>());
  EXPECT_FALSE(nn::read_archive(root / "ckpts" / "mm" / "center.ckpt").meta.at("lossless").get<bool>());
  fs::remove(root / "ckpts" / "mm" / "center_lossless.ckpt");
  EXPECT_THROW(pipeline::evaluate(rc, root / "data", {root / "ckpts"}, {"no-sc-loss"}, {0}, {}), train::MissingArtifact);
  EXPECT_NO_THROW(pipeline::evaluate(rc, root / "data", {root / "ckpts"}, {"full"}, {0}, {}));
  fs::remove_all(root);
}
