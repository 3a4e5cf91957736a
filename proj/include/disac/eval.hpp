#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "disac/training.hpp"

namespace disac::eval {

namespace fs = std::filesystem;
using model::Modality;

// -------------------------------------------------------------------- metrics

/// 10 log10(sum (p - x)^2 / sum x^2); -inf when the error is exactly zero.
inline double nmse_db(double err_power, double signal_power) {
  if (!(signal_power > 0)) throw DomainError("nmse_db: ground truth has zero power");
  if (err_power == 0) return -std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(err_power / signal_power);
}

inline double nmse_db(std::span<const double> pred, std::span<const double> truth) {
  if (pred.size() != truth.size()) throw ContractError("nmse_db: length mismatch");
  double e = 0, s = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    e += (pred[i] - truth[i]) * (pred[i] - truth[i]);
    s += truth[i] * truth[i];
  }
  return nmse_db(e, s);
}

inline double rmse(std::span<const double> pred, std::span<const double> truth) {
  if (pred.size() != truth.size()) throw ContractError("rmse: length mismatch");
  if (pred.empty()) throw ContractError("rmse: empty input");
  double e = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) e += (pred[i] - truth[i]) * (pred[i] - truth[i]);
  return std::sqrt(e / double(pred.size()));
}

/// Arg-max with ties going to the lowest index.
inline std::size_t argmax(std::span<const double> row) {
  if (row.empty()) throw ContractError("argmax: empty row");
  std::size_t best = 0;
  for (std::size_t c = 1; c < row.size(); ++c)
    if (row[c] > row[best]) best = c;
  return best;
}

/// Fraction of rows of `logits` ([n, classes], row-major) whose arg-max is the label.
inline double accuracy(std::span<const double> logits, std::size_t classes, std::span<const std::int32_t> labels) {
  if (labels.empty()) throw ContractError("accuracy: empty input");
  if (classes == 0 || logits.size() != labels.size() * classes) throw ContractError("accuracy: length mismatch");
  std::size_t hits = 0;
  for (std::size_t r = 0; r < labels.size(); ++r)
    hits += std::int32_t(argmax(logits.subspan(r * classes, classes))) == labels[r];
  return double(hits) / double(labels.size());
}

inline constexpr std::array<const char*, 4> kTaskNames = {"d", "a", "p", "v"};

struct Metrics {
  std::array<double, 4> nmse_db{};  // normalized labels
  std::array<double, 4> rmse{};     // metres, degrees, degrees, metres per second
  double accuracy = 0;
  std::size_t count = 0;
};

/// Physical units per normalized label unit.
inline std::array<double, 4> label_scales(const data::NormSpec& n) {
  return {n.d_max, 360.0, 180.0, 2 * n.v_max};
}

/// Global sums, so the result does not depend on how samples are batched.
class MetricAccumulator {
 public:
  explicit MetricAccumulator(const data::NormSpec& norm) : scale_(label_scales(norm)) {}

  void add(std::span<const double> pred4, std::span<const double> truth4, std::span<const double> logits,
           std::int32_t label) {
    for (std::size_t j = 0; j < 4; ++j) {
      const double e = pred4[j] - truth4[j];
      err_[j] += e * e;
      sig_[j] += truth4[j] * truth4[j];
    }
    hits_ += std::int32_t(argmax(logits)) == label;
    ++n_;
  }

  template <typename T>
  void add_batch(const model::SensingOutput<T>& out, const nn::Tensor<T>& labels,
                 std::span<const std::int32_t> classes) {
    const std::size_t m = out.logits.dim(1);
    for (std::size_t r = 0; r < classes.size(); ++r) {
      std::array<double, 4> p, x;
      for (std::size_t j = 0; j < 4; ++j) p[j] = double(out.regression[r * 4 + j]), x[j] = double(labels[r * 4 + j]);
      std::vector<double> lg(m);
      for (std::size_t c = 0; c < m; ++c) lg[c] = double(out.logits[r * m + c]);
      add(p, x, lg, classes[r]);
    }
  }

  void merge(const MetricAccumulator& o) {
    for (std::size_t j = 0; j < 4; ++j) err_[j] += o.err_[j], sig_[j] += o.sig_[j];
    hits_ += o.hits_;
    n_ += o.n_;
  }

  Metrics finish() const {
    if (n_ == 0) throw ContractError("metrics: no samples");
    Metrics m;
    for (std::size_t j = 0; j < 4; ++j) {
      m.nmse_db[j] = nmse_db(err_[j], sig_[j]);
      m.rmse[j] = scale_[j] * std::sqrt(err_[j] / double(n_));
    }
    m.accuracy = double(hits_) / double(n_);
    m.count = n_;
    return m;
  }

 private:
  std::array<double, 4> scale_;
  std::array<double, 4> err_{}, sig_{};
  std::size_t hits_ = 0, n_ = 0;
};

// ---------------------------------------------------------------- compression

struct Compression {
  std::size_t code_bytes = 0, raw_bytes = 0;
  double ratio = 0, reduction = 1;
};

inline Compression compression_ratio(std::size_t code_bytes, std::size_t raw_bytes) {
  if (raw_bytes == 0) throw ContractError("compression_ratio: raw size is zero");
  Compression c{code_bytes, raw_bytes, double(code_bytes) / double(raw_bytes), 0};
  c.reduction = 1 - c.ratio;
  return c;
}

/// uint8 BGR image plus complex float32 echo.
inline std::size_t raw_record_bytes(std::size_t h, std::size_t w, std::size_t antennas, std::size_t samples) {
  return h * w * 3 + antennas * samples * 2 * sizeof(float);
}

inline Compression default_compression(const RunConfig& rc) {
  const auto& r = rc.model.rvfn;
  return compression_ratio(model::code_channel_bytes(std::size_t(rc.model.lstn.l_se * rc.model.lstn.d_se)),
                           raw_record_bytes(std::size_t(r.image_h), std::size_t(r.image_w), std::size_t(r.antennas),
                                            std::size_t(r.samples)));
}

// ---------------------------------------------------------------------- modes

struct ModeSpec {
  const char* name;
  Modality modality;
  bool multi_device;
  bool lossless;
};

inline const std::array<ModeSpec, 7>& modes() {
  static const std::array<ModeSpec, 7> m = {{{"sm-sd-rf", Modality::Rf, false, true},
                                             {"sm-sd-cv", Modality::Cv, false, true},
                                             {"mm-sd", Modality::Multimodal, false, true},
                                             {"sm-md-rf", Modality::Rf, true, false},
                                             {"sm-md-cv", Modality::Cv, true, false},
                                             {"full", Modality::Multimodal, true, false},
                                             {"no-sc-loss", Modality::Multimodal, true, true}}};
  return m;
}

inline std::string valid_mode_list() {
  std::string s;
  for (const auto& m : modes()) s += (s.empty() ? "" : ", ") + std::string(m.name);
  return s;
}

inline const ModeSpec& parse_mode(const std::string& name) {
  for (const auto& m : modes())
    if (name == m.name) return m;
  throw ConfigError("unknown mode '" + name + "' (valid: " + valid_mode_list() + ")");
}

inline constexpr std::array<double, 5> kDefaultSnrs = {0, 10, 15, 20, 25};

// ------------------------------------------------------------------ artifacts

/// Stage-1 and stage-2 checkpoints indexed by their metadata.
class ArtifactSet {
 public:
  /// Accepts checkpoint files and directories (searched recursively for *.ckpt).
  static ArtifactSet scan(const std::vector<fs::path>& paths) {
    ArtifactSet s;
    for (const auto& p : paths) {
      if (fs::is_directory(p)) {
        std::vector<fs::path> found;
        for (const auto& e : fs::recursive_directory_iterator(p))
          if (e.is_regular_file() && e.path().extension() == ".ckpt") found.push_back(e.path());
        std::sort(found.begin(), found.end());
        for (const auto& f : found) s.add(f);
      } else if (fs::is_regular_file(p)) {
        s.add(p);
      } else {
        throw train::MissingArtifact("missing checkpoint " + p.string());
      }
    }
    return s;
  }

  void add(const fs::path& p) {
    const auto ar = nn::read_archive(p);
    const auto kind = ar.meta.value("kind", "");
    const auto mod = model::parse_modality(ar.meta.at("modality"));
    if (kind == "stage1")
      device_[{mod, ar.meta.at("device").get<std::size_t>()}] = p;
    else if (kind == "stage2")
      center_[{mod, ar.meta.value("lossless", false)}] = p;
    else
      throw train::MissingArtifact(p.string() + " is not a model checkpoint");
  }

  const fs::path& device(Modality m, std::size_t k) const {
    auto it = device_.find({m, k});
    if (it == device_.end())
      throw train::MissingArtifact("missing stage-1 checkpoint for device " + std::to_string(k + 1) + " (" +
                                   model::to_string(m) + ")");
    return it->second;
  }

  /// Stage-2 checkpoint; `lossless` selects the center trained without channel noise.
  const fs::path& center(Modality m, bool lossless = false) const {
    auto it = center_.find({m, lossless});
    if (it == center_.end())
      throw train::MissingArtifact(std::string("missing ") + (lossless ? "lossless " : "") + "stage-2 checkpoint (" +
                                   model::to_string(m) + ")");
    return it->second;
  }

 private:
  std::map<std::pair<Modality, std::size_t>, fs::path> device_;
  std::map<std::pair<Modality, bool>, fs::path> center_;
};

// ---------------------------------------------------------------- the matrix

struct ReportRow {
  std::string mode;
  std::size_t center = 0;
  double snr_db = 0;
  Metrics metrics;
  double compression_ratio = 0;
  double t_exe = 0;
};

namespace detail {

inline std::vector<train::DeviceCodes> load_device_codes(const ArtifactSet& arts, Modality m, std::size_t devices) {
  std::vector<train::DeviceCodes> out;
  for (std::size_t k = 0; k < devices; ++k) {
    const auto& ck = arts.device(m, k);
    auto c = train::load_codes(train::codes_path(ck));
    if (c.modality != m || std::size_t(c.device) != k)
      throw ContractError("code file of " + ck.string() + " belongs to another device or modality");
    out.push_back(std::move(c));
  }
  return out;
}

inline double symbols_of(const train::DeviceCodes& c) { return double((c.code_size() + 1) / 2); }

/// Single-device evaluation at center c: its own stage-1 model on a
/// lossless link, no transmission.
template <typename T>
ReportRow single_device(const ModeSpec& mode, std::size_t c, const train::DeviceModel<T>& m,
                        const train::DeviceCodes& codes, const data::AggDataset& agg,
                        const std::vector<std::size_t>& idx, const RunConfig& rc) {
  nn::NoGradGuard ng;
  MetricAccumulator acc(rc.data.norm);
  double t_sd = 0, t_fa = 0;
  const auto l_text = std::size_t(rc.model.lstn.decoder.l_text);
  for (const auto& bi : data::batches(idx, std::size_t(rc.train.eval_batch), 0, false)) {
    std::vector<T> v;
    std::vector<std::string> texts;
    std::vector<T> lab;
    std::vector<std::int32_t> cls;
    for (auto i : bi) {
      if (codes.frames.at(i) != agg.entries.at(i).frame || codes.targets.at(i) != agg.entries[i].target)
        throw ContractError("evaluation: device code " + std::to_string(i) + " does not match aggregation entry");
      const float* p = codes.values.data() + i * codes.code_size();
      v.insert(v.end(), p, p + codes.code_size());
      texts.push_back(train::context_text(channel::kLossless, codes.distances[i], rc.data.channel));
      const auto& row = agg.entries[i].labels.at(c);
      lab.insert(lab.end(), row.begin(), row.end());
      cls.push_back(agg.entries[i].class_index);
    }
    nn::Tensor<T> code(nn::Shape{bi.size(), codes.l_se, codes.d_se}, std::move(v));
    nn::Tensor<T> labels(nn::Shape{bi.size(), 4}, std::move(lab));
    const auto t0 = std::chrono::steady_clock::now();
    const auto text = model::tokenize_batch(texts, l_text);
    auto s = m.lstn().decode(code, &text);
    const auto t1 = std::chrono::steady_clock::now();
    auto out = m.head()(s);
    const auto t2 = std::chrono::steady_clock::now();
    t_sd += std::chrono::duration<double>(t1 - t0).count();
    t_fa += std::chrono::duration<double>(t2 - t1).count();
    acc.add_batch(out, labels, cls);
  }
  ReportRow r{mode.name, c, 0, acc.finish(), default_compression(rc).ratio, 0};
  const double n = double(idx.size());
  r.t_exe = train::measure_execution({{codes.t_ft, codes.t_se, 0.0, t_sd / n, t_fa / n}}).t_exe;
  return r;
}

/// Rows for center position `c` at every SNR. A lossless mode runs the
/// center once; only the airtime term follows the row's SNR.
template <typename T>
std::vector<ReportRow> multi_device(const ModeSpec& mode, std::size_t c, const std::vector<double>& snrs,
                                    const train::CenterModel<T>& center, const std::vector<train::DeviceCodes>& codes,
                                    const data::AggDataset& agg, const std::vector<std::size_t>& idx,
                                    const RunConfig& rc) {
  nn::NoGradGuard ng;
  std::vector<ReportRow> rows;
  const double n = double(idx.size());
  auto run = [&](double snr_db) {
    MetricAccumulator acc(rc.data.norm);
    const std::uint64_t cell = std::uint64_t(c) * 1000 + std::uint64_t(std::llround(snr_db * 10) + 500);
    Rng snr_rng(derive_seed(rc.seed, 0xe7a1 + cell)), noise(derive_seed(rc.seed, 0xe7a3 + cell));
    const auto policy = mode.lossless ? train::SnrPolicy::lossless() : train::SnrPolicy::fixed(snr_db);
    std::vector<double> t_sd(codes.size(), 0.0);
    double t_fa = 0;
    for (const auto& bi : data::batches(idx, std::size_t(rc.train.eval_batch), 0, false)) {
      auto cb = train::center_forward(center, agg, codes, bi, c, policy, snr_rng, noise, nn::eval_mode(), rc);
      acc.add_batch(cb.out, cb.labels, cb.classes);
      for (std::size_t k = 0; k < codes.size(); ++k) t_sd[k] += cb.t_sd[k];
      t_fa += cb.t_fa;
    }
    return std::tuple{acc.finish(), t_sd, t_fa};
  };
  auto row = [&](double snr_db, const Metrics& m, const std::vector<double>& t_sd, double t_fa) {
    ReportRow r{mode.name, c, snr_db, m, default_compression(rc).ratio, 0};
    std::vector<train::DeviceTiming> tim;
    for (std::size_t k = 0; k < codes.size(); ++k) {
      const double t_com = k == c ? 0.0 : train::code_airtime(std::size_t(symbols_of(codes[k])), snr_db, rc.data.channel);
      tim.push_back({codes[k].t_ft, codes[k].t_se, t_com, t_sd[k] / n, t_fa / n});
    }
    r.t_exe = train::measure_execution(std::move(tim)).t_exe;
    return r;
  };
  if (mode.lossless) {
    const auto [m, t_sd, t_fa] = run(snrs.front());
    for (double s : snrs) rows.push_back(row(s, m, t_sd, t_fa));
  } else {
    for (double s : snrs) {
      const auto [m, t_sd, t_fa] = run(s);
      rows.push_back(row(s, m, t_sd, t_fa));
    }
  }
  return rows;
}

}  // namespace detail

/// One row per (mode, center position, SNR) on the validation entries.
/// Single-device modes do not transmit and repeat across SNRs.
template <typename T = float>
std::vector<ReportRow> ablation_matrix(const data::AggDataset& agg, const ArtifactSet& arts,
                                       const std::vector<std::string>& mode_names, const std::vector<double>& snrs,
                                       const RunConfig& rc,
                                       const std::function<void(const ReportRow&)>& progress = {}) {
  std::vector<const ModeSpec*> sel;
  for (const auto& n : mode_names) sel.push_back(&parse_mode(n));
  if (snrs.empty()) throw ConfigError("eval: no SNR values");
  for (double s : snrs)
    if (!std::isfinite(s)) throw ConfigError("eval: SNR values must be finite");
  const std::size_t K = agg.devices();
  const auto idx = agg.indices(false);
  if (idx.empty()) throw ContractError("eval: aggregation dataset has no validation entries");

  // Resolve every artifact before any work so a missing file fails fast.
  for (const auto* m : sel) {
    for (std::size_t k = 0; k < K; ++k) arts.device(m->modality, k);
    if (m->multi_device) arts.center(m->modality, m->lossless);
  }

  std::vector<ReportRow> rows;
  auto emit = [&](ReportRow r) {
    if (progress) progress(r);
    rows.push_back(std::move(r));
  };
  std::map<Modality, std::vector<train::DeviceCodes>> codes;
  auto codes_for = [&](Modality m) -> const std::vector<train::DeviceCodes>& {
    auto it = codes.find(m);
    if (it == codes.end()) it = codes.emplace(m, detail::load_device_codes(arts, m, K)).first;
    return it->second;
  };
  for (const auto* mode : sel) {
    const auto& dc = codes_for(mode->modality);
    if (!mode->multi_device) {
      for (std::size_t c = 0; c < K; ++c) {
        const auto model = train::DeviceModel<T>::load(arts.device(mode->modality, c));
        if (model.decoder_hash() != nn::read_archive(arts.device(mode->modality, c)).meta.at("hashes").at("decoder"))
          throw ContractError("eval: decoder checksum mismatch for device " + std::to_string(c + 1));
        auto base = detail::single_device(*mode, c, model, dc[c], agg, idx, rc);
        for (double s : snrs) {
          base.snr_db = s;
          emit(base);
        }
      }
      continue;
    }
    const auto ar = nn::read_archive(arts.center(mode->modality, mode->lossless));
    auto center = train::CenterModel<T>::from_archive(ar);
    if (center.modality() != mode->modality || center.devices() != K)
      throw ContractError(std::string("eval: stage-2 checkpoint does not fit mode ") + mode->name);
    for (std::size_t k = 0; k < K; ++k) {
      center.mount_decoder(k, nn::read_archive(arts.device(mode->modality, k)));
      if (ar.meta.contains("decoder_hashes") && ar.meta["decoder_hashes"].at(k).get<std::uint64_t>() != center.decoder_hash(k))
        throw ContractError("eval: stage-2 checkpoint was trained against another decoder for device " +
                            std::to_string(k + 1));
    }
    for (std::size_t c = 0; c < K; ++c)
      for (auto& r : detail::multi_device(*mode, c, snrs, center, dc, agg, idx, rc)) emit(std::move(r));
  }
  return rows;
}

// ------------------------------------------------------------------- reports

inline const std::vector<std::string>& report_columns() {
  static const std::vector<std::string> c = {"mode",   "center_position", "snr_db", "nmse_d", "nmse_a",
                                             "nmse_p", "nmse_v",          "rmse_d", "rmse_a", "rmse_p",
                                             "rmse_v", "accuracy",        "compression_ratio", "t_exe_s"};
  return c;
}

inline std::string format_number(double v) {
  if (std::isinf(v)) return v < 0 ? "-inf" : "inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

inline void write_report(std::ostream& os, const std::vector<ReportRow>& rows) {
  const auto& cols = report_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) os << (i ? "," : "") << cols[i];
  os << "\n";
  for (const auto& r : rows) {
    os << r.mode << "," << r.center + 1 << "," << format_number(r.snr_db);
    for (double v : r.metrics.nmse_db) os << "," << format_number(v);
    for (double v : r.metrics.rmse) os << "," << format_number(v);
    os << "," << format_number(r.metrics.accuracy) << "," << format_number(r.compression_ratio) << ","
       << format_number(r.t_exe) << "\n";
  }
}

inline void write_report(const fs::path& path, const std::vector<ReportRow>& rows) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write report " + path.string());
  write_report(os, rows);
}

/// Parses a report written by write_report.
inline std::vector<ReportRow> read_report(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw ContractError("report: empty");
  std::vector<ReportRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != report_columns().size()) throw ContractError("report: bad row '" + line + "'");
    auto num = [](const std::string& s) { return std::strtod(s.c_str(), nullptr); };
    ReportRow r;
    r.mode = f[0];
    r.center = std::size_t(std::stoul(f[1])) - 1;
    r.snr_db = num(f[2]);
    for (std::size_t j = 0; j < 4; ++j) r.metrics.nmse_db[j] = num(f[3 + j]), r.metrics.rmse[j] = num(f[7 + j]);
    r.metrics.accuracy = num(f[11]);
    r.compression_ratio = num(f[12]);
    r.t_exe = num(f[13]);
    rows.push_back(std::move(r));
  }
  return rows;
}

/// Named scalar columns of a row that get a plot.
inline std::vector<std::pair<std::string, double>> plot_values(const ReportRow& r) {
  std::vector<std::pair<std::string, double>> v;
  for (std::size_t j = 0; j < 4; ++j) v.emplace_back(std::string("nmse_") + kTaskNames[j], r.metrics.nmse_db[j]);
  for (std::size_t j = 0; j < 4; ++j) v.emplace_back(std::string("rmse_") + kTaskNames[j], r.metrics.rmse[j]);
  v.emplace_back("accuracy", r.metrics.accuracy);
  v.emplace_back("t_exe_s", r.t_exe);
  return v;
}

/// One SVG line chart per metric: value against SNR, one line per mode,
/// averaged over center positions (non-finite values skipped). Returns the
/// written files.
inline std::vector<fs::path> write_plots(const fs::path& dir, const std::vector<ReportRow>& rows) {
  fs::create_directories(dir);
  // metric -> mode -> snr -> (sum, n)
  std::map<std::string, std::map<std::string, std::map<double, std::pair<double, int>>>> series;
  std::vector<std::string> order;
  for (const auto& r : rows) {
    if (std::find(order.begin(), order.end(), r.mode) == order.end()) order.push_back(r.mode);
    for (const auto& [name, v] : plot_values(r)) {
      auto& cell = series[name][r.mode][r.snr_db];
      if (std::isfinite(v)) cell.first += v, ++cell.second;
    }
  }
  static const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
  const double W = 640, H = 400, L = 70, R = 150, Tm = 30, B = 50;
  std::vector<fs::path> files;
  for (const auto& [metric, by_mode] : series) {
    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (const auto& [mode, pts] : by_mode)
      for (const auto& [x, c] : pts) {
        if (!c.second) continue;
        const double y = c.first / c.second;
        xmin = std::min(xmin, x), xmax = std::max(xmax, x), ymin = std::min(ymin, y), ymax = std::max(ymax, y);
      }
    if (xmin > xmax) continue;
    if (xmax == xmin) xmin -= 1, xmax += 1;
    if (ymax == ymin) ymin -= 0.5, ymax += 0.5;
    const double pad = 0.05 * (ymax - ymin);
    ymin -= pad, ymax += pad;
    auto px = [&](double x) { return L + (x - xmin) / (xmax - xmin) * (W - L - R); };
    auto py = [&](double y) { return H - B - (y - ymin) / (ymax - ymin) * (H - Tm - B); };
    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    s << "<text x=\"" << W / 2 << "\" y=\"18\" text-anchor=\"middle\">" << metric << " vs SNR</text>\n";
    s << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
    s << "<line x1=\"" << L << "\" y1=\"" << Tm << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
      const double x = xmin + (xmax - xmin) * i / 4, y = ymin + (ymax - ymin) * i / 4;
      s << "<text x=\"" << px(x) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << format_number(x) << "</text>\n";
      s << "<text x=\"" << L - 6 << "\" y=\"" << py(y) + 4 << "\" text-anchor=\"end\">" << format_number(y) << "</text>\n";
    }
    s << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">SNR (dB)</text>\n";
    std::size_t li = 0;
    for (const auto& mode : order) {
      auto it = by_mode.find(mode);
      if (it == by_mode.end()) continue;
      const char* col = colors[li % 8];
      std::string pts;
      for (const auto& [x, c] : it->second)
        if (c.second) pts += format_number(px(x)) + "," + format_number(py(c.first / c.second)) + " ";
      s << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"2\" points=\"" << pts << "\"/>\n";
      s << "<text x=\"" << W - R + 10 << "\" y=\"" << Tm + 16 * (li + 1) << "\" fill=\"" << col << "\">" << mode << "</text>\n";
      ++li;
    }
    s << "</svg>\n";
    const auto f = dir / (metric + ".svg");
    std::ofstream(f) << s.str();
    files.push_back(f);
  }
  return files;
}

}  // namespace disac::eval
