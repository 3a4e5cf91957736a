#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "disac/eval.hpp"

// File-level steps of a run: generate, train each device, train the center,
// evaluate. Used by the command-line tool and the acceptance harness.

namespace disac::pipeline {

namespace fs = std::filesystem;
using model::Modality;

using Progress = std::function<void(const std::string&)>;

inline fs::path log_path(const fs::path& ckpt) {
  auto p = ckpt;
  p += ".log.csv";
  return p;
}

inline data::BuildSummary generate(const RunConfig& rc, const fs::path& out) {
  rc.validate();
  return data::build(rc.data, out);
}

inline fs::path agg_dir(const fs::path& data) {
  if (fs::exists(data / data::kAggDirName)) return data / data::kAggDirName;
  if (fs::exists(data / "manifest.json")) return data;
  throw train::MissingArtifact("no aggregation dataset under " + data.string());
}

struct LocalResult {
  train::StageResult stage;
  fs::path ckpt, codes, log;
};

/// Stage 1 for device `device` (1-based, as in D_1..D_K) from its own
/// dataset only; writes the checkpoint, the transmitted code file and the log.
inline LocalResult train_local(const RunConfig& rc, const fs::path& device_data, int device, Modality modality,
                               const fs::path& out, const Progress& progress = {}) {
  if (!fs::exists(device_data / "manifest.json"))
    throw train::MissingArtifact("missing device dataset " + device_data.string());
  auto ds = data::load_device(device_data);
  if (ds.device() != device - 1)
    throw ConfigError("--device " + std::to_string(device) + " but " + device_data.string() + " holds the data of device " +
                      std::to_string(ds.device() + 1));
  train::DeviceModel<float> m(rc.model, modality, device - 1, rc.seed);
  LocalResult r{{}, out, train::codes_path(out), log_path(out)};
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  std::ofstream log(r.log);
  auto cb = [&](const train::EpochRecord& e) {
    if (progress)
      progress("device " + std::to_string(device) + " " + model::to_string(modality) + " epoch " + std::to_string(e.epoch) +
               " " + e.split + " loss " + std::to_string(e.terms.total) + " acc " + std::to_string(e.accuracy));
  };
  r.stage = train::train_stage1(m, ds, rc, out, &log, cb);
  train::save_codes(r.codes, train::emit_codes(m, ds, std::size_t(rc.train.eval_batch)), m.decoder_hash());
  return r;
}

/// Stage 2 from the stage-1 checkpoints of every device and their codes.
/// `lossless` trains the upper-bound center with every link noiseless.
inline train::StageResult train_agg(const RunConfig& rc, const fs::path& data, const std::vector<fs::path>& ckpts,
                                    const fs::path& out, const Progress& progress = {}, bool lossless = false) {
  const auto agg = data::load_agg(agg_dir(data));
  const std::size_t K = agg.devices();
  std::vector<fs::path> by_device(K);
  std::optional<Modality> modality;
  for (const auto& p : ckpts) {
    if (!fs::exists(p)) throw train::MissingArtifact("missing checkpoint " + p.string());
    const auto meta = nn::read_archive(p).meta;
    if (meta.value("kind", "") != "stage1") throw train::MissingArtifact(p.string() + " is not a stage-1 checkpoint");
    const auto k = meta.at("device").get<std::size_t>();
    const auto m = model::parse_modality(meta.at("modality"));
    if (modality && *modality != m) throw ConfigError("stage-1 checkpoints mix modalities");
    modality = m;
    if (k >= K) throw ConfigError(p.string() + " is for device " + std::to_string(k + 1) + " of " + std::to_string(K));
    if (meta.at("model").at("lstn") != nlohmann::json(rc.model).at("lstn"))
      throw ConfigError(p.string() + ": semantic codec configuration differs from the run configuration");
    by_device[k] = p;
  }
  for (std::size_t k = 0; k < K; ++k)
    if (by_device[k].empty()) throw train::MissingArtifact("missing stage-1 checkpoint for device " + std::to_string(k + 1));

  train::CenterModel<float> center(rc.model, *modality, K, rc.seed);
  std::vector<train::DeviceCodes> codes;
  for (std::size_t k = 0; k < K; ++k) {
    const auto ar = nn::read_archive(by_device[k]);
    center.mount_decoder(k, ar);
    codes.push_back(train::load_codes(train::codes_path(by_device[k])));
    if (std::size_t(codes.back().device) != k || codes.back().modality != *modality)
      throw ContractError("code file for device " + std::to_string(k + 1) + " belongs to another model");
  }
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  std::ofstream log(log_path(out));
  auto cb = [&](const train::EpochRecord& e) {
    if (progress)
      progress(std::string(lossless ? "lossless " : "") + "center " + model::to_string(*modality) + " epoch " + std::to_string(e.epoch) + " " + e.split + " loss " +
               std::to_string(e.terms.total) + " acc " + std::to_string(e.accuracy));
  };
  return train::train_stage2(center, agg, codes, rc, out, &log, cb, lossless);
}

inline std::vector<eval::ReportRow> evaluate(const RunConfig& rc, const fs::path& data,
                                             const std::vector<fs::path>& ckpts, const std::vector<std::string>& modes,
                                             const std::vector<double>& snrs, const fs::path& report,
                                             const fs::path& plots = {}) {
  for (const auto& m : modes) eval::parse_mode(m);
  const auto agg = data::load_agg(agg_dir(data));
  const auto arts = eval::ArtifactSet::scan(ckpts);
  auto rows = eval::ablation_matrix<float>(agg, arts, modes, snrs, rc);
  if (!report.empty()) eval::write_report(report, rows);
  if (!plots.empty()) {
    if (report.empty()) {
      eval::write_plots(plots, rows);
    } else {
      std::ifstream is(report);
      eval::write_plots(plots, eval::read_report(is));
    }
  }
  return rows;
}

inline fs::path device_ckpt(const fs::path& ckpt_root, Modality m, int device) {
  return ckpt_root / model::to_string(m) / ("device_" + std::to_string(device) + ".ckpt");
}

inline fs::path center_ckpt(const fs::path& ckpt_root, Modality m, bool lossless = false) {
  return ckpt_root / model::to_string(m) / (lossless ? "center_lossless.ckpt" : "center.ckpt");
}

struct RunSummary {
  std::map<Modality, std::vector<train::StageResult>> stage1;
  std::map<Modality, train::StageResult> stage2, stage2_lossless;
  std::vector<eval::ReportRow> rows;
  double seconds = 0;
};

/// Whole benchmark for one seed: every modality through both stages, then
/// the full ablation matrix.
inline RunSummary run_all(const RunConfig& rc, const fs::path& root, const std::vector<double>& snrs,
                          const Progress& progress = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  RunSummary s;
  const auto data = root / "data", ckpts = root / "ckpts";
  const auto built = generate(rc, data);
  const int K = int(built.device_dirs.size());
  for (Modality m : {Modality::Multimodal, Modality::Rf, Modality::Cv}) {
    std::vector<fs::path> dev;
    for (int k = 1; k <= K; ++k) {
      auto r = train_local(rc, built.device_dirs[std::size_t(k - 1)], k, m, device_ckpt(ckpts, m, k), progress);
      s.stage1[m].push_back(r.stage);
      dev.push_back(r.ckpt);
    }
    s.stage2[m] = train_agg(rc, data, dev, center_ckpt(ckpts, m), progress);
    for (const auto& mode : eval::modes())
      if (mode.modality == m && mode.multi_device && mode.lossless) {
        s.stage2_lossless[m] = train_agg(rc, data, dev, center_ckpt(ckpts, m, true), progress, true);
        break;
      }
  }
  std::vector<std::string> modes;
  for (const auto& m : eval::modes()) modes.push_back(m.name);
  s.rows = evaluate(rc, data, {ckpts}, modes, snrs, root / "report.csv", root / "plots");
  s.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return s;
}

}  // namespace disac::pipeline
