#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "disac/dataset.hpp"
#include "disac/lstn.hpp"
#include "disac/rvfn.hpp"
#include "disac/tram.hpp"

namespace disac {

struct LossWeights {
  double l1 = 50, l2 = 50, l3 = 50, l4 = 50, l5 = 1;

  void validate() const {
    for (double w : {l1, l2, l3, l4, l5})
      if (!(w >= 0) || !std::isfinite(w)) throw ConfigError("train.weights: weights must be finite and non-negative");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(LossWeights, l1, l2, l3, l4, l5)

struct TrainConfig {
  double lr = 1e-3;
  std::string schedule = "cosine";  // "cosine" decays to lr_floor * lr over a stage, "constant" keeps lr
  double lr_floor = 0.05;
  int batch = 32;
  int eval_batch = 64;
  int epochs_stage1 = 10;
  int epochs_stage2 = 10;
  double clip_norm = 5.0;  // global gradient norm clip, 0 disables
  bool lora_only = false;
  LossWeights weights;

  void validate() const {
    if (!(lr > 0)) throw ConfigError("train.lr: must be positive");
    if (schedule != "cosine" && schedule != "constant")
      throw ConfigError("train.schedule: '" + schedule + "' (expected cosine or constant)");
    if (!(lr_floor > 0 && lr_floor <= 1)) throw ConfigError("train.lr_floor: must be in (0,1]");
    if (batch < 1 || eval_batch < 1) throw ConfigError("train.batch: must be >= 1");
    if (epochs_stage1 < 1 || epochs_stage2 < 1) throw ConfigError("train.epochs: must be >= 1");
    if (clip_norm < 0) throw ConfigError("train.clip_norm: must be >= 0");
    weights.validate();
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, lr, schedule, lr_floor, batch, eval_batch, epochs_stage1, epochs_stage2,
                                                clip_norm, lora_only, weights)

/// Architecture of the device and center models.
struct ModelConfig {
  model::RvfnConfig rvfn;
  model::LstnConfig lstn;
  model::TramConfig tram;

  void validate() const {
    rvfn.validate();
    lstn.validate(rvfn.l_sf, rvfn.d_sf);
    tram.validate();
    if (tram.d_sd != lstn.decoder.d_sd)
      throw ConfigError("tram.d_sd: " + std::to_string(tram.d_sd) + " differs from decoder.d_sd " +
                        std::to_string(lstn.decoder.d_sd));
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, rvfn, lstn, tram)

/// Every tunable of a run. The JSON form is
/// {"seed", "scene", "radar", "channel", "norm", "dataset", "rvfn", "lstn",
///  "decoder", "tram", "train"}.
struct RunConfig {
  std::uint64_t seed = 1;
  data::BuildConfig data;
  ModelConfig model;
  TrainConfig train;

  /// Copies data-derived sizes into the model and checks consistency.
  void resolve() {
    data.seed = seed;
    model.rvfn.image_h = data.scene.image_h;
    model.rvfn.image_w = data.scene.image_w;
    model.rvfn.antennas = data.radar.n_y * data.radar.n_z;
    model.rvfn.samples = int(data.radar.samples());
    model.tram.classes = int(scene::kNumClasses);
  }

  void validate() const {
    data.validate();
    model.validate();
    train.validate();
  }

  nlohmann::json to_json() const {
    nlohmann::json d = data;
    return {{"seed", seed},
            {"scene", d["scene"]},
            {"radar", d["radar"]},
            {"channel", d["channel"]},
            {"norm", d["norm"]},
            {"dataset",
             {{"samples", data.samples},
              {"frame_stride", data.frame_stride},
              {"split", data.split},
              {"chunk_records", data.chunk_records}}},
            {"rvfn", model.rvfn},
            {"lstn", {{"l_se", model.lstn.l_se}, {"d_se", model.lstn.d_se}}},
            {"decoder", model.lstn.decoder},
            {"tram", model.tram},
            {"train", train}};
  }

  static RunConfig from_json(const nlohmann::json& j) {
    const RunConfig defaults;
    check_keys(j, defaults.to_json(), "");
    auto merged = defaults.to_json();
    merged.merge_patch(j);
    RunConfig c;
    auto section = [&](const char* name, auto& dst) {
      try {
        merged.at(name).get_to(dst);
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string(name) + ": " + e.what());
      }
    };
    try {
      c.seed = merged.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("seed: ") + e.what());
    }
    section("scene", c.data.scene);
    section("radar", c.data.radar);
    section("channel", c.data.channel);
    section("norm", c.data.norm);
    const auto& ds = merged.at("dataset");
    try {
      c.data.samples = ds.at("samples");
      c.data.frame_stride = ds.at("frame_stride");
      c.data.split = ds.at("split");
      c.data.chunk_records = ds.at("chunk_records");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("dataset: ") + e.what());
    }
    section("rvfn", c.model.rvfn);
    try {
      c.model.lstn.l_se = merged.at("lstn").at("l_se");
      c.model.lstn.d_se = merged.at("lstn").at("d_se");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("lstn: ") + e.what());
    }
    section("decoder", c.model.lstn.decoder);
    section("tram", c.model.tram);
    section("train", c.train);
    c.resolve();
    return c;
  }

  /// Applies "a.b.c=value" (value parsed as JSON, else taken as a string).
  static void apply_override(nlohmann::json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + assignment + "'");
    const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
    nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    nlohmann::json* node = &j;
    std::size_t pos = 0;
    while (true) {
      const auto dot = key.find('.', pos);
      const std::string part = key.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
      if (dot == std::string::npos) {
        (*node)[part] = value;
        break;
      }
      node = &(*node)[part];
      pos = dot + 1;
    }
  }

  /// Defaults < file < DISAC_SEED < overrides.
  static RunConfig load(const std::filesystem::path& file, const std::vector<std::string>& overrides) {
    nlohmann::json j = nlohmann::json::object();
    if (!file.empty()) {
      std::ifstream is(file);
      if (!is) throw ConfigError("cannot read config file " + file.string());
      j = nlohmann::json::parse(is, nullptr, false);
      if (j.is_discarded() || !j.is_object()) throw ConfigError("config file " + file.string() + " is not a JSON object");
    }
    if (const char* env = std::getenv("DISAC_SEED"); env && *env) {
      char* end = nullptr;
      const auto v = std::strtoull(env, &end, 10);
      if (*end) throw ConfigError(std::string("DISAC_SEED: not an integer: '") + env + "'");
      j["seed"] = v;
    }
    for (const auto& o : overrides) apply_override(j, o);
    auto c = from_json(j);
    c.validate();
    return c;
  }

 private:
  static void check_keys(const nlohmann::json& j, const nlohmann::json& ref, const std::string& path) {
    if (!j.is_object()) {
      if (!path.empty()) return;
      throw ConfigError("config: top level must be an object");
    }
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string p = path.empty() ? it.key() : path + "." + it.key();
      if (!ref.contains(it.key())) throw ConfigError("unknown config key '" + p + "'");
      if (ref[it.key()].is_object()) check_keys(it.value(), ref[it.key()], p);
    }
  }
};

}  // namespace disac
