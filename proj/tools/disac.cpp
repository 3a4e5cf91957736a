#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <vector>

#include "disac/pipeline.hpp"

using namespace disac;
namespace fs = std::filesystem;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitDivergence = 3;
constexpr int kExitMissing = 4;

struct Common {
  std::string config;
  std::vector<std::string> sets;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON run configuration")->check(CLI::ExistingFile);
  cmd->add_option("--set", c.sets, "Override a configuration key, e.g. --set train.lr=5e-4 (repeatable)");
  cmd->add_flag("-q,--quiet", c.quiet, "No progress output");
}

pipeline::Progress reporter(const Common& c) {
  if (c.quiet) return {};
  return [](const std::string& s) { std::cerr << s << "\n"; };
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Distributed multimodal sensing with semantic links: data generation, two-stage training and "
               "evaluation.\nEnvironment: DISAC_SEED overrides the configured seed (flags override it)."};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every command");

  Common common;
  std::string out, data, report, plots, modality = "mm";
  std::vector<std::string> ckpts, modes;
  std::vector<double> snrs(eval::kDefaultSnrs.begin(), eval::kDefaultSnrs.end());
  int samples = 0, device = 0;
  std::int64_t seed = -1;
  bool lora_only = false, lossless = false;

  auto* gen = app.add_subcommand("gen", "Generate per-device datasets D_1..D_K and D_agg");
  add_common(gen, common);
  gen->add_option("--out", out, "Output directory")->required();
  gen->add_option("--samples", samples, "Sampled frames per device (records = frames x targets)")
      ->check(CLI::PositiveNumber);
  gen->add_option("--seed", seed, "Random seed")->check(CLI::NonNegativeNumber);

  auto* local = app.add_subcommand("train-local", "Stage 1: train one device on its own dataset");
  add_common(local, common);
  local->add_option("--data", data, "Device dataset directory D_k")->required();
  local->add_option("--device", device, "Device index k (1-based, as in D_k)")->required()->check(CLI::PositiveNumber);
  local->add_option("--out", out, "Checkpoint path; codes and log are written next to it")->required();
  local->add_option("--modality", modality, "Input modalities: mm, rf or cv")
      ->check(CLI::IsMember({"mm", "rf", "cv"}))
      ->capture_default_str();
  local->add_flag("--lora-only", lora_only, "Train the decoder adapters only, keep decoder base weights fixed");
  local->add_option("--seed", seed, "Random seed")->check(CLI::NonNegativeNumber);

  auto* agg = app.add_subcommand("train-agg", "Stage 2: train the aggregation center on transmitted codes");
  add_common(agg, common);
  agg->add_option("--data", data, "Dataset root or D_agg directory")->required();
  agg->add_option("--ckpts", ckpts, "Stage-1 checkpoints, one per device")->required()->delimiter(',');
  agg->add_option("--out", out, "Center checkpoint path")->required();
  agg->add_flag("--lossless", lossless, "Train on noiseless links (the center used by no-sc-loss)");
  agg->add_option("--seed", seed, "Random seed")->check(CLI::NonNegativeNumber);

  auto* ev = app.add_subcommand("eval", "Evaluate the ablation matrix and write the report");
  add_common(ev, common);
  ev->add_option("--data", data, "Dataset root or D_agg directory")->required();
  ev->add_option("--ckpts", ckpts, "Checkpoint files or directories")->required()->delimiter(',');
  ev->add_option("--modes", modes, "Comma-separated modes (default: all). Valid: " + eval::valid_mode_list())
      ->delimiter(',');
  ev->add_option("--snrs", snrs, "Comma-separated SNR values in dB")->delimiter(',')->capture_default_str();
  ev->add_option("--report", report, "Report CSV path")->required();
  ev->add_option("--plots", plots, "Directory for one SVG chart per metric");
  ev->add_option("--seed", seed, "Random seed")->check(CLI::NonNegativeNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    auto sets = common.sets;
    if (seed >= 0) sets.push_back("seed=" + std::to_string(seed));
    if (samples > 0) sets.push_back("dataset.samples=" + std::to_string(samples));
    if (lora_only) sets.push_back("train.lora_only=true");
    const auto rc = RunConfig::load(common.config, sets);
    const auto progress = reporter(common);

    if (*gen) {
      const auto s = pipeline::generate(rc, out);
      if (!common.quiet)
        std::cerr << "wrote " << s.device_dirs.size() << " device datasets (" << s.records_per_device
                  << " records each) and " << s.agg_dir.string() << "\n";
    } else if (*local) {
      const auto r = pipeline::train_local(rc, data, device, model::parse_modality(modality), out, progress);
      if (!common.quiet) std::cerr << "wrote " << r.ckpt.string() << ", " << r.codes.string() << "\n";
    } else if (*agg) {
      std::vector<fs::path> paths(ckpts.begin(), ckpts.end());
      pipeline::train_agg(rc, data, paths, out, progress, lossless);
      if (!common.quiet) std::cerr << "wrote " << out << "\n";
    } else if (*ev) {
      if (modes.empty())
        for (const auto& m : eval::modes()) modes.emplace_back(m.name);
      std::vector<fs::path> paths(ckpts.begin(), ckpts.end());
      const auto rows = pipeline::evaluate(rc, data, paths, modes, snrs, report, plots);
      if (!common.quiet) std::cerr << "wrote " << rows.size() << " rows to " << report << "\n";
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const train::DivergenceError& e) {
    std::cerr << "training diverged: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const train::MissingArtifact& e) {
    std::cerr << "missing artifact: " << e.what() << "\n";
    return kExitMissing;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
