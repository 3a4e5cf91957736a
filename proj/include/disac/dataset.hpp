#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "disac/audit.hpp"
#include "disac/channel.hpp"
#include "disac/numerics/tensor.hpp"
#include "disac/radar.hpp"
#include "disac/scene.hpp"

namespace disac::data {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int kFormatVersion = 1;

struct NormSpec {
  double d_max = 200.0;
  double v_max = 15.0;

  void validate() const {
    if (!(d_max > 0) || !(v_max > 0)) throw ConfigError("norm: d_max and v_max must be positive");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(NormSpec, d_max, v_max)

struct RawLabels {
  double distance = 0, azimuth = 0, pitch = 0, radial_velocity = 0;
};

/// Maps raw labels into (0,1); throws DomainError naming the label when a
/// value falls outside the open range.
inline std::array<double, 4> normalize(const RawLabels& r, const NormSpec& s) {
  const std::array<double, 4> n = {r.distance / s.d_max, (r.azimuth + std::numbers::pi) / (2 * std::numbers::pi),
                                   (r.pitch + std::numbers::pi / 2) / std::numbers::pi,
                                   (r.radial_velocity + s.v_max) / (2 * s.v_max)};
  static const char* names[4] = {"distance", "azimuth", "pitch", "radial_velocity"};
  const double raw[4] = {r.distance, r.azimuth, r.pitch, r.radial_velocity};
  for (int i = 0; i < 4; ++i)
    if (!(n[std::size_t(i)] > 0.0 && n[std::size_t(i)] < 1.0))
      throw DomainError(std::string("normalize: ") + names[i] + " = " + std::to_string(raw[i]) + " outside spec range");
  return n;
}

inline RawLabels denormalize(const std::array<double, 4>& n, const NormSpec& s) {
  return {n[0] * s.d_max, n[1] * 2 * std::numbers::pi - std::numbers::pi, n[2] * std::numbers::pi - std::numbers::pi / 2,
          n[3] * 2 * s.v_max - s.v_max};
}

struct BuildConfig {
  scene::SceneConfig scene;
  radar::RadarConfig radar;
  channel::ChannelConfig channel;
  NormSpec norm;
  int samples = 667;       // frames per device; records per device = samples * num_targets
  int frame_stride = 30;   // simulated frames between two sampled frames
  double split = 0.8;      // train fraction of frames
  int chunk_records = 256;
  std::uint64_t seed = 1;

  void validate() const {
    scene.validate();
    radar.validate();
    channel.validate();
    norm.validate();
    if (samples < 1) throw ConfigError("build.samples: must be >= 1");
    if (frame_stride < 1) throw ConfigError("build.frame_stride: must be >= 1");
    if (std::size_t(frame_stride) > scene.frame_count()) throw ConfigError("build.frame_stride: exceeds sequence length");
    if (!(split > 0 && split < 1)) throw ConfigError("build.split: must be in (0,1)");
    if (chunk_records < 1) throw ConfigError("build.chunk_records: must be >= 1");
    if (scene.antenna_ny != radar.n_y || scene.antenna_nz != radar.n_z)
      throw ConfigError("build: scene antenna grid disagrees with radar n_y/n_z");
    const double diag = std::hypot(scene.arena_x, scene.arena_y);
    if (norm.d_max < diag) throw ConfigError("norm.d_max: smaller than the arena diagonal");
    if (norm.v_max < 1.2 * 10.0) throw ConfigError("norm.v_max: smaller than the fastest target");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(BuildConfig, scene, radar, channel, norm, samples, frame_stride, split,
                                                chunk_records, seed)

struct RecordMeta {
  int device = 0;
  int target = 0;
  std::uint64_t frame = 0;  // global frame id: sequence * frames_per_sequence + index
  bool occluded = false;
  RawLabels raw;
  double echo_snr_db = 0;
  bool train = true;
};

struct Record {
  scene::Image image;
  std::vector<std::complex<float>> echo;  // antennas × samples
  channel::ChannelContext context;
  std::array<float, 4> labels{};
  int class_index = 0;
  RecordMeta meta;
};

inline std::string device_dir_name(int k) { return "D_" + std::to_string(k + 1); }
inline const char* kAggDirName = "D_agg";

namespace detail {

inline json meta_json(const Record& r) {
  return {{"device", r.meta.device},
          {"target", r.meta.target},
          {"frame", r.meta.frame},
          {"occluded", r.meta.occluded},
          {"raw", {r.meta.raw.distance, r.meta.raw.azimuth, r.meta.raw.pitch, r.meta.raw.radial_velocity}},
          {"echo_snr_db", r.meta.echo_snr_db},
          {"split", r.meta.train ? "train" : "val"},
          {"class", r.class_index},
          {"context", {{"snr_db", r.context.snr_db}, {"distance_m", r.context.distance_m}, {"text", r.context.text}}}};
}

inline void meta_from_json(const json& j, Record& r) {
  r.meta.device = j.at("device");
  r.meta.target = j.at("target");
  r.meta.frame = j.at("frame");
  r.meta.occluded = j.at("occluded");
  auto raw = j.at("raw").get<std::array<double, 4>>();
  r.meta.raw = {raw[0], raw[1], raw[2], raw[3]};
  r.meta.echo_snr_db = j.at("echo_snr_db");
  r.meta.train = j.at("split") == "train";
  r.class_index = j.at("class");
  const auto& c = j.at("context");
  r.context = {c.at("snr_db"), c.at("distance_m"), c.at("text")};
}

inline std::size_t record_bytes(std::size_t image_bytes, std::size_t echo_len) {
  return image_bytes + echo_len * 2 * sizeof(float) + 4 * sizeof(float);
}

inline void serialize_payload(const Record& r, std::vector<char>& out) {
  out.clear();
  out.insert(out.end(), r.image.bgr.begin(), r.image.bgr.end());
  const char* e = reinterpret_cast<const char*>(r.echo.data());
  out.insert(out.end(), e, e + r.echo.size() * 2 * sizeof(float));
  const char* l = reinterpret_cast<const char*>(r.labels.data());
  out.insert(out.end(), l, l + 4 * sizeof(float));
}

inline void write_file(const fs::path& p, const std::string& text) {
  audit::opened(p, true);
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  os.write(text.data(), std::streamsize(text.size()));
  if (!os) throw std::runtime_error("failed writing " + p.string());
}

inline std::string read_file(const fs::path& p) {
  audit::opened(p);
  std::ifstream is(p, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(is), {}};
}

/// Writes one chunk: a JSON header line, then fixed-size record payloads.
inline std::uint64_t write_chunk(const fs::path& p, const std::vector<Record>& recs, std::size_t h, std::size_t w,
                                 std::size_t antennas, std::size_t samples) {
  json header;
  header["version"] = kFormatVersion;
  header["image_shape"] = {h, w, 3};
  header["echo_shape"] = {antennas, samples};
  header["dtypes"] = {{"image", "uint8"}, {"echo", "float32 interleaved real/imag"}, {"labels", "float32"}};
  header["record_bytes"] = record_bytes(h * w * 3, antennas * samples);
  header["records"] = json::array();
  std::vector<char> payload, all;
  for (const auto& r : recs) {
    serialize_payload(r, payload);
    auto m = meta_json(r);
    m["hash"] = fnv1a(payload.data(), payload.size());
    header["records"].push_back(m);
    all.insert(all.end(), payload.begin(), payload.end());
  }
  std::string text = header.dump() + "\n";
  text.append(all.begin(), all.end());
  write_file(p, text);
  return fnv1a(text.data(), text.size());
}

}  // namespace detail

struct BuildSummary {
  std::vector<fs::path> device_dirs;
  fs::path agg_dir;
  std::size_t frames = 0;
  std::size_t records_per_device = 0;
  std::vector<std::uint64_t> rejected_frames;
};

/// Global frame ids used by a build, in generation order.
inline std::vector<std::uint64_t> frame_ids(const BuildConfig& cfg) {
  const std::size_t per_seq = cfg.scene.frame_count() / std::size_t(cfg.frame_stride);
  std::vector<std::uint64_t> ids;
  for (std::size_t i = 0; ids.size() < std::size_t(cfg.samples); ++i)
    ids.push_back((i / per_seq) * cfg.scene.frame_count() + (i % per_seq) * std::size_t(cfg.frame_stride));
  return ids;
}

/// Deterministic frame-level split: frames ordered by a seeded hash, the
/// first round(split * F) go to training.
inline std::vector<bool> split_frames(const std::vector<std::uint64_t>& ids, double split, std::uint64_t seed) {
  std::vector<std::pair<std::uint64_t, std::size_t>> keyed;
  for (std::size_t i = 0; i < ids.size(); ++i) keyed.emplace_back(derive_seed(seed ^ 0x5eedull, ids[i]), i);
  std::sort(keyed.begin(), keyed.end());
  const std::size_t n_train = std::size_t(std::llround(split * double(ids.size())));
  std::vector<bool> train(ids.size(), false);
  for (std::size_t r = 0; r < n_train; ++r) train[keyed[r].second] = true;
  return train;
}

/// Generates D_1..D_K and D_agg under `root`.
inline BuildSummary build(const BuildConfig& cfg, const fs::path& root) {
  cfg.validate();
  const std::size_t K = std::size_t(cfg.scene.num_devices), N = std::size_t(cfg.scene.num_targets);
  const std::size_t fc = cfg.scene.frame_count();
  const auto devices = scene::make_devices(cfg.scene);
  const auto ids = frame_ids(cfg);
  const auto is_train = split_frames(ids, cfg.split, cfg.seed);

  BuildSummary sum;
  sum.agg_dir = root / kAggDirName;
  std::error_code ec;
  for (std::size_t k = 0; k < K; ++k) {
    sum.device_dirs.push_back(root / device_dir_name(int(k)));
    fs::create_directories(sum.device_dirs.back(), ec);
    if (ec) throw std::runtime_error("cannot create " + sum.device_dirs.back().string() + ": " + ec.message());
  }
  fs::create_directories(sum.agg_dir, ec);
  if (ec) throw std::runtime_error("cannot create " + sum.agg_dir.string() + ": " + ec.message());

  std::vector<std::vector<double>> link(K, std::vector<double>(K));
  for (std::size_t a = 0; a < K; ++a)
    for (std::size_t b = 0; b < K; ++b) link[a][b] = (devices[a].position - devices[b].position).norm();

  std::vector<std::vector<Record>> pending(K);
  std::vector<std::uint64_t> chain(K, 1469598103934665603ull);
  std::vector<json> chunks(K, json::array());
  std::vector<std::array<std::array<std::size_t, scene::kNumClasses>, 2>> class_counts(K);
  json agg_entries = json::array();
  std::size_t written = 0;

  auto flush = [&](std::size_t k) {
    if (pending[k].empty()) return;
    std::vector<char> buf;
    for (const auto& r : pending[k]) {
      detail::serialize_payload(r, buf);
      chain[k] = fnv1a(buf.data(), buf.size(), chain[k]);
    }
    char name[32];
    std::snprintf(name, sizeof name, "chunk_%05zu.bin", chunks[k].size());
    const auto h = detail::write_chunk(sum.device_dirs[k] / name, pending[k], std::size_t(cfg.scene.image_h),
                                       std::size_t(cfg.scene.image_w), cfg.radar.antennas(), cfg.radar.samples());
    chunks[k].push_back({{"file", name}, {"records", pending[k].size()}, {"hash", h}});
    pending[k].clear();
  };

  scene::SceneConfig seq_cfg = cfg.scene;
  std::vector<scene::TargetState> init;
  std::uint64_t current_seq = ~0ull;
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  for (std::size_t fi = 0; fi < ids.size(); ++fi) {
    const std::uint64_t seq = ids[fi] / fc;
    if (seq != current_seq) {
      seq_cfg.seed = derive_seed(cfg.seed, seq);
      init = scene::initial_targets(seq_cfg);
      current_seq = seq;
    }
    const auto frame = scene::frame_at(seq_cfg, init, std::size_t(ids[fi] % fc));
    Rng rng(derive_seed(cfg.seed ^ 0xf4a3e5ull, ids[fi]));

    std::vector<Record> recs;
    try {
      for (std::size_t k = 0; k < K; ++k) {
        const auto image = scene::render(devices[k], frame, cfg.scene.obstacles);
        for (std::size_t n = 0; n < N; ++n) {
          const auto& t = frame.targets[n];
          const auto gt = scene::ground_truth(devices[k], t, cfg.scene.obstacles);
          Record r;
          r.image = image;
          r.class_index = gt.class_index;
          r.meta = {int(k), int(n), ids[fi], gt.occluded, {gt.distance, gt.azimuth, gt.pitch, gt.radial_velocity},
                    0.0, bool(is_train[fi])};
          const auto norm = normalize(r.meta.raw, cfg.norm);
          for (int i = 0; i < 4; ++i) r.labels[std::size_t(i)] = float(norm[std::size_t(i)]);
          r.meta.echo_snr_db = cfg.radar.snr_min_db + (cfg.radar.snr_max_db - cfg.radar.snr_min_db) * unit(rng);
          const auto e = radar::echo(cfg.radar, gt.distance, gt.radial_velocity, gt.pitch, gt.azimuth, t.rcs,
                                     gt.occluded, r.meta.echo_snr_db, rng);
          r.echo.assign(e.values.begin(), e.values.end());
          const double snr = cfg.channel.snr_min_db + (cfg.channel.snr_max_db - cfg.channel.snr_min_db) * unit(rng);
          std::size_t peer = k;
          if (K > 1) peer = (k + 1 + std::size_t(unit(rng) * double(K - 1))) % K;
          r.context = channel::render_context(snr, link[k][peer]);
          recs.push_back(std::move(r));
        }
      }
    } catch (const DomainError& err) {
      std::cerr << "dataset: frame " << ids[fi] << " rejected: " << err.what() << "\n";
      sum.rejected_frames.push_back(ids[fi]);
      continue;
    }

    for (std::size_t n = 0; n < N; ++n) {
      json labels = json::array();
      for (std::size_t k = 0; k < K; ++k) labels.push_back(recs[k * N + n].labels);
      agg_entries.push_back({{"frame", ids[fi]},
                             {"target", n},
                             {"class", recs[n].class_index},
                             {"split", is_train[fi] ? "train" : "val"},
                             {"labels", labels}});
    }
    for (auto& r : recs) {
      const std::size_t k = std::size_t(r.meta.device);
      ++class_counts[k][r.meta.train ? 0 : 1][std::size_t(r.class_index)];
      pending[k].push_back(std::move(r));
      if (pending[k].size() == std::size_t(cfg.chunk_records)) flush(k);
    }
    ++written;
  }
  for (std::size_t k = 0; k < K; ++k) flush(k);

  sum.frames = written;
  sum.records_per_device = written * N;
  json cfg_json = cfg;
  for (std::size_t k = 0; k < K; ++k) {
    std::size_t train = 0;
    for (auto c : class_counts[k][0]) train += c;
    json m = {{"format", "disac-dataset"},
              {"version", kFormatVersion},
              {"role", "device"},
              {"device", k},
              {"device_position", {devices[k].position.x, devices[k].position.y, devices[k].position.z}},
              {"records", sum.records_per_device},
              {"train_records", train},
              {"val_records", sum.records_per_device - train},
              {"class_counts", {{"train", class_counts[k][0]}, {"val", class_counts[k][1]}}},
              {"chunks", chunks[k]},
              {"payload_hash", chain[k]},
              {"rejected_frames", sum.rejected_frames},
              {"config", cfg_json}};
    detail::write_file(sum.device_dirs[k] / "manifest.json", m.dump(2) + "\n");
  }
  json dev_dirs = json::array();
  for (std::size_t k = 0; k < K; ++k) dev_dirs.push_back("../" + device_dir_name(int(k)));
  json agg = {{"format", "disac-dataset"},
              {"version", kFormatVersion},
              {"role", "aggregation"},
              {"devices", K},
              {"targets", N},
              {"device_datasets", dev_dirs},
              {"link_distances", link},
              {"entries", agg_entries.size()},
              {"rejected_frames", sum.rejected_frames},
              {"config", cfg_json}};
  detail::write_file(sum.agg_dir / "manifest.json", agg.dump(2) + "\n");
  detail::write_file(sum.agg_dir / "labels.json", agg_entries.dump() + "\n");
  return sum;
}

/// A device dataset loaded into memory.
struct DeviceDataset {
  fs::path dir;
  json manifest;
  std::vector<Record> records;
  std::size_t image_h = 0, image_w = 0, antennas = 0, samples = 0;
  std::uint64_t payload_hash = 0;  // chained FNV over every record payload

  int device() const { return manifest.at("device"); }
  std::vector<std::size_t> indices(bool train) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < records.size(); ++i)
      if (records[i].meta.train == train) out.push_back(i);
    return out;
  }
};

inline json read_manifest(const fs::path& dir) {
  const auto p = dir / "manifest.json";
  if (!fs::exists(p)) throw std::runtime_error("missing manifest: " + p.string());
  auto m = json::parse(detail::read_file(p));
  if (m.value("format", "") != "disac-dataset") throw std::runtime_error("not a dataset manifest: " + p.string());
  if (m.value("version", -1) != kFormatVersion)
    throw std::runtime_error("incompatible dataset version in " + p.string());
  return m;
}

inline DeviceDataset load_device(const fs::path& dir) {
  DeviceDataset ds;
  ds.dir = dir;
  ds.manifest = read_manifest(dir);
  if (ds.manifest.value("role", "") != "device") throw std::runtime_error("not a device dataset: " + dir.string());
  ds.payload_hash = 1469598103934665603ull;
  std::size_t index = 0;
  for (const auto& c : ds.manifest.at("chunks")) {
    const auto p = dir / c.at("file").get<std::string>();
    const std::string text = detail::read_file(p);
    const auto nl = text.find('\n');
    if (nl == std::string::npos) throw std::runtime_error("corrupt chunk header in " + p.string());
    const auto header = json::parse(text.substr(0, nl));
    if (header.at("version") != kFormatVersion) throw std::runtime_error("incompatible chunk version " + p.string());
    const auto ishape = header.at("image_shape").get<std::array<std::size_t, 3>>();
    const auto eshape = header.at("echo_shape").get<std::array<std::size_t, 2>>();
    ds.image_h = ishape[0], ds.image_w = ishape[1], ds.antennas = eshape[0], ds.samples = eshape[1];
    const std::size_t img_bytes = ishape[0] * ishape[1] * 3, echo_len = eshape[0] * eshape[1];
    const std::size_t rb = detail::record_bytes(img_bytes, echo_len);
    std::size_t off = nl + 1;
    for (const auto& m : header.at("records")) {
      if (off + rb > text.size()) throw std::runtime_error("truncated record " + std::to_string(index) + " in " + p.string());
      const char* base = text.data() + off;
      if (fnv1a(base, rb) != m.at("hash").get<std::uint64_t>())
        throw std::runtime_error("corrupt record " + std::to_string(index) + " in " + p.string());
      ds.payload_hash = fnv1a(base, rb, ds.payload_hash);
      Record r;
      detail::meta_from_json(m, r);
      r.image.width = int(ishape[1]);
      r.image.height = int(ishape[0]);
      r.image.bgr.assign(base, base + img_bytes);
      r.echo.resize(echo_len);
      std::memcpy(r.echo.data(), base + img_bytes, echo_len * 2 * sizeof(float));
      std::memcpy(r.labels.data(), base + img_bytes + echo_len * 2 * sizeof(float), 4 * sizeof(float));
      ds.records.push_back(std::move(r));
      off += rb;
      ++index;
    }
    if (fnv1a(text.data(), text.size()) != c.at("hash").get<std::uint64_t>())
      throw std::runtime_error("corrupt chunk " + p.string() + " (hash mismatch)");
  }
  if (ds.payload_hash != ds.manifest.at("payload_hash").get<std::uint64_t>())
    throw std::runtime_error("dataset " + dir.string() + ": payload checksum differs from build time");
  return ds;
}

/// Chained payload hash computed from in-memory records (matches the value
/// accumulated while loading).
inline std::uint64_t payload_hash(const std::vector<Record>& recs) {
  std::uint64_t h = 1469598103934665603ull;
  std::vector<char> buf;
  for (const auto& r : recs) {
    detail::serialize_payload(r, buf);
    h = fnv1a(buf.data(), buf.size(), h);
  }
  return h;
}

struct AggEntry {
  std::uint64_t frame = 0;
  int target = 0;
  int class_index = 0;
  bool train = true;
  std::vector<std::array<float, 4>> labels;  // one row per center position
};

struct AggDataset {
  fs::path dir;
  json manifest;
  std::vector<AggEntry> entries;
  std::vector<std::vector<double>> link_distances;

  std::size_t devices() const { return manifest.at("devices"); }
  fs::path device_dir(std::size_t k) const {
    return (dir / manifest.at("device_datasets").at(k).get<std::string>()).lexically_normal();
  }
  std::vector<std::size_t> indices(bool train) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < entries.size(); ++i)
      if (entries[i].train == train) out.push_back(i);
    return out;
  }
};

inline AggDataset load_agg(const fs::path& dir) {
  AggDataset ds;
  ds.dir = dir;
  ds.manifest = read_manifest(dir);
  if (ds.manifest.value("role", "") != "aggregation") throw std::runtime_error("not an aggregation dataset: " + dir.string());
  ds.link_distances = ds.manifest.at("link_distances").get<std::vector<std::vector<double>>>();
  const auto j = json::parse(detail::read_file(dir / "labels.json"));
  for (const auto& e : j) {
    AggEntry a;
    a.frame = e.at("frame");
    a.target = e.at("target");
    a.class_index = e.at("class");
    a.train = e.at("split") == "train";
    a.labels = e.at("labels").get<std::vector<std::array<float, 4>>>();
    ds.entries.push_back(std::move(a));
  }
  return ds;
}

/// Index batches for one epoch. Shuffling is a pure function of the seed.
inline std::vector<std::vector<std::size_t>> batches(std::vector<std::size_t> indices, std::size_t batch_size,
                                                     std::uint64_t seed, bool shuffle = true) {
  if (batch_size == 0) throw ConfigError("batches: batch size must be positive");
  if (shuffle) {
    Rng rng(seed);
    for (std::size_t i = indices.size(); i > 1; --i) {
      std::uniform_int_distribution<std::size_t> u(0, i - 1);
      std::swap(indices[i - 1], indices[u(rng)]);
    }
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < indices.size(); i += batch_size)
    out.emplace_back(indices.begin() + long(i), indices.begin() + long(std::min(indices.size(), i + batch_size)));
  return out;
}

// Network input conditioning.

/// Image batch [B,3,H,W], channels in BGR order, scaled to roughly unit range.
template <typename T>
nn::Tensor<T> collate_images(const std::vector<const Record*>& recs) {
  const std::size_t b = recs.size(), h = std::size_t(recs.at(0)->image.height), w = std::size_t(recs[0]->image.width);
  std::vector<T> v(b * 3 * h * w);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t c = 0; c < 3; ++c)
          v[((i * 3 + c) * h + y) * w + x] = T((recs[i]->image.bgr[(y * w + x) * 3 + c] / 255.0 - 0.5) / 0.25);
  return nn::Tensor<T>({b, 3, h, w}, std::move(v));
}

/// Per-record gain for the echo. Raw amplitudes span ~6 decades; the echo is
/// rescaled to RMS m = 1 + (log10(rms) + 5) / 4 (clamped to [0.1, 3]), so
/// the network sees O(1) values while the received level stays encoded.
inline double echo_gain(const std::vector<std::complex<float>>& e) {
  double p = 0;
  for (auto x : e) p += std::norm(std::complex<double>(x));
  const double rms = std::sqrt(p / double(std::max<std::size_t>(e.size(), 1)));
  if (!(rms > 0)) return 0.0;
  const double m = std::clamp(1.0 + (std::log10(rms) + 5.0) / 4.0, 0.1, 3.0);
  return m / rms;
}

/// Echo batch [B,2,A,S]: channel 0 real, channel 1 imaginary.
template <typename T>
nn::Tensor<T> collate_echo(const std::vector<const Record*>& recs, std::size_t antennas, std::size_t samples) {
  const std::size_t b = recs.size(), n = antennas * samples;
  std::vector<T> v(b * 2 * n);
  for (std::size_t i = 0; i < b; ++i) {
    if (recs[i]->echo.size() != n) throw ContractError("collate_echo: record echo has wrong length");
    const double g = echo_gain(recs[i]->echo);
    for (std::size_t j = 0; j < n; ++j) {
      v[(i * 2) * n + j] = T(recs[i]->echo[j].real() * g);
      v[(i * 2 + 1) * n + j] = T(recs[i]->echo[j].imag() * g);
    }
  }
  return nn::Tensor<T>({b, 2, antennas, samples}, std::move(v));
}

}  // namespace disac::data
