#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <memory>
#include <numbers>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "disac/config.hpp"
#include "disac/numerics/checkpoint.hpp"

namespace disac::train {

using model::Modality;
using nn::Tensor;
namespace fs = std::filesystem;

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A required checkpoint or code file is absent or of the wrong kind.
class MissingArtifact : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// --------------------------------------------------------------------- losses

/// Unweighted squared errors per task, cross-entropy and the weighted total.
struct LossTerms {
  double distance = 0, azimuth = 0, pitch = 0, velocity = 0, ce = 0, total = 0;

  void accumulate(const LossTerms& t, double weight) {
    distance += weight * t.distance;
    azimuth += weight * t.azimuth;
    pitch += weight * t.pitch;
    velocity += weight * t.velocity;
    ce += weight * t.ce;
    total += weight * t.total;
  }
  void divide(double n) {
    for (double* v : {&distance, &azimuth, &pitch, &velocity, &ce, &total}) *v /= n;
  }
};

template <typename T>
struct Loss {
  Tensor<T> value;
  LossTerms terms;
};

/// l1 |d^-d|^2 + l2 |a^-a|^2 + l3 |p^-p|^2 + l4 |v^-v|^2 + l5 CE, each
/// squared error averaged over the batch, labels normalized to (0,1).
template <typename T>
Loss<T> task_loss(const model::SensingOutput<T>& out, const Tensor<T>& labels, std::span<const std::int32_t> classes,
                  const LossWeights& w) {
  if (out.regression.shape() != labels.shape() || labels.rank() != 2 || labels.dim(1) != 4)
    nn::shape_error("task_loss", out.regression.shape(), labels.shape());
  for (T v : out.regression.data())
    if (!std::isfinite(double(v))) throw DomainError("task_loss: non-finite prediction");
  for (T v : out.logits.data())
    if (!std::isfinite(double(v))) throw DomainError("task_loss: non-finite class logit");
  for (T v : labels.data())
    if (!std::isfinite(double(v))) throw DomainError("task_loss: non-finite label");
  const double weights[4] = {w.l1, w.l2, w.l3, w.l4};
  double* slots[4];
  Loss<T> r;
  slots[0] = &r.terms.distance, slots[1] = &r.terms.azimuth, slots[2] = &r.terms.pitch, slots[3] = &r.terms.velocity;
  for (std::size_t j = 0; j < 4; ++j) {
    auto e = nn::mean(nn::square(nn::sub(nn::slice(out.regression, 1, j, 1), nn::slice(labels, 1, j, 1))));
    *slots[j] = double(e.item());
    auto term = nn::scale(e, T(weights[j]));
    r.value = r.value ? nn::add(r.value, term) : term;
  }
  auto ce = nn::cross_entropy(out.logits, classes);
  r.terms.ce = double(ce.item());
  r.value = nn::add(r.value, nn::scale(ce, T(w.l5)));
  r.terms.total = double(r.value.item());
  return r;
}

template <typename T>
Loss<T> local_loss(const model::SensingOutput<T>& out, const Tensor<T>& labels, std::span<const std::int32_t> classes,
                   const LossWeights& w) {
  return task_loss(out, labels, classes, w);
}

/// Same structure as the local loss with center-referenced labels.
template <typename T>
Loss<T> agg_loss(const model::SensingOutput<T>& out, const Tensor<T>& labels, std::span<const std::int32_t> classes,
                 const LossWeights& w) {
  return task_loss(out, labels, classes, w);
}

/// Number of rows whose arg-max logit (lowest index on ties) equals the label.
template <typename T>
std::size_t correct(const Tensor<T>& logits, std::span<const std::int32_t> classes) {
  const std::size_t b = logits.dim(0), m = logits.dim(1);
  std::size_t n = 0;
  for (std::size_t r = 0; r < b; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < m; ++c)
      if (logits[r * m + c] > logits[r * m + best]) best = c;
    n += std::int32_t(best) == classes[r];
  }
  return n;
}

// ------------------------------------------------------------------- contexts

/// Context sentence for a link. The lossless path (+inf SNR) is described
/// with the top of the training SNR range.
inline std::string context_text(double snr_db, double distance_m, const channel::ChannelConfig& ch) {
  return channel::render_context(std::isinf(snr_db) ? ch.snr_max_db : snr_db, distance_m).text;
}

// --------------------------------------------------------------------- batches

template <typename T>
struct Batch {
  Tensor<T> images, echo, labels;
  std::vector<std::int32_t> classes;
  std::vector<double> distances;  // context link distance of each record
};

template <typename T>
Batch<T> collate(const data::DeviceDataset& ds, std::span<const std::size_t> idx, Modality m) {
  std::vector<const data::Record*> recs;
  for (auto i : idx) recs.push_back(&ds.records.at(i));
  Batch<T> b;
  if (m != Modality::Rf) b.images = data::collate_images<T>(recs);
  if (m != Modality::Cv) b.echo = data::collate_echo<T>(recs, ds.antennas, ds.samples);
  std::vector<T> lab;
  for (const auto* r : recs) {
    lab.insert(lab.end(), r->labels.begin(), r->labels.end());
    b.classes.push_back(r->class_index);
    b.distances.push_back(r->context.distance_m);
  }
  b.labels = Tensor<T>(nn::Shape{recs.size(), 4}, std::move(lab));
  return b;
}

// ---------------------------------------------------------------- device side

inline std::string head_local_prefix(int device) { return "head_local." + std::to_string(device); }

/// Stage-1 model of one device: RVFN, LSTN and the local prediction head.
template <typename T>
class DeviceModel {
 public:
  DeviceModel(const ModelConfig& cfg, Modality modality, int device, std::uint64_t seed)
      : cfg_(cfg), modality_(modality), device_(device) {
    cfg.validate();
    Rng rng(derive_seed(seed, 0x1000 + std::uint64_t(device)));
    rvfn_ = std::make_shared<model::Rvfn<T>>(ps_, cfg.rvfn, modality, rng);
    lstn_ = model::Lstn<T>(ps_, cfg.lstn, cfg.rvfn.l_sf, cfg.rvfn.d_sf, rng);
    head_ = model::PredictionHead<T>::make(ps_, head_local_prefix(device), std::size_t(cfg.lstn.decoder.d_sd),
                                           std::size_t(cfg.tram.classes), rng);
  }

  nn::ParameterStore<T>& params() { return ps_; }
  const nn::ParameterStore<T>& params() const { return ps_; }
  const ModelConfig& config() const { return cfg_; }
  Modality modality() const { return modality_; }
  int device() const { return device_; }
  model::Lstn<T>& lstn() { return lstn_; }
  const model::Lstn<T>& lstn() const { return lstn_; }
  const model::Rvfn<T>& rvfn() const { return *rvfn_; }
  const model::PredictionHead<T>& head() const { return head_; }

  Tensor<T> features(const Batch<T>& b, const nn::Mode& mode) const { return rvfn_->forward(b.images, b.echo, mode); }
  Tensor<T> encode(const Tensor<T>& s) const { return lstn_.encode(s); }
  model::SensingOutput<T> decode_predict(const Tensor<T>& received, const model::TextBatch& text) const {
    return head_(lstn_.decode(received, &text));
  }

  std::uint64_t decoder_hash() const { return ps_.hash("lstn.decoder.") ^ (ps_.hash("lstn.lora.") * 31); }

  void save(const fs::path& path, nlohmann::json meta) const {
    nn::Archive ar;
    nn::export_parameters(ps_, ar);
    meta["kind"] = "stage1";
    meta["device"] = device_;
    meta["modality"] = model::to_string(modality_);
    meta["model"] = cfg_;
    meta["hashes"] = {{"rvfn", ps_.hash("rvfn.")},
                      {"lstn", ps_.hash("lstn.")},
                      {"head_local", ps_.hash(head_local_prefix(device_) + ".")},
                      {"decoder", decoder_hash()}};
    ar.meta = std::move(meta);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    nn::write_archive(path, ar);
  }

  static DeviceModel from_archive(const nn::Archive& ar) {
    if (ar.meta.value("kind", "") != "stage1") throw std::runtime_error("not a stage-1 checkpoint");
    DeviceModel m(ar.meta.at("model").get<ModelConfig>(), model::parse_modality(ar.meta.at("modality")),
                  ar.meta.at("device").get<int>(), 0);
    nn::import_parameters(m.ps_, ar);
    return m;
  }

  static DeviceModel load(const fs::path& path) { return from_archive(nn::read_archive(path)); }

 private:
  ModelConfig cfg_;
  Modality modality_;
  int device_;
  nn::ParameterStore<T> ps_;
  std::shared_ptr<model::Rvfn<T>> rvfn_;
  model::Lstn<T> lstn_;
  model::PredictionHead<T> head_;
};

/// Full stage-1 pass: features, code, channel, decoder with context, head.
template <typename T>
Loss<T> stage1_loss(const DeviceModel<T>& m, const Batch<T>& b, std::span<const double> snr_db, Rng& noise,
                    const nn::Mode& mode, const RunConfig& rc, model::SensingOutput<T>* out_pred = nullptr) {
  auto code = m.encode(m.features(b, mode));
  auto received = channel::pass(code, snr_db, noise);
  std::vector<std::string> texts;
  for (std::size_t i = 0; i < snr_db.size(); ++i) texts.push_back(context_text(snr_db[i], b.distances[i], rc.data.channel));
  auto text = model::tokenize_batch(texts, std::size_t(rc.model.lstn.decoder.l_text));
  auto out = m.decode_predict(received, text);
  if (out_pred) *out_pred = out;
  return local_loss(out, b.labels, b.classes, rc.train.weights);
}

struct EpochRecord {
  int epoch = 0;
  std::string split;
  LossTerms terms;
  double accuracy = 0;
  std::size_t samples = 0;
};

inline nlohmann::json to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch},
          {"split", r.split},
          {"distance", r.terms.distance},
          {"azimuth", r.terms.azimuth},
          {"pitch", r.terms.pitch},
          {"velocity", r.terms.velocity},
          {"ce", r.terms.ce},
          {"total", r.terms.total},
          {"accuracy", r.accuracy}};
}

inline void csv_header(std::ostream& os) { os << "epoch,split,distance,azimuth,pitch,velocity,ce,total,accuracy\n"; }

inline void csv_row(std::ostream& os, const EpochRecord& r) {
  char buf[320];
  std::snprintf(buf, sizeof buf, "%d,%s,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.6f\n", r.epoch, r.split.c_str(),
                r.terms.distance, r.terms.azimuth, r.terms.pitch, r.terms.velocity, r.terms.ce, r.terms.total,
                r.accuracy);
  os << buf;
}

struct StageResult {
  std::vector<EpochRecord> log;
  std::size_t steps = 0;
  double seconds = 0;
};

/// Learning rate for update `step` of `total` under the configured schedule.
inline double lr_at(const TrainConfig& tc, std::size_t step, std::size_t total) {
  if (tc.schedule == "constant" || total <= 1) return tc.lr;
  const double f = double(std::min(step, total - 1)) / double(total - 1);
  return tc.lr * (tc.lr_floor + (1 - tc.lr_floor) * 0.5 * (1 + std::cos(std::numbers::pi * f)));
}

inline std::vector<double> draw_snr(std::size_t n, const channel::ChannelConfig& ch, Rng& rng) {
  std::uniform_real_distribution<double> u(ch.snr_min_db, ch.snr_max_db);
  std::vector<double> s(n);
  for (auto& v : s) v = u(rng);
  return s;
}

/// Evaluation-mode loss over a split with a fixed SNR/noise stream.
template <typename T>
EpochRecord evaluate_stage1(const DeviceModel<T>& m, const data::DeviceDataset& ds, const std::vector<std::size_t>& idx,
                            const RunConfig& rc, int epoch, const std::string& split) {
  nn::NoGradGuard ng;
  Rng snr_rng(derive_seed(rc.seed, 0xe7a10000 + std::uint64_t(m.device())));
  Rng noise(derive_seed(rc.seed, 0xe7a20000 + std::uint64_t(m.device())));
  EpochRecord rec{epoch, split, {}, 0, 0};
  std::size_t hits = 0;
  for (const auto& bi : data::batches(idx, std::size_t(rc.train.eval_batch), 0, false)) {
    auto b = collate<T>(ds, bi, m.modality());
    auto snr = draw_snr(bi.size(), rc.data.channel, snr_rng);
    model::SensingOutput<T> out;
    auto loss = stage1_loss(m, b, snr, noise, nn::eval_mode(), rc, &out);
    rec.terms.accumulate(loss.terms, double(bi.size()));
    hits += correct(out.logits, b.classes);
    rec.samples += bi.size();
  }
  if (rec.samples) {
    rec.terms.divide(double(rec.samples));
    rec.accuracy = double(hits) / double(rec.samples);
  }
  return rec;
}

/// Stage 1 on one device's local dataset. Logs the epoch-0 (initial)
/// validation loss, then train and validation rows per epoch; writes the
/// checkpoint when `ckpt` is non-empty.
template <typename T>
StageResult train_stage1(DeviceModel<T>& m, const data::DeviceDataset& ds, const RunConfig& rc, const fs::path& ckpt,
                         std::ostream* csv = nullptr,
                         const std::function<void(const EpochRecord&)>& progress = {}) {
  if (ds.device() != m.device())
    throw ContractError("train_stage1: dataset of device " + std::to_string(ds.device()) + " given to model of device " +
                        std::to_string(m.device()));
  const auto t0 = std::chrono::steady_clock::now();
  auto& ps = m.params();
  model::set_lora_only(ps, rc.train.lora_only);
  const auto train_idx = ds.indices(true), val_idx = ds.indices(false);
  if (train_idx.empty() || val_idx.empty()) throw ConfigError("train_stage1: empty train or validation split");
  nn::Adam<T> opt(ps, {rc.train.lr, 0.9, 0.999, 1e-8, rc.train.clip_norm});
  StageResult res;
  auto emit = [&](const EpochRecord& r) {
    res.log.push_back(r);
    if (csv) csv_row(*csv, r);
    if (progress) progress(r);
  };
  if (csv) csv_header(*csv);
  emit(evaluate_stage1(m, ds, val_idx, rc, 0, "val"));

  const std::uint64_t dev = std::uint64_t(m.device());
  Rng snr_rng(derive_seed(rc.seed, 0x51000 + dev)), noise(derive_seed(rc.seed, 0x52000 + dev)),
      drop(derive_seed(rc.seed, 0x53000 + dev));
  const nn::Mode mode{true, &drop};
  for (int epoch = 1; epoch <= rc.train.epochs_stage1; ++epoch) {
    EpochRecord tr{epoch, "train", {}, 0, 0};
    std::size_t hits = 0;
    const auto order = data::batches(train_idx, std::size_t(rc.train.batch), derive_seed(rc.seed, 0x54000 + dev * 1000 + std::uint64_t(epoch)));
    const std::size_t total = order.size() * std::size_t(rc.train.epochs_stage1);
    for (const auto& bi : order) {
      opt.set_lr(lr_at(rc.train, res.steps, total));
      auto b = collate<T>(ds, bi, m.modality());
      auto snr = draw_snr(bi.size(), rc.data.channel, snr_rng);
      ps.zero_grad();
      model::SensingOutput<T> out;
      Loss<T> loss;
      try {
        loss = stage1_loss(m, b, snr, noise, mode, rc, &out);
      } catch (const DomainError& e) {
        throw DivergenceError("device " + std::to_string(m.device()) + ": " + e.what() + " at epoch " +
                              std::to_string(epoch) + ", step " + std::to_string(res.steps));
      }
      if (!std::isfinite(loss.terms.total))
        throw DivergenceError("device " + std::to_string(m.device()) + ": non-finite loss at epoch " +
                              std::to_string(epoch) + ", step " + std::to_string(res.steps));
      loss.value.backward();
      opt.step();
      ++res.steps;
      tr.terms.accumulate(loss.terms, double(bi.size()));
      hits += correct(out.logits, b.classes);
      tr.samples += bi.size();
    }
    tr.terms.divide(double(tr.samples));
    tr.accuracy = double(hits) / double(tr.samples);
    emit(tr);
    emit(evaluate_stage1(m, ds, val_idx, rc, epoch, "val"));
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!ckpt.empty()) {
    nlohmann::json log = nlohmann::json::array();
    for (const auto& r : res.log) log.push_back(to_json(r));
    m.save(ckpt, {{"seed", rc.seed},
                  {"dataset_hash", ds.payload_hash},
                  {"lora_only", rc.train.lora_only},
                  {"epochs", rc.train.epochs_stage1},
                  {"seconds", res.seconds},
                  {"log", log}});
  }
  return res;
}

/// Semantic codes a device transmits for every record of its dataset,
/// produced by its frozen stage-1 model (evaluation mode).
struct DeviceCodes {
  int device = 0;
  Modality modality = Modality::Multimodal;
  std::size_t l_se = 0, d_se = 0;
  std::vector<float> values;  // [records, l_se * d_se]
  std::vector<std::uint64_t> frames;
  std::vector<int> targets;
  std::vector<double> distances;
  double t_ft = 0, t_se = 0;  // seconds per sample

  std::size_t size() const { return frames.size(); }
  std::size_t code_size() const { return l_se * d_se; }
};

template <typename T>
DeviceCodes emit_codes(const DeviceModel<T>& m, const data::DeviceDataset& ds, std::size_t batch = 64) {
  nn::NoGradGuard ng;
  DeviceCodes c;
  c.device = m.device();
  c.modality = m.modality();
  c.l_se = std::size_t(m.config().lstn.l_se);
  c.d_se = std::size_t(m.config().lstn.d_se);
  std::vector<std::size_t> all(ds.records.size());
  std::iota(all.begin(), all.end(), 0);
  double ft = 0, se = 0;
  for (const auto& bi : data::batches(all, batch, 0, false)) {
    auto b = collate<T>(ds, bi, m.modality());
    const auto t0 = std::chrono::steady_clock::now();
    auto s = m.features(b, nn::eval_mode());
    const auto t1 = std::chrono::steady_clock::now();
    auto code = m.encode(s);
    const auto t2 = std::chrono::steady_clock::now();
    ft += std::chrono::duration<double>(t1 - t0).count();
    se += std::chrono::duration<double>(t2 - t1).count();
    for (T v : code.data()) c.values.push_back(float(v));
  }
  for (const auto& r : ds.records) {
    c.frames.push_back(r.meta.frame);
    c.targets.push_back(r.meta.target);
    c.distances.push_back(r.context.distance_m);
  }
  if (!all.empty()) c.t_ft = ft / double(all.size()), c.t_se = se / double(all.size());
  return c;
}

/// Code file written next to a stage-1 checkpoint.
inline fs::path codes_path(const fs::path& ckpt) {
  auto p = ckpt;
  p += ".codes";
  return p;
}

inline void save_codes(const fs::path& path, const DeviceCodes& c, std::uint64_t decoder_hash) {
  nn::Archive ar;
  ar.entries.push_back({"codes", "float32", {c.size(), c.l_se, c.d_se}, std::vector<double>(c.values.begin(), c.values.end())});
  ar.meta = {{"kind", "codes"},        {"device", c.device},   {"modality", model::to_string(c.modality)},
             {"frames", c.frames},     {"targets", c.targets}, {"distances", c.distances},
             {"t_ft", c.t_ft},         {"t_se", c.t_se},       {"decoder_hash", decoder_hash}};
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  nn::write_archive(path, ar);
}

inline DeviceCodes load_codes(const fs::path& path) {
  if (!fs::exists(path)) throw MissingArtifact("missing code file " + path.string());
  const auto ar = nn::read_archive(path);
  const auto& m = ar.meta;
  if (m.value("kind", "") != "codes") throw MissingArtifact(path.string() + " is not a code file");
  const auto* e = ar.find("codes");
  if (!e || e->shape.size() != 3) throw MissingArtifact(path.string() + " has no code tensor");
  DeviceCodes c;
  c.device = m.at("device");
  c.modality = model::parse_modality(m.at("modality"));
  c.l_se = e->shape[1], c.d_se = e->shape[2];
  c.values.assign(e->values.begin(), e->values.end());
  c.frames = m.at("frames").get<std::vector<std::uint64_t>>();
  c.targets = m.at("targets").get<std::vector<int>>();
  c.distances = m.at("distances").get<std::vector<double>>();
  c.t_ft = m.at("t_ft"), c.t_se = m.at("t_se");
  if (c.frames.size() != e->shape[0]) throw MissingArtifact(path.string() + ": code count disagrees with metadata");
  return c;
}

// ---------------------------------------------------------------- center side

/// How the non-center links are simulated for a batch.
struct SnrPolicy {
  enum class Kind { Random, Fixed, Lossless } kind = Kind::Random;
  double snr_db = 0;

  static SnrPolicy random() { return {}; }
  static SnrPolicy fixed(double s) { return {Kind::Fixed, s}; }
  static SnrPolicy lossless() { return {Kind::Lossless, 0}; }
};

/// Aggregation-center model: TRAM and the shared head, plus the frozen
/// decoders shipped inside each device's stage-1 checkpoint.
template <typename T>
class CenterModel {
 public:
  CenterModel(const ModelConfig& cfg, Modality modality, std::size_t devices, std::uint64_t seed)
      : cfg_(cfg), modality_(modality), decoders_(devices), decoder_ps_(devices), decoder_hashes_(devices, 0) {
    cfg.validate();
    Rng rng(derive_seed(seed, 0x2000));
    tram_ = model::Tram<T>(ps_, cfg.tram, rng);
    head_ = model::PredictionHead<T>::make(ps_, "head", std::size_t(cfg.tram.d_sd), std::size_t(cfg.tram.classes), rng);
  }

  nn::ParameterStore<T>& params() { return ps_; }
  const ModelConfig& config() const { return cfg_; }
  Modality modality() const { return modality_; }
  std::size_t devices() const { return decoders_.size(); }
  std::uint64_t decoder_hash(std::size_t k) const { return decoder_hashes_.at(k); }
  nn::ParameterStore<T>& decoder_params(std::size_t k) { return *decoder_ps_.at(k); }

  /// Mounts device k's decoder from its stage-1 checkpoint (frozen).
  void mount_decoder(std::size_t k, const nn::Archive& device_ckpt) {
    const auto& meta = device_ckpt.meta;
    if (meta.value("kind", "") != "stage1" || meta.at("device").get<std::size_t>() != k)
      throw ContractError("mount_decoder: checkpoint is not the stage-1 checkpoint of device " + std::to_string(k));
    if (meta.at("modality").get<std::string>() != model::to_string(modality_))
      throw ContractError("mount_decoder: device " + std::to_string(k) + " checkpoint has modality " +
                          meta.at("modality").get<std::string>());
    auto ps = std::make_shared<nn::ParameterStore<T>>();
    Rng rng(0);
    auto dec = std::make_shared<model::Decoder<T>>(*ps, cfg_.lstn, rng, "lstn");
    nn::import_parameters(*ps, device_ckpt);
    ps->freeze_all();
    decoder_hashes_[k] = ps->hash("lstn.decoder.") ^ (ps->hash("lstn.lora.") * 31);
    if (meta.contains("hashes") && meta["hashes"].at("decoder").get<std::uint64_t>() != decoder_hashes_[k])
      throw std::runtime_error("mount_decoder: decoder checksum mismatch for device " + std::to_string(k));
    decoders_[k] = dec;
    decoder_ps_[k] = ps;
  }

  Tensor<T> decode(std::size_t k, const Tensor<T>& received, const model::TextBatch& text) const {
    if (!decoders_.at(k)) throw ContractError("center: no decoder mounted for device " + std::to_string(k));
    nn::NoGradGuard ng;
    return (*decoders_[k])(received, &text);
  }

  model::SensingOutput<T> predict(const Tensor<T>& center, const std::vector<Tensor<T>>& others,
                                  const nn::Mode& mode) const {
    return head_(tram_.forward(center, others, mode));
  }

  void save(const fs::path& path, nlohmann::json meta) const {
    nn::Archive ar;
    nn::export_parameters(ps_, ar);
    meta["kind"] = "stage2";
    meta["modality"] = model::to_string(modality_);
    meta["model"] = cfg_;
    meta["devices"] = decoders_.size();
    meta["decoder_hashes"] = decoder_hashes_;
    meta["hashes"] = {{"tram", ps_.hash("tram.")}, {"head", ps_.hash("head.")}};
    ar.meta = std::move(meta);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    nn::write_archive(path, ar);
  }

  static CenterModel from_archive(const nn::Archive& ar) {
    if (ar.meta.value("kind", "") != "stage2") throw std::runtime_error("not a stage-2 checkpoint");
    CenterModel c(ar.meta.at("model").get<ModelConfig>(), model::parse_modality(ar.meta.at("modality")),
                  ar.meta.at("devices").get<std::size_t>(), 0);
    nn::import_parameters(c.ps_, ar);
    return c;
  }

 private:
  ModelConfig cfg_;
  Modality modality_;
  nn::ParameterStore<T> ps_;
  model::Tram<T> tram_;
  model::PredictionHead<T> head_;
  std::vector<std::shared_ptr<model::Decoder<T>>> decoders_;
  std::vector<std::shared_ptr<nn::ParameterStore<T>>> decoder_ps_;
  std::vector<std::uint64_t> decoder_hashes_;
};

template <typename T>
struct CenterBatch {
  model::SensingOutput<T> out;
  Tensor<T> labels;
  std::vector<std::int32_t> classes;
  std::vector<double> t_sd;  // per-device decode seconds for the batch
  double t_fa = 0;           // aggregation and head seconds for the batch
};

/// One center-side pass over entries `idx` with the aggregation center at
/// device position `center`: the center's own code takes the lossless path,
/// every other device's code crosses the channel with its link distance.
template <typename T>
CenterBatch<T> center_forward(const CenterModel<T>& c, const data::AggDataset& agg,
                              const std::vector<DeviceCodes>& codes, std::span<const std::size_t> idx,
                              std::size_t center, const SnrPolicy& policy, Rng& snr_rng, Rng& noise,
                              const nn::Mode& mode, const RunConfig& rc) {
  const std::size_t b = idx.size(), k_all = codes.size();
  const auto l_text = std::size_t(rc.model.lstn.decoder.l_text);
  CenterBatch<T> cb;
  std::vector<Tensor<T>> decoded(k_all);
  cb.t_sd.assign(k_all, 0.0);
  for (std::size_t k = 0; k < k_all; ++k) {
    const auto& dc = codes[k];
    std::vector<T> v;
    v.reserve(b * dc.code_size());
    for (auto i : idx) {
      if (dc.frames.at(i) != agg.entries.at(i).frame || dc.targets.at(i) != agg.entries[i].target)
        throw ContractError("center_forward: device " + std::to_string(k) + " code " + std::to_string(i) +
                            " does not match aggregation entry");
      const float* p = dc.values.data() + i * dc.code_size();
      v.insert(v.end(), p, p + dc.code_size());
    }
    Tensor<T> code(nn::Shape{b, dc.l_se, dc.d_se}, std::move(v));
    std::vector<double> snr(b, channel::kLossless);
    if (k != center) {
      if (policy.kind == SnrPolicy::Kind::Random) snr = draw_snr(b, rc.data.channel, snr_rng);
      if (policy.kind == SnrPolicy::Kind::Fixed) std::fill(snr.begin(), snr.end(), policy.snr_db);
    }
    // The center's own code is described like the device's stage-1 links.
    std::vector<std::string> texts;
    for (std::size_t r = 0; r < b; ++r)
      texts.push_back(context_text(snr[r], k == center ? dc.distances.at(idx[r]) : agg.link_distances.at(center).at(k),
                                   rc.data.channel));
    Tensor<T> received;
    {
      nn::NoGradGuard ng;
      received = channel::pass(code, snr, noise);
    }
    const auto t0 = std::chrono::steady_clock::now();
    decoded[k] = c.decode(k, received, model::tokenize_batch(texts, l_text));
    cb.t_sd[k] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
  const auto t1 = std::chrono::steady_clock::now();
  std::vector<Tensor<T>> others;
  for (std::size_t k = 0; k < k_all; ++k)
    if (k != center) others.push_back(decoded[k]);
  cb.out = c.predict(decoded[center], others, mode);
  cb.t_fa = std::chrono::duration<double>(std::chrono::steady_clock::now() - t1).count();
  std::vector<T> lab;
  for (auto i : idx) {
    const auto& row = agg.entries[i].labels.at(center);
    lab.insert(lab.end(), row.begin(), row.end());
    cb.classes.push_back(agg.entries[i].class_index);
  }
  cb.labels = Tensor<T>(nn::Shape{b, 4}, std::move(lab));
  return cb;
}

template <typename T>
EpochRecord evaluate_stage2(const CenterModel<T>& c, const data::AggDataset& agg, const std::vector<DeviceCodes>& codes,
                            const std::vector<std::size_t>& idx, const RunConfig& rc, int epoch,
                            const SnrPolicy& links = SnrPolicy::random()) {
  nn::NoGradGuard ng;
  EpochRecord rec{epoch, "val", {}, 0, 0};
  std::size_t hits = 0;
  for (std::size_t center = 0; center < codes.size(); ++center) {
    Rng snr_rng(derive_seed(rc.seed, 0xe7b10000 + center)), noise(derive_seed(rc.seed, 0xe7b20000 + center));
    for (const auto& bi : data::batches(idx, std::size_t(rc.train.eval_batch), 0, false)) {
      auto cb = center_forward(c, agg, codes, bi, center, links, snr_rng, noise, nn::eval_mode(), rc);
      auto loss = agg_loss(cb.out, cb.labels, cb.classes, rc.train.weights);
      rec.terms.accumulate(loss.terms, double(bi.size()));
      hits += correct(cb.out.logits, cb.classes);
      rec.samples += bi.size();
    }
  }
  if (rec.samples) {
    rec.terms.divide(double(rec.samples));
    rec.accuracy = double(hits) / double(rec.samples);
  }
  return rec;
}

/// Stage 2: trains TRAM and the center head on transmitted codes only. Each
/// batch draws the aggregation-center position uniformly over the devices.
/// With `lossless` every link skips the channel (the upper-bound center).
template <typename T>
StageResult train_stage2(CenterModel<T>& c, const data::AggDataset& agg, const std::vector<DeviceCodes>& codes,
                         const RunConfig& rc, const fs::path& ckpt, std::ostream* csv = nullptr,
                         const std::function<void(const EpochRecord&)>& progress = {}, bool lossless = false) {
  if (codes.size() != c.devices() || codes.size() != agg.devices())
    throw ContractError("train_stage2: " + std::to_string(codes.size()) + " code sets for " +
                        std::to_string(agg.devices()) + " devices");
  for (std::size_t k = 0; k < codes.size(); ++k)
    if (codes[k].size() != agg.entries.size())
      throw ContractError("train_stage2: device " + std::to_string(k) + " emitted " + std::to_string(codes[k].size()) +
                          " codes for " + std::to_string(agg.entries.size()) + " entries");
  const auto t0 = std::chrono::steady_clock::now();
  const auto train_idx = agg.indices(true), val_idx = agg.indices(false);
  auto& ps = c.params();
  nn::Adam<T> opt(ps, {rc.train.lr, 0.9, 0.999, 1e-8, rc.train.clip_norm});
  StageResult res;
  auto emit = [&](const EpochRecord& r) {
    res.log.push_back(r);
    if (csv) csv_row(*csv, r);
    if (progress) progress(r);
  };
  if (csv) csv_header(*csv);
  const auto links = lossless ? SnrPolicy::lossless() : SnrPolicy::random();
  emit(evaluate_stage2(c, agg, codes, val_idx, rc, 0, links));
  Rng snr_rng(derive_seed(rc.seed, 0x61000)), noise(derive_seed(rc.seed, 0x62000)), drop(derive_seed(rc.seed, 0x63000)),
      pick(derive_seed(rc.seed, 0x64000));
  const nn::Mode mode{true, &drop};
  std::uniform_int_distribution<std::size_t> center_dist(0, codes.size() - 1);
  for (int epoch = 1; epoch <= rc.train.epochs_stage2; ++epoch) {
    EpochRecord tr{epoch, "train", {}, 0, 0};
    std::size_t hits = 0;
    const auto order = data::batches(train_idx, std::size_t(rc.train.batch), derive_seed(rc.seed, 0x65000 + std::uint64_t(epoch)));
    const std::size_t total = order.size() * std::size_t(rc.train.epochs_stage2);
    for (const auto& bi : order) {
      opt.set_lr(lr_at(rc.train, res.steps, total));
      const std::size_t center = center_dist(pick);
      ps.zero_grad();
      auto cb = center_forward(c, agg, codes, bi, center, links, snr_rng, noise, mode, rc);
      Loss<T> loss;
      try {
        loss = agg_loss(cb.out, cb.labels, cb.classes, rc.train.weights);
      } catch (const DomainError& e) {
        throw DivergenceError(std::string("center: ") + e.what() + " at epoch " + std::to_string(epoch));
      }
      if (!std::isfinite(loss.terms.total))
        throw DivergenceError("center: non-finite loss at epoch " + std::to_string(epoch));
      loss.value.backward();
      opt.step();
      ++res.steps;
      tr.terms.accumulate(loss.terms, double(bi.size()));
      hits += correct(cb.out.logits, cb.classes);
      tr.samples += bi.size();
    }
    tr.terms.divide(double(tr.samples));
    tr.accuracy = double(hits) / double(tr.samples);
    emit(tr);
    emit(evaluate_stage2(c, agg, codes, val_idx, rc, epoch, links));
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!ckpt.empty()) {
    nlohmann::json log = nlohmann::json::array();
    for (const auto& r : res.log) log.push_back(to_json(r));
    c.save(ckpt, {{"seed", rc.seed},
                  {"epochs", rc.train.epochs_stage2},
                  {"lossless", lossless},
                  {"seconds", res.seconds},
                  {"log", log}});
  }
  return res;
}

// --------------------------------------------------------------------- timing

/// Per-device latency terms in seconds.
struct DeviceTiming {
  double t_ft = 0, t_se = 0, t_com = 0, t_sd = 0, t_fa = 0;
  double total() const { return t_ft + t_se + t_com + t_sd + t_fa; }
};

struct TimingReport {
  std::vector<DeviceTiming> devices;
  double t_exe = 0;
  double t_max = 0;  // configured budget, 0 when unset
  bool within_budget = true;
};

/// T_exe is the slowest device's end-to-end sum. Negative inputs are
/// clamped to zero (timer jitter).
inline TimingReport measure_execution(std::vector<DeviceTiming> devices, double t_max = 0) {
  TimingReport r;
  for (auto& d : devices) {
    for (double* v : {&d.t_ft, &d.t_se, &d.t_com, &d.t_sd, &d.t_fa}) *v = std::max(0.0, *v);
    r.t_exe = std::max(r.t_exe, d.total());
  }
  r.devices = std::move(devices);
  r.t_max = t_max;
  r.within_budget = t_max <= 0 || r.t_exe <= t_max;
  return r;
}

/// Airtime of one semantic code of `symbols` complex symbols at `snr_db`.
inline double code_airtime(std::size_t symbols, double snr_db, const channel::ChannelConfig& ch) {
  return channel::delay(channel::payload_bits(symbols), channel::rate_at_snr(ch, snr_db));
}

}  // namespace disac::train
