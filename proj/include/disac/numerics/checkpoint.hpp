#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "disac/audit.hpp"
#include "disac/numerics/parameters.hpp"

// Checkpoint archive layout:
//   bytes 0..7   magic "DISACCK1"
//   bytes 8..15  uint64 little-endian length of the JSON index
//   JSON index   {"tensors":[{"name","dtype","shape","offset","bytes"}...], "meta":{...}}
//   payloads     raw little-endian tensors in index order; offsets are
//                relative to the first payload byte.

namespace disac::nn {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'D', 'I', 'S', 'A', 'C', 'C', 'K', '1'};

struct ArchiveEntry {
  std::string name;
  std::string dtype;  // "float32" | "float64"
  Shape shape;
  std::vector<double> values;
};

struct Archive {
  std::vector<ArchiveEntry> entries;
  nlohmann::json meta = nlohmann::json::object();

  const ArchiveEntry* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }
};

inline void write_archive(const std::filesystem::path& path, const Archive& ar) {
  nlohmann::json index;
  index["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& e : ar.entries) {
    if (e.dtype != "float32" && e.dtype != "float64") throw ConfigError("archive: unsupported dtype " + e.dtype);
    if (numel(e.shape) != e.values.size()) throw ContractError("archive: entry '" + e.name + "' shape/value mismatch");
    const std::uint64_t bytes = e.values.size() * (e.dtype == "float32" ? 4 : 8);
    index["tensors"].push_back({{"name", e.name}, {"dtype", e.dtype}, {"shape", e.shape}, {"offset", offset}, {"bytes", bytes}});
    offset += bytes;
  }
  index["meta"] = ar.meta;
  const std::string header = index.dump();
  audit::opened(path, true);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
  os.write(kCheckpointMagic, 8);
  const std::uint64_t len = header.size();
  os.write(reinterpret_cast<const char*>(&len), 8);
  os.write(header.data(), std::streamsize(header.size()));
  for (const auto& e : ar.entries) {
    if (e.dtype == "float32") {
      std::vector<float> buf(e.values.begin(), e.values.end());
      os.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size() * 4));
    } else {
      os.write(reinterpret_cast<const char*>(e.values.data()), std::streamsize(e.values.size() * 8));
    }
  }
  if (!os) throw std::runtime_error("failed writing checkpoint: " + path.string());
}

inline Archive read_archive(const std::filesystem::path& path) {
  audit::opened(path);
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path.string());
  char magic[8];
  std::uint64_t len = 0;
  is.read(magic, 8);
  is.read(reinterpret_cast<char*>(&len), 8);
  if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw std::runtime_error("not a checkpoint archive: " + path.string());
  std::string header(len, '\0');
  is.read(header.data(), std::streamsize(len));
  auto index = nlohmann::json::parse(header);
  const auto payload_start = is.tellg();
  Archive ar;
  ar.meta = index.value("meta", nlohmann::json::object());
  for (const auto& t : index.at("tensors")) {
    ArchiveEntry e;
    e.name = t.at("name").get<std::string>();
    e.dtype = t.at("dtype").get<std::string>();
    e.shape = t.at("shape").get<Shape>();
    const auto n = numel(e.shape);
    is.seekg(payload_start + std::streamoff(t.at("offset").get<std::uint64_t>()));
    if (e.dtype == "float32") {
      std::vector<float> buf(n);
      is.read(reinterpret_cast<char*>(buf.data()), std::streamsize(n * 4));
      e.values.assign(buf.begin(), buf.end());
    } else if (e.dtype == "float64") {
      e.values.resize(n);
      is.read(reinterpret_cast<char*>(e.values.data()), std::streamsize(n * 8));
    } else {
      throw std::runtime_error("checkpoint " + path.string() + ": unsupported dtype " + e.dtype);
    }
    if (!is) throw std::runtime_error("checkpoint " + path.string() + ": truncated payload for " + e.name);
    ar.entries.push_back(std::move(e));
  }
  return ar;
}

template <typename T>
constexpr const char* dtype_name() {
  return sizeof(T) == 4 ? "float32" : "float64";
}

/// Appends every parameter whose name starts with `prefix` to an archive.
template <typename T>
void export_parameters(const ParameterStore<T>& store, Archive& ar, std::string_view prefix = "") {
  for (const auto& p : store.all()) {
    if (!std::string_view(p.name).starts_with(prefix)) continue;
    ar.entries.push_back({p.name, dtype_name<T>(), p.value.shape(),
                          std::vector<double>(p.value.data().begin(), p.value.data().end())});
  }
}

/// Copies archive tensors into same-named parameters under `prefix`.
/// `rename_from`/`rename_to` rewrite a name prefix on the way in (used to
/// mount a device's "head_local.k." weights elsewhere). Every targeted
/// parameter must be present with a matching shape.
template <typename T>
void import_parameters(ParameterStore<T>& store, const Archive& ar, std::string_view prefix = "",
                       const std::string& rename_from = "", const std::string& rename_to = "") {
  std::map<std::string, const ArchiveEntry*> by_name;
  for (const auto& e : ar.entries) {
    std::string n = e.name;
    if (!rename_from.empty() && n.starts_with(rename_from)) n = rename_to + n.substr(rename_from.size());
    by_name[n] = &e;
  }
  for (auto& p : store.all()) {
    if (!std::string_view(p.name).starts_with(prefix)) continue;
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw std::runtime_error("checkpoint is missing parameter '" + p.name + "'");
    if (it->second->shape != p.value.shape())
      shape_error("import_parameters(" + p.name + ")", p.value.shape(), it->second->shape);
    auto w = p.value.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = T(it->second->values[i]);
  }
}

}  // namespace disac::nn
