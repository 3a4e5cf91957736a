#pragma once

#include <filesystem>
#include <mutex>
#include <string>
#include <vector>

// Process-wide log of files opened by dataset and checkpoint I/O. Tests use
// it to check which data a training stage touched.

namespace disac::audit {

struct Access {
  std::filesystem::path path;
  bool write = false;
};

namespace detail {
inline std::mutex& mutex() {
  static std::mutex m;
  return m;
}
inline std::vector<Access>& log() {
  static std::vector<Access> l;
  return l;
}
}  // namespace detail

inline void opened(const std::filesystem::path& p, bool write = false) {
  std::error_code ec;
  auto abs = std::filesystem::weakly_canonical(std::filesystem::absolute(p), ec);
  std::lock_guard lock(detail::mutex());
  detail::log().push_back({ec ? p : abs, write});
}

inline std::vector<Access> snapshot() {
  std::lock_guard lock(detail::mutex());
  return detail::log();
}

inline void clear() {
  std::lock_guard lock(detail::mutex());
  detail::log().clear();
}

/// True when `p` lies inside directory `dir` (after normalization).
inline bool inside(const std::filesystem::path& p, const std::filesystem::path& dir) {
  std::error_code ec;
  auto d = std::filesystem::weakly_canonical(std::filesystem::absolute(dir), ec).string();
  auto s = p.string();
  if (!d.empty() && d.back() != '/') d += '/';
  return s.rfind(d, 0) == 0;
}

}  // namespace disac::audit
