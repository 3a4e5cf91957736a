#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "disac/numerics/tensor.hpp"

namespace disac::scene {

enum class TargetClass : int { Car = 0, RobotDog = 1, Drone = 2 };

inline constexpr int kNumClasses = 3;

inline const char* class_name(TargetClass c) {
  switch (c) {
    case TargetClass::Car: return "car";
    case TargetClass::RobotDog: return "robot-dog";
    case TargetClass::Drone: return "drone";
  }
  return "?";
}

inline double class_rcs(TargetClass c) {
  static constexpr std::array<double, 3> rcs = {100.0, 10.0, 1.0};
  return rcs[static_cast<int>(c)];
}

inline double class_speed(TargetClass c) {
  static constexpr std::array<double, 3> speed = {10.0, 2.0, 5.0};
  return speed[static_cast<int>(c)];
}

// Physical radius used for the rendered disc.
inline double class_radius_m(TargetClass c) {
  static constexpr std::array<double, 3> r = {2.0, 0.8, 0.6};
  return r[static_cast<int>(c)];
}

struct Vec3 {
  double x = 0, y = 0, z = 0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(const Vec3& o) const { return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x}; }
  double norm() const { return std::sqrt(dot(*this)); }
  Vec3 normalized() const {
    const double n = norm();
    return {x / n, y / n, z / n};
  }
  double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
  double& operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }
  bool operator==(const Vec3&) const = default;
};

/// Axis-aligned box [lo, hi].
struct Box {
  Vec3 lo, hi;
  bool contains(const Vec3& p) const {
    return p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y && p.z >= lo.z && p.z <= hi.z;
  }
};

struct SceneConfig {
  double arena_x = 100.0;
  double arena_y = 100.0;
  double ceiling = 30.0;
  int num_devices = 4;
  int num_targets = 3;
  std::vector<Box> obstacles = {
      {{30, 30, 0}, {38, 38, 8}},
      {{62, 30, 0}, {70, 38, 8}},
      {{62, 62, 0}, {70, 70, 8}},
      {{30, 62, 0}, {38, 70, 8}},
  };
  double duration_s = 5.0;
  double frame_rate_hz = 120.0;
  std::uint64_t seed = 1;
  int image_w = 64;
  int image_h = 64;
  double fov_deg = 100.0;  // horizontal field of view; sets the focal length
  int antenna_ny = 4;
  int antenna_nz = 4;
  std::vector<double> device_altitudes = {2.0, 6.0, 10.0, 14.0};
  double target_margin = 5.0;  // targets stay this far from the walls
  double drone_z_min = 5.0;
  double drone_z_max = 25.0;

  std::size_t frame_count() const { return std::size_t(std::llround(duration_s * frame_rate_hz)); }
  double focal_px() const { return 0.5 * image_w / std::tan(0.5 * fov_deg * std::numbers::pi / 180.0); }

  void validate() const {
    if (!(arena_x > 0) || !(arena_y > 0)) throw ConfigError("scene.arena: zero-area arena");
    if (!(ceiling > 0)) throw ConfigError("scene.ceiling: must be positive");
    if (num_devices < 1) throw ConfigError("scene.num_devices: must be >= 1");
    if (num_targets < 1) throw ConfigError("scene.num_targets: must be >= 1");
    if (!(frame_rate_hz > 0)) throw ConfigError("scene.frame_rate_hz: must be positive");
    if (!(duration_s > 0)) throw ConfigError("scene.duration_s: must be positive");
    if (image_w < 16 || image_h < 16) throw ConfigError("scene.image: width and height must be >= 16");
    if (!(fov_deg > 0 && fov_deg < 180)) throw ConfigError("scene.fov_deg: must be in (0,180)");
    if (antenna_ny < 1 || antenna_nz < 1) throw ConfigError("scene.antenna: counts must be >= 1");
    if (device_altitudes.empty()) throw ConfigError("scene.device_altitudes: empty");
    for (double a : device_altitudes)
      if (a < 0 || a > ceiling) throw ConfigError("scene.device_altitudes: device outside arena");
    if (!(2 * target_margin < std::min(arena_x, arena_y))) throw ConfigError("scene.target_margin: too large");
    if (!(drone_z_min >= 0 && drone_z_min <= drone_z_max && drone_z_max <= ceiling))
      throw ConfigError("scene.drone_z: need 0 <= min <= max <= ceiling");
  }
};

inline void to_json(nlohmann::json& j, const Box& b) {
  j = {{"lo", {b.lo.x, b.lo.y, b.lo.z}}, {"hi", {b.hi.x, b.hi.y, b.hi.z}}};
}
inline void from_json(const nlohmann::json& j, Box& b) {
  auto lo = j.at("lo").get<std::array<double, 3>>();
  auto hi = j.at("hi").get<std::array<double, 3>>();
  b = {{lo[0], lo[1], lo[2]}, {hi[0], hi[1], hi[2]}};
}

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SceneConfig, arena_x, arena_y, ceiling, num_devices, num_targets,
                                                obstacles, duration_s, frame_rate_hz, seed, image_w, image_h, fov_deg,
                                                antenna_ny, antenna_nz, device_altitudes, target_margin, drone_z_min,
                                                drone_z_max)

struct Device {
  int index = 0;
  Vec3 position;
  int image_w = 64, image_h = 64;
  double focal = 26.0;
  int n_y = 4, n_z = 4;
  Vec3 look_at;  // camera aim point
};

struct TargetState {
  int index = 0;
  TargetClass cls = TargetClass::Car;
  Vec3 center;
  Vec3 velocity;
  double rcs = 100.0;
};

struct Frame {
  std::size_t index = 0;
  double time = 0.0;
  std::vector<TargetState> targets;
};

struct GroundTruth {
  double distance = 0, azimuth = 0, pitch = 0, radial_velocity = 0;
  int class_index = 0;
  bool occluded = false;
};

/// Devices spread evenly along the arena perimeter starting at the origin
/// corner; with four devices on a rectangle they sit on the corners.
inline std::vector<Device> make_devices(const SceneConfig& cfg) {
  cfg.validate();
  std::vector<Device> out;
  const double perim = 2 * (cfg.arena_x + cfg.arena_y);
  for (int k = 0; k < cfg.num_devices; ++k) {
    double s = perim * k / cfg.num_devices;
    Vec3 p;
    if (s <= cfg.arena_x) {
      p = {s, 0, 0};
    } else if ((s -= cfg.arena_x) <= cfg.arena_y) {
      p = {cfg.arena_x, s, 0};
    } else if ((s -= cfg.arena_y) <= cfg.arena_x) {
      p = {cfg.arena_x - s, cfg.arena_y, 0};
    } else {
      s -= cfg.arena_x;
      p = {0, cfg.arena_y - s, 0};
    }
    p.z = cfg.device_altitudes[std::size_t(k) % cfg.device_altitudes.size()];
    Device d;
    d.index = k;
    d.position = p;
    d.image_w = cfg.image_w;
    d.image_h = cfg.image_h;
    d.focal = cfg.focal_px();
    d.n_y = cfg.antenna_ny;
    d.n_z = cfg.antenna_nz;
    d.look_at = {cfg.arena_x / 2, cfg.arena_y / 2, 0};
    out.push_back(d);
  }
  return out;
}

namespace detail {
// Folds x into [lo, hi] as an elastic bounce; returns the velocity sign.
inline double fold(double x, double lo, double hi, double& pos) {
  const double len = hi - lo;
  if (len <= 0) {
    pos = lo;
    return 1.0;
  }
  double m = std::fmod(x - lo, 2 * len);
  if (m < 0) m += 2 * len;
  if (m <= len) {
    pos = lo + m;
    return 1.0;
  }
  pos = lo + 2 * len - m;
  return -1.0;
}
}  // namespace detail

/// Moves a target for dt seconds at constant velocity, bouncing off the
/// faces of `bounds`.
inline TargetState advance(const TargetState& s, double dt, const Box& bounds) {
  TargetState out = s;
  for (int i = 0; i < 3; ++i) {
    double pos;
    const double sign = detail::fold(s.center[i] + s.velocity[i] * dt, bounds.lo[i], bounds.hi[i], pos);
    out.center[i] = pos;
    out.velocity[i] = s.velocity[i] * sign;
  }
  return out;
}

inline Box motion_bounds(const SceneConfig& cfg, TargetClass c) {
  const double m = cfg.target_margin;
  if (c == TargetClass::Drone) return {{m, m, cfg.drone_z_min}, {cfg.arena_x - m, cfg.arena_y - m, cfg.drone_z_max}};
  return {{m, m, 0}, {cfg.arena_x - m, cfg.arena_y - m, 0}};
}

/// Initial target states. Classes cycle car, robot-dog, drone.
inline std::vector<TargetState> initial_targets(const SceneConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<TargetState> out;
  for (int n = 0; n < cfg.num_targets; ++n) {
    TargetState t;
    t.index = n;
    t.cls = static_cast<TargetClass>(n % kNumClasses);
    t.rcs = class_rcs(t.cls);
    const Box b = motion_bounds(cfg, t.cls);
    t.center = {b.lo.x + u(rng) * (b.hi.x - b.lo.x), b.lo.y + u(rng) * (b.hi.y - b.lo.y),
                b.lo.z + u(rng) * (b.hi.z - b.lo.z)};
    const double heading = 2 * std::numbers::pi * u(rng);
    const double speed = class_speed(t.cls) * (0.8 + 0.4 * u(rng));
    const double climb = t.cls == TargetClass::Drone ? (u(rng) - 0.5) * 0.6 : 0.0;
    t.velocity = {speed * std::cos(climb) * std::cos(heading), speed * std::cos(climb) * std::sin(heading),
                  speed * std::sin(climb)};
    out.push_back(t);
  }
  return out;
}

/// State of every target at time t (closed form, so any frame can be
/// produced independently of the others).
inline Frame frame_at(const SceneConfig& cfg, const std::vector<TargetState>& initial, std::size_t index) {
  Frame f;
  f.index = index;
  f.time = double(index) / cfg.frame_rate_hz;
  for (const auto& t : initial) f.targets.push_back(advance(t, f.time, motion_bounds(cfg, t.cls)));
  return f;
}

inline std::vector<Frame> simulate(const SceneConfig& cfg) {
  const auto init = initial_targets(cfg);
  std::vector<Frame> frames;
  const std::size_t n = cfg.frame_count();
  frames.reserve(n);
  for (std::size_t i = 0; i < n; ++i) frames.push_back(frame_at(cfg, init, i));
  return frames;
}

// Ground-truth formulas, implemented as written (planar distance; azimuth
// with the (y_sd - y_c, x_c - x_sd) argument order).

inline double distance(const Vec3& sd, const Vec3& c) { return std::sqrt((sd.x - c.x) * (sd.x - c.x) + (sd.y - c.y) * (sd.y - c.y)); }
inline double azimuth(const Vec3& sd, const Vec3& c) { return std::atan2(sd.y - c.y, c.x - sd.x); }
inline double pitch(const Vec3& sd, const Vec3& c) { return std::atan2(sd.z - c.z, distance(sd, c)); }

inline double radial_velocity(const Vec3& sd, const Vec3& c, const Vec3& vel) {
  const Vec3 los = c - sd;
  const double r = los.norm();
  if (!(r > 0)) throw DomainError("radial_velocity: device and target coincide");
  return vel.dot(los) / r;
}

inline double distance(const Device& d, const TargetState& t) { return distance(d.position, t.center); }
inline double azimuth(const Device& d, const TargetState& t) { return azimuth(d.position, t.center); }
inline double pitch(const Device& d, const TargetState& t) { return pitch(d.position, t.center); }
inline double radial_velocity(const Device& d, const TargetState& t) {
  return radial_velocity(d.position, t.center, t.velocity);
}

/// Slab test: does segment a→b intersect the box?
inline bool segment_hits_box(const Vec3& a, const Vec3& b, const Box& box) {
  double t0 = 0.0, t1 = 1.0;
  const Vec3 d = b - a;
  for (int i = 0; i < 3; ++i) {
    if (d[i] == 0.0) {
      if (a[i] < box.lo[i] || a[i] > box.hi[i]) return false;
      continue;
    }
    double ta = (box.lo[i] - a[i]) / d[i];
    double tb = (box.hi[i] - a[i]) / d[i];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
    if (t0 > t1) return false;
  }
  return true;
}

inline bool occluded(const Vec3& from, const Vec3& to, const std::vector<Box>& obstacles) {
  for (const auto& b : obstacles)
    if (segment_hits_box(from, to, b)) return true;
  return false;
}

inline bool occluded(const Device& d, const TargetState& t, const std::vector<Box>& obstacles) {
  return occluded(d.position, t.center, obstacles);
}

inline GroundTruth ground_truth(const Device& d, const TargetState& t, const std::vector<Box>& obstacles) {
  GroundTruth g;
  g.distance = distance(d, t);
  g.azimuth = azimuth(d, t);
  g.pitch = pitch(d, t);
  g.radial_velocity = radial_velocity(d, t);
  g.class_index = static_cast<int>(t.cls);
  g.occluded = occluded(d, t, obstacles);
  return g;
}

/// H×W×3 interleaved BGR image.
struct Image {
  int width = 0, height = 0;
  std::vector<std::uint8_t> bgr;

  Image() = default;
  Image(int w, int h, std::array<std::uint8_t, 3> fill) : width(w), height(h), bgr(std::size_t(w) * h * 3) {
    for (std::size_t i = 0; i < bgr.size(); i += 3) std::copy(fill.begin(), fill.end(), bgr.begin() + long(i));
  }
  std::uint8_t* px(int y, int x) { return &bgr[(std::size_t(y) * width + x) * 3]; }
  const std::uint8_t* px(int y, int x) const { return &bgr[(std::size_t(y) * width + x) * 3]; }
};

inline constexpr std::array<std::uint8_t, 3> kBackground = {40, 40, 40};
inline constexpr std::array<std::uint8_t, 3> kObstacleColor = {128, 128, 128};

inline std::array<std::uint8_t, 3> class_color(TargetClass c) {
  switch (c) {
    case TargetClass::Car: return {0, 0, 255};
    case TargetClass::RobotDog: return {0, 255, 0};
    case TargetClass::Drone: return {255, 0, 0};
  }
  return {255, 255, 255};
}

/// Pinhole camera aimed from the device at its look-at point.
struct Camera {
  Vec3 origin, forward, right, up;
  double focal, cx, cy;

  explicit Camera(const Device& d)
      : origin(d.position), focal(d.focal), cx(0.5 * d.image_w), cy(0.5 * d.image_h) {
    forward = (d.look_at - d.position).normalized();
    right = forward.cross({0, 0, 1}).normalized();
    up = right.cross(forward);
  }

  // Returns false when p is not in front of the camera.
  bool project(const Vec3& p, double& u, double& v, double& depth) const {
    const Vec3 rel = p - origin;
    depth = rel.dot(forward);
    if (depth <= 1e-3) return false;
    u = cx + focal * rel.dot(right) / depth;
    v = cy - focal * rel.dot(up) / depth;
    return true;
  }
};

inline Image render(const Device& d, const Frame& f, const std::vector<Box>& obstacles) {
  Image img(d.image_w, d.image_h, kBackground);
  const Camera cam(d);

  struct Item {
    double depth;
    int kind;  // 0 box, 1 disc
    double u0, v0, u1, v1;
    std::array<std::uint8_t, 3> color;
  };
  std::vector<Item> items;

  for (const auto& b : obstacles) {
    double umin = 1e300, vmin = 1e300, umax = -1e300, vmax = -1e300, dsum = 0;
    bool ok = true;
    for (int c = 0; c < 8 && ok; ++c) {
      const Vec3 p{(c & 1) ? b.hi.x : b.lo.x, (c & 2) ? b.hi.y : b.lo.y, (c & 4) ? b.hi.z : b.lo.z};
      double u, v, dep;
      ok = cam.project(p, u, v, dep);
      umin = std::min(umin, u), umax = std::max(umax, u);
      vmin = std::min(vmin, v), vmax = std::max(vmax, v);
      dsum += dep;
    }
    if (ok) items.push_back({dsum / 8, 0, umin, vmin, umax, vmax, kObstacleColor});
  }
  for (const auto& t : f.targets) {
    if (occluded(d.position, t.center, obstacles)) continue;
    double u, v, dep;
    if (!cam.project(t.center, u, v, dep)) continue;
    const double r = std::clamp(d.focal * class_radius_m(t.cls) / (t.center - d.position).norm(), 1.0,
                                0.25 * d.image_h);
    items.push_back({dep, 1, u, v, r, 0, class_color(t.cls)});
  }
  // Boxes first, then discs; within each kind far to near.
  std::stable_sort(items.begin(), items.end(), [](const Item& a, const Item& b) {
    if (a.kind != b.kind) return a.kind < b.kind;
    return a.depth > b.depth;
  });

  for (const auto& it : items) {
    if (it.kind == 0) {
      const int x0 = std::max(0, int(std::floor(it.u0))), x1 = std::min(img.width - 1, int(std::ceil(it.u1)) - 1);
      const int y0 = std::max(0, int(std::floor(it.v0))), y1 = std::min(img.height - 1, int(std::ceil(it.v1)) - 1);
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) std::copy(it.color.begin(), it.color.end(), img.px(y, x));
    } else {
      const double r = it.u1;
      const int x0 = std::max(0, int(std::floor(it.u0 - r))), x1 = std::min(img.width - 1, int(std::ceil(it.u0 + r)));
      const int y0 = std::max(0, int(std::floor(it.v0 - r))), y1 = std::min(img.height - 1, int(std::ceil(it.v0 + r)));
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
          const double du = x + 0.5 - it.u0, dv = y + 0.5 - it.v0;
          if (du * du + dv * dv <= r * r) std::copy(it.color.begin(), it.color.end(), img.px(y, x));
        }
    }
  }
  return img;
}

inline Image render(const Device& d, const Frame& f, const SceneConfig& cfg) { return render(d, f, cfg.obstacles); }

}  // namespace disac::scene
