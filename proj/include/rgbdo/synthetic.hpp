#pragma once

// Synthetic RGB-D world for ground-truth experiments: scenes made of
// textured rectangular patches, an analytic multi-frequency texture with
// nonzero gradient almost everywhere, exact ray-patch rendering, smooth
// waypoint trajectories, and a parametric sensor noise model. Because both
// the geometry and the texture are analytic, rendered frames come with
// exact ground truth for depth, intensity and camera pose.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "rgbdo/common.hpp"
#include "rgbdo/geometry.hpp"
#include "rgbdo/lie.hpp"

namespace rgbdo::synth {

// A sinusoidal texture component over the patch's metric coordinates:
//   amplitude * sin(2*pi*(x/wavelength_u + y/wavelength_v) + phase)
// A zero wavelength disables that axis.
struct Wave {
  double amplitude = 0.1;
  double wavelength_u = 0.25;  // meters; 0 = constant along u
  double wavelength_v = 0.0;
  double phase = 0.0;
};

// A finite textured rectangle: origin corner plus two edge vectors. Points
// on the patch are origin + a*edge_u + b*edge_v with a, b in [0, 1].
struct Patch {
  lie::Vec3 origin = lie::Vec3::Zero();
  lie::Vec3 edge_u = lie::Vec3::UnitX();
  lie::Vec3 edge_v = lie::Vec3::UnitY();
  double base_intensity = 0.5;
  std::vector<Wave> waves;

  // Intensity at metric patch coordinates (meters along each edge).
  double intensity_at(double u_m, double v_m) const {
    double value = base_intensity;
    for (const Wave& w : waves) {
      double arg = w.phase;
      if (w.wavelength_u != 0.0) arg += 2.0 * std::numbers::pi * u_m / w.wavelength_u;
      if (w.wavelength_v != 0.0) arg += 2.0 * std::numbers::pi * v_m / w.wavelength_v;
      value += w.amplitude * std::sin(arg);
    }
    return std::clamp(value, 0.02, 0.98);
  }
};

struct Scene {
  std::vector<Patch> patches;
};

// Deterministic multi-frequency texture: a handful of waves at mixed
// orientations with wavelengths between roughly 0.1 and 0.5 meters, varied
// per patch through the seed so adjacent walls do not look alike.
inline std::vector<Wave> default_texture(std::uint32_t seed) {
  std::mt19937 rng(seed * 2654435761u + 1u);
  auto unit = [&rng]() { return (rng() % 10000u) / 10000.0; };
  std::vector<Wave> waves;
  const int n = 4;
  for (int i = 0; i < n; ++i) {
    Wave w;
    w.amplitude = 0.06 + 0.08 * unit();
    const double wavelength = 0.1 + 0.4 * unit();
    const double angle = 2.0 * std::numbers::pi * unit();
    // Split the wavelength over both axes to orient the wavefronts.
    const double cu = std::cos(angle), cv = std::sin(angle);
    w.wavelength_u = std::abs(cu) < 0.05 ? 0.0 : wavelength / cu;
    w.wavelength_v = std::abs(cv) < 0.05 ? 0.0 : wavelength / cv;
    w.phase = 2.0 * std::numbers::pi * unit();
    waves.push_back(w);
  }
  return waves;
}

// Axis-aligned box room viewed from inside: six textured faces spanning
// [min, max], with normals pointing into the interior by construction of
// the winding (texture is emitted regardless of side).
inline Scene box_room(const lie::Vec3& min_corner, const lie::Vec3& max_corner,
                      std::uint32_t texture_seed = 1) {
  const lie::Vec3& a = min_corner;
  const lie::Vec3& b = max_corner;
  if (!((b - a).array() > 0.0).all())
    throw InvalidArgument("box_room: max corner must exceed min corner");
  const double dx = b.x() - a.x(), dy = b.y() - a.y(), dz = b.z() - a.z();
  Scene scene;
  auto add = [&scene, texture_seed](const lie::Vec3& o, const lie::Vec3& eu, const lie::Vec3& ev) {
    Patch p;
    p.origin = o;
    p.edge_u = eu;
    p.edge_v = ev;
    p.base_intensity = 0.45 + 0.1 * ((scene.patches.size() % 3) / 2.0);
    p.waves = default_texture(texture_seed + static_cast<std::uint32_t>(scene.patches.size()));
    scene.patches.push_back(std::move(p));
  };
  add(a, {dx, 0, 0}, {0, dy, 0});                                     // z = min (floor)
  add({a.x(), a.y(), b.z()}, {dx, 0, 0}, {0, dy, 0});                 // z = max (ceiling)
  add(a, {dx, 0, 0}, {0, 0, dz});                                     // y = min wall
  add({a.x(), b.y(), a.z()}, {dx, 0, 0}, {0, 0, dz});                 // y = max wall
  add(a, {0, dy, 0}, {0, 0, dz});                                     // x = min wall
  add({b.x(), a.y(), a.z()}, {0, dy, 0}, {0, 0, dz});                 // x = max wall
  return scene;
}

// A single textured wall z = distance (world), spanning the given extent.
inline Scene planar_wall(double distance, double half_extent = 4.0,
                         std::uint32_t texture_seed = 7) {
  Scene scene;
  Patch p;
  p.origin = lie::Vec3(-half_extent, -half_extent, distance);
  p.edge_u = lie::Vec3(2 * half_extent, 0, 0);
  p.edge_v = lie::Vec3(0, 2 * half_extent, 0);
  p.base_intensity = 0.5;
  p.waves = default_texture(texture_seed);
  scene.patches.push_back(std::move(p));
  return scene;
}

struct RayHit {
  double z = 0.0;          // camera-frame Z of the hit (ray parameter)
  double intensity = 0.0;  // texture value at the hit
  int patch = -1;
  lie::Vec3 point_world = lie::Vec3::Zero();
};

// Casts the ray of pixel (u, v) from camera pose T_wc (camera-to-world)
// and returns the nearest patch hit in front of the camera. The ray is
// parameterized along the unnormalized direction ((u-u0)/fx, (v-v0)/fy, 1),
// so the ray parameter equals the camera-frame Z depth directly.
inline std::optional<RayHit> raycast(const Scene& scene, const lie::Pose& T_wc,
                                     const geom::CameraIntrinsics& k, double u, double v) {
  const lie::Vec3 dir_camera((u - k.u0) / k.fx, (v - k.v0) / k.fy, 1.0);
  const lie::Vec3 dir_world = T_wc.R * dir_camera;
  const lie::Vec3& origin = T_wc.t;

  std::optional<RayHit> best;
  for (std::size_t idx = 0; idx < scene.patches.size(); ++idx) {
    const Patch& p = scene.patches[idx];
    const lie::Vec3 normal = p.edge_u.cross(p.edge_v);
    const double denom = normal.dot(dir_world);
    if (std::abs(denom) < 1e-12) continue;  // ray parallel to the plane
    const double s = normal.dot(p.origin - origin) / denom;
    if (s <= 1e-9) continue;  // behind or at the camera
    if (best && s >= best->z) continue;

    const lie::Vec3 hit = origin + s * dir_world;
    // Patch coordinates via the 2x2 Gram system of the edge vectors.
    const lie::Vec3 d = hit - p.origin;
    Eigen::Matrix2d gram;
    gram << p.edge_u.squaredNorm(), p.edge_u.dot(p.edge_v), p.edge_u.dot(p.edge_v),
        p.edge_v.squaredNorm();
    const Eigen::Vector2d rhs(p.edge_u.dot(d), p.edge_v.dot(d));
    const Eigen::Vector2d ab = gram.ldlt().solve(rhs);
    const double a = ab.x(), b = ab.y();
    if (a < 0.0 || a > 1.0 || b < 0.0 || b > 1.0) continue;

    RayHit candidate;
    candidate.z = s;
    candidate.intensity = p.intensity_at(a * p.edge_u.norm(), b * p.edge_v.norm());
    candidate.patch = static_cast<int>(idx);
    candidate.point_world = hit;
    best = candidate;
  }
  return best;
}

// Sensor imperfection model. Depth noise grows quadratically with range
// (sigma = base + quad * z^2), a fraction of depth pixels drops out
// entirely, and intensity gets additive Gaussian noise.
struct NoiseModel {
  double depth_sigma_base = 0.0;
  double depth_sigma_quad = 0.0;
  double intensity_sigma = 0.0;
  double depth_dropout = 0.0;

  bool enabled() const {
    return depth_sigma_base > 0.0 || depth_sigma_quad > 0.0 || intensity_sigma > 0.0 ||
           depth_dropout > 0.0;
  }
};

// Renders one RGB-D frame. Pixels whose ray misses every patch get zero
// depth (invalid) and zero intensity; a frame where every ray misses is
// reported as an error since it means the trajectory left the scene.
inline geom::RgbdFrame render(const Scene& scene, const lie::Pose& T_wc,
                              const geom::CameraIntrinsics& k, double timestamp = 0.0,
                              const NoiseModel& noise = {}, std::mt19937_64* rng = nullptr) {
  k.validate();
  if (noise.enabled() && rng == nullptr)
    throw InvalidArgument("render: a noise model needs a random generator");

  RasterF intensity(k.width, k.height, 0.f);
  RasterF depth(k.width, k.height, 0.f);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  long hits = 0;
  for (int y = 0; y < k.height; ++y) {
    for (int x = 0; x < k.width; ++x) {
      const std::optional<RayHit> hit = raycast(scene, T_wc, k, x, y);
      if (!hit) continue;
      ++hits;
      double z = hit->z;
      double value = hit->intensity;
      if (noise.enabled()) {
        if (noise.intensity_sigma > 0.0)
          value = std::clamp(value + noise.intensity_sigma * gauss(*rng), 0.0, 1.0);
        const double sigma_d = noise.depth_sigma_base + noise.depth_sigma_quad * z * z;
        if (sigma_d > 0.0) z = std::max(1e-4, z + sigma_d * gauss(*rng));
        if (noise.depth_dropout > 0.0 && uniform(*rng) < noise.depth_dropout) z = 0.0;
      }
      intensity(x, y) = static_cast<float>(value);
      depth(x, y) = static_cast<float>(z);
    }
  }
  if (hits == 0) {
    std::ostringstream msg;
    msg << "render: no scene surface visible from the camera at t=" << timestamp;
    throw Error(msg.str());
  }
  return geom::RgbdFrame::FromIntensity(timestamp, std::move(intensity), std::move(depth), k,
                                        geom::DepthConvention::kZDepth);
}

// Pose interpolation along the group geodesic: rotation by exponential
// blending, translation linearly.
inline lie::Pose interpolate_pose(const lie::Pose& a, const lie::Pose& b, double f) {
  lie::Pose out;
  const lie::Vec3 omega = lie::log_so3(a.R.transpose() * b.R);
  out.R = a.R * lie::exp_so3(f * omega);
  out.t = (1.0 - f) * a.t + f * b.t;
  return out;
}

// Piecewise-geodesic path through camera-to-world waypoints, sampled by a
// normalized parameter in [0, 1] that advances uniformly per segment.
struct WaypointPath {
  std::vector<lie::Pose> waypoints;

  lie::Pose sample(double s) const {
    if (waypoints.empty()) throw InvalidArgument("WaypointPath: no waypoints");
    if (waypoints.size() == 1) return waypoints.front();
    const double clamped = std::clamp(s, 0.0, 1.0);
    const double u = clamped * (waypoints.size() - 1);
    const std::size_t i = std::min(static_cast<std::size_t>(u), waypoints.size() - 2);
    return interpolate_pose(waypoints[i], waypoints[i + 1], u - i);
  }
};

// Renders a full sequence with evenly spaced timestamps. The same generator
// drives the noise across all frames in order, so a fixed seed reproduces
// the sequence bit for bit.
struct SequenceResult {
  std::vector<geom::RgbdFrame> frames;
  std::vector<lie::Pose> poses;  // ground truth camera-to-world per frame
};

inline SequenceResult render_sequence(const Scene& scene, const WaypointPath& path, int n_frames,
                                      const geom::CameraIntrinsics& k, double dt = 1.0 / 30.0,
                                      const NoiseModel& noise = {}, std::uint64_t seed = 0,
                                      double t0 = 0.0) {
  if (n_frames < 1) throw InvalidArgument("render_sequence: need at least one frame");
  SequenceResult out;
  out.frames.reserve(n_frames);
  out.poses.reserve(n_frames);
  std::mt19937_64 rng(seed);
  for (int i = 0; i < n_frames; ++i) {
    const double s = n_frames == 1 ? 0.0 : static_cast<double>(i) / (n_frames - 1);
    const lie::Pose pose = path.sample(s);
    out.poses.push_back(pose);
    out.frames.push_back(
        render(scene, pose, k, t0 + i * dt, noise, noise.enabled() ? &rng : nullptr));
  }
  return out;
}

// --- Scene text format ------------------------------------------------
//
//   patch ox oy oz  eux euy euz  evx evy evz  base
//   wave amplitude wavelength_u wavelength_v phase
//
// Each wave line attaches to the most recent patch. '#' starts a comment.

inline void save_scene(const std::string& path, const Scene& scene) {
  std::ofstream out(path);
  if (!out) throw Error("save_scene: cannot open " + path);
  out << "# patch ox oy oz eux euy euz evx evy evz base\n";
  out << "# wave amplitude wavelength_u wavelength_v phase\n";
  char line[512];
  for (const Patch& p : scene.patches) {
    std::snprintf(line, sizeof(line), "patch %.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g\n",
                  p.origin.x(), p.origin.y(), p.origin.z(), p.edge_u.x(), p.edge_u.y(),
                  p.edge_u.z(), p.edge_v.x(), p.edge_v.y(), p.edge_v.z(), p.base_intensity);
    out << line;
    for (const Wave& w : p.waves) {
      std::snprintf(line, sizeof(line), "wave %.17g %.17g %.17g %.17g\n", w.amplitude,
                    w.wavelength_u, w.wavelength_v, w.phase);
      out << line;
    }
  }
  if (!out) throw Error("save_scene: write failed for " + path);
}

inline Scene load_scene(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("load_scene: cannot open " + path);
  Scene scene;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ss(line);
    std::string kind;
    ss >> kind;
    if (kind == "patch") {
      Patch p;
      if (!(ss >> p.origin.x() >> p.origin.y() >> p.origin.z() >> p.edge_u.x() >> p.edge_u.y() >>
            p.edge_u.z() >> p.edge_v.x() >> p.edge_v.y() >> p.edge_v.z() >> p.base_intensity))
        throw ParseError("load_scene: malformed patch line in " + path, line_no);
      scene.patches.push_back(std::move(p));
    } else if (kind == "wave") {
      if (scene.patches.empty())
        throw ParseError("load_scene: wave before any patch in " + path, line_no);
      Wave w;
      if (!(ss >> w.amplitude >> w.wavelength_u >> w.wavelength_v >> w.phase))
        throw ParseError("load_scene: malformed wave line in " + path, line_no);
      scene.patches.back().waves.push_back(w);
    } else {
      throw ParseError("load_scene: unknown record '" + kind + "' in " + path, line_no);
    }
  }
  if (scene.patches.empty()) throw EmptySequenceError("load_scene: no patches in " + path);
  return scene;
}

}  // namespace rgbdo::synth
