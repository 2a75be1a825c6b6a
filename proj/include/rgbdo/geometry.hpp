#pragma once

// Pinhole camera geometry and image containers: projection, backprojection
// under two depth storage conventions, chained reprojection between frames,
// bilinear sampling with gradients, surface normals from depth, and the
// multi-scale pyramid used by the direct aligners.
//
// Depth conventions:
//  * kZDepth:    the stored value is the Z coordinate of the 3D point in the
//                camera frame (what sensor drivers and datasets ship).
//  * kRayLength: the stored value is the Euclidean distance along the
//                normalized viewing ray.
// Datasets default to kZDepth; both are implemented and carried explicitly
// on every frame so the two can never be mixed up silently.

#include <cmath>
#include <optional>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "rgbdo/common.hpp"
#include "rgbdo/lie.hpp"

namespace rgbdo::geom {

using Point3 = Eigen::Vector3d;

enum class DepthConvention { kZDepth, kRayLength };

struct Pixel {
  double u = 0.0;
  double v = 0.0;
  Pixel() = default;
  Pixel(double u_, double v_) : u(u_), v(v_) {}
};

struct CameraIntrinsics {
  double fx = 0.0;
  double fy = 0.0;
  double u0 = 0.0;
  double v0 = 0.0;
  int width = 0;
  int height = 0;

  CameraIntrinsics() = default;
  CameraIntrinsics(double fx_, double fy_, double u0_, double v0_, int w, int h)
      : fx(fx_), fy(fy_), u0(u0_), v0(v0_), width(w), height(h) {
    validate();
  }

  void validate() const {
    if (!(fx > 0.0) || !(fy > 0.0))
      throw InvalidArgument("CameraIntrinsics: focal lengths must be positive");
    if (width <= 0 || height <= 0)
      throw InvalidArgument("CameraIntrinsics: image dimensions must be positive");
    if (!(u0 > 0.0 && u0 < width) || !(v0 > 0.0 && v0 < height))
      throw InvalidArgument("CameraIntrinsics: principal point must lie inside the image");
  }

  Eigen::Matrix3d K() const {
    Eigen::Matrix3d k;
    k << fx, 0.0, u0, 0.0, fy, v0, 0.0, 0.0, 1.0;
    return k;
  }

  // Intrinsics for pyramid level `level` (focal lengths and principal point
  // divided by scale^level, dimensions floored).
  CameraIntrinsics scaled(int level, double scale = 2.0) const {
    if (level < 0) throw InvalidArgument("CameraIntrinsics::scaled: negative level");
    const double s = std::pow(scale, level);
    int w = width, h = height;
    for (int l = 0; l < level; ++l) {
      w /= 2;
      h /= 2;
    }
    return CameraIntrinsics(fx / s, fy / s, u0 / s, v0 / s, w, h);
  }
};

// ---------------------------------------------------------------------------
// Projection and backprojection

// Pinhole projection of a camera-frame point. The point must be strictly in
// front of the camera; the result may land outside the image bounds.
inline Pixel project(const Point3& p, const CameraIntrinsics& k) {
  if (!(p.z() > 0.0)) throw BehindCameraError("project: point has non-positive depth");
  return Pixel(k.fx * p.x() / p.z() + k.u0, k.fy * p.y() / p.z() + k.v0);
}

inline bool in_image(const Pixel& p, const CameraIntrinsics& k, double margin = 0.0) {
  return p.u >= margin && p.v >= margin && p.u <= k.width - 1 - margin &&
         p.v <= k.height - 1 - margin;
}

// Lift a pixel with stored depth d back to a camera-frame 3D point.
inline Point3 backproject(const Pixel& p, double d, const CameraIntrinsics& k,
                          DepthConvention convention) {
  if (!(d > 0.0)) throw InvalidDepthError("backproject: depth must be positive");
  const Point3 ray((p.u - k.u0) / k.fx, (p.v - k.v0) / k.fy, 1.0);
  switch (convention) {
    case DepthConvention::kZDepth:
      return d * ray;
    case DepthConvention::kRayLength:
      return d * ray / ray.norm();
  }
  throw InvalidArgument("backproject: unknown depth convention");
}

enum class ReprojectStatus { kOk, kInvalidDepth, kBehindCamera, kOutOfView };

struct Reprojection {
  ReprojectStatus status = ReprojectStatus::kOk;
  Pixel pixel;          // target-frame pixel (valid when status != kInvalidDepth/kBehindCamera)
  Point3 point_target;  // 3D point in the target camera frame
  bool ok() const { return status == ReprojectStatus::kOk; }
};

// Warp a source pixel with depth through T_ts (source frame -> target frame)
// and project into the target camera. Failures are statuses, not exceptions:
// alignment loops drop the affected residual and continue.
inline Reprojection reproject(const Pixel& p, double d, const lie::Pose& T_ts,
                              const CameraIntrinsics& k_source, const CameraIntrinsics& k_target,
                              DepthConvention convention) {
  Reprojection out;
  if (!(d > 0.0)) {
    out.status = ReprojectStatus::kInvalidDepth;
    return out;
  }
  const Point3 ray((p.u - k_source.u0) / k_source.fx, (p.v - k_source.v0) / k_source.fy, 1.0);
  const Point3 ps = convention == DepthConvention::kZDepth ? Point3(d * ray)
                                                           : Point3(d * ray / ray.norm());
  out.point_target = lie::act(T_ts, ps);
  if (!(out.point_target.z() > 0.0)) {
    out.status = ReprojectStatus::kBehindCamera;
    return out;
  }
  out.pixel = Pixel(k_target.fx * out.point_target.x() / out.point_target.z() + k_target.u0,
                    k_target.fy * out.point_target.y() / out.point_target.z() + k_target.v0);
  if (!in_image(out.pixel, k_target)) {
    out.status = ReprojectStatus::kOutOfView;
    return out;
  }
  out.status = ReprojectStatus::kOk;
  return out;
}

inline Reprojection reproject(const Pixel& p, double d, const lie::Pose& T_ts,
                              const CameraIntrinsics& k, DepthConvention convention) {
  return reproject(p, d, T_ts, k, k, convention);
}

// ---------------------------------------------------------------------------
// Sampling

// Bilinear interpolation on the continuous domain [0, w-1] x [0, h-1].
// Out-of-domain positions return nullopt.
inline std::optional<double> sample_bilinear(const RasterF& img, const Pixel& p) {
  if (!(p.u >= 0.0) || !(p.v >= 0.0) || !(p.u <= img.width() - 1.0) ||
      !(p.v <= img.height() - 1.0))
    return std::nullopt;
  int x0 = static_cast<int>(p.u);
  int y0 = static_cast<int>(p.v);
  if (x0 >= img.width() - 1) x0 = img.width() - 2;
  if (y0 >= img.height() - 1) y0 = img.height() - 2;
  if (img.width() == 1) x0 = 0;
  if (img.height() == 1) y0 = 0;
  const double ax = p.u - x0;
  const double ay = p.v - y0;
  const int x1 = std::min(x0 + 1, img.width() - 1);
  const int y1 = std::min(y0 + 1, img.height() - 1);
  const double v00 = img(x0, y0), v10 = img(x1, y0), v01 = img(x0, y1), v11 = img(x1, y1);
  return (1.0 - ay) * ((1.0 - ax) * v00 + ax * v10) + ay * ((1.0 - ax) * v01 + ax * v11);
}

// Image gradient by central differences of bilinear samples with a
// half-pixel step. Exact for rasters that vary linearly; smoother than the
// per-cell slope, which makes it the better texture-strength measure.
inline std::optional<Eigen::Vector2d> sample_gradient(const RasterF& img, const Pixel& p) {
  const std::optional<double> xp = sample_bilinear(img, Pixel(p.u + 0.5, p.v));
  const std::optional<double> xm = sample_bilinear(img, Pixel(p.u - 0.5, p.v));
  const std::optional<double> yp = sample_bilinear(img, Pixel(p.u, p.v + 0.5));
  const std::optional<double> ym = sample_bilinear(img, Pixel(p.u, p.v - 0.5));
  if (!xp || !xm || !yp || !ym) return std::nullopt;
  return Eigen::Vector2d(*xp - *xm, *yp - *ym);
}

// Exact spatial derivative of the bilinear interpolant at p: the slope of
// the grid cell containing p, i.e. the true derivative of what
// sample_bilinear computes (away from cell boundaries). Objectives built on
// bilinear samples must differentiate with this, not with a smoothed
// gradient, or their normal equations stop agreeing with their cost.
inline std::optional<Eigen::Vector2d> sample_gradient_exact(const RasterF& img, const Pixel& p) {
  if (img.width() < 2 || img.height() < 2) return std::nullopt;
  if (!(p.u >= 0.0) || !(p.v >= 0.0) || !(p.u <= img.width() - 1.0) ||
      !(p.v <= img.height() - 1.0))
    return std::nullopt;
  int x0 = static_cast<int>(p.u);
  int y0 = static_cast<int>(p.v);
  if (x0 >= img.width() - 1) x0 = img.width() - 2;
  if (y0 >= img.height() - 1) y0 = img.height() - 2;
  const double ax = p.u - x0;
  const double ay = p.v - y0;
  const double v00 = img(x0, y0), v10 = img(x0 + 1, y0);
  const double v01 = img(x0, y0 + 1), v11 = img(x0 + 1, y0 + 1);
  return Eigen::Vector2d((v10 - v00) * (1.0 - ay) + (v11 - v01) * ay,
                         (v01 - v00) * (1.0 - ax) + (v11 - v10) * ax);
}

// ---------------------------------------------------------------------------
// Frames

// One RGB-D frame: color, grayscale intensity in [0, 1], and metric depth
// with 0 marking missing measurements. Intrinsics and the depth convention
// travel with the frame.
struct RgbdFrame {
  double timestamp = 0.0;
  RasterRgb color;    // may be empty for synthetic/grayscale sources
  RasterF intensity;  // luma 0.299 R + 0.587 G + 0.114 B
  RasterF depth;      // meters; 0 = invalid
  CameraIntrinsics intrinsics;
  DepthConvention convention = DepthConvention::kZDepth;

  static RgbdFrame FromColor(double timestamp, RasterRgb color, RasterF depth,
                             const CameraIntrinsics& k, DepthConvention convention) {
    RgbdFrame f;
    f.timestamp = timestamp;
    f.intensity = RasterF(color.width(), color.height());
    for (std::size_t i = 0; i < color.data().size(); ++i) {
      const Rgb& c = color.data()[i];
      f.intensity.data()[i] = 0.299f * c.r + 0.587f * c.g + 0.114f * c.b;
    }
    f.color = std::move(color);
    f.depth = std::move(depth);
    f.intrinsics = k;
    f.convention = convention;
    f.validate();
    return f;
  }

  static RgbdFrame FromIntensity(double timestamp, RasterF intensity, RasterF depth,
                                 const CameraIntrinsics& k, DepthConvention convention) {
    RgbdFrame f;
    f.timestamp = timestamp;
    f.intensity = std::move(intensity);
    f.depth = std::move(depth);
    f.intrinsics = k;
    f.convention = convention;
    f.validate();
    return f;
  }

  void validate() const {
    if (intensity.width() != intrinsics.width || intensity.height() != intrinsics.height)
      throw InvalidArgument("RgbdFrame: intensity dimensions do not match intrinsics");
    if (depth.width() != intensity.width() || depth.height() != intensity.height())
      throw InvalidArgument("RgbdFrame: depth dimensions do not match intensity");
    if (!color.empty() &&
        (color.width() != intensity.width() || color.height() != intensity.height()))
      throw InvalidArgument("RgbdFrame: color dimensions do not match intensity");
  }
};

// ---------------------------------------------------------------------------
// Pyramid

struct PyramidLevel {
  RasterF intensity;
  RasterF depth;
  CameraIntrinsics intrinsics;
};

// Coarse-to-fine stack with a fixed scale factor of 2 per level. Intensity
// is 2x2 block averaged; depth takes the closest valid value of each block
// so that no average is ever formed across a depth discontinuity.
struct Pyramid {
  std::vector<PyramidLevel> levels;
  DepthConvention convention = DepthConvention::kZDepth;
  double timestamp = 0.0;

  int level_count() const { return static_cast<int>(levels.size()); }
  const PyramidLevel& level(int l) const { return levels.at(l); }
};

inline Pyramid build_pyramid(const RgbdFrame& frame, int n_levels, double scale = 2.0) {
  if (scale != 2.0)
    throw InvalidArgument("build_pyramid: only a pyramid scale of 2 is supported");
  if (n_levels < 1) throw InvalidArgument("build_pyramid: need at least one level");
  {
    int w = frame.intrinsics.width, h = frame.intrinsics.height;
    for (int l = 1; l < n_levels; ++l) {
      w /= 2;
      h /= 2;
    }
    if (w < 8 || h < 8)
      throw InvalidArgument("build_pyramid: too many levels, top level smaller than 8x8");
  }

  Pyramid pyr;
  pyr.convention = frame.convention;
  pyr.timestamp = frame.timestamp;
  pyr.levels.resize(n_levels);
  pyr.levels[0].intensity = frame.intensity;
  pyr.levels[0].depth = frame.depth;
  pyr.levels[0].intrinsics = frame.intrinsics;

  for (int l = 1; l < n_levels; ++l) {
    const PyramidLevel& src = pyr.levels[l - 1];
    PyramidLevel& dst = pyr.levels[l];
    const int w = src.intensity.width() / 2;
    const int h = src.intensity.height() / 2;
    dst.intensity = RasterF(w, h);
    dst.depth = RasterF(w, h);
    dst.intrinsics = frame.intrinsics.scaled(l);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const int sx = 2 * x, sy = 2 * y;
        dst.intensity(x, y) = 0.25f * (src.intensity(sx, sy) + src.intensity(sx + 1, sy) +
                                       src.intensity(sx, sy + 1) + src.intensity(sx + 1, sy + 1));
        float best = 0.f;
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            const float d = src.depth(sx + dx, sy + dy);
            if (d > 0.f && (best == 0.f || d < best)) best = d;
          }
        }
        dst.depth(x, y) = best;
      }
    }
  }
  return pyr;
}

// ---------------------------------------------------------------------------
// Normals

// Per-pixel unit surface normals from backprojected depth, oriented toward
// the camera (n . p < 0). A pixel is valid only when it and its four direct
// neighbors all carry depth.
struct NormalMap {
  int width = 0;
  int height = 0;
  std::vector<Eigen::Vector3d> normals;
  std::vector<std::uint8_t> valid;

  bool is_valid(int x, int y) const {
    return x >= 0 && y >= 0 && x < width && y < height &&
           valid[static_cast<std::size_t>(y) * width + x] != 0;
  }
  const Eigen::Vector3d& normal(int x, int y) const {
    return normals[static_cast<std::size_t>(y) * width + x];
  }
};

inline NormalMap compute_normals(const RgbdFrame& frame) {
  const RasterF& depth = frame.depth;
  NormalMap out;
  out.width = depth.width();
  out.height = depth.height();
  out.normals.assign(depth.size(), Eigen::Vector3d::Zero());
  out.valid.assign(depth.size(), 0);

  for (int y = 1; y < depth.height() - 1; ++y) {
    for (int x = 1; x < depth.width() - 1; ++x) {
      const float dc = depth(x, y);
      const float dl = depth(x - 1, y), dr = depth(x + 1, y);
      const float du = depth(x, y - 1), dd = depth(x, y + 1);
      if (dc <= 0.f || dl <= 0.f || dr <= 0.f || du <= 0.f || dd <= 0.f) continue;

      const Point3 pc = backproject(Pixel(x, y), dc, frame.intrinsics, frame.convention);
      const Point3 px = backproject(Pixel(x + 1, y), dr, frame.intrinsics, frame.convention) -
                        backproject(Pixel(x - 1, y), dl, frame.intrinsics, frame.convention);
      const Point3 py = backproject(Pixel(x, y + 1), dd, frame.intrinsics, frame.convention) -
                        backproject(Pixel(x, y - 1), du, frame.intrinsics, frame.convention);
      Eigen::Vector3d n = px.cross(py);
      const double nrm = n.norm();
      if (nrm < 1e-12) continue;
      n /= nrm;
      if (n.dot(pc) > 0.0) n = -n;
      const std::size_t idx = static_cast<std::size_t>(y) * out.width + x;
      out.normals[idx] = n;
      out.valid[idx] = 1;
    }
  }
  return out;
}

}  // namespace rgbdo::geom
