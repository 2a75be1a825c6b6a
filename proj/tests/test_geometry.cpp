#include "rgbdo/geometry.hpp"

#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace rgbdo;
using geom::CameraIntrinsics;
using geom::DepthConvention;
using geom::Pixel;
using geom::Point3;
using geom::RgbdFrame;

namespace {

CameraIntrinsics test_intrinsics() { return CameraIntrinsics(500, 500, 320, 240, 640, 480); }

RgbdFrame constant_depth_frame(const CameraIntrinsics& k, float depth_value) {
  RasterF intensity(k.width, k.height, 0.5f);
  RasterF depth(k.width, k.height, depth_value);
  return RgbdFrame::FromIntensity(0.0, std::move(intensity), std::move(depth), k,
                                  DepthConvention::kZDepth);
}

}  // namespace

TEST(Geometry, IntrinsicsValidation) {
  EXPECT_NO_THROW(test_intrinsics());
  EXPECT_THROW(CameraIntrinsics(-500, 500, 320, 240, 640, 480), InvalidArgument);
  EXPECT_THROW(CameraIntrinsics(500, 0, 320, 240, 640, 480), InvalidArgument);
  EXPECT_THROW(CameraIntrinsics(500, 500, 700, 240, 640, 480), InvalidArgument);
  EXPECT_THROW(CameraIntrinsics(500, 500, 320, 240, 0, 480), InvalidArgument);
}

TEST(Geometry, ProjectKnownPoint) {
  const Pixel p = geom::project(Point3(0.5, -0.25, 2.0), test_intrinsics());
  EXPECT_DOUBLE_EQ(p.u, 445.0);
  EXPECT_DOUBLE_EQ(p.v, 177.5);
}

TEST(Geometry, ProjectRejectsNonPositiveDepth) {
  EXPECT_THROW(geom::project(Point3(0, 0, 0), test_intrinsics()), BehindCameraError);
  EXPECT_THROW(geom::project(Point3(0, 0, -1), test_intrinsics()), BehindCameraError);
}

TEST(Geometry, BackprojectConventionsDiffer) {
  const CameraIntrinsics k = test_intrinsics();
  const Pixel p(445, 177.5);
  const Point3 z = geom::backproject(p, 2.0, k, DepthConvention::kZDepth);
  EXPECT_LT((z - Point3(0.5, -0.25, 2.0)).norm(), 1e-12);

  const Point3 r = geom::backproject(p, 2.0, k, DepthConvention::kRayLength);
  EXPECT_NEAR(r.norm(), 2.0, 1e-12);          // ray-length depth is the point range
  EXPECT_LT((r.normalized() - z.normalized()).norm(), 1e-12);  // same viewing ray
  EXPECT_GT((r - z).norm(), 1e-3);            // but a different point
}

TEST(Geometry, BackprojectRejectsInvalidDepth) {
  EXPECT_THROW(geom::backproject(Pixel(100, 100), 0.0, test_intrinsics(),
                                 DepthConvention::kZDepth),
               InvalidDepthError);
}

TEST(Geometry, ProjectBackprojectRoundTrip) {
  const CameraIntrinsics k = test_intrinsics();
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> du(0.0, k.width - 1.0);
  std::uniform_real_distribution<double> dv(0.0, k.height - 1.0);
  std::uniform_real_distribution<double> dd(0.1, 10.0);
  for (int i = 0; i < 1000; ++i) {
    const Pixel p(du(rng), dv(rng));
    const double d = dd(rng);
    for (DepthConvention c : {DepthConvention::kZDepth, DepthConvention::kRayLength}) {
      const Point3 q = geom::backproject(p, d, k, c);
      const Pixel back = geom::project(q, k);
      EXPECT_NEAR(back.u, p.u, 1e-9);
      EXPECT_NEAR(back.v, p.v, 1e-9);
    }
  }
}

TEST(Geometry, ReprojectKnownRotation) {
  const CameraIntrinsics k = test_intrinsics();
  const lie::Pose T(lie::exp_so3(Eigen::Vector3d(0, 0, std::numbers::pi / 2)),
                    Eigen::Vector3d::Zero());
  const geom::Reprojection r =
      geom::reproject(Pixel(445, 177.5), 2.0, T, k, DepthConvention::kZDepth);
  ASSERT_TRUE(r.ok());
  EXPECT_NEAR(r.pixel.u, 382.5, 1e-9);
  EXPECT_NEAR(r.pixel.v, 365.0, 1e-9);
  EXPECT_LT((r.point_target - Point3(0.25, 0.5, 2.0)).norm(), 1e-12);
}

TEST(Geometry, ReprojectStatuses) {
  const CameraIntrinsics k = test_intrinsics();
  const lie::Pose identity;

  EXPECT_EQ(geom::reproject(Pixel(10, 10), 0.0, identity, k, DepthConvention::kZDepth).status,
            geom::ReprojectStatus::kInvalidDepth);

  // Push the point behind the camera.
  const lie::Pose behind(lie::Mat3::Identity(), Eigen::Vector3d(0, 0, -5));
  EXPECT_EQ(geom::reproject(Pixel(320, 240), 2.0, behind, k, DepthConvention::kZDepth).status,
            geom::ReprojectStatus::kBehindCamera);

  // Large lateral shift throws the projection far outside the image.
  const lie::Pose aside(lie::Mat3::Identity(), Eigen::Vector3d(50, 0, 0));
  EXPECT_EQ(geom::reproject(Pixel(320, 240), 2.0, aside, k, DepthConvention::kZDepth).status,
            geom::ReprojectStatus::kOutOfView);

  EXPECT_EQ(geom::reproject(Pixel(320, 240), 2.0, identity, k, DepthConvention::kZDepth).status,
            geom::ReprojectStatus::kOk);
}

TEST(Geometry, ReprojectIdentityIsIdentity) {
  const CameraIntrinsics k = test_intrinsics();
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> du(1.0, k.width - 2.0);
  std::uniform_real_distribution<double> dv(1.0, k.height - 2.0);
  for (int i = 0; i < 200; ++i) {
    const Pixel p(du(rng), dv(rng));
    const geom::Reprojection r =
        geom::reproject(p, 2.0, lie::Pose(), k, DepthConvention::kRayLength);
    ASSERT_TRUE(r.ok());
    EXPECT_NEAR(r.pixel.u, p.u, 1e-9);
    EXPECT_NEAR(r.pixel.v, p.v, 1e-9);
  }
}

TEST(Geometry, BilinearSampleExactAtIntegerPixels) {
  RasterF img(4, 3);
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 4; ++x) img(x, y) = static_cast<float>(10 * y + x);
  for (int y = 0; y < 3; ++y) {
    for (int x = 0; x < 4; ++x) {
      const auto s = geom::sample_bilinear(img, Pixel(x, y));
      ASSERT_TRUE(s.has_value());
      EXPECT_DOUBLE_EQ(*s, img(x, y));
    }
  }
}

TEST(Geometry, BilinearSampleLinearRamp) {
  RasterF img(16, 16);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) img(x, y) = static_cast<float>(0.5 * x - 0.25 * y + 3.0);
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> d(0.0, 15.0);
  for (int i = 0; i < 500; ++i) {
    const double u = d(rng), v = d(rng);
    const auto s = geom::sample_bilinear(img, Pixel(u, v));
    ASSERT_TRUE(s.has_value());
    EXPECT_NEAR(*s, 0.5 * u - 0.25 * v + 3.0, 1e-5);
  }
}

TEST(Geometry, BilinearSampleOutOfBounds) {
  RasterF img(4, 4, 1.f);
  EXPECT_FALSE(geom::sample_bilinear(img, Pixel(-0.01, 1)).has_value());
  EXPECT_FALSE(geom::sample_bilinear(img, Pixel(3.01, 1)).has_value());
  EXPECT_FALSE(geom::sample_bilinear(img, Pixel(1, -1)).has_value());
  EXPECT_FALSE(geom::sample_bilinear(img, Pixel(1, 3.5)).has_value());
  EXPECT_TRUE(geom::sample_bilinear(img, Pixel(3.0, 3.0)).has_value());
}

TEST(Geometry, GradientOfLinearRamp) {
  RasterF img(32, 32);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) img(x, y) = static_cast<float>(0.125 * x + 0.0625 * y);
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> d(1.0, 30.0);
  for (int i = 0; i < 200; ++i) {
    const auto g = geom::sample_gradient(img, Pixel(d(rng), d(rng)));
    ASSERT_TRUE(g.has_value());
    EXPECT_NEAR(g->x(), 0.125, 1e-6);
    EXPECT_NEAR(g->y(), 0.0625, 1e-6);
  }
}

TEST(Geometry, GradientNearBorderIsRejected) {
  RasterF img(8, 8, 0.f);
  EXPECT_FALSE(geom::sample_gradient(img, Pixel(0.2, 4)).has_value());
  EXPECT_TRUE(geom::sample_gradient(img, Pixel(0.5, 4)).has_value());
}

TEST(Geometry, FrameLumaWeights) {
  const CameraIntrinsics k(100, 100, 8, 8, 16, 16);
  RasterRgb color(16, 16, Rgb{1.f, 0.f, 0.f});
  color(1, 0) = Rgb{0.f, 1.f, 0.f};
  color(2, 0) = Rgb{0.f, 0.f, 1.f};
  RasterF depth(16, 16, 1.f);
  const RgbdFrame f =
      RgbdFrame::FromColor(0.0, color, depth, k, DepthConvention::kZDepth);
  EXPECT_NEAR(f.intensity(0, 0), 0.299f, 1e-6);
  EXPECT_NEAR(f.intensity(1, 0), 0.587f, 1e-6);
  EXPECT_NEAR(f.intensity(2, 0), 0.114f, 1e-6);
}

TEST(Geometry, FrameDimensionValidation) {
  const CameraIntrinsics k(100, 100, 8, 8, 16, 16);
  RasterF intensity(16, 16, 0.f);
  RasterF bad_depth(8, 8, 1.f);
  EXPECT_THROW(RgbdFrame::FromIntensity(0.0, intensity, bad_depth, k, DepthConvention::kZDepth),
               InvalidArgument);
}

TEST(Geometry, PyramidDimensionsAndIntrinsics) {
  const CameraIntrinsics k = test_intrinsics();
  const RgbdFrame f = constant_depth_frame(k, 2.f);
  const geom::Pyramid pyr = geom::build_pyramid(f, 4);
  ASSERT_EQ(pyr.level_count(), 4);
  EXPECT_EQ(pyr.level(0).intensity.width(), 640);
  EXPECT_EQ(pyr.level(1).intensity.width(), 320);
  EXPECT_EQ(pyr.level(2).intensity.width(), 160);
  EXPECT_EQ(pyr.level(3).intensity.width(), 80);
  EXPECT_EQ(pyr.level(3).intensity.height(), 60);
  EXPECT_DOUBLE_EQ(pyr.level(2).intrinsics.fx, 125.0);
  EXPECT_DOUBLE_EQ(pyr.level(2).intrinsics.u0, 80.0);
  EXPECT_DOUBLE_EQ(pyr.level(2).intrinsics.v0, 60.0);
}

TEST(Geometry, PyramidIntensityIsBlockAverage) {
  const CameraIntrinsics k(100, 100, 8, 8, 16, 16);
  RasterF intensity(16, 16);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) intensity(x, y) = static_cast<float>((x + 16 * y) % 7) / 7.f;
  RasterF depth(16, 16, 1.f);
  const RgbdFrame f =
      RgbdFrame::FromIntensity(0.0, intensity, depth, k, DepthConvention::kZDepth);
  const geom::Pyramid pyr = geom::build_pyramid(f, 2);
  for (int y = 0; y < 8; ++y) {
    for (int x = 0; x < 8; ++x) {
      const float expect = 0.25f * (intensity(2 * x, 2 * y) + intensity(2 * x + 1, 2 * y) +
                                    intensity(2 * x, 2 * y + 1) + intensity(2 * x + 1, 2 * y + 1));
      EXPECT_NEAR(pyr.level(1).intensity(x, y), expect, 1e-6);
    }
  }
}

TEST(Geometry, PyramidDepthNeverAveragesAcrossHoles) {
  const CameraIntrinsics k(100, 100, 8, 8, 16, 16);
  RasterF intensity(16, 16, 0.5f);
  RasterF depth(16, 16, 0.f);
  // One block mixing a near surface, a far surface and holes: the
  // downsampled value must be simply the closest valid depth, 1.0.
  depth(0, 0) = 1.f;
  depth(1, 0) = 4.f;
  // Fully invalid block stays invalid.
  const RgbdFrame f =
      RgbdFrame::FromIntensity(0.0, intensity, depth, k, DepthConvention::kZDepth);
  const geom::Pyramid pyr = geom::build_pyramid(f, 2);
  EXPECT_FLOAT_EQ(pyr.level(1).depth(0, 0), 1.f);
  EXPECT_FLOAT_EQ(pyr.level(1).depth(3, 3), 0.f);
}

TEST(Geometry, PyramidTooManyLevels) {
  const CameraIntrinsics k(100, 100, 8, 8, 16, 16);
  const RgbdFrame f = constant_depth_frame(k, 1.f);
  EXPECT_NO_THROW(geom::build_pyramid(f, 2));  // top level 8x8 is allowed
  EXPECT_THROW(geom::build_pyramid(f, 3), InvalidArgument);
  EXPECT_THROW(geom::build_pyramid(f, 1, 3.0), InvalidArgument);
}

TEST(Geometry, NormalsOnFrontoParallelPlane) {
  const CameraIntrinsics k(250, 250, 160, 120, 320, 240);
  const RgbdFrame f = constant_depth_frame(k, 2.f);
  const geom::NormalMap nm = geom::compute_normals(f);
  int checked = 0;
  for (int y = 10; y < 230; y += 17) {
    for (int x = 10; x < 310; x += 17) {
      ASSERT_TRUE(nm.is_valid(x, y));
      const Eigen::Vector3d& n = nm.normal(x, y);
      EXPECT_NEAR(n.norm(), 1.0, 1e-12);
      EXPECT_LT((n - Eigen::Vector3d(0, 0, -1)).norm(), 1e-9);
      ++checked;
    }
  }
  EXPECT_GT(checked, 100);
}

TEST(Geometry, NormalsOnTiltedPlane) {
  // Plane x + z = 2 (45 degrees to the optical axis), camera at the origin:
  // along a viewing ray (xh, yh, 1), depth Z solves Z*xh + Z = 2.
  const CameraIntrinsics k(250, 250, 160, 120, 320, 240);
  RasterF intensity(320, 240, 0.5f);
  RasterF depth(320, 240, 0.f);
  for (int y = 0; y < 240; ++y) {
    for (int x = 0; x < 320; ++x) {
      const double xh = (x - k.u0) / k.fx;
      depth(x, y) = static_cast<float>(2.0 / (1.0 + xh));
    }
  }
  const RgbdFrame f =
      RgbdFrame::FromIntensity(0.0, intensity, depth, k, DepthConvention::kZDepth);
  const geom::NormalMap nm = geom::compute_normals(f);
  const Eigen::Vector3d expected = -Eigen::Vector3d(1, 0, 1).normalized();
  for (int y = 20; y < 220; y += 23) {
    for (int x = 20; x < 300; x += 23) {
      ASSERT_TRUE(nm.is_valid(x, y));
      EXPECT_LT((nm.normal(x, y) - expected).norm(), 1e-3);
    }
  }
}

TEST(Geometry, NormalsInvalidNearHolesAndBorders) {
  const CameraIntrinsics k(100, 100, 8, 8, 16, 16);
  RasterF intensity(16, 16, 0.5f);
  RasterF depth(16, 16, 2.f);
  depth(8, 8) = 0.f;
  const RgbdFrame f =
      RgbdFrame::FromIntensity(0.0, intensity, depth, k, DepthConvention::kZDepth);
  const geom::NormalMap nm = geom::compute_normals(f);
  EXPECT_FALSE(nm.is_valid(0, 5));   // border
  EXPECT_FALSE(nm.is_valid(8, 8));   // hole itself
  EXPECT_FALSE(nm.is_valid(7, 8));   // neighbor of the hole
  EXPECT_FALSE(nm.is_valid(8, 9));
  EXPECT_TRUE(nm.is_valid(6, 8));    // two pixels away is fine
}

TEST(Geometry, NormalsAreCameraFacing) {
  const CameraIntrinsics k(250, 250, 160, 120, 320, 240);
  RasterF intensity(320, 240, 0.5f);
  RasterF depth(320, 240, 0.f);
  for (int y = 0; y < 240; ++y)
    for (int x = 0; x < 320; ++x)
      depth(x, y) = static_cast<float>(2.0 + 0.3 * std::sin(0.05 * x) * std::cos(0.04 * y));
  const RgbdFrame f =
      RgbdFrame::FromIntensity(0.0, intensity, depth, k, DepthConvention::kZDepth);
  const geom::NormalMap nm = geom::compute_normals(f);
  for (int y = 1; y < 239; ++y) {
    for (int x = 1; x < 319; ++x) {
      if (!nm.is_valid(x, y)) continue;
      const geom::Point3 p =
          geom::backproject(Pixel(x, y), depth(x, y), k, DepthConvention::kZDepth);
      EXPECT_LT(nm.normal(x, y).dot(p), 0.0);
    }
  }
}
