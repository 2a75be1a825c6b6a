#include "rgbdo/synthetic.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "rgbdo/geometry.hpp"
#include "rgbdo/lie.hpp"

namespace {

using namespace rgbdo;

geom::CameraIntrinsics small_camera() {
  geom::CameraIntrinsics k;
  k.fx = k.fy = 120.0;
  k.u0 = 79.5;
  k.v0 = 59.5;
  k.width = 160;
  k.height = 120;
  return k;
}

synth::Scene test_room() { return synth::box_room({-3, -2, -1.5}, {3, 2, 1.5}, 5); }

TEST(Synth, WallRayParameterIsZDepth) {
  const synth::Scene scene = synth::planar_wall(2.0);
  const geom::CameraIntrinsics k = small_camera();
  const lie::Pose eye = lie::Pose::Identity();

  // Every pixel of a fronto-parallel wall has the same camera Z.
  for (const auto& [u, v] : {std::pair{79.5, 59.5}, {0.0, 0.0}, {159.0, 119.0}, {20.0, 90.0}}) {
    const auto hit = synth::raycast(scene, eye, k, u, v);
    ASSERT_TRUE(hit.has_value());
    EXPECT_NEAR(hit->z, 2.0, 1e-12);
    EXPECT_EQ(hit->patch, 0);
    EXPECT_NEAR(hit->point_world.z(), 2.0, 1e-12);
  }
}

TEST(Synth, RaycastMissesOutsidePatch) {
  synth::Scene scene;
  synth::Patch p;
  p.origin = lie::Vec3(-0.1, -0.1, 1.0);
  p.edge_u = lie::Vec3(0.2, 0, 0);
  p.edge_v = lie::Vec3(0, 0.2, 0);
  scene.patches.push_back(p);
  const geom::CameraIntrinsics k = small_camera();

  EXPECT_TRUE(synth::raycast(scene, lie::Pose::Identity(), k, 79.5, 59.5).has_value());
  // A ray far off axis passes beyond the small patch.
  EXPECT_FALSE(synth::raycast(scene, lie::Pose::Identity(), k, 0.0, 0.0).has_value());
}

TEST(Synth, NearestPatchWins) {
  synth::Scene scene = synth::planar_wall(3.0);
  synth::Patch near;
  near.origin = lie::Vec3(-1, -1, 1.5);
  near.edge_u = lie::Vec3(2, 0, 0);
  near.edge_v = lie::Vec3(0, 2, 0);
  scene.patches.push_back(near);
  const auto hit = synth::raycast(scene, lie::Pose::Identity(), small_camera(), 79.5, 59.5);
  ASSERT_TRUE(hit.has_value());
  EXPECT_EQ(hit->patch, 1);
  EXPECT_NEAR(hit->z, 1.5, 1e-12);
}

TEST(Synth, PatchBehindCameraIsIgnored) {
  const synth::Scene scene = synth::planar_wall(-1.0);  // behind the camera
  EXPECT_FALSE(synth::raycast(scene, lie::Pose::Identity(), small_camera(), 79.5, 59.5));
}

TEST(Synth, BoxRoomCoversEveryPixel) {
  const synth::Scene scene = test_room();
  const geom::CameraIntrinsics k = small_camera();
  const geom::RgbdFrame frame = synth::render(scene, lie::Pose::Identity(), k, 0.5);
  EXPECT_EQ(frame.timestamp, 0.5);
  int invalid = 0;
  for (int y = 0; y < k.height; ++y)
    for (int x = 0; x < k.width; ++x) {
      if (frame.depth(x, y) <= 0.f) ++invalid;
      EXPECT_GE(frame.intensity(x, y), 0.f);
      EXPECT_LE(frame.intensity(x, y), 1.f);
    }
  EXPECT_EQ(invalid, 0);
}

TEST(Synth, RenderedDepthBackprojectsOntoTheScene) {
  // The consistency check that everything downstream rests on: backprojecting
  // a rendered depth pixel and mapping it to the world must land on the same
  // surface point the ray hit. Depth is stored as float, hence the 1e-6 m.
  const synth::Scene scene = test_room();
  const geom::CameraIntrinsics k = small_camera();
  lie::Pose pose;
  pose.R = lie::exp_so3(lie::Vec3(0.1, 0.4, -0.05));
  pose.t = lie::Vec3(0.4, -0.3, 0.2);
  const geom::RgbdFrame frame = synth::render(scene, pose, k, 0.0);

  for (int y = 2; y < k.height; y += 13) {
    for (int x = 3; x < k.width; x += 17) {
      const float d = frame.depth(x, y);
      ASSERT_GT(d, 0.f);
      const geom::Point3 p_cam =
          geom::backproject(geom::Pixel(x, y), d, k, geom::DepthConvention::kZDepth);
      const lie::Vec3 p_world = lie::act(pose, p_cam);
      const auto hit = synth::raycast(scene, pose, k, x, y);
      ASSERT_TRUE(hit.has_value());
      EXPECT_LT((p_world - hit->point_world).norm(), 1e-6)
          << "pixel (" << x << ", " << y << ")";
    }
  }
}

TEST(Synth, TextureHasSpatialStructure) {
  const synth::Scene scene = synth::planar_wall(2.0);
  const geom::RgbdFrame frame =
      synth::render(scene, lie::Pose::Identity(), small_camera(), 0.0);
  // Mean absolute horizontal gradient should be clearly nonzero: flat
  // texture would break photometric alignment everywhere.
  double grad_sum = 0.0;
  int n = 0;
  for (int y = 0; y < frame.intensity.height(); ++y)
    for (int x = 1; x < frame.intensity.width(); ++x) {
      grad_sum += std::abs(frame.intensity(x, y) - frame.intensity(x - 1, y));
      ++n;
    }
  EXPECT_GT(grad_sum / n, 1e-3);

  // And intensities stay inside the clamp range.
  for (int y = 0; y < frame.intensity.height(); ++y)
    for (int x = 0; x < frame.intensity.width(); ++x) {
      ASSERT_GE(frame.intensity(x, y), 0.02f - 1e-6f);
      ASSERT_LE(frame.intensity(x, y), 0.98f + 1e-6f);
    }
}

TEST(Synth, EmptyViewIsAnError) {
  const synth::Scene scene = synth::planar_wall(2.0);
  lie::Pose away;
  away.R = lie::exp_so3(lie::Vec3(0, std::numbers::pi, 0));  // look at -z
  away.t = lie::Vec3::Zero();
  EXPECT_THROW(synth::render(scene, away, small_camera(), 3.25), Error);
  try {
    synth::render(scene, away, small_camera(), 3.25);
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("3.25"), std::string::npos);
  }
}

TEST(Synth, PoseInterpolationEndpointsAndMidpoint) {
  lie::Pose a = lie::Pose::Identity();
  lie::Pose b;
  b.R = lie::exp_so3(lie::Vec3(0, 0, std::numbers::pi / 2));
  b.t = lie::Vec3(1, 2, 3);

  const lie::Pose at0 = synth::interpolate_pose(a, b, 0.0);
  const lie::Pose at1 = synth::interpolate_pose(a, b, 1.0);
  EXPECT_LT(lie::rotation_angle(at0.R.transpose() * a.R), 1e-12);
  EXPECT_LT((at1.t - b.t).norm(), 1e-12);
  EXPECT_LT(lie::rotation_angle(at1.R.transpose() * b.R), 1e-12);

  const lie::Pose mid = synth::interpolate_pose(a, b, 0.5);
  EXPECT_NEAR(lie::rotation_angle(mid.R), std::numbers::pi / 4, 1e-12);
  EXPECT_LT((mid.t - lie::Vec3(0.5, 1.0, 1.5)).norm(), 1e-12);
}

TEST(Synth, WaypointPathHitsWaypoints) {
  synth::WaypointPath path;
  for (int i = 0; i < 4; ++i) {
    lie::Pose p;
    p.R = lie::exp_so3(lie::Vec3(0, 0, 0.3 * i));
    p.t = lie::Vec3(i, -i, 0.5 * i);
    path.waypoints.push_back(p);
  }
  for (int i = 0; i < 4; ++i) {
    const lie::Pose s = path.sample(i / 3.0);
    EXPECT_LT(lie::rotation_angle(s.R.transpose() * path.waypoints[i].R), 1e-9);
    EXPECT_LT((s.t - path.waypoints[i].t).norm(), 1e-9);
  }
  // Clamping outside [0, 1].
  EXPECT_LT((path.sample(-1.0).t - path.waypoints[0].t).norm(), 1e-12);
  EXPECT_LT((path.sample(2.0).t - path.waypoints[3].t).norm(), 1e-12);
}

TEST(Synth, SequenceIsDeterministicUnderSeed) {
  const synth::Scene scene = test_room();
  synth::WaypointPath path;
  path.waypoints.push_back(lie::Pose::Identity());
  lie::Pose end;
  end.R = lie::exp_so3(lie::Vec3(0, 0.2, 0));
  end.t = lie::Vec3(0.3, 0, 0.1);
  path.waypoints.push_back(end);

  synth::NoiseModel noise;
  noise.depth_sigma_base = 0.005;
  noise.intensity_sigma = 0.01;
  noise.depth_dropout = 0.02;

  geom::CameraIntrinsics k = small_camera();
  k.width = 64;
  k.height = 48;
  k.u0 = 31.5;
  k.v0 = 23.5;
  k.fx = k.fy = 60.0;

  const synth::SequenceResult s1 = synth::render_sequence(scene, path, 3, k, 0.1, noise, 99);
  const synth::SequenceResult s2 = synth::render_sequence(scene, path, 3, k, 0.1, noise, 99);
  const synth::SequenceResult s3 = synth::render_sequence(scene, path, 3, k, 0.1, noise, 100);
  ASSERT_EQ(s1.frames.size(), 3u);
  bool any_differs_vs_s3 = false;
  for (int f = 0; f < 3; ++f) {
    EXPECT_NEAR(s1.frames[f].timestamp, 0.1 * f, 1e-12);
    for (int y = 0; y < k.height; ++y)
      for (int x = 0; x < k.width; ++x) {
        ASSERT_EQ(s1.frames[f].depth(x, y), s2.frames[f].depth(x, y));
        ASSERT_EQ(s1.frames[f].intensity(x, y), s2.frames[f].intensity(x, y));
        if (s1.frames[f].depth(x, y) != s3.frames[f].depth(x, y)) any_differs_vs_s3 = true;
      }
  }
  EXPECT_TRUE(any_differs_vs_s3);
}

TEST(Synth, NoiseStatisticsMatchTheModel) {
  const synth::Scene scene = synth::planar_wall(2.0);
  const geom::CameraIntrinsics k = small_camera();
  synth::NoiseModel noise;
  noise.depth_sigma_base = 0.01;
  noise.depth_dropout = 0.1;
  std::mt19937_64 rng(7);
  const geom::RgbdFrame frame = synth::render(scene, lie::Pose::Identity(), k, 0.0, noise, &rng);

  int dropped = 0, kept = 0;
  double sum = 0.0, sum_sq = 0.0;
  for (int y = 0; y < k.height; ++y)
    for (int x = 0; x < k.width; ++x) {
      const float d = frame.depth(x, y);
      if (d <= 0.f) {
        ++dropped;
        continue;
      }
      ++kept;
      const double e = d - 2.0;
      sum += e;
      sum_sq += e * e;
    }
  const double fraction = static_cast<double>(dropped) / (dropped + kept);
  EXPECT_NEAR(fraction, 0.1, 0.02);
  const double mean = sum / kept;
  const double stddev = std::sqrt(sum_sq / kept - mean * mean);
  EXPECT_NEAR(stddev, 0.01, 0.003);
  EXPECT_NEAR(mean, 0.0, 0.002);
}

TEST(Synth, QuadraticDepthNoiseGrowsWithRange) {
  synth::NoiseModel noise;
  noise.depth_sigma_quad = 0.002;
  const geom::CameraIntrinsics k = small_camera();
  auto measure_std = [&](double dist) {
    const synth::Scene scene = synth::planar_wall(dist);
    std::mt19937_64 rng(31);
    const geom::RgbdFrame f = synth::render(scene, lie::Pose::Identity(), k, 0.0, noise, &rng);
    double sum = 0.0, sum_sq = 0.0;
    int n = 0;
    for (int y = 0; y < k.height; ++y)
      for (int x = 0; x < k.width; ++x) {
        if (f.depth(x, y) <= 0.f) continue;
        const double e = f.depth(x, y) - dist;
        sum += e;
        sum_sq += e * e;
        ++n;
      }
    const double mean = sum / n;
    return std::sqrt(sum_sq / n - mean * mean);
  };
  const double s1 = measure_std(1.0);  // sigma = 0.002
  const double s3 = measure_std(3.0);  // sigma = 0.018
  EXPECT_NEAR(s1, 0.002, 0.001);
  EXPECT_NEAR(s3, 0.018, 0.004);
}

TEST(Synth, SceneSaveLoadRoundTrip) {
  const synth::Scene scene = test_room();
  const std::string path = ::testing::TempDir() + "scene.txt";
  synth::save_scene(path, scene);
  const synth::Scene back = synth::load_scene(path);
  ASSERT_EQ(back.patches.size(), scene.patches.size());
  for (std::size_t i = 0; i < scene.patches.size(); ++i) {
    const synth::Patch& a = scene.patches[i];
    const synth::Patch& b = back.patches[i];
    EXPECT_EQ(a.origin, b.origin);
    EXPECT_EQ(a.edge_u, b.edge_u);
    EXPECT_EQ(a.edge_v, b.edge_v);
    EXPECT_EQ(a.base_intensity, b.base_intensity);
    ASSERT_EQ(a.waves.size(), b.waves.size());
    for (std::size_t w = 0; w < a.waves.size(); ++w) {
      EXPECT_EQ(a.waves[w].amplitude, b.waves[w].amplitude);
      EXPECT_EQ(a.waves[w].wavelength_u, b.waves[w].wavelength_u);
      EXPECT_EQ(a.waves[w].wavelength_v, b.waves[w].wavelength_v);
      EXPECT_EQ(a.waves[w].phase, b.waves[w].phase);
    }
  }
}

TEST(Synth, SceneLoadRejectsMalformedInput) {
  const std::string path = ::testing::TempDir() + "scene_bad.txt";
  {
    std::ofstream out(path);
    out << "wave 0.1 0.2 0.3 0.4\n";  // wave before any patch
  }
  try {
    synth::load_scene(path);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line, 1);
  }
}

TEST(Synth, BoxRoomValidatesCorners) {
  EXPECT_THROW(synth::box_room({1, 0, 0}, {0, 1, 1}), InvalidArgument);
}

}  // namespace
