#pragma once

// RGB-D dataset access. Reads the common list-file layout where a sequence
// directory holds rgb.txt and depth.txt ("timestamp filename" per line,
// '#' comments), color/depth PNGs, and optionally groundtruth.txt. Color
// and depth streams are associated by nearest timestamp and exposed behind
// a FrameSource interface that the odometry pipeline can iterate lazily.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "rgbdo/common.hpp"
#include "rgbdo/geometry.hpp"
#include "rgbdo/png_io.hpp"
#include "rgbdo/trajectory.hpp"

namespace rgbdo::io {

struct TimedPath {
  double timestamp = 0.0;
  std::string path;
};

inline std::vector<TimedPath> read_list_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("read_list_file: cannot open " + path);
  std::vector<TimedPath> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ss(line);
    TimedPath entry;
    if (!(ss >> entry.timestamp >> entry.path))
      throw ParseError("read_list_file: malformed line in " + path, line_no);
    out.push_back(std::move(entry));
  }
  return out;
}

struct AssociatedFrame {
  double timestamp = 0.0;  // color timestamp, used as the frame time
  double depth_timestamp = 0.0;
  std::string color_path;
  std::string depth_path;
};

// Pairs color and depth entries with the globally-greedy nearest-timestamp
// rule from associate_by_time; unmatched entries on either side are dropped.
inline std::vector<AssociatedFrame> associate_frames(const std::vector<TimedPath>& color,
                                                     const std::vector<TimedPath>& depth,
                                                     double max_dt = 0.02) {
  std::vector<double> t_color(color.size()), t_depth(depth.size());
  for (std::size_t i = 0; i < color.size(); ++i) t_color[i] = color[i].timestamp;
  for (std::size_t i = 0; i < depth.size(); ++i) t_depth[i] = depth[i].timestamp;
  const auto matches = associate_by_time(t_color, t_depth, max_dt);

  std::vector<AssociatedFrame> out;
  out.reserve(matches.size());
  for (const auto& [i, j] : matches) {
    AssociatedFrame f;
    f.timestamp = color[i].timestamp;
    f.depth_timestamp = depth[j].timestamp;
    f.color_path = color[i].path;
    f.depth_path = depth[j].path;
    out.push_back(std::move(f));
  }
  return out;
}

// Sequential access to an RGB-D sequence. Implementations may load frames
// lazily; frame(i) must be callable in any order and is expected to return
// the same data for the same index every time.
class FrameSource {
 public:
  virtual ~FrameSource() = default;
  virtual int size() const = 0;
  virtual geom::RgbdFrame frame(int index) const = 0;
};

class MemorySource final : public FrameSource {
 public:
  explicit MemorySource(std::vector<geom::RgbdFrame> frames) : frames_(std::move(frames)) {}

  int size() const override { return static_cast<int>(frames_.size()); }
  geom::RgbdFrame frame(int index) const override { return frames_.at(index); }

 private:
  std::vector<geom::RgbdFrame> frames_;
};

struct DatasetOptions {
  geom::CameraIntrinsics intrinsics;  // defaulted to the common 640x480 RGB-D camera
  double depth_scale = kDepthScale;
  double max_association_dt = 0.02;

  DatasetOptions() {
    intrinsics.fx = 525.0;
    intrinsics.fy = 525.0;
    intrinsics.u0 = 319.5;
    intrinsics.v0 = 239.5;
    intrinsics.width = 640;
    intrinsics.height = 480;
  }
};

// Lazily loads an associated color/depth sequence from a dataset directory.
class DirectorySource final : public FrameSource {
 public:
  DirectorySource(std::string root, const DatasetOptions& options = {})
      : root_(std::move(root)), options_(options) {
    const auto color = read_list_file(root_ + "/rgb.txt");
    const auto depth = read_list_file(root_ + "/depth.txt");
    frames_ = associate_frames(color, depth, options_.max_association_dt);
    if (frames_.empty())
      throw EmptySequenceError("DirectorySource: no associated color/depth pairs in " + root_);
  }

  int size() const override { return static_cast<int>(frames_.size()); }

  geom::RgbdFrame frame(int index) const override {
    const AssociatedFrame& f = frames_.at(index);
    RasterRgb color = read_png_rgb8(root_ + "/" + f.color_path);
    const RasterU16 raw = read_png_gray16(root_ + "/" + f.depth_path);
    RasterF depth = raw_to_depth(raw, options_.depth_scale);
    return geom::RgbdFrame::FromColor(f.timestamp, std::move(color), std::move(depth),
                                      options_.intrinsics, geom::DepthConvention::kZDepth);
  }

  const std::vector<AssociatedFrame>& associations() const { return frames_; }

  // Ground truth camera-to-world trajectory, when present in the directory.
  Trajectory ground_truth() const { return read_trajectory(root_ + "/groundtruth.txt"); }

 private:
  std::string root_;
  DatasetOptions options_;
  std::vector<AssociatedFrame> frames_;
};

// Camera calibration sidecar: one line "fx fy u0 v0 width height".
inline geom::CameraIntrinsics read_intrinsics_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("read_intrinsics_file: cannot open " + path);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ss(line);
    geom::CameraIntrinsics k;
    if (!(ss >> k.fx >> k.fy >> k.u0 >> k.v0 >> k.width >> k.height))
      throw ParseError("read_intrinsics_file: expected 'fx fy u0 v0 width height'", line_no);
    return k;
  }
  throw ParseError("read_intrinsics_file: no calibration line in " + path);
}

inline void write_intrinsics_file(const std::string& path, const geom::CameraIntrinsics& k) {
  std::ofstream out(path);
  if (!out) throw Error("write_intrinsics_file: cannot open " + path);
  out << "# fx fy u0 v0 width height\n";
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%.9g %.9g %.9g %.9g %d %d\n", k.fx, k.fy, k.u0, k.v0, k.width,
                k.height);
  out << buf;
  if (!out) throw Error("write_intrinsics_file: write failed for " + path);
}

// Writes frames + ground truth as a self-contained sequence directory in the
// list-file layout DirectorySource reads back: rgb/ and depth/ PNGs, rgb.txt,
// depth.txt, groundtruth.txt, and an intrinsics.txt calibration sidecar.
// `poses` are camera-to-world, one per frame. Frames without color data get
// their intensity channel replicated into a gray RGB image.
inline void write_sequence_directory(const std::string& root,
                                     const std::vector<geom::RgbdFrame>& frames,
                                     const std::vector<lie::Pose>& poses,
                                     double depth_scale = kDepthScale) {
  if (frames.empty()) throw EmptySequenceError("write_sequence_directory: no frames");
  if (frames.size() != poses.size())
    throw InvalidArgument("write_sequence_directory: frame/pose count mismatch");

  namespace fs = std::filesystem;
  fs::create_directories(fs::path(root) / "rgb");
  fs::create_directories(fs::path(root) / "depth");

  std::ofstream rgb_list(root + "/rgb.txt");
  std::ofstream depth_list(root + "/depth.txt");
  if (!rgb_list || !depth_list)
    throw Error("write_sequence_directory: cannot open list files in " + root);
  rgb_list << "# timestamp filename\n";
  depth_list << "# timestamp filename\n";

  Trajectory gt;
  gt.reserve(frames.size());
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const geom::RgbdFrame& f = frames[i];
    char stamp[48];
    std::snprintf(stamp, sizeof(stamp), "%.6f", f.timestamp);

    RasterRgb color = f.color;
    if (color.empty()) {
      color = RasterRgb(f.intensity.width(), f.intensity.height());
      for (int y = 0; y < f.intensity.height(); ++y)
        for (int x = 0; x < f.intensity.width(); ++x) {
          const float v = f.intensity(x, y);
          color(x, y) = Rgb{v, v, v};
        }
    }
    const std::string rgb_name = std::string("rgb/") + stamp + ".png";
    const std::string depth_name = std::string("depth/") + stamp + ".png";
    write_png_rgb8(root + "/" + rgb_name, color);
    write_png_gray16(root + "/" + depth_name, depth_to_raw(f.depth, depth_scale));
    rgb_list << stamp << " " << rgb_name << "\n";
    depth_list << stamp << " " << depth_name << "\n";
    gt.push_back({f.timestamp, poses[i]});
  }
  if (!rgb_list || !depth_list)
    throw Error("write_sequence_directory: write failed for list files in " + root);

  write_trajectory(root + "/groundtruth.txt", gt);
  write_intrinsics_file(root + "/intrinsics.txt", frames.front().intrinsics);
}

}  // namespace rgbdo::io
