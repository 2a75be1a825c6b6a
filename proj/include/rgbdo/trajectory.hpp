#pragma once

// Trajectory text I/O and trajectory error metrics.
//
// File format, one pose per line:
//   timestamp tx ty tz qx qy qz qw
// where the pose maps camera coordinates to world coordinates. Lines
// starting with '#' and blank lines are skipped.

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "rgbdo/common.hpp"
#include "rgbdo/lie.hpp"

namespace rgbdo::io {

struct TrajectoryEntry {
  double timestamp = 0.0;
  lie::Pose pose;  // camera-to-world
};

using Trajectory = std::vector<TrajectoryEntry>;

namespace detail {

// Canonical quaternion for a rotation: normalized, with a deterministic
// sign so that serialization is reproducible across platforms.
inline Eigen::Quaterniond canonical_quaternion(const lie::Mat3& R) {
  Eigen::Quaterniond q(R);
  q.normalize();
  const double comps[4] = {q.w(), q.x(), q.y(), q.z()};
  for (double c : comps) {
    if (c > 0.0) break;
    if (c < 0.0) {
      q.coeffs() = -q.coeffs();
      break;
    }
  }
  return q;
}

}  // namespace detail

inline void write_trajectory(const std::string& path, const Trajectory& trajectory) {
  std::ofstream out(path);
  if (!out) throw Error("write_trajectory: cannot open " + path);
  out << "# timestamp tx ty tz qx qy qz qw\n";
  char line[256];
  for (const TrajectoryEntry& e : trajectory) {
    const Eigen::Quaterniond q = detail::canonical_quaternion(e.pose.R);
    std::snprintf(line, sizeof(line), "%.6f %.9g %.9g %.9g %.9g %.9g %.9g %.9g\n", e.timestamp,
                  e.pose.t.x(), e.pose.t.y(), e.pose.t.z(), q.x(), q.y(), q.z(), q.w());
    out << line;
  }
  if (!out) throw Error("write_trajectory: write failed for " + path);
}

inline Trajectory read_trajectory(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("read_trajectory: cannot open " + path);
  Trajectory out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ss(line);
    TrajectoryEntry e;
    double qx, qy, qz, qw;
    if (!(ss >> e.timestamp >> e.pose.t.x() >> e.pose.t.y() >> e.pose.t.z() >> qx >> qy >> qz >>
          qw))
      throw ParseError("read_trajectory: malformed line in " + path, line_no);
    Eigen::Quaterniond q(qw, qx, qy, qz);
    const double n = q.norm();
    if (!(n > 1e-6)) throw ParseError("read_trajectory: zero quaternion in " + path, line_no);
    q.coeffs() /= n;
    e.pose.R = q.toRotationMatrix();
    out.push_back(e);
  }
  return out;
}

// Greedy timestamp association: all pairs within max_dt are sorted by |dt|
// (ties toward earlier indices) and taken one-shot, so every entry is used
// at most once and the closest pairs win globally.
inline std::vector<std::pair<int, int>> associate_by_time(const std::vector<double>& a,
                                                          const std::vector<double>& b,
                                                          double max_dt = 0.02) {
  struct Candidate {
    double dt;
    int i, j;
  };
  std::vector<Candidate> candidates;
  // Both lists are timestamp streams; a window walk keeps this linear-ish.
  std::size_t lo = 0;
  std::vector<int> order_b(b.size());
  for (std::size_t j = 0; j < b.size(); ++j) order_b[j] = static_cast<int>(j);
  std::sort(order_b.begin(), order_b.end(), [&b](int x, int y) { return b[x] < b[y]; });
  std::vector<double> b_sorted(b.size());
  for (std::size_t j = 0; j < b.size(); ++j) b_sorted[j] = b[order_b[j]];

  std::vector<int> order_a(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) order_a[i] = static_cast<int>(i);
  std::sort(order_a.begin(), order_a.end(), [&a](int x, int y) { return a[x] < a[y]; });

  for (int ia : order_a) {
    const double t = a[ia];
    while (lo < b_sorted.size() && b_sorted[lo] < t - max_dt) ++lo;
    for (std::size_t j = lo; j < b_sorted.size() && b_sorted[j] <= t + max_dt; ++j)
      candidates.push_back({std::abs(b_sorted[j] - t), ia, order_b[j]});
  }
  std::sort(candidates.begin(), candidates.end(), [](const Candidate& x, const Candidate& y) {
    if (x.dt != y.dt) return x.dt < y.dt;
    if (x.i != y.i) return x.i < y.i;
    return x.j < y.j;
  });

  std::vector<char> used_a(a.size(), 0), used_b(b.size(), 0);
  std::vector<std::pair<int, int>> matches;
  for (const Candidate& c : candidates) {
    if (used_a[c.i] || used_b[c.j]) continue;
    used_a[c.i] = used_b[c.j] = 1;
    matches.emplace_back(c.i, c.j);
  }
  std::sort(matches.begin(), matches.end());
  return matches;
}

struct AteResult {
  double rmse = 0.0;
  double mean = 0.0;
  double median = 0.0;
  double max = 0.0;
  int matched = 0;
  lie::Pose alignment;  // applied to the estimate before comparison
};

// Absolute trajectory error: associate by timestamp, rigidly align the
// estimated positions to the reference positions (closed form, no scale),
// then report statistics of the remaining position residuals.
inline AteResult absolute_trajectory_error(const Trajectory& reference, const Trajectory& estimate,
                                           double max_dt = 0.02) {
  std::vector<double> t_ref(reference.size()), t_est(estimate.size());
  for (std::size_t i = 0; i < reference.size(); ++i) t_ref[i] = reference[i].timestamp;
  for (std::size_t i = 0; i < estimate.size(); ++i) t_est[i] = estimate[i].timestamp;
  const auto matches = associate_by_time(t_ref, t_est, max_dt);
  if (matches.size() < 2)
    throw InvalidArgument("absolute_trajectory_error: fewer than 2 matched poses");

  std::vector<lie::Vec3> p_est, p_ref;
  p_est.reserve(matches.size());
  p_ref.reserve(matches.size());
  for (const auto& [i, j] : matches) {
    p_ref.push_back(reference[i].pose.t);
    p_est.push_back(estimate[j].pose.t);
  }
  const lie::PointAlignment alignment = lie::rigid_align_points(p_est, p_ref);

  AteResult result;
  result.alignment = alignment.pose;
  result.matched = static_cast<int>(matches.size());
  std::vector<double> errors(matches.size());
  double sum = 0.0, sum_sq = 0.0;
  for (std::size_t k = 0; k < matches.size(); ++k) {
    const double e = (lie::act(alignment.pose, p_est[k]) - p_ref[k]).norm();
    errors[k] = e;
    sum += e;
    sum_sq += e * e;
    result.max = std::max(result.max, e);
  }
  result.mean = sum / errors.size();
  result.rmse = std::sqrt(sum_sq / errors.size());
  std::nth_element(errors.begin(), errors.begin() + errors.size() / 2, errors.end());
  result.median = errors[errors.size() / 2];
  return result;
}

struct RpeResult {
  double translation_rmse = 0.0;    // meters per step
  double translation_mean = 0.0;
  double translation_median = 0.0;
  double rotation_rmse = 0.0;       // radians per step
  double rotation_mean = 0.0;
  double rotation_median = 0.0;
  int evaluated = 0;
};

// Relative pose error over a fixed step: compares the estimated motion over
// `delta` associated frames against the reference motion over the same
// frames, without any global alignment.
inline RpeResult relative_pose_error(const Trajectory& reference, const Trajectory& estimate,
                                     int delta = 1, double max_dt = 0.02) {
  if (delta < 1) throw InvalidArgument("relative_pose_error: delta must be >= 1");
  std::vector<double> t_ref(reference.size()), t_est(estimate.size());
  for (std::size_t i = 0; i < reference.size(); ++i) t_ref[i] = reference[i].timestamp;
  for (std::size_t i = 0; i < estimate.size(); ++i) t_est[i] = estimate[i].timestamp;
  auto matches = associate_by_time(t_ref, t_est, max_dt);
  if (matches.size() < static_cast<std::size_t>(delta) + 1)
    throw InvalidArgument("relative_pose_error: not enough matched poses for the given delta");

  std::vector<double> errs_t, errs_r;
  for (std::size_t k = 0; k + delta < matches.size(); ++k) {
    const auto& [i0, j0] = matches[k];
    const auto& [i1, j1] = matches[k + delta];
    const lie::Pose ref_motion = lie::compose(lie::inverse(reference[i0].pose), reference[i1].pose);
    const lie::Pose est_motion = lie::compose(lie::inverse(estimate[j0].pose), estimate[j1].pose);
    const lie::Pose err = lie::compose(lie::inverse(ref_motion), est_motion);
    errs_t.push_back(err.t.norm());
    errs_r.push_back(lie::rotation_angle(err.R));
  }

  auto stats = [](std::vector<double>& e, double& rmse, double& mean, double& median) {
    double sum = 0.0, sum_sq = 0.0;
    for (double v : e) {
      sum += v;
      sum_sq += v * v;
    }
    mean = sum / e.size();
    rmse = std::sqrt(sum_sq / e.size());
    std::nth_element(e.begin(), e.begin() + e.size() / 2, e.end());
    median = e[e.size() / 2];
  };
  RpeResult result;
  result.evaluated = static_cast<int>(errs_t.size());
  stats(errs_t, result.translation_rmse, result.translation_mean, result.translation_median);
  stats(errs_r, result.rotation_rmse, result.rotation_mean, result.rotation_median);
  return result;
}

}  // namespace rgbdo::io
