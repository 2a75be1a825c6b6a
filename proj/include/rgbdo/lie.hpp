#pragma once

// SO(3)/SE(3) utilities: hat/vee operators, exponential and logarithm maps,
// pose composition and the left-multiplicative update used by all iterative
// aligners in this library.
//
// Conventions:
//  * Pose maps points as x_out = R * x_in + t.
//  * Twists are ordered [omega, nu]: the three rotation coordinates first,
//    then the three translation coordinates. Jacobian columns follow the
//    same order everywhere.
//  * Iterative solvers update poses on the left: T <- exp(delta) * T.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <Eigen/LU>
#include <Eigen/SVD>

#include "rgbdo/common.hpp"

namespace rgbdo::lie {

using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Vec3 = Eigen::Vector3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat6 = Eigen::Matrix<double, 6, 6>;

// Below this rotation angle the trigonometric coefficient ratios are
// replaced by their second-order Taylor expansions.
inline constexpr double kSmallAngle = 1e-8;
// Within this distance of pi the rotation axis is recovered from the
// symmetric part of R rather than the vanishing antisymmetric part.
inline constexpr double kNearPiAngle = 1e-6;

struct Pose {
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();

  Pose() = default;
  Pose(const Mat3& rotation, const Vec3& translation) : R(rotation), t(translation) {}

  static Pose Identity() { return Pose(); }

  Mat4 matrix() const {
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = R;
    m.topRightCorner<3, 1>() = t;
    return m;
  }
};

struct Twist {
  Vec3 omega = Vec3::Zero();
  Vec3 nu = Vec3::Zero();

  Twist() = default;
  Twist(const Vec3& w, const Vec3& v) : omega(w), nu(v) {}

  static Twist FromVector(const Vec6& xi) {
    return Twist(xi.head<3>(), xi.tail<3>());
  }
  Vec6 vector() const {
    Vec6 xi;
    xi << omega, nu;
    return xi;
  }
  double norm() const { return vector().norm(); }
};

inline Mat3 hat(const Vec3& w) {
  Mat3 m;
  m << 0.0, -w.z(), w.y(),
       w.z(), 0.0, -w.x(),
      -w.y(), w.x(), 0.0;
  return m;
}

// Inverse of hat. The argument must be antisymmetric to 1e-9.
inline Vec3 vee(const Mat3& a) {
  if ((a + a.transpose()).norm() > 1e-9)
    throw InvalidArgument("vee: matrix is not antisymmetric");
  return Vec3(0.5 * (a(2, 1) - a(1, 2)),
              0.5 * (a(0, 2) - a(2, 0)),
              0.5 * (a(1, 0) - a(0, 1)));
}

inline Mat3 exp_so3(const Vec3& omega) {
  const double theta2 = omega.squaredNorm();
  const double theta = std::sqrt(theta2);
  double a, b;  // sin(t)/t and (1-cos(t))/t^2
  if (theta < kSmallAngle) {
    a = 1.0 - theta2 / 6.0;
    b = 0.5 - theta2 / 24.0;
  } else {
    a = std::sin(theta) / theta;
    b = (1.0 - std::cos(theta)) / theta2;
  }
  const Mat3 w = hat(omega);
  return Mat3::Identity() + a * w + b * w * w;
}

inline bool is_rotation(const Mat3& R, double tol = 1e-6) {
  return (R.transpose() * R - Mat3::Identity()).norm() <= tol && R.determinant() > 0.0;
}

// Nearest rotation matrix in the Frobenius sense (polar factor via SVD).
inline Mat3 project_to_so3(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 r = svd.matrixU() * svd.matrixV().transpose();
  if (r.determinant() < 0.0) {
    Mat3 flip = Mat3::Identity();
    flip(2, 2) = -1.0;
    r = svd.matrixU() * flip * svd.matrixV().transpose();
  }
  return r;
}

// Rotation angle in [0, pi].
inline double rotation_angle(const Mat3& R) {
  return std::acos(std::clamp(0.5 * (R.trace() - 1.0), -1.0, 1.0));
}

// Logarithm map of SO(3). Returns omega with ||omega|| <= pi.
inline Vec3 log_so3(const Mat3& R) {
  if (!is_rotation(R)) throw InvalidArgument("log_so3: input is not a rotation matrix");
  const double theta = rotation_angle(R);

  if (theta < kSmallAngle) {
    // R ~ I + hat(omega); theta/sin(theta) ~ 1 + theta^2/6.
    const Mat3 a = 0.5 * (R - R.transpose());
    return Vec3(a(2, 1), a(0, 2), a(1, 0)) * (1.0 + theta * theta / 6.0);
  }

  if (theta > std::numbers::pi - kNearPiAngle) {
    // sin(theta) ~ 0, so (R - R^T) carries no usable direction. Near pi,
    // (R + I)/2 ~ axis * axis^T: read the axis off its dominant column.
    const Mat3 s = 0.5 * (R + Mat3::Identity());
    int j = 0;
    s.diagonal().maxCoeff(&j);
    Vec3 axis = s.col(j);
    const double nrm = axis.norm();
    if (nrm < 1e-12) throw NumericError("log_so3: degenerate axis extraction near pi");
    axis /= nrm;
    // Fix the sign: follow the antisymmetric part while it is measurable,
    // otherwise make the largest-magnitude component positive.
    const Vec3 anti(0.5 * (R(2, 1) - R(1, 2)),
                    0.5 * (R(0, 2) - R(2, 0)),
                    0.5 * (R(1, 0) - R(0, 1)));
    if (anti.norm() > 1e-10) {
      if (anti.dot(axis) < 0.0) axis = -axis;
    } else {
      int m = 0;
      axis.cwiseAbs().maxCoeff(&m);
      if (axis[m] < 0.0) axis = -axis;
    }
    return theta * axis;
  }

  const Mat3 a = R - R.transpose();
  const Vec3 v(a(2, 1), a(0, 2), a(1, 0));
  return (theta / (2.0 * std::sin(theta))) * v;
}

namespace detail {

// V(omega) relating the twist translation to the group translation:
// t = V * nu, with V = I + B*hat(w) + C*hat(w)^2.
inline Mat3 se3_v_matrix(const Vec3& omega) {
  const double theta2 = omega.squaredNorm();
  const double theta = std::sqrt(theta2);
  double b, c;  // (1-cos t)/t^2 and (t-sin t)/t^3
  if (theta < kSmallAngle) {
    b = 0.5 - theta2 / 24.0;
    c = 1.0 / 6.0 - theta2 / 120.0;
  } else {
    b = (1.0 - std::cos(theta)) / theta2;
    c = (theta - std::sin(theta)) / (theta2 * theta);
  }
  const Mat3 w = hat(omega);
  return Mat3::Identity() + b * w + c * w * w;
}

}  // namespace detail

inline Pose exp_se3(const Twist& xi) {
  Pose T;
  T.R = exp_so3(xi.omega);
  T.t = detail::se3_v_matrix(xi.omega) * xi.nu;
  return T;
}

inline Twist log_se3(const Pose& T) {
  Twist xi;
  xi.omega = log_so3(T.R);
  // V is invertible for ||omega|| <= pi; solve instead of forming V^-1.
  xi.nu = detail::se3_v_matrix(xi.omega).partialPivLu().solve(T.t);
  return xi;
}

inline Pose compose(const Pose& a, const Pose& b) {
  return Pose(a.R * b.R, a.R * b.t + a.t);
}

inline Pose inverse(const Pose& T) {
  Mat3 R = T.R;
  // Guard against accumulated drift before transposing as the inverse.
  if ((R.transpose() * R - Mat3::Identity()).norm() > 1e-12) R = project_to_so3(R);
  return Pose(R.transpose(), -(R.transpose() * T.t));
}

inline Vec3 act(const Pose& T, const Vec3& p) { return T.R * p + T.t; }

// Left-multiplicative update T <- exp(delta) * T, re-orthonormalized so
// that repeated updates cannot drift off the manifold.
inline Pose update_left(const Pose& T, const Twist& delta) {
  Pose out = compose(exp_se3(delta), T);
  out.R = project_to_so3(out.R);
  return out;
}

inline Pose update_left(const Pose& T, const Vec6& delta) {
  return update_left(T, Twist::FromVector(delta));
}

// Geodesic distance helpers used by keyframe policies and tests.
inline double translation_distance(const Pose& a, const Pose& b) {
  return (a.t - b.t).norm();
}
inline double rotation_distance(const Pose& a, const Pose& b) {
  return rotation_angle(a.R.transpose() * b.R);
}

// Least-squares rigid alignment of two point clouds (Procrustes, no scale):
// finds T minimizing sum ||dst_k - (R*src_k + t)||^2.
//
// `conditioning` is the ratio of the second to the largest singular value of
// the cross-covariance; callers that require a well-posed rotation (rather
// than any minimizer) should reject small values.
struct PointAlignment {
  Pose pose;
  double conditioning = 0.0;
};

inline PointAlignment rigid_align_points(std::span<const Vec3> src, std::span<const Vec3> dst) {
  if (src.size() != dst.size() || src.empty())
    throw InvalidArgument("rigid_align_points: point lists must be non-empty and equal-sized");
  const double n = static_cast<double>(src.size());
  Vec3 cs = Vec3::Zero(), cd = Vec3::Zero();
  for (const Vec3& p : src) cs += p;
  for (const Vec3& p : dst) cd += p;
  cs /= n;
  cd /= n;
  Mat3 w = Mat3::Zero();
  for (std::size_t k = 0; k < src.size(); ++k) w += (dst[k] - cd) * (src[k] - cs).transpose();
  Eigen::JacobiSVD<Mat3> svd(w, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 s = Mat3::Identity();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0) s(2, 2) = -1.0;
  PointAlignment out;
  out.pose.R = svd.matrixU() * s * svd.matrixV().transpose();
  out.pose.t = cd - out.pose.R * cs;
  const double sv0 = svd.singularValues()(0);
  out.conditioning = sv0 > 0.0 ? svd.singularValues()(1) / sv0 : 0.0;
  return out;
}

}  // namespace rgbdo::lie
