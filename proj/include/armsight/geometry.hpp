#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace armsight::scene {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Rigid transform; maps points from its local frame into its parent frame.
struct Transform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static Transform identity() { return {}; }
  static Transform from_translation(const Vec3& t) { return {Mat3::Identity(), t}; }
  /// Rotation by `angle` radians about the unit vector `axis`.
  static Transform from_axis_angle(const Vec3& axis, double angle) {
    return {Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix(), Vec3::Zero()};
  }

  Transform operator*(const Transform& rhs) const {
    return {rotation * rhs.rotation, rotation * rhs.translation + translation};
  }
  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
  Vec3 apply_direction(const Vec3& d) const { return rotation * d; }

  Transform inverse() const {
    const Mat3 rt = rotation.transpose();
    return {rt, -(rt * translation)};
  }

  bool is_rigid(double tol = 1e-9) const {
    return (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol &&
           std::abs(rotation.determinant() - 1.0) <= tol;
  }
};

/// Closest distance between segments [p0,p1] and [q0,q1]; handles degenerate
/// (point) segments.
double segment_distance(const Vec3& p0, const Vec3& p1, const Vec3& q0, const Vec3& q1);

/// Closest point on segment [a,b] to p.
Vec3 closest_point_on_segment(const Vec3& p, const Vec3& a, const Vec3& b);

}  // namespace armsight::scene
