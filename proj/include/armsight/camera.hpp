#pragma once

#include <stdexcept>

#include "armsight/geometry.hpp"

namespace armsight::scene {

/// Pinhole camera. Camera frame: x right, y down, z forward. `pose` maps camera
/// coordinates to world coordinates.
struct CameraModel {
  double fx = 0.0, fy = 0.0, cx = 0.0, cy = 0.0;
  int width = 0, height = 0;
  Transform pose;

  void validate() const;
  Vec3 world_to_camera(const Vec3& p_world) const { return pose.inverse().apply(p_world); }
};

struct Pixel {
  double u = 0.0;
  double v = 0.0;
};

class BehindCameraError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// u = fx*x/z + cx, v = fy*y/z + cy. Pixel (i, j) covers [i, i+1) x [j, j+1).
Pixel project(const CameraModel& camera, const Vec3& point_cam);

bool in_image(const CameraModel& camera, const Pixel& px);

/// Camera-to-world pose at `eye` looking at `target`; image rows run against `up`.
Transform look_at(const Vec3& eye, const Vec3& target, const Vec3& up = Vec3::UnitZ());

}  // namespace armsight::scene
