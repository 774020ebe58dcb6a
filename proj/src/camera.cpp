#include "armsight/camera.hpp"

#include <cmath>
#include <string>

namespace armsight::scene {

void CameraModel::validate() const {
  if (!(fx > 0.0 && fy > 0.0)) throw std::invalid_argument("camera focal lengths must be positive");
  if (width <= 0 || height <= 0) throw std::invalid_argument("camera image size must be positive");
  if (!(cx >= 0.0 && cx < width && cy >= 0.0 && cy < height)) {
    throw std::invalid_argument("camera principal point (" + std::to_string(cx) + ", " +
                                std::to_string(cy) + ") outside the image");
  }
  if (!pose.is_rigid(1e-9)) throw std::invalid_argument("camera pose is not a rigid transform");
}

Pixel project(const CameraModel& camera, const Vec3& p) {
  if (!(p.z() > 0.0)) {
    throw BehindCameraError("point at depth " + std::to_string(p.z()) + " is behind the camera");
  }
  return {camera.fx * p.x() / p.z() + camera.cx, camera.fy * p.y() / p.z() + camera.cy};
}

bool in_image(const CameraModel& camera, const Pixel& px) {
  return px.u >= 0.0 && px.v >= 0.0 && px.u < camera.width && px.v < camera.height;
}

Transform look_at(const Vec3& eye, const Vec3& target, const Vec3& up) {
  const Vec3 z = (target - eye).normalized();
  Vec3 x = z.cross(up);
  if (x.norm() < 1e-12) x = z.cross(Vec3::UnitX());
  x.normalize();
  const Vec3 y = z.cross(x);
  Transform t;
  t.rotation.col(0) = x;
  t.rotation.col(1) = y;
  t.rotation.col(2) = z;
  t.translation = eye;
  return t;
}

}  // namespace armsight::scene
