#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>

#include "armsight/camera.hpp"
#include "armsight/image.hpp"
#include "armsight/robot.hpp"

namespace armsight::scene {

/// Procedural clutter behind the robot.
struct BackgroundSpec {
  int min_shapes = 4;
  int max_shapes = 14;
  double noise_amplitude = 5.0;  // ± intensity levels, uniform per pixel
  double distractor_probability = 0.35;
  int max_distractors = 2;
};

/// Everything that determines the robot-free image. Two renders that share a
/// SceneBackground produce bit-identical background pixels.
struct SceneBackground {
  BackgroundSpec spec;
  std::uint64_t seed = 0;
  /// Distractor capsules are placed at camera depth >= this value.
  double distractor_min_depth = 4.0;
};

/// Directional light in the camera frame; `direction` points toward the light.
struct Lighting {
  Vec3 direction = Vec3(0.3, -0.5, -0.8).normalized();
  double ambient = 0.35;
};

struct RenderResult {
  RgbImage image;
  Mask mask;
};

class DegenerateSampleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Nearest positive ray parameter at which the ray o + t*d (|d| = 1) enters
/// the capsule with axis [a, b] and radius r.
std::optional<double> ray_capsule(const Vec3& o, const Vec3& d, const Vec3& a, const Vec3& b,
                                  double r);

/// Unit ray direction through the center of pixel (x, y), camera frame.
Vec3 pixel_ray(const CameraModel& camera, int x, int y);

Lighting random_lighting(std::mt19937_64& rng);

RgbImage render_background(const CameraModel& camera, const SceneBackground& background,
                           const Lighting& light);

/// Mask of pixels whose ray hits any of the world-frame capsules.
Mask render_mask(std::span<const PosedCapsule> capsules, const CameraModel& camera);

/// Background plus shaded capsules; mask is the any-hit set of `capsules`.
RenderResult render_capsules(std::span<const PosedCapsule> capsules, const CameraModel& camera,
                             const SceneBackground& background, const Lighting& light);

/// Renders the robot at `angles`. Throws DegenerateSampleError when the base
/// does not project into the image or no robot pixel is visible.
RenderResult render(const RobotModel& model, std::span<const double> angles,
                    const CameraModel& camera, const SceneBackground& background,
                    const Lighting& light);

}  // namespace armsight::scene
