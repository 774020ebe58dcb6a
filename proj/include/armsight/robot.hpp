#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "armsight/geometry.hpp"

namespace armsight::scene {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  bool operator==(const Rgb&) const = default;
};

struct JointLimits {
  double min = 0.0;
  double max = 0.0;
};

/// Revolute joint. The joint rotates about `axis` (expressed in the previous
/// joint frame) and then applies the fixed `origin` offset, so the frame of
/// joint i is T_i = T_{i-1} * rot(axis_i, q_i) * origin_i and its translation
/// is the distal end of the link driven by joint i.
struct Joint {
  Vec3 axis = Vec3::UnitZ();
  Transform origin;
  JointLimits limits;
};

/// Capsule attached to a frame: -1 is the fixed base, i >= 0 is joint i.
struct Capsule {
  int frame = -1;
  Vec3 a = Vec3::Zero();
  Vec3 b = Vec3::Zero();
  double radius = 0.0;
  Rgb color;
};

struct RobotModel {
  std::string name;
  std::string family;
  int type_id = 0;
  std::vector<Joint> joints;
  std::vector<Capsule> links;
  std::array<Rgb, 2> color_scheme;
  /// Capsule index pairs checked for self-collision: frames at least two
  /// apart and not already touching in the rest pose.
  std::vector<std::pair<std::size_t, std::size_t>> collision_pairs;

  std::size_t dof() const { return joints.size(); }
  /// Total kinematic chain length, Σ |origin_i.translation|, in meters.
  double reach() const;
  /// Throws std::invalid_argument when an invariant is violated.
  void validate() const;
};

/// Capsule with endpoints in the base (world) frame.
struct PosedCapsule {
  int frame = -1;
  Vec3 a = Vec3::Zero();
  Vec3 b = Vec3::Zero();
  double radius = 0.0;
  Rgb color;
};

class KinematicsError : public std::invalid_argument {
 public:
  KinematicsError(const std::string& what, int joint_index)
      : std::invalid_argument(what), joint_index_(joint_index) {}
  int joint_index() const { return joint_index_; }

 private:
  int joint_index_;
};

class SamplingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One transform per joint, in the base frame.
std::vector<Transform> forward_kinematics(const RobotModel& model, std::span<const double> angles);

/// Joint positions (translations of the forward-kinematics frames).
std::vector<Vec3> joint_positions(const RobotModel& model, std::span<const double> angles);

std::vector<PosedCapsule> pose_capsules(const RobotModel& model, std::span<const Transform> frames);

/// Self-collision over model.collision_pairs, or any capsule dipping below the
/// table plane z = 0.
bool in_collision(const RobotModel& model, std::span<const PosedCapsule> capsules,
                  double table_tolerance = 1e-9);

/// Zero angles clamped into the joint limits.
std::vector<double> rest_configuration(const RobotModel& model);

/// Fills model.collision_pairs from the rest pose.
void derive_collision_pairs(RobotModel& model);

/// Uniform draw within limits, rejected until collision free.
std::vector<double> sample_configuration(const RobotModel& model, std::mt19937_64& rng,
                                         int max_attempts = 2000);

// ---------------------------------------------------------------------------
// Catalog.

inline constexpr std::string_view kCatalogVersion = "armsight-catalog-1";

/// ur3, ur5, ur10 (6 DoF, family "ur"), kuka (7 DoF), panda (7 DoF).
const std::vector<RobotModel>& catalog();
const RobotModel& catalog_model(std::string_view name);
std::vector<std::string> catalog_names();

}  // namespace armsight::scene
