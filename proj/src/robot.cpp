#include "armsight/robot.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace armsight::scene {

double RobotModel::reach() const {
  double total = 0.0;
  for (const auto& j : joints) total += j.origin.translation.norm();
  return total;
}

void RobotModel::validate() const {
  if (joints.empty()) throw std::invalid_argument(name + ": robot has no joints");
  for (std::size_t i = 0; i < joints.size(); ++i) {
    const auto& j = joints[i];
    if (std::abs(j.axis.norm() - 1.0) > 1e-9) {
      throw std::invalid_argument(name + ": joint " + std::to_string(i) + " axis is not unit length");
    }
    if (!(j.limits.min < j.limits.max)) {
      throw std::invalid_argument(name + ": joint " + std::to_string(i) + " has min >= max");
    }
    if (!j.origin.is_rigid()) {
      throw std::invalid_argument(name + ": joint " + std::to_string(i) + " origin is not rigid");
    }
  }
  for (const auto& c : links) {
    if (c.frame < -1 || c.frame >= static_cast<int>(joints.size())) {
      throw std::invalid_argument(name + ": capsule references frame " + std::to_string(c.frame));
    }
    if (!(c.radius > 0.0)) throw std::invalid_argument(name + ": capsule radius must be positive");
  }
}

std::vector<Transform> forward_kinematics(const RobotModel& model, std::span<const double> angles) {
  if (angles.size() != model.joints.size()) {
    throw KinematicsError(model.name + ": expected " + std::to_string(model.joints.size()) +
                              " joint angles, got " + std::to_string(angles.size()),
                          -1);
  }
  std::vector<Transform> frames;
  frames.reserve(angles.size());
  Transform current;
  for (std::size_t i = 0; i < angles.size(); ++i) {
    const auto& j = model.joints[i];
    const double q = angles[i];
    if (!std::isfinite(q) || q < j.limits.min || q > j.limits.max) {
      throw KinematicsError(model.name + ": joint " + std::to_string(i) + " angle " +
                                std::to_string(q) + " outside limits [" +
                                std::to_string(j.limits.min) + ", " +
                                std::to_string(j.limits.max) + "]",
                            static_cast<int>(i));
    }
    current = current * Transform::from_axis_angle(j.axis, q) * j.origin;
    frames.push_back(current);
  }
  return frames;
}

std::vector<Vec3> joint_positions(const RobotModel& model, std::span<const double> angles) {
  const auto frames = forward_kinematics(model, angles);
  std::vector<Vec3> out;
  out.reserve(frames.size());
  for (const auto& f : frames) out.push_back(f.translation);
  return out;
}

std::vector<PosedCapsule> pose_capsules(const RobotModel& model, std::span<const Transform> frames) {
  std::vector<PosedCapsule> out;
  out.reserve(model.links.size());
  for (const auto& c : model.links) {
    const Transform& f = c.frame < 0 ? Transform{} : frames[static_cast<std::size_t>(c.frame)];
    out.push_back({c.frame, f.apply(c.a), f.apply(c.b), c.radius, c.color});
  }
  return out;
}

bool in_collision(const RobotModel& model, std::span<const PosedCapsule> capsules,
                  double table_tolerance) {
  for (const auto& c : capsules) {
    if (std::min(c.a.z(), c.b.z()) - c.radius < -table_tolerance) return true;
  }
  for (const auto& [i, k] : model.collision_pairs) {
    const auto& p = capsules[i];
    const auto& q = capsules[k];
    if (segment_distance(p.a, p.b, q.a, q.b) < p.radius + q.radius) return true;
  }
  return false;
}

std::vector<double> rest_configuration(const RobotModel& model) {
  std::vector<double> q;
  for (const auto& j : model.joints) q.push_back(std::clamp(0.0, j.limits.min, j.limits.max));
  return q;
}

void derive_collision_pairs(RobotModel& model) {
  model.collision_pairs.clear();
  const auto q = rest_configuration(model);
  const auto frames = forward_kinematics(model, q);
  const auto caps = pose_capsules(model, frames);
  for (std::size_t i = 0; i < caps.size(); ++i) {
    for (std::size_t k = i + 1; k < caps.size(); ++k) {
      if (std::abs(caps[i].frame - caps[k].frame) < 2) continue;
      if (segment_distance(caps[i].a, caps[i].b, caps[k].a, caps[k].b) < caps[i].radius + caps[k].radius) {
        continue;
      }
      model.collision_pairs.emplace_back(i, k);
    }
  }
}

std::vector<double> sample_configuration(const RobotModel& model, std::mt19937_64& rng,
                                         int max_attempts) {
  std::vector<double> q(model.joints.size());
  for (int attempt = 0; attempt < max_attempts; ++attempt) {
    for (std::size_t i = 0; i < q.size(); ++i) {
      const auto& lim = model.joints[i].limits;
      q[i] = std::uniform_real_distribution<double>(lim.min, lim.max)(rng);
    }
    const auto frames = forward_kinematics(model, q);
    if (!in_collision(model, pose_capsules(model, frames))) return q;
  }
  throw SamplingError(model.name + ": no collision-free configuration after " +
                      std::to_string(max_attempts) + " attempts");
}

namespace {

constexpr double deg = std::numbers::pi / 180.0;

struct LinkSpec {
  Vec3 axis;
  Vec3 offset;
  double min_deg;
  double max_deg;
  double radius;
};

RobotModel build_chain(std::string name, std::string family, int type_id, double base_radius,
                       double base_height, const std::vector<LinkSpec>& specs, Rgb link_color,
                       Rgb accent) {
  RobotModel m;
  m.name = std::move(name);
  m.family = std::move(family);
  m.type_id = type_id;
  m.color_scheme = {link_color, accent};
  m.links.push_back({-1, Vec3(0, 0, base_radius), Vec3(0, 0, std::max(base_height, base_radius)),
                     base_radius, accent});
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto& s = specs[i];
    m.joints.push_back({s.axis, Transform::from_translation(s.offset),
                        {s.min_deg * deg, s.max_deg * deg}});
    Vec3 a = -s.offset;
    // The first link stands on the base; lift its lower cap off the table.
    if (i == 0) a.z() += s.radius;
    m.links.push_back({static_cast<int>(i), a, Vec3::Zero(), s.radius, link_color});
    if (i + 1 < specs.size()) {
      const Vec3 knuckle_axis = specs[i + 1].axis;
      const double r = specs[i].radius * 1.2;
      const double h = specs[i].radius * 0.8;
      m.links.push_back({static_cast<int>(i), -h * knuckle_axis, h * knuckle_axis, r, accent});
    }
  }
  m.validate();
  derive_collision_pairs(m);
  return m;
}

std::vector<RobotModel> make_catalog() {
  const Vec3 z = Vec3::UnitZ();
  const Vec3 y = Vec3::UnitY();
  const Rgb silver{190, 192, 198};
  const Rgb ur_blue{40, 110, 200};
  const Rgb orange{235, 110, 25};
  const Rgb white{236, 236, 234};
  const Rgb black{32, 32, 36};

  auto ur = [&](std::string name, int id, double base_r, double column, double upper,
                double fore, double w1, double w2, double w3, double r_arm, double r_wrist) {
    return build_chain(std::move(name), "ur", id, base_r, base_r * 1.2,
                       {{z, {0, 0, column}, -180, 180, r_arm * 1.05},
                        {y, {0, 0, upper}, -180, 180, r_arm},
                        {y, {0, 0, fore}, -170, 170, r_arm * 0.85},
                        {y, {0, w1, 0}, -180, 180, r_wrist},
                        {z, {0, 0, w2}, -180, 180, r_wrist},
                        {y, {0, w3, 0}, -180, 180, r_wrist * 0.9}},
                       silver, ur_blue);
  };

  std::vector<RobotModel> models;
  // Proportions differ per variant, so the three are not uniform rescalings.
  models.push_back(ur("ur3", 0, 0.065, 0.152, 0.244, 0.213, 0.112, 0.085, 0.082, 0.048, 0.038));
  models.push_back(ur("ur5", 1, 0.080, 0.163, 0.425, 0.392, 0.133, 0.100, 0.090, 0.060, 0.045));
  models.push_back(ur("ur10", 2, 0.095, 0.181, 0.612, 0.572, 0.164, 0.116, 0.092, 0.066, 0.050));

  models.push_back(build_chain("kuka", "kuka", 3, 0.085, 0.10,
                               {{z, {0, 0, 0.17}, -170, 170, 0.068},
                                {y, {0, 0, 0.20}, -120, 120, 0.065},
                                {z, {0, 0, 0.20}, -170, 170, 0.062},
                                {y, {0, 0, 0.20}, -120, 120, 0.060},
                                {z, {0, 0, 0.19}, -170, 170, 0.055},
                                {y, {0, 0, 0.09}, -120, 120, 0.050},
                                {z, {0, 0, 0.07}, -175, 175, 0.040}},
                               silver, orange));

  models.push_back(build_chain("panda", "panda", 4, 0.080, 0.09,
                               {{z, {0, 0, 0.19}, -166, 166, 0.062},
                                {y, {0, 0, 0.17}, -101, 101, 0.060},
                                {z, {0.08, 0, 0.16}, -166, 166, 0.056},
                                {y, {-0.08, 0, 0.19}, -170, -5, 0.055},
                                {z, {0, 0, 0.19}, -166, 166, 0.052},
                                {y, {0.088, 0, 0}, -1, 215, 0.048},
                                {z, {0, 0, -0.10}, -166, 166, 0.042}},
                               white, black));
  return models;
}

}  // namespace

const std::vector<RobotModel>& catalog() {
  static const std::vector<RobotModel> models = make_catalog();
  return models;
}

const RobotModel& catalog_model(std::string_view name) {
  for (const auto& m : catalog()) {
    if (m.name == name) return m;
  }
  std::string known;
  for (const auto& m : catalog()) known += (known.empty() ? "" : ", ") + m.name;
  throw std::invalid_argument("unknown robot type '" + std::string(name) + "'; catalog: " + known);
}

std::vector<std::string> catalog_names() {
  std::vector<std::string> names;
  for (const auto& m : catalog()) names.push_back(m.name);
  return names;
}

}  // namespace armsight::scene
