#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "armsight/camera.hpp"
#include "armsight/render.hpp"
#include "armsight/robot.hpp"

namespace armsight::scene {

inline constexpr int kManifestVersion = 1;
inline constexpr const char* kTrainSplit = "train";
inline constexpr const char* kValidationSplit = "validation";

struct CameraSamplerConfig {
  int width = 480;
  int height = 360;
  double fx = 700.0;
  double fy = 700.0;
  double min_distance = 1.2;
  double max_distance = 2.5;
  double min_elevation_deg = 5.0;
  double max_elevation_deg = 35.0;
  /// Look-at target is the joint centroid displaced by up to this many meters.
  double target_jitter = 0.05;
  double fg_min = 0.05;
  double fg_max = 0.22;
  int max_camera_attempts = 40;
  int max_configuration_attempts = 50;

  void validate() const;
};

struct DatasetSpec {
  std::vector<std::string> types;
  int n_per_type = 500;
  std::uint64_t seed = 1;
  CameraSamplerConfig camera;
  BackgroundSpec background;
  double train_fraction = 0.8;

  void validate() const;
};

struct SampleRecord {
  int id = 0;
  std::string image;
  std::string mask;
  int robot_type = 0;
  std::string robot_name;
  std::vector<double> joint_angles;
  std::vector<Vec3> joints_cam;
  Vec3 base_cam = Vec3::Zero();
  CameraModel camera;
  double distance = 0.0;
  double foreground_fraction = 0.0;
  std::string split;
};

struct Manifest {
  int version = kManifestVersion;
  int width = 0;
  int height = 0;
  std::vector<std::string> classes;
  std::vector<SampleRecord> samples;
  nlohmann::json generator = nlohmann::json::object();

  std::size_t count(const std::string& split) const;
};

struct GeneratedSample {
  SampleRecord record;
  RenderResult render;
};

/// Per-sample RNG seed; output does not depend on generation order.
std::uint64_t sample_seed(std::uint64_t dataset_seed, std::uint64_t index);

/// Draws configuration and camera, renders, and retries until the foreground
/// fraction lies in the configured band.
GeneratedSample generate_sample(const RobotModel& model, int robot_type,
                                const CameraSamplerConfig& camera, const BackgroundSpec& background,
                                std::uint64_t seed, int id);

/// Stratified seeded split: round(train_fraction * N) training samples in
/// total, spread as evenly as possible across classes.
void assign_split(Manifest& manifest, double train_fraction, std::uint64_t seed);

/// Generates and writes images/, masks/ and dataset.json under `out_dir`.
Manifest make_dataset(const DatasetSpec& spec, const std::filesystem::path& out_dir, int threads);

nlohmann::json to_json(const Manifest& manifest);
Manifest manifest_from_json(const nlohmann::json& j);
void save_manifest(const Manifest& manifest, const std::filesystem::path& dir);
Manifest load_manifest(const std::filesystem::path& dir);

nlohmann::json camera_to_json(const CameraModel& camera);
CameraModel camera_from_json(const nlohmann::json& j);

}  // namespace armsight::scene
