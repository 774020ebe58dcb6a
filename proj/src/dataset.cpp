#include "armsight/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <numeric>
#include <sstream>

#include "armsight/parallel.hpp"

namespace armsight::scene {

using nlohmann::json;

namespace {

std::uint64_t mix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::string file_name(int id, const char* ext) {
  std::ostringstream os;
  os << std::setw(6) << std::setfill('0') << id << ext;
  return os.str();
}

json vec_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

Vec3 vec_from(const json& j) {
  if (!j.is_array() || j.size() != 3) throw std::invalid_argument("expected a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

}  // namespace

void CameraSamplerConfig::validate() const {
  if (width <= 0 || height <= 0) throw std::invalid_argument("image size must be positive");
  if (!(fx > 0 && fy > 0)) throw std::invalid_argument("focal lengths must be positive");
  if (!(min_distance > 0 && min_distance <= max_distance)) {
    throw std::invalid_argument("camera distance range must satisfy 0 < min <= max");
  }
  if (!(fg_min >= 0 && fg_min < fg_max && fg_max <= 1)) {
    throw std::invalid_argument("foreground band must satisfy 0 <= min < max <= 1");
  }
  if (max_camera_attempts < 1 || max_configuration_attempts < 1) {
    throw std::invalid_argument("attempt budgets must be positive");
  }
}

void DatasetSpec::validate() const {
  if (types.empty()) throw std::invalid_argument("dataset needs at least one robot type");
  for (std::size_t i = 0; i < types.size(); ++i) {
    catalog_model(types[i]);
    if (std::find(types.begin(), types.begin() + i, types[i]) != types.begin() + i)
      throw std::invalid_argument("robot type listed twice: " + types[i]);
  }
  if (n_per_type < 5) throw std::invalid_argument("n_per_type must be at least 5");
  if (!(train_fraction > 0 && train_fraction < 1)) throw std::invalid_argument("train_fraction must lie in (0, 1)");
  camera.validate();
}

std::size_t Manifest::count(const std::string& split) const {
  return static_cast<std::size_t>(
      std::count_if(samples.begin(), samples.end(), [&](const SampleRecord& s) { return s.split == split; }));
}

std::uint64_t sample_seed(std::uint64_t dataset_seed, std::uint64_t index) {
  return mix(dataset_seed ^ mix(index + 0x51ED27ull));
}

GeneratedSample generate_sample(const RobotModel& model, int robot_type, const CameraSamplerConfig& cfg,
                                const BackgroundSpec& background, std::uint64_t seed, int id) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  constexpr double deg = std::numbers::pi / 180.0;

  for (int config_attempt = 0; config_attempt < cfg.max_configuration_attempts; ++config_attempt) {
    const auto angles = sample_configuration(model, rng);
    const auto frames = forward_kinematics(model, angles);
    const auto capsules = pose_capsules(model, frames);
    Vec3 centroid = Vec3::Zero();
    for (const auto& f : frames) centroid += f.translation;
    centroid /= static_cast<double>(frames.size() + 1);  // base at the origin

    for (int cam_attempt = 0; cam_attempt < cfg.max_camera_attempts; ++cam_attempt) {
      const double distance = cfg.min_distance + (cfg.max_distance - cfg.min_distance) * unit(rng);
      const double azimuth = (2.0 * unit(rng) - 1.0) * std::numbers::pi;
      const double elevation =
          (cfg.min_elevation_deg + (cfg.max_elevation_deg - cfg.min_elevation_deg) * unit(rng)) * deg;
      const Vec3 eye = distance * Vec3(std::cos(elevation) * std::cos(azimuth),
                                       std::cos(elevation) * std::sin(azimuth), std::sin(elevation));
      const Vec3 jitter = cfg.target_jitter * Vec3(2 * unit(rng) - 1, 2 * unit(rng) - 1, 2 * unit(rng) - 1);

      CameraModel cam;
      cam.fx = cfg.fx;
      cam.fy = cfg.fy;
      cam.width = cfg.width;
      cam.height = cfg.height;
      cam.cx = cfg.width / 2.0;
      cam.cy = cfg.height / 2.0;
      cam.pose = look_at(eye, centroid + jitter);

      const Vec3 base_cam = cam.world_to_camera(Vec3::Zero());
      if (base_cam.z() <= 0.0 || !in_image(cam, project(cam, base_cam))) continue;
      const double fg = render_mask(capsules, cam).fraction();
      if (fg < cfg.fg_min || fg > cfg.fg_max) continue;

      SceneBackground bg;
      bg.spec = background;
      bg.seed = mix(seed ^ 0xB4C6ull);
      // Farther than any point of the robot can be from the camera.
      bg.distractor_min_depth = distance + model.reach() + 0.3;
      const Lighting light = random_lighting(rng);

      GeneratedSample out;
      out.render = render(model, angles, cam, bg, light);
      auto& r = out.record;
      r.id = id;
      r.image = "images/" + file_name(id, ".ppm");
      r.mask = "masks/" + file_name(id, ".pgm");
      r.robot_type = robot_type;
      r.robot_name = model.name;
      r.joint_angles = angles;
      for (const auto& f : frames) r.joints_cam.push_back(cam.world_to_camera(f.translation));
      r.base_cam = base_cam;
      r.camera = cam;
      r.distance = (cam.pose.translation - Vec3::Zero()).norm();
      r.foreground_fraction = out.render.mask.fraction();
      return out;
    }
  }
  throw SamplingError(model.name + ": no camera placement met the foreground band [" +
                      std::to_string(cfg.fg_min) + ", " + std::to_string(cfg.fg_max) + "]");
}

void assign_split(Manifest& manifest, double train_fraction, std::uint64_t seed) {
  const std::size_t total = manifest.samples.size();
  const auto n_train_total = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(total)));
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < total; ++i) by_class[manifest.samples[i].robot_type].push_back(i);

  // Largest-remainder allocation of the training quota across classes.
  struct Quota {
    int cls;
    std::size_t base;
    double remainder;
  };
  std::vector<Quota> quotas;
  std::size_t assigned = 0;
  for (const auto& [cls, idx] : by_class) {
    const double exact = train_fraction * static_cast<double>(idx.size());
    const auto base = static_cast<std::size_t>(std::floor(exact));
    quotas.push_back({cls, base, exact - static_cast<double>(base)});
    assigned += base;
  }
  std::stable_sort(quotas.begin(), quotas.end(),
                   [](const Quota& a, const Quota& b) { return a.remainder > b.remainder; });
  for (auto& q : quotas) {
    if (assigned >= n_train_total) break;
    if (q.base < by_class[q.cls].size()) {
      ++q.base;
      ++assigned;
    }
  }

  std::mt19937_64 rng(mix(seed ^ 0x5B117ull));
  for (const auto& q : quotas) {
    auto idx = by_class[q.cls];
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      manifest.samples[idx[k]].split = k < q.base ? kTrainSplit : kValidationSplit;
    }
  }
}

Manifest make_dataset(const DatasetSpec& spec, const std::filesystem::path& out_dir, int threads) {
  spec.validate();
  std::filesystem::create_directories(out_dir / "images");
  std::filesystem::create_directories(out_dir / "masks");

  Manifest manifest;
  manifest.width = spec.camera.width;
  manifest.height = spec.camera.height;
  manifest.classes = spec.types;
  const std::size_t total = spec.types.size() * static_cast<std::size_t>(spec.n_per_type);
  manifest.samples.resize(total);

  parallel_for(total, threads, [&](std::size_t i) {
    const int type = static_cast<int>(i / static_cast<std::size_t>(spec.n_per_type));
    const auto& model = catalog_model(spec.types[static_cast<std::size_t>(type)]);
    auto gen = generate_sample(model, type, spec.camera, spec.background, sample_seed(spec.seed, i),
                               static_cast<int>(i));
    write_ppm(out_dir / gen.record.image, gen.render.image);
    write_pgm(out_dir / gen.record.mask, gen.render.mask);
    manifest.samples[i] = std::move(gen.record);
  });

  assign_split(manifest, spec.train_fraction, spec.seed);

  const auto& c = spec.camera;
  manifest.generator = {
      {"catalog_version", std::string(kCatalogVersion)},
      {"seed", spec.seed},
      {"n_per_type", spec.n_per_type},
      {"train_fraction", spec.train_fraction},
      {"distance_range", {c.min_distance, c.max_distance}},
      {"distance_range_source", "default choice; recording distances are not published"},
      {"elevation_range_deg", {c.min_elevation_deg, c.max_elevation_deg}},
      {"foreground_band", {c.fg_min, c.fg_max}},
      {"intrinsics", {{"fx", c.fx}, {"fy", c.fy}}},
      {"background",
       {{"min_shapes", spec.background.min_shapes},
        {"max_shapes", spec.background.max_shapes},
        {"noise_amplitude", spec.background.noise_amplitude},
        {"distractor_probability", spec.background.distractor_probability},
        {"max_distractors", spec.background.max_distractors}}},
  };
  save_manifest(manifest, out_dir);
  return manifest;
}

json camera_to_json(const CameraModel& cam) {
  json rot = json::array();
  for (int r = 0; r < 3; ++r) {
    rot.push_back({cam.pose.rotation(r, 0), cam.pose.rotation(r, 1), cam.pose.rotation(r, 2)});
  }
  return {{"fx", cam.fx},         {"fy", cam.fy},
          {"cx", cam.cx},         {"cy", cam.cy},
          {"width", cam.width},   {"height", cam.height},
          {"pose", {{"rotation", rot}, {"translation", vec_json(cam.pose.translation)}}}};
}

CameraModel camera_from_json(const json& j) {
  CameraModel cam;
  cam.fx = j.at("fx").get<double>();
  cam.fy = j.at("fy").get<double>();
  cam.cx = j.at("cx").get<double>();
  cam.cy = j.at("cy").get<double>();
  cam.width = j.at("width").get<int>();
  cam.height = j.at("height").get<int>();
  const auto& rot = j.at("pose").at("rotation");
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) cam.pose.rotation(r, c) = rot.at(r).at(c).get<double>();
  }
  cam.pose.translation = vec_from(j.at("pose").at("translation"));
  return cam;
}

json to_json(const Manifest& m) {
  json samples = json::array();
  for (const auto& s : m.samples) {
    json joints = json::array();
    for (const auto& p : s.joints_cam) joints.push_back(vec_json(p));
    samples.push_back({{"id", s.id},
                       {"image", s.image},
                       {"mask", s.mask},
                       {"robot_type", s.robot_type},
                       {"robot_name", s.robot_name},
                       {"joint_angles", s.joint_angles},
                       {"joints_cam", joints},
                       {"base_cam", vec_json(s.base_cam)},
                       {"camera", camera_to_json(s.camera)},
                       {"distance", s.distance},
                       {"foreground_fraction", s.foreground_fraction},
                       {"split", s.split}});
  }
  return {{"version", m.version},
          {"image_size", {m.width, m.height}},
          {"classes", m.classes},
          {"generator", m.generator},
          {"samples", samples}};
}

Manifest manifest_from_json(const json& j) {
  Manifest m;
  m.version = j.at("version").get<int>();
  if (m.version != kManifestVersion) {
    throw std::invalid_argument("unsupported manifest version " + std::to_string(m.version));
  }
  m.width = j.at("image_size").at(0).get<int>();
  m.height = j.at("image_size").at(1).get<int>();
  m.classes = j.at("classes").get<std::vector<std::string>>();
  if (j.contains("generator")) m.generator = j.at("generator");
  for (const auto& js : j.at("samples")) {
    SampleRecord s;
    s.id = js.at("id").get<int>();
    s.image = js.at("image").get<std::string>();
    s.mask = js.at("mask").get<std::string>();
    s.robot_type = js.at("robot_type").get<int>();
    if (s.robot_type < 0 || s.robot_type >= static_cast<int>(m.classes.size())) {
      throw std::invalid_argument("sample " + std::to_string(s.id) + " has robot_type outside classes");
    }
    s.robot_name = js.value("robot_name", m.classes[static_cast<std::size_t>(s.robot_type)]);
    s.joint_angles = js.at("joint_angles").get<std::vector<double>>();
    for (const auto& p : js.at("joints_cam")) s.joints_cam.push_back(vec_from(p));
    s.base_cam = vec_from(js.at("base_cam"));
    s.camera = camera_from_json(js.at("camera"));
    s.distance = js.at("distance").get<double>();
    s.foreground_fraction = js.value("foreground_fraction", 0.0);
    s.split = js.at("split").get<std::string>();
    m.samples.push_back(std::move(s));
  }
  return m;
}

void save_manifest(const Manifest& manifest, const std::filesystem::path& dir) {
  write_file(dir / "dataset.json", to_json(manifest).dump(1) + "\n");
}

Manifest load_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "dataset.json";
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return manifest_from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw IoError("malformed manifest " + path.string() + ": " + e.what());
  }
}

}  // namespace armsight::scene
