#include "armsight/render.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace armsight::scene {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::optional<double> ray_sphere(const Vec3& o, const Vec3& d, const Vec3& c, double r) {
  const Vec3 oc = o - c;
  const double b = oc.dot(d);
  const double cc = oc.squaredNorm() - r * r;
  const double h = b * b - cc;
  if (h < 0.0) return std::nullopt;
  const double t = -b - std::sqrt(h);
  if (t > 0.0) return t;
  return std::nullopt;
}

struct CamCapsule {
  Vec3 a, b;
  double radius;
  Rgb color;
  int x0, y0, x1, y1;  // inclusive pixel bounds
};

CamCapsule to_camera(const PosedCapsule& c, const CameraModel& cam, const Transform& world_to_cam) {
  CamCapsule out{world_to_cam.apply(c.a), world_to_cam.apply(c.b), c.radius, c.color, 0, 0,
                 cam.width - 1, cam.height - 1};
  const Vec3 lo = out.a.cwiseMin(out.b).array() - c.radius;
  const Vec3 hi = out.a.cwiseMax(out.b).array() + c.radius;
  if (hi.z() <= 1e-6) {
    out.x1 = -1;  // entirely behind the camera
    return out;
  }
  if (lo.z() > 1e-3) {
    double u0 = std::numeric_limits<double>::infinity(), u1 = -u0, v0 = u0, v1 = -u0;
    for (int k = 0; k < 8; ++k) {
      const Vec3 p((k & 1) ? hi.x() : lo.x(), (k & 2) ? hi.y() : lo.y(), (k & 4) ? hi.z() : lo.z());
      const Pixel px = project(cam, p);
      u0 = std::min(u0, px.u);
      u1 = std::max(u1, px.u);
      v0 = std::min(v0, px.v);
      v1 = std::max(v1, px.v);
    }
    out.x0 = std::max(0, static_cast<int>(std::floor(u0)) - 1);
    out.y0 = std::max(0, static_cast<int>(std::floor(v0)) - 1);
    out.x1 = std::min(cam.width - 1, static_cast<int>(std::ceil(u1)) + 1);
    out.y1 = std::min(cam.height - 1, static_cast<int>(std::ceil(v1)) + 1);
  }
  return out;
}

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0l, 255l));
}

// Shades a hit on a camera-frame capsule; returns linear RGB in [0, 255].
Vec3 shade(const CamCapsule& c, const Vec3& dir, double t, const Lighting& light) {
  const Vec3 p = t * dir;
  const Vec3 q = closest_point_on_segment(p, c.a, c.b);
  Vec3 n = p - q;
  const double len = n.norm();
  n = len > 0.0 ? Vec3(n / len) : Vec3(-dir);
  const double lambert = std::max(0.0, n.dot(light.direction));
  const double k = light.ambient + (1.0 - light.ambient) * lambert;
  return Vec3(c.color.r, c.color.g, c.color.b) * k;
}

// Rasterizes capsules into a depth buffer; calls `write(index, capsule, t)` on
// every pixel whose nearest hit improved.
template <typename Fn>
void raster(std::span<const CamCapsule> caps, const CameraModel& cam, std::vector<double>& depth,
            Fn&& write) {
  for (const auto& c : caps) {
    if (c.x1 < c.x0) continue;
    for (int y = c.y0; y <= c.y1; ++y) {
      for (int x = c.x0; x <= c.x1; ++x) {
        const Vec3 d = pixel_ray(cam, x, y);
        const auto t = ray_capsule(Vec3::Zero(), d, c.a, c.b, c.radius);
        const std::size_t idx = static_cast<std::size_t>(y) * cam.width + x;
        if (t && *t < depth[idx]) {
          depth[idx] = *t;
          write(idx, c, d, *t);
        }
      }
    }
  }
}

std::vector<CamCapsule> distractors(const CameraModel& cam, const SceneBackground& bg,
                                    std::mt19937_64& rng) {
  std::vector<CamCapsule> out;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  if (unit(rng) >= bg.spec.distractor_probability) return out;
  const int count = 1 + static_cast<int>(unit(rng) * bg.spec.max_distractors);
  const auto& models = catalog();
  for (int k = 0; k < std::min(count, bg.spec.max_distractors); ++k) {
    const double z = bg.distractor_min_depth + 0.3 + 1.5 * unit(rng);
    const double u = unit(rng) * cam.width;
    const double v = unit(rng) * cam.height;
    Vec3 p((u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z);
    const auto& scheme = models[static_cast<std::size_t>(unit(rng) * models.size()) % models.size()].color_scheme;
    const int segments = 2 + static_cast<int>(unit(rng) * 3);
    std::vector<CamCapsule> chain;
    for (int s = 0; s < segments; ++s) {
      Vec3 dir(unit(rng) - 0.5, unit(rng) - 0.5, unit(rng) - 0.5);
      dir.normalize();
      const Vec3 q = p + (0.2 + 0.35 * unit(rng)) * dir;
      const double r = 0.03 + 0.04 * unit(rng);
      chain.push_back({p, q, r, scheme[s % 2], 0, 0, 0, 0});
      p = q;
    }
    double min_depth = std::numeric_limits<double>::infinity();
    for (const auto& c : chain) min_depth = std::min({min_depth, c.a.z() - c.radius, c.b.z() - c.radius});
    const double shift = std::max(0.0, bg.distractor_min_depth - min_depth);
    for (auto& c : chain) {
      c.a.z() += shift;
      c.b.z() += shift;
      PosedCapsule world{0, c.a, c.b, c.radius, c.color};
      out.push_back(to_camera(world, cam, Transform{}));
    }
  }
  return out;
}

}  // namespace

std::optional<double> ray_capsule(const Vec3& o, const Vec3& d, const Vec3& a, const Vec3& b,
                                  double r) {
  const Vec3 ba = b - a;
  const double baba = ba.squaredNorm();
  if (baba < 1e-18) return ray_sphere(o, d, a, r);
  const Vec3 oa = o - a;
  const double bard = ba.dot(d);
  const double baoa = ba.dot(oa);
  const double rdoa = d.dot(oa);
  const double oaoa = oa.squaredNorm();
  const double qa = baba - bard * bard;
  if (qa > 1e-12 * baba) {
    const double qb = baba * rdoa - baoa * bard;
    const double qc = baba * oaoa - baoa * baoa - r * r * baba;
    const double h = qb * qb - qa * qc;
    if (h < 0.0) return std::nullopt;
    const double t = (-qb - std::sqrt(h)) / qa;
    const double y = baoa + t * bard;
    if (y > 0.0 && y < baba) {
      if (t > 0.0) return t;
      return std::nullopt;
    }
  }
  const auto ta = ray_sphere(o, d, a, r);
  const auto tb = ray_sphere(o, d, b, r);
  if (ta && tb) return std::min(*ta, *tb);
  return ta ? ta : tb;
}

Vec3 pixel_ray(const CameraModel& camera, int x, int y) {
  return Vec3((x + 0.5 - camera.cx) / camera.fx, (y + 0.5 - camera.cy) / camera.fy, 1.0).normalized();
}

Lighting random_lighting(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Lighting l;
  l.direction = Vec3(2.0 * unit(rng) - 1.0, -0.2 - 0.8 * unit(rng), -0.4 - 0.6 * unit(rng)).normalized();
  l.ambient = 0.25 + 0.2 * unit(rng);
  return l;
}

RgbImage render_background(const CameraModel& cam, const SceneBackground& bg, const Lighting& light) {
  std::mt19937_64 rng(splitmix64(bg.seed));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  RgbImage img(cam.width, cam.height);

  auto random_color = [&]() { return Vec3(255 * unit(rng), 255 * unit(rng), 255 * unit(rng)); };
  const Vec3 top = random_color();
  const Vec3 bottom = random_color();
  std::vector<Vec3> buf(static_cast<std::size_t>(cam.width) * cam.height);
  for (int y = 0; y < cam.height; ++y) {
    const double f = cam.height > 1 ? static_cast<double>(y) / (cam.height - 1) : 0.0;
    const Vec3 c = (1.0 - f) * top + f * bottom;
    for (int x = 0; x < cam.width; ++x) buf[static_cast<std::size_t>(y) * cam.width + x] = c;
  }

  const int span = std::max(0, bg.spec.max_shapes - bg.spec.min_shapes);
  const int shapes = bg.spec.min_shapes + static_cast<int>(unit(rng) * (span + 1)) % (span + 1);
  for (int s = 0; s < shapes; ++s) {
    const bool ellipse = unit(rng) < 0.5;
    const double cx = unit(rng) * cam.width, cy = unit(rng) * cam.height;
    const double rx = (0.03 + 0.2 * unit(rng)) * cam.width;
    const double ry = (0.03 + 0.2 * unit(rng)) * cam.height;
    const Vec3 color = random_color();
    const int x0 = std::max(0, static_cast<int>(cx - rx)), x1 = std::min(cam.width - 1, static_cast<int>(cx + rx));
    const int y0 = std::max(0, static_cast<int>(cy - ry)), y1 = std::min(cam.height - 1, static_cast<int>(cy + ry));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        if (ellipse) {
          const double dx = (x + 0.5 - cx) / rx, dy = (y + 0.5 - cy) / ry;
          if (dx * dx + dy * dy > 1.0) continue;
        }
        buf[static_cast<std::size_t>(y) * cam.width + x] = color;
      }
    }
  }

  const auto extra = distractors(cam, bg, rng);
  std::vector<double> depth(buf.size(), std::numeric_limits<double>::infinity());
  raster(std::span<const CamCapsule>(extra), cam, depth,
         [&](std::size_t idx, const CamCapsule& c, const Vec3& d, double t) { buf[idx] = shade(c, d, t, light); });

  const std::uint64_t noise_seed = splitmix64(bg.seed ^ 0xA5A5A5A5ull);
  for (std::size_t i = 0; i < buf.size(); ++i) {
    const std::uint64_t h = splitmix64(noise_seed + i);
    for (int ch = 0; ch < 3; ++ch) {
      const double n = ((static_cast<double>((h >> (16 * ch)) & 0xFFFF) / 65535.0) * 2.0 - 1.0) *
                       bg.spec.noise_amplitude;
      img.data[i * 3 + ch] = to_byte(buf[i][ch] + n);
    }
  }
  return img;
}

Mask render_mask(std::span<const PosedCapsule> capsules, const CameraModel& cam) {
  Mask mask(cam.width, cam.height);
  const Transform w2c = cam.pose.inverse();
  std::vector<CamCapsule> caps;
  for (const auto& c : capsules) caps.push_back(to_camera(c, cam, w2c));
  std::vector<double> depth(mask.data.size(), std::numeric_limits<double>::infinity());
  raster(std::span<const CamCapsule>(caps), cam, depth,
         [&](std::size_t idx, const CamCapsule&, const Vec3&, double) { mask.data[idx] = 1; });
  return mask;
}

RenderResult render_capsules(std::span<const PosedCapsule> capsules, const CameraModel& cam,
                             const SceneBackground& background, const Lighting& light) {
  RenderResult out{render_background(cam, background, light), Mask(cam.width, cam.height)};
  const Transform w2c = cam.pose.inverse();
  std::vector<CamCapsule> caps;
  for (const auto& c : capsules) caps.push_back(to_camera(c, cam, w2c));
  std::vector<double> depth(out.mask.data.size(), std::numeric_limits<double>::infinity());
  std::vector<Vec3> color(out.mask.data.size());
  raster(std::span<const CamCapsule>(caps), cam, depth,
         [&](std::size_t idx, const CamCapsule& c, const Vec3& d, double t) {
           out.mask.data[idx] = 1;
           color[idx] = shade(c, d, t, light);
         });
  // Robot pixels keep the background's per-pixel noise so the sensor noise is
  // uniform across the frame.
  const std::uint64_t noise_seed = splitmix64(background.seed ^ 0xA5A5A5A5ull);
  for (std::size_t i = 0; i < out.mask.data.size(); ++i) {
    if (!out.mask.data[i]) continue;
    const std::uint64_t h = splitmix64(noise_seed + i);
    for (int ch = 0; ch < 3; ++ch) {
      const double n = ((static_cast<double>((h >> (16 * ch)) & 0xFFFF) / 65535.0) * 2.0 - 1.0) *
                       background.spec.noise_amplitude;
      out.image.data[i * 3 + ch] = to_byte(color[i][ch] + n);
    }
  }
  return out;
}

RenderResult render(const RobotModel& model, std::span<const double> angles, const CameraModel& camera,
                    const SceneBackground& background, const Lighting& light) {
  camera.validate();
  const auto frames = forward_kinematics(model, angles);
  const Vec3 base_cam = camera.world_to_camera(Vec3::Zero());
  if (base_cam.z() <= 0.0 || !in_image(camera, project(camera, base_cam))) {
    throw DegenerateSampleError(model.name + ": robot base does not project into the image");
  }
  const auto capsules = pose_capsules(model, frames);
  auto out = render_capsules(capsules, camera, background, light);
  if (out.mask.count() == 0) throw DegenerateSampleError(model.name + ": robot outside the view frustum");
  return out;
}

}  // namespace armsight::scene
