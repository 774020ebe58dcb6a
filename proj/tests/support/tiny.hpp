#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "armsight/multinet.hpp"
#include "armsight/robot.hpp"
#include "armsight/stagewise.hpp"

namespace armsight::testing {

/// 32x32 input, two pooling blocks, narrow layers. Trains in milliseconds.
inline net::ArchitectureDescriptor tiny_descriptor(std::size_t num_classes) {
  net::ArchitectureDescriptor d;
  d.input_h = 32;
  d.input_w = 32;
  d.trunk_channels = {4, 8};
  d.mask_channels = 8;
  d.decoder_channels = {4, 4};
  d.dense_width = 16;
  d.num_classes = num_classes;
  return d;
}

inline train::TrainConfig tiny_config() {
  train::TrainConfig c;
  c.total_iters = 100;
  c.batch_size = 4;
  c.plateau_window = 100;
  c.stage1_cap = 100;
  c.stage2_extra_iters = 100;
  c.optimizer = "adam";
  c.lr_end = 1e-5;
  c.seed = 3;
  return c;
}

inline net::Tensorf random_batch(const net::ArchitectureDescriptor& d, std::size_t batch, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::vector<float> v(batch * 3 * d.input_h * d.input_w);
  for (auto& x : v) x = u(rng);
  return net::Tensorf::constant({batch, 3, d.input_h, d.input_w}, v);
}

/// Synthetic 32x32 samples: a class-tinted square over a grey field, with the
/// square's position tied to the base target so every head has signal.
inline train::TrainingSet make_tiny_set(const std::vector<std::string>& classes, int per_class, std::uint64_t seed) {
  train::TrainingSet s;
  s.h = s.w = 32;
  s.classes = classes;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  int id = 0;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    const int dof = static_cast<int>(scene::catalog_model(classes[c]).dof());
    for (int k = 0; k < per_class; ++k) {
      const double bx = 0.25 * u(rng), by = 0.25 * u(rng), bz = 1.5 + 0.3 * u(rng);
      const int cx = static_cast<int>(16 + 40 * bx), cy = static_cast<int>(16 + 40 * by);
      for (int ch = 0; ch < 3; ++ch) {
        for (int y = 0; y < 32; ++y) {
          for (int x = 0; x < 32; ++x) {
            const bool in = std::abs(x - cx) <= 4 && std::abs(y - cy) <= 4;
            const float tint = ch == static_cast<int>(c % 3) ? 0.9f : 0.2f;
            s.inputs.push_back(in ? tint : 0.5f + 0.05f * static_cast<float>(u(rng)));
            if (ch == 0) s.masks.push_back(in ? 1.0f : 0.0f);
          }
        }
      }
      for (int j = 0; j < 7; ++j) {
        for (int a = 0; a < 3; ++a) {
          const double base = a == 0 ? bx : a == 1 ? by : bz;
          s.joints.push_back(j < dof ? static_cast<float>(base + 0.05 * j * (a == 2 ? -1 : 1)) : 0.0f);
        }
      }
      s.base.insert(s.base.end(), {static_cast<float>(bx), static_cast<float>(by), static_cast<float>(bz)});
      s.labels.push_back(static_cast<int>(c));
      s.joint_counts.push_back(dof);
      s.distances.push_back(std::sqrt(bx * bx + by * by + bz * bz));
      s.ids.push_back(id++);
    }
  }
  return s;
}

}  // namespace armsight::testing
