#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "armsight/image.hpp"
#include "armsight/tensor.hpp"

namespace armsight::net {

using Tensorf = ad::Tensor<float>;
using Graphf = ad::Graph<float>;

enum class LayerGroup { trunk_frozen, stage2_unlockable, stage1_trainable };

std::string to_string(LayerGroup group);
LayerGroup layer_group_from_string(const std::string& s);

enum class LayerKind { conv3x3, dense };

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::conv3x3;
  std::size_t in = 0;
  std::size_t out = 0;
  LayerGroup group = LayerGroup::trunk_frozen;

  std::size_t parameter_count() const;
};

/// Layer sizes of the branched network. Layer list order is the order of
/// parameters in checkpoints.
struct ArchitectureDescriptor {
  std::size_t input_h = 106;
  std::size_t input_w = 128;
  std::vector<std::size_t> trunk_channels{8, 16, 32, 32};
  std::size_t mask_channels = 32;
  std::vector<std::size_t> decoder_channels{16, 8};
  std::size_t dense_width = 128;
  std::size_t max_joints = 7;
  std::size_t num_classes = 3;
  /// Fixed affine map applied to the joint and base heads: meters = offset + scale * raw.
  std::vector<float> joint_offset = std::vector<float>(21, 0.0f);
  std::vector<float> joint_scale = std::vector<float>(21, 1.0f);
  std::vector<float> base_offset = std::vector<float>(3, 0.0f);
  std::vector<float> base_scale = std::vector<float>(3, 1.0f);

  static ArchitectureDescriptor desk_scale();
  /// 256x212 input.
  static ArchitectureDescriptor paper_scale();

  /// Spatial size after the trunk.
  std::size_t trunk_h() const;
  std::size_t trunk_w() const;
  std::vector<LayerSpec> layers() const;
  std::size_t parameter_count() const;
  void validate() const;

  nlohmann::json to_json() const;
  static ArchitectureDescriptor from_json(const nlohmann::json& j);
};

struct Layer {
  LayerSpec spec;
  Tensorf weight;
  Tensorf bias;
};

struct NetworkOutputs {
  Tensorf mask_logits;  // [B,1,H,W]
  Tensorf mask_prob;    // [B,1,H,W]
  Tensorf joints;       // [B, 3*max_joints], meters, camera frame
  Tensorf base;         // [B,3]
  Tensorf type_dist;    // [B,R]
};

/// Inputs of the stage1_trainable layers. While every other layer is frozen
/// these are constants of the sample and can be cached.
struct HeadFeatures {
  Tensorf mask;   // [B, decoder_channels.back(), 4*trunk_h, 4*trunk_w]
  Tensorf joint;  // [B, dense_width]
  Tensorf base;   // [B, dense_width]
  Tensorf type;   // [B, dense_width]
};

class Network {
 public:
  Network() = default;
  /// He-uniform weights from `seed`, zero biases.
  Network(ArchitectureDescriptor descriptor, std::vector<std::string> classes, std::uint64_t seed);

  const ArchitectureDescriptor& descriptor() const { return desc_; }
  const std::vector<std::string>& classes() const { return classes_; }
  std::vector<Layer>& layers() { return layers_; }
  const std::vector<Layer>& layers() const { return layers_; }
  const Layer& layer(const std::string& name) const;

  /// All weight and bias tensors in layer order.
  std::vector<Tensorf> parameters() const;
  std::vector<Tensorf> parameters(LayerGroup group) const;

  /// Freezes every layer whose group is not in `trainable`.
  void set_trainable_groups(std::initializer_list<LayerGroup> trainable);
  void zero_grad();

  /// x [B,3,H,W].
  NetworkOutputs forward(Graphf& g, const Tensorf& x) const;
  HeadFeatures features(Graphf& g, const Tensorf& x) const;
  NetworkOutputs heads(Graphf& g, const HeadFeatures& f) const;

  /// Grows the type head to `classes` (a superset of the current classes,
  /// old ones keep their rows). New rows are He-initialized from `seed`.
  void extend_classes(const std::vector<std::string>& classes, std::uint64_t seed);

  /// Replaces the fixed output maps of the coordinate heads.
  void set_output_maps(std::vector<float> joint_offset, std::vector<float> joint_scale,
                       std::vector<float> base_offset, std::vector<float> base_scale);

 private:
  Tensorf conv(Graphf& g, const std::string& name, const Tensorf& x) const;
  Tensorf fc(Graphf& g, const std::string& name, const Tensorf& x) const;

  ArchitectureDescriptor desc_;
  std::vector<std::string> classes_;
  std::vector<Layer> layers_;
};

/// Number of joint slots used by a class (its robot's DoF).
int joint_slots(const std::string& class_name);

/// First joint_slots(class) xyz triples of one sample's joint head row.
std::vector<float> select_joint_outputs(std::span<const float> joints_row, const std::string& class_name);

// ---------------------------------------------------------------------------
// Preprocessing.

/// Source-to-network mapping: uniform scale so the target is covered, then a
/// centered crop.
struct ResizeCrop {
  double scale = 1.0;
  double offset_x = 0.0;  // crop origin in scaled pixels
  double offset_y = 0.0;

  static ResizeCrop make(int src_w, int src_h, std::size_t out_w, std::size_t out_h);
  /// Source pixel coordinate of the center of network pixel (x, y).
  double source_x(std::size_t x) const { return (static_cast<double>(x) + 0.5 + offset_x) / scale - 0.5; }
  double source_y(std::size_t y) const { return (static_cast<double>(y) + 0.5 + offset_y) / scale - 0.5; }
};

/// CHW floats in [0,1], bilinear resample plus center crop. `pixels` is
/// interleaved; channels != 3 is rejected.
std::vector<float> preprocess(std::span<const std::uint8_t> pixels, int width, int height, int channels,
                              std::size_t out_h, std::size_t out_w);
std::vector<float> preprocess(const RgbImage& image, std::size_t out_h, std::size_t out_w);
/// Ground-truth mask at network resolution: bilinear resample, threshold 0.5.
std::vector<std::uint8_t> preprocess_mask(const Mask& mask, std::size_t out_h, std::size_t out_w);

}  // namespace armsight::net
