#include "armsight/multinet.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "armsight/robot.hpp"

namespace armsight::net {

using nlohmann::json;

std::string to_string(LayerGroup group) {
  switch (group) {
    case LayerGroup::trunk_frozen: return "trunk_frozen";
    case LayerGroup::stage2_unlockable: return "stage2_unlockable";
    case LayerGroup::stage1_trainable: return "stage1_trainable";
  }
  return "unknown";
}

LayerGroup layer_group_from_string(const std::string& s) {
  for (auto g : {LayerGroup::trunk_frozen, LayerGroup::stage2_unlockable, LayerGroup::stage1_trainable}) {
    if (to_string(g) == s) return g;
  }
  throw std::invalid_argument("unknown layer group '" + s + "'");
}

std::size_t LayerSpec::parameter_count() const {
  return kind == LayerKind::conv3x3 ? out * in * 9 + out : out * in + out;
}

ArchitectureDescriptor ArchitectureDescriptor::desk_scale() { return {}; }

ArchitectureDescriptor ArchitectureDescriptor::paper_scale() {
  ArchitectureDescriptor d;
  d.input_h = 212;
  d.input_w = 256;
  return d;
}

std::size_t ArchitectureDescriptor::trunk_h() const { return input_h >> trunk_channels.size(); }
std::size_t ArchitectureDescriptor::trunk_w() const { return input_w >> trunk_channels.size(); }

std::vector<LayerSpec> ArchitectureDescriptor::layers() const {
  using enum LayerGroup;
  std::vector<LayerSpec> out;
  std::size_t c = 3;
  for (std::size_t i = 0; i < trunk_channels.size(); ++i) {
    const bool last = i + 1 == trunk_channels.size();
    out.push_back({"trunk" + std::to_string(i + 1), LayerKind::conv3x3, c, trunk_channels[i],
                   last ? stage2_unlockable : trunk_frozen});
    c = trunk_channels[i];
  }
  const std::size_t trunk_c = c;
  out.push_back({"mask_conv1", LayerKind::conv3x3, trunk_c, mask_channels, stage2_unlockable});
  out.push_back({"mask_conv2", LayerKind::conv3x3, mask_channels, mask_channels, stage2_unlockable});
  c = mask_channels;
  for (std::size_t i = 0; i < decoder_channels.size(); ++i) {
    out.push_back({"mask_up" + std::to_string(i + 1), LayerKind::conv3x3, c, decoder_channels[i],
                   stage2_unlockable});
    c = decoder_channels[i];
  }
  out.push_back({"mask_out", LayerKind::conv3x3, c, 1, stage1_trainable});
  const std::size_t flat = trunk_c * trunk_h() * trunk_w();
  out.push_back({"joint_fc", LayerKind::dense, flat, dense_width, stage2_unlockable});
  out.push_back({"joint_out", LayerKind::dense, dense_width, 3 * max_joints, stage1_trainable});
  out.push_back({"base_fc", LayerKind::dense, flat, dense_width, stage2_unlockable});
  out.push_back({"base_out", LayerKind::dense, dense_width, 3, stage1_trainable});
  out.push_back({"type_fc", LayerKind::dense, flat, dense_width, stage2_unlockable});
  out.push_back({"type_out", LayerKind::dense, dense_width, num_classes, stage1_trainable});
  return out;
}

std::size_t ArchitectureDescriptor::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers()) n += l.parameter_count();
  return n;
}

void ArchitectureDescriptor::validate() const {
  if (trunk_channels.empty()) throw std::invalid_argument("architecture: trunk needs at least one block");
  if (decoder_channels.empty()) throw std::invalid_argument("architecture: decoder needs at least one stage");
  if (trunk_h() < 1 || trunk_w() < 1) {
    throw std::invalid_argument("architecture: input " + std::to_string(input_w) + "x" +
                                std::to_string(input_h) + " too small for " +
                                std::to_string(trunk_channels.size()) + " pooling blocks");
  }
  const auto nonzero = [](std::size_t v) { return v > 0; };
  if (!std::all_of(trunk_channels.begin(), trunk_channels.end(), nonzero) ||
      !std::all_of(decoder_channels.begin(), decoder_channels.end(), nonzero) || mask_channels == 0 ||
      dense_width == 0) {
    throw std::invalid_argument("architecture: layer widths must be positive");
  }
  if (max_joints != 7) throw std::invalid_argument("architecture: joint head needs max_joints = 7");
  if (num_classes < 1) throw std::invalid_argument("architecture: at least one class");
  if (joint_offset.size() != 3 * max_joints || joint_scale.size() != 3 * max_joints ||
      base_offset.size() != 3 || base_scale.size() != 3) {
    throw std::invalid_argument("architecture: output map sizes do not match the heads");
  }
}

json ArchitectureDescriptor::to_json() const {
  return {{"input_h", input_h},
          {"input_w", input_w},
          {"trunk_channels", trunk_channels},
          {"mask_channels", mask_channels},
          {"decoder_channels", decoder_channels},
          {"dense_width", dense_width},
          {"max_joints", max_joints},
          {"num_classes", num_classes},
          {"joint_offset", joint_offset},
          {"joint_scale", joint_scale},
          {"base_offset", base_offset},
          {"base_scale", base_scale}};
}

ArchitectureDescriptor ArchitectureDescriptor::from_json(const json& j) {
  static const std::vector<std::string> known{"input_h",     "input_w",      "trunk_channels", "mask_channels",
                                              "decoder_channels", "dense_width", "max_joints", "num_classes",
                                              "joint_offset", "joint_scale", "base_offset",   "base_scale"};
  for (const auto& [key, value] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw std::invalid_argument("architecture: unknown key '" + key + "'");
    }
  }
  ArchitectureDescriptor d;
  d.input_h = j.value("input_h", d.input_h);
  d.input_w = j.value("input_w", d.input_w);
  d.trunk_channels = j.value("trunk_channels", d.trunk_channels);
  d.mask_channels = j.value("mask_channels", d.mask_channels);
  d.decoder_channels = j.value("decoder_channels", d.decoder_channels);
  d.dense_width = j.value("dense_width", d.dense_width);
  d.max_joints = j.value("max_joints", d.max_joints);
  d.num_classes = j.value("num_classes", d.num_classes);
  d.joint_offset = j.value("joint_offset", d.joint_offset);
  d.joint_scale = j.value("joint_scale", d.joint_scale);
  d.base_offset = j.value("base_offset", d.base_offset);
  d.base_scale = j.value("base_scale", d.base_scale);
  d.validate();
  return d;
}

// ---------------------------------------------------------------------------

namespace {

void he_uniform(std::span<float> values, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (auto& v : values) v = static_cast<float>(u(rng));
}

std::size_t fan_in(const LayerSpec& s) { return s.kind == LayerKind::conv3x3 ? s.in * 9 : s.in; }

Layer make_layer(const LayerSpec& spec, std::mt19937_64& rng) {
  Layer l;
  l.spec = spec;
  const ad::Shape wshape = spec.kind == LayerKind::conv3x3 ? ad::Shape{spec.out, spec.in, 3, 3}
                                                           : ad::Shape{spec.out, spec.in};
  l.weight = Tensorf::variable(wshape, {}, spec.name + ".weight");
  l.bias = Tensorf::variable({spec.out}, {}, spec.name + ".bias");
  he_uniform(l.weight.values(), fan_in(spec), rng);
  return l;
}

/// y[b, j] = offset[j] + scale[j] * x[b, j].
Tensorf column_affine(Graphf& g, const Tensorf& x, const std::vector<float>& offset,
                      const std::vector<float>& scale) {
  const std::size_t b = x.dim(0), f = x.dim(1);
  if (offset.size() != f || scale.size() != f) {
    throw ad::ShapeError("column_affine: " + std::to_string(f) + " columns vs map of " +
                         std::to_string(offset.size()));
  }
  const bool grad = g.wants_grad({&x});
  auto y = Tensorf::intermediate({b, f}, grad);
  auto xv = x.values();
  auto yv = y.values();
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < f; ++j) yv[i * f + j] = offset[j] + scale[j] * xv[i * f + j];
  }
  if (!grad) return y;
  g.record(ad::OpKind::custom, {x.id()}, y, [x, y, scale, b, f]() mutable {
    auto dy = y.grad();
    auto dx = x.grad();
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t j = 0; j < f; ++j) dx[i * f + j] += scale[j] * dy[i * f + j];
    }
  }, "column_affine");
  return y;
}

}  // namespace

Network::Network(ArchitectureDescriptor descriptor, std::vector<std::string> classes, std::uint64_t seed)
    : desc_(std::move(descriptor)), classes_(std::move(classes)) {
  desc_.num_classes = classes_.size();
  desc_.validate();
  std::mt19937_64 rng(seed);
  for (const auto& spec : desc_.layers()) layers_.push_back(make_layer(spec, rng));
}

const Layer& Network::layer(const std::string& name) const {
  for (const auto& l : layers_) {
    if (l.spec.name == name) return l;
  }
  throw std::out_of_range("no layer named '" + name + "'");
}

std::vector<Tensorf> Network::parameters() const {
  std::vector<Tensorf> out;
  for (const auto& l : layers_) {
    out.push_back(l.weight);
    out.push_back(l.bias);
  }
  return out;
}

std::vector<Tensorf> Network::parameters(LayerGroup group) const {
  std::vector<Tensorf> out;
  for (const auto& l : layers_) {
    if (l.spec.group != group) continue;
    out.push_back(l.weight);
    out.push_back(l.bias);
  }
  return out;
}

void Network::set_trainable_groups(std::initializer_list<LayerGroup> trainable) {
  for (auto& l : layers_) {
    const bool on = std::find(trainable.begin(), trainable.end(), l.spec.group) != trainable.end();
    l.weight.set_frozen(!on);
    l.bias.set_frozen(!on);
  }
}

void Network::zero_grad() {
  for (auto& l : layers_) {
    l.weight.zero_grad();
    l.bias.zero_grad();
  }
}

Tensorf Network::conv(Graphf& g, const std::string& name, const Tensorf& x) const {
  const auto& l = layer(name);
  return ad::conv2d(g, x, l.weight, l.bias, 1, 1);
}

Tensorf Network::fc(Graphf& g, const std::string& name, const Tensorf& x) const {
  const auto& l = layer(name);
  return ad::dense(g, x, l.weight, l.bias);
}

HeadFeatures Network::features(Graphf& g, const Tensorf& x) const {
  if (x.rank() != 4 || x.dim(1) != 3 || x.dim(2) != desc_.input_h || x.dim(3) != desc_.input_w) {
    throw ad::ShapeError("network input must be [B,3," + std::to_string(desc_.input_h) + "," +
                         std::to_string(desc_.input_w) + "], got " + ad::to_string(x.shape()));
  }
  Tensorf h = x;
  for (std::size_t i = 0; i < desc_.trunk_channels.size(); ++i) {
    h = ad::max_pool2x2(g, ad::relu(g, conv(g, "trunk" + std::to_string(i + 1), h)));
  }
  Tensorf m = ad::relu(g, conv(g, "mask_conv1", h));
  m = ad::relu(g, conv(g, "mask_conv2", m));
  for (std::size_t i = 0; i < desc_.decoder_channels.size(); ++i) {
    m = ad::relu(g, conv(g, "mask_up" + std::to_string(i + 1), ad::nearest_upsample2x(g, m)));
  }
  const Tensorf flat = ad::flatten(g, h);
  HeadFeatures f;
  f.mask = m;
  f.joint = ad::relu(g, fc(g, "joint_fc", flat));
  f.base = ad::relu(g, fc(g, "base_fc", flat));
  f.type = ad::relu(g, fc(g, "type_fc", flat));
  return f;
}

NetworkOutputs Network::heads(Graphf& g, const HeadFeatures& f) const {
  NetworkOutputs out;
  out.mask_logits = ad::resize_bilinear(g, conv(g, "mask_out", f.mask), desc_.input_h, desc_.input_w);
  out.mask_prob = ad::sigmoid(g, out.mask_logits);
  out.joints = column_affine(g, fc(g, "joint_out", f.joint), desc_.joint_offset, desc_.joint_scale);
  out.base = column_affine(g, fc(g, "base_out", f.base), desc_.base_offset, desc_.base_scale);
  out.type_dist = ad::softmax(g, fc(g, "type_out", f.type));
  return out;
}

NetworkOutputs Network::forward(Graphf& g, const Tensorf& x) const { return heads(g, features(g, x)); }

void Network::extend_classes(const std::vector<std::string>& classes, std::uint64_t seed) {
  for (const auto& c : classes_) {
    if (std::find(classes.begin(), classes.end(), c) == classes.end()) {
      throw std::invalid_argument("class '" + c + "' of the network is missing from the new class list");
    }
  }
  auto it = std::find_if(layers_.begin(), layers_.end(), [](const Layer& l) { return l.spec.name == "type_out"; });
  const Layer old = *it;
  LayerSpec spec = old.spec;
  spec.out = classes.size();
  std::mt19937_64 rng(seed);
  Layer grown = make_layer(spec, rng);
  const std::size_t width = spec.in;
  for (std::size_t r = 0; r < classes.size(); ++r) {
    const auto pos = std::find(classes_.begin(), classes_.end(), classes[r]);
    if (pos == classes_.end()) continue;
    const auto src = static_cast<std::size_t>(pos - classes_.begin());
    std::copy_n(old.weight.values().begin() + static_cast<std::ptrdiff_t>(src * width), width,
                grown.weight.values().begin() + static_cast<std::ptrdiff_t>(r * width));
    grown.bias.values()[r] = old.bias.values()[src];
  }
  grown.weight.set_frozen(old.weight.frozen());
  grown.bias.set_frozen(old.bias.frozen());
  *it = std::move(grown);
  classes_ = classes;
  desc_.num_classes = classes.size();
}

void Network::set_output_maps(std::vector<float> joint_offset, std::vector<float> joint_scale,
                              std::vector<float> base_offset, std::vector<float> base_scale) {
  auto d = desc_;
  d.joint_offset = std::move(joint_offset);
  d.joint_scale = std::move(joint_scale);
  d.base_offset = std::move(base_offset);
  d.base_scale = std::move(base_scale);
  d.validate();
  desc_ = std::move(d);
}

int joint_slots(const std::string& class_name) {
  return static_cast<int>(scene::catalog_model(class_name).dof());
}

std::vector<float> select_joint_outputs(std::span<const float> joints_row, const std::string& class_name) {
  const auto n = static_cast<std::size_t>(joint_slots(class_name)) * 3;
  if (joints_row.size() < n) {
    throw ad::ShapeError("joint head row has " + std::to_string(joints_row.size()) + " values, class '" +
                         class_name + "' needs " + std::to_string(n));
  }
  return {joints_row.begin(), joints_row.begin() + static_cast<std::ptrdiff_t>(n)};
}

// ---------------------------------------------------------------------------

ResizeCrop ResizeCrop::make(int src_w, int src_h, std::size_t out_w, std::size_t out_h) {
  if (src_w <= 0 || src_h <= 0 || out_w == 0 || out_h == 0) {
    throw std::invalid_argument("resize: sizes must be positive");
  }
  ResizeCrop rc;
  rc.scale = std::max(static_cast<double>(out_w) / src_w, static_cast<double>(out_h) / src_h);
  rc.offset_x = (src_w * rc.scale - static_cast<double>(out_w)) / 2.0;
  rc.offset_y = (src_h * rc.scale - static_cast<double>(out_h)) / 2.0;
  return rc;
}

namespace {

struct Tap2 {
  int i0, i1;
  double t;
};

Tap2 tap(double s, int size) {
  s = std::clamp(s, 0.0, static_cast<double>(size - 1));
  const int i0 = static_cast<int>(std::floor(s));
  const int i1 = std::min(i0 + 1, size - 1);
  return {i0, i1, s - i0};
}

}  // namespace

std::vector<float> preprocess(std::span<const std::uint8_t> pixels, int width, int height, int channels,
                              std::size_t out_h, std::size_t out_w) {
  if (channels != 3) {
    throw std::invalid_argument("preprocess: expected 3 channels, got " + std::to_string(channels));
  }
  if (pixels.size() != static_cast<std::size_t>(width) * height * 3) {
    throw std::invalid_argument("preprocess: pixel buffer does not match " + std::to_string(width) + "x" +
                                std::to_string(height));
  }
  const auto rc = ResizeCrop::make(width, height, out_w, out_h);
  std::vector<float> out(3 * out_h * out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const Tap2 ty = tap(rc.source_y(y), height);
    for (std::size_t x = 0; x < out_w; ++x) {
      const Tap2 tx = tap(rc.source_x(x), width);
      for (int c = 0; c < 3; ++c) {
        const auto at = [&](int px, int py) {
          return static_cast<double>(pixels[(static_cast<std::size_t>(py) * width + px) * 3 + c]);
        };
        const double top = at(tx.i0, ty.i0) * (1 - tx.t) + at(tx.i1, ty.i0) * tx.t;
        const double bot = at(tx.i0, ty.i1) * (1 - tx.t) + at(tx.i1, ty.i1) * tx.t;
        out[(static_cast<std::size_t>(c) * out_h + y) * out_w + x] =
            static_cast<float>((top * (1 - ty.t) + bot * ty.t) / 255.0);
      }
    }
  }
  return out;
}

std::vector<float> preprocess(const RgbImage& image, std::size_t out_h, std::size_t out_w) {
  return preprocess(image.data, image.width, image.height, 3, out_h, out_w);
}

std::vector<std::uint8_t> preprocess_mask(const Mask& mask, std::size_t out_h, std::size_t out_w) {
  const auto rc = ResizeCrop::make(mask.width, mask.height, out_w, out_h);
  std::vector<std::uint8_t> out(out_h * out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const Tap2 ty = tap(rc.source_y(y), mask.height);
    for (std::size_t x = 0; x < out_w; ++x) {
      const Tap2 tx = tap(rc.source_x(x), mask.width);
      const double top = mask.at(tx.i0, ty.i0) * (1 - tx.t) + mask.at(tx.i1, ty.i0) * tx.t;
      const double bot = mask.at(tx.i0, ty.i1) * (1 - tx.t) + mask.at(tx.i1, ty.i1) * tx.t;
      out[y * out_w + x] = (top * (1 - ty.t) + bot * ty.t) >= 0.5 ? 1 : 0;
    }
  }
  return out;
}

}  // namespace armsight::net
