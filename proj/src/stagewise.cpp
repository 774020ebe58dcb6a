#include "armsight/stagewise.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <set>

#include "armsight/image.hpp"
#include "armsight/parallel.hpp"
#include "armsight/robot.hpp"

namespace armsight::train {

using nlohmann::json;
using net::LayerGroup;
using net::Network;
using net::Tensorf;

void TrainConfig::validate() const {
  if (!(lr_start > lr_end && lr_end > 0)) throw std::invalid_argument("config: need lr_start > lr_end > 0");
  if (total_iters < 1) throw std::invalid_argument("config: total_iters must be positive");
  if (batch_size < 1) throw std::invalid_argument("config: batch_size must be positive");
  if (plateau_window < 100) throw std::invalid_argument("config: plateau_window must be at least 100");
  if (!(plateau_tau > 0 && plateau_tau < 1)) throw std::invalid_argument("config: plateau_tau must lie in (0, 1)");
  if (stage1_cap < 1 || stage2_extra_iters < 1) {
    throw std::invalid_argument("config: stage1_cap and stage2_extra_iters must be positive");
  }
  if (optimizer != "sgd" && optimizer != "adam") {
    throw std::invalid_argument("config: optimizer must be 'sgd' or 'adam', got '" + optimizer + "'");
  }
  if (!(momentum >= 0 && momentum < 1)) throw std::invalid_argument("config: momentum must lie in [0, 1)");
  if (!(weight_decay >= 0)) throw std::invalid_argument("config: weight_decay must be non-negative");
  if (!(augment_roll_deg >= 0 && augment_roll_deg <= 180)) {
    throw std::invalid_argument("config: augment_roll_deg must lie in [0, 180]");
  }
  if (!(augment_color >= 0 && augment_color < 1)) throw std::invalid_argument("config: augment_color must lie in [0, 1)");
  if (class_weight_scope != "dataset" && class_weight_scope != "batch") {
    throw std::invalid_argument("config: class_weight_scope must be 'dataset' or 'batch'");
  }
  const auto& w = loss_weights;
  if (w.mask < 0 || w.jcoords < 0 || w.bcoords < 0 || w.type < 0) {
    throw std::invalid_argument("config: loss weights must be non-negative");
  }
}

json TrainConfig::to_json() const {
  return {{"lr_start", lr_start},
          {"lr_end", lr_end},
          {"total_iters", total_iters},
          {"batch_size", batch_size},
          {"plateau_window", plateau_window},
          {"plateau_tau", plateau_tau},
          {"stage1_cap", stage1_cap},
          {"stage2_extra_iters", stage2_extra_iters},
          {"stop_on_plateau", stop_on_plateau},
          {"loss_weights",
           {{"mask", loss_weights.mask},
            {"jcoords", loss_weights.jcoords},
            {"bcoords", loss_weights.bcoords},
            {"type", loss_weights.type}}},
          {"optimizer", optimizer},
          {"momentum", momentum},
          {"class_weight_scope", class_weight_scope},
          {"weight_decay", weight_decay},
          {"augment_flip", augment_flip},
          {"augment_roll_deg", augment_roll_deg},
          {"augment_color", augment_color},
          {"seed", seed}};
}

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; })) {
      throw std::invalid_argument(where + ": unknown key '" + key + "'");
    }
  }
}

}  // namespace

TrainConfig TrainConfig::from_json(const json& j) {
  reject_unknown(j,
                 {"lr_start", "lr_end", "total_iters", "batch_size", "plateau_window", "plateau_tau", "stage1_cap",
                  "stage2_extra_iters", "stop_on_plateau", "loss_weights", "optimizer", "momentum", "class_weight_scope",
                  "weight_decay", "augment_flip", "augment_roll_deg", "augment_color", "seed"},
                 "train config");
  TrainConfig c;
  c.lr_start = j.value("lr_start", c.lr_start);
  c.lr_end = j.value("lr_end", c.lr_end);
  c.total_iters = j.value("total_iters", c.total_iters);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.plateau_window = j.value("plateau_window", c.plateau_window);
  c.plateau_tau = j.value("plateau_tau", c.plateau_tau);
  c.stage1_cap = j.value("stage1_cap", c.stage1_cap);
  c.stage2_extra_iters = j.value("stage2_extra_iters", c.stage2_extra_iters);
  c.stop_on_plateau = j.value("stop_on_plateau", c.stop_on_plateau);
  if (j.contains("loss_weights")) {
    const auto& w = j.at("loss_weights");
    reject_unknown(w, {"mask", "jcoords", "bcoords", "type"}, "loss_weights");
    c.loss_weights.mask = w.value("mask", c.loss_weights.mask);
    c.loss_weights.jcoords = w.value("jcoords", c.loss_weights.jcoords);
    c.loss_weights.bcoords = w.value("bcoords", c.loss_weights.bcoords);
    c.loss_weights.type = w.value("type", c.loss_weights.type);
  }
  c.optimizer = j.value("optimizer", c.optimizer);
  c.momentum = j.value("momentum", c.momentum);
  c.class_weight_scope = j.value("class_weight_scope", c.class_weight_scope);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.augment_flip = j.value("augment_flip", c.augment_flip);
  c.augment_roll_deg = j.value("augment_roll_deg", c.augment_roll_deg);
  c.augment_color = j.value("augment_color", c.augment_color);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

double lr_schedule(int iter, int total_iters, double lr_start, double lr_end) {
  if (total_iters < 1) throw std::invalid_argument("lr_schedule: total_iters must be positive");
  const double t = std::clamp(static_cast<double>(iter) / total_iters, 0.0, 1.0);
  return lr_start * std::pow(lr_end / lr_start, t);
}

double lr_schedule(int iter, const TrainConfig& c) { return lr_schedule(iter, c.total_iters, c.lr_start, c.lr_end); }

bool plateau_detector(std::span<const double> history, int window, double tau) {
  if (window < 1) throw std::invalid_argument("plateau_detector: window must be positive");
  const auto w = static_cast<std::size_t>(window);
  if (history.size() < 2 * w) return false;
  const auto latest = history.subspan(history.size() - w, w);
  const auto previous = history.subspan(history.size() - 2 * w, w);
  const double prev = std::accumulate(previous.begin(), previous.end(), 0.0) / static_cast<double>(w);
  const double last = std::accumulate(latest.begin(), latest.end(), 0.0) / static_cast<double>(w);
  return (prev - last) / prev < tau;
}

json LogRecord::to_json() const {
  return {{"iter", iter},     {"stage", stage},       {"mask", loss.mask},   {"jcoords", loss.jcoords},
          {"bcoords", loss.bcoords}, {"type", loss.type}, {"final", loss.final}, {"lr", lr}};
}

std::vector<std::string> families(const std::vector<std::string>& classes) {
  std::vector<std::string> out;
  for (const auto& c : classes) {
    const auto& f = scene::catalog_model(c).family;
    if (std::find(out.begin(), out.end(), f) == out.end()) out.push_back(f);
  }
  return out;
}

// ---------------------------------------------------------------------------

TrainingSet TrainingSet::subset(std::span<const std::size_t> indices) const {
  TrainingSet s;
  s.h = h;
  s.w = w;
  s.classes = classes;
  const std::size_t in = input_size(), ms = mask_size();
  for (auto i : indices) {
    if (i >= size()) throw std::out_of_range("subset index " + std::to_string(i) + " out of range");
    s.ids.push_back(ids[i]);
    s.inputs.insert(s.inputs.end(), inputs.begin() + static_cast<std::ptrdiff_t>(i * in),
                    inputs.begin() + static_cast<std::ptrdiff_t>((i + 1) * in));
    s.masks.insert(s.masks.end(), masks.begin() + static_cast<std::ptrdiff_t>(i * ms),
                   masks.begin() + static_cast<std::ptrdiff_t>((i + 1) * ms));
    s.joints.insert(s.joints.end(), joints.begin() + static_cast<std::ptrdiff_t>(i * 21),
                    joints.begin() + static_cast<std::ptrdiff_t>((i + 1) * 21));
    s.base.insert(s.base.end(), base.begin() + static_cast<std::ptrdiff_t>(i * 3),
                  base.begin() + static_cast<std::ptrdiff_t>((i + 1) * 3));
    s.labels.push_back(labels[i]);
    s.joint_counts.push_back(joint_counts[i]);
    s.distances.push_back(distances[i]);
  }
  return s;
}

loss::ClassWeights TrainingSet::class_weights() const {
  if (masks.empty()) throw std::invalid_argument("class weights need at least one mask");
  std::uint64_t fg = 0;
  for (float v : masks) fg += v > 0.5f;
  if (fg == 0 || fg == masks.size()) {
    throw std::invalid_argument("training masks are all " + std::string(fg == 0 ? "background" : "foreground") +
                                "; class weights undefined");
  }
  return loss::ClassWeights::from_probability(static_cast<double>(fg) / static_cast<double>(masks.size()));
}

TrainingSet load_split(const std::filesystem::path& dir, const scene::Manifest& manifest, const std::string& split,
                       const std::vector<std::string>& classes, std::size_t h, std::size_t w, int threads) {
  std::vector<const scene::SampleRecord*> records;
  for (const auto& s : manifest.samples) {
    if (s.split == split) records.push_back(&s);
  }
  if (records.empty()) throw DataContractError("dataset has no '" + split + "' samples");
  std::vector<int> label_of(manifest.classes.size(), -1);
  for (std::size_t c = 0; c < manifest.classes.size(); ++c) {
    const auto it = std::find(classes.begin(), classes.end(), manifest.classes[c]);
    if (it != classes.end()) label_of[c] = static_cast<int>(it - classes.begin());
  }

  TrainingSet set;
  set.h = h;
  set.w = w;
  set.classes = classes;
  const std::size_t n = records.size();
  set.ids.resize(n);
  set.inputs.resize(n * set.input_size());
  set.masks.resize(n * set.mask_size());
  set.joints.assign(n * 21, 0.0f);
  set.base.resize(n * 3);
  set.labels.resize(n);
  set.joint_counts.resize(n);
  set.distances.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& r = *records[i];
    const int label = label_of.at(static_cast<std::size_t>(r.robot_type));
    if (label < 0) {
      throw DataContractError("dataset class '" + manifest.classes[static_cast<std::size_t>(r.robot_type)] +
                              "' is not among the network classes");
    }
    if (r.joints_cam.size() > 7 || r.joints_cam.empty()) {
      throw DataContractError("sample " + std::to_string(r.id) + " has " + std::to_string(r.joints_cam.size()) +
                              " joints");
    }
    set.ids[i] = r.id;
    set.labels[i] = label;
    set.joint_counts[i] = static_cast<int>(r.joints_cam.size());
    set.distances[i] = r.distance;
    for (std::size_t j = 0; j < r.joints_cam.size(); ++j) {
      for (int k = 0; k < 3; ++k) set.joints[i * 21 + j * 3 + static_cast<std::size_t>(k)] = static_cast<float>(r.joints_cam[j][k]);
    }
    for (int k = 0; k < 3; ++k) set.base[i * 3 + static_cast<std::size_t>(k)] = static_cast<float>(r.base_cam[k]);
  }
  parallel_for(n, threads, [&](std::size_t i) {
    const auto& r = *records[i];
    const auto image = read_ppm(dir / r.image);
    const auto mask = read_pgm(dir / r.mask);
    const auto x = net::preprocess(image, h, w);
    std::copy(x.begin(), x.end(), set.inputs.begin() + static_cast<std::ptrdiff_t>(i * set.input_size()));
    const auto m = net::preprocess_mask(mask, h, w);
    std::transform(m.begin(), m.end(), set.masks.begin() + static_cast<std::ptrdiff_t>(i * set.mask_size()),
                   [](std::uint8_t v) { return static_cast<float>(v); });
  });
  return set;
}

// ---------------------------------------------------------------------------
// Checkpoint file: "AMNT" | u32 version | u64 header length | JSON header | f32 blobs.

namespace {

constexpr char kMagic[4] = {'A', 'M', 'N', 'T'};

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <typename U>
U get_le(const std::uint8_t* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

constexpr const char* kHeaderDigestKey = "header_sha256";

// Offset of the 64 hex digits of the header digest, npos when absent.
std::size_t digest_position(const std::string& text) {
  const std::string key = std::string("\"") + kHeaderDigestKey + "\":\"";
  const auto k = text.find(key);
  if (k == std::string::npos || k + key.size() + 64 > text.size()) return std::string::npos;
  return k + key.size();
}

std::string float_blob(std::span<const float> values) {
  std::string out(values.size() * 4, '\0');
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(values[i]);
    for (int b = 0; b < 4; ++b) out[i * 4 + static_cast<std::size_t>(b)] = static_cast<char>((bits >> (8 * b)) & 0xFF);
  }
  return out;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  json header;
  header["kind"] = ck.kind;
  header["classes"] = ck.classes;
  header["meta"] = ck.meta;
  json tensors = json::array();
  std::string blobs;
  if (ck.kind == "network") {
    header["descriptor"] = ck.network.descriptor().to_json();
    json tags = json::object();
    for (const auto& l : ck.network.layers()) tags[l.spec.name] = net::to_string(l.spec.group);
    header["tags"] = tags;
    for (const auto& t : ck.network.parameters()) {
      const std::string blob = float_blob(t.values());
      tensors.push_back({{"name", t.name()},
                         {"shape", t.shape()},
                         {"byte_len", blob.size()},
                         {"sha256", sha256_hex(reinterpret_cast<const std::uint8_t*>(blob.data()), blob.size())}});
      blobs += blob;
    }
  } else if (ck.kind != "oracle_stub") {
    throw CheckpointError("unknown checkpoint kind '" + ck.kind + "'");
  }
  header["tensors"] = tensors;
  // The header digest covers the raw header text with its own value zeroed.
  header[kHeaderDigestKey] = std::string(64, '0');
  std::string text = header.dump();
  const auto at = digest_position(text);
  text.replace(at, 64, sha256_hex(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  std::string out(kMagic, 4);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint64_t>(out, text.size());
  out += text;
  out += blobs;
  write_file(path, out);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  const std::string where = path.string();
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw CheckpointError(where + ": not a checkpoint (bad magic)");
  }
  const auto version = get_le<std::uint32_t>(bytes.data() + 4);
  if (version != kCheckpointVersion) {
    throw CheckpointError(where + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto header_len = get_le<std::uint64_t>(bytes.data() + 8);
  if (header_len > bytes.size() - 16) throw CheckpointError(where + ": truncated header");
  std::string text(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
  const auto at = digest_position(text);
  if (at == std::string::npos) throw CheckpointError(where + ": header has no digest");
  const std::string stored = text.substr(at, 64);
  text.replace(at, 64, std::string(64, '0'));
  if (sha256_hex(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()) != stored) {
    throw CheckpointError(where + ": header checksum mismatch");
  }
  json header;
  try {
    header = json::parse(text);
  } catch (const json::exception& e) {
    throw CheckpointError(where + ": corrupt header: " + e.what());
  }
  Checkpoint ck;
  try {
    ck.kind = header.at("kind").get<std::string>();
    ck.classes = header.at("classes").get<std::vector<std::string>>();
    ck.meta = header.value("meta", json::object());
  } catch (const json::exception& e) {
    throw CheckpointError(where + ": malformed header: " + e.what());
  }
  std::size_t offset = 16 + header_len;
  if (ck.kind == "oracle_stub") {
    if (offset != bytes.size()) throw CheckpointError(where + ": trailing bytes after header");
    return ck;
  }
  if (ck.kind != "network") throw CheckpointError(where + ": unknown checkpoint kind '" + ck.kind + "'");

  try {
    ck.network = Network(net::ArchitectureDescriptor::from_json(header.at("descriptor")), ck.classes, 0);
  } catch (const std::exception& e) {
    throw CheckpointError(where + ": bad architecture descriptor: " + e.what());
  }
  const auto& tags = header.at("tags");
  for (const auto& l : ck.network.layers()) {
    if (!tags.contains(l.spec.name) || tags.at(l.spec.name).get<std::string>() != net::to_string(l.spec.group)) {
      throw CheckpointError(where + ": layer-group tag mismatch for " + l.spec.name);
    }
  }
  auto params = ck.network.parameters();
  const auto& entries = header.at("tensors");
  if (entries.size() != params.size()) {
    throw CheckpointError(where + ": expected " + std::to_string(params.size()) + " tensors, header lists " +
                          std::to_string(entries.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& t = params[i];
    const auto& e = entries[i];
    if (e.at("name").get<std::string>() != t.name() || e.at("shape").get<ad::Shape>() != t.shape()) {
      throw CheckpointError(where + ": tensor " + std::to_string(i) + " does not match the architecture (" +
                            t.name() + " " + ad::to_string(t.shape()) + ")");
    }
    const auto len = e.at("byte_len").get<std::uint64_t>();
    if (len != t.numel() * 4) throw CheckpointError(where + ": byte length mismatch for " + t.name());
    if (len > bytes.size() - offset) throw CheckpointError(where + ": truncated blob for " + t.name());
    const std::uint8_t* p = bytes.data() + offset;
    if (sha256_hex(p, len) != e.at("sha256").get<std::string>()) {
      throw CheckpointError(where + ": checksum mismatch for " + t.name());
    }
    auto values = t.values();
    for (std::size_t k = 0; k < values.size(); ++k) values[k] = std::bit_cast<float>(get_le<std::uint32_t>(p + 4 * k));
    offset += len;
  }
  if (offset != bytes.size()) throw CheckpointError(where + ": trailing bytes after last tensor");
  return ck;
}

// ---------------------------------------------------------------------------
// Training engine.

namespace {

/// Seeded epoch-wise shuffling; batches never straddle epochs.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt);

class Batcher {
 public:
  Batcher(std::size_t n, std::size_t batch, std::uint64_t seed) : n_(n), batch_(std::min(batch, n)), rng_(seed) {
    reshuffle();
  }
  std::vector<std::size_t> next() {
    if (pos_ + batch_ > n_) reshuffle();
    std::vector<std::size_t> out(order_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                 order_.begin() + static_cast<std::ptrdiff_t>(pos_ + batch_));
    pos_ += batch_;
    return out;
  }

 private:
  void reshuffle() {
    order_.resize(n_);
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::shuffle(order_.begin(), order_.end(), rng_);
    pos_ = 0;
  }
  std::size_t n_, batch_, pos_ = 0;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
};

struct BatchTargets {
  std::vector<float> masks, joints, base;
  std::vector<int> labels, counts;
};

BatchTargets gather_targets(const TrainingSet& set, std::span<const std::size_t> idx) {
  BatchTargets t;
  const std::size_t ms = set.mask_size();
  for (auto i : idx) {
    t.masks.insert(t.masks.end(), set.masks.begin() + static_cast<std::ptrdiff_t>(i * ms),
                   set.masks.begin() + static_cast<std::ptrdiff_t>((i + 1) * ms));
    t.joints.insert(t.joints.end(), set.joints.begin() + static_cast<std::ptrdiff_t>(i * 21),
                    set.joints.begin() + static_cast<std::ptrdiff_t>((i + 1) * 21));
    t.base.insert(t.base.end(), set.base.begin() + static_cast<std::ptrdiff_t>(i * 3),
                  set.base.begin() + static_cast<std::ptrdiff_t>((i + 1) * 3));
    t.labels.push_back(set.labels[i]);
    t.counts.push_back(set.joint_counts[i]);
  }
  return t;
}

Tensorf gather_inputs(const TrainingSet& set, std::span<const std::size_t> idx) {
  const std::size_t in = set.input_size();
  std::vector<float> x;
  x.reserve(idx.size() * in);
  for (auto i : idx) {
    x.insert(x.end(), set.inputs.begin() + static_cast<std::ptrdiff_t>(i * in),
             set.inputs.begin() + static_cast<std::ptrdiff_t>((i + 1) * in));
  }
  return Tensorf::constant({idx.size(), 3, set.h, set.w}, std::move(x));
}

class Augmenter {
 public:
  Augmenter(const TrainConfig& c, std::size_t h, std::size_t w) : cfg_(c), h_(h), w_(w) {}

  bool active() const { return cfg_.augment_flip || cfg_.augment_roll_deg > 0 || cfg_.augment_color > 0; }

  void apply(std::vector<float>& inputs, BatchTargets& t, std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const std::size_t plane = h_ * w_;
    for (std::size_t n = 0; n < t.labels.size(); ++n) {
      AugmentDraw d;
      d.flip = cfg_.augment_flip && unit(rng) < 0.5;
      d.roll = (2.0 * unit(rng) - 1.0) * cfg_.augment_roll_deg * std::numbers::pi / 180.0;
      for (double& g : d.gain) g = 1.0 + (2.0 * unit(rng) - 1.0) * cfg_.augment_color;
      apply_augmentation(d, h_, w_, std::span<float>(inputs).subspan(n * 3 * plane, 3 * plane),
                         std::span<float>(t.masks).subspan(n * plane, plane),
                         std::span<float>(t.joints).subspan(n * 21, static_cast<std::size_t>(t.counts[n]) * 3),
                         std::span<float>(t.base).subspan(n * 3, 3));
    }
  }

 private:
  const TrainConfig& cfg_;
  std::size_t h_, w_;
};

loss::ClassWeights batch_weights(const std::vector<float>& masks) {
  std::uint64_t fg = 0;
  for (float v : masks) fg += v > 0.5f;
  const double p = std::clamp(static_cast<double>(fg) / static_cast<double>(masks.size()), 1e-4, 1.0 - 1e-4);
  return loss::ClassWeights::from_probability(p);
}

struct Losses {
  Tensorf total;
  loss::LossBreakdown breakdown;
};

Losses compose(net::Graphf& g, const net::NetworkOutputs& out, const BatchTargets& t, const loss::ClassWeights& cw,
               const loss::LossWeights& lw) {
  auto lm = loss::mask_loss<float>(g, out.mask_prob, t.masks, cw);
  auto lj = loss::joint_coords_loss<float>(g, out.joints, t.joints, t.counts);
  auto lb = loss::base_coords_loss<float>(g, out.base, t.base);
  auto lt = loss::type_loss<float>(g, out.type_dist, t.labels);
  Losses l;
  l.total = ad::weighted_sum<float>(g, {lm, lj, lb, lt},
                                    {static_cast<float>(lw.mask), static_cast<float>(lw.jcoords),
                                     static_cast<float>(lw.bcoords), static_cast<float>(lw.type)});
  const double m = lm.item(), j = lj.item(), b = lb.item(), ty = lt.item();
  l.breakdown = {m, j, b, ty, lw.mask * m + lw.jcoords * j + lw.bcoords * b + lw.type * ty};
  return l;
}

class Optimizer {
 public:
  Optimizer(const TrainConfig& c, std::vector<Tensorf> params) : decay_(c.weight_decay) {
    for (const auto& p : params) {
      if (p.name().ends_with(".weight")) decayed_.push_back(p);
    }
    if (c.optimizer == "adam") {
      adam_.emplace(std::move(params));
    } else {
      sgd_.emplace(std::move(params), static_cast<float>(c.momentum));
    }
  }
  void step(double lr) {
    if (decay_ > 0) {
      const auto keep = static_cast<float>(1.0 - lr * decay_);
      for (const auto& p : decayed_) {
        for (auto& v : p.values()) v *= keep;
      }
    }
    if (adam_) adam_->step(static_cast<float>(lr));
    if (sgd_) sgd_->step(static_cast<float>(lr));
  }

 private:
  double decay_;
  std::vector<Tensorf> decayed_;
  std::optional<ad::Adam<float>> adam_;
  std::optional<ad::SgdMomentum<float>> sgd_;
};

/// Stage-1 inputs of every sample, computed once while the layers that
/// produce them are frozen.
struct FeatureCache {
  std::size_t mask_size = 0, width = 0;
  ad::Shape mask_shape;  // per-sample [C,H,W]
  std::vector<float> mask, joint, base, type;

  net::HeadFeatures batch(std::span<const std::size_t> idx) const {
    const auto pick = [&](const std::vector<float>& src, std::size_t n) {
      std::vector<float> out;
      out.reserve(idx.size() * n);
      for (auto i : idx) {
        out.insert(out.end(), src.begin() + static_cast<std::ptrdiff_t>(i * n),
                   src.begin() + static_cast<std::ptrdiff_t>((i + 1) * n));
      }
      return out;
    };
    const std::size_t b = idx.size();
    net::HeadFeatures f;
    f.mask = Tensorf::constant({b, mask_shape[0], mask_shape[1], mask_shape[2]}, pick(mask, mask_size));
    f.joint = Tensorf::constant({b, width}, pick(joint, width));
    f.base = Tensorf::constant({b, width}, pick(base, width));
    f.type = Tensorf::constant({b, width}, pick(type, width));
    return f;
  }
};

FeatureCache build_cache(const Network& network, const TrainingSet& set, int threads) {
  FeatureCache cache;
  const auto& d = network.descriptor();
  cache.mask_shape = {d.decoder_channels.back(), d.trunk_h() << d.decoder_channels.size(),
                      d.trunk_w() << d.decoder_channels.size()};
  cache.mask_size = ad::numel(cache.mask_shape);
  cache.width = d.dense_width;
  const std::size_t n = set.size();
  cache.mask.resize(n * cache.mask_size);
  cache.joint.resize(n * cache.width);
  cache.base.resize(n * cache.width);
  cache.type.resize(n * cache.width);
  parallel_for(n, threads, [&](std::size_t i) {
    net::Graphf g(false);
    const std::size_t idx[1] = {i};
    const auto f = network.features(g, gather_inputs(set, idx));
    std::copy(f.mask.values().begin(), f.mask.values().end(), cache.mask.begin() + static_cast<std::ptrdiff_t>(i * cache.mask_size));
    std::copy(f.joint.values().begin(), f.joint.values().end(), cache.joint.begin() + static_cast<std::ptrdiff_t>(i * cache.width));
    std::copy(f.base.values().begin(), f.base.values().end(), cache.base.begin() + static_cast<std::ptrdiff_t>(i * cache.width));
    std::copy(f.type.values().begin(), f.type.values().end(), cache.type.begin() + static_cast<std::ptrdiff_t>(i * cache.width));
  });
  return cache;
}

struct StageSpec {
  int stage = 0;
  int first_iter = 0;
  int max_iters = 0;
  bool stop_on_plateau = false;
  std::uint64_t shuffle_seed = 0;
  const FeatureCache* cache = nullptr;
};

struct StageOutcome {
  int iterations = 0;
  bool plateaued = false;
};

StageOutcome run_stage(Network& network, const TrainingSet& set, const TrainConfig& cfg, const StageSpec& spec,
                       int schedule_total, const loss::ClassWeights& dataset_weights, std::vector<double>& history,
                       const LogSink& log) {
  std::vector<Tensorf> trainable;
  for (const auto& p : network.parameters()) {
    if (!p.frozen()) trainable.push_back(p);
  }
  Optimizer opt(cfg, trainable);
  Batcher batcher(set.size(), static_cast<std::size_t>(cfg.batch_size), spec.shuffle_seed);
  const Augmenter augmenter(cfg, set.h, set.w);
  std::vector<double> stage_history;
  StageOutcome outcome;
  for (int k = 0; k < spec.max_iters; ++k) {
    const int iter = spec.first_iter + k;
    const double lr = lr_schedule(iter, schedule_total, cfg.lr_start, cfg.lr_end);
    const auto idx = batcher.next();
    auto targets = gather_targets(set, idx);
    Tensorf inputs;
    if (!spec.cache) {
      inputs = gather_inputs(set, idx);
      if (augmenter.active()) {
        std::vector<float> x(inputs.values().begin(), inputs.values().end());
        augmenter.apply(x, targets, mix_seed(spec.shuffle_seed, static_cast<std::uint64_t>(iter) + 1));
        inputs = Tensorf::constant(inputs.shape(), std::move(x));
      }
    }
    const auto cw = cfg.class_weight_scope == "batch" ? batch_weights(targets.masks) : dataset_weights;

    net::Graphf g;
    const auto out = spec.cache ? network.heads(g, spec.cache->batch(idx)) : network.forward(g, inputs);
    auto losses = compose(g, out, targets, cw, cfg.loss_weights);
    if (!std::isfinite(losses.breakdown.final)) {
      json dump = {{"iter", iter},
                   {"stage", spec.stage},
                   {"lr", lr},
                   {"mask", losses.breakdown.mask},
                   {"jcoords", losses.breakdown.jcoords},
                   {"bcoords", losses.breakdown.bcoords},
                   {"type", losses.breakdown.type},
                   {"batch_ids", json::array()}};
      for (auto i : idx) dump["batch_ids"].push_back(set.ids[i]);
      throw DivergenceError("training diverged: non-finite loss at iteration " + std::to_string(iter), dump);
    }
    network.zero_grad();
    g.backward(losses.total);
    opt.step(lr);

    history.push_back(losses.breakdown.final);
    stage_history.push_back(losses.breakdown.final);
    if (log) log({iter, spec.stage, losses.breakdown, lr});
    outcome.iterations = k + 1;
    if (spec.stop_on_plateau && plateau_detector(stage_history, cfg.plateau_window, cfg.plateau_tau)) {
      outcome.plateaued = true;
      break;
    }
  }
  return outcome;
}

double tail_mean(const std::vector<double>& h, std::size_t window) {
  const std::size_t n = std::min(window, h.size());
  if (n == 0) return 0.0;
  return std::accumulate(h.end() - static_cast<std::ptrdiff_t>(n), h.end(), 0.0) / static_cast<double>(n);
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t x = seed ^ (salt * 0x9E3779B97F4A7C15ull);
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

}  // namespace

void apply_augmentation(const AugmentDraw& d, std::size_t h, std::size_t w, std::span<float> image,
                        std::span<float> mask, std::span<float> joints, std::span<float> base) {
  const std::size_t plane = h * w;
  if (image.size() != 3 * plane || mask.size() != plane || joints.size() % 3 != 0 || base.size() != 3) {
    throw std::invalid_argument("apply_augmentation: buffer sizes do not match the image");
  }
  if (d.flip || d.roll != 0.0) {
    const std::vector<float> src_img(image.begin(), image.end()), src_mask(mask.begin(), mask.end());
    const double cx = w / 2.0, cy = h / 2.0, cs = std::cos(d.roll), sn = std::sin(d.roll);
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        // Output pixel p takes the source value at flip(R(-roll) p), both about the centre.
        const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
        double sx = cs * dx + sn * dy;
        const double sy = -sn * dx + cs * dy;
        if (d.flip) sx = -sx;
        const double fx = sx + cx - 0.5, fy = sy + cy - 0.5;
        const double x0 = std::floor(fx), y0 = std::floor(fy), ax = fx - x0, ay = fy - y0;
        double acc[4] = {0, 0, 0, 0}, wsum = 0.0;
        for (int k = 0; k < 4; ++k) {
          const long xi = static_cast<long>(x0) + (k & 1), yi = static_cast<long>(y0) + (k >> 1);
          const double wt = ((k & 1) ? ax : 1 - ax) * ((k >> 1) ? ay : 1 - ay);
          if (wt == 0.0 || xi < 0 || yi < 0 || xi >= static_cast<long>(w) || yi >= static_cast<long>(h)) continue;
          const std::size_t si = static_cast<std::size_t>(yi) * w + static_cast<std::size_t>(xi);
          for (std::size_t c = 0; c < 3; ++c) acc[c] += wt * src_img[c * plane + si];
          acc[3] += wt * src_mask[si];
          wsum += wt;
        }
        // Outside the source: mid grey, background.
        const std::size_t o = y * w + x;
        for (std::size_t c = 0; c < 3; ++c) image[c * plane + o] = static_cast<float>(acc[c] + 0.5 * (1.0 - wsum));
        mask[o] = acc[3] >= 0.5 ? 1.0f : 0.0f;
      }
    }
  }
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < plane; ++i) {
      image[c * plane + i] = std::clamp(static_cast<float>(image[c * plane + i] * d.gain[c]), 0.0f, 1.0f);
    }
  }
  const double cs = std::cos(d.roll), sn = std::sin(d.roll);
  const auto move = [&](float* p) {
    const double x = d.flip ? -p[0] : p[0], y = p[1];
    p[0] = static_cast<float>(cs * x - sn * y);
    p[1] = static_cast<float>(sn * x + cs * y);
  };
  for (std::size_t j = 0; j < joints.size(); j += 3) move(&joints[j]);
  move(base.data());
}

void fit_output_maps(Network& network, const TrainingSet& set) {
  if (set.size() == 0) throw std::invalid_argument("fit_output_maps: empty training set");
  std::vector<double> sum(21, 0.0), sq(21, 0.0), count(21, 0.0);
  for (std::size_t i = 0; i < set.size(); ++i) {
    for (int j = 0; j < set.joint_counts[i]; ++j) {
      for (int k = 0; k < 3; ++k) {
        const std::size_t c = static_cast<std::size_t>(j * 3 + k);
        const double v = set.joints[i * 21 + c];
        sum[c] += v;
        sq[c] += v * v;
        count[c] += 1;
      }
    }
  }
  std::vector<float> joff(21), jsc(21);
  for (std::size_t c = 0; c < 21; ++c) {
    // Slots no training robot uses borrow the statistics of the previous joint.
    const std::size_t src = count[c] > 0 ? c : (c >= 3 ? c - 3 : c);
    if (count[src] == 0) {
      joff[c] = c >= 3 ? joff[c - 3] : 0.0f;
      jsc[c] = c >= 3 ? jsc[c - 3] : 1.0f;
      continue;
    }
    const double mean = sum[src] / count[src];
    const double var = std::max(0.0, sq[src] / count[src] - mean * mean);
    joff[c] = static_cast<float>(mean);
    jsc[c] = static_cast<float>(std::max(std::sqrt(var), 1e-3));
  }
  std::vector<float> boff(3), bsc(3);
  for (std::size_t k = 0; k < 3; ++k) {
    double s = 0, s2 = 0;
    for (std::size_t i = 0; i < set.size(); ++i) {
      s += set.base[i * 3 + k];
      s2 += static_cast<double>(set.base[i * 3 + k]) * set.base[i * 3 + k];
    }
    const double mean = s / static_cast<double>(set.size());
    boff[k] = static_cast<float>(mean);
    bsc[k] = static_cast<float>(std::max(std::sqrt(std::max(0.0, s2 / static_cast<double>(set.size()) - mean * mean)), 1e-3));
  }
  network.set_output_maps(joff, jsc, boff, bsc);
}

TrainResult pretrain(const TrainingSet& set, const TrainConfig& cfg, const net::ArchitectureDescriptor& descriptor,
                     const LogSink& log) {
  cfg.validate();
  if (set.size() == 0) throw DataContractError("pretraining set is empty");
  {
    std::set<std::string> fams;
    for (int l : set.labels) fams.insert(scene::catalog_model(set.classes[static_cast<std::size_t>(l)]).family);
    if (fams.size() > 1) {
      std::string list;
      for (const auto& f : fams) list += (list.empty() ? "" : ", ") + f;
      throw DataContractError("pretraining data must come from a single robot family, found: " + list);
    }
  }
  if (set.h != descriptor.input_h || set.w != descriptor.input_w) {
    throw DataContractError("training set resolution does not match the architecture input");
  }
  Network network(descriptor, set.classes, cfg.seed);
  fit_output_maps(network, set);
  network.set_trainable_groups({LayerGroup::trunk_frozen, LayerGroup::stage2_unlockable, LayerGroup::stage1_trainable});
  const auto cw = set.class_weights();

  TrainResult result;
  StageSpec spec{0, 0, cfg.total_iters, false, mix_seed(cfg.seed, 100), nullptr};
  const auto outcome = run_stage(network, set, cfg, spec, cfg.total_iters, cw, result.history, log);
  result.iterations = outcome.iterations;
  result.final_loss = tail_mean(result.history, static_cast<std::size_t>(cfg.plateau_window));
  result.checkpoint.network = std::move(network);
  result.checkpoint.classes = set.classes;
  result.checkpoint.meta = {{"procedure", "pretrain"},
                            {"iterations", result.iterations},
                            {"stage", 0},
                            {"seed", cfg.seed},
                            {"final_loss", result.final_loss},
                            {"class_weights", {{"p_fg", cw.p_fg}, {"w_fg", cw.w_fg}, {"w_bg", cw.w_bg}}},
                            {"config", cfg.to_json()}};
  return result;
}

TrainResult transfer(const Checkpoint& base, const TrainingSet& set, const TrainConfig& cfg, const LogSink& log,
                     const StageHook& on_stage_end) {
  cfg.validate();
  if (base.kind != "network") throw DataContractError("transfer needs a trained network checkpoint");
  const auto base_families = families(base.classes);
  std::set<std::string> present;
  for (int l : set.labels) present.insert(set.classes[static_cast<std::size_t>(l)]);
  const bool has_base = std::any_of(present.begin(), present.end(), [&](const std::string& c) {
    const auto& f = scene::catalog_model(c).family;
    return std::find(base_families.begin(), base_families.end(), f) != base_families.end();
  });
  if (!has_base) {
    throw DataContractError(
        "transfer dataset must include the robot family the network was originally trained on (" +
        base_families.front() + "); refusing to transfer without it");
  }
  const bool has_new = std::any_of(present.begin(), present.end(), [&](const std::string& c) {
    return std::find(base.classes.begin(), base.classes.end(), c) == base.classes.end();
  });
  if (!has_new) throw DataContractError("transfer dataset contains no class beyond the checkpoint's classes");
  for (const auto& c : base.classes) {
    if (std::find(set.classes.begin(), set.classes.end(), c) == set.classes.end()) {
      throw DataContractError("transfer class list lacks '" + c + "' known to the checkpoint");
    }
  }

  // Deep copy so the caller's checkpoint stays untouched.
  Network network(base.network.descriptor(), base.network.classes(), 0);
  {
    auto dst = network.parameters();
    const auto src = base.network.parameters();
    for (std::size_t i = 0; i < dst.size(); ++i) std::copy(src[i].values().begin(), src[i].values().end(), dst[i].values().begin());
  }
  network.extend_classes(set.classes, mix_seed(cfg.seed, 7));
  const auto cw = set.class_weights();
  const int schedule_total = cfg.stage1_cap + cfg.stage2_extra_iters;

  TrainResult result;
  network.set_trainable_groups({LayerGroup::stage1_trainable});
  const auto cache = build_cache(network, set, worker_threads());
  StageSpec s1{1, 0, cfg.stage1_cap, cfg.stop_on_plateau, mix_seed(cfg.seed, 201), &cache};
  const auto o1 = run_stage(network, set, cfg, s1, schedule_total, cw, result.history, log);
  result.stage_switch_iter = o1.iterations;
  result.stage1_plateaued = o1.plateaued;
  result.stage1_plateau_loss = tail_mean(result.history, static_cast<std::size_t>(cfg.plateau_window));
  if (on_stage_end) on_stage_end(1, network);

  network.set_trainable_groups({LayerGroup::stage1_trainable, LayerGroup::stage2_unlockable});
  StageSpec s2{2, o1.iterations, cfg.stage2_extra_iters, cfg.stop_on_plateau, mix_seed(cfg.seed, 202), nullptr};
  const auto o2 = run_stage(network, set, cfg, s2, schedule_total, cw, result.history, log);
  result.stage2_plateaued = o2.plateaued;
  if (on_stage_end) on_stage_end(2, network);
  result.iterations = o1.iterations + o2.iterations;
  result.final_loss = tail_mean(result.history, static_cast<std::size_t>(cfg.plateau_window));

  result.checkpoint.network = std::move(network);
  result.checkpoint.classes = set.classes;
  result.checkpoint.meta = {{"procedure", "transfer"},
                            {"iterations", result.iterations},
                            {"stage", 2},
                            {"seed", cfg.seed},
                            {"stage_switch_iter", result.stage_switch_iter},
                            {"stage1_plateaued", result.stage1_plateaued},
                            {"stage2_plateaued", result.stage2_plateaued},
                            {"stage1_plateau_loss", result.stage1_plateau_loss},
                            {"final_loss", result.final_loss},
                            {"base_classes", base.classes},
                            {"class_weights", {{"p_fg", cw.p_fg}, {"w_fg", cw.w_fg}, {"w_bg", cw.w_bg}}},
                            {"config", cfg.to_json()}};
  return result;
}

loss::LossBreakdown evaluate_loss(const Network& network, const TrainingSet& set, const loss::ClassWeights& weights,
                                  const loss::LossWeights& lw, int batch_size) {
  if (set.size() == 0) throw std::invalid_argument("evaluate_loss: empty set");
  loss::LossBreakdown acc;
  for (std::size_t start = 0; start < set.size(); start += static_cast<std::size_t>(batch_size)) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(set.size(), start + static_cast<std::size_t>(batch_size)); ++i) idx.push_back(i);
    net::Graphf g(false);
    const auto out = network.forward(g, gather_inputs(set, idx));
    const auto l = compose(g, out, gather_targets(set, idx), weights, lw).breakdown;
    const double f = static_cast<double>(idx.size());
    acc.mask += l.mask * f;
    acc.jcoords += l.jcoords * f;
    acc.bcoords += l.bcoords * f;
    acc.type += l.type * f;
  }
  const double n = static_cast<double>(set.size());
  return loss::final_loss(acc.mask / n, acc.jcoords / n, acc.bcoords / n, acc.type / n, lw);
}

}  // namespace armsight::train
