#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "armsight/dataset.hpp"
#include "armsight/multinet.hpp"
#include "armsight/objectives.hpp"

namespace armsight::train {

struct TrainConfig {
  double lr_start = 1e-3;
  double lr_end = 1e-6;
  int total_iters = 4000;
  int batch_size = 8;
  int plateau_window = 500;
  double plateau_tau = 0.005;
  /// Transfer stage 1 stops at the plateau or after this many iterations.
  int stage1_cap = 3000;
  /// Transfer stage 2 stops at the plateau or after this many iterations.
  int stage2_extra_iters = 3000;
  /// When false, transfer stages always run to their caps.
  bool stop_on_plateau = true;
  loss::LossWeights loss_weights;
  /// "sgd" (momentum) or "adam".
  std::string optimizer = "sgd";
  double momentum = 0.9;
  /// "dataset": class weights over the whole training split; "batch": per batch.
  std::string class_weight_scope = "dataset";
  /// Decoupled decay applied to trainable weights each step (scaled by lr).
  double weight_decay = 0.0;
  /// Training-time augmentation of full forward passes: mirror about the
  /// vertical image axis, roll about the optical axis up to this many
  /// degrees, and per-channel gain jitter of this relative amplitude.
  bool augment_flip = true;
  double augment_roll_deg = 15.0;
  double augment_color = 0.1;
  std::uint64_t seed = 1;

  void validate() const;
  nlohmann::json to_json() const;
  /// Unknown keys are rejected; missing keys keep their defaults.
  static TrainConfig from_json(const nlohmann::json& j);
};

/// lr_start * (lr_end / lr_start)^(iter / total_iters).
double lr_schedule(int iter, int total_iters, double lr_start, double lr_end);
double lr_schedule(int iter, const TrainConfig& config);

/// True iff the relative improvement between the last two windows of length
/// `window` is below `tau`. Shorter histories never report a plateau.
bool plateau_detector(std::span<const double> history, int window, double tau);

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, nlohmann::json dump)
      : std::runtime_error(what), dump_(std::move(dump)) {}
  const nlohmann::json& dump() const { return dump_; }

 private:
  nlohmann::json dump_;
};

class DataContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// ---------------------------------------------------------------------------
// In-memory preprocessed samples.

struct TrainingSet {
  std::size_t h = 0, w = 0;
  /// Label index space; labels[i] indexes this list.
  std::vector<std::string> classes;
  std::vector<int> ids;
  std::vector<float> inputs;  // n * 3*h*w
  std::vector<float> masks;   // n * h*w, values 0/1
  std::vector<float> joints;  // n * 21, unused slots zero
  std::vector<float> base;    // n * 3
  std::vector<int> labels;
  std::vector<int> joint_counts;
  std::vector<double> distances;

  std::size_t size() const { return ids.size(); }
  std::size_t input_size() const { return 3 * h * w; }
  std::size_t mask_size() const { return h * w; }
  TrainingSet subset(std::span<const std::size_t> indices) const;
  /// Network-resolution masks as bytes, for class weights.
  loss::ClassWeights class_weights() const;
};

/// Loads and preprocesses the samples of `split`. Dataset classes are mapped
/// by name into `classes`; a class missing from `classes` is rejected.
TrainingSet load_split(const std::filesystem::path& dataset_dir, const scene::Manifest& manifest,
                       const std::string& split, const std::vector<std::string>& classes,
                       std::size_t h, std::size_t w, int threads);

// ---------------------------------------------------------------------------
// Checkpoints.

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  /// "network" or "oracle_stub" (no parameters; predicts ground truth).
  std::string kind = "network";
  net::Network network;
  std::vector<std::string> classes;
  nlohmann::json meta = nlohmann::json::object();
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Training.

struct LogRecord {
  int iter = 0;
  int stage = 0;  // 0 pretraining, 1 and 2 transfer stages
  loss::LossBreakdown loss;
  double lr = 0.0;

  nlohmann::json to_json() const;
};

using LogSink = std::function<void(const LogRecord&)>;
/// Called with the network as each transfer stage ends, before the next
/// stage changes which layers train.
using StageHook = std::function<void(int stage, const net::Network&)>;

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<double> history;  // final loss per iteration
  int iterations = 0;
  /// Transfer only.
  int stage_switch_iter = -1;
  bool stage1_plateaued = false;
  bool stage2_plateaued = false;
  double stage1_plateau_loss = 0.0;  // mean of the last window of stage 1
  double final_loss = 0.0;           // mean of the last window of the run
};

struct AugmentDraw {
  bool flip = false;
  double roll = 0.0;  // radians about the optical axis
  double gain[3] = {1.0, 1.0, 1.0};
};

/// Mirrors and rolls one preprocessed sample about the image centre, which is
/// the principal point, and moves its camera-frame targets to match: a mirror
/// maps x to -x and a roll rotates (x, y). Exact for fx == fy. Channel gains
/// are applied last and clamp to [0, 1].
void apply_augmentation(const AugmentDraw& draw, std::size_t h, std::size_t w, std::span<float> image,
                        std::span<float> mask, std::span<float> joints, std::span<float> base);

/// Per-coordinate mean and standard deviation of the targets, for the fixed
/// output maps of the coordinate heads.
void fit_output_maps(net::Network& network, const TrainingSet& set);

/// All groups trainable for config.total_iters iterations.
TrainResult pretrain(const TrainingSet& set, const TrainConfig& config,
                     const net::ArchitectureDescriptor& descriptor, const LogSink& log = {});

/// Two-stage transfer. The checkpoint's classes must all appear in set.classes
/// and set.classes must contain at least one class outside the base family.
TrainResult transfer(const Checkpoint& base, const TrainingSet& set, const TrainConfig& config,
                     const LogSink& log = {}, const StageHook& on_stage_end = {});

/// Mean final loss over `set` with the given class weights (inference only).
loss::LossBreakdown evaluate_loss(const net::Network& network, const TrainingSet& set,
                                  const loss::ClassWeights& weights, const loss::LossWeights& lw,
                                  int batch_size = 16);

/// Family names ("ur", "kuka", ...) of a class list.
std::vector<std::string> families(const std::vector<std::string>& classes);

}  // namespace armsight::train
