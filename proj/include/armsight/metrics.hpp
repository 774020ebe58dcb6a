#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "armsight/stagewise.hpp"

namespace armsight::metrics {

/// Fraction of pixels where (est >= threshold) equals gt.
double mask_accuracy(std::span<const float> est_prob, std::span<const float> gt_mask, double threshold = 0.5);

/// Middle element, or the mean of the two middle elements for even counts.
double median(std::vector<double> values);

struct PositionErrors {
  double joint_cm = 0.0;              // mean over joints
  double base_cm = 0.0;
  std::vector<double> per_joint_cm;   // one entry per joint
};

/// Joint vectors are packed xyz triples of equal length; base vectors are 3 long.
PositionErrors position_errors(std::span<const float> joints_est, std::span<const float> joints_gt,
                               std::span<const float> base_est, std::span<const float> base_gt);

// ---------------------------------------------------------------------------

struct Prediction {
  std::vector<float> mask_prob;  // h*w
  std::vector<float> joints;     // 21
  std::vector<float> base;       // 3
  std::vector<float> type_dist;  // |classes|
};

/// Evaluation source. predict() must be safe to call concurrently.
class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual const std::vector<std::string>& classes() const = 0;
  virtual Prediction predict(const train::TrainingSet& set, std::size_t index) const = 0;
};

class NetworkPredictor : public Predictor {
 public:
  explicit NetworkPredictor(const net::Network& network) : network_(network) {}
  const std::vector<std::string>& classes() const override { return network_.classes(); }
  Prediction predict(const train::TrainingSet& set, std::size_t index) const override;

 private:
  const net::Network& network_;
};

/// Returns the ground truth of each sample verbatim.
class OracleStubPredictor : public Predictor {
 public:
  explicit OracleStubPredictor(std::vector<std::string> classes) : classes_(std::move(classes)) {}
  const std::vector<std::string>& classes() const override { return classes_; }
  Prediction predict(const train::TrainingSet& set, std::size_t index) const override;

 private:
  std::vector<std::string> classes_;
};

std::unique_ptr<Predictor> make_predictor(const train::Checkpoint& checkpoint);

// ---------------------------------------------------------------------------

struct SampleResult {
  int id = 0;
  std::string type;
  std::string predicted_type;
  double distance = 0.0;
  double mask_acc = 0.0;
  double joint_err_cm = 0.0;
  double base_err_cm = 0.0;
  bool type_correct = false;
  bool group_correct = false;
  std::vector<double> per_joint_cm;
};

struct GroupStats {
  std::size_t n = 0;
  double mask_accuracy = 0.0;  // mean of per-sample accuracies
  double type_accuracy = 0.0;
  double joint_error_median_cm = 0.0;         // median of per-sample joint means
  double joint_error_pooled_median_cm = 0.0;  // median over all joints of all samples
  double base_error_median_cm = 0.0;
  double reach_m = 0.0;  // mean chain length of the group's robots

  nlohmann::json to_json() const;
};

struct DistanceBin {
  double low = 0.0;
  double high = 0.0;
  std::string type;
  double median_err_cm = 0.0;
  std::size_t n = 0;
};

struct EvalReport {
  std::string split;
  double threshold = 0.5;
  std::map<std::string, GroupStats> per_type;   // raw classes
  std::map<std::string, GroupStats> per_group;  // families, UR variants merged
  GroupStats overall;
  std::vector<SampleResult> samples;
  std::vector<DistanceBin> distance_bins;

  nlohmann::json to_json() const;
};

/// Bin edges of width `width` from `low`, last bin clipped to `high`.
std::vector<std::pair<double, double>> distance_edges(double low, double high, double width);

/// Evaluates every sample of `set` (which must come from the evaluation split).
EvalReport evaluate(const Predictor& predictor, const train::TrainingSet& set, const std::string& split,
                    double threshold = 0.5, int threads = 1, double bin_low = 1.2, double bin_high = 2.5,
                    double bin_width = 0.25);

/// Aggregates from per-sample results alone.
GroupStats aggregate(std::span<const SampleResult> samples);

void write_samples_csv(const std::filesystem::path& path, const EvalReport& report);
void write_distance_csv(const std::filesystem::path& path, const EvalReport& report);

// ---------------------------------------------------------------------------

struct SizeRow {
  std::size_t size = 0;
  double val_loss = 0.0;
  double seconds = 0.0;
  std::uint64_t subsample_seed = 0;
};

struct SizeStudyConfig {
  std::vector<std::size_t> sizes;
  double stage1_epochs = 4.0;
  double stage2_epochs = 8.0;
  std::uint64_t seed = 1;
};

std::uint64_t subsample_seed(std::uint64_t seed, std::size_t size);

/// One transfer per size on a seeded random subsample of `train_set`, with
/// iteration caps proportional to the size; validation loss on `val_set`.
std::vector<SizeRow> loss_vs_dataset_size(const train::Checkpoint& base, const train::TrainingSet& train_set,
                                          const train::TrainingSet& val_set, const train::TrainConfig& config,
                                          const SizeStudyConfig& study);

/// A single row; reproduces the corresponding row of loss_vs_dataset_size.
SizeRow size_study_row(const train::Checkpoint& base, const train::TrainingSet& train_set,
                       const train::TrainingSet& val_set, const train::TrainConfig& config,
                       const SizeStudyConfig& study, std::size_t size);

void write_size_csv(const std::filesystem::path& path, std::span<const SizeRow> rows);

// ---------------------------------------------------------------------------

struct Timing {
  double mean_ms = 0.0;
  double min_ms = 0.0;
  double max_ms = 0.0;
  int frames = 0;
  std::size_t input_h = 0, input_w = 0;
  std::string hardware;

  nlohmann::json to_json() const;
};

/// Single-sample forward passes on random inputs after `warmup` untimed ones.
Timing timing(const net::Network& network, int n_frames, int warmup = 3, std::uint64_t seed = 1);

std::string hardware_string();

}  // namespace armsight::metrics
