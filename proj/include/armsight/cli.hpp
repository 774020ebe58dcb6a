#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "armsight/dataset.hpp"
#include "armsight/metrics.hpp"
#include "armsight/multinet.hpp"
#include "armsight/stagewise.hpp"

namespace armsight::cli {

enum ExitCode : int {
  kOk = 0,
  kInternal = 1,
  kUsage = 2,        // bad flags or config
  kIo = 3,           // unreadable input, unwritable output
  kDataContract = 4, // dataset does not fit the command (classes, splits, base family)
  kCheckpoint = 5,   // corrupt or incompatible checkpoint
  kDivergence = 6,   // non-finite loss during training
  kSampling = 7,     // scene generation could not satisfy its constraints
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct EvalSettings {
  double threshold = 0.5;
  std::string split = scene::kValidationSplit;
  double bin_low = 1.2;
  double bin_high = 2.5;
  double bin_width = 0.25;
};

struct CurveSettings {
  std::vector<std::size_t> sizes{100, 200, 400, 800};
  double stage1_epochs = 4.0;
  double stage2_epochs = 8.0;
};

struct BenchSettings {
  int frames = 50;
  int warmup = 3;
};

struct Paths {
  std::string data;
  std::string base;
  std::string checkpoint;
  std::string run;
  std::string out;
};

/// Everything a command needs. Serialized into every run directory.
struct RunConfig {
  std::uint64_t seed = 1;
  int threads = 0;  // 0: ARMSIGHT_THREADS or hardware concurrency
  scene::DatasetSpec generator;
  /// "desk", "paper", or an explicit descriptor.
  nlohmann::json architecture = "desk";
  train::TrainConfig train;
  EvalSettings eval;
  CurveSettings curves;
  BenchSettings bench;
  Paths paths;

  net::ArchitectureDescriptor descriptor(std::size_t num_classes) const;
  int worker_count() const;
  void validate() const;
  nlohmann::json to_json() const;
  /// Unknown keys are rejected at every level.
  static RunConfig from_json(const nlohmann::json& j);
};

RunConfig default_run_config();
RunConfig load_run_config(const std::filesystem::path& path);

/// Writes MANIFEST (sha256 and relative path of every other file, sorted) and
/// returns the digest of the MANIFEST text.
std::string write_run_manifest(const std::filesystem::path& dir);

/// Exit-code table as printed by --help.
std::string exit_code_help();

/// Large allocation pools instead of per-call mmap; training allocates and
/// frees many short-lived buffers.
void tune_allocator();

int run(int argc, char** argv);

}  // namespace armsight::cli
