#include "armsight/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include "armsight/image.hpp"
#include "armsight/parallel.hpp"
#include "armsight/robot.hpp"

namespace armsight::metrics {

using nlohmann::json;

double mask_accuracy(std::span<const float> est, std::span<const float> gt, double threshold) {
  if (est.size() != gt.size() || est.empty()) {
    throw std::invalid_argument("mask_accuracy: " + std::to_string(est.size()) + " estimated vs " +
                                std::to_string(gt.size()) + " ground-truth pixels");
  }
  std::size_t match = 0;
  for (std::size_t i = 0; i < est.size(); ++i) match += (est[i] >= threshold) == (gt[i] > 0.5f);
  return static_cast<double>(match) / static_cast<double>(est.size());
}

double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2.0;
}

PositionErrors position_errors(std::span<const float> je, std::span<const float> jg, std::span<const float> be,
                               std::span<const float> bg) {
  if (je.size() != jg.size() || je.empty() || je.size() % 3 != 0 || be.size() != 3 || bg.size() != 3) {
    throw std::invalid_argument("position_errors: mismatched coordinate vectors");
  }
  const auto dist_cm = [](const float* a, const float* b) {
    const double dx = static_cast<double>(a[0]) - b[0], dy = static_cast<double>(a[1]) - b[1],
                 dz = static_cast<double>(a[2]) - b[2];
    return 100.0 * std::sqrt(dx * dx + dy * dy + dz * dz);
  };
  PositionErrors e;
  for (std::size_t j = 0; j < je.size() / 3; ++j) e.per_joint_cm.push_back(dist_cm(&je[3 * j], &jg[3 * j]));
  e.joint_cm = std::accumulate(e.per_joint_cm.begin(), e.per_joint_cm.end(), 0.0) /
               static_cast<double>(e.per_joint_cm.size());
  e.base_cm = dist_cm(be.data(), bg.data());
  return e;
}

// ---------------------------------------------------------------------------

Prediction NetworkPredictor::predict(const train::TrainingSet& set, std::size_t i) const {
  net::Graphf g(false);
  const std::size_t in = set.input_size();
  std::vector<float> x(set.inputs.begin() + static_cast<std::ptrdiff_t>(i * in),
                       set.inputs.begin() + static_cast<std::ptrdiff_t>((i + 1) * in));
  const auto out = network_.forward(g, net::Tensorf::constant({1, 3, set.h, set.w}, std::move(x)));
  const auto copy = [](const net::Tensorf& t) { return std::vector<float>(t.values().begin(), t.values().end()); };
  return {copy(out.mask_prob), copy(out.joints), copy(out.base), copy(out.type_dist)};
}

Prediction OracleStubPredictor::predict(const train::TrainingSet& set, std::size_t i) const {
  Prediction p;
  const std::size_t ms = set.mask_size();
  p.mask_prob.assign(set.masks.begin() + static_cast<std::ptrdiff_t>(i * ms),
                     set.masks.begin() + static_cast<std::ptrdiff_t>((i + 1) * ms));
  p.joints.assign(set.joints.begin() + static_cast<std::ptrdiff_t>(i * 21),
                  set.joints.begin() + static_cast<std::ptrdiff_t>((i + 1) * 21));
  p.base.assign(set.base.begin() + static_cast<std::ptrdiff_t>(i * 3),
                set.base.begin() + static_cast<std::ptrdiff_t>((i + 1) * 3));
  p.type_dist.assign(classes_.size(), 0.0f);
  const auto& name = set.classes[static_cast<std::size_t>(set.labels[i])];
  const auto it = std::find(classes_.begin(), classes_.end(), name);
  if (it != classes_.end()) p.type_dist[static_cast<std::size_t>(it - classes_.begin())] = 1.0f;
  return p;
}

std::unique_ptr<Predictor> make_predictor(const train::Checkpoint& ck) {
  if (ck.kind == "oracle_stub") return std::make_unique<OracleStubPredictor>(ck.classes);
  return std::make_unique<NetworkPredictor>(ck.network);
}

// ---------------------------------------------------------------------------

json GroupStats::to_json() const {
  return {{"n", n},
          {"mask_accuracy", mask_accuracy},
          {"type_accuracy", type_accuracy},
          {"joint_error_median_cm", joint_error_median_cm},
          {"joint_error_pooled_median_cm", joint_error_pooled_median_cm},
          {"base_error_median_cm", base_error_median_cm},
          {"reach_m", reach_m}};
}

json EvalReport::to_json() const {
  json types = json::object(), groups = json::object(), bins = json::array();
  for (const auto& [k, v] : per_type) types[k] = v.to_json();
  for (const auto& [k, v] : per_group) groups[k] = v.to_json();
  for (const auto& b : distance_bins) {
    bins.push_back({{"bin_low", b.low}, {"bin_high", b.high}, {"type", b.type}, {"median_err_cm", b.median_err_cm}, {"n", b.n}});
  }
  return {{"split", split},           {"threshold", threshold}, {"sample_count", samples.size()},
          {"per_type", types},        {"per_group", groups},    {"overall", overall.to_json()},
          {"distance_breakdown", bins}};
}

std::vector<std::pair<double, double>> distance_edges(double low, double high, double width) {
  if (!(width > 0 && high > low)) throw std::invalid_argument("distance bins need high > low and width > 0");
  std::vector<std::pair<double, double>> out;
  for (int k = 0;; ++k) {
    const double a = low + k * width;
    if (a >= high - 1e-12) break;
    out.emplace_back(a, std::min(high, low + (k + 1) * width));
  }
  return out;
}

GroupStats aggregate(std::span<const SampleResult> samples) {
  GroupStats g;
  g.n = samples.size();
  if (samples.empty()) return g;
  std::vector<double> joint, pooled, base;
  double mask = 0.0, correct = 0.0, reach = 0.0;
  for (const auto& s : samples) {
    mask += s.mask_acc;
    correct += s.type_correct ? 1.0 : 0.0;
    joint.push_back(s.joint_err_cm);
    base.push_back(s.base_err_cm);
    pooled.insert(pooled.end(), s.per_joint_cm.begin(), s.per_joint_cm.end());
    reach += scene::catalog_model(s.type).reach();
  }
  const double n = static_cast<double>(samples.size());
  g.mask_accuracy = mask / n;
  g.type_accuracy = correct / n;
  g.joint_error_median_cm = median(joint);
  g.joint_error_pooled_median_cm = median(pooled);
  g.base_error_median_cm = median(base);
  g.reach_m = reach / n;
  return g;
}

EvalReport evaluate(const Predictor& predictor, const train::TrainingSet& set, const std::string& split,
                    double threshold, int threads, double bin_low, double bin_high, double bin_width) {
  if (split == scene::kTrainSplit) throw std::invalid_argument("evaluation never runs on the training split");
  if (set.size() == 0) throw std::invalid_argument("evaluation split '" + split + "' is empty");
  EvalReport report;
  report.split = split;
  report.threshold = threshold;
  report.samples.resize(set.size());
  const auto& pclasses = predictor.classes();
  parallel_for(set.size(), threads, [&](std::size_t i) {
    const auto p = predictor.predict(set, i);
    const auto& truth = set.classes[static_cast<std::size_t>(set.labels[i])];
    const std::size_t ms = set.mask_size();
    SampleResult r;
    r.id = set.ids[i];
    r.type = truth;
    r.distance = set.distances[i];
    r.mask_acc = mask_accuracy(p.mask_prob, std::span<const float>(set.masks).subspan(i * ms, ms), threshold);
    const auto nj = static_cast<std::size_t>(set.joint_counts[i]);
    const auto est = net::select_joint_outputs(p.joints, truth);
    const auto e = position_errors(est, std::span<const float>(set.joints).subspan(i * 21, nj * 3), p.base,
                                   std::span<const float>(set.base).subspan(i * 3, 3));
    r.joint_err_cm = e.joint_cm;
    r.base_err_cm = e.base_cm;
    r.per_joint_cm = e.per_joint_cm;
    const auto best = static_cast<std::size_t>(std::max_element(p.type_dist.begin(), p.type_dist.end()) - p.type_dist.begin());
    r.predicted_type = pclasses.at(best);
    r.type_correct = r.predicted_type == truth;
    r.group_correct = scene::catalog_model(r.predicted_type).family == scene::catalog_model(truth).family;
    report.samples[i] = std::move(r);
  });

  std::map<std::string, std::vector<SampleResult>> by_type, by_group;
  for (const auto& s : report.samples) {
    by_type[s.type].push_back(s);
    auto g = s;
    g.type_correct = s.group_correct;
    by_group[scene::catalog_model(s.type).family].push_back(std::move(g));
  }
  for (const auto& [k, v] : by_type) report.per_type[k] = aggregate(v);
  for (const auto& [k, v] : by_group) report.per_group[k] = aggregate(v);
  report.overall = aggregate(report.samples);

  const auto edges = distance_edges(bin_low, bin_high, bin_width);
  for (const auto& [type, samples] : by_type) {
    std::vector<std::vector<double>> errs(edges.size());
    for (const auto& s : samples) {
      // Out-of-range distances fall into the nearest edge bin so bins cover every sample.
      std::size_t b = 0;
      while (b + 1 < edges.size() && s.distance >= edges[b].second) ++b;
      errs[b].push_back(s.joint_err_cm);
    }
    for (std::size_t b = 0; b < edges.size(); ++b) {
      report.distance_bins.push_back(
          {edges[b].first, edges[b].second, type, errs[b].empty() ? 0.0 : median(errs[b]), errs[b].size()});
    }
  }
  return report;
}

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

void write_samples_csv(const std::filesystem::path& path, const EvalReport& report) {
  std::ostringstream os;
  os << "id,type,distance,mask_acc,joint_err_cm,base_err_cm,type_correct,predicted_type";
  for (int j = 1; j <= 7; ++j) os << ",joint" << j << "_err_cm";
  os << "\n";
  for (const auto& s : report.samples) {
    os << s.id << ',' << s.type << ',' << fmt(s.distance) << ',' << fmt(s.mask_acc) << ',' << fmt(s.joint_err_cm) << ','
       << fmt(s.base_err_cm) << ',' << (s.type_correct ? 1 : 0) << ',' << s.predicted_type;
    for (std::size_t j = 0; j < 7; ++j) {
      os << ',';
      if (j < s.per_joint_cm.size()) os << fmt(s.per_joint_cm[j]);
    }
    os << "\n";
  }
  write_file(path, os.str());
}

void write_distance_csv(const std::filesystem::path& path, const EvalReport& report) {
  std::ostringstream os;
  os << "bin_low,bin_high,type,median_err_cm,n\n";
  for (const auto& b : report.distance_bins) {
    os << fmt(b.low) << ',' << fmt(b.high) << ',' << b.type << ',' << fmt(b.median_err_cm) << ',' << b.n << "\n";
  }
  write_file(path, os.str());
}

// ---------------------------------------------------------------------------

std::uint64_t subsample_seed(std::uint64_t seed, std::size_t size) {
  std::uint64_t x = seed * 0x9E3779B97F4A7C15ull + size;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

SizeRow size_study_row(const train::Checkpoint& base, const train::TrainingSet& train_set,
                       const train::TrainingSet& val_set, const train::TrainConfig& config,
                       const SizeStudyConfig& study, std::size_t size) {
  if (size == 0 || size > train_set.size()) {
    throw std::invalid_argument("size " + std::to_string(size) + " exceeds the " +
                                std::to_string(train_set.size()) + " available training samples");
  }
  SizeRow row;
  row.size = size;
  row.subsample_seed = subsample_seed(study.seed, size);
  std::vector<std::size_t> idx(train_set.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(row.subsample_seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(size);
  std::sort(idx.begin(), idx.end());
  const auto subset = train_set.subset(idx);

  auto cfg = config;
  cfg.stop_on_plateau = false;
  const double per_epoch = static_cast<double>(size) / cfg.batch_size;
  cfg.stage1_cap = std::max(1, static_cast<int>(std::ceil(study.stage1_epochs * per_epoch)));
  cfg.stage2_extra_iters = std::max(1, static_cast<int>(std::ceil(study.stage2_epochs * per_epoch)));
  cfg.seed = row.subsample_seed;

  const auto t0 = std::chrono::steady_clock::now();
  const auto result = train::transfer(base, subset, cfg);
  row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  row.val_loss = train::evaluate_loss(result.checkpoint.network, val_set, train_set.class_weights(), cfg.loss_weights).final;
  return row;
}

std::vector<SizeRow> loss_vs_dataset_size(const train::Checkpoint& base, const train::TrainingSet& train_set,
                                          const train::TrainingSet& val_set, const train::TrainConfig& config,
                                          const SizeStudyConfig& study) {
  if (study.sizes.empty()) throw std::invalid_argument("size study needs at least one size");
  if (!std::is_sorted(study.sizes.begin(), study.sizes.end())) {
    throw std::invalid_argument("size study sizes must be ascending");
  }
  for (auto s : study.sizes) {
    if (s > train_set.size()) {
      throw std::invalid_argument("size " + std::to_string(s) + " exceeds the " + std::to_string(train_set.size()) +
                                  " available training samples");
    }
  }
  std::vector<SizeRow> rows;
  for (auto s : study.sizes) rows.push_back(size_study_row(base, train_set, val_set, config, study, s));
  return rows;
}

void write_size_csv(const std::filesystem::path& path, std::span<const SizeRow> rows) {
  std::ostringstream os;
  os << "size,val_loss,seconds\n";
  for (const auto& r : rows) os << r.size << ',' << fmt(r.val_loss) << ',' << fmt(r.seconds) << "\n";
  write_file(path, os.str());
}

// ---------------------------------------------------------------------------

json Timing::to_json() const {
  return {{"mean_ms", mean_ms}, {"min_ms", min_ms}, {"max_ms", max_ms}, {"frames", frames},
          {"input_h", input_h}, {"input_w", input_w}, {"hardware", hardware}};
}

std::string hardware_string() {
  std::string cpu = "unknown cpu";
  std::ifstream in("/proc/cpuinfo");
  for (std::string line; std::getline(in, line);) {
    if (line.rfind("model name", 0) == 0) {
      cpu = line.substr(line.find(':') + 2);
      break;
    }
  }
  return cpu + "; " + std::to_string(std::thread::hardware_concurrency()) + " hardware threads; single-threaded forward";
}

Timing timing(const net::Network& network, int n_frames, int warmup, std::uint64_t seed) {
  if (n_frames < 10) throw std::invalid_argument("timing needs at least 10 frames");
  const auto& d = network.descriptor();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::vector<float> x(3 * d.input_h * d.input_w);
  for (auto& v : x) v = u(rng);
  const auto input = net::Tensorf::constant({1, 3, d.input_h, d.input_w}, x);
  std::vector<double> ms;
  for (int i = 0; i < warmup + n_frames; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    net::Graphf g(false);
    const auto out = network.forward(g, input);
    const auto t1 = std::chrono::steady_clock::now();
    if (i >= warmup) ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  Timing t;
  t.frames = n_frames;
  t.mean_ms = std::accumulate(ms.begin(), ms.end(), 0.0) / static_cast<double>(ms.size());
  t.min_ms = *std::min_element(ms.begin(), ms.end());
  t.max_ms = *std::max_element(ms.begin(), ms.end());
  t.input_h = d.input_h;
  t.input_w = d.input_w;
  t.hardware = hardware_string();
  return t;
}

}  // namespace armsight::metrics
