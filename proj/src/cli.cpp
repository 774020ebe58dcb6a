#include "armsight/cli.hpp"

#include <malloc.h>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <thread>

#include "CLI11.hpp"

#include "armsight/image.hpp"
#include "armsight/parallel.hpp"
#include "armsight/render.hpp"
#include "armsight/robot.hpp"

namespace armsight::cli {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; })) {
      std::string list;
      for (const char* k : known) list += (list.empty() ? "" : ", ") + std::string(k);
      throw ConfigError(where + ": unknown key '" + key + "' (known: " + list + ")");
    }
  }
}

template <typename T>
void take(const json& j, const char* key, T& dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}

json camera_json(const scene::CameraSamplerConfig& c) {
  return {{"width", c.width},
          {"height", c.height},
          {"fx", c.fx},
          {"fy", c.fy},
          {"min_distance", c.min_distance},
          {"max_distance", c.max_distance},
          {"min_elevation_deg", c.min_elevation_deg},
          {"max_elevation_deg", c.max_elevation_deg},
          {"target_jitter", c.target_jitter},
          {"fg_min", c.fg_min},
          {"fg_max", c.fg_max},
          {"max_camera_attempts", c.max_camera_attempts},
          {"max_configuration_attempts", c.max_configuration_attempts}};
}

scene::CameraSamplerConfig camera_from(const json& j) {
  reject_unknown(j,
                 {"width", "height", "fx", "fy", "min_distance", "max_distance", "min_elevation_deg",
                  "max_elevation_deg", "target_jitter", "fg_min", "fg_max", "max_camera_attempts",
                  "max_configuration_attempts"},
                 "generator.camera");
  scene::CameraSamplerConfig c;
  take(j, "width", c.width);
  take(j, "height", c.height);
  take(j, "fx", c.fx);
  take(j, "fy", c.fy);
  take(j, "min_distance", c.min_distance);
  take(j, "max_distance", c.max_distance);
  take(j, "min_elevation_deg", c.min_elevation_deg);
  take(j, "max_elevation_deg", c.max_elevation_deg);
  take(j, "target_jitter", c.target_jitter);
  take(j, "fg_min", c.fg_min);
  take(j, "fg_max", c.fg_max);
  take(j, "max_camera_attempts", c.max_camera_attempts);
  take(j, "max_configuration_attempts", c.max_configuration_attempts);
  return c;
}

json background_json(const scene::BackgroundSpec& b) {
  return {{"min_shapes", b.min_shapes},
          {"max_shapes", b.max_shapes},
          {"noise_amplitude", b.noise_amplitude},
          {"distractor_probability", b.distractor_probability},
          {"max_distractors", b.max_distractors}};
}

scene::BackgroundSpec background_from(const json& j) {
  reject_unknown(j, {"min_shapes", "max_shapes", "noise_amplitude", "distractor_probability", "max_distractors"},
                 "generator.background");
  scene::BackgroundSpec b;
  take(j, "min_shapes", b.min_shapes);
  take(j, "max_shapes", b.max_shapes);
  take(j, "noise_amplitude", b.noise_amplitude);
  take(j, "distractor_probability", b.distractor_probability);
  take(j, "max_distractors", b.max_distractors);
  return b;
}

json read_json(const fs::path& path) {
  const auto bytes = read_file(path);
  try {
    return json::parse(bytes.begin(), bytes.end());
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

/// Sets a dotted key path to a JSON literal, or to a string if it does not parse.
void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key.path=value, got '" + assignment + "'");
  const auto path = assignment.substr(0, eq);
  const auto text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json* node = &doc;
  std::stringstream ss(path);
  std::vector<std::string> parts;
  for (std::string p; std::getline(ss, p, '.');) parts.push_back(p);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->contains(parts[i])) (*node)[parts[i]] = json::object();
    node = &(*node)[parts[i]];
    if (!node->is_object()) throw ConfigError("--set " + path + ": '" + parts[i] + "' is not an object");
  }
  (*node)[parts.back()] = value;
}

fs::path checkpoint_file(const std::string& p) {
  if (p.empty()) throw ConfigError("no checkpoint given");
  fs::path path(p);
  if (fs::is_directory(path)) path /= "checkpoint.amnt";
  return path;
}

bool inside(const fs::path& child, const fs::path& parent) {
  const auto c = fs::weakly_canonical(child);
  const auto p = fs::weakly_canonical(parent);
  auto ci = c.begin();
  for (auto pi = p.begin(); pi != p.end(); ++pi, ++ci) {
    if (ci == c.end() || *ci != *pi) return false;
  }
  return true;
}

void prepare_out(const fs::path& out, const std::vector<std::string>& inputs, bool force) {
  if (out.empty()) throw ConfigError("--out is required");
  for (const auto& in : inputs) {
    if (!in.empty() && (inside(out, in) || inside(in, out))) {
      throw ConfigError("output directory " + out.string() + " overlaps input " + in + "; inputs are never modified");
    }
  }
  std::error_code ec;
  if (fs::exists(out)) {
    if (!fs::is_directory(out)) throw IoError(out.string() + " exists and is not a directory");
    if (!fs::is_empty(out)) {
      if (!force) throw ConfigError("output directory " + out.string() + " is not empty (use --force to replace it)");
      fs::remove_all(out, ec);
      if (ec) throw IoError("cannot clear " + out.string() + ": " + ec.message());
    }
  }
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());
}

scene::Manifest read_manifest(const fs::path& dir) {
  if (!fs::exists(dir / "dataset.json")) throw IoError(dir.string() + " has no dataset.json");
  try {
    return scene::load_manifest(dir);
  } catch (const json::exception& e) {
    throw train::DataContractError(dir.string() + "/dataset.json: " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) { write_file(path, j.dump(2) + "\n"); }

void finish(const fs::path& out, const RunConfig& cfg) {
  write_json(out / "run_config.json", cfg.to_json());
  const auto digest = write_run_manifest(out);
  std::cout << "run directory " << out.string() << "\n  digest " << digest << "\n";
}

/// Appends one JSON line per iteration and echoes progress to stderr.
class LogFile {
 public:
  LogFile(const fs::path& path, int every) : out_(path), every_(every) {
    if (!out_) throw IoError("cannot write " + path.string());
  }
  train::LogSink sink() {
    return [this](const train::LogRecord& r) {
      out_ << r.to_json().dump() << "\n";
      if (every_ > 0 && r.iter % every_ == 0) {
        std::cerr << "iter " << r.iter << " stage " << r.stage << " loss " << r.loss.final << " (mask " << r.loss.mask
                  << " joints " << r.loss.jcoords << " base " << r.loss.bcoords << " type " << r.loss.type << ") lr "
                  << r.lr << "\n";
      }
    };
  }
  void close() {
    out_.close();
    if (!out_) throw IoError("failed writing training log");
  }

 private:
  std::ofstream out_;
  int every_;
};

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

void print_report(const metrics::EvalReport& r) {
  const auto row = [](const std::string& name, const metrics::GroupStats& g) {
    std::cout << "  " << std::left << std::setw(8) << name << std::right << std::setw(6) << g.n << std::setw(10)
              << fixed(g.mask_accuracy, 4) << std::setw(10) << fixed(g.type_accuracy, 4) << std::setw(12)
              << fixed(g.joint_error_median_cm, 2) << std::setw(12) << fixed(g.base_error_median_cm, 2)
              << std::setw(10) << fixed(100.0 * g.reach_m, 1) << "\n";
  };
  std::cout << "  type         n      mask      type   joint(cm)    base(cm)  reach(cm)\n";
  for (const auto& [k, v] : r.per_type) row(k, v);
  std::cout << "  grouped:\n";
  for (const auto& [k, v] : r.per_group) row(k, v);
  row("all", r.overall);
}

// ---------------------------------------------------------------------------

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  bool force = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "RunConfig JSON document");
  cmd->add_option("--set", c.sets, "Override a config entry, e.g. --set train.total_iters=2000");
  cmd->add_option("--out", c.out, "Run directory to create")->required();
  cmd->add_option("--seed", c.seed, "Seed for every random choice");
  cmd->add_option("--threads", c.threads, "Worker threads (capped by ARMSIGHT_THREADS)");
  cmd->add_flag("--force", c.force, "Replace a non-empty run directory");
}

RunConfig resolve(const Common& c) {
  json doc = c.config.empty() ? json::object() : read_json(c.config);
  for (const auto& s : c.sets) apply_override(doc, s);
  auto cfg = RunConfig::from_json(doc);
  if (c.seed) cfg.seed = *c.seed;
  if (c.threads) cfg.threads = *c.threads;
  cfg.paths.out = c.out;
  return cfg;
}

std::size_t input_h(const train::Checkpoint& ck) {
  return ck.kind == "network" ? ck.network.descriptor().input_h : ck.meta.value("input_h", std::size_t{106});
}
std::size_t input_w(const train::Checkpoint& ck) {
  return ck.kind == "network" ? ck.network.descriptor().input_w : ck.meta.value("input_w", std::size_t{128});
}

// ---------------------------------------------------------------------------

int cmd_gen_data(RunConfig cfg, const Common& c, const std::optional<std::string>& types, std::optional<int> n) {
  if (types) cfg.generator.types = split_list(*types);
  if (n) cfg.generator.n_per_type = *n;
  cfg.generator.seed = cfg.seed;
  cfg.validate();
  prepare_out(c.out, {}, c.force);
  const auto t0 = std::chrono::steady_clock::now();
  const auto m = scene::make_dataset(cfg.generator, c.out, cfg.worker_count());
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  std::cout << "generated " << m.samples.size() << " samples in " << fixed(secs, 1) << " s\n";
  std::cout << "  type         total   train   validation\n";
  for (std::size_t k = 0; k < m.classes.size(); ++k) {
    std::size_t total = 0, tr = 0;
    for (const auto& s : m.samples) {
      if (s.robot_type != static_cast<int>(k)) continue;
      ++total;
      tr += s.split == scene::kTrainSplit;
    }
    std::cout << "  " << std::left << std::setw(10) << m.classes[k] << std::right << std::setw(8) << total
              << std::setw(8) << tr << std::setw(13) << total - tr << "\n";
  }
  std::cout << "  total   " << std::setw(10) << m.samples.size() << std::setw(8) << m.count(scene::kTrainSplit)
            << std::setw(13) << m.count(scene::kValidationSplit) << "\n";
  finish(c.out, cfg);
  return kOk;
}

json summary_of(const train::TrainResult& r, double seconds, const std::optional<loss::LossBreakdown>& val) {
  json j = r.checkpoint.meta;
  j.erase("config");
  j["seconds"] = seconds;
  if (val) {
    j["validation_loss"] = {{"mask", val->mask}, {"jcoords", val->jcoords}, {"bcoords", val->bcoords},
                            {"type", val->type}, {"final", val->final}};
  }
  return j;
}

int cmd_train(RunConfig cfg, const Common& c, bool is_transfer, int log_every) {
  if (cfg.paths.data.empty()) throw ConfigError("--data is required");
  if (is_transfer && cfg.paths.base.empty()) throw ConfigError("--base is required");
  cfg.train.seed = cfg.seed;
  cfg.validate();
  prepare_out(c.out, {cfg.paths.data}, c.force);
  const auto manifest = read_manifest(cfg.paths.data);
  const int threads = cfg.worker_count();

  std::optional<train::Checkpoint> base;
  net::ArchitectureDescriptor desc;
  if (is_transfer) {
    base = train::load_checkpoint(checkpoint_file(cfg.paths.base));
    desc = base->network.descriptor();
  } else {
    desc = cfg.descriptor(manifest.classes.size());
  }
  const auto t0 = std::chrono::steady_clock::now();
  const auto set = train::load_split(cfg.paths.data, manifest, scene::kTrainSplit, manifest.classes, desc.input_h,
                                     desc.input_w, threads);
  std::cerr << "loaded " << set.size() << " training samples\n";

  LogFile log(fs::path(c.out) / "train_log.jsonl", log_every);
  train::TrainResult result;
  try {
    result = is_transfer ? train::transfer(*base, set, cfg.train, log.sink())
                         : train::pretrain(set, cfg.train, desc, log.sink());
  } catch (const train::DivergenceError& e) {
    log.close();
    write_json(fs::path(c.out) / "divergence.json", e.dump());
    finish(c.out, cfg);
    throw;
  }
  log.close();
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  std::optional<loss::LossBreakdown> val;
  if (manifest.count(scene::kValidationSplit) > 0) {
    const auto vset = train::load_split(cfg.paths.data, manifest, scene::kValidationSplit,
                                        result.checkpoint.classes, desc.input_h, desc.input_w, threads);
    val = train::evaluate_loss(result.checkpoint.network, vset, set.class_weights(), cfg.train.loss_weights);
  }
  train::save_checkpoint(fs::path(c.out) / "checkpoint.amnt", result.checkpoint);
  const auto summary = summary_of(result, secs, val);
  write_json(fs::path(c.out) / "train_summary.json", summary);

  std::cout << (is_transfer ? "transfer" : "pretrain") << ": " << result.iterations << " iterations in "
            << fixed(secs, 1) << " s, final training loss " << result.final_loss << "\n";
  if (is_transfer) {
    std::cout << "  stage 1 " << (result.stage1_plateaued ? "plateaued" : "hit its cap") << " after "
              << result.stage_switch_iter << " iterations at loss " << result.stage1_plateau_loss << "\n";
  }
  if (val) std::cout << "  validation loss " << val->final << "\n";
  finish(c.out, cfg);
  return kOk;
}

void check_eval_split(const RunConfig& cfg) {
  if (cfg.eval.split == scene::kTrainSplit) throw ConfigError("evaluation never uses the train split");
  if (cfg.eval.split != scene::kValidationSplit) throw ConfigError("unknown split '" + cfg.eval.split + "'");
}

metrics::EvalReport run_eval(const RunConfig& cfg, const train::Checkpoint& ck, const scene::Manifest& manifest) {
  check_eval_split(cfg);
  const auto set = train::load_split(cfg.paths.data, manifest, cfg.eval.split, ck.classes, input_h(ck), input_w(ck),
                                     cfg.worker_count());
  const auto predictor = metrics::make_predictor(ck);
  return metrics::evaluate(*predictor, set, cfg.eval.split, cfg.eval.threshold, cfg.worker_count(), cfg.eval.bin_low,
                           cfg.eval.bin_high, cfg.eval.bin_width);
}

int cmd_eval(RunConfig cfg, const Common& c) {
  if (cfg.paths.data.empty()) throw ConfigError("--data is required");
  cfg.validate();
  check_eval_split(cfg);
  const auto ckpath = checkpoint_file(cfg.paths.checkpoint);
  prepare_out(c.out, {cfg.paths.data}, c.force);
  const auto manifest = read_manifest(cfg.paths.data);
  const auto ck = train::load_checkpoint(ckpath);
  const auto report = run_eval(cfg, ck, manifest);

  // Provenance: every evaluated sample comes from the requested split.
  json audit = {{"split", cfg.eval.split}, {"manifest_split_count", manifest.count(cfg.eval.split)},
                {"evaluated", report.samples.size()}, {"checkpoint_sha256", sha256_file(ckpath)}};
  auto doc = report.to_json();
  doc["provenance"] = audit;
  const fs::path out(c.out);
  write_json(out / "eval_report.json", doc);
  metrics::write_samples_csv(out / "eval_samples.csv", report);
  metrics::write_distance_csv(out / "error_vs_distance.csv", report);
  print_report(report);
  finish(c.out, cfg);
  return kOk;
}

int cmd_bench(RunConfig cfg, const Common& c) {
  cfg.validate();
  prepare_out(c.out, {}, c.force);
  net::Network network;
  if (!cfg.paths.checkpoint.empty()) {
    auto ck = train::load_checkpoint(checkpoint_file(cfg.paths.checkpoint));
    if (ck.kind != "network") throw train::CheckpointError("bench needs a network checkpoint");
    network = std::move(ck.network);
  } else {
    const auto names = scene::catalog_names();
    network = net::Network(cfg.descriptor(names.size()), names, cfg.seed);
  }
  const auto t = metrics::timing(network, cfg.bench.frames, cfg.bench.warmup, cfg.seed);
  write_json(fs::path(c.out) / "timing.json", t.to_json());
  std::cout << "forward pass at " << t.input_w << "x" << t.input_h << ": mean " << fixed(t.mean_ms, 2) << " ms, min "
            << fixed(t.min_ms, 2) << " ms, max " << fixed(t.max_ms, 2) << " ms over " << t.frames << " frames\n  "
            << t.hardware << "\n";
  finish(c.out, cfg);
  return kOk;
}

int cmd_export_curves(RunConfig cfg, const Common& c) {
  if (cfg.paths.run.empty()) throw ConfigError("--run is required");
  const fs::path run(cfg.paths.run);
  const auto source = load_run_config(run / "run_config.json");
  if (cfg.paths.data.empty()) cfg.paths.data = source.paths.data;
  if (cfg.paths.base.empty()) cfg.paths.base = source.paths.base;
  if (cfg.paths.data.empty() || cfg.paths.base.empty()) {
    throw ConfigError("run " + run.string() + " is not a transfer run (no dataset or base checkpoint recorded)");
  }
  cfg.train = source.train;
  cfg.validate();
  prepare_out(c.out, {cfg.paths.data, run.string()}, c.force);
  const fs::path out(c.out);

  // Training curve of the run itself.
  {
    std::ifstream in(run / "train_log.jsonl");
    if (!in) throw IoError("cannot read " + (run / "train_log.jsonl").string());
    std::ostringstream os;
    os << "iter,stage,final,lr\n";
    for (std::string line; std::getline(in, line);) {
      if (line.empty()) continue;
      const auto j = json::parse(line);
      os << j.at("iter").get<int>() << ',' << j.at("stage").get<int>() << ','
         << std::setprecision(17) << j.at("final").get<double>() << ',' << j.at("lr").get<double>() << "\n";
    }
    write_file(out / "training_curve.csv", os.str());
  }

  const auto manifest = read_manifest(cfg.paths.data);
  const auto ck = train::load_checkpoint(run / "checkpoint.amnt");
  const auto report = run_eval(cfg, ck, manifest);
  metrics::write_distance_csv(out / "error_vs_distance.csv", report);

  const auto base = train::load_checkpoint(checkpoint_file(cfg.paths.base));
  const auto& d = base.network.descriptor();
  const int threads = cfg.worker_count();
  const auto tset = train::load_split(cfg.paths.data, manifest, scene::kTrainSplit, manifest.classes, d.input_h,
                                      d.input_w, threads);
  const auto vset = train::load_split(cfg.paths.data, manifest, scene::kValidationSplit, manifest.classes, d.input_h,
                                      d.input_w, threads);
  metrics::SizeStudyConfig study{cfg.curves.sizes, cfg.curves.stage1_epochs, cfg.curves.stage2_epochs, cfg.seed};
  std::vector<metrics::SizeRow> rows;
  json seeds = json::array();
  for (auto size : study.sizes) {
    if (size > tset.size()) {
      throw ConfigError("curve size " + std::to_string(size) + " exceeds the " + std::to_string(tset.size()) +
                        " training samples");
    }
  }
  for (auto size : study.sizes) {
    rows.push_back(metrics::size_study_row(base, tset, vset, cfg.train, study, size));
    const auto& r = rows.back();
    std::cerr << "size " << r.size << ": validation loss " << r.val_loss << " in " << fixed(r.seconds, 1) << " s\n";
    seeds.push_back({{"size", r.size}, {"subsample_seed", r.subsample_seed}, {"val_loss", r.val_loss},
                     {"seconds", r.seconds}});
  }
  metrics::write_size_csv(out / "loss_vs_size.csv", rows);
  write_json(out / "loss_vs_size.json",
             {{"study_seed", study.seed}, {"stage1_epochs", study.stage1_epochs},
              {"stage2_epochs", study.stage2_epochs}, {"rows", seeds}});
  std::cout << "wrote training_curve.csv, error_vs_distance.csv, loss_vs_size.csv\n";
  finish(c.out, cfg);
  return kOk;
}

int cmd_make_oracle_stub(RunConfig cfg, const Common& c, const std::optional<std::string>& classes) {
  cfg.validate();
  prepare_out(c.out, {cfg.paths.data}, c.force);
  train::Checkpoint ck;
  ck.kind = "oracle_stub";
  if (classes) {
    ck.classes = split_list(*classes);
  } else if (!cfg.paths.data.empty()) {
    ck.classes = read_manifest(cfg.paths.data).classes;
  } else {
    ck.classes = scene::catalog_names();
  }
  for (const auto& k : ck.classes) scene::catalog_model(k);
  const auto d = cfg.descriptor(ck.classes.size());
  ck.meta = {{"procedure", "oracle_stub"}, {"input_h", d.input_h}, {"input_w", d.input_w}};
  train::save_checkpoint(fs::path(c.out) / "checkpoint.amnt", ck);
  finish(c.out, cfg);
  return kOk;
}

}  // namespace

// ---------------------------------------------------------------------------

net::ArchitectureDescriptor RunConfig::descriptor(std::size_t num_classes) const {
  net::ArchitectureDescriptor d;
  if (architecture.is_string()) {
    const auto name = architecture.get<std::string>();
    if (name == "desk") {
      d = net::ArchitectureDescriptor::desk_scale();
    } else if (name == "paper") {
      d = net::ArchitectureDescriptor::paper_scale();
    } else {
      throw ConfigError("architecture must be 'desk', 'paper' or a descriptor object, got '" + name + "'");
    }
  } else if (architecture.is_object()) {
    try {
      d = net::ArchitectureDescriptor::from_json(architecture);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  } else {
    throw ConfigError("architecture must be 'desk', 'paper' or a descriptor object");
  }
  d.num_classes = num_classes;
  return d;
}

int RunConfig::worker_count() const {
  int n = threads > 0 ? threads : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  if (const char* env = std::getenv("ARMSIGHT_THREADS")) {
    try {
      const int cap = std::stoi(env);
      if (cap >= 1) n = std::min(n, cap);
    } catch (const std::exception&) {
    }
  }
  return std::max(1, n);
}

void RunConfig::validate() const {
  try {
    generator.validate();
    train.validate();
    descriptor(5).validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (threads < 0) throw ConfigError("threads must be non-negative");
  if (!(eval.threshold > 0 && eval.threshold < 1)) throw ConfigError("eval.threshold must lie in (0, 1)");
  if (!(eval.bin_width > 0 && eval.bin_high > eval.bin_low)) throw ConfigError("eval distance bins are empty");
  if (curves.sizes.empty() || !std::is_sorted(curves.sizes.begin(), curves.sizes.end()) || curves.sizes.front() == 0) {
    throw ConfigError("curves.sizes must be positive and ascending");
  }
  if (!(curves.stage1_epochs > 0 && curves.stage2_epochs > 0)) throw ConfigError("curve epochs must be positive");
  if (bench.frames < 10 || bench.warmup < 0) throw ConfigError("bench needs frames >= 10 and warmup >= 0");
}

json RunConfig::to_json() const {
  // paths.out is the directory holding this document and is left out so that
  // identical runs in different places serialize identically.
  return {{"seed", seed},
          {"threads", threads},
          {"generator",
           {{"types", generator.types},
            {"n_per_type", generator.n_per_type},
            {"train_fraction", generator.train_fraction},
            {"camera", camera_json(generator.camera)},
            {"background", background_json(generator.background)}}},
          {"architecture", architecture},
          {"train", train.to_json()},
          {"eval",
           {{"threshold", eval.threshold},
            {"split", eval.split},
            {"bin_low", eval.bin_low},
            {"bin_high", eval.bin_high},
            {"bin_width", eval.bin_width}}},
          {"curves",
           {{"sizes", curves.sizes}, {"stage1_epochs", curves.stage1_epochs}, {"stage2_epochs", curves.stage2_epochs}}},
          {"bench", {{"frames", bench.frames}, {"warmup", bench.warmup}}},
          {"paths", {{"data", paths.data}, {"base", paths.base}, {"checkpoint", paths.checkpoint}, {"run", paths.run}}}};
}

RunConfig RunConfig::from_json(const json& j) {
  reject_unknown(j, {"seed", "threads", "generator", "architecture", "train", "eval", "curves", "bench", "paths"},
                 "config");
  RunConfig c = default_run_config();
  try {
    take(j, "seed", c.seed);
    take(j, "threads", c.threads);
    if (j.contains("generator")) {
      const auto& g = j.at("generator");
      reject_unknown(g, {"types", "n_per_type", "train_fraction", "camera", "background"}, "generator");
      take(g, "types", c.generator.types);
      take(g, "n_per_type", c.generator.n_per_type);
      take(g, "train_fraction", c.generator.train_fraction);
      if (g.contains("camera")) c.generator.camera = camera_from(g.at("camera"));
      if (g.contains("background")) c.generator.background = background_from(g.at("background"));
    }
    if (j.contains("architecture")) c.architecture = j.at("architecture");
    if (j.contains("train")) {
      auto t = j.at("train");
      // The top-level seed drives training.
      if (t.is_object() && t.contains("seed") && !j.contains("seed")) c.seed = t.at("seed").get<std::uint64_t>();
      c.train = train::TrainConfig::from_json(t);
    }
    if (j.contains("eval")) {
      const auto& e = j.at("eval");
      reject_unknown(e, {"threshold", "split", "bin_low", "bin_high", "bin_width"}, "eval");
      take(e, "threshold", c.eval.threshold);
      take(e, "split", c.eval.split);
      take(e, "bin_low", c.eval.bin_low);
      take(e, "bin_high", c.eval.bin_high);
      take(e, "bin_width", c.eval.bin_width);
    }
    if (j.contains("curves")) {
      const auto& k = j.at("curves");
      reject_unknown(k, {"sizes", "stage1_epochs", "stage2_epochs"}, "curves");
      take(k, "sizes", c.curves.sizes);
      take(k, "stage1_epochs", c.curves.stage1_epochs);
      take(k, "stage2_epochs", c.curves.stage2_epochs);
    }
    if (j.contains("bench")) {
      const auto& b = j.at("bench");
      reject_unknown(b, {"frames", "warmup"}, "bench");
      take(b, "frames", c.bench.frames);
      take(b, "warmup", c.bench.warmup);
    }
    if (j.contains("paths")) {
      const auto& p = j.at("paths");
      reject_unknown(p, {"data", "base", "checkpoint", "run"}, "paths");
      take(p, "data", c.paths.data);
      take(p, "base", c.paths.base);
      take(p, "checkpoint", c.paths.checkpoint);
      take(p, "run", c.paths.run);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  c.train.seed = c.seed;
  return c;
}

RunConfig default_run_config() {
  RunConfig c;
  c.generator.types = {"ur3", "ur5", "ur10"};
  c.generator.n_per_type = 500;
  c.train.seed = c.seed;
  return c;
}

RunConfig load_run_config(const fs::path& path) { return RunConfig::from_json(read_json(path)); }

std::string write_run_manifest(const fs::path& dir) {
  std::vector<std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), dir).generic_string();
    if (rel != "MANIFEST") files.push_back(rel);
  }
  std::sort(files.begin(), files.end());
  std::vector<std::string> digests(files.size());
  parallel_for(files.size(), worker_threads(), [&](std::size_t i) { digests[i] = sha256_file(dir / files[i]); });
  std::string text;
  for (std::size_t i = 0; i < files.size(); ++i) text += digests[i] + "  " + files[i] + "\n";
  write_file(dir / "MANIFEST", text);
  return sha256_hex(reinterpret_cast<const std::uint8_t*>(text.data()), text.size());
}

std::string exit_code_help() {
  return "Exit codes:\n"
         "  0  success\n"
         "  1  internal error\n"
         "  2  invalid flags or configuration\n"
         "  3  I/O failure (missing input, unwritable output)\n"
         "  4  dataset does not fit the command (classes, splits, base family)\n"
         "  5  corrupt or incompatible checkpoint\n"
         "  6  training diverged (non-finite loss; dump written to divergence.json)\n"
         "  7  scene generation could not satisfy its constraints\n"
         "Environment:\n"
         "  ARMSIGHT_THREADS  caps the number of worker threads\n";
}

void tune_allocator() {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
}

int run(int argc, char** argv) {
  CLI::App app{"armsight: synthetic robot-arm scenes, multi-objective network training and evaluation"};
  app.footer(exit_code_help());
  app.require_subcommand(1);
  app.set_version_flag("--version", "armsight 1.0");

  Common common;
  std::string data, base, checkpoint, run_dir, types_str, classes_str, split, sizes_str, optimizer;
  std::optional<int> n_per_type, iters, frames;
  std::optional<double> lr_start;
  int log_every = 100;

  auto* gen = app.add_subcommand("gen-data", "Render a synthetic dataset");
  add_common(gen, common);
  gen->add_option("--n-per-type", n_per_type, "Samples per robot type");
  gen->add_option("--types", types_str, "Comma-separated robot types (default ur3,ur5,ur10)");

  auto* pre = app.add_subcommand("pretrain", "Train a network from scratch on a dataset's train split");
  add_common(pre, common);
  pre->add_option("--data", data, "Dataset directory");

  auto* tr = app.add_subcommand("transfer", "Two-stage transfer of a checkpoint to a mixed dataset");
  add_common(tr, common);
  tr->add_option("--data", data, "Dataset directory");
  tr->add_option("--base", base, "Checkpoint file or run directory to transfer from");

  for (auto* cmd : {pre, tr}) {
    cmd->add_option("--iters", iters, "Pretraining iterations, or the stage caps for transfer");
    cmd->add_option("--lr-start", lr_start, "Initial learning rate");
    cmd->add_option("--optimizer", optimizer, "sgd or adam");
    cmd->add_option("--log-every", log_every, "Progress line interval on stderr (0 for none)");
  }

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on the validation split");
  add_common(ev, common);
  ev->add_option("--data", data, "Dataset directory");
  ev->add_option("--checkpoint", checkpoint, "Checkpoint file or run directory");
  ev->add_option("--split", split, "Split to evaluate (validation)");

  auto* bench = app.add_subcommand("bench", "Time single-frame forward passes");
  add_common(bench, common);
  bench->add_option("--checkpoint", checkpoint, "Checkpoint file or run directory (default: untrained network)");
  bench->add_option("--frames", frames, "Timed frames");

  auto* curves = app.add_subcommand("export-curves", "Loss-vs-size, error-vs-distance and training curves of a run");
  add_common(curves, common);
  curves->add_option("--run", run_dir, "Finished transfer run directory");
  curves->add_option("--sizes", sizes_str, "Comma-separated ascending training-set sizes");

  auto* stub = app.add_subcommand("make-oracle-stub", "Write a checkpoint that predicts ground truth");
  add_common(stub, common);
  stub->add_option("--classes", classes_str, "Comma-separated classes (default: dataset or catalog classes)");
  stub->add_option("--data", data, "Dataset whose classes to use");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    auto cfg = resolve(common);
    if (!data.empty()) cfg.paths.data = data;
    if (!base.empty()) cfg.paths.base = base;
    if (!checkpoint.empty()) cfg.paths.checkpoint = checkpoint;
    if (!run_dir.empty()) cfg.paths.run = run_dir;
    if (!split.empty()) cfg.eval.split = split;
    if (frames) cfg.bench.frames = *frames;
    if (lr_start) cfg.train.lr_start = *lr_start;
    if (!optimizer.empty()) cfg.train.optimizer = optimizer;
    if (!sizes_str.empty()) {
      cfg.curves.sizes.clear();
      for (const auto& s : split_list(sizes_str)) cfg.curves.sizes.push_back(std::stoul(s));
    }
    // Absolute paths keep run_config.json usable from any working directory.
    for (auto* p : {&cfg.paths.data, &cfg.paths.base, &cfg.paths.checkpoint, &cfg.paths.run}) {
      if (!p->empty()) *p = fs::absolute(*p).lexically_normal().string();
    }
    if (iters) {
      cfg.train.total_iters = *iters;
      cfg.train.stage1_cap = *iters;
      cfg.train.stage2_extra_iters = *iters;
    }

    if (gen->parsed()) return cmd_gen_data(cfg, common, types_str.empty() ? std::nullopt : std::optional(types_str), n_per_type);
    if (pre->parsed()) return cmd_train(cfg, common, false, log_every);
    if (tr->parsed()) return cmd_train(cfg, common, true, log_every);
    if (ev->parsed()) return cmd_eval(cfg, common);
    if (bench->parsed()) return cmd_bench(cfg, common);
    if (curves->parsed()) return cmd_export_curves(cfg, common);
    if (stub->parsed()) {
      return cmd_make_oracle_stub(cfg, common, classes_str.empty() ? std::nullopt : std::optional(classes_str));
    }
    return kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const train::DataContractError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDataContract;
  } catch (const train::CheckpointError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kCheckpoint;
  } catch (const train::DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDivergence;
  } catch (const loss::NonFiniteLossError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDivergence;
  } catch (const scene::SamplingError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kSampling;
  } catch (const scene::DegenerateSampleError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kSampling;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const std::invalid_argument& e) {
    // Remaining argument errors come from values the user supplied.
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kInternal;
  }
}

}  // namespace armsight::cli
