#include "doctest.h"

#include <cmath>
#include <cstring>
#include <map>
#include <numbers>
#include <random>

#include "armsight/image.hpp"
#include "armsight/stagewise.hpp"
#include "support/tempdir.hpp"
#include "support/tiny.hpp"

using namespace armsight;
using namespace armsight::train;
using armsight::testing::make_tiny_set;
using armsight::testing::tiny_config;
using armsight::testing::tiny_descriptor;
using armsight::testing::TempDir;

namespace {

std::vector<std::vector<float>> snapshot(const net::Network& n, net::LayerGroup g) {
  std::vector<std::vector<float>> out;
  for (const auto& p : n.parameters(g)) out.emplace_back(p.values().begin(), p.values().end());
  return out;
}

}  // namespace

TEST_CASE("learning rate schedule examples") {
  CHECK(lr_schedule(0, 1000, 1e-3, 1e-6) == doctest::Approx(1e-3).epsilon(1e-12));
  CHECK(lr_schedule(1000, 1000, 1e-3, 1e-6) == doctest::Approx(1e-6).epsilon(1e-9));
  CHECK(std::abs(lr_schedule(500, 1000, 1e-3, 1e-6) - std::sqrt(1e-3 * 1e-6)) < 1e-12);
  CHECK(std::abs(lr_schedule(500, 1000, 1e-3, 1e-6) - 3.1623e-5) < 1e-8);
  double prev = 1.0;
  for (int i = 0; i <= 1000; i += 50) {
    const double lr = lr_schedule(i, 1000, 1e-3, 1e-6);
    CHECK(lr < prev);
    prev = lr;
  }
}

TEST_CASE("plateau detector examples") {
  std::vector<double> geometric(1000);
  for (std::size_t i = 0; i < geometric.size(); ++i) geometric[i] = std::pow(0.99, double(i));
  // Window means differ by the factor 0.99^W, far above the threshold.
  for (std::size_t n = 200; n <= 1000; n += 100) CHECK_FALSE(plateau_detector(std::span(geometric).first(n), 100, 0.001));
  const std::vector<double> flat(400, 2.5);
  CHECK(plateau_detector(flat, 100, 0.001));
  std::vector<double> rising(400);
  for (std::size_t i = 0; i < rising.size(); ++i) rising[i] = 1.0 + 0.01 * double(i);
  CHECK(plateau_detector(rising, 100, 0.001));
  CHECK_FALSE(plateau_detector(std::span(flat).first(199), 100, 0.001));
  // Improvement just above and just below tau.
  std::vector<double> step(200, 1.0);
  std::fill(step.begin() + 100, step.end(), 1.0 - 0.006);
  CHECK_FALSE(plateau_detector(step, 100, 0.005));
  std::fill(step.begin() + 100, step.end(), 1.0 - 0.004);
  CHECK(plateau_detector(step, 100, 0.005));
}

TEST_CASE("train config validation and json") {
  TrainConfig c;
  CHECK(c.lr_start == 1e-3);
  CHECK(c.lr_end == 1e-6);
  CHECK_NOTHROW(c.validate());
  auto j = c.to_json();
  CHECK(TrainConfig::from_json(j).to_json() == j);
  j["learning_rate"] = 0.1;
  CHECK_THROWS(TrainConfig::from_json(j));
  auto bad = c;
  bad.lr_end = bad.lr_start;
  CHECK_THROWS(bad.validate());
  bad = c;
  bad.plateau_window = 99;
  CHECK_THROWS(bad.validate());
  bad = c;
  bad.plateau_tau = 1.0;
  CHECK_THROWS(bad.validate());
  bad = c;
  bad.optimizer = "rmsprop";
  CHECK_THROWS(bad.validate());
}

TEST_CASE("checkpoint round trip is bit exact") {
  TempDir dir;
  const auto d = tiny_descriptor(3);
  Checkpoint ck;
  ck.network = net::Network(d, {"ur3", "ur5", "ur10"}, 5);
  ck.classes = {"ur3", "ur5", "ur10"};
  ck.meta = {{"iterations", 12}};
  save_checkpoint(dir / "a.amnt", ck);
  const auto back = load_checkpoint(dir / "a.amnt");
  CHECK(back.classes == ck.classes);
  CHECK(back.meta == ck.meta);
  CHECK(back.network.descriptor().to_json() == d.to_json());

  const auto x = testing::random_batch(d, 2, 3);
  net::Graphf g1(false), g2(false);
  const auto a = ck.network.forward(g1, x), b = back.network.forward(g2, x);
  CHECK(std::memcmp(a.mask_prob.values().data(), b.mask_prob.values().data(), a.mask_prob.numel() * 4) == 0);
  CHECK(std::memcmp(a.joints.values().data(), b.joints.values().data(), a.joints.numel() * 4) == 0);
  CHECK(std::memcmp(a.type_dist.values().data(), b.type_dist.values().data(), a.type_dist.numel() * 4) == 0);
}

TEST_CASE("checkpoint byte layout") {
  TempDir dir;
  Checkpoint ck;
  ck.network = net::Network(tiny_descriptor(2), {"ur3", "ur5"}, 5);
  ck.classes = {"ur3", "ur5"};
  save_checkpoint(dir / "a.amnt", ck);
  const auto bytes = read_file(dir / "a.amnt");
  REQUIRE(bytes.size() > 16);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "AMNT");
  std::uint32_t version = 0;
  std::uint64_t header_len = 0;
  for (int i = 3; i >= 0; --i) version = version << 8 | bytes[4 + i];
  for (int i = 7; i >= 0; --i) header_len = header_len << 8 | bytes[8 + i];
  CHECK(version == kCheckpointVersion);
  const auto header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + header_len);
  std::size_t blob_bytes = 0;
  for (const auto& t : header.at("tensors")) blob_bytes += t.at("byte_len").get<std::size_t>();
  CHECK(16 + header_len + blob_bytes == bytes.size());
  CHECK(header.at("tags").at("trunk1") == "trunk_frozen");
  // First blob is trunk1's weight as little-endian floats.
  const auto& w = ck.network.layer("trunk1").weight;
  for (std::size_t k = 0; k < 4; ++k) {
    std::uint32_t bits = 0;
    for (int i = 3; i >= 0; --i) bits = bits << 8 | bytes[16 + header_len + 4 * k + i];
    float v;
    std::memcpy(&v, &bits, 4);
    CHECK(v == w.values()[k]);
  }
}

TEST_CASE("damaged checkpoints are rejected") {
  TempDir dir;
  Checkpoint ck;
  ck.network = net::Network(tiny_descriptor(2), {"ur3", "ur5"}, 5);
  ck.classes = {"ur3", "ur5"};
  save_checkpoint(dir / "a.amnt", ck);
  const auto good = read_file(dir / "a.amnt");
  const auto write = [&](const std::vector<std::uint8_t>& b) {
    write_file(dir / "b.amnt", std::string(b.begin(), b.end()));
    return dir / "b.amnt";
  };
  auto flipped = good;
  flipped[good.size() - 100] ^= 0x40;
  CHECK_THROWS_AS(load_checkpoint(write(flipped)), CheckpointError);
  auto truncated = good;
  truncated.resize(good.size() - 3);
  CHECK_THROWS_AS(load_checkpoint(write(truncated)), CheckpointError);
  auto magic = good;
  magic[0] = 'X';
  CHECK_THROWS_AS(load_checkpoint(write(magic)), CheckpointError);
  auto version = good;
  version[4] = 99;
  CHECK_THROWS_AS(load_checkpoint(write(version)), CheckpointError);
  CHECK_THROWS(load_checkpoint(dir / "missing.amnt"));
}

TEST_CASE("pretraining learns, logs consistently and is deterministic") {
  const auto set = make_tiny_set({"ur3", "ur5"}, 12, 1);
  auto cfg = tiny_config();
  cfg.total_iters = 150;
  std::vector<LogRecord> log;
  const auto r = pretrain(set, cfg, tiny_descriptor(2), [&](const LogRecord& l) { log.push_back(l); });
  REQUIRE(r.history.size() == 150);
  CHECK(r.iterations == 150);
  const auto mean = [&](std::size_t a, std::size_t b) {
    double s = 0;
    for (std::size_t i = a; i < b; ++i) s += r.history[i];
    return s / double(b - a);
  };
  CHECK(mean(130, 150) < mean(0, 20));
  CHECK(r.history.front() > r.history.back());

  REQUIRE(!log.empty());
  const auto& w = cfg.loss_weights;
  for (const auto& l : log) {
    CHECK(l.stage == 0);
    const double recombined = w.mask * l.loss.mask + w.jcoords * l.loss.jcoords + w.bcoords * l.loss.bcoords + w.type * l.loss.type;
    CHECK(std::abs(l.loss.final - recombined) < 1e-6);
    CHECK(std::abs(l.lr - lr_schedule(l.iter, cfg)) < 1e-15);
    const auto j = l.to_json();
    for (const char* k : {"iter", "stage", "mask", "jcoords", "bcoords", "type", "final", "lr"}) CHECK(j.contains(k));
    CHECK(j.size() == 8);
  }

  const auto again = pretrain(set, cfg, tiny_descriptor(2));
  const auto pa = r.checkpoint.network.parameters(), pb = again.checkpoint.network.parameters();
  bool same = true;
  for (std::size_t i = 0; i < pa.size(); ++i)
    same &= std::memcmp(pa[i].values().data(), pb[i].values().data(), pa[i].numel() * 4) == 0;
  CHECK(same);
  CHECK(again.history == r.history);
}

TEST_CASE("pretraining rejects data from several families") {
  const auto set = make_tiny_set({"ur3", "kuka"}, 6, 2);
  CHECK_THROWS_AS(pretrain(set, tiny_config(), tiny_descriptor(2)), DataContractError);
  const auto ok = make_tiny_set({"ur3", "ur5"}, 6, 2);
  CHECK_THROWS_AS(pretrain(ok, tiny_config(), net::ArchitectureDescriptor::desk_scale()), DataContractError);
}

TEST_CASE("transfer freezes the trunk and unlocks in two stages") {
  const auto base_set = make_tiny_set({"ur3", "ur5"}, 12, 3);
  auto cfg = tiny_config();
  cfg.total_iters = 60;
  const auto base = pretrain(base_set, cfg, tiny_descriptor(2)).checkpoint;
  const auto frozen_before = snapshot(base.network, net::LayerGroup::trunk_frozen);
  const auto unlock_before = snapshot(base.network, net::LayerGroup::stage2_unlockable);

  const auto mixed = make_tiny_set({"ur3", "ur5", "kuka"}, 10, 4);
  cfg.stop_on_plateau = false;
  cfg.stage1_cap = 40;
  cfg.stage2_extra_iters = 30;
  std::vector<LogRecord> log;
  const auto r = transfer(base, mixed, cfg, [&](const LogRecord& l) { log.push_back(l); });
  CHECK(r.stage_switch_iter == 40);
  CHECK(r.iterations == 70);
  CHECK(r.checkpoint.classes == mixed.classes);
  CHECK(r.checkpoint.network.layer("type_out").weight.dim(0) == 3);

  CHECK(snapshot(r.checkpoint.network, net::LayerGroup::trunk_frozen) == frozen_before);
  CHECK(snapshot(r.checkpoint.network, net::LayerGroup::stage2_unlockable) != unlock_before);
  // The caller's checkpoint is left alone.
  CHECK(snapshot(base.network, net::LayerGroup::stage2_unlockable) == unlock_before);

  int last_stage = 1;
  for (const auto& l : log) {
    CHECK(l.stage >= last_stage);
    last_stage = l.stage;
    CHECK(((l.stage == 1) == (l.iter < 40)));
  }
  CHECK(last_stage == 2);

  const auto again = transfer(base, mixed, cfg);
  CHECK(again.history == r.history);
}

TEST_CASE("stage one touches only the head layers") {
  const auto base_set = make_tiny_set({"ur3", "ur5"}, 8, 5);
  auto cfg = tiny_config();
  cfg.total_iters = 30;
  const auto base = pretrain(base_set, cfg, tiny_descriptor(2)).checkpoint;
  const auto mixed = make_tiny_set({"ur3", "ur5", "panda"}, 6, 6);
  cfg.stop_on_plateau = false;
  cfg.stage1_cap = 30;
  cfg.stage2_extra_iters = 20;
  std::map<int, std::vector<std::vector<float>>> unlockable, heads;
  std::map<int, std::size_t> trainable;
  const auto r = transfer(base, mixed, cfg, {}, [&](int stage, const net::Network& n) {
    unlockable[stage] = snapshot(n, net::LayerGroup::stage2_unlockable);
    heads[stage] = snapshot(n, net::LayerGroup::stage1_trainable);
    for (const auto& p : n.parameters()) trainable[stage] += !p.frozen();
  });
  REQUIRE(unlockable.size() == 2);
  // Byte-equal after stage one, moved by stage two.
  CHECK(unlockable[1] == snapshot(base.network, net::LayerGroup::stage2_unlockable));
  CHECK(unlockable[2] != unlockable[1]);
  CHECK(heads[2] != heads[1]);
  CHECK(trainable[1] == 2 * 4);
  CHECK(trainable[2] > trainable[1]);
  CHECK(snapshot(r.checkpoint.network, net::LayerGroup::stage2_unlockable) == unlockable[2]);
}

TEST_CASE("transfer data contract") {
  const auto base_set = make_tiny_set({"ur3", "ur5"}, 6, 7);
  auto cfg = tiny_config();
  cfg.total_iters = 10;
  const auto base = pretrain(base_set, cfg, tiny_descriptor(2)).checkpoint;
  cfg.stage1_cap = cfg.stage2_extra_iters = 5;
  CHECK_THROWS_AS(transfer(base, make_tiny_set({"kuka", "panda"}, 6, 8), cfg), DataContractError);
  CHECK_THROWS_AS(transfer(base, make_tiny_set({"ur3", "ur5"}, 6, 8), cfg), DataContractError);
  CHECK_THROWS_AS(transfer(base, make_tiny_set({"ur10", "kuka"}, 6, 8), cfg), DataContractError);
  // Only some base classes need samples; the class list must still cover the checkpoint.
  auto partial = make_tiny_set({"ur10", "kuka", "ur3", "ur5"}, 6, 8);
  partial = partial.subset(std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11});
  CHECK_NOTHROW(transfer(base, partial, cfg));
}

TEST_CASE("non-finite losses abort with a dump") {
  auto set = make_tiny_set({"ur3", "ur5"}, 6, 9);
  set.base[4] = std::numeric_limits<float>::quiet_NaN();
  auto cfg = tiny_config();
  cfg.total_iters = 20;
  try {
    pretrain(set, cfg, tiny_descriptor(2));
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(e.dump().contains("iter"));
  } catch (const loss::NonFiniteLossError&) {
    // Also acceptable: caught at the loss level before any step.
  }
}

TEST_CASE("augmentation keeps targets consistent with the image") {
  const std::size_t h = 40, w = 48;
  // A bright dot at the projection of a camera-frame point; after the warp the
  // dot must sit at the projection of the transformed point.
  const double f = 60.0;
  const double px = 0.12, py = -0.05, pz = 1.0;
  std::vector<float> image(3 * h * w, 0.5f), mask(h * w, 0.0f), joints(21, 0.0f), base{float(px), float(py), float(pz)};
  const auto put_dot = [&](double u, double v) {
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        if (std::hypot(x + 0.5 - u, y + 0.5 - v) < 2.5) mask[y * w + x] = 1.0f;
  };
  put_dot(f * px / pz + w / 2.0, f * py / pz + h / 2.0);
  AugmentDraw d;
  d.flip = true;
  d.roll = 20.0 * std::numbers::pi / 180.0;
  apply_augmentation(d, h, w, image, mask, joints, base);
  CHECK(std::abs(std::hypot(base[0], base[1]) - std::hypot(px, py)) < 1e-6);
  CHECK(base[2] == float(pz));
  double cx = 0, cy = 0, n = 0;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      if (mask[y * w + x] > 0.5f) cx += x + 0.5, cy += y + 0.5, n += 1;
  REQUIRE(n > 0);
  CHECK(std::abs(cx / n - (f * base[0] / base[2] + w / 2.0)) < 0.75);
  CHECK(std::abs(cy / n - (f * base[1] / base[2] + h / 2.0)) < 0.75);
  for (float v : mask) CHECK((v == 0.0f || v == 1.0f));

  // The identity draw changes nothing.
  std::vector<float> img2(3 * h * w), m2(h * w), j2(21), b2{0.1f, 0.2f, 1.5f};
  for (std::size_t i = 0; i < img2.size(); ++i) img2[i] = float(i % 7) / 7.0f;
  const auto img_copy = img2;
  const auto b_copy = b2;
  apply_augmentation(AugmentDraw{}, h, w, img2, m2, j2, b2);
  CHECK(img2 == img_copy);
  CHECK(b2 == b_copy);
}

TEST_CASE("family names") {
  CHECK(families({"ur3", "ur10", "kuka"}) == std::vector<std::string>{"ur", "kuka"});
}
