#include "doctest.h"

#include <algorithm>
#include <functional>
#include <cmath>
#include <random>
#include <set>

#include "armsight/multinet.hpp"
#include "armsight/objectives.hpp"

using namespace armsight;
using namespace armsight::net;

namespace {

const std::vector<std::string> kFive{"ur3", "ur5", "ur10", "kuka", "panda"};

Tensorf random_input(const ArchitectureDescriptor& d, std::size_t batch, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::vector<float> v(batch * 3 * d.input_h * d.input_w);
  for (auto& x : v) x = u(rng);
  return Tensorf::constant({batch, 3, d.input_h, d.input_w}, v);
}

bool all_zero(const Tensorf& t) {
  return std::all_of(t.values().begin(), t.values().end(), [](float v) { return v == 0.0f; });
}

bool all_grad_zero(const Layer& l) {
  const auto z = [](float v) { return v == 0.0f; };
  return std::all_of(l.weight.grad().begin(), l.weight.grad().end(), z) &&
         std::all_of(l.bias.grad().begin(), l.bias.grad().end(), z);
}

}  // namespace

TEST_CASE("preprocessing examples") {
  RgbImage white(480, 360);
  std::fill(white.data.begin(), white.data.end(), 255);
  const auto t = preprocess(white, 106, 128);
  CHECK(t.size() == 3u * 106 * 128);
  CHECK(std::all_of(t.begin(), t.end(), [](float v) { return v == 1.0f; }));

  const auto paper = ArchitectureDescriptor::paper_scale();
  CHECK(paper.input_w == 256);
  CHECK(paper.input_h == 212);
  CHECK(preprocess(white, paper.input_h, paper.input_w).size() == 3u * 212 * 256);

  RgbImage img(480, 360);
  std::mt19937_64 rng(1);
  for (auto& b : img.data) b = static_cast<std::uint8_t>(rng());
  const auto a = preprocess(img, 106, 128), b = preprocess(img, 106, 128);
  CHECK(a == b);
  CHECK(std::all_of(a.begin(), a.end(), [](float v) { return v >= 0.0f && v <= 1.0f; }));

  const std::vector<std::uint8_t> gray(480 * 360, 10);
  CHECK_THROWS(preprocess(gray, 480, 360, 1, 106, 128));
}

TEST_CASE("desk crop keeps the principal point centered") {
  const auto rc = ResizeCrop::make(480, 360, 128, 106);
  // Network pixel edges 0 and 128 map to source columns symmetric about 240.
  const double left = (0.0 + rc.offset_x) / rc.scale, right = (128.0 + rc.offset_x) / rc.scale;
  CHECK(std::abs((left + right) / 2 - 240.0) < 1e-9);
  const double top = rc.offset_y / rc.scale, bottom = (106.0 + rc.offset_y) / rc.scale;
  CHECK(std::abs((top + bottom) / 2 - 180.0) < 1e-9);
}

TEST_CASE("mask preprocessing stays binary") {
  Mask m(480, 360);
  for (int y = 100; y < 200; ++y)
    for (int x = 200; x < 300; ++x) m.at(x, y) = 1;
  const auto small = preprocess_mask(m, 106, 128);
  CHECK(small.size() == 106u * 128);
  CHECK(std::all_of(small.begin(), small.end(), [](std::uint8_t v) { return v <= 1; }));
  const auto fg = std::count(small.begin(), small.end(), 1);
  // Area scales with the square of the resize factor.
  const double s = 106.0 / 360.0;
  CHECK(std::abs(fg - 10000 * s * s) < 0.1 * 10000 * s * s);
}

TEST_CASE("parameter count matches a hand count") {
  const auto d = ArchitectureDescriptor::desk_scale();
  Network net(d, kFive, 1);
  const std::size_t conv = [] {
    const auto c = [](std::size_t i, std::size_t o) { return 9 * i * o + o; };
    return c(3, 8) + c(8, 16) + c(16, 32) + c(32, 32) +  // trunk
           c(32, 32) + c(32, 32) + c(32, 16) + c(16, 8) + c(8, 1);  // mask branch
  }();
  const std::size_t flat = 32 * 6 * 8;  // 106x128 after four 2x2 pools
  const auto fc = [](std::size_t i, std::size_t o) { return i * o + o; };
  const std::size_t dense = 3 * fc(flat, 128) + fc(128, 21) + fc(128, 3) + fc(128, 5);
  CHECK(conv == 39633);
  CHECK(conv + dense == 633582);
  std::size_t counted = 0;
  for (const auto& p : net.parameters()) counted += p.numel();
  CHECK(counted == conv + dense);
  auto dd = d;
  dd.num_classes = 5;
  CHECK(dd.parameter_count() == conv + dense);
}

TEST_CASE("layer groups partition the parameters") {
  Network net(ArchitectureDescriptor::desk_scale(), kFive, 1);
  std::set<const void*> seen;
  std::size_t total = 0;
  for (auto g : {LayerGroup::trunk_frozen, LayerGroup::stage2_unlockable, LayerGroup::stage1_trainable}) {
    for (const auto& p : net.parameters(g)) {
      CHECK(seen.insert(p.values().data()).second);
      ++total;
    }
  }
  CHECK(total == net.parameters().size());
  for (const auto& l : net.layers()) {
    const bool head = l.spec.name.ends_with("_out");
    CHECK((l.spec.group == LayerGroup::stage1_trainable) == head);
  }
  CHECK(net.layer("trunk1").spec.group == LayerGroup::trunk_frozen);
  CHECK(net.layer("trunk4").spec.group == LayerGroup::stage2_unlockable);
  CHECK(layer_group_from_string(to_string(LayerGroup::stage2_unlockable)) == LayerGroup::stage2_unlockable);
  CHECK_THROWS(layer_group_from_string("red"));
}

TEST_CASE("same seed builds identical parameters") {
  const auto d = ArchitectureDescriptor::desk_scale();
  Network a(d, kFive, 7), b(d, kFive, 7), c(d, kFive, 8);
  const auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  bool equal = true, differs = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    equal &= std::equal(pa[i].values().begin(), pa[i].values().end(), pb[i].values().begin());
    differs |= !std::equal(pa[i].values().begin(), pa[i].values().end(), pc[i].values().begin());
  }
  CHECK(equal);
  CHECK(differs);
}

TEST_CASE("forward contract") {
  const auto d = ArchitectureDescriptor::desk_scale();
  Network net(d, kFive, 3);
  const auto x = random_input(d, 2, 5);
  Graphf g(false);
  const auto out = net.forward(g, x);
  CHECK(out.mask_prob.shape() == ad::Shape{2, 1, 106, 128});
  CHECK(out.joints.shape() == ad::Shape{2, 21});
  CHECK(out.base.shape() == ad::Shape{2, 3});
  CHECK(out.type_dist.shape() == ad::Shape{2, 5});
  for (std::size_t b = 0; b < 2; ++b) {
    double s = 0;
    for (std::size_t c = 0; c < 5; ++c) s += out.type_dist.values()[b * 5 + c];
    CHECK(std::abs(s - 1.0) < 1e-6);
  }
  for (const auto* t : {&out.mask_prob, &out.joints, &out.base, &out.type_dist})
    CHECK(std::all_of(t->values().begin(), t->values().end(), [](float v) { return std::isfinite(v); }));
  CHECK(std::all_of(out.mask_prob.values().begin(), out.mask_prob.values().end(),
                    [](float v) { return v > 0.0f && v < 1.0f; }));

  Graphf g2(false);
  const auto again = net.forward(g2, x);
  CHECK(std::equal(again.joints.values().begin(), again.joints.values().end(), out.joints.values().begin()));
  CHECK(std::equal(again.mask_prob.values().begin(), again.mask_prob.values().end(),
                   out.mask_prob.values().begin()));

  CHECK_THROWS_AS(net.forward(g, Tensorf::constant({1, 3, 100, 128})), ad::ShapeError);
}

TEST_CASE("extreme inputs stay finite") {
  const auto d = ArchitectureDescriptor::desk_scale();
  Network net(d, kFive, 3);
  for (float v : {0.0f, 1.0f}) {
    Graphf g(false);
    const auto out = net.forward(g, Tensorf::constant({1, 3, d.input_h, d.input_w},
                                                      std::vector<float>(3 * d.input_h * d.input_w, v)));
    CHECK(std::all_of(out.joints.values().begin(), out.joints.values().end(), [](float x) { return std::isfinite(x); }));
    CHECK(std::all_of(out.type_dist.values().begin(), out.type_dist.values().end(),
                      [](float x) { return std::isfinite(x); }));
  }
}

TEST_CASE("joint slot selection follows the robot") {
  std::vector<float> row(21);
  for (std::size_t i = 0; i < 21; ++i) row[i] = float(i);
  const auto ur = select_joint_outputs(row, "ur5");
  CHECK(ur.size() == 18);
  CHECK(std::equal(ur.begin(), ur.end(), row.begin()));
  CHECK(select_joint_outputs(row, "kuka").size() == 21);
  CHECK(select_joint_outputs(row, "panda").size() == 21);
  CHECK(select_joint_outputs(row, "ur5") == ur);
  CHECK(joint_slots("ur3") == 6);
  CHECK(joint_slots("kuka") == 7);
}

TEST_CASE("branches share exactly the trunk") {
  const auto d = ArchitectureDescriptor::desk_scale();
  Network net(d, kFive, 3);
  // Zero the last trunk block: its output, the only input of every branch, becomes zero.
  for (auto& l : net.layers()) {
    if (l.spec.name == "trunk4") {
      std::fill(l.weight.values().begin(), l.weight.values().end(), 0.0f);
      std::fill(l.bias.values().begin(), l.bias.values().end(), 0.0f);
    }
  }
  Graphf g(false);
  const auto f = net.features(g, random_input(d, 1, 2));
  // Biases start at zero, so every branch activation is zero too.
  CHECK(all_zero(f.mask));
  CHECK(all_zero(f.joint));
  CHECK(all_zero(f.base));
  CHECK(all_zero(f.type));
}

TEST_CASE("each loss reaches only its own branch") {
  const auto d = ArchitectureDescriptor::desk_scale();
  Network net(d, kFive, 3);
  const auto x = random_input(d, 1, 9);
  const auto w = loss::ClassWeights::from_probability(0.1);
  const std::vector<float> mask_gt(d.input_h * d.input_w, 0.0f), jgt(21, 0.5f), bgt(3, 1.0f);
  const std::vector<int> joints{6}, label{2};

  struct Case {
    std::string branch;
    std::function<Tensorf(Graphf&, const NetworkOutputs&)> loss;
  };
  const std::vector<Case> cases{
      {"mask", [&](Graphf& g, const NetworkOutputs& o) { return loss::mask_loss<float>(g, o.mask_prob, mask_gt, w); }},
      {"joint", [&](Graphf& g, const NetworkOutputs& o) { return loss::joint_coords_loss<float>(g, o.joints, jgt, joints); }},
      {"base", [&](Graphf& g, const NetworkOutputs& o) { return loss::base_coords_loss<float>(g, o.base, bgt); }},
      {"type", [&](Graphf& g, const NetworkOutputs& o) { return loss::type_loss<float>(g, o.type_dist, label); }},
  };
  for (const auto& c : cases) {
    net.zero_grad();
    Graphf g;
    auto l = c.loss(g, net.forward(g, x));
    g.backward(l);
    for (const auto& l : net.layers()) {
      CAPTURE(c.branch);
      CAPTURE(l.spec.name);
      if (l.spec.name.starts_with("trunk")) continue;
      const bool own = l.spec.name.starts_with(c.branch + "_");
      if (!own) CHECK(all_grad_zero(l));
    }
    CHECK_FALSE(all_grad_zero(net.layer(c.branch + "_out")));
    CHECK_FALSE(all_grad_zero(net.layer("trunk1")));
  }
}

TEST_CASE("extending classes keeps the existing rows") {
  const auto d = ArchitectureDescriptor::desk_scale();
  Network net(d, {"ur3", "ur5", "ur10"}, 3);
  const auto before = net.layer("type_out").weight;
  const std::vector<float> ur5_row(before.values().begin() + 128, before.values().begin() + 256);
  net.extend_classes({"ur3", "kuka", "ur5", "ur10", "panda"}, 4);
  const auto& after = net.layer("type_out").weight;
  CHECK(after.shape() == ad::Shape{5, 128});
  CHECK(std::equal(ur5_row.begin(), ur5_row.end(), after.values().begin() + 2 * 128));
  CHECK_THROWS(net.extend_classes({"kuka", "panda"}, 4));
}

TEST_CASE("descriptor json round trip rejects unknown keys") {
  auto d = ArchitectureDescriptor::desk_scale();
  d.num_classes = 5;
  auto j = d.to_json();
  CHECK(ArchitectureDescriptor::from_json(j).to_json() == j);
  j["dropout"] = 0.5;
  CHECK_THROWS(ArchitectureDescriptor::from_json(j));
  auto bad = d;
  bad.max_joints = 6;
  CHECK_THROWS(bad.validate());
  bad = d;
  bad.input_h = 8;
  CHECK_THROWS(bad.validate());
}
