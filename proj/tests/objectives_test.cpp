#include "doctest.h"

#include <cmath>
#include <numeric>
#include <random>

#include "armsight/objectives.hpp"
#include "support/grad_cases.hpp"

using namespace armsight;
using namespace armsight::loss;
using armsight::testing::check_gradients;
using armsight::testing::Graphd;
using armsight::testing::Tensord;

namespace {

constexpr double kTol = 1e-6;

std::vector<std::uint8_t> mask_with_fraction(std::size_t n, double p) {
  std::vector<std::uint8_t> m(n, 0);
  const auto fg = static_cast<std::size_t>(std::llround(p * n));
  std::fill(m.begin(), m.begin() + fg, 1);
  return m;
}

ClassWeights weights_of(const std::vector<std::uint8_t>& m) {
  const std::span<const std::uint8_t> s(m);
  return class_weights(std::span<const std::span<const std::uint8_t>>(&s, 1));
}

}  // namespace

TEST_CASE("class weights examples") {
  auto w = ClassWeights::from_probability(0.1);
  CHECK(w.w_fg == doctest::Approx(10.0).epsilon(1e-12));
  CHECK(w.w_bg == doctest::Approx(1.0 / 0.9).epsilon(1e-12));
  CHECK(std::abs(w.w_bg - 1.1111) < 1e-4);
  w = ClassWeights::from_probability(0.5);
  CHECK(w.w_fg == 2.0);
  CHECK(w.w_bg == 2.0);
  for (double p : {0.06, 0.1, 0.17}) {
    const auto c = weights_of(mask_with_fraction(10000, p));
    CHECK(std::abs(c.p_fg - p) < 1e-9);
    CHECK(std::abs(c.w_fg * c.p_fg - 1.0) < 1e-9);
    CHECK(std::abs(c.w_bg * (1.0 - c.p_fg) - 1.0) < 1e-9);
    CHECK(c.w_fg >= 5.88);
    CHECK(c.w_fg <= 16.67);
  }
}

TEST_CASE("class weights pool pixels over all masks") {
  const std::vector<std::uint8_t> a{1, 0, 0, 0}, b{1, 1, 0, 0, 0, 0, 0, 0};
  const std::vector<std::span<const std::uint8_t>> both{a, b};
  CHECK(class_weights(both).p_fg == doctest::Approx(3.0 / 12.0));
}

TEST_CASE("degenerate splits are rejected") {
  CHECK_THROWS(weights_of(std::vector<std::uint8_t>(16, 0)));
  CHECK_THROWS(weights_of(std::vector<std::uint8_t>(16, 1)));
  CHECK_THROWS(class_weights({}));
  CHECK_THROWS(ClassWeights::from_probability(0.0));
  CHECK_THROWS(ClassWeights::from_probability(1.0));
}

TEST_CASE("pixel loss examples") {
  const auto w = ClassWeights::from_probability(0.1);
  CHECK(pixel_loss(1.0, 1, w) < 1e-5);
  CHECK(std::abs(pixel_loss(0.5, 1, w) - 10.0 * std::log(2.0)) < kTol);
  CHECK(std::abs(pixel_loss(0.5, 1, w) - 6.9315) < 1e-4);
  CHECK(std::abs(pixel_loss(0.5, 0, w) - std::log(2.0) / 0.9) < kTol);
  CHECK(std::abs(pixel_loss(0.5, 0, w) - 0.7702) < 1e-4);
  // Clamping keeps extreme predictions finite.
  CHECK(std::isfinite(pixel_loss(0.0, 1, w)));
  CHECK(std::isfinite(pixel_loss(1.0, 0, w)));
}

TEST_CASE("mask loss examples") {
  const auto w = ClassWeights::from_probability(0.1);
  const std::vector<double> est(4, 0.5);
  const std::vector<std::uint8_t> gt(4, 1);
  CHECK(std::abs(mask_loss(est, gt, w) - 10.0 * std::log(2.0)) < kTol);

  const std::vector<std::uint8_t> m{1, 0, 0, 1, 0, 0};
  std::vector<double> perfect(m.begin(), m.end());
  CHECK(mask_loss(perfect, m, w) < 1e-5);

  // Tiling 2x2 keeps the normalized loss.
  const std::vector<double> e{0.2, 0.7, 0.4, 0.9, 0.1, 0.55};
  std::vector<double> e4;
  std::vector<std::uint8_t> m4;
  for (int t = 0; t < 4; ++t) {
    e4.insert(e4.end(), e.begin(), e.end());
    m4.insert(m4.end(), m.begin(), m.end());
  }
  CHECK(std::abs(mask_loss(e4, m4, w) - mask_loss(e, m, w)) < 1e-12);
  CHECK_THROWS(mask_loss(std::vector<double>(3, 0.5), m, w));
}

TEST_CASE("constant prediction minimizing the weighted mask loss is one half") {
  for (double p : {0.05, 0.10, 0.17, 0.22, 0.3}) {
    const auto gt = mask_with_fraction(2000, p);
    const auto w = weights_of(gt);
    double best_q = 0, best = 1e300;
    for (int k = 1; k < 1000; ++k) {
      const double q = k * 0.001;
      const double l = mask_loss(std::vector<double>(gt.size(), q), gt, w);
      if (l < best) best = l, best_q = q;
    }
    CAPTURE(p);
    CHECK(std::abs(best_q - 0.5) <= 0.01);
  }
}

TEST_CASE("joint coordinate loss examples") {
  std::vector<double> j(18);
  std::iota(j.begin(), j.end(), 0.0);
  CHECK(joint_coords_loss(j, j) == 0.0);
  auto e = j;
  for (std::size_t i = 0; i < 6; ++i) e[3 * i] += 0.03, e[3 * i + 2] += 0.04;
  CHECK(std::abs(joint_coords_loss(j, e) - 0.05) < kTol);
  std::vector<double> j7(21, 0.3), e7 = j7;
  e7[9] += 0.07;
  CHECK(std::abs(joint_coords_loss(j7, e7) - 0.01) < kTol);
  CHECK_THROWS(joint_coords_loss(j7, e));
}

TEST_CASE("base coordinate loss examples") {
  const std::vector<double> b{0.1, -0.2, 1.5};
  CHECK(base_coords_loss(b, b) == 0.0);
  CHECK(std::abs(base_coords_loss(b, std::vector<double>{0.13, -0.16, 1.5}) - 0.05) < kTol);
  CHECK(std::abs(base_coords_loss(b, std::vector<double>{0.11, -0.18, 1.52}) - 0.03) < kTol);
}

TEST_CASE("coordinate losses are translation invariant and scale with residuals") {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n;
  std::vector<double> j(21), e(21);
  for (auto& v : j) v = n(rng);
  for (auto& v : e) v = n(rng);
  const double base = joint_coords_loss(j, e);
  auto js = j, es = e;
  const double shift[3] = {0.3, -1.2, 2.0};
  for (std::size_t i = 0; i < 21; ++i) js[i] += shift[i % 3], es[i] += shift[i % 3];
  CHECK(std::abs(joint_coords_loss(js, es) - base) < 1e-12);
  auto e2 = e;
  for (std::size_t i = 0; i < 21; ++i) e2[i] = j[i] + 2.5 * (e[i] - j[i]);
  CHECK(std::abs(joint_coords_loss(j, e2) - 2.5 * base) < 1e-12);

  const std::vector<double> b{0.2, 0.1, 1.0}, be{0.25, 0.0, 1.1};
  const std::vector<double> bs{1.2, -0.9, 3.0}, bes{1.25, -1.0, 3.1};
  CHECK(std::abs(base_coords_loss(b, be) - base_coords_loss(bs, bes)) < 1e-12);
}

TEST_CASE("type loss examples") {
  const std::vector<double> p{0, 0, 1, 0, 0};
  CHECK(type_loss(p, std::vector<double>{0, 0, 1, 0, 0}) < 1e-6);
  CHECK(std::abs(type_loss(p, std::vector<double>(5, 0.2)) - std::log(5.0)) < kTol);
  CHECK(std::abs(type_loss(p, std::vector<double>(5, 0.2)) - 1.6094) < 1e-4);
  const std::vector<double> q{0.1, 0.2, 0.3, 0.15, 0.25};
  const std::vector<int> perm{3, 0, 4, 1, 2};
  std::vector<double> pp(5), qp(5);
  for (int c = 0; c < 5; ++c) pp[perm[c]] = p[c], qp[perm[c]] = q[c];
  CHECK(std::abs(type_loss(pp, qp) - type_loss(p, q)) < 1e-15);
  CHECK_THROWS(type_loss(std::vector<double>{0.5, 0.5, 0, 0, 0}, q));
  CHECK_THROWS(type_loss(p, std::vector<double>{0.5, 0.5, 0.5, 0, 0}));
}

TEST_CASE("final loss examples") {
  const LossWeights w;
  CHECK(w.mask == 1.2);
  CHECK(w.jcoords == 1.2);
  CHECK(w.bcoords == 1.2);
  CHECK(w.type == 0.6);
  CHECK(std::abs(final_loss(1, 1, 1, 1, w).final - 4.2) < kTol);
  CHECK(final_loss(0, 0, 0, 0, w).final == 0.0);
  const LossWeights w2{2.4, 2.4, 2.4, 1.2};
  const auto a = final_loss(0.3, 0.2, 0.7, 1.1, w), b = final_loss(0.3, 0.2, 0.7, 1.1, w2);
  CHECK(std::abs(b.final - 2 * a.final) < 1e-12);
  CHECK(std::abs(a.final - (1.2 * 0.3 + 1.2 * 0.2 + 1.2 * 0.7 + 0.6 * 1.1)) < kTol);
  CHECK_THROWS_AS(final_loss(NAN, 0, 0, 0, w), NonFiniteLossError);
  CHECK_THROWS_AS(final_loss(0, 0, INFINITY, 0, w), NonFiniteLossError);
}

TEST_CASE("graph losses agree with the scalar forms") {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  const auto w = ClassWeights::from_probability(0.2);

  std::vector<double> prob(2 * 4 * 5);
  std::vector<std::uint8_t> gt8(prob.size());
  std::vector<double> gt(prob.size());
  for (std::size_t i = 0; i < prob.size(); ++i) {
    prob[i] = u(rng);
    gt8[i] = i % 3 == 0;
    gt[i] = gt8[i];
  }
  Graphd g;
  const double graph_mask = mask_loss<double>(g, Tensord::constant({2, 1, 4, 5}, prob), gt, w).item();
  const double scalar_mask = 0.5 * (mask_loss(std::span(prob).first(20), std::span(gt8).first(20), w) +
                                    mask_loss(std::span(prob).last(20), std::span(gt8).last(20), w));
  CHECK(std::abs(graph_mask - scalar_mask) < 1e-12);

  std::vector<double> est(2 * 21), jgt(2 * 21);
  for (auto& v : est) v = u(rng);
  for (auto& v : jgt) v = u(rng);
  const std::vector<int> joints{6, 7};
  const double graph_j = joint_coords_loss<double>(g, Tensord::constant({2, 21}, est), jgt, joints).item();
  const double scalar_j = 0.5 * (joint_coords_loss(std::span(jgt).first(18), std::span(est).first(18)) +
                                 joint_coords_loss(std::span(jgt).subspan(21, 21), std::span(est).subspan(21, 21)));
  CHECK(std::abs(graph_j - scalar_j) < 1e-12);

  const std::vector<double> q{0.1, 0.6, 0.3, 0.5, 0.25, 0.25};
  const std::vector<int> labels{1, 2};
  const double graph_t = type_loss<double>(g, Tensord::constant({2, 3}, q), labels).item();
  CHECK(std::abs(graph_t - 0.5 * (-std::log(0.6) - std::log(0.25))) < 1e-12);
}

TEST_CASE("graph loss gradients pass the finite-difference check") {
  for (const auto& c : armsight::testing::loss_grad_cases()) {
    const auto r = check_gradients(c, 99, 10);
    INFO(c.name << " max relative error " << r.max_rel_error);
    CHECK(r.max_rel_error < 1e-6);
  }
}

TEST_CASE("losses are non-negative and vanish only at the target") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int s = 0; s < 50; ++s) {
    std::vector<double> a(3), b(3);
    for (auto& v : a) v = u(rng);
    for (auto& v : b) v = u(rng);
    CHECK(base_coords_loss(a, b) > 0.0);
    CHECK(base_coords_loss(a, a) == 0.0);
  }
}
