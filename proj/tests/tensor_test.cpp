#include "doctest.h"

#include <cmath>

#include "armsight/tensor.hpp"
#include "support/grad_cases.hpp"

using namespace armsight;
using armsight::testing::check_gradients;
using armsight::testing::Graphd;
using armsight::testing::Tensord;

TEST_CASE("relu clips negatives") {
  Graphd g;
  auto y = ad::relu(g, Tensord::constant({3}, {-1, 0, 2}));
  CHECK(std::vector<double>(y.values().begin(), y.values().end()) == std::vector<double>{0, 0, 2});
}

TEST_CASE("softmax of equal logits is uniform") {
  Graphd g;
  auto y = ad::softmax(g, Tensord::constant({1, 5}, {0, 0, 0, 0, 0}));
  for (double v : y.values()) CHECK(v == doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("ones kernel over ones input sums nine cells") {
  Graphd g;
  auto x = Tensord::constant({1, 1, 4, 4}, std::vector<double>(16, 1.0));
  auto w = Tensord::constant({1, 1, 3, 3}, std::vector<double>(9, 1.0));
  auto b = Tensord::constant({1}, {0.0});
  auto y = ad::conv2d(g, x, w, b, 1, 0);
  CHECK(y.shape() == ad::Shape{1, 1, 2, 2});
  for (double v : y.values()) CHECK(v == 9.0);
}

TEST_CASE("shape mismatches name the dimensions") {
  Graphd g;
  auto x = Tensord::constant({2, 3}, std::vector<double>(6, 1.0));
  auto w = Tensord::constant({4, 5}, std::vector<double>(20, 1.0));
  auto b = Tensord::constant({4}, std::vector<double>(4, 0.0));
  CHECK_THROWS_AS(ad::dense(g, x, w, b), ad::ShapeError);
  try {
    ad::dense(g, x, w, b);
  } catch (const ad::ShapeError& e) {
    CHECK(std::string(e.what()).find('3') != std::string::npos);
  }
  CHECK_THROWS_AS(ad::add(g, x, Tensord::constant({3, 2}, std::vector<double>(6, 0.0))), ad::ShapeError);
}

TEST_CASE("sum gives unit gradients and mean of squares gives 2x") {
  {
    Graphd g;
    auto x = Tensord::variable({2, 3}, {1, 2, 3, 4, 5, 6});
    auto l = ad::sum(g, x);
    g.backward(l);
    for (double v : x.grad()) CHECK(v == 1.0);
  }
  {
    Graphd g;
    auto x = Tensord::variable({1}, {3.0});
    auto l = ad::mean(g, ad::mul(g, x, x));
    g.backward(l);
    CHECK(x.grad()[0] == doctest::Approx(6.0));
  }
}

TEST_CASE("backward rejects non-scalar losses and replays") {
  Graphd g;
  auto x = Tensord::variable({2}, {1, 2});
  auto y = ad::scale(g, x, 2.0);
  CHECK_THROWS_AS(g.backward(y), ad::ShapeError);
  auto l = ad::sum(g, y);
  g.backward(l);
  CHECK_THROWS_AS(g.backward(l), ad::GraphError);
}

TEST_CASE("gradients accumulate across uses and zero_grad resets") {
  auto x = Tensord::variable({1}, {2.0});
  {
    Graphd g;
    auto l = ad::sum(g, ad::add(g, x, x));
    g.backward(l);
    CHECK(x.grad()[0] == 2.0);
  }
  {
    Graphd g;
    auto l = ad::sum(g, x);
    g.backward(l);
    CHECK(x.grad()[0] == 3.0);  // accumulated on top of the previous graph
  }
  x.zero_grad();
  CHECK(x.grad()[0] == 0.0);
  Graphd g;
  auto l = ad::sum(g, x);
  g.backward(l);
  CHECK(x.grad()[0] == 1.0);
}

TEST_CASE("backward visits nodes in reverse order") {
  Graphd g;
  auto x = Tensord::variable({2}, {1, -1});
  auto a = ad::relu(g, x);
  auto b = ad::scale(g, a, 3.0);
  auto l = ad::sum(g, b);
  REQUIRE(g.nodes().size() == 3);
  CHECK(g.nodes()[0].kind == ad::OpKind::relu);
  CHECK(g.nodes()[2].kind == ad::OpKind::sum);
  g.backward(l);
  CHECK(x.grad()[0] == 3.0);
  CHECK(x.grad()[1] == 0.0);
}

TEST_CASE("inference graphs record nothing") {
  Graphd g(false);
  auto x = Tensord::variable({2}, {1, 2});
  auto y = ad::sum(g, ad::relu(g, x));
  CHECK(g.nodes().empty());
  CHECK(y.item() == 3.0);
}

TEST_CASE("frozen tensors still receive gradients") {
  auto w = Tensord::variable({1}, {2.0});
  auto x = Tensord::variable({1}, {3.0});
  w.set_frozen(true);
  Graphd g;
  auto l = ad::sum(g, ad::mul(g, w, x));
  g.backward(l);
  CHECK(w.grad()[0] == 3.0);
  CHECK(x.grad()[0] == 2.0);
}

TEST_CASE("sgd examples") {
  SUBCASE("one plain step") {
    auto p = Tensord::variable({1}, {1.0});
    p.grad()[0] = 0.5;
    ad::SgdMomentum<double> opt({p}, 0.0);
    opt.step(0.1);
    CHECK(p.values()[0] == doctest::Approx(0.95).epsilon(1e-15));
  }
  SUBCASE("frozen parameter is untouched") {
    auto p = Tensord::variable({1}, {1.0});
    p.grad()[0] = 123.0;
    p.set_frozen(true);
    ad::SgdMomentum<double> opt({p}, 0.9);
    opt.step(0.1);
    opt.step(0.1);
    CHECK(p.values()[0] == 1.0);
  }
  SUBCASE("momentum recursion") {
    auto p = Tensord::variable({1}, {0.0});
    ad::SgdMomentum<double> opt({p}, 0.9);
    p.grad()[0] = 1.0;
    opt.step(0.1);
    CHECK(p.values()[0] == doctest::Approx(-0.1).epsilon(1e-12));
    p.grad()[0] = 1.0;
    opt.step(0.1);
    CHECK(p.values()[0] == doctest::Approx(-0.29).epsilon(1e-12));
  }
  SUBCASE("non-positive learning rate is rejected") {
    auto p = Tensord::variable({1}, {0.0});
    ad::SgdMomentum<double> opt({p}, 0.9);
    CHECK_THROWS(opt.step(0.0));
    CHECK_THROWS(opt.step(-1.0));
  }
}

TEST_CASE("adam first step moves by lr against the gradient sign") {
  auto p = Tensord::variable({2}, {1.0, 1.0});
  p.grad()[0] = 0.3;
  p.grad()[1] = -2.0;
  ad::Adam<double> opt({p});
  opt.step(0.01);
  CHECK(p.values()[0] == doctest::Approx(0.99).epsilon(1e-6));
  CHECK(p.values()[1] == doctest::Approx(1.01).epsilon(1e-6));
  auto q = Tensord::variable({1}, {5.0});
  q.set_frozen(true);
  q.grad()[0] = 1.0;
  ad::Adam<double> frozen({q});
  frozen.step(0.1);
  CHECK(q.values()[0] == 5.0);
}

TEST_CASE("freeze soundness over a sequence of steps") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n;
  auto a = Tensord::variable({4}, {1, 2, 3, 4});
  auto b = Tensord::variable({4}, {1, 2, 3, 4});
  b.set_frozen(true);
  const std::vector<double> snapshot(b.values().begin(), b.values().end());
  ad::SgdMomentum<double> opt({a, b}, 0.9);
  for (int s = 0; s < 20; ++s) {
    for (auto& v : a.grad()) v = n(rng);
    for (auto& v : b.grad()) v = n(rng);
    opt.step(0.05);
  }
  CHECK(std::vector<double>(b.values().begin(), b.values().end()) == snapshot);
  CHECK(a.values()[0] != 1.0);
}

TEST_CASE("forward and backward are deterministic") {
  const auto run = [] {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(-1, 1);
    std::vector<double> xv(2 * 3 * 6 * 6), wv(4 * 3 * 3 * 3);
    for (auto& v : xv) v = u(rng);
    for (auto& v : wv) v = u(rng);
    auto x = Tensord::variable({2, 3, 6, 6}, xv);
    auto w = Tensord::variable({4, 3, 3, 3}, wv);
    auto b = Tensord::variable({4}, {0.1, 0.2, 0.3, 0.4});
    Graphd g;
    auto y = ad::max_pool2x2(g, ad::relu(g, ad::conv2d(g, x, w, b, 1, 1)));
    auto l = ad::mean(g, ad::mul(g, y, y));
    g.backward(l);
    std::vector<double> out(w.grad().begin(), w.grad().end());
    out.push_back(l.item());
    return out;
  };
  CHECK(run() == run());
}

// Finite-difference checks, 64-bit, step 1e-5, ten random points each.
TEST_CASE("gradient checks for every op") {
  for (const auto& c : armsight::testing::op_grad_cases()) {
    const auto r = check_gradients(c, 1234, 10);
    INFO(c.name << ": max relative error " << r.max_rel_error << " over " << r.coordinates << " coordinates");
    CHECK(r.points >= 10);
    CHECK(r.max_rel_error < 1e-6);
  }
}
