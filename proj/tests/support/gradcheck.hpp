#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "armsight/tensor.hpp"

namespace armsight::testing {

using Tensord = ad::Tensor<double>;
using Graphd = ad::Graph<double>;

struct GradCase {
  std::string name;
  std::vector<ad::Shape> shapes;
  /// Builds a scalar loss from the leaves.
  std::function<Tensord(Graphd&, const std::vector<Tensord>&)> loss;
  double lo = -1.0, hi = 1.0;
  /// Values this close to a kink (0 for relu, ties for max) are redrawn.
  double kink_margin = 0.0;
};

struct GradReport {
  std::string name;
  int points = 0;
  std::size_t coordinates = 0;
  double max_rel_error = 0.0;
};

inline double rel_error(double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-3}); }

/// Central differences (step h) against backward() at `points` random draws.
/// Each draw checks up to `per_leaf` coordinates of every leaf.
inline GradReport check_gradients(const GradCase& c, std::uint64_t seed, int points = 10, double h = 1e-5,
                                  std::size_t per_leaf = 24) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(c.lo, c.hi);
  GradReport r{c.name, points, 0, 0.0};
  for (int p = 0; p < points; ++p) {
    std::vector<std::vector<double>> values;
    for (const auto& s : c.shapes) {
      std::vector<double> v(ad::numel(s));
      for (auto& x : v) {
        do {
          x = u(rng);
        } while (c.kink_margin > 0 && std::abs(x) < c.kink_margin);
      }
      values.push_back(std::move(v));
    }
    const auto leaves_from = [&](const std::vector<std::vector<double>>& vals) {
      std::vector<Tensord> leaves;
      for (std::size_t i = 0; i < c.shapes.size(); ++i) leaves.push_back(Tensord::variable(c.shapes[i], vals[i]));
      return leaves;
    };
    const auto eval = [&](const std::vector<std::vector<double>>& vals) {
      Graphd g(false);
      return c.loss(g, leaves_from(vals)).item();
    };

    auto leaves = leaves_from(values);
    Graphd g;
    auto loss = c.loss(g, leaves);
    g.backward(loss);

    for (std::size_t li = 0; li < leaves.size(); ++li) {
      const std::size_t n = values[li].size();
      std::vector<std::size_t> coords(n);
      for (std::size_t k = 0; k < n; ++k) coords[k] = k;
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(std::min(n, per_leaf));
      for (auto k : coords) {
        auto plus = values, minus = values;
        plus[li][k] += h;
        minus[li][k] -= h;
        const double numeric = (eval(plus) - eval(minus)) / (2 * h);
        const double analytic = leaves[li].grad()[k];
        r.max_rel_error = std::max(r.max_rel_error, rel_error(analytic, numeric));
        ++r.coordinates;
      }
    }
  }
  return r;
}

/// A fixed random weighting turns any tensor into a scalar with a generic gradient.
inline Tensord probe(Graphd& g, const Tensord& x, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> w(x.numel());
  for (auto& v : w) v = u(rng);
  return ad::sum(g, ad::mul(g, x, Tensord::constant(x.shape(), w)));
}

}  // namespace armsight::testing
