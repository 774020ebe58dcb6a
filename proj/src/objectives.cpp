#include "armsight/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace armsight::loss {

using ad::Graph;
using ad::OpKind;
using ad::ShapeError;
using ad::Tensor;

ClassWeights ClassWeights::from_probability(double p_fg) {
  if (!(p_fg > 0.0 && p_fg < 1.0)) {
    throw std::invalid_argument("foreground probability must lie strictly between 0 and 1, got " +
                                std::to_string(p_fg));
  }
  return {p_fg, 1.0 / p_fg, 1.0 / (1.0 - p_fg)};
}

ClassWeights class_weights(std::span<const std::span<const std::uint8_t>> masks) {
  if (masks.empty()) throw std::invalid_argument("class weights need at least one mask");
  std::uint64_t fg = 0, total = 0;
  for (const auto& m : masks) {
    for (auto v : m) fg += v != 0;
    total += m.size();
  }
  if (fg == 0 || fg == total) {
    throw std::invalid_argument("masks are all " + std::string(fg == 0 ? "background" : "foreground") +
                                "; class weights undefined");
  }
  return ClassWeights::from_probability(static_cast<double>(fg) / static_cast<double>(total));
}

namespace {

template <typename T>
T clamp_prob(T p) {
  return std::clamp(p, static_cast<T>(kClamp), static_cast<T>(1.0 - kClamp));
}

template <typename T>
bool inside_clamp(T p) {
  return p > static_cast<T>(kClamp) && p < static_cast<T>(1.0 - kClamp);
}

}  // namespace

template <typename T>
Tensor<T> mask_loss(Graph<T>& g, const Tensor<T>& prob, std::span<const T> gt, const ClassWeights& w) {
  if (prob.numel() != gt.size()) {
    throw ShapeError("mask_loss: estimate " + ad::to_string(prob.shape()) + " has " +
                     std::to_string(prob.numel()) + " pixels, ground truth has " +
                     std::to_string(gt.size()));
  }
  const T wf = static_cast<T>(w.w_fg), wb = static_cast<T>(w.w_bg);
  const bool grad = g.wants_grad({&prob});
  auto y = Tensor<T>::intermediate({1}, grad);
  auto pv = prob.values();
  // Accumulate in double so the mean does not depend on float summation order.
  double total = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const T p = clamp_prob(pv[i]);
    total += gt[i] > T(0.5) ? -static_cast<double>(wf) * std::log(static_cast<double>(p))
                            : -static_cast<double>(wb) * std::log(1.0 - static_cast<double>(p));
  }
  const std::size_t n = pv.size();
  y.values()[0] = static_cast<T>(total / static_cast<double>(n));
  if (!grad) return y;
  std::vector<T> target(gt.begin(), gt.end());
  g.record(OpKind::custom, {prob.id()}, y, [prob, y, target = std::move(target), wf, wb, n]() mutable {
    const T d = y.grad()[0] / static_cast<T>(n);
    auto pv = prob.values();
    auto dp = prob.grad();
    for (std::size_t i = 0; i < n; ++i) {
      if (!inside_clamp(pv[i])) continue;
      dp[i] += target[i] > T(0.5) ? -d * wf / pv[i] : d * wb / (T(1) - pv[i]);
    }
  }, "mask_loss");
  return y;
}

template <typename T>
Tensor<T> joint_coords_loss(Graph<T>& g, const Tensor<T>& est, std::span<const T> gt,
                            std::span<const int> joints) {
  if (est.rank() != 2 || est.dim(1) % 3 != 0) {
    throw ShapeError("joint_coords_loss: estimate must be [B, 3*slots], got " + ad::to_string(est.shape()));
  }
  const std::size_t b = est.dim(0), width = est.dim(1), slots = width / 3;
  if (gt.size() != b * width || joints.size() != b) {
    throw ShapeError("joint_coords_loss: batch " + std::to_string(b) + " x " + std::to_string(width) +
                     " vs ground truth " + std::to_string(gt.size()) + " values and " +
                     std::to_string(joints.size()) + " joint counts");
  }
  for (int nj : joints) {
    if (nj < 1 || static_cast<std::size_t>(nj) > slots) {
      throw ShapeError("joint_coords_loss: joint count " + std::to_string(nj) + " outside [1, " +
                       std::to_string(slots) + "]");
    }
  }
  const bool grad = g.wants_grad({&est});
  auto y = Tensor<T>::intermediate({1}, grad);
  auto ev = est.values();
  std::vector<T> unit(ev.size(), T(0));
  double total = 0.0;
  for (std::size_t s = 0; s < b; ++s) {
    double sample = 0.0;
    for (int j = 0; j < joints[s]; ++j) {
      const std::size_t o = s * width + static_cast<std::size_t>(j) * 3;
      const T dx = ev[o] - gt[o], dy = ev[o + 1] - gt[o + 1], dz = ev[o + 2] - gt[o + 2];
      const T norm = std::sqrt(dx * dx + dy * dy + dz * dz);
      sample += static_cast<double>(norm);
      if (norm > T(0)) {
        const T scale = T(1) / (norm * static_cast<T>(joints[s]));
        unit[o] = dx * scale;
        unit[o + 1] = dy * scale;
        unit[o + 2] = dz * scale;
      }
    }
    total += sample / joints[s];
  }
  y.values()[0] = static_cast<T>(total / static_cast<double>(b));
  if (!grad) return y;
  g.record(OpKind::custom, {est.id()}, y, [est, y, unit = std::move(unit), b]() mutable {
    const T d = y.grad()[0] / static_cast<T>(b);
    auto de = est.grad();
    for (std::size_t i = 0; i < unit.size(); ++i) de[i] += d * unit[i];
  }, "joint_coords_loss");
  return y;
}

template <typename T>
Tensor<T> base_coords_loss(Graph<T>& g, const Tensor<T>& est, std::span<const T> gt) {
  if (est.rank() != 2 || est.dim(1) != 3) {
    throw ShapeError("base_coords_loss: estimate must be [B, 3], got " + ad::to_string(est.shape()));
  }
  const std::vector<int> ones(est.dim(0), 1);
  return joint_coords_loss<T>(g, est, gt, ones);
}

template <typename T>
Tensor<T> type_loss(Graph<T>& g, const Tensor<T>& q, std::span<const int> labels) {
  if (q.rank() != 2) throw ShapeError("type_loss: q must be [B, R], got " + ad::to_string(q.shape()));
  const std::size_t b = q.dim(0), r = q.dim(1);
  if (labels.size() != b) {
    throw ShapeError("type_loss: " + std::to_string(labels.size()) + " labels for batch " + std::to_string(b));
  }
  for (int c : labels) {
    if (c < 0 || static_cast<std::size_t>(c) >= r) {
      throw std::invalid_argument("type_loss: label " + std::to_string(c) + " outside [0, " +
                                  std::to_string(r) + ")");
    }
  }
  const bool grad = g.wants_grad({&q});
  auto y = Tensor<T>::intermediate({1}, grad);
  auto qv = q.values();
  double total = 0.0;
  for (std::size_t s = 0; s < b; ++s) {
    total -= std::log(static_cast<double>(clamp_prob(qv[s * r + static_cast<std::size_t>(labels[s])])));
  }
  y.values()[0] = static_cast<T>(total / static_cast<double>(b));
  if (!grad) return y;
  std::vector<int> lab(labels.begin(), labels.end());
  g.record(OpKind::custom, {q.id()}, y, [q, y, lab = std::move(lab), b, r]() mutable {
    const T d = y.grad()[0] / static_cast<T>(b);
    auto qv = q.values();
    auto dq = q.grad();
    for (std::size_t s = 0; s < b; ++s) {
      const std::size_t i = s * r + static_cast<std::size_t>(lab[s]);
      if (inside_clamp(qv[i])) dq[i] -= d / qv[i];
    }
  }, "type_loss");
  return y;
}

// ---------------------------------------------------------------------------

double pixel_loss(double i_est, int i_gt, const ClassWeights& w) {
  const double p = clamp_prob(i_est);
  return i_gt ? -w.w_fg * std::log(p) : -w.w_bg * std::log(1.0 - p);
}

double mask_loss(std::span<const double> est, std::span<const std::uint8_t> gt, const ClassWeights& w) {
  if (est.size() != gt.size() || est.empty()) {
    throw ShapeError("mask_loss: " + std::to_string(est.size()) + " estimates vs " +
                     std::to_string(gt.size()) + " ground-truth pixels");
  }
  Graph<double> g(false);
  auto prob = Tensor<double>::constant({est.size()}, std::vector<double>(est.begin(), est.end()));
  std::vector<double> target(gt.begin(), gt.end());
  return mask_loss<double>(g, prob, target, w).item();
}

double joint_coords_loss(std::span<const double> gt, std::span<const double> est) {
  if (gt.size() != est.size() || gt.empty() || gt.size() % 3 != 0) {
    throw ShapeError("joint_coords_loss: " + std::to_string(gt.size()) + " ground-truth vs " +
                     std::to_string(est.size()) + " estimated values");
  }
  Graph<double> g(false);
  auto e = Tensor<double>::constant({1, est.size()}, std::vector<double>(est.begin(), est.end()));
  const int nj = static_cast<int>(gt.size() / 3);
  return joint_coords_loss<double>(g, e, gt, std::span<const int>(&nj, 1)).item();
}

double base_coords_loss(std::span<const double> gt, std::span<const double> est) {
  if (gt.size() != 3 || est.size() != 3) throw ShapeError("base_coords_loss: expected two 3-vectors");
  return joint_coords_loss(gt, est);
}

double type_loss(std::span<const double> p_onehot, std::span<const double> q) {
  if (p_onehot.size() != q.size() || q.empty()) {
    throw ShapeError("type_loss: p has " + std::to_string(p_onehot.size()) + " classes, q has " +
                     std::to_string(q.size()));
  }
  int label = -1;
  for (std::size_t c = 0; c < p_onehot.size(); ++c) {
    if (p_onehot[c] == 1.0) {
      if (label >= 0) throw std::invalid_argument("type_loss: p is not one-hot");
      label = static_cast<int>(c);
    } else if (p_onehot[c] != 0.0) {
      throw std::invalid_argument("type_loss: p is not one-hot");
    }
  }
  if (label < 0) throw std::invalid_argument("type_loss: p is not one-hot");
  double total = 0.0;
  for (double v : q) total += v;
  if (!(std::abs(total - 1.0) <= 1e-6)) {
    throw std::invalid_argument("type_loss: q sums to " + std::to_string(total) + ", expected 1");
  }
  Graph<double> g(false);
  auto qt = Tensor<double>::constant({1, q.size()}, std::vector<double>(q.begin(), q.end()));
  return type_loss<double>(g, qt, std::span<const int>(&label, 1)).item();
}

LossBreakdown final_loss(double mask, double jcoords, double bcoords, double type, const LossWeights& w) {
  for (double v : {mask, jcoords, bcoords, type}) {
    if (!std::isfinite(v)) throw NonFiniteLossError("non-finite loss component");
  }
  return {mask, jcoords, bcoords, type,
          w.mask * mask + w.jcoords * jcoords + w.bcoords * bcoords + w.type * type};
}

#define ARMSIGHT_INSTANTIATE_LOSSES(T)                                                                 \
  template Tensor<T> mask_loss<T>(Graph<T>&, const Tensor<T>&, std::span<const T>, const ClassWeights&); \
  template Tensor<T> joint_coords_loss<T>(Graph<T>&, const Tensor<T>&, std::span<const T>,              \
                                          std::span<const int>);                                        \
  template Tensor<T> base_coords_loss<T>(Graph<T>&, const Tensor<T>&, std::span<const T>);              \
  template Tensor<T> type_loss<T>(Graph<T>&, const Tensor<T>&, std::span<const int>);

ARMSIGHT_INSTANTIATE_LOSSES(float)
ARMSIGHT_INSTANTIATE_LOSSES(double)

}  // namespace armsight::loss
