#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "armsight/tensor.hpp"

namespace armsight::loss {

/// Probabilities are clamped to [kClamp, 1 - kClamp] before any logarithm.
inline constexpr double kClamp = 1e-7;

struct ClassWeights {
  double p_fg = 0.5;
  double w_fg = 2.0;
  double w_bg = 2.0;

  /// Rejects p outside the open interval (0, 1).
  static ClassWeights from_probability(double p_fg);
};

/// Foreground probability over every pixel of every mask (0/1 bytes).
ClassWeights class_weights(std::span<const std::span<const std::uint8_t>> masks);

struct LossWeights {
  double mask = 1.2;
  double jcoords = 1.2;
  double bcoords = 1.2;
  double type = 0.6;
};

struct LossBreakdown {
  double mask = 0.0;
  double jcoords = 0.0;
  double bcoords = 0.0;
  double type = 0.0;
  double final = 0.0;
};

class NonFiniteLossError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Scalar forms, evaluated in double.

double pixel_loss(double i_est, int i_gt, const ClassWeights& w);
/// Mean pixel loss over equal-length maps.
double mask_loss(std::span<const double> est, std::span<const std::uint8_t> gt,
                 const ClassWeights& w);
/// (1/N_j) Σ |J_i - E_i|; vectors are packed xyz triples.
double joint_coords_loss(std::span<const double> gt, std::span<const double> est);
double base_coords_loss(std::span<const double> gt, std::span<const double> est);
/// -Σ p(c) ln q(c) with p one-hot.
double type_loss(std::span<const double> p_onehot, std::span<const double> q);
/// Throws NonFiniteLossError on a non-finite component.
LossBreakdown final_loss(double mask, double jcoords, double bcoords, double type,
                         const LossWeights& w);

// ---------------------------------------------------------------------------
// Graph forms. Each returns a scalar [1] averaged over the batch dimension.

/// prob [B,1,H,W] or [B,H,W]; gt holds B*H*W values in {0,1}.
template <typename T>
ad::Tensor<T> mask_loss(ad::Graph<T>& g, const ad::Tensor<T>& prob, std::span<const T> gt,
                        const ClassWeights& w);

/// est [B, 3*slots]; gt packs the same layout; joints[b] selects the first
/// joints[b] slots of sample b.
template <typename T>
ad::Tensor<T> joint_coords_loss(ad::Graph<T>& g, const ad::Tensor<T>& est, std::span<const T> gt,
                                std::span<const int> joints);

/// est [B,3]; gt [B*3].
template <typename T>
ad::Tensor<T> base_coords_loss(ad::Graph<T>& g, const ad::Tensor<T>& est, std::span<const T> gt);

/// q [B,R] (rows sum to 1); labels[b] in [0, R).
template <typename T>
ad::Tensor<T> type_loss(ad::Graph<T>& g, const ad::Tensor<T>& q, std::span<const int> labels);

}  // namespace armsight::loss
