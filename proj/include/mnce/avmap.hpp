#pragma once

// Audio-visual response maps and sigmoid-thresholded spatial pooling.

#include <cstddef>
#include <span>

#include "mnce/numerics.hpp"

namespace mnce {

/// Cosine denominators are clamped below by this value.
inline constexpr double kCosineFloor = 1e-12;

/// h x w grid of cosine similarities between a visual feature grid and an audio vector.
class ResponseMap {
 public:
  ResponseMap() = default;
  /// Throws std::invalid_argument if any entry lies outside [-1 - 1e-12, 1 + 1e-12].
  explicit ResponseMap(Mat2 values);

  std::size_t height() const noexcept { return values_.rows(); }
  std::size_t width() const noexcept { return values_.cols(); }
  const Mat2& values() const noexcept { return values_; }

 private:
  Mat2 values_;
};

/// Thresholding parameters of the pooled similarity.
struct PoolConfig {
  double epsilon = 0.65;  ///< threshold location
  double beta = 0.03;     ///< threshold temperature
  /// Treat the sigmoid weights as constants in the backward pass.
  bool detach_weights = false;

  /// Throws ConfigError unless beta > 0 and epsilon in [-1, 1].
  void validate() const;
};

/// out[y][x] = <v[:,y,x], a> / max(|v[:,y,x]| |a|, 1e-12).
ResponseMap cosine_response_map(const Grid3& v, const Vec1& a);

/// Weighted spatial mean S = sum_k w_k a_k / sum_k w_k with w_k = sigmoid((a_k - eps) / beta).
double soft_threshold_pool(const ResponseMap& map, const PoolConfig& cfg);

/// dS/d(alpha), shape h x w. Full derivative unless cfg.detach_weights.
Mat2 soft_threshold_pool_grad(const ResponseMap& map, const PoolConfig& cfg);

namespace kernels {

// Flat-span versions used by the batch pipeline; `alpha` is any non-empty
// set of response values. Weights fall back to log space when they all
// underflow, so tiny betas cannot zero the denominator.

double pool(std::span<const double> alpha, const PoolConfig& cfg);

/// Writes dS/d(alpha) into `grad` and returns S.
double pool_with_grad(std::span<const double> alpha, const PoolConfig& cfg, std::span<double> grad);

}  // namespace kernels

}  // namespace mnce
