#pragma once

// Localization metrics: consensus IoU, success-rate curves and their AUC.

#include <cstddef>
#include <span>
#include <vector>

#include "mnce/numerics.hpp"

namespace mnce {

/// Axis-aligned rectangle in normalized image coordinates.
struct Box {
  double x0 = 0.0;
  double y0 = 0.0;
  double x1 = 1.0;
  double y1 = 1.0;

  /// Throws std::invalid_argument unless 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1.
  void validate() const;
  bool operator==(const Box&) const = default;
};

/// Per-pixel annotator agreement in [0, 1].
class ConsensusMap {
 public:
  ConsensusMap() = default;
  /// Throws std::invalid_argument on entries outside [0, 1] or an all-zero map.
  explicit ConsensusMap(Mat2 weights);

  std::size_t height() const noexcept { return weights_.rows(); }
  std::size_t width() const noexcept { return weights_.cols(); }
  const Mat2& weights() const noexcept { return weights_; }

 private:
  Mat2 weights_;
};

/// Raw localization scores at native resolution plus the shape they are evaluated at.
struct PredictionMap {
  Mat2 scores;
  std::size_t target_h = 0;
  std::size_t target_w = 0;
};

/// Threshold rule for binarizing an upsampled prediction.
struct ThresholdRule {
  enum class Kind { kMedian, kAbsolute };
  Kind kind = Kind::kMedian;
  double value = 0.5;  ///< used by kAbsolute only

  static ThresholdRule median() { return {}; }
  static ThresholdRule absolute(double v) { return {Kind::kAbsolute, v}; }
};

struct EvalCurve {
  std::vector<double> thresholds;
  std::vector<double> success_rates;
  double auc = 0.0;
};

inline constexpr double kDefaultAucStep = 0.05;

/// Pixel weight = fraction of boxes whose area contains the pixel centre.
ConsensusMap consensus_from_boxes(std::span<const Box> boxes, std::size_t height, std::size_t width);

/// Corner-aligned bilinear resampling (source corners map onto target corners).
Mat2 upsample_bilinear(const Mat2& src, std::size_t height, std::size_t width);

/// Median of all entries (mean of the two middle values for even counts).
double median_value(const Mat2& m);

/// Upsamples `pred` to its target shape and binarizes with score >= threshold.
/// cIoU = sum_{p in A, g_p > 0} g_p / (sum_p g_p + |{p in A : g_p = 0}|).
double ciou(const PredictionMap& pred, const ConsensusMap& gt, double pred_threshold);

/// Same, with the threshold chosen by `rule` on the upsampled map.
double ciou(const PredictionMap& pred, const ConsensusMap& gt, const ThresholdRule& rule);

/// cIoU of an already binarized mask (true = predicted positive).
double ciou_of_mask(const std::vector<bool>& mask, const ConsensusMap& gt);

/// Success rate (fraction with cIoU >= t) at t = 0, step, ..., 1 and its trapezoidal area.
EvalCurve eval_curve(std::span<const double> cious, double step = kDefaultAucStep);

/// Percentage of samples with cIoU >= 0.5.
double ciou_at_half(std::span<const double> cious);

}  // namespace mnce
