#include "mnce/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "mnce/errors.hpp"

namespace mnce {

void Box::validate() const {
  const bool ok = 0.0 <= x0 && x0 < x1 && x1 <= 1.0 && 0.0 <= y0 && y0 < y1 && y1 <= 1.0;
  if (!ok) {
    throw std::invalid_argument("degenerate box [" + std::to_string(x0) + ", " + std::to_string(y0) +
                                ", " + std::to_string(x1) + ", " + std::to_string(y1) + "]");
  }
}

ConsensusMap::ConsensusMap(Mat2 weights) : weights_(std::move(weights)) {
  bool any_positive = false;
  for (double g : weights_.values()) {
    if (!(g >= 0.0 && g <= 1.0)) throw std::invalid_argument("ConsensusMap: weight outside [0, 1]");
    any_positive = any_positive || g > 0.0;
  }
  if (!any_positive) throw std::invalid_argument("ConsensusMap: no positive weight");
}

ConsensusMap consensus_from_boxes(std::span<const Box> boxes, std::size_t height, std::size_t width) {
  if (boxes.empty()) throw std::invalid_argument("consensus_from_boxes: empty box list");
  if (height == 0 || width == 0) throw DimensionError("consensus_from_boxes: empty target shape");
  for (const Box& b : boxes) b.validate();

  Mat2 counts(height, width);
  for (std::size_t y = 0; y < height; ++y) {
    const double cy = (static_cast<double>(y) + 0.5) / static_cast<double>(height);
    for (std::size_t x = 0; x < width; ++x) {
      const double cx = (static_cast<double>(x) + 0.5) / static_cast<double>(width);
      for (const Box& b : boxes) {
        if (cx >= b.x0 && cx < b.x1 && cy >= b.y0 && cy < b.y1) counts(y, x) += 1.0;
      }
    }
  }
  const double total = static_cast<double>(boxes.size());
  for (double& c : counts.values()) c /= total;
  // A box thinner than one pixel may cover no centre at all.
  try {
    return ConsensusMap(std::move(counts));
  } catch (const std::invalid_argument&) {
    throw std::invalid_argument("consensus_from_boxes: boxes cover no pixel centre at " +
                                std::to_string(height) + "x" + std::to_string(width));
  }
}

Mat2 upsample_bilinear(const Mat2& src, std::size_t height, std::size_t width) {
  if (src.empty()) throw DimensionError("upsample_bilinear: empty source");
  if (height == 0 || width == 0) throw DimensionError("upsample_bilinear: empty target shape");
  const std::size_t h = src.rows();
  const std::size_t w = src.cols();
  Mat2 out(height, width);

  auto source_coord = [](std::size_t i, std::size_t dst, std::size_t n) {
    if (dst == 1 || n == 1) return 0.0;
    return static_cast<double>(i) * static_cast<double>(n - 1) / static_cast<double>(dst - 1);
  };

  for (std::size_t y = 0; y < height; ++y) {
    const double sy = source_coord(y, height, h);
    const std::size_t y0 = std::min(static_cast<std::size_t>(sy), h - 1);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double sx = source_coord(x, width, w);
      const std::size_t x0 = std::min(static_cast<std::size_t>(sx), w - 1);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double fx = sx - static_cast<double>(x0);
      const double top = (1.0 - fx) * src(y0, x0) + fx * src(y0, x1);
      const double bottom = (1.0 - fx) * src(y1, x0) + fx * src(y1, x1);
      out(y, x) = (1.0 - fy) * top + fy * bottom;
    }
  }
  return out;
}

double median_value(const Mat2& m) {
  if (m.empty()) throw DimensionError("median_value: empty matrix");
  std::vector<double> v(m.values().begin(), m.values().end());
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double upper = v[mid];
  if (v.size() % 2 == 1) return upper;
  const double lower = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lower + upper);
}

double ciou_of_mask(const std::vector<bool>& mask, const ConsensusMap& gt) {
  const auto g = gt.weights().values();
  if (mask.size() != g.size()) throw DimensionError("ciou: mask and ground truth sizes differ");
  double intersection = 0.0;
  double gt_mass = 0.0;
  double false_positives = 0.0;
  for (std::size_t p = 0; p < g.size(); ++p) {
    gt_mass += g[p];
    if (!mask[p]) continue;
    if (g[p] > 0.0) {
      intersection += g[p];
    } else {
      false_positives += 1.0;
    }
  }
  return intersection / (gt_mass + false_positives);
}

namespace {

Mat2 upsampled_scores(const PredictionMap& pred, const ConsensusMap& gt) {
  if (pred.target_h != gt.height() || pred.target_w != gt.width()) {
    throw DimensionError("ciou: prediction target " + std::to_string(pred.target_h) + "x" +
                         std::to_string(pred.target_w) + " does not match ground truth " +
                         std::to_string(gt.height()) + "x" + std::to_string(gt.width()));
  }
  if (!all_finite(pred.scores.values())) throw NumericalError("ciou: non-finite prediction score");
  return upsample_bilinear(pred.scores, pred.target_h, pred.target_w);
}

double ciou_on_upsampled(const Mat2& up, const ConsensusMap& gt, double threshold) {
  std::vector<bool> mask(up.size());
  const auto s = up.values();
  for (std::size_t p = 0; p < s.size(); ++p) mask[p] = s[p] >= threshold;
  return ciou_of_mask(mask, gt);
}

}  // namespace

double ciou(const PredictionMap& pred, const ConsensusMap& gt, double pred_threshold) {
  if (!std::isfinite(pred_threshold)) throw std::invalid_argument("ciou: non-finite threshold");
  return ciou_on_upsampled(upsampled_scores(pred, gt), gt, pred_threshold);
}

double ciou(const PredictionMap& pred, const ConsensusMap& gt, const ThresholdRule& rule) {
  const Mat2 up = upsampled_scores(pred, gt);
  const double threshold = rule.kind == ThresholdRule::Kind::kMedian ? median_value(up) : rule.value;
  return ciou_on_upsampled(up, gt, threshold);
}

EvalCurve eval_curve(std::span<const double> cious, double step) {
  if (cious.empty()) throw std::invalid_argument("eval_curve: empty sample list");
  if (!(step > 0.0 && step <= 1.0)) throw std::invalid_argument("eval_curve: step must lie in (0, 1]");
  const double intervals = std::round(1.0 / step);
  if (std::abs(intervals * step - 1.0) > 1e-9) {
    throw std::invalid_argument("eval_curve: step " + std::to_string(step) + " does not divide 1");
  }
  for (double c : cious) {
    if (!(c >= 0.0 && c <= 1.0)) throw std::invalid_argument("eval_curve: cIoU outside [0, 1]");
  }

  const auto k_max = static_cast<std::size_t>(intervals);
  EvalCurve curve;
  curve.thresholds.reserve(k_max + 1);
  curve.success_rates.reserve(k_max + 1);
  const double n = static_cast<double>(cious.size());
  for (std::size_t k = 0; k <= k_max; ++k) {
    const double t = static_cast<double>(k) / intervals;
    const auto hits = std::count_if(cious.begin(), cious.end(), [t](double c) { return c >= t; });
    curve.thresholds.push_back(t);
    curve.success_rates.push_back(static_cast<double>(hits) / n);
  }
  for (std::size_t k = 0; k < k_max; ++k) {
    const double width = curve.thresholds[k + 1] - curve.thresholds[k];
    curve.auc += width * 0.5 * (curve.success_rates[k] + curve.success_rates[k + 1]);
  }
  return curve;
}

double ciou_at_half(std::span<const double> cious) {
  if (cious.empty()) throw std::invalid_argument("ciou_at_half: empty sample list");
  const auto hits = std::count_if(cious.begin(), cious.end(), [](double c) { return c >= 0.5; });
  return 100.0 * static_cast<double>(hits) / static_cast<double>(cious.size());
}

}  // namespace mnce
