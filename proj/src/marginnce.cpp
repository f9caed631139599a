#include "mnce/marginnce.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "mnce/errors.hpp"

namespace mnce {

SimilarityMatrix::SimilarityMatrix(Mat2 scores) : s_(std::move(scores)) {
  if (s_.rows() == 0 || s_.rows() != s_.cols()) {
    throw DimensionError("SimilarityMatrix: expected non-empty square matrix, got " +
                         std::to_string(s_.rows()) + "x" + std::to_string(s_.cols()));
  }
}

void LossConfig::validate() const {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("tau must be positive", "tau");
  if (!std::isfinite(margin)) throw ConfigError("margin must be finite", "margin");
  pool.validate();
}

SimilarityMatrix similarity_matrix(std::span<const Grid3> images, std::span<const Vec1> audios,
                                   const PoolConfig& pool) {
  if (images.empty() || images.size() != audios.size()) {
    throw DimensionError("similarity_matrix: need equal non-empty lists, got " +
                         std::to_string(images.size()) + " images and " +
                         std::to_string(audios.size()) + " audios");
  }
  pool.validate();
  const std::size_t n = images.size();
  Mat2 s(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      s(i, j) = kernels::pool(cosine_response_map(images[i], audios[j]).values().values(), pool);
    }
  }
  return SimilarityMatrix(std::move(s));
}

namespace {

// Row i of the directed loss: logits[j] = (x_ij - m [j == i]) / tau.
// Fills `probs` with the softmax and returns -log p_ii.
double row_loss(const Mat2& x, std::size_t i, double margin, double tau, bool transpose,
                std::vector<double>& probs) {
  const std::size_t n = x.rows();
  probs.resize(n);
  double max_logit = -INFINITY;
  for (std::size_t j = 0; j < n; ++j) {
    const double s = transpose ? x(j, i) : x(i, j);
    probs[j] = (j == i ? s - margin : s) / tau;
    max_logit = std::max(max_logit, probs[j]);
  }
  double total = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    probs[j] = std::exp(probs[j] - max_logit);
    total += probs[j];
  }
  const double positive_logit = x(i, i) - margin;
  const double nll = std::log(total) + max_logit - positive_logit / tau;
  for (double& p : probs) p /= total;
  return nll;
}

double directed_loss(const Mat2& s, double margin, double tau, bool transpose) {
  const std::size_t n = s.rows();
  std::vector<double> probs;
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += row_loss(s, i, margin, tau, transpose, probs);
  return acc / static_cast<double>(n);
}

void accumulate_directed_grad(const Mat2& s, double margin, double tau, bool transpose,
                              double scale, Mat2& grad) {
  const std::size_t n = s.rows();
  const double denom = static_cast<double>(n) * tau;
  std::vector<double> probs;
  for (std::size_t i = 0; i < n; ++i) {
    row_loss(s, i, margin, tau, transpose, probs);
    for (std::size_t j = 0; j < n; ++j) {
      const double g = scale * ((j == i ? probs[j] - 1.0 : probs[j]) / denom);
      if (transpose) {
        grad(j, i) += g;
      } else {
        grad(i, j) += g;
      }
    }
  }
}

}  // namespace

double margin_nce_loss(const SimilarityMatrix& sm, const LossConfig& cfg) {
  cfg.validate();
  const Mat2& s = sm.scores();
  if (sm.n() == 1) return 0.0;
  const double forward = directed_loss(s, cfg.margin, cfg.tau, false);
  if (!cfg.symmetric) return forward;
  return 0.5 * (forward + directed_loss(s, cfg.margin, cfg.tau, true));
}

Mat2 margin_nce_grad(const SimilarityMatrix& sm, const LossConfig& cfg) {
  cfg.validate();
  const Mat2& s = sm.scores();
  Mat2 grad(sm.n(), sm.n());
  if (sm.n() == 1) return grad;
  const double scale = cfg.symmetric ? 0.5 : 1.0;
  accumulate_directed_grad(s, cfg.margin, cfg.tau, false, scale, grad);
  if (cfg.symmetric) accumulate_directed_grad(s, cfg.margin, cfg.tau, true, scale, grad);
  return grad;
}

double info_nce_loss(const SimilarityMatrix& sm, double tau) {
  if (!(tau > 0.0)) throw ConfigError("tau must be positive", "tau");
  const Mat2& s = sm.scores();
  const std::size_t n = sm.n();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double max_logit = -INFINITY;
    for (std::size_t j = 0; j < n; ++j) max_logit = std::max(max_logit, s(i, j) / tau);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += std::exp(s(i, j) / tau - max_logit);
    acc += std::log(total) + max_logit - s(i, i) / tau;
  }
  return acc / static_cast<double>(n);
}

}  // namespace mnce
