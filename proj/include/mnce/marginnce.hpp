#pragma once

// Batch similarity matrices and the InfoNCE / margin-InfoNCE objectives.

#include <cstddef>
#include <span>

#include "mnce/avmap.hpp"
#include "mnce/numerics.hpp"

namespace mnce {

/// n x n pooled scores; entry (i, j) scores image i against audio j.
class SimilarityMatrix {
 public:
  SimilarityMatrix() = default;
  /// Throws DimensionError unless `scores` is square and non-empty.
  explicit SimilarityMatrix(Mat2 scores);

  std::size_t n() const noexcept { return s_.rows(); }
  double operator()(std::size_t i, std::size_t j) const { return s_(i, j); }
  const Mat2& scores() const noexcept { return s_; }

 private:
  Mat2 s_;
};

struct LossConfig {
  double tau = 0.07;     ///< contrastive temperature
  double margin = -0.2;  ///< subtracted from every positive logit
  PoolConfig pool;
  /// Average the image->audio loss with the audio->image loss.
  bool symmetric = false;

  void validate() const;
};

/// s[i][j] = soft_threshold_pool(cosine_response_map(images[i], audios[j]), pool).
SimilarityMatrix similarity_matrix(std::span<const Grid3> images, std::span<const Vec1> audios,
                                   const PoolConfig& pool);

/// Margin-shifted contrastive loss, image i anchored against audios j:
///   L = -(1/n) sum_i log softmax_i(row logits),
/// with the positive logit (S_ii - m)/tau and negatives S_ij/tau.
/// Row maxima are subtracted before exponentiation. m = 0 is plain InfoNCE.
double margin_nce_loss(const SimilarityMatrix& sm, const LossConfig& cfg);

/// dL/dS. With p the row softmax: diagonal (p_ii - 1)/(n tau), off-diagonal p_ij/(n tau).
Mat2 margin_nce_grad(const SimilarityMatrix& sm, const LossConfig& cfg);

/// The margin-free baseline objective with temperature tau (single direction).
double info_nce_loss(const SimilarityMatrix& sm, double tau);

}  // namespace mnce
