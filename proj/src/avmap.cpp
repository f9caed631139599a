#include "mnce/avmap.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "mnce/errors.hpp"

namespace mnce {

ResponseMap::ResponseMap(Mat2 values) : values_(std::move(values)) {
  constexpr double kBound = 1.0 + 1e-12;
  for (double v : values_.values()) {
    if (!(v >= -kBound && v <= kBound)) {
      throw std::invalid_argument("ResponseMap: entry " + std::to_string(v) + " outside [-1, 1]");
    }
  }
}

void PoolConfig::validate() const {
  if (!(beta > 0.0) || !std::isfinite(beta)) throw ConfigError("beta must be positive", "beta");
  if (!(epsilon >= -1.0 && epsilon <= 1.0)) throw ConfigError("epsilon must lie in [-1, 1]", "epsilon");
}

ResponseMap cosine_response_map(const Grid3& v, const Vec1& a) {
  if (v.channels() != a.size()) {
    throw DimensionError("cosine_response_map: grid has " + std::to_string(v.channels()) +
                         " channels, audio vector has " + std::to_string(a.size()));
  }
  double a_norm_sq = 0.0;
  for (double x : a.values()) a_norm_sq += x * x;
  const double a_norm = std::sqrt(a_norm_sq);

  Mat2 out(v.height(), v.width());
  for (std::size_t y = 0; y < v.height(); ++y) {
    for (std::size_t x = 0; x < v.width(); ++x) {
      double dot = 0.0;
      double col_sq = 0.0;
      for (std::size_t ch = 0; ch < v.channels(); ++ch) {
        const double e = v(ch, y, x);
        dot += e * a[ch];
        col_sq += e * e;
      }
      const double denom = std::max(std::sqrt(col_sq) * a_norm, kCosineFloor);
      out(y, x) = std::clamp(dot / denom, -1.0, 1.0);
    }
  }
  return ResponseMap(std::move(out));
}

double soft_threshold_pool(const ResponseMap& map, const PoolConfig& cfg) {
  cfg.validate();
  return kernels::pool(map.values().values(), cfg);
}

Mat2 soft_threshold_pool_grad(const ResponseMap& map, const PoolConfig& cfg) {
  cfg.validate();
  Mat2 grad(map.height(), map.width());
  kernels::pool_with_grad(map.values().values(), cfg, grad.values());
  return grad;
}

namespace kernels {

namespace {

// Relative weights r_k proportional to w_k = sigmoid((alpha_k - eps) / beta);
// `sig` receives w_k. Falls back to log space when every w_k underflows.
double relative_weights(std::span<const double> alpha, const PoolConfig& cfg,
                        std::vector<double>& rel, std::vector<double>& sig) {
  rel.resize(alpha.size());
  sig.resize(alpha.size());
  double max_w = 0.0;
  double total = 0.0;
  for (std::size_t k = 0; k < alpha.size(); ++k) {
    sig[k] = sigmoid((alpha[k] - cfg.epsilon) / cfg.beta);
    rel[k] = sig[k];
    max_w = std::max(max_w, sig[k]);
    total += sig[k];
  }
  if (max_w > 1e-250) return total;

  double max_log = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < alpha.size(); ++k) {
    rel[k] = log_sigmoid((alpha[k] - cfg.epsilon) / cfg.beta);
    max_log = std::max(max_log, rel[k]);
  }
  total = 0.0;
  for (double& r : rel) {
    r = std::exp(r - max_log);
    total += r;
  }
  return total;
}

}  // namespace

double pool(std::span<const double> alpha, const PoolConfig& cfg) {
  if (alpha.empty()) throw DimensionError("soft_threshold_pool: empty map");
  thread_local std::vector<double> rel, sig;
  const double total = relative_weights(alpha, cfg, rel, sig);
  double acc = 0.0;
  for (std::size_t k = 0; k < alpha.size(); ++k) acc += rel[k] * alpha[k];
  return acc / total;
}

double pool_with_grad(std::span<const double> alpha, const PoolConfig& cfg, std::span<double> grad) {
  if (alpha.empty()) throw DimensionError("soft_threshold_pool: empty map");
  if (grad.size() != alpha.size()) throw DimensionError("soft_threshold_pool_grad: output size");
  thread_local std::vector<double> rel, sig;
  const double total = relative_weights(alpha, cfg, rel, sig);
  double acc = 0.0;
  for (std::size_t k = 0; k < alpha.size(); ++k) acc += rel[k] * alpha[k];
  const double pooled = acc / total;

  for (std::size_t k = 0; k < alpha.size(); ++k) {
    const double share = rel[k] / total;  // w_k / W
    if (cfg.detach_weights) {
      grad[k] = share;
    } else {
      // w_k' / W = (w_k / W) (1 - w_k) / beta
      grad[k] = share + share * (1.0 - sig[k]) / cfg.beta * (alpha[k] - pooled);
    }
  }
  return pooled;
}

}  // namespace kernels

}  // namespace mnce
