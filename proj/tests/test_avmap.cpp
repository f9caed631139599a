#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <vector>

#include "mnce/avmap.hpp"
#include "mnce/errors.hpp"
#include "test_support.hpp"

using namespace mnce;
using mnce::testing::brute_force_pool;
using mnce::testing::random_map;

TEST_CASE("cosine_response_map basic geometry") {
  const Vec1 a({1.0, 2.0, -1.0});
  SUBCASE("self similarity") {
    Grid3 v = Grid3::zeros(3, 2, 3);
    for (std::size_t y = 0; y < 2; ++y)
      for (std::size_t x = 0; x < 3; ++x) v.set_column(y, x, a.values());
    const auto map = cosine_response_map(v, a);
    for (double e : map.values().values()) CHECK(e == doctest::Approx(1.0).epsilon(1e-15));
  }
  SUBCASE("antipodal") {
    Grid3 v = Grid3::zeros(3, 2, 2);
    const std::vector<double> neg{-1.0, -2.0, 1.0};
    for (std::size_t y = 0; y < 2; ++y)
      for (std::size_t x = 0; x < 2; ++x) v.set_column(y, x, neg);
    const auto map = cosine_response_map(v, a);
    for (double e : map.values().values()) CHECK(e == doctest::Approx(-1.0));
  }
  SUBCASE("orthogonal pixel") {
    Grid3 v = Grid3::zeros(3, 1, 2);
    v.set_column(0, 0, a.values());
    v.set_column(0, 1, std::vector<double>{2.0, -1.0, 0.0});
    const auto map = cosine_response_map(v, a);
    CHECK(std::abs(map.values()(0, 1)) <= 1e-12);
    CHECK(map.values()(0, 0) == doctest::Approx(1.0));
  }
  SUBCASE("zero column maps to zero") {
    Grid3 v = Grid3::zeros(3, 1, 1);
    CHECK(cosine_response_map(v, a).values()(0, 0) == 0.0);
  }
  SUBCASE("channel mismatch") {
    CHECK_THROWS_AS(cosine_response_map(Grid3::zeros(2, 1, 1), a), DimensionError);
  }
}

TEST_CASE("soft_threshold_pool reference cases") {
  PoolConfig cfg;
  SUBCASE("two pixel map") {
    cfg.epsilon = 0.5;
    cfg.beta = 0.25;
    const ResponseMap map(Mat2(1, 2, {0.0, 1.0}));
    // sigma(-2) + sigma(2) = 1, so S = sigma(2).
    CHECK(std::abs(soft_threshold_pool(map, cfg) - 0.8807970779778824) <= 1e-6);
  }
  SUBCASE("constant map returns the constant") {
    for (double c : {-0.9, 0.0, 0.3, 0.65, 1.0}) {
      for (double eps : {-1.0, 0.0, 0.65, 1.0}) {
        for (double beta : {1e-4, 0.03, 1.0, 100.0}) {
          cfg.epsilon = eps;
          cfg.beta = beta;
          const ResponseMap map(Mat2(3, 3, std::vector<double>(9, c)));
          CHECK(std::abs(soft_threshold_pool(map, cfg) - c) <= 1e-15);
        }
      }
    }
  }
  SUBCASE("random 8x8 against brute force") {
    RngStream rng(3, 1);
    for (int trial = 0; trial < 20; ++trial) {
      const Mat2 m = random_map(8, 8, rng);
      CHECK(std::abs(soft_threshold_pool(ResponseMap(m), cfg) - brute_force_pool(m, cfg)) <= 1e-12);
    }
  }
  SUBCASE("invalid config") {
    cfg.beta = 0.0;
    CHECK_THROWS_AS(soft_threshold_pool(ResponseMap(Mat2(1, 1, {0.2})), cfg), ConfigError);
    cfg.beta = 0.03;
    cfg.epsilon = 1.5;
    CHECK_THROWS_AS(soft_threshold_pool(ResponseMap(Mat2(1, 1, {0.2})), cfg), ConfigError);
  }
}

TEST_CASE("soft_threshold_pool stays inside [min, max]") {
  RngStream rng(19, 2);
  for (int trial = 0; trial < 200; ++trial) {
    PoolConfig cfg{rng.uniform(-1.0, 1.0), std::exp(rng.uniform(-9.0, 3.0)), false};
    const Mat2 m = random_map(1 + rng.uniform_index(6), 1 + rng.uniform_index(6), rng);
    const auto [lo, hi] = std::minmax_element(m.values().begin(), m.values().end());
    const double s = soft_threshold_pool(ResponseMap(m), cfg);
    CHECK(s >= *lo - 1e-15);
    CHECK(s <= *hi + 1e-15);
  }
}

TEST_CASE("tiny beta does not underflow the normalizer") {
  PoolConfig cfg{0.9, 1e-5, false};
  const ResponseMap map(Mat2(1, 3, {-1.0, -0.5, -0.2}));
  const double s = soft_threshold_pool(map, cfg);
  CHECK(std::isfinite(s));
  CHECK(s == doctest::Approx(-0.2).epsilon(1e-9));
  const Mat2 g = soft_threshold_pool_grad(map, cfg);
  CHECK(all_finite(g.values()));
}

TEST_CASE("two-valued maps: S increases with epsilon") {
  // w_hi / w_lo = (1 + e^{(eps-lo)/beta}) / (1 + e^{(eps-hi)/beta}) grows with eps,
  // so S moves toward hi as the threshold rises.
  const double lo = -0.2, hi = 0.7, beta = 0.1;
  const ResponseMap map(Mat2(2, 2, {lo, hi, lo, lo}));
  double previous = -INFINITY;
  for (int k = 0; k <= 40; ++k) {
    const double eps = -1.0 + 0.05 * k;
    const double s = soft_threshold_pool(map, PoolConfig{eps, beta, false});
    CHECK(s > previous);
    previous = s;
    // Upper limit: exponential weights e^{alpha/beta}.
    const double r = std::exp((hi - lo) / beta);
    CHECK(s < (3.0 * lo + hi * r) / (3.0 + r));
  }
}

TEST_CASE("large beta approaches the plain mean") {
  // Expanding sigma to first order gives S - mean = Var(alpha) / (2 beta) + O(beta^-2).
  RngStream rng(8, 8);
  for (int trial = 0; trial < 20; ++trial) {
    const Mat2 m = random_map(5, 4, rng);
    double mean = 0.0;
    for (double v : m.values()) mean += v;
    mean /= static_cast<double>(m.size());
    double var = 0.0;
    for (double v : m.values()) var += (v - mean) * (v - mean);
    var /= static_cast<double>(m.size());
    const double s4 = soft_threshold_pool(ResponseMap(m), PoolConfig{0.65, 1e4, false});
    CHECK(std::abs(s4 - mean - var / 2e4) <= 1e-8);
    const double s6 = soft_threshold_pool(ResponseMap(m), PoolConfig{0.65, 1e6, false});
    CHECK(std::abs(s6 - mean) <= 1e-6);
  }
}

TEST_CASE("soft_threshold_pool_grad") {
  SUBCASE("constant map is uniform in both modes") {
    for (bool detach : {true, false}) {
      const ResponseMap map(Mat2(3, 4, std::vector<double>(12, 0.4)));
      const Mat2 g = soft_threshold_pool_grad(map, PoolConfig{0.65, 0.03, detach});
      for (double v : g.values()) CHECK(v == doctest::Approx(1.0 / 12.0).epsilon(1e-14));
    }
  }
  SUBCASE("finite differences on random maps") {
    RngStream rng(23, 4);
    for (bool detach : {false, true}) {
      for (int trial = 0; trial < 100; ++trial) {
        const Mat2 m = random_map(4, 4, rng, 0.9);
        const PoolConfig cfg{0.65, 0.03 + 0.3 * rng.uniform(), detach};
        const Mat2 analytic = soft_threshold_pool_grad(ResponseMap(m), cfg);
        std::vector<double> numeric;
        if (detach) {
          // Detached weights: differentiate S with the weights frozen at m.
          numeric = finite_diff_grad(
              [&](std::span<const double> a) {
                double num = 0.0, den = 0.0;
                for (std::size_t k = 0; k < a.size(); ++k) {
                  const double w = sigmoid((m.values()[k] - cfg.epsilon) / cfg.beta);
                  num += w * a[k];
                  den += w;
                }
                return num / den;
              },
              m.values());
        } else {
          numeric = finite_diff_grad(
              [&](std::span<const double> a) {
                return brute_force_pool(Mat2(4, 4, std::vector<double>(a.begin(), a.end())), cfg);
              },
              m.values());
        }
        CHECK(max_relative_error(analytic.values(), numeric) <= kDefaultGradRelTol);
      }
    }
  }
}

TEST_CASE("ResponseMap rejects out-of-range cosines") {
  CHECK_THROWS(ResponseMap(Mat2(1, 1, {1.01})));
  CHECK_NOTHROW(ResponseMap(Mat2(1, 1, {1.0 + 1e-13})));
}
