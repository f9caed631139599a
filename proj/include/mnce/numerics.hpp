#pragma once

// Dense storage types, a counter-based RNG and the central-difference
// gradient checker shared by the other modules. All reals are double.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace mnce {

/// Length-c feature vector (a global audio embedding).
class Vec1 {
 public:
  Vec1() = default;
  explicit Vec1(std::vector<double> data);
  static Vec1 zeros(std::size_t n) { return Vec1(std::vector<double>(n, 0.0)); }

  std::size_t size() const noexcept { return data_.size(); }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  std::span<const double> values() const noexcept { return data_; }
  std::span<double> values() noexcept { return data_; }

  bool operator==(const Vec1&) const = default;

 private:
  std::vector<double> data_;
};

/// Row-major r x k matrix.
class Mat2 {
 public:
  Mat2() = default;
  Mat2(std::size_t rows, std::size_t cols, double fill = 0.0);
  Mat2(std::size_t rows, std::size_t cols, std::vector<double> data);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }

  std::span<const double> values() const noexcept { return data_; }
  std::span<double> values() noexcept { return data_; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }

  static Mat2 identity(std::size_t n);

  bool operator==(const Mat2&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Channel-major c x h x w feature grid (a spatial image representation).
class Grid3 {
 public:
  Grid3() = default;
  Grid3(std::size_t channels, std::size_t height, std::size_t width, std::vector<double> data);
  static Grid3 zeros(std::size_t channels, std::size_t height, std::size_t width);

  std::size_t channels() const noexcept { return c_; }
  std::size_t height() const noexcept { return h_; }
  std::size_t width() const noexcept { return w_; }
  std::size_t pixels() const noexcept { return h_ * w_; }

  double operator()(std::size_t ch, std::size_t y, std::size_t x) const {
    return data_[(ch * h_ + y) * w_ + x];
  }
  double& operator()(std::size_t ch, std::size_t y, std::size_t x) {
    return data_[(ch * h_ + y) * w_ + x];
  }

  std::span<const double> values() const noexcept { return data_; }
  std::span<double> values() noexcept { return data_; }

  /// The c-vector at spatial position (y, x).
  std::vector<double> column(std::size_t y, std::size_t x) const;
  void set_column(std::size_t y, std::size_t x, std::span<const double> v);

  /// Pixel-major copy: row p = y*w + x holds the column at that pixel.
  Mat2 columns() const;

  bool operator==(const Grid3&) const = default;

 private:
  std::size_t c_ = 0;
  std::size_t h_ = 0;
  std::size_t w_ = 0;
  std::vector<double> data_;
};

/// Counter-based generator: draw k of stream (seed, stream_id) is a pure
/// function of (seed, stream_id, k), so parallel consumers that own distinct
/// stream ids reproduce regardless of scheduling.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id);

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream_id() const noexcept { return stream_id_; }

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t uniform_index(std::uint64_t n);
  /// Standard normal via Box-Muller.
  double normal();

 private:
  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Derives a child stream id from a parent id and a tag, for nested streams.
std::uint64_t derive_stream_id(std::uint64_t parent, std::uint64_t tag);

/// Logistic function, stable for large |x|.
double sigmoid(double x);

/// log(sigmoid(x)) without overflow or underflow to -inf for moderate x.
double log_sigmoid(double x);

inline constexpr double kDefaultFiniteDiffStep = 1e-5;
inline constexpr double kDefaultGradRelTol = 1e-4;

using ScalarFn = std::function<double(std::span<const double>)>;

/// Central differences (f(x + h e_k) - f(x - h e_k)) / 2h for every coordinate.
/// Throws NumericalError naming the coordinate if f is non-finite there.
std::vector<double> finite_diff_grad(const ScalarFn& f, std::span<const double> x,
                                     double step = kDefaultFiniteDiffStep);

/// max_k |a_k - b_k| / max(max|a|, max|b|, floor). Gradient comparisons use
/// this scale-relative form so near-zero entries do not dominate.
double max_relative_error(std::span<const double> a, std::span<const double> b,
                          double floor = 1e-12);

bool all_finite(std::span<const double> v);

}  // namespace mnce
