#include "mnce/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "mnce/errors.hpp"

namespace mnce {

namespace {

constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

void require_finite(std::span<const double> v, const char* what) {
  if (!all_finite(v)) throw NumericalError(std::string(what) + " contains non-finite entries");
}

}  // namespace

Vec1::Vec1(std::vector<double> data) : data_(std::move(data)) { require_finite(data_, "Vec1"); }

Mat2::Mat2(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Mat2::Mat2(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw DimensionError("Mat2: data length " + std::to_string(data_.size()) + " != " +
                         std::to_string(rows) + "x" + std::to_string(cols));
  }
  require_finite(data_, "Mat2");
}

Mat2 Mat2::identity(std::size_t n) {
  Mat2 m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Grid3::Grid3(std::size_t channels, std::size_t height, std::size_t width, std::vector<double> data)
    : c_(channels), h_(height), w_(width), data_(std::move(data)) {
  if (c_ == 0 || h_ == 0 || w_ == 0) throw DimensionError("Grid3: dimensions must be positive");
  if (data_.size() != c_ * h_ * w_) {
    throw DimensionError("Grid3: data length " + std::to_string(data_.size()) + " != c*h*w = " +
                         std::to_string(c_ * h_ * w_));
  }
  require_finite(data_, "Grid3");
}

Grid3 Grid3::zeros(std::size_t channels, std::size_t height, std::size_t width) {
  return Grid3(channels, height, width, std::vector<double>(channels * height * width, 0.0));
}

std::vector<double> Grid3::column(std::size_t y, std::size_t x) const {
  std::vector<double> out(c_);
  for (std::size_t ch = 0; ch < c_; ++ch) out[ch] = (*this)(ch, y, x);
  return out;
}

void Grid3::set_column(std::size_t y, std::size_t x, std::span<const double> v) {
  if (v.size() != c_) throw DimensionError("Grid3::set_column: channel mismatch");
  for (std::size_t ch = 0; ch < c_; ++ch) (*this)(ch, y, x) = v[ch];
}

Mat2 Grid3::columns() const {
  Mat2 out(pixels(), c_);
  const std::size_t hw = pixels();
  for (std::size_t ch = 0; ch < c_; ++ch) {
    for (std::size_t p = 0; p < hw; ++p) out(p, ch) = data_[ch * hw + p];
  }
  return out;
}

RngStream::RngStream(std::uint64_t seed, std::uint64_t stream_id)
    : seed_(seed), stream_id_(stream_id), key_(mix64(seed ^ mix64(stream_id + kGolden))) {}

std::uint64_t RngStream::next_u64() {
  ++counter_;
  return mix64(key_ + counter_ * kGolden);
}

double RngStream::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t RngStream::uniform_index(std::uint64_t n) {
  // Rejection keeps the draw exactly uniform.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t r;
  do {
    r = next_u64();
  } while (r >= limit);
  return r % n;
}

double RngStream::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

std::uint64_t derive_stream_id(std::uint64_t parent, std::uint64_t tag) {
  return mix64(parent * kGolden ^ mix64(tag + 0x632be59bd9b4e019ULL));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double log_sigmoid(double x) {
  if (x >= 0.0) return -std::log1p(std::exp(-x));
  return x - std::log1p(std::exp(x));
}

std::vector<double> finite_diff_grad(const ScalarFn& f, std::span<const double> x, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("finite_diff_grad: step must be positive");
  std::vector<double> probe(x.begin(), x.end());
  std::vector<double> grad(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double orig = probe[k];
    probe[k] = orig + step;
    const double up = f(probe);
    probe[k] = orig - step;
    const double down = f(probe);
    probe[k] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericalError("finite_diff_grad: non-finite function value at coordinate " +
                           std::to_string(k));
    }
    grad[k] = (up - down) / (2.0 * step);
  }
  return grad;
}

double max_relative_error(std::span<const double> a, std::span<const double> b, double floor) {
  if (a.size() != b.size()) throw DimensionError("max_relative_error: length mismatch");
  double scale = floor;
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
    diff = std::max(diff, std::abs(a[i] - b[i]));
  }
  return diff / scale;
}

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace mnce
