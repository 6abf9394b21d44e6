#include "pcav/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace pcav {

std::size_t shape_product(std::span<const std::size_t> shape) {
  std::size_t p = 1;
  for (auto s : shape) p *= s;
  return p;
}

Tensor::Tensor(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)), data_(shape_product(shape_), fill) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_product(shape_)) {
    throw Error("tensor data length " + std::to_string(data_.size()) +
                " does not match shape product " +
                std::to_string(shape_product(shape_)));
  }
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, double fill) {
  return Tensor({rows, cols}, fill);
}

Tensor Tensor::from_rows(const std::vector<Vector>& rows) {
  if (rows.empty()) return Tensor({0, 0});
  const std::size_t d = rows.front().size();
  std::vector<double> data;
  data.reserve(rows.size() * d);
  for (const auto& r : rows) {
    if (r.size() != d) throw Error("ragged rows");
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor({rows.size(), d}, std::move(data));
}

std::size_t Tensor::cols() const {
  if (shape_.empty()) return 0;
  if (shape_[0] == 0) return shape_product(std::span(shape_).subspan(1));
  return data_.size() / shape_[0];
}

std::span<double> Tensor::row(std::size_t i) {
  const std::size_t c = cols();
  return std::span<double>(data_).subspan(i * c, c);
}

std::span<const double> Tensor::row(std::size_t i) const {
  const std::size_t c = cols();
  return std::span<const double>(data_).subspan(i * c, c);
}

Tensor Tensor::reshaped(std::vector<std::size_t> shape) const {
  return Tensor(std::move(shape), data_);
}

Tensor Tensor::select_rows(std::span<const std::size_t> indices) const {
  std::vector<std::size_t> shape = shape_;
  shape[0] = indices.size();
  const std::size_t c = cols();
  std::vector<double> out;
  out.reserve(indices.size() * c);
  for (auto i : indices) {
    if (i >= rows()) throw Error("row index out of range");
    auto r = row(i);
    out.insert(out.end(), r.begin(), r.end());
  }
  return Tensor(std::move(shape), std::move(out));
}

// splitmix64 finalizer
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

Rng::Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

double Rng::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

std::size_t Rng::below(std::size_t n) {
  if (n == 0) throw Error("Rng::below(0)");
  const std::uint64_t bound = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
  std::uint64_t r;
  do {
    r = engine_();
  } while (r >= limit);
  return static_cast<std::size_t>(r % bound);
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  // 1 - u lies in (0, 1], so the log is finite.
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

Rng Rng::fork(std::uint64_t stream) const { return Rng(mix_seed(seed_, stream)); }

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error("dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

Vector column_mean(const Tensor& x) {
  if (x.rows() == 0 || x.cols() == 0) throw Error("empty input");
  const std::size_t n = x.rows(), d = x.cols();
  Vector mean(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    auto r = x.row(i);
    for (std::size_t j = 0; j < d; ++j) mean[j] += r[j];
  }
  for (auto& m : mean) m /= static_cast<double>(n);
  return mean;
}

Vector covariance_with_target(const Tensor& x, std::span<const double> y) {
  const std::size_t n = x.rows();
  if (n < 2) throw Error("degenerate sample");
  if (y.size() != n) throw Error("dimension mismatch");
  const Vector mean = column_mean(x);
  double y_mean = 0.0;
  for (double v : y) y_mean += v;
  y_mean /= static_cast<double>(n);

  const std::size_t d = x.cols();
  Vector cov(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double dy = y[i] - y_mean;
    auto r = x.row(i);
    for (std::size_t j = 0; j < d; ++j) cov[j] += (r[j] - mean[j]) * dy;
  }
  for (auto& c : cov) c /= static_cast<double>(n);
  return cov;
}

double variance_of_target(std::span<const double> y) {
  const std::size_t n = y.size();
  if (n < 2) throw Error("degenerate sample");
  double mean = 0.0;
  for (double v : y) mean += v;
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (double v : y) ss += (v - mean) * (v - mean);
  return ss / static_cast<double>(n);
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error("dimension mismatch");
  const double na = norm(a), nb = norm(b);
  if (na == 0.0 || nb == 0.0) throw Error("zero vector");
  const double c = dot(a, b) / (na * nb);
  return std::clamp(c, -1.0, 1.0);
}

Vector gaussian(Rng& rng, double mu, double sigma, std::size_t count) {
  if (!(sigma >= 0.0)) throw Error("sigma must be non-negative");
  Vector out(count);
  for (auto& v : out) v = mu + sigma * rng.normal();
  return out;
}

}  // namespace pcav
