#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pcav {

// Raised for invalid inputs and violated preconditions. Anything else that
// escapes the library is an internal failure.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Vector = std::vector<double>;

// Dense row-major float64 array. The first axis is the sample axis for every
// batch-shaped tensor in the project, so rows() / row(i) view a tensor as an
// n x (product of the remaining axes) matrix.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  static Tensor from_rows(const std::vector<Vector>& rows);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
  std::size_t cols() const;

  std::span<double> row(std::size_t i);
  std::span<const double> row(std::size_t i) const;

  double& at(std::size_t i, std::size_t j) { return data_[i * cols() + j]; }
  double at(std::size_t i, std::size_t j) const { return data_[i * cols() + j]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  Tensor reshaped(std::vector<std::size_t> shape) const;
  // Same trailing shape, only the listed rows, in the listed order.
  Tensor select_rows(std::span<const std::size_t> indices) const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

std::size_t shape_product(std::span<const std::size_t> shape);

// Seeded generator. The engine is std::mt19937_64, whose output sequence is
// fixed by the standard; every distribution on top of it is implemented here
// (53-bit uniform doubles, rejection-sampled integers, Box-Muller normals)
// because the std:: distributions are implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return engine_(); }
  // Uniform on [0, 1).
  double uniform();
  // Uniform integer on [0, n).
  std::size_t below(std::size_t n);
  // Standard normal draw.
  double normal();

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = below(i);
      std::swap(items[i - 1], items[j]);
    }
  }

  // Independent child stream; depends only on this generator's seed and the
  // stream id, not on how many draws were taken.
  Rng fork(std::uint64_t stream) const;

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> a);

// Column means of an n x d matrix.
Vector column_mean(const Tensor& x);

// Population covariance between every feature and the target:
// (1/n) sum_i (x_ij - mean_j)(y_i - mean_y).
Vector covariance_with_target(const Tensor& x, std::span<const double> y);

// Population variance (1/n) sum (y_i - mean_y)^2.
double variance_of_target(std::span<const double> y);

double cosine_similarity(std::span<const double> a, std::span<const double> b);

Vector gaussian(Rng& rng, double mu, double sigma, std::size_t count);

}  // namespace pcav
