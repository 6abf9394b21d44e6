#include "pcav/toygen.hpp"

#include <algorithm>
#include <cmath>

namespace pcav {

void ToyConfig::validate() const {
  if (!(sigma2 >= 0.0)) throw Error("sigma2 must be non-negative");
  if (!(artifact_fraction_in_A > 0.0 && artifact_fraction_in_A < 1.0)) {
    throw Error("artifact_fraction_in_A must lie in (0, 1)");
  }
  if (n < 4) throw Error("toy data needs n >= 4");
  if (!std::isfinite(tau)) throw Error("tau must be finite");
}

LabeledDataset generate_toy(const ToyConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);

  const std::size_t n_a = (cfg.n + 1) / 2;
  const std::size_t n_b = cfg.n - n_a;
  std::size_t n_art = static_cast<std::size_t>(
      std::llround(cfg.artifact_fraction_in_A * static_cast<double>(n_a)));
  n_art = std::clamp<std::size_t>(n_art, 1, n_a - 1);

  // (class label, y_s) pairs in a seeded random order.
  std::vector<std::pair<int, int>> labels;
  labels.reserve(cfg.n);
  for (std::size_t i = 0; i < n_a; ++i) {
    labels.emplace_back(kToyClassA, i < n_art ? 1 : -1);
  }
  for (std::size_t i = 0; i < n_b; ++i) labels.emplace_back(kToyClassB, -1);
  rng.shuffle(std::span(labels));

  const double sigma = std::sqrt(cfg.sigma2);
  const double an_x = std::sin(cfg.tau), an_y = std::cos(cfg.tau);

  LabeledDataset ds;
  ds.samples = Tensor::matrix(cfg.n, 2);
  ds.shape = {1, 1, 2};
  ds.num_classes = 2;
  ds.split = Split::train;
  for (std::size_t i = 0; i < cfg.n; ++i) {
    const auto [label, ys] = labels[i];
    const double yc = toy_class_sign(label);
    const double eps = sigma * rng.normal();
    ds.samples.at(i, 0) = ys + an_x * eps;
    ds.samples.at(i, 1) = yc + an_y * eps;
    ds.y_c.push_back(label);
    ds.y_s.push_back(ys);
  }
  return ds;
}

}  // namespace pcav
