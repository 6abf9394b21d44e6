#pragma once

#include <cmath>
#include <vector>

#include "pcav/datasets.hpp"
#include "pcav/numerics.hpp"

namespace testing {

inline pcav::Tensor random_matrix(pcav::Rng& rng, std::size_t n, std::size_t d,
                                  double scale = 1.0) {
  pcav::Tensor x = pcav::Tensor::matrix(n, d);
  for (double& v : x.data()) v = scale * rng.normal();
  return x;
}

// Balanced-ish +-1 labels with both values present.
inline std::vector<int> random_labels(pcav::Rng& rng, std::size_t n) {
  std::vector<int> y(n);
  for (auto& v : y) v = rng.below(2) == 0 ? -1 : 1;
  y[0] = 1;
  y[1] = -1;
  return y;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Small pattern dataset for fast model tests.
inline pcav::LabeledDataset small_patterns(std::size_t per_class, std::uint64_t seed,
                                           std::size_t classes = 3,
                                           std::size_t size = 8) {
  pcav::PatternConfig cfg;
  cfg.classes = classes;
  cfg.shape = {1, size, size};
  cfg.n_per_class = per_class;
  cfg.noise_sigma = 0.1;
  cfg.contrast = 0.3;
  pcav::Rng rng(seed);
  return pcav::gen_pattern_classes(cfg, rng);
}

}  // namespace testing
