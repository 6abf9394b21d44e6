#pragma once

#include <cstdint>

#include "pcav/datasets.hpp"

namespace pcav {

// Two-dimensional signal/distractor data:
//   x = a_s * y_s + a_c * y_c + a_n * eps,   eps ~ N(0, sigma2)
// with a_s = (1, 0), a_c = (0, 1), a_n = (sin tau, cos tau).
// Class A (y_c = -1) is stored as label 0, class B (y_c = +1) as label 1.
// Only class A carries the artifact; class B samples all have y_s = -1.
struct ToyConfig {
  double tau = 0.0;  // radians
  double sigma2 = 0.15;
  std::size_t n = 1000;
  double artifact_fraction_in_A = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
};

inline constexpr int kToyClassA = 0;
inline constexpr int kToyClassB = 1;

inline int toy_class_sign(int label) { return label == kToyClassA ? -1 : 1; }

LabeledDataset generate_toy(const ToyConfig& cfg);

}  // namespace pcav
