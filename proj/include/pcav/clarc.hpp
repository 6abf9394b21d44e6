#pragma once

#include <span>

#include "pcav/concept_vector.hpp"

namespace pcav {

enum class ClarcMode { augmentive, projective };

std::string to_string(ClarcMode mode);
ClarcMode parse_clarc_mode(const std::string& text);

struct ClarcHook {
  ClarcMode mode = ClarcMode::projective;
  ConceptVector cav;
  HookPoint point;

  void validate() const;
  // z_plus for the augmentive map, z_minus for the projective one.
  const Vector& anchor() const;
};

ClarcHook make_hook(ClarcMode mode, ConceptVector cav);

// (I - v v^T) x + v v^T z_plus: the v-component of x becomes that of z_plus.
Vector aclarc_map(std::span<const double> x, std::span<const double> v,
                  std::span<const double> z_plus);

// (I - v v^T) x + v v^T z_minus.
Vector pclarc_map(std::span<const double> x, std::span<const double> v,
                  std::span<const double> z_minus);

// Row-wise map over an n x ... tensor; trailing axes are treated as one
// flattened feature vector and the result keeps the input shape.
Tensor apply_hook_batch(const Tensor& x, const ClarcHook& hook);

// In-place variant restricted to the listed rows.
void apply_hook_rows(Tensor& x, const ClarcHook& hook,
                     std::span<const std::size_t> rows);

}  // namespace pcav
