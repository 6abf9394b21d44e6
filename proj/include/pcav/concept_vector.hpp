#pragma once

#include <cstddef>
#include <string>

#include "pcav/numerics.hpp"

namespace pcav {

// Where features are read or rewritten. layer == 0 is the raw input; layer == k
// is the output of the k-th parametric (dense or conv) layer, taken after the
// ReLU that directly follows it, if any.
struct HookPoint {
  std::size_t layer = 0;

  static HookPoint input() { return {0}; }
  static HookPoint after_layer(std::size_t k) { return {k}; }
  bool is_input() const { return layer == 0; }

  // "input" or "layer<k>"
  std::string to_string() const;
  // Accepts "input", "layer<k>" and "after_layer(<k>)".
  static HookPoint parse(const std::string& text);

  friend bool operator==(const HookPoint&, const HookPoint&) = default;
};

enum class CavKind { filter, pattern };
enum class LabelSource { ground_truth, predicted };

std::string to_string(CavKind kind);
std::string to_string(LabelSource source);
CavKind parse_cav_kind(const std::string& text);
LabelSource parse_label_source(const std::string& text);

struct FitMeta {
  LabelSource labels = LabelSource::ground_truth;
  std::size_t samples = 0;
  std::size_t positives = 0;
  // Filter fits only; zero for patterns.
  double objective = 0.0;
  double bias = 0.0;
  double train_error = 0.0;
  // False when the tail-averaged SVM objective went up between epochs.
  bool monotone = true;

  friend bool operator==(const FitMeta&, const FitMeta&) = default;
};

struct ConceptVector {
  Vector v;    // unit norm
  CavKind kind = CavKind::pattern;
  Vector raw;  // unnormalized estimate (SVM weights or signal pattern)
  HookPoint hook;
  Vector z_plus;
  Vector z_minus;
  FitMeta fit_meta;

  std::size_t dim() const { return v.size(); }
  void validate() const;

  friend bool operator==(const ConceptVector&, const ConceptVector&) = default;
};

}  // namespace pcav
