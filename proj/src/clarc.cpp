#include "pcav/clarc.hpp"

#include <cmath>

namespace pcav {

namespace {

constexpr double kUnitTolerance = 1e-9;

void check_operands(std::size_t dx, std::span<const double> v,
                    std::size_t dz) {
  if (dx != v.size() || dz != v.size()) throw Error("dimension mismatch");
  if (std::abs(norm(v) - 1.0) > kUnitTolerance) {
    throw Error("concept direction is not unit norm");
  }
}

// x - v (v.x) + v (v.z), never forming v v^T.
void replace_component(std::span<double> x, std::span<const double> v,
                       double target) {
  const double shift = target - dot(v, x);
  for (std::size_t j = 0; j < x.size(); ++j) x[j] += shift * v[j];
}

Vector map_one(std::span<const double> x, std::span<const double> v,
               std::span<const double> z) {
  check_operands(x.size(), v, z.size());
  Vector out(x.begin(), x.end());
  replace_component(out, v, dot(v, z));
  return out;
}

}  // namespace

std::string to_string(ClarcMode mode) {
  return mode == ClarcMode::augmentive ? "aclarc" : "pclarc";
}

ClarcMode parse_clarc_mode(const std::string& text) {
  if (text == "aclarc" || text == "augmentive") return ClarcMode::augmentive;
  if (text == "pclarc" || text == "projective") return ClarcMode::projective;
  throw Error("unknown correction mode: " + text);
}

void ClarcHook::validate() const {
  cav.validate();
  if (!(cav.hook == point)) {
    throw Error("concept was fitted at " + cav.hook.to_string() +
                " but the hook sits at " + point.to_string());
  }
}

const Vector& ClarcHook::anchor() const {
  return mode == ClarcMode::augmentive ? cav.z_plus : cav.z_minus;
}

ClarcHook make_hook(ClarcMode mode, ConceptVector cav) {
  ClarcHook hook{mode, std::move(cav), {}};
  hook.point = hook.cav.hook;
  hook.validate();
  return hook;
}

Vector aclarc_map(std::span<const double> x, std::span<const double> v,
                  std::span<const double> z_plus) {
  return map_one(x, v, z_plus);
}

Vector pclarc_map(std::span<const double> x, std::span<const double> v,
                  std::span<const double> z_minus) {
  return map_one(x, v, z_minus);
}

Tensor apply_hook_batch(const Tensor& x, const ClarcHook& hook) {
  Tensor out = x;
  std::vector<std::size_t> all(x.rows());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  apply_hook_rows(out, hook, all);
  return out;
}

void apply_hook_rows(Tensor& x, const ClarcHook& hook,
                     std::span<const std::size_t> rows) {
  const Vector& z = hook.anchor();
  check_operands(x.cols(), hook.cav.v, z.size());
  const double target = dot(hook.cav.v, z);
  for (auto i : rows) replace_component(x.row(i), hook.cav.v, target);
}

}  // namespace pcav
