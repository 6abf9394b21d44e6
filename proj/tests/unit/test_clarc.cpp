#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "pcav/clarc.hpp"
#include "pcav/concepts.hpp"

using namespace pcav;

namespace {

Vector random_unit(Rng& rng, std::size_t d) {
  Vector v(d);
  for (double& x : v) x = rng.normal();
  const double n = norm(v);
  for (double& x : v) x /= n;
  return v;
}

Vector random_vec(Rng& rng, std::size_t d, double scale) {
  Vector v(d);
  for (double& x : v) x = scale * rng.normal();
  return v;
}

ConceptVector concept_at(Rng& rng, std::size_t d, HookPoint hook) {
  ConceptVector c;
  c.v = random_unit(rng, d);
  c.raw = c.v;
  c.hook = hook;
  c.z_plus = random_vec(rng, d, 1.0);
  c.z_minus = random_vec(rng, d, 1.0);
  return c;
}

}  // namespace

TEST_CASE("projective map: idempotent, pinned, complement preserved") {
  Rng rng(101);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t d = 1 + rng.below(128);
    const Vector v = random_unit(rng, d);
    const Vector x = random_vec(rng, d, 5.0), z = random_vec(rng, d, 5.0);
    const Vector y = pclarc_map(x, v, z);
    CHECK(testing::max_abs_diff(pclarc_map(y, v, z), y) < 1e-9);
    CHECK(std::abs(dot(v, y) - dot(v, z)) < 1e-9);
    // (I - v v^T) y == (I - v v^T) x
    const double vy = dot(v, y), vx = dot(v, x);
    for (std::size_t j = 0; j < d; ++j) {
      CHECK(std::abs((y[j] - v[j] * vy) - (x[j] - v[j] * vx)) < 1e-9);
    }
  }
}

TEST_CASE("augmentive map pins the component to z_plus") {
  Rng rng(7);
  const Vector v = random_unit(rng, 10);
  const Vector x = random_vec(rng, 10, 1.0), zp = random_vec(rng, 10, 1.0);
  const Vector y = aclarc_map(x, v, zp);
  CHECK(dot(v, y) == doctest::Approx(dot(v, zp)).epsilon(1e-12));
  // A sample already at z_plus along v is unchanged.
  CHECK(testing::max_abs_diff(aclarc_map(y, v, zp), y) < 1e-12);
}

TEST_CASE("maps reject bad operands") {
  const Vector v{2.0, 0.0}, x{1.0, 1.0}, z{0.0, 0.0}, short_z{0.0};
  CHECK_THROWS_AS(pclarc_map(x, v, z), Error);
  const Vector u{1.0, 0.0};
  CHECK_THROWS_AS(pclarc_map(x, u, short_z), Error);
  CHECK_THROWS_AS(parse_clarc_mode("sideways"), Error);
  CHECK(parse_clarc_mode("pclarc") == ClarcMode::projective);
  CHECK(parse_clarc_mode("augmentive") == ClarcMode::augmentive);
}

TEST_CASE("batch map equals the row-wise map and keeps the shape") {
  Rng rng(9);
  const ConceptVector c = concept_at(rng, 12, HookPoint::after_layer(1));
  Tensor x({5, 3, 2, 2}, 0.0);
  for (double& v : x.data()) v = rng.normal();
  for (ClarcMode mode : {ClarcMode::projective, ClarcMode::augmentive}) {
    const ClarcHook hook = make_hook(mode, c);
    CHECK(hook.point == c.hook);
    const Tensor y = apply_hook_batch(x, hook);
    CHECK(y.shape() == x.shape());
    for (std::size_t i = 0; i < 5; ++i) {
      const Vector want = mode == ClarcMode::projective
                              ? pclarc_map(x.row(i), c.v, c.z_minus)
                              : aclarc_map(x.row(i), c.v, c.z_plus);
      CHECK(testing::max_abs_diff(y.row(i), want) == 0.0);
    }
  }
}

TEST_CASE("row-restricted map leaves the other rows alone") {
  Rng rng(10);
  const ConceptVector c = concept_at(rng, 4, HookPoint::input());
  const ClarcHook hook = make_hook(ClarcMode::augmentive, c);
  Tensor x = testing::random_matrix(rng, 6, 4);
  const Tensor before = x;
  const std::size_t rows[] = {1, 4};
  apply_hook_rows(x, hook, rows);
  for (std::size_t i = 0; i < 6; ++i) {
    if (i == 1 || i == 4) {
      CHECK(dot(c.v, x.row(i)) == doctest::Approx(dot(c.v, c.z_plus)));
    } else {
      CHECK(testing::max_abs_diff(x.row(i), before.row(i)) == 0.0);
    }
  }
}

TEST_CASE("hook must sit where the concept was fitted") {
  Rng rng(3);
  ClarcHook hook = make_hook(ClarcMode::projective, concept_at(rng, 4, HookPoint::input()));
  hook.point = HookPoint::after_layer(1);
  CHECK_THROWS_AS(hook.validate(), Error);
}
