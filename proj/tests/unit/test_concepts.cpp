#include <algorithm>
#include <cmath>
#include <numbers>

#include "doctest.h"
#include "helpers.hpp"
#include "pcav/concepts.hpp"
#include "pcav/toygen.hpp"

using namespace pcav;

namespace {

// Slope of the least-squares line x_j ~ a + b y, from the 2x2 normal equations.
Vector ols_slopes(const Tensor& x, std::span<const int> y) {
  const std::size_t n = x.rows(), d = x.cols();
  long double s1 = 0, sy = 0, syy = 0;
  for (int v : y) {
    s1 += 1;
    sy += v;
    syy += static_cast<long double>(v) * v;
  }
  Vector out(d);
  for (std::size_t j = 0; j < d; ++j) {
    long double sx = 0, sxy = 0;
    for (std::size_t i = 0; i < n; ++i) {
      sx += x.at(i, j);
      sxy += x.at(i, j) * static_cast<long double>(y[i]);
    }
    const long double det = s1 * syy - sy * sy;
    out[j] = static_cast<double>((s1 * sxy - sy * sx) / det);
  }
  return out;
}

// Objective the SVM minimizes, on centered features with a penalized bias.
double centered_objective(const Tensor& x, std::span<const int> y, const Vector& mean,
                          double w0, double w1, double b, double lambda) {
  double hinge = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double f = w0 * (x.at(i, 0) - mean[0]) + w1 * (x.at(i, 1) - mean[1]) + b;
    hinge += std::max(0.0, 1.0 - y[i] * f);
  }
  return 0.5 * lambda * (w0 * w0 + w1 * w1 + b * b) + hinge / static_cast<double>(x.rows());
}

}  // namespace

TEST_CASE("pattern raw equals per-feature least-squares slopes") {
  Rng rng(21);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t n = 3 + rng.below(400), d = 1 + rng.below(40);
    Tensor x = testing::random_matrix(rng, n, d, 2.0);
    const std::vector<int> y = testing::random_labels(rng, n);
    for (std::size_t i = 0; i < n; ++i) x.at(i, 0) += 1.5 * y[i];
    const ConceptVector cav = fit_pattern_cav(x, y);
    CHECK(testing::max_abs_diff(cav.raw, ols_slopes(x, y)) < 1e-10);
    CHECK(norm(cav.v) == doctest::Approx(1.0).epsilon(1e-14));
  }
}

TEST_CASE("noise-free linear signal is recovered exactly") {
  const Tensor x = Tensor::from_rows({{2, 0}, {-2, 0}, {2, 0}, {-2, 0}});
  const int y[] = {1, -1, 1, -1};
  const ConceptVector cav = fit_pattern_cav(x, y);
  CHECK(cav.raw[0] == doctest::Approx(2.0));
  CHECK(cav.raw[1] == 0.0);
  CHECK(cav.v[0] == doctest::Approx(1.0));
  CHECK(cav.z_plus == Vector{2, 0});
  CHECK(cav.z_minus == Vector{-2, 0});
  CHECK(cav.kind == CavKind::pattern);
}

TEST_CASE("balanced labels give half the mean difference") {
  Rng rng(4);
  Tensor x = testing::random_matrix(rng, 200, 6);
  std::vector<int> y(200);
  for (std::size_t i = 0; i < 200; ++i) y[i] = i % 2 == 0 ? 1 : -1;
  const ConceptVector cav = fit_pattern_cav(x, y);
  const auto [zp, zm] = concept_means(x, y);
  for (std::size_t j = 0; j < 6; ++j) {
    CHECK(cav.raw[j] == doctest::Approx((zp[j] - zm[j]) / 2).epsilon(1e-12));
  }
}

TEST_CASE("pattern direction is scale invariant") {
  Rng rng(8);
  Tensor x = testing::random_matrix(rng, 120, 10);
  const std::vector<int> y = testing::random_labels(rng, 120);
  for (std::size_t i = 0; i < 120; ++i) x.at(i, 3) += y[i];
  const ConceptVector a = fit_pattern_cav(x, y);
  for (double alpha : {1e-3, 0.5, 7.0, 1e4}) {
    Tensor s = x;
    for (double& v : s.data()) v *= alpha;
    CHECK(testing::max_abs_diff(fit_pattern_cav(s, y).v, a.v) < 1e-9);
  }
}

TEST_CASE("pattern fit errors") {
  const Tensor x = Tensor::from_rows({{1, 0}, {3, 0}});
  const int same[] = {1, 1};
  CHECK_THROWS_WITH_AS(fit_pattern_cav(x, same), "constant labels", Error);
  const Tensor flat = Tensor::from_rows({{1, 1}, {1, 1}, {1, 1}});
  const int y[] = {1, -1, 1};
  CHECK_THROWS_WITH_AS(fit_pattern_cav(flat, y), doctest::Contains("no signal"), Error);
  const int bad[] = {1, 0};
  CHECK_THROWS_AS(fit_pattern_cav(x, bad), Error);
  CHECK_THROWS_AS(concept_means(x, same), Error);

  const int mixed[] = {1, -1};
  const auto [zp, zm] = concept_means(x, mixed);
  CHECK(zp == Vector{1, 0});
  CHECK(zm == Vector{3, 0});
}

TEST_CASE("svm reaches the minimum found by grid refinement") {
  Rng rng(31);
  const std::size_t n = 200;
  Tensor x = Tensor::matrix(n, 2);
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = i % 3 == 0 ? 1 : -1;
    x.at(i, 0) = 0.8 * y[i] + rng.normal();
    x.at(i, 1) = 0.3 * y[i] + 0.7 * rng.normal() + 0.5 * x.at(i, 0);
  }
  SvmConfig cfg;
  cfg.lambda = 1e-2;
  cfg.epochs = 300;
  const LinearSvm svm = train_linear_svm(x, y, cfg);
  const Vector mean = column_mean(x);

  // Coarse-to-fine grid over (w0, w1, b) of the convex objective.
  double c0 = 0, c1 = 0, cb = 0, step = 0.25, best = 1e300;
  for (int round = 0; round < 18; ++round) {
    double n0 = c0, n1 = c1, nb = cb;
    for (int i = -12; i <= 12; ++i) {
      for (int j = -12; j <= 12; ++j) {
        for (int k = -12; k <= 12; ++k) {
          const double w0 = c0 + i * step, w1 = c1 + j * step, b = cb + k * step;
          const double f = centered_objective(x, y, mean, w0, w1, b, cfg.lambda);
          if (f < best) {
            best = f;
            n0 = w0;
            n1 = w1;
            nb = b;
          }
        }
      }
    }
    c0 = n0;
    c1 = n1;
    cb = nb;
    step *= 0.6;
  }
  const double b_centered = svm.b + svm.w[0] * mean[0] + svm.w[1] * mean[1];
  const double got = centered_objective(x, y, mean, svm.w[0], svm.w[1], b_centered, cfg.lambda);
  CHECK(got >= best - 1e-9);
  CHECK(got - best < 2e-3 * best);

  // Reported objective is the uncentered one without the bias penalty.
  CHECK(svm.objective == doctest::Approx(svm_objective(x, y, svm.w, svm.b, cfg.lambda)));
}

TEST_CASE("filter on a separable one-dimensional signal") {
  Rng rng(2);
  Tensor x = Tensor::matrix(300, 3);
  std::vector<int> y(300);
  for (std::size_t i = 0; i < 300; ++i) {
    y[i] = i < 150 ? 1 : -1;
    x.at(i, 0) = 3.0 * y[i] + 0.3 * rng.normal();
    x.at(i, 1) = 0.3 * rng.normal();
    x.at(i, 2) = 0.3 * rng.normal();
  }
  const ConceptVector cav = fit_filter_cav(x, y);
  CHECK(cav.kind == CavKind::filter);
  CHECK(cav.v[0] > 0.0);
  CHECK(std::acos(std::min(1.0, cav.v[0])) * 180.0 / std::numbers::pi < 10.0);
  CHECK(cav.fit_meta.train_error == 0.0);
  CHECK(cav.fit_meta.monotone);
  CHECK(fit_filter_cav(x, y) == cav);

  const DetectorResult det = predict_artifact_labels(x, y, 0.5);
  CHECK(det.agreement == 1.0);
  CHECK(det.train_rows.size() == 150);
  CHECK(det.labels == y);
}

TEST_CASE("toy vectors: pattern along the artifact axis, filter rotates") {
  ToyConfig cfg;
  cfg.tau = std::numbers::pi / 4;
  cfg.n = 4000;
  cfg.seed = 3;
  const LabeledDataset ds = generate_toy(cfg);
  const auto rows = ds.indices_of_class(kToyClassA);
  std::vector<int> y;
  for (auto i : rows) y.push_back(ds.y_s[i]);
  const Tensor xa = ds.samples.select_rows(rows);
  const ConceptVector pat = fit_pattern_cav(xa, y);
  const ConceptVector fil = fit_filter_cav(xa, y);
  const double deg = 180.0 / std::numbers::pi;
  CHECK(std::acos(std::abs(pat.v[0])) * deg < 2.0);
  CHECK(std::acos(std::abs(fil.v[0])) * deg > 30.0);
}

TEST_CASE("nearest neighbors match a brute-force ranking") {
  Rng rng(17);
  Tensor x = testing::random_matrix(rng, 60, 5);
  for (double& v : x.row(7)) v = 0.0;
  std::vector<int> y = testing::random_labels(rng, 60);
  const ConceptVector cav = fit_pattern_cav(x, y);
  const NeighborResult r = nearest_neighbors(cav, x, 10);
  REQUIRE(r.indices.size() == 10);
  CHECK(r.skipped_zero_rows == std::vector<std::size_t>{7});

  std::vector<std::pair<double, std::size_t>> all;
  for (std::size_t i = 0; i < 60; ++i) {
    if (i == 7) continue;
    all.emplace_back(-cosine_similarity(cav.v, x.row(i)), i);
  }
  std::sort(all.begin(), all.end());
  for (std::size_t k = 0; k < 10; ++k) {
    CHECK(r.indices[k] == all[k].second);
    CHECK(r.similarities[k] == doctest::Approx(-all[k].first).epsilon(1e-14));
  }
  CHECK_THROWS_AS(nearest_neighbors(cav, x, 61), Error);
}

TEST_CASE("neighbor ties resolve to the lower index") {
  const Tensor x = Tensor::from_rows({{1, 0}, {2, 0}, {0, 1}, {3, 0}});
  const int y[] = {1, -1, -1, 1};
  ConceptVector cav = fit_pattern_cav(x, y);
  cav.v = {1.0, 0.0};
  const NeighborResult r = nearest_neighbors(cav, x, 3);
  CHECK(r.indices == std::vector<std::size_t>{0, 1, 3});
}

TEST_CASE("concept JSON round trip and malformed input") {
  Rng rng(5);
  Tensor x = testing::random_matrix(rng, 40, 4);
  const std::vector<int> y = testing::random_labels(rng, 40);
  const ConceptVector cav = fit_filter_cav(x, y, {}, HookPoint::after_layer(1));
  const ConceptVector back = concept_from_json(Json::parse(dump_json(to_json(cav))));
  CHECK(back == cav);

  Json j = to_json(cav);
  j["dim"] = 3;
  CHECK_THROWS_AS(concept_from_json(j), Error);
  j = to_json(cav);
  j.erase("v");
  CHECK_THROWS_AS(concept_from_json(j), Error);
}

TEST_CASE("hook point names") {
  CHECK(HookPoint::parse("input") == HookPoint::input());
  CHECK(HookPoint::parse("layer1") == HookPoint::after_layer(1));
  CHECK(HookPoint::parse("after_layer(2)") == HookPoint::after_layer(2));
  CHECK(HookPoint::after_layer(3).to_string() == "layer3");
  CHECK_THROWS_AS(HookPoint::parse("layerx"), Error);
}
