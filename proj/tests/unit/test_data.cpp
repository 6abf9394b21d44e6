#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "doctest.h"
#include "helpers.hpp"
#include "pcav/datasets.hpp"
#include "pcav/toygen.hpp"

using namespace pcav;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "pcav_unit";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("toy samples decompose into signal, class and distractor parts") {
  for (double tau_deg : {0.0, 45.0, 135.0, 290.0}) {
    ToyConfig cfg;
    cfg.tau = tau_deg * std::numbers::pi / 180.0;
    cfg.n = 501;
    cfg.seed = 4;
    const LabeledDataset ds = generate_toy(cfg);
    REQUIRE(ds.size() == 501);
    const double an[] = {std::sin(cfg.tau), std::cos(cfg.tau)};
    std::size_t a = 0, b = 0, art = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const double rx = ds.samples.at(i, 0) - ds.y_s[i];
      const double ry = ds.samples.at(i, 1) - toy_class_sign(ds.y_c[i]);
      // residual is a multiple of a_n
      CHECK(std::abs(rx * an[1] - ry * an[0]) < 1e-12);
      if (ds.y_c[i] == kToyClassA) {
        ++a;
        art += ds.y_s[i] == 1;
      } else {
        ++b;
        CHECK(ds.y_s[i] == -1);
      }
    }
    CHECK((a > b ? a - b : b - a) <= 1);
    CHECK(art == static_cast<std::size_t>(std::llround(0.5 * a)));
  }
}

TEST_CASE("toy generation is deterministic and validates its config") {
  ToyConfig cfg;
  cfg.seed = 12;
  CHECK(generate_toy(cfg) == generate_toy(cfg));
  cfg.seed = 13;
  ToyConfig other;
  other.seed = 12;
  CHECK_FALSE(generate_toy(cfg) == generate_toy(other));

  ToyConfig bad;
  bad.artifact_fraction_in_A = 1.0;
  CHECK_THROWS_AS(generate_toy(bad), Error);
  bad = {};
  bad.sigma2 = -1.0;
  CHECK_THROWS_AS(generate_toy(bad), Error);
}

TEST_CASE("pattern classes: counts, range and clean flags") {
  const LabeledDataset ds = testing::small_patterns(20, 1, 4, 10);
  CHECK(ds.size() == 80);
  CHECK(ds.samples.cols() == 100);
  for (auto h : ds.class_histogram()) CHECK(h == 20);
  for (double v : ds.samples.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  for (int s : ds.y_s) CHECK(s == -1);
  ds.validate();

  // Class means sit near their templates.
  PatternConfig cfg;
  cfg.classes = 4;
  cfg.shape = {1, 10, 10};
  cfg.contrast = 0.3;
  const Tensor t = class_templates(cfg);
  for (std::size_t k = 0; k < 4; ++k) {
    Vector mean(100, 0.0);
    for (std::size_t i : ds.indices_of_class(static_cast<int>(k))) {
      for (std::size_t j = 0; j < 100; ++j) mean[j] += ds.samples.at(i, j) / 20.0;
    }
    CHECK(testing::max_abs_diff(mean, t.row(k)) < 0.12);
  }
}

TEST_CASE("random polarity centers every class mean at mid-gray") {
  PatternConfig cfg;
  cfg.classes = 3;
  cfg.shape = {1, 8, 8};
  cfg.n_per_class = 4000;
  cfg.noise_sigma = 0.0;
  cfg.random_polarity = true;
  Rng rng(2);
  const LabeledDataset ds = gen_pattern_classes(cfg, rng);
  for (int k = 0; k < 3; ++k) {
    Vector mean(64, 0.0);
    for (std::size_t i : ds.indices_of_class(k)) {
      for (std::size_t j = 0; j < 64; ++j) mean[j] += ds.samples.at(i, j) / 4000.0;
    }
    for (double m : mean) CHECK(std::abs(m - 0.5) < 0.02);
  }
}

TEST_CASE("box and shift artifacts") {
  const ImageShape shape{1, 8, 8};
  Vector x(64, 0.3);
  const ArtifactSpec box = make_artifact("box", shape, 3);
  const Vector y = apply_artifact(x, shape, box);
  for (std::size_t r = 0; r < 8; ++r) {
    for (std::size_t c = 0; c < 8; ++c) {
      CHECK(y[r * 8 + c] == ((r >= 5 && c >= 5) ? 1.0 : 0.3));
    }
  }
  const ArtifactSpec shift = make_artifact("shift", shape, 4, 0.5);
  const Vector eight = digit_eight_pattern(shape);
  const Vector z = apply_artifact(x, shape, shift);
  for (std::size_t j = 0; j < 64; ++j) {
    CHECK(z[j] == doctest::Approx(std::clamp(0.3 + 0.5 * eight[j], 0.0, 1.0)));
  }
  CHECK_THROWS_AS(make_artifact("box", shape, 9), Error);
  CHECK_THROWS_AS(make_artifact("color", shape), Error);
  CHECK_THROWS_AS(make_artifact("stripe", shape), Error);
}

TEST_CASE("color tint multiplies the foreground per channel") {
  const ImageShape shape{3, 8, 8};
  Vector x(shape.size(), 0.0);
  x[0] = 0.8;
  x[64] = 0.8;
  x[128] = 0.8;
  const ArtifactSpec tint = make_artifact("color", shape, 4, 0.2, 3);
  const Vector y = apply_artifact(x, shape, tint);
  const auto& rgb = color_table()[3];
  CHECK(y[0] == doctest::Approx(0.8 * rgb[0]));
  CHECK(y[64] == doctest::Approx(0.8 * rgb[1]));
  CHECK(y[128] == doctest::Approx(0.8 * rgb[2]));
  CHECK(y[1] == 0.0);
}

TEST_CASE("poison counts use the floor") {
  CHECK(poison_count(500, 0.1) == 50);
  CHECK(poison_count(1000, 0.01) == 10);
  CHECK(poison_count(99, 0.01) == 0);
  CHECK(poison_count(30, 0.1) == 3);
  CHECK(poison_count(7, 1.0) == 7);
}

TEST_CASE("clever hans poisoning touches only the target class") {
  const LabeledDataset ds = testing::small_patterns(40, 3);
  const ArtifactSpec box = make_artifact("box", ds.shape, 3);
  Rng rng(5);
  const LabeledDataset p = poison_clever_hans(ds, 1, 0.1, box, rng);
  std::size_t marked = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    CHECK(p.y_c[i] == ds.y_c[i]);
    const bool changed = !std::equal(p.samples.row(i).begin(), p.samples.row(i).end(),
                                     ds.samples.row(i).begin());
    if (p.y_s[i] == 1) {
      ++marked;
      CHECK(p.y_c[i] == 1);
      const Vector want = apply_artifact(ds.samples.row(i), ds.shape, box);
      CHECK(testing::max_abs_diff(want, p.samples.row(i)) == 0.0);
    } else {
      CHECK_FALSE(changed);
    }
  }
  CHECK(marked == 4);
  REQUIRE(p.provenance.size() == 1);
  CHECK(p.provenance[0].count == 4);
  CHECK(p.provenance[0].attack == "clever_hans");

  Rng r2(5);
  CHECK_THROWS_AS(poison_clever_hans(ds, 1, 0.0, box, r2), Error);
  CHECK_THROWS_AS(poison_clever_hans(ds, 1, 1.5, box, r2), Error);
  CHECK_THROWS_AS(poison_clever_hans(ds, 7, 0.1, box, r2), Error);
}

TEST_CASE("backdoor poisoning relabels artifact samples to the target") {
  const LabeledDataset ds = testing::small_patterns(100, 4);
  const ArtifactSpec box = make_artifact("box", ds.shape, 2);
  Rng rng(6);
  const LabeledDataset p = poison_backdoor(ds, 2, 0.05, box, rng);
  std::vector<std::size_t> from(3, 0);
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p.y_s[i] == 1) {
      CHECK(p.y_c[i] == 2);
      ++from[static_cast<std::size_t>(ds.y_c[i])];
    } else {
      CHECK(p.y_c[i] == ds.y_c[i]);
    }
  }
  for (auto f : from) CHECK(f == 5);
  CHECK(p.provenance.back().count == 15);
}

TEST_CASE("test poisoning keeps labels and respects the split") {
  PatternConfig cfg;
  cfg.classes = 3;
  cfg.shape = {1, 8, 8};
  cfg.n_per_class = 10;
  cfg.split = Split::test;
  Rng rng(1);
  const LabeledDataset ds = gen_pattern_classes(cfg, rng);
  const ArtifactSpec box = make_artifact("box", ds.shape, 2);
  Rng r(2);
  const LabeledDataset p = poison_test(ds, 1.0, box, r);
  for (std::size_t i = 0; i < p.size(); ++i) {
    CHECK(p.y_s[i] == 1);
    CHECK(p.y_c[i] == ds.y_c[i]);
  }
  Rng r3(2);
  CHECK_THROWS_AS(poison_clever_hans(ds, 0, 0.1, box, r3), Error);
  const LabeledDataset train = testing::small_patterns(5, 1);
  CHECK_THROWS_AS(poison_test(train, 1.0, box, r3), Error);
}

TEST_CASE("dataset binary and csv round trip") {
  LabeledDataset ds = testing::small_patterns(7, 8);
  ds.y_s[3] = 1;
  const fs::path bin = temp_path("ds.bin");
  write_dataset(ds, bin);
  const LabeledDataset back = read_dataset(bin);
  CHECK(back.samples == ds.samples);
  CHECK(back.y_c == ds.y_c);
  CHECK(back.y_s == ds.y_s);
  CHECK(back.shape == ds.shape);
  CHECK(back.num_classes == ds.num_classes);
  CHECK(fs::file_size(bin) == 8 + 20 + ds.size() * (64 * 8 + 4 + 1));

  const fs::path csv = temp_path("ds.csv");
  write_dataset_csv(ds, csv);
  std::ifstream in(csv);
  std::string line;
  std::size_t lines = 0;
  while (std::getline(in, line)) ++lines;
  CHECK(lines == ds.size() + 1);

  // Truncated and foreign files are rejected.
  {
    std::ofstream f(temp_path("bad.bin"), std::ios::binary);
    f << "PCAVNN1";
  }
  CHECK_THROWS_AS(read_dataset(temp_path("bad.bin")), Error);
  fs::resize_file(bin, fs::file_size(bin) - 3);
  CHECK_THROWS_AS(read_dataset(bin), Error);
}

TEST_CASE("dataset validation catches inconsistent labels") {
  LabeledDataset ds = testing::small_patterns(3, 1);
  ds.y_s[0] = 0;
  CHECK_THROWS_AS(ds.validate(), Error);
  ds = testing::small_patterns(3, 1);
  ds.y_c[0] = 3;
  CHECK_THROWS_AS(ds.validate(), Error);
  ds = testing::small_patterns(3, 1);
  ds.y_c.pop_back();
  CHECK_THROWS_AS(ds.validate(), Error);
}
