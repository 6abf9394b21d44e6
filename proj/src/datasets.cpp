#include "pcav/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "binary_io.hpp"

namespace pcav {

namespace {

constexpr std::string_view kDatasetMagic("PCAVDS1\0", 8);

struct ArtifactName {
  std::string operator()(const ColorTint& c) const {
    return "color" + std::to_string(c.color_index);
  }
  std::string operator()(const BoxPatch& b) const {
    return "box" + std::to_string(b.size);
  }
  std::string operator()(const AdditiveShift&) const { return "shift"; }
};

std::vector<std::size_t> pick(std::vector<std::size_t> pool, std::size_t count,
                              Rng& rng) {
  // Partial Fisher-Yates; the chosen indices are returned sorted.
  for (std::size_t i = 0; i < count; ++i) {
    std::size_t j = i + rng.below(pool.size() - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(count);
  std::sort(pool.begin(), pool.end());
  return pool;
}

void check_rate(double rate, bool allow_zero) {
  if (!(rate <= 1.0) || rate < 0.0 || (!allow_zero && rate == 0.0)) {
    throw Error("poison rate out of range: " + std::to_string(rate));
  }
}

void mark(LabeledDataset& ds, std::size_t i, const ArtifactSpec& spec) {
  Vector poisoned = apply_artifact(ds.samples.row(i), ds.shape, spec);
  std::copy(poisoned.begin(), poisoned.end(), ds.samples.row(i).begin());
  ds.y_s[i] = 1;
}

}  // namespace

std::string to_string(Split split) {
  return split == Split::train ? "train" : "test";
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "test") return Split::test;
  throw Error("unknown split: " + name);
}

std::string ArtifactSpec::name() const { return std::visit(ArtifactName{}, kind); }

void ArtifactSpec::validate(const ImageShape& shape) const {
  if (const auto* b = std::get_if<BoxPatch>(&kind)) {
    if (b->size == 0 || b->size > shape.height || b->size > shape.width) {
      throw Error("box size does not fit inside the image");
    }
  } else if (const auto* s = std::get_if<AdditiveShift>(&kind)) {
    if (s->pattern.size() != shape.size()) {
      throw Error("shift template shape does not match sample shape");
    }
  } else if (const auto* c = std::get_if<ColorTint>(&kind)) {
    if (c->color_index < 0 || c->color_index >= 10) {
      throw Error("color index must be in 0..9");
    }
    if (shape.channels != 3) throw Error("color tint needs 3-channel images");
  }
}

const std::array<std::array<double, 3>, 10>& color_table() {
  static const std::array<std::array<double, 3>, 10> table = {{
      {1.0, 0.0, 0.0},  // 0 deg
      {1.0, 0.6, 0.0},  // 36
      {0.8, 1.0, 0.0},  // 72
      {0.2, 1.0, 0.0},  // 108
      {0.0, 1.0, 0.4},  // 144
      {0.0, 1.0, 1.0},  // 180
      {0.0, 0.4, 1.0},  // 216
      {0.2, 0.0, 1.0},  // 252
      {0.8, 0.0, 1.0},  // 288
      {1.0, 0.0, 0.6},  // 324
  }};
  return table;
}

Vector digit_eight_pattern(const ImageShape& shape) {
  const double h = static_cast<double>(shape.height);
  const double w = static_cast<double>(shape.width);
  const double radius = 0.2 * h;
  const double thickness = std::max(0.75, h / 16.0);
  const std::array<std::array<double, 2>, 2> centers = {
      {{0.3 * h, 0.5 * w - 0.5}, {0.7 * h - 0.5, 0.5 * w - 0.5}}};
  Vector plane(shape.height * shape.width, 0.0);
  for (std::size_t y = 0; y < shape.height; ++y) {
    for (std::size_t x = 0; x < shape.width; ++x) {
      double v = 0.0;
      for (const auto& c : centers) {
        const double d = std::hypot(static_cast<double>(y) - c[0],
                                    static_cast<double>(x) - c[1]);
        v = std::max(v, 1.0 - std::abs(d - radius) / thickness);
      }
      plane[y * shape.width + x] = std::clamp(v, 0.0, 1.0);
    }
  }
  Vector out;
  out.reserve(shape.size());
  for (std::size_t c = 0; c < shape.channels; ++c) {
    out.insert(out.end(), plane.begin(), plane.end());
  }
  return out;
}

ArtifactSpec make_artifact(const std::string& kind, const ImageShape& shape,
                           std::size_t box_size, double shift_factor,
                           int color_index) {
  ArtifactSpec spec;
  if (kind == "box") {
    spec.kind = BoxPatch{box_size, 1.0};
  } else if (kind == "shift") {
    spec.kind = AdditiveShift{digit_eight_pattern(shape), shift_factor};
  } else if (kind == "color") {
    spec.kind = ColorTint{color_index};
  } else {
    throw Error("unknown artifact kind: " + kind);
  }
  spec.validate(shape);
  return spec;
}

void LabeledDataset::validate() const {
  const std::size_t n = y_c.size();
  if (y_s.size() != n || samples.rows() != n) {
    throw Error("label arrays and samples disagree in length");
  }
  if (n > 0 && samples.cols() != shape.size()) {
    throw Error("sample width does not match the image shape");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (y_c[i] < 0 || static_cast<std::size_t>(y_c[i]) >= num_classes) {
      throw Error("class label out of range");
    }
    if (y_s[i] != 1 && y_s[i] != -1) throw Error("artifact flag must be +-1");
  }
}

std::vector<std::size_t> LabeledDataset::indices_of_class(int c) const {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < y_c.size(); ++i) {
    if (y_c[i] == c) idx.push_back(i);
  }
  return idx;
}

std::vector<std::size_t> LabeledDataset::class_histogram() const {
  std::vector<std::size_t> h(num_classes, 0);
  for (int c : y_c) ++h.at(static_cast<std::size_t>(c));
  return h;
}

LabeledDataset LabeledDataset::subset(std::span<const std::size_t> indices) const {
  LabeledDataset out;
  out.samples = samples.select_rows(indices);
  out.shape = shape;
  out.num_classes = num_classes;
  out.split = split;
  out.provenance = provenance;
  for (auto i : indices) {
    out.y_c.push_back(y_c.at(i));
    out.y_s.push_back(y_s.at(i));
  }
  return out;
}

Tensor class_templates(const PatternConfig& cfg) {
  if (cfg.classes < 2) throw Error("need at least two classes");
  if (cfg.shape.height < 8 || cfg.shape.width < 8 || cfg.shape.channels == 0) {
    throw Error("image dims must be at least 8x8");
  }
  Rng rng(mix_seed(cfg.template_seed, 0x7e3));
  const std::size_t h = cfg.shape.height, w = cfg.shape.width;
  Tensor out = Tensor::matrix(cfg.classes, cfg.shape.size());
  constexpr int kWaves = 4;
  for (std::size_t k = 0; k < cfg.classes; ++k) {
    // Sum of a few plane waves with spatial frequency at most 2 cycles per
    // image, rescaled so the peak deviation from 0.5 equals the contrast.
    std::array<double, kWaves> amp{}, phase{};
    std::array<int, kWaves> fy{}, fx{};
    for (int m = 0; m < kWaves; ++m) {
      do {
        fy[m] = static_cast<int>(rng.below(3));
        fx[m] = static_cast<int>(rng.below(5)) - 2;
      } while (fy[m] == 0 && fx[m] == 0);
      amp[m] = 0.5 + rng.uniform();
      phase[m] = 2.0 * std::numbers::pi * rng.uniform();
    }
    Vector plane(h * w);
    double peak = 0.0;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        double v = 0.0;
        for (int m = 0; m < kWaves; ++m) {
          v += amp[m] * std::cos(2.0 * std::numbers::pi *
                                     (fy[m] * static_cast<double>(y) / h +
                                      fx[m] * static_cast<double>(x) / w) +
                                 phase[m]);
        }
        plane[y * w + x] = v;
        peak = std::max(peak, std::abs(v));
      }
    }
    auto row = out.row(k);
    for (std::size_t c = 0; c < cfg.shape.channels; ++c) {
      for (std::size_t p = 0; p < h * w; ++p) {
        row[c * h * w + p] = 0.5 + cfg.contrast * plane[p] / peak;
      }
    }
  }
  return out;
}

LabeledDataset gen_pattern_classes(const PatternConfig& cfg, Rng& rng) {
  if (!(cfg.noise_sigma >= 0.0)) throw Error("noise sigma must be non-negative");
  if (!(cfg.brightness_sigma >= 0.0)) {
    throw Error("brightness sigma must be non-negative");
  }
  const Tensor templates = class_templates(cfg);
  const std::size_t d = cfg.shape.size();
  const std::size_t n = cfg.classes * cfg.n_per_class;

  LabeledDataset ds;
  ds.samples = Tensor::matrix(n, d);
  ds.shape = cfg.shape;
  ds.num_classes = cfg.classes;
  ds.split = cfg.split;
  ds.y_c.reserve(n);
  ds.y_s.assign(n, -1);
  std::size_t i = 0;
  for (std::size_t k = 0; k < cfg.classes; ++k) {
    auto tmpl = templates.row(k);
    for (std::size_t s = 0; s < cfg.n_per_class; ++s, ++i) {
      auto row = ds.samples.row(i);
      const double offset =
          cfg.brightness_sigma > 0.0 ? cfg.brightness_sigma * rng.normal() : 0.0;
      const double sign = cfg.random_polarity && rng.below(2) == 1 ? -1.0 : 1.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double noise = cfg.noise_sigma * rng.normal();
        const double base = 0.5 + sign * (tmpl[j] - 0.5);
        row[j] = std::clamp(base + offset + noise, 0.0, 1.0);
      }
      ds.y_c.push_back(static_cast<int>(k));
    }
  }
  return ds;
}

Vector apply_artifact(std::span<const double> x, const ImageShape& shape,
                      const ArtifactSpec& spec) {
  if (x.size() != shape.size()) throw Error("shape mismatch");
  spec.validate(shape);
  Vector out(x.begin(), x.end());
  const double lo = spec.clamp_low, hi = spec.clamp_high;
  if (const auto* b = std::get_if<BoxPatch>(&spec.kind)) {
    const std::size_t plane = shape.height * shape.width;
    for (std::size_t c = 0; c < shape.channels; ++c) {
      for (std::size_t y = shape.height - b->size; y < shape.height; ++y) {
        for (std::size_t xx = shape.width - b->size; xx < shape.width; ++xx) {
          out[c * plane + y * shape.width + xx] = b->value;
        }
      }
    }
  } else if (const auto* s = std::get_if<AdditiveShift>(&spec.kind)) {
    for (std::size_t j = 0; j < out.size(); ++j) {
      out[j] = std::clamp(out[j] + s->factor * s->pattern[j], lo, hi);
    }
  } else if (const auto* c = std::get_if<ColorTint>(&spec.kind)) {
    const auto& rgb = color_table()[static_cast<std::size_t>(c->color_index)];
    const std::size_t plane = shape.height * shape.width;
    for (std::size_t ch = 0; ch < 3; ++ch) {
      for (std::size_t p = 0; p < plane; ++p) {
        double& v = out[ch * plane + p];
        if (v > 0.0) v = std::clamp(v * rgb[ch], lo, hi);
      }
    }
  }
  return out;
}

std::size_t poison_count(std::size_t n, double rate) {
  return static_cast<std::size_t>(std::floor(static_cast<double>(n) * rate + 1e-9));
}

LabeledDataset poison_clever_hans(const LabeledDataset& ds, int target,
                                  double rate, const ArtifactSpec& spec,
                                  Rng& rng) {
  if (ds.split != Split::train) throw Error("clever hans poisoning needs a train split");
  check_rate(rate, false);
  spec.validate(ds.shape);
  auto pool = ds.indices_of_class(target);
  if (pool.empty()) throw Error("class " + std::to_string(target) + " absent");

  LabeledDataset out = ds;
  const std::size_t count = poison_count(pool.size(), rate);
  for (auto i : pick(std::move(pool), count, rng)) mark(out, i, spec);
  out.provenance.push_back({"clever_hans", spec.name(), target, rate, count});
  return out;
}

LabeledDataset poison_backdoor(const LabeledDataset& ds, int target, double rate,
                               const ArtifactSpec& spec, Rng& rng) {
  if (ds.split != Split::train) throw Error("backdoor poisoning needs a train split");
  check_rate(rate, false);
  spec.validate(ds.shape);
  if (ds.indices_of_class(target).empty()) {
    throw Error("class " + std::to_string(target) + " absent");
  }
  LabeledDataset out = ds;
  std::size_t total = 0;
  for (std::size_t c = 0; c < ds.num_classes; ++c) {
    auto pool = ds.indices_of_class(static_cast<int>(c));
    const std::size_t count = poison_count(pool.size(), rate);
    for (auto i : pick(std::move(pool), count, rng)) {
      mark(out, i, spec);
      out.y_c[i] = target;
    }
    total += count;
  }
  out.provenance.push_back({"backdoor", spec.name(), target, rate, total});
  return out;
}

LabeledDataset poison_test(const LabeledDataset& ds, double rate,
                           const ArtifactSpec& spec, Rng& rng) {
  if (ds.split != Split::test) throw Error("test poisoning needs a test split");
  check_rate(rate, true);
  spec.validate(ds.shape);
  LabeledDataset out = ds;
  std::size_t total = 0;
  for (std::size_t c = 0; c < ds.num_classes; ++c) {
    auto pool = ds.indices_of_class(static_cast<int>(c));
    const std::size_t count = poison_count(pool.size(), rate);
    for (auto i : pick(std::move(pool), count, rng)) mark(out, i, spec);
    total += count;
  }
  out.provenance.push_back({"test", spec.name(), -1, rate, total});
  return out;
}

void write_dataset(const LabeledDataset& ds, const std::filesystem::path& path) {
  ds.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  binary::put_magic(out, kDatasetMagic);
  binary::put_u32(out, ds.size());
  binary::put_u32(out, ds.num_classes);
  binary::put_u32(out, ds.shape.channels);
  binary::put_u32(out, ds.shape.height);
  binary::put_u32(out, ds.shape.width);
  for (double v : ds.samples.data()) binary::put_f64(out, v);
  for (int c : ds.y_c) binary::put_i32(out, c);
  for (int s : ds.y_s) binary::put_i8(out, static_cast<std::int8_t>(s));
  if (!out) throw Error("write failed: " + path.string());
}

LabeledDataset read_dataset(const std::filesystem::path& path, Split split) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  binary::expect_magic(in, kDatasetMagic);
  LabeledDataset ds;
  const std::size_t n = binary::get_u32(in);
  ds.num_classes = binary::get_u32(in);
  ds.shape.channels = binary::get_u32(in);
  ds.shape.height = binary::get_u32(in);
  ds.shape.width = binary::get_u32(in);
  ds.split = split;
  std::vector<double> data(n * ds.shape.size());
  for (auto& v : data) v = binary::get_f64(in);
  ds.samples = Tensor({n, ds.shape.size()}, std::move(data));
  ds.y_c.resize(n);
  ds.y_s.resize(n);
  for (auto& c : ds.y_c) c = binary::get_i32(in);
  for (auto& s : ds.y_s) s = binary::get_i8(in);
  ds.validate();
  return ds;
}

void write_dataset_csv(const LabeledDataset& ds,
                       const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  const std::size_t d = ds.shape.size();
  for (std::size_t j = 0; j < d; ++j) out << 'p' << j << ',';
  out << "y_c,y_s\n";
  char buf[32];
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (double v : ds.samples.row(i)) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      out << buf << ',';
    }
    out << ds.y_c[i] << ',' << ds.y_s[i] << '\n';
  }
}

}  // namespace pcav
