#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include "pcav/numerics.hpp"

namespace pcav {

enum class Split { train, test };

std::string to_string(Split split);
Split parse_split(const std::string& name);

struct ImageShape {
  std::size_t channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;

  std::size_t size() const { return channels * height * width; }
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

// Multiplies each channel of the foreground by one entry of color_table().
struct ColorTint {
  int color_index = 0;
};

// Square written into the bottom-right corner of every channel.
struct BoxPatch {
  std::size_t size = 4;
  double value = 1.0;
};

// x + factor * pattern, clamped.
struct AdditiveShift {
  Vector pattern;
  double factor = 0.2;
};

struct ArtifactSpec {
  std::variant<ColorTint, BoxPatch, AdditiveShift> kind;
  double clamp_low = 0.0;
  double clamp_high = 1.0;

  std::string name() const;
  // Throws if the artifact cannot be applied to images of this shape.
  void validate(const ImageShape& shape) const;
};

// Ten fully saturated hues at 36 degree spacing on the HSV wheel, as RGB.
const std::array<std::array<double, 3>, 10>& color_table();

// Procedural stand-in for a handwritten "8": two stacked anti-aliased rings,
// replicated over channels, values in [0, 1].
Vector digit_eight_pattern(const ImageShape& shape);

ArtifactSpec make_artifact(const std::string& kind, const ImageShape& shape,
                           std::size_t box_size = 4, double shift_factor = 0.2,
                           int color_index = 0);

struct PoisonRecord {
  std::string attack;  // "clever_hans" | "backdoor" | "test"
  std::string artifact;
  int target = -1;
  double rate = 0.0;
  std::size_t count = 0;

  friend bool operator==(const PoisonRecord&, const PoisonRecord&) = default;
};

struct LabeledDataset {
  Tensor samples;  // n x shape.size()
  ImageShape shape;
  std::size_t num_classes = 0;
  std::vector<int> y_c;
  std::vector<int> y_s;  // +1 artifact, -1 clean
  Split split = Split::train;
  std::vector<PoisonRecord> provenance;

  std::size_t size() const { return y_c.size(); }
  void validate() const;
  std::vector<std::size_t> indices_of_class(int c) const;
  std::vector<std::size_t> class_histogram() const;
  LabeledDataset subset(std::span<const std::size_t> indices) const;

  friend bool operator==(const LabeledDataset&, const LabeledDataset&) = default;
};

struct PatternConfig {
  std::size_t classes = 10;
  ImageShape shape{1, 16, 16};
  std::size_t n_per_class = 100;
  double noise_sigma = 0.1;
  // Peak deviation of a template from mid-gray.
  double contrast = 0.3;
  // Per-sample global brightness offset ~ N(0, brightness_sigma^2).
  double brightness_sigma = 0.0;
  // Invert each sample's template around mid-gray with probability 1/2, which
  // puts every class mean at mid-gray.
  bool random_polarity = false;
  std::uint64_t template_seed = 1;
  Split split = Split::train;
};

// One fixed low-frequency template per class, k x shape.size().
Tensor class_templates(const PatternConfig& cfg);

// Template plus pixel noise, clamped to [0, 1]; samples ordered by class.
LabeledDataset gen_pattern_classes(const PatternConfig& cfg, Rng& rng);

Vector apply_artifact(std::span<const double> x, const ImageShape& shape,
                      const ArtifactSpec& spec);

// floor(n * rate); the small slack absorbs products such as 500 * 0.1 that land
// a hair under an integer.
std::size_t poison_count(std::size_t n, double rate);

LabeledDataset poison_clever_hans(const LabeledDataset& ds, int target,
                                  double rate, const ArtifactSpec& spec,
                                  Rng& rng);
LabeledDataset poison_backdoor(const LabeledDataset& ds, int target,
                               double rate, const ArtifactSpec& spec, Rng& rng);
LabeledDataset poison_test(const LabeledDataset& ds, double rate,
                           const ArtifactSpec& spec, Rng& rng);

// Binary layout (little endian):
//   "PCAVDS1\0" | u32 n, K, C, H, W | f64[n*C*H*W] | i32[n] y_c | i8[n] y_s
// The split is not stored; the reader takes it as an argument.
void write_dataset(const LabeledDataset& ds, const std::filesystem::path& path);
LabeledDataset read_dataset(const std::filesystem::path& path,
                            Split split = Split::train);
// One row per sample: p0..p{d-1},y_c,y_s
void write_dataset_csv(const LabeledDataset& ds,
                       const std::filesystem::path& path);

}  // namespace pcav
