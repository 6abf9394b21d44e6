#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "pcav/concept_vector.hpp"
#include "pcav/json_format.hpp"

namespace pcav {

class NetworkModel;
struct LabeledDataset;

struct SvmConfig {
  double lambda = 1e-3;
  std::size_t epochs = 200;
  // Iterates from the last tail_fraction of epochs are averaged.
  double tail_fraction = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
};

struct LinearSvm {
  Vector w;
  double b = 0.0;
  double objective = 0.0;
  double train_error = 0.0;
  bool monotone = true;

  // +1 where w.x + b >= 0, else -1.
  std::vector<int> predict(const Tensor& x) const;
};

// Pegasos-style subgradient descent on
//   lambda/2 (|w|^2 + b^2) + (1/n) sum max(0, 1 - y (w.(x - mean) + b))
// over mean-centered features. The returned (w, b) act on uncentered inputs.
LinearSvm train_linear_svm(const Tensor& x, std::span<const int> y,
                           const SvmConfig& cfg);

// lambda/2 |w|^2 + mean hinge loss, on uncentered inputs.
double svm_objective(const Tensor& x, std::span<const int> y,
                     std::span<const double> w, double b, double lambda);

struct PatternOptions {
  double variance_floor = 1e-12;
  HookPoint hook;
  LabelSource labels = LabelSource::ground_truth;
};

// Signal pattern cov[x, y] / var[y] from features of the target class.
ConceptVector fit_pattern_cav(const Tensor& x, std::span<const int> y_s,
                              const PatternOptions& opts = {});

// Normalized weight vector of a linear SVM separating y_s = +1 from -1.
ConceptVector fit_filter_cav(const Tensor& x, std::span<const int> y_s,
                             const SvmConfig& cfg = {}, HookPoint hook = {});

struct DetectorResult {
  LinearSvm svm;
  std::vector<int> labels;  // predicted y_s for every row
  double agreement = 0.0;   // share of rows where labels match y_s
  std::vector<std::size_t> train_rows;
};

// Artifact detector: a linear SVM trained on a random `fraction` of the rows
// (drawn with cfg.seed), then applied to all of them.
DetectorResult predict_artifact_labels(const Tensor& x, std::span<const int> y_s,
                                       double fraction, const SvmConfig& cfg = {});

// Means of the y_s = +1 rows and of the y_s = -1 rows.
std::pair<Vector, Vector> concept_means(const Tensor& x,
                                        std::span<const int> y_s);

struct NeighborResult {
  std::vector<std::size_t> indices;  // best first
  std::vector<double> similarities;
  std::vector<std::size_t> skipped_zero_rows;
};

// Rows ranked by cosine similarity to cav.v; ties go to the lower index.
NeighborResult nearest_neighbors(const ConceptVector& cav, const Tensor& x,
                                 std::size_t k);

struct ClassShift {
  int label = 0;
  std::size_t count = 0;
  double target_before = 0.0, target_after = 0.0;
  double true_before = 0.0, true_after = 0.0;
};

struct LogitShiftReport {
  int target = 0;
  double scale = 0.0;
  std::size_t samples = 0;
  double target_before = 0.0, target_after = 0.0;
  double true_before = 0.0, true_after = 0.0;
  std::vector<ClassShift> per_class;
};

// Softmax outputs before and after adding scale * cav.v to the features at
// cav.hook. With skip_target_class only samples of other classes are probed.
LogitShiftReport probe_logit_shift(const NetworkModel& model,
                                   const LabeledDataset& ds,
                                   const ConceptVector& cav, int target,
                                   double scale, bool skip_target_class = false);

// |z_plus - z_minus|, the default probe scale.
double concept_gap(const ConceptVector& cav);

Json to_json(const ConceptVector& cav);
ConceptVector concept_from_json(const Json& j);
Json to_json(const LogitShiftReport& report);
void write_concept(const ConceptVector& cav, const std::filesystem::path& path);
ConceptVector read_concept(const std::filesystem::path& path);

}  // namespace pcav
