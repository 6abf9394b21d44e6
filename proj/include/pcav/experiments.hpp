#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pcav/concepts.hpp"
#include "pcav/models.hpp"
#include "pcav/toygen.hpp"

namespace pcav {

enum class Attack { clever_hans, backdoor };
std::string to_string(Attack attack);
Attack parse_attack(const std::string& text);

// Which concept vector drives a correction. pattern_predicted fits the signal
// pattern on artifact labels predicted by a linear SVM detector.
enum class CavChoice { filter, pattern_gt, pattern_predicted };
std::string to_string(CavChoice cav);
CavChoice parse_cav_choice(const std::string& text);

enum class Correction { baseline, aclarc, pclarc };
std::string to_string(Correction correction);
Correction parse_correction(const std::string& text);

struct ArtifactOptions {
  std::string kind = "box";  // box | shift | color
  std::size_t box_size = 4;
  double shift_factor = 0.2;
  int color_index = 0;
};

struct ExperimentConfig {
  PatternConfig data;  // training split; n_per_class is per training class
  std::size_t test_per_class = 100;
  Attack attack = Attack::clever_hans;
  double rate = 0.1;  // r_CH or r_BD
  double r_p = 1.0;
  ArtifactOptions artifact;
  std::vector<int> targets{0, 1, 2};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::vector<CavChoice> cavs{CavChoice::filter, CavChoice::pattern_gt,
                              CavChoice::pattern_predicted};
  std::vector<Correction> corrections{Correction::baseline, Correction::aclarc,
                                      Correction::pclarc};
  std::vector<HookPoint> hooks{HookPoint::input(), HookPoint::after_layer(1)};
  ConvNetOptions network;
  OptimizerConfig optimizer;  // initial training; the seed field is ignored
  std::size_t finetune_epochs = 5;
  double subset_fraction = 0.5;
  SvmConfig svm;
  // Share of target-class samples the artifact detector is trained on.
  double detector_fraction = 0.5;
  bool probes = true;
  std::size_t jobs = 1;

  void validate() const;
};

Json to_json(const ExperimentConfig& cfg);
ExperimentConfig experiment_config_from_json(const Json& j);

struct SuiteCell {
  int target = 0;
  std::uint64_t seed = 0;
  std::string hook;
  Correction correction = Correction::baseline;
  std::string cav;  // "none" for the baseline
  double clean = 0.0;
  double poisoned = 0.0;
  // Poisoned-test accuracy before fine-tuning and after each epoch; empty for
  // P-ClArC.
  std::vector<double> poisoned_by_epoch;

  friend bool operator==(const SuiteCell&, const SuiteCell&) = default;
};

struct SuiteAggregate {
  std::string hook;
  Correction correction = Correction::baseline;
  std::string cav;
  std::size_t count = 0;
  double clean_mean = 0.0, clean_min = 0.0, clean_max = 0.0;
  double poisoned_mean = 0.0, poisoned_min = 0.0, poisoned_max = 0.0;
  std::vector<double> poisoned_by_epoch_mean;

  friend bool operator==(const SuiteAggregate&, const SuiteAggregate&) = default;
};

struct TrainedSummary {
  int target = 0;
  std::uint64_t seed = 0;
  std::size_t poisoned_train_samples = 0;
  double clean = 0.0;
  double poisoned = 0.0;
  std::vector<double> loss;

  friend bool operator==(const TrainedSummary&, const TrainedSummary&) = default;
};

struct CavFitRecord {
  int target = 0;
  std::uint64_t seed = 0;
  std::string hook;
  std::string cav;
  std::size_t dim = 0;
  double objective = 0.0;
  double train_error = 0.0;
  bool monotone = true;
  // Share of target-class samples whose label matches the ground truth.
  double label_agreement = 1.0;
  double gap = 0.0;

  friend bool operator==(const CavFitRecord&, const CavFitRecord&) = default;
};

struct ProbeRecord {
  int target = 0;
  std::uint64_t seed = 0;
  std::string hook;
  std::string cav;
  double scale = 0.0;
  std::size_t samples = 0;
  double target_before = 0.0, target_after = 0.0;
  double true_before = 0.0, true_after = 0.0;

  friend bool operator==(const ProbeRecord&, const ProbeRecord&) = default;
};

struct ToyRun {
  double tau_deg = 0.0;
  std::uint64_t seed = 0;
  std::size_t n = 0;
  double sigma2 = 0.0;
  Vector v_pattern, v_filter;
  double angle_pattern = 0.0, angle_filter = 0.0;  // degrees to the x-axis
  double svm_objective = 0.0;
  bool svm_monotone = true;
  // Softmax classifier on raw data: logits = W x + b, rows per class.
  std::vector<Vector> classifier_w;
  Vector classifier_b;
  double classifier_accuracy = 0.0;
  std::size_t probe_index = 0;
  Vector probe, corrected_pattern, corrected_filter;
  int probe_label = 0;
  int pred_probe = 0, pred_pattern = 0, pred_filter = 0;
  bool crossed_pattern = false, crossed_filter = false;

  friend bool operator==(const ToyRun&, const ToyRun&) = default;
};

struct ExperimentReport {
  std::string kind;  // "suite" | "toy"
  Json config;
  std::vector<SuiteCell> cells;
  std::vector<SuiteAggregate> aggregates;
  std::vector<TrainedSummary> trained;
  std::vector<CavFitRecord> fits;
  std::vector<ProbeRecord> probes;
  std::vector<ToyRun> toy;

  friend bool operator==(const ExperimentReport&, const ExperimentReport&) = default;
};

inline constexpr const char* kReportSchema = "report_v1";

ExperimentReport run_controlled_suite(const ExperimentConfig& cfg);

// Means, minima and maxima of the cells grouped by (hook, correction, cav), in
// order of first appearance.
std::vector<SuiteAggregate> aggregate_cells(const std::vector<SuiteCell>& cells);

struct ToyFigureConfig {
  std::vector<double> taus_deg{0.0, 45.0, 135.0};
  std::vector<std::uint64_t> seeds{0};
  double sigma2 = 0.15;
  std::size_t n = 1000;
  double artifact_fraction_in_A = 0.5;
  SvmConfig svm;
  // Softmax regression on the raw data, plain SGD.
  std::size_t classifier_epochs = 20;
  double classifier_lr = 0.1;
  std::size_t classifier_batch = 32;
};

Json to_json(const ToyFigureConfig& cfg);

ToyRun run_toy(const ToyConfig& cfg, const ToyFigureConfig& opts);
ExperimentReport run_toy_figure(const ToyFigureConfig& cfg);

// Scatter of the samples with both concept vectors, the classifier boundary
// and the correction trajectories of the probe.
std::string render_toy_svg(const LabeledDataset& ds, const ToyRun& run);

enum class ReportFormat { json, csv, markdown };
ReportFormat parse_report_format(const std::string& text);

Json to_json(const ExperimentReport& report);
ExperimentReport report_from_json(const Json& j);
std::string render_report(const ExperimentReport& report, ReportFormat format);

}  // namespace pcav
