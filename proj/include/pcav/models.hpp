#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "pcav/clarc.hpp"
#include "pcav/datasets.hpp"

namespace pcav {

struct Dense {
  std::size_t in = 0, out = 0;
  Vector weight;  // out x in
  Vector bias;    // out
};

struct Relu {};

// 3x3 kernel, stride 1, no padding.
struct Conv2d {
  static constexpr std::size_t kKernel = 3;
  std::size_t in_ch = 0, out_ch = 0;
  Vector weight;  // out_ch x in_ch x 3 x 3
  Vector bias;    // out_ch
};

// 2x2 window, stride 2; odd trailing rows/columns are dropped.
struct MaxPool2 {};

// Inverted dropout: kept units are scaled by 1/(1-p) at train time.
struct Dropout {
  double p = 0.5;
};

struct Flatten {};

using Layer = std::variant<Dense, Relu, Conv2d, MaxPool2, Dropout, Flatten>;

std::string layer_name(const Layer& layer);

// Per-sample activation shape; dense activations are (d, 1, 1).
struct ActShape {
  std::size_t c = 0, h = 1, w = 1;
  std::size_t size() const { return c * h * w; }
};

struct ConvNetOptions {
  std::size_t conv1_channels = 8;
  std::size_t conv2_channels = 16;
  std::size_t hidden = 64;
  double dropout_after_pool = 0.25;
  double dropout_after_hidden = 0.5;
};

class NetworkModel {
 public:
  NetworkModel() = default;
  // Weights and biases of parametric layers are drawn from
  // U(-1/sqrt(fan_in), 1/sqrt(fan_in)) with an Rng seeded by `seed`.
  NetworkModel(ImageShape input, std::vector<Layer> layers, std::uint64_t seed);

  // conv -> relu -> conv -> relu -> maxpool -> dropout -> flatten -> dense
  // -> relu -> dropout -> dense(classes)
  static NetworkModel conv_net(ImageShape input, std::size_t classes,
                               std::uint64_t seed, ConvNetOptions opts = {});
  // flatten -> [dense -> relu]* -> dense(classes); linear when hidden is empty.
  static NetworkModel dense_net(ImageShape input, std::size_t classes,
                                std::uint64_t seed,
                                std::vector<std::size_t> hidden = {});

  const ImageShape& input_shape() const { return input_; }
  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& layers() { return layers_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t num_classes() const { return shapes_.back().size(); }

  // shapes[i] is the shape entering layer i; shapes.back() is the output.
  const std::vector<ActShape>& shapes() const { return shapes_; }

  // Index into shapes() of the activation a hook point refers to.
  std::size_t boundary(const HookPoint& point) const;
  std::size_t feature_size(const HookPoint& point) const;
  std::size_t parametric_layer_count() const;

  std::size_t parameter_count() const;
  // Weight and bias buffers of every parametric layer, in layer order.
  std::vector<std::span<double>> parameter_blocks();
  std::vector<std::span<const double>> parameter_blocks() const;

  friend bool operator==(const NetworkModel& a, const NetworkModel& b);

 private:
  void infer_shapes();

  ImageShape input_;
  std::vector<Layer> layers_;
  std::vector<ActShape> shapes_;
  std::uint64_t seed_ = 0;
};

enum class Mode { train, eval };

// Rewrites the batch activation at `boundary` in place.
struct FeatureEdit {
  std::size_t boundary = 0;
  std::function<void(Tensor&)> apply;
};

struct ForwardCache {
  // acts[i] is the n x shapes[i].size() input of layer i; acts.back() holds
  // the logits.
  std::vector<Tensor> acts;
  // Dropout keep-masks (already scaled) and maxpool argmax offsets, per layer.
  std::vector<Vector> dropout_scale;
  std::vector<std::vector<std::uint32_t>> pool_argmax;

  const Tensor& logits() const { return acts.back(); }
};

// Runs layers [from, to) on x, which must be the activation at `from`.
// In train mode `dropout_rng` must be provided.
ForwardCache forward_range(const NetworkModel& model, const Tensor& x,
                           std::size_t from, std::size_t to, Mode mode,
                           const FeatureEdit* edit = nullptr,
                           Rng* dropout_rng = nullptr);

// Full pass; if a hook is given the activation at hook.point is replaced by
// apply_hook_batch before the following layers run.
ForwardCache forward(const NetworkModel& model, const Tensor& x,
                     const ClarcHook* hook = nullptr, Mode mode = Mode::eval,
                     Rng* dropout_rng = nullptr);

struct Gradients {
  std::vector<Vector> weight;  // per layer; empty for non-parametric layers
  std::vector<Vector> bias;
};

Gradients zero_gradients(const NetworkModel& model);

// Mean softmax cross-entropy over the batch; fills grad with d loss / d logits.
double softmax_cross_entropy(const Tensor& logits, std::span<const int> labels,
                             Tensor* grad = nullptr);

// Accumulates parameter gradients for layers with index >= stop_layer.
void backward(const NetworkModel& model, const ForwardCache& cache,
              const Tensor& grad_logits, std::size_t stop_layer,
              Gradients& grads);

Vector softmax(std::span<const double> logits);
// Ties resolve to the lowest class index.
int argmax(std::span<const double> values);

struct OptimizerConfig {
  enum class Kind { sgd, adadelta };
  Kind kind = Kind::adadelta;
  double lr = 1.0;
  double rho = 0.9;
  double eps = 1e-6;
  // The learning rate of epoch e is lr * per_epoch_lr_factor^e.
  double per_epoch_lr_factor = 0.7;
  std::size_t epochs = 5;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;

  void validate() const;
};

std::string to_string(OptimizerConfig::Kind kind);
OptimizerConfig::Kind parse_optimizer_kind(const std::string& text);

struct NamedDataset {
  std::string name;
  const LabeledDataset* data = nullptr;
};

struct TrainHistory {
  std::vector<double> loss;      // mean train loss per epoch
  std::vector<double> accuracy;  // train accuracy per epoch (train mode)
  std::vector<std::string> eval_names;
  std::vector<std::vector<double>> eval_accuracy;  // [eval set][epoch]

  friend bool operator==(const TrainHistory&, const TrainHistory&) = default;
};

TrainHistory train(NetworkModel& model, const LabeledDataset& ds,
                   const OptimizerConfig& opt,
                   std::span<const NamedDataset> evals = {});

// Plain fine-tuning of the layers after `point`; earlier layers stay frozen.
TrainHistory finetune_after(NetworkModel& model, const LabeledDataset& ds,
                            const HookPoint& point, const OptimizerConfig& opt,
                            std::span<const NamedDataset> evals = {});

// A-ClArC fine-tuning: in every step a random subset_fraction of the batch is
// routed through the augmentive hook, and only layers after the hook point are
// updated.
TrainHistory finetune_subsequent(NetworkModel& model, const LabeledDataset& ds,
                                 const ClarcHook& hook, double subset_fraction,
                                 const OptimizerConfig& opt,
                                 std::span<const NamedDataset> evals = {});

std::vector<int> predict(const NetworkModel& model, const Tensor& x,
                         const ClarcHook* hook = nullptr);

double evaluate(const NetworkModel& model, const LabeledDataset& ds,
                const ClarcHook* hook = nullptr);

Tensor extract_features(const NetworkModel& model, const Tensor& x,
                        const HookPoint& point);
Tensor extract_features(const NetworkModel& model, const LabeledDataset& ds,
                        const HookPoint& point);

// Smallest distance of any ReLU input to zero and of any maxpool winner to the
// runner-up in its window, over a batch in eval mode.
double kink_margin(const NetworkModel& model, const Tensor& x);

// Central differences over every parameter against backprop for the mean
// cross-entropy in eval mode. Returns
//   max |g_bp - g_fd| / max(|g_bp|, |g_fd|, 1e-8).
double gradient_check(const NetworkModel& model, const Tensor& x,
                      std::span<const int> labels, double epsilon = 1e-5);

// Checkpoint layout (little endian):
//   "PCAVNN1\0" | u64 seed | u32 C, H, W | u32 layer count
//   | per layer: u32 type, u32 a, u32 b, f64 p
//   | per parametric layer: f64 weights..., f64 biases...
// type: 0 dense(a=in, b=out), 1 relu, 2 conv2d(a=in_ch, b=out_ch),
//       3 maxpool, 4 dropout(p), 5 flatten
void write_model(const NetworkModel& model, const std::filesystem::path& path);
NetworkModel read_model(const std::filesystem::path& path);

}  // namespace pcav
