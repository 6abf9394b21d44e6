#include "pcav/models.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "binary_io.hpp"

namespace pcav {

namespace {

constexpr std::string_view kModelMagic("PCAVNN1\0", 8);
constexpr std::size_t kEvalChunk = 256;

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

bool is_parametric(const Layer& layer) {
  return std::holds_alternative<Dense>(layer) ||
         std::holds_alternative<Conv2d>(layer);
}

void init_uniform(Vector& buf, std::size_t size, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  buf.resize(size);
  for (auto& v : buf) v = bound * (2.0 * rng.uniform() - 1.0);
}

// ---- per-layer forward ------------------------------------------------------

// Four interleaved partial sums; the order is fixed, so results do not depend
// on the instruction set.
inline double dot4(const double* a, const double* b, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

void dense_forward(const Dense& l, const Tensor& x, Tensor& y) {
  const std::size_t n = x.rows();
  for (std::size_t s = 0; s < n; ++s) {
    const double* in = x.row(s).data();
    double* out = y.row(s).data();
    for (std::size_t j = 0; j < l.out; ++j) {
      out[j] = dot4(l.weight.data() + j * l.in, in, l.in) + l.bias[j];
    }
  }
}

// Unrolls 3x3 patches: row (ic*9 + ky*3 + kx), column (oy*OW + ox).
void im2col(const double* in, std::size_t C, std::size_t H, std::size_t W,
            Vector& cols) {
  const std::size_t OH = H - 2, OW = W - 2, P = OH * OW;
  cols.resize(C * 9 * P);
  double* dst = cols.data();
  for (std::size_t ic = 0; ic < C; ++ic) {
    for (std::size_t ky = 0; ky < 3; ++ky) {
      for (std::size_t kx = 0; kx < 3; ++kx) {
        for (std::size_t oy = 0; oy < OH; ++oy) {
          const double* src = in + ic * H * W + (oy + ky) * W + kx;
          std::copy(src, src + OW, dst);
          dst += OW;
        }
      }
    }
  }
}

void conv_forward(const Conv2d& l, const ActShape& in_shape, const Tensor& x,
                  Tensor& y) {
  const std::size_t H = in_shape.h, W = in_shape.w;
  const std::size_t P = (H - 2) * (W - 2);
  const std::size_t R = l.in_ch * 9;
  const std::size_t n = x.rows();
  Vector cols;
  for (std::size_t s = 0; s < n; ++s) {
    im2col(x.row(s).data(), l.in_ch, H, W, cols);
    double* out = y.row(s).data();
    std::size_t oc = 0;
    for (; oc + 4 <= l.out_ch; oc += 4) {
      double* o0 = out + oc * P;
      double* o1 = o0 + P;
      double* o2 = o1 + P;
      double* o3 = o2 + P;
      std::fill(o0, o0 + P, l.bias[oc]);
      std::fill(o1, o1 + P, l.bias[oc + 1]);
      std::fill(o2, o2 + P, l.bias[oc + 2]);
      std::fill(o3, o3 + P, l.bias[oc + 3]);
      const double* k = l.weight.data() + oc * R;
      for (std::size_t r = 0; r < R; ++r) {
        const double w0 = k[r], w1 = k[R + r], w2 = k[2 * R + r], w3 = k[3 * R + r];
        const double* c = cols.data() + r * P;
        for (std::size_t p = 0; p < P; ++p) {
          const double cp = c[p];
          o0[p] += w0 * cp;
          o1[p] += w1 * cp;
          o2[p] += w2 * cp;
          o3[p] += w3 * cp;
        }
      }
    }
    for (; oc < l.out_ch; ++oc) {
      double* plane = out + oc * P;
      std::fill(plane, plane + P, l.bias[oc]);
      const double* k = l.weight.data() + oc * R;
      for (std::size_t r = 0; r < R; ++r) {
        const double wk = k[r];
        const double* c = cols.data() + r * P;
        for (std::size_t p = 0; p < P; ++p) plane[p] += wk * c[p];
      }
    }
  }
}

void pool_forward(const ActShape& in_shape, const Tensor& x, Tensor& y,
                  std::vector<std::uint32_t>& argmax_out) {
  const std::size_t C = in_shape.c, H = in_shape.h, W = in_shape.w;
  const std::size_t OH = H / 2, OW = W / 2;
  const std::size_t n = x.rows();
  argmax_out.resize(n * C * OH * OW);
  for (std::size_t s = 0; s < n; ++s) {
    const double* in = x.row(s).data();
    double* out = y.row(s).data();
    std::uint32_t* am = argmax_out.data() + s * C * OH * OW;
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t oy = 0; oy < OH; ++oy) {
        for (std::size_t ox = 0; ox < OW; ++ox) {
          std::size_t best = c * H * W + (2 * oy) * W + 2 * ox;
          for (std::size_t dy = 0; dy < 2; ++dy) {
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t idx = c * H * W + (2 * oy + dy) * W + 2 * ox + dx;
              if (in[idx] > in[best]) best = idx;
            }
          }
          const std::size_t o = c * OH * OW + oy * OW + ox;
          out[o] = in[best];
          am[o] = static_cast<std::uint32_t>(best);
        }
      }
    }
  }
}

// ---- per-layer backward -----------------------------------------------------

void dense_backward(const Dense& l, const Tensor& x, const Tensor& g,
                    Vector& gw, Vector& gb, Tensor* gx) {
  const std::size_t n = x.rows();
  for (std::size_t s = 0; s < n; ++s) {
    const double* in = x.row(s).data();
    const double* go = g.row(s).data();
    for (std::size_t j = 0; j < l.out; ++j) {
      const double gj = go[j];
      gb[j] += gj;
      double* w = gw.data() + j * l.in;
      for (std::size_t i = 0; i < l.in; ++i) w[i] += gj * in[i];
    }
    if (gx) {
      double* gi = gx->row(s).data();
      std::fill(gi, gi + l.in, 0.0);
      for (std::size_t j = 0; j < l.out; ++j) {
        const double gj = go[j];
        const double* w = l.weight.data() + j * l.in;
        for (std::size_t i = 0; i < l.in; ++i) gi[i] += gj * w[i];
      }
    }
  }
}

void conv_backward(const Conv2d& l, const ActShape& in_shape, const Tensor& x,
                   const Tensor& g, Vector& gw, Vector& gb, Tensor* gx) {
  const std::size_t H = in_shape.h, W = in_shape.w;
  const std::size_t OH = H - 2, OW = W - 2, P = OH * OW;
  const std::size_t R = l.in_ch * 9;
  const std::size_t n = x.rows();
  Vector cols, gcols;
  for (std::size_t s = 0; s < n; ++s) {
    im2col(x.row(s).data(), l.in_ch, H, W, cols);
    const double* go = g.row(s).data();
    if (gx) gcols.assign(R * P, 0.0);
    for (std::size_t oc = 0; oc < l.out_ch; ++oc) {
      const double* gplane = go + oc * P;
      double bsum = 0.0;
      for (std::size_t p = 0; p < P; ++p) bsum += gplane[p];
      gb[oc] += bsum;
      double* gk = gw.data() + oc * R;
      for (std::size_t r = 0; r < R; ++r) {
        gk[r] += dot4(gplane, cols.data() + r * P, P);
      }
    }
    if (!gx) continue;
    for (std::size_t r = 0; r < R; ++r) {
      double* gc = gcols.data() + r * P;
      std::size_t oc = 0;
      for (; oc + 4 <= l.out_ch; oc += 4) {
        const double w0 = l.weight[oc * R + r], w1 = l.weight[(oc + 1) * R + r];
        const double w2 = l.weight[(oc + 2) * R + r], w3 = l.weight[(oc + 3) * R + r];
        const double* g0 = go + oc * P;
        const double* g1 = g0 + P;
        const double* g2 = g1 + P;
        const double* g3 = g2 + P;
        for (std::size_t p = 0; p < P; ++p) {
          gc[p] += (w0 * g0[p] + w1 * g1[p]) + (w2 * g2[p] + w3 * g3[p]);
        }
      }
      for (; oc < l.out_ch; ++oc) {
        const double wk = l.weight[oc * R + r];
        const double* g0 = go + oc * P;
        for (std::size_t p = 0; p < P; ++p) gc[p] += wk * g0[p];
      }
    }
    double* gi = gx->row(s).data();
    std::fill(gi, gi + l.in_ch * H * W, 0.0);
    const double* src = gcols.data();
    for (std::size_t ic = 0; ic < l.in_ch; ++ic) {
      for (std::size_t ky = 0; ky < 3; ++ky) {
        for (std::size_t kx = 0; kx < 3; ++kx) {
          for (std::size_t oy = 0; oy < OH; ++oy) {
            double* dst = gi + ic * H * W + (oy + ky) * W + kx;
            for (std::size_t ox = 0; ox < OW; ++ox) dst[ox] += src[ox];
            src += OW;
          }
        }
      }
    }
  }
}

// ---- optimizer --------------------------------------------------------------

struct OptimizerState {
  std::vector<Vector> square_avg;
  std::vector<Vector> acc_delta;
};

void optimizer_step(const OptimizerConfig& opt, double lr, NetworkModel& model,
                    const Gradients& grads, std::size_t first_layer,
                    OptimizerState& state) {
  auto& layers = model.layers();
  if (state.square_avg.empty()) {
    state.square_avg.resize(2 * layers.size());
    state.acc_delta.resize(2 * layers.size());
  }
  auto update = [&](Vector& param, const Vector& grad, std::size_t slot) {
    if (opt.kind == OptimizerConfig::Kind::sgd) {
      for (std::size_t j = 0; j < param.size(); ++j) param[j] -= lr * grad[j];
      return;
    }
    Vector& sq = state.square_avg[slot];
    Vector& ad = state.acc_delta[slot];
    if (sq.empty()) {
      sq.assign(param.size(), 0.0);
      ad.assign(param.size(), 0.0);
    }
    for (std::size_t j = 0; j < param.size(); ++j) {
      const double gj = grad[j];
      sq[j] = opt.rho * sq[j] + (1.0 - opt.rho) * gj * gj;
      const double delta =
          std::sqrt(ad[j] + opt.eps) / std::sqrt(sq[j] + opt.eps) * gj;
      ad[j] = opt.rho * ad[j] + (1.0 - opt.rho) * delta * delta;
      param[j] -= lr * delta;
    }
  };
  for (std::size_t i = first_layer; i < layers.size(); ++i) {
    std::visit(Overloaded{
                   [&](Dense& l) {
                     update(l.weight, grads.weight[i], 2 * i);
                     update(l.bias, grads.bias[i], 2 * i + 1);
                   },
                   [&](Conv2d& l) {
                     update(l.weight, grads.weight[i], 2 * i);
                     update(l.bias, grads.bias[i], 2 * i + 1);
                   },
                   [](auto&) {},
               },
               layers[i]);
  }
}

// Activations at `boundary` for every row of x, in eval mode.
Tensor forward_range_batched(const NetworkModel& model, const Tensor& x,
                             std::size_t boundary);

struct TrainPlan {
  std::size_t first_trainable = 0;
  const ClarcHook* augment = nullptr;
  double subset_fraction = 0.0;
};

TrainHistory train_impl(NetworkModel& model, const LabeledDataset& ds,
                        const OptimizerConfig& opt,
                        std::span<const NamedDataset> evals,
                        const TrainPlan& plan) {
  opt.validate();
  ds.validate();
  if (ds.size() == 0) throw Error("training set is empty");
  if (ds.shape.size() != model.input_shape().size()) {
    throw Error("dataset samples do not match the model input");
  }
  const Rng base(opt.seed);
  Rng order_rng = base.fork(1);
  Rng dropout_rng = base.fork(2);
  Rng augment_rng = base.fork(3);

  const std::size_t n = ds.size();
  const std::size_t L = model.layers().size();
  std::vector<std::size_t> order(n);
  OptimizerState state;
  TrainHistory history;
  for (const auto& e : evals) history.eval_names.push_back(e.name);
  history.eval_accuracy.resize(evals.size());

  std::size_t hook_boundary = 0;
  if (plan.augment) hook_boundary = model.boundary(plan.augment->point);

  // Frozen layers without dropout map every sample to fixed features, so they
  // are run once up front.
  std::size_t from = 0;
  Tensor prefix;
  const auto& layers = model.layers();
  if (plan.first_trainable > 0 &&
      std::none_of(layers.begin(), layers.begin() + plan.first_trainable,
                   [](const Layer& l) { return std::holds_alternative<Dropout>(l); })) {
    from = plan.first_trainable;
    prefix = forward_range_batched(model, ds.samples, from);
  }
  const Tensor& source = from > 0 ? prefix : ds.samples;

  double lr = opt.lr;
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    order_rng.shuffle(std::span(order));
    double loss_sum = 0.0;
    std::size_t correct = 0;
    std::size_t step = 0;
    for (std::size_t start = 0; start < n; start += opt.batch_size, ++step) {
      const std::size_t end = std::min(n, start + opt.batch_size);
      std::span<const std::size_t> idx(order.data() + start, end - start);
      Tensor xb = source.select_rows(idx);
      std::vector<int> yb;
      yb.reserve(idx.size());
      for (auto i : idx) yb.push_back(ds.y_c[i]);

      FeatureEdit edit;
      const FeatureEdit* edit_ptr = nullptr;
      if (plan.augment && plan.subset_fraction > 0.0) {
        const std::size_t b = idx.size();
        const auto m = static_cast<std::size_t>(
            std::llround(plan.subset_fraction * static_cast<double>(b)));
        std::vector<std::size_t> rows(b);
        std::iota(rows.begin(), rows.end(), std::size_t{0});
        for (std::size_t k = 0; k < m; ++k) {
          std::swap(rows[k], rows[k + augment_rng.below(b - k)]);
        }
        rows.resize(m);
        edit.boundary = hook_boundary;
        edit.apply = [&plan, rows = std::move(rows)](Tensor& t) {
          apply_hook_rows(t, *plan.augment, rows);
        };
        edit_ptr = &edit;
      }

      ForwardCache cache = forward_range(model, xb, from, L, Mode::train,
                                         edit_ptr, &dropout_rng);
      Tensor grad;
      const double loss = softmax_cross_entropy(cache.logits(), yb, &grad);
      if (!std::isfinite(loss)) {
        throw Error("training diverged: loss is " + std::to_string(loss) +
                    " at epoch " + std::to_string(epoch) + ", step " +
                    std::to_string(step));
      }
      loss_sum += loss * static_cast<double>(idx.size());
      for (std::size_t s = 0; s < idx.size(); ++s) {
        if (argmax(cache.logits().row(s)) == yb[s]) ++correct;
      }
      Gradients grads = zero_gradients(model);
      backward(model, cache, grad, plan.first_trainable, grads);
      optimizer_step(opt, lr, model, grads, plan.first_trainable, state);
    }
    history.loss.push_back(loss_sum / static_cast<double>(n));
    history.accuracy.push_back(static_cast<double>(correct) /
                               static_cast<double>(n));
    for (std::size_t e = 0; e < evals.size(); ++e) {
      history.eval_accuracy[e].push_back(evaluate(model, *evals[e].data));
    }
    lr *= opt.per_epoch_lr_factor;
  }
  return history;
}

std::uint32_t layer_code(const Layer& layer) {
  return static_cast<std::uint32_t>(layer.index());
}

}  // namespace

// ---- NetworkModel -----------------------------------------------------------

std::string layer_name(const Layer& layer) {
  return std::visit(
      Overloaded{
          [](const Dense& l) {
            return "dense(" + std::to_string(l.in) + "," + std::to_string(l.out) + ")";
          },
          [](const Relu&) { return std::string("relu"); },
          [](const Conv2d& l) {
            return "conv2d(" + std::to_string(l.in_ch) + "," +
                   std::to_string(l.out_ch) + ",3x3)";
          },
          [](const MaxPool2&) { return std::string("maxpool(2x2)"); },
          [](const Dropout& l) { return "dropout(" + std::to_string(l.p) + ")"; },
          [](const Flatten&) { return std::string("flatten"); },
      },
      layer);
}

NetworkModel::NetworkModel(ImageShape input, std::vector<Layer> layers,
                           std::uint64_t seed)
    : input_(input), layers_(std::move(layers)), seed_(seed) {
  infer_shapes();
  Rng rng(seed);
  for (auto& layer : layers_) {
    std::visit(Overloaded{
                   [&](Dense& l) {
                     init_uniform(l.weight, l.in * l.out, l.in, rng);
                     init_uniform(l.bias, l.out, l.in, rng);
                   },
                   [&](Conv2d& l) {
                     const std::size_t fan_in = l.in_ch * 9;
                     init_uniform(l.weight, l.out_ch * fan_in, fan_in, rng);
                     init_uniform(l.bias, l.out_ch, fan_in, rng);
                   },
                   [](auto&) {},
               },
               layer);
  }
}

void NetworkModel::infer_shapes() {
  if (input_.size() == 0) throw Error("model input shape is empty");
  shapes_.clear();
  ActShape s{input_.channels, input_.height, input_.width};
  shapes_.push_back(s);
  for (const auto& layer : layers_) {
    std::visit(Overloaded{
                   [&](const Dense& l) {
                     if (s.size() != l.in) {
                       throw Error("dense layer expects " + std::to_string(l.in) +
                                   " inputs, got " + std::to_string(s.size()));
                     }
                     s = {l.out, 1, 1};
                   },
                   [&](const Conv2d& l) {
                     if (s.c != l.in_ch || s.h < 3 || s.w < 3) {
                       throw Error("conv2d input shape incompatible");
                     }
                     s = {l.out_ch, s.h - 2, s.w - 2};
                   },
                   [&](const MaxPool2&) {
                     if (s.h < 2 || s.w < 2) throw Error("maxpool input too small");
                     s = {s.c, s.h / 2, s.w / 2};
                   },
                   [&](const Dropout& l) {
                     if (!(l.p >= 0.0 && l.p < 1.0)) {
                       throw Error("dropout rate must lie in [0, 1)");
                     }
                   },
                   [&](const Flatten&) { s = {s.size(), 1, 1}; },
                   [](const Relu&) {},
               },
               layer);
    shapes_.push_back(s);
  }
  if (layers_.empty() || shapes_.back().size() < 2) {
    throw Error("model must end in at least two logits");
  }
}

NetworkModel NetworkModel::conv_net(ImageShape input, std::size_t classes,
                                    std::uint64_t seed, ConvNetOptions o) {
  if (input.height < 6 || input.width < 6) throw Error("image too small for conv net");
  const std::size_t ph = (input.height - 4) / 2, pw = (input.width - 4) / 2;
  std::vector<Layer> layers;
  layers.emplace_back(Conv2d{input.channels, o.conv1_channels, {}, {}});
  layers.emplace_back(Relu{});
  layers.emplace_back(Conv2d{o.conv1_channels, o.conv2_channels, {}, {}});
  layers.emplace_back(Relu{});
  layers.emplace_back(MaxPool2{});
  layers.emplace_back(Dropout{o.dropout_after_pool});
  layers.emplace_back(Flatten{});
  layers.emplace_back(Dense{o.conv2_channels * ph * pw, o.hidden, {}, {}});
  layers.emplace_back(Relu{});
  layers.emplace_back(Dropout{o.dropout_after_hidden});
  layers.emplace_back(Dense{o.hidden, classes, {}, {}});
  return NetworkModel(input, std::move(layers), seed);
}

NetworkModel NetworkModel::dense_net(ImageShape input, std::size_t classes,
                                     std::uint64_t seed,
                                     std::vector<std::size_t> hidden) {
  std::vector<Layer> layers;
  layers.emplace_back(Flatten{});
  std::size_t width = input.size();
  for (auto h : hidden) {
    layers.emplace_back(Dense{width, h, {}, {}});
    layers.emplace_back(Relu{});
    width = h;
  }
  layers.emplace_back(Dense{width, classes, {}, {}});
  return NetworkModel(input, std::move(layers), seed);
}

std::size_t NetworkModel::boundary(const HookPoint& point) const {
  if (point.is_input()) return 0;
  std::size_t seen = 0;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (!is_parametric(layers_[i])) continue;
    if (++seen == point.layer) {
      if (i + 1 < layers_.size() && std::holds_alternative<Relu>(layers_[i + 1])) {
        return i + 2;
      }
      return i + 1;
    }
  }
  throw Error("invalid hook point " + point.to_string() + ": model has " +
              std::to_string(seen) + " parametric layers");
}

std::size_t NetworkModel::feature_size(const HookPoint& point) const {
  return shapes_[boundary(point)].size();
}

std::size_t NetworkModel::parametric_layer_count() const {
  return static_cast<std::size_t>(
      std::count_if(layers_.begin(), layers_.end(), is_parametric));
}

std::vector<std::span<double>> NetworkModel::parameter_blocks() {
  std::vector<std::span<double>> out;
  for (auto& layer : layers_) {
    if (auto* d = std::get_if<Dense>(&layer)) {
      out.emplace_back(d->weight);
      out.emplace_back(d->bias);
    } else if (auto* c = std::get_if<Conv2d>(&layer)) {
      out.emplace_back(c->weight);
      out.emplace_back(c->bias);
    }
  }
  return out;
}

std::vector<std::span<const double>> NetworkModel::parameter_blocks() const {
  std::vector<std::span<const double>> out;
  for (auto& block : const_cast<NetworkModel*>(this)->parameter_blocks()) {
    out.emplace_back(block);
  }
  return out;
}

std::size_t NetworkModel::parameter_count() const {
  std::size_t n = 0;
  for (auto& b : parameter_blocks()) n += b.size();
  return n;
}

bool operator==(const NetworkModel& a, const NetworkModel& b) {
  if (!(a.input_ == b.input_) || a.seed_ != b.seed_ ||
      a.layers_.size() != b.layers_.size()) {
    return false;
  }
  for (std::size_t i = 0; i < a.layers_.size(); ++i) {
    if (layer_name(a.layers_[i]) != layer_name(b.layers_[i])) return false;
  }
  auto pa = a.parameter_blocks(), pb = b.parameter_blocks();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (!std::equal(pa[i].begin(), pa[i].end(), pb[i].begin(), pb[i].end())) {
      return false;
    }
  }
  return true;
}

// ---- forward / backward -----------------------------------------------------

ForwardCache forward_range(const NetworkModel& model, const Tensor& x,
                           std::size_t from, std::size_t to, Mode mode,
                           const FeatureEdit* edit, Rng* dropout_rng) {
  const auto& layers = model.layers();
  const auto& shapes = model.shapes();
  if (from > to || to > layers.size()) throw Error("invalid layer range");
  if (x.cols() != shapes[from].size()) {
    throw Error("input has " + std::to_string(x.cols()) + " features, expected " +
                std::to_string(shapes[from].size()));
  }
  if (mode == Mode::train && !dropout_rng) {
    throw Error("train mode needs a dropout generator");
  }
  const std::size_t n = x.rows();
  ForwardCache cache;
  cache.acts.resize(to + 1);
  cache.dropout_scale.resize(layers.size());
  cache.pool_argmax.resize(layers.size());
  cache.acts[from] = x.reshaped({n, shapes[from].size()});
  if (edit && edit->boundary == from) edit->apply(cache.acts[from]);

  for (std::size_t i = from; i < to; ++i) {
    const Tensor& in = cache.acts[i];
    Tensor out = Tensor::matrix(n, shapes[i + 1].size());
    std::visit(
        Overloaded{
            [&](const Dense& l) { dense_forward(l, in, out); },
            [&](const Conv2d& l) { conv_forward(l, shapes[i], in, out); },
            [&](const MaxPool2&) {
              pool_forward(shapes[i], in, out, cache.pool_argmax[i]);
            },
            [&](const Relu&) {
              auto src = in.data();
              auto dst = out.data();
              for (std::size_t j = 0; j < src.size(); ++j) {
                dst[j] = src[j] > 0.0 ? src[j] : 0.0;
              }
            },
            [&](const Dropout& l) {
              if (mode == Mode::eval || l.p == 0.0) {
                out = in;
                return;
              }
              Vector& scale = cache.dropout_scale[i];
              scale.resize(in.size());
              const double keep = 1.0 / (1.0 - l.p);
              auto src = in.data();
              auto dst = out.data();
              for (std::size_t j = 0; j < src.size(); ++j) {
                scale[j] = dropout_rng->uniform() < l.p ? 0.0 : keep;
                dst[j] = src[j] * scale[j];
              }
            },
            [&](const Flatten&) { out = in; },
        },
        layers[i]);
    cache.acts[i + 1] = std::move(out);
    if (edit && edit->boundary == i + 1) edit->apply(cache.acts[i + 1]);
  }
  return cache;
}

ForwardCache forward(const NetworkModel& model, const Tensor& x,
                     const ClarcHook* hook, Mode mode, Rng* dropout_rng) {
  if (!hook) {
    return forward_range(model, x, 0, model.layers().size(), mode, nullptr,
                         dropout_rng);
  }
  hook->validate();
  FeatureEdit edit{model.boundary(hook->point),
                   [hook](Tensor& t) { t = apply_hook_batch(t, *hook); }};
  return forward_range(model, x, 0, model.layers().size(), mode, &edit,
                       dropout_rng);
}

Gradients zero_gradients(const NetworkModel& model) {
  Gradients g;
  for (const auto& layer : model.layers()) {
    if (const auto* d = std::get_if<Dense>(&layer)) {
      g.weight.emplace_back(d->weight.size(), 0.0);
      g.bias.emplace_back(d->bias.size(), 0.0);
    } else if (const auto* c = std::get_if<Conv2d>(&layer)) {
      g.weight.emplace_back(c->weight.size(), 0.0);
      g.bias.emplace_back(c->bias.size(), 0.0);
    } else {
      g.weight.emplace_back();
      g.bias.emplace_back();
    }
  }
  return g;
}

Vector softmax(std::span<const double> logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  Vector p(logits.size());
  double z = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    p[k] = std::exp(logits[k] - m);
    z += p[k];
  }
  for (auto& v : p) v /= z;
  return p;
}

int argmax(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < values.size(); ++k) {
    if (values[k] > values[best]) best = k;
  }
  return static_cast<int>(best);
}

double softmax_cross_entropy(const Tensor& logits, std::span<const int> labels,
                             Tensor* grad) {
  const std::size_t n = logits.rows(), k = logits.cols();
  if (labels.size() != n) throw Error("label count does not match batch");
  if (grad) *grad = Tensor::matrix(n, k);
  double total = 0.0;
  for (std::size_t s = 0; s < n; ++s) {
    auto z = logits.row(s);
    const double m = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (double v : z) sum += std::exp(v - m);
    const double lse = m + std::log(sum);
    const auto y = static_cast<std::size_t>(labels[s]);
    if (y >= k) throw Error("label out of range");
    total += lse - z[y];
    if (grad) {
      auto g = grad->row(s);
      for (std::size_t c = 0; c < k; ++c) {
        g[c] = std::exp(z[c] - lse) / static_cast<double>(n);
      }
      g[y] -= 1.0 / static_cast<double>(n);
    }
  }
  return total / static_cast<double>(n);
}

void backward(const NetworkModel& model, const ForwardCache& cache,
              const Tensor& grad_logits, std::size_t stop_layer,
              Gradients& grads) {
  const auto& layers = model.layers();
  const auto& shapes = model.shapes();
  Tensor g = grad_logits;
  for (std::size_t i = layers.size(); i-- > stop_layer;) {
    const Tensor& in = cache.acts[i];
    if (in.empty() && in.rows() == 0) throw Error("forward cache does not reach layer");
    const bool need_input_grad = i > stop_layer;
    Tensor gx;
    if (need_input_grad) gx = Tensor::matrix(in.rows(), in.cols());
    std::visit(
        Overloaded{
            [&](const Dense& l) {
              dense_backward(l, in, g, grads.weight[i], grads.bias[i],
                             need_input_grad ? &gx : nullptr);
            },
            [&](const Conv2d& l) {
              conv_backward(l, shapes[i], in, g, grads.weight[i], grads.bias[i],
                            need_input_grad ? &gx : nullptr);
            },
            [&](const MaxPool2&) {
              if (!need_input_grad) return;
              const auto& am = cache.pool_argmax[i];
              const std::size_t per = shapes[i + 1].size();
              for (std::size_t s = 0; s < in.rows(); ++s) {
                auto go = g.row(s);
                auto gi = gx.row(s);
                for (std::size_t o = 0; o < per; ++o) gi[am[s * per + o]] += go[o];
              }
            },
            [&](const Relu&) {
              if (!need_input_grad) return;
              auto src = in.data();
              auto go = g.data();
              auto gi = gx.data();
              for (std::size_t j = 0; j < src.size(); ++j) {
                gi[j] = src[j] > 0.0 ? go[j] : 0.0;
              }
            },
            [&](const Dropout&) {
              if (!need_input_grad) return;
              const Vector& scale = cache.dropout_scale[i];
              auto go = g.data();
              auto gi = gx.data();
              if (scale.empty()) {
                std::copy(go.begin(), go.end(), gi.begin());
              } else {
                for (std::size_t j = 0; j < go.size(); ++j) gi[j] = go[j] * scale[j];
              }
            },
            [&](const Flatten&) {
              if (!need_input_grad) return;
              std::copy(g.data().begin(), g.data().end(), gx.data().begin());
            },
        },
        layers[i]);
    if (!need_input_grad) break;
    g = std::move(gx);
  }
}

// ---- training -----------------------------------------------------------------

void OptimizerConfig::validate() const {
  if (!(lr > 0.0)) throw Error("learning rate must be positive");
  if (!(per_epoch_lr_factor > 0.0 && per_epoch_lr_factor <= 1.0)) {
    throw Error("per-epoch lr factor must lie in (0, 1]");
  }
  if (!(rho > 0.0 && rho < 1.0) || !(eps > 0.0)) throw Error("invalid AdaDelta constants");
  if (batch_size == 0) throw Error("batch size must be positive");
}

std::string to_string(OptimizerConfig::Kind kind) {
  return kind == OptimizerConfig::Kind::sgd ? "sgd" : "adadelta";
}

OptimizerConfig::Kind parse_optimizer_kind(const std::string& text) {
  if (text == "sgd") return OptimizerConfig::Kind::sgd;
  if (text == "adadelta") return OptimizerConfig::Kind::adadelta;
  throw Error("unknown optimizer: " + text);
}

TrainHistory train(NetworkModel& model, const LabeledDataset& ds,
                   const OptimizerConfig& opt,
                   std::span<const NamedDataset> evals) {
  return train_impl(model, ds, opt, evals, TrainPlan{});
}

TrainHistory finetune_after(NetworkModel& model, const LabeledDataset& ds,
                            const HookPoint& point, const OptimizerConfig& opt,
                            std::span<const NamedDataset> evals) {
  TrainPlan plan{model.boundary(point), nullptr, 0.0};
  return train_impl(model, ds, opt, evals, plan);
}

TrainHistory finetune_subsequent(NetworkModel& model, const LabeledDataset& ds,
                                 const ClarcHook& hook, double subset_fraction,
                                 const OptimizerConfig& opt,
                                 std::span<const NamedDataset> evals) {
  if (hook.mode != ClarcMode::augmentive) {
    throw Error("fine-tuning needs an augmentive hook");
  }
  hook.validate();
  if (!(subset_fraction >= 0.0 && subset_fraction <= 1.0)) {
    throw Error("subset fraction must lie in [0, 1]");
  }
  const std::size_t b = model.boundary(hook.point);
  if (hook.cav.dim() != model.shapes()[b].size()) {
    throw Error("concept dimension does not match features at " +
                hook.point.to_string());
  }
  TrainPlan plan{b, &hook, subset_fraction};
  return train_impl(model, ds, opt, evals, plan);
}

std::vector<int> predict(const NetworkModel& model, const Tensor& x,
                         const ClarcHook* hook) {
  std::vector<int> out;
  out.reserve(x.rows());
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < x.rows(); start += kEvalChunk) {
    const std::size_t end = std::min(x.rows(), start + kEvalChunk);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    ForwardCache cache = forward(model, x.select_rows(idx), hook, Mode::eval);
    for (std::size_t s = 0; s < idx.size(); ++s) {
      out.push_back(argmax(cache.logits().row(s)));
    }
  }
  return out;
}

double evaluate(const NetworkModel& model, const LabeledDataset& ds,
                const ClarcHook* hook) {
  if (ds.size() == 0) return 0.0;
  const auto pred = predict(model, ds.samples, hook);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == ds.y_c[i];
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

Tensor extract_features(const NetworkModel& model, const Tensor& x,
                        const HookPoint& point) {
  return forward_range_batched(model, x, model.boundary(point));
}

namespace {

Tensor forward_range_batched(const NetworkModel& model, const Tensor& x,
                             std::size_t b) {
  const std::size_t d = model.shapes()[b].size();
  Tensor out = Tensor::matrix(x.rows(), d);
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < x.rows(); start += kEvalChunk) {
    const std::size_t end = std::min(x.rows(), start + kEvalChunk);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    ForwardCache cache = forward_range(model, x.select_rows(idx), 0, b, Mode::eval);
    const auto& f = cache.acts[b];
    std::copy(f.data().begin(), f.data().end(), out.row(start).begin());
  }
  return out;
}

}  // namespace

Tensor extract_features(const NetworkModel& model, const LabeledDataset& ds,
                        const HookPoint& point) {
  return extract_features(model, ds.samples, point);
}

double kink_margin(const NetworkModel& model, const Tensor& x) {
  const auto& layers = model.layers();
  const auto& shapes = model.shapes();
  ForwardCache cache = forward(model, x, nullptr, Mode::eval);
  double margin = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Tensor& in = cache.acts[i];
    if (std::holds_alternative<Relu>(layers[i])) {
      for (double v : in.data()) margin = std::min(margin, std::abs(v));
    } else if (std::holds_alternative<MaxPool2>(layers[i])) {
      const bool after_relu = i > 0 && std::holds_alternative<Relu>(layers[i - 1]);
      const ActShape s = shapes[i];
      for (std::size_t r = 0; r < in.rows(); ++r) {
        auto v = in.row(r);
        for (std::size_t c = 0; c < s.c; ++c) {
          for (std::size_t oy = 0; oy < s.h / 2; ++oy) {
            for (std::size_t ox = 0; ox < s.w / 2; ++ox) {
              std::array<double, 4> w{};
              std::size_t k = 0;
              for (std::size_t dy = 0; dy < 2; ++dy) {
                for (std::size_t dx = 0; dx < 2; ++dx) {
                  w[k++] = v[c * s.h * s.w + (2 * oy + dy) * s.w + 2 * ox + dx];
                }
              }
              std::sort(w.begin(), w.end());
              // A ReLU pins non-positive windows at exactly zero.
              if (after_relu && w[3] <= 0.0) continue;
              margin = std::min(margin, w[3] - w[2]);
            }
          }
        }
      }
    }
  }
  return margin;
}

double gradient_check(const NetworkModel& model, const Tensor& x,
                      std::span<const int> labels, double epsilon) {
  const std::size_t L = model.layers().size();
  ForwardCache base = forward(model, x, nullptr, Mode::eval);
  Tensor grad_logits;
  softmax_cross_entropy(base.logits(), labels, &grad_logits);
  Gradients grads = zero_gradients(model);
  backward(model, base, grad_logits, 0, grads);

  NetworkModel probe = model;
  double worst = 0.0;
  auto loss_from = [&](std::size_t layer) {
    ForwardCache c = forward_range(probe, base.acts[layer], layer, L, Mode::eval);
    return softmax_cross_entropy(c.logits(), labels);
  };
  for (std::size_t i = 0; i < L; ++i) {
    Vector* w = nullptr;
    Vector* b = nullptr;
    if (auto* d = std::get_if<Dense>(&probe.layers()[i])) {
      w = &d->weight;
      b = &d->bias;
    } else if (auto* c = std::get_if<Conv2d>(&probe.layers()[i])) {
      w = &c->weight;
      b = &c->bias;
    } else {
      continue;
    }
    auto check_block = [&](Vector& params, const Vector& analytic) {
      for (std::size_t j = 0; j < params.size(); ++j) {
        const double saved = params[j];
        params[j] = saved + epsilon;
        const double up = loss_from(i);
        params[j] = saved - epsilon;
        const double down = loss_from(i);
        params[j] = saved;
        const double fd = (up - down) / (2.0 * epsilon);
        const double bp = analytic[j];
        const double denom = std::max({std::abs(bp), std::abs(fd), 1e-8});
        worst = std::max(worst, std::abs(bp - fd) / denom);
      }
    };
    check_block(*w, grads.weight[i]);
    check_block(*b, grads.bias[i]);
  }
  return worst;
}

// ---- checkpoints ------------------------------------------------------------

void write_model(const NetworkModel& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  binary::put_magic(out, kModelMagic);
  binary::put_le<std::uint64_t>(out, model.seed());
  binary::put_u32(out, model.input_shape().channels);
  binary::put_u32(out, model.input_shape().height);
  binary::put_u32(out, model.input_shape().width);
  binary::put_u32(out, model.layers().size());
  for (const auto& layer : model.layers()) {
    std::uint64_t a = 0, b = 0;
    double p = 0.0;
    if (const auto* d = std::get_if<Dense>(&layer)) {
      a = d->in;
      b = d->out;
    } else if (const auto* c = std::get_if<Conv2d>(&layer)) {
      a = c->in_ch;
      b = c->out_ch;
    } else if (const auto* dr = std::get_if<Dropout>(&layer)) {
      p = dr->p;
    }
    binary::put_u32(out, layer_code(layer));
    binary::put_u32(out, a);
    binary::put_u32(out, b);
    binary::put_f64(out, p);
  }
  for (const auto& block : model.parameter_blocks()) {
    for (double v : block) binary::put_f64(out, v);
  }
  if (!out) throw Error("write failed: " + path.string());
}

NetworkModel read_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  binary::expect_magic(in, kModelMagic);
  const auto seed = binary::get_le<std::uint64_t>(in);
  ImageShape shape;
  shape.channels = binary::get_u32(in);
  shape.height = binary::get_u32(in);
  shape.width = binary::get_u32(in);
  const std::size_t count = binary::get_u32(in);
  std::vector<Layer> layers;
  for (std::size_t i = 0; i < count; ++i) {
    const auto type = binary::get_u32(in);
    const std::size_t a = binary::get_u32(in);
    const std::size_t b = binary::get_u32(in);
    const double p = binary::get_f64(in);
    switch (type) {
      case 0: layers.emplace_back(Dense{a, b, {}, {}}); break;
      case 1: layers.emplace_back(Relu{}); break;
      case 2: layers.emplace_back(Conv2d{a, b, {}, {}}); break;
      case 3: layers.emplace_back(MaxPool2{}); break;
      case 4: layers.emplace_back(Dropout{p}); break;
      case 5: layers.emplace_back(Flatten{}); break;
      default: throw Error("unknown layer type " + std::to_string(type));
    }
  }
  NetworkModel model(shape, std::move(layers), seed);
  for (auto& block : model.parameter_blocks()) {
    for (auto& v : block) v = binary::get_f64(in);
  }
  return model;
}

}  // namespace pcav
