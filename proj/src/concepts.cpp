#include "pcav/concepts.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "pcav/datasets.hpp"
#include "pcav/models.hpp"

namespace pcav {

// ---- concept_vector.hpp -------------------------------------------------------

std::string HookPoint::to_string() const {
  return is_input() ? "input" : "layer" + std::to_string(layer);
}

HookPoint HookPoint::parse(const std::string& text) {
  if (text == "input") return input();
  auto parse_index = [&](const std::string& digits) -> HookPoint {
    if (digits.empty() ||
        !std::all_of(digits.begin(), digits.end(), [](unsigned char c) { return std::isdigit(c); })) {
      throw Error("bad hook point: " + text);
    }
    const auto k = static_cast<std::size_t>(std::stoul(digits));
    if (k == 0) throw Error("layer hooks count from 1: " + text);
    return after_layer(k);
  };
  if (text.rfind("layer", 0) == 0) return parse_index(text.substr(5));
  if (text.rfind("after_layer(", 0) == 0 && text.back() == ')') {
    return parse_index(text.substr(12, text.size() - 13));
  }
  throw Error("bad hook point: " + text);
}

std::string to_string(CavKind kind) {
  return kind == CavKind::filter ? "filter" : "pattern";
}

std::string to_string(LabelSource source) {
  return source == LabelSource::ground_truth ? "ground_truth" : "predicted";
}

CavKind parse_cav_kind(const std::string& text) {
  if (text == "filter") return CavKind::filter;
  if (text == "pattern") return CavKind::pattern;
  throw Error("unknown CAV kind: " + text);
}

LabelSource parse_label_source(const std::string& text) {
  if (text == "ground_truth" || text == "gt") return LabelSource::ground_truth;
  if (text == "predicted") return LabelSource::predicted;
  throw Error("unknown label source: " + text);
}

void ConceptVector::validate() const {
  if (v.empty()) throw Error("empty concept vector");
  if (raw.size() != v.size() || z_plus.size() != v.size() ||
      z_minus.size() != v.size()) {
    throw Error("concept vector fields disagree in dimension");
  }
  if (std::abs(norm(v) - 1.0) > 1e-9) throw Error("concept direction is not unit norm");
}

// ---- helpers ----------------------------------------------------------------

namespace {

void check_labels(const Tensor& x, std::span<const int> y_s) {
  if (y_s.size() != x.rows()) throw Error("label count does not match rows");
  for (int v : y_s) {
    if (v != 1 && v != -1) throw Error("artifact labels must be +1 or -1");
  }
}

Vector unit(const Vector& raw) {
  const double n = norm(raw);
  if (!(n > 0.0) || !std::isfinite(n)) throw Error("no signal");
  Vector v(raw.size());
  for (std::size_t j = 0; j < raw.size(); ++j) v[j] = raw[j] / n;
  return v;
}

double hinge_sum(const Tensor& x, std::span<const int> y,
                 std::span<const double> w, double b, std::size_t* errors) {
  double sum = 0.0;
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double score = dot(w, x.row(i)) + b;
    const double m = y[i] * score;
    sum += std::max(0.0, 1.0 - m);
    if ((score >= 0.0 ? 1 : -1) != y[i]) ++wrong;
  }
  if (errors) *errors = wrong;
  return sum;
}

}  // namespace

// ---- SVM --------------------------------------------------------------------

namespace {
// Relative rise of the averaged objective tolerated between checkpoints,
// taken at every quarter of the tail.
constexpr double kMonotoneSlack = 1e-4;
}  // namespace

void SvmConfig::validate() const {
  if (!(lambda > 0.0)) throw Error("SVM lambda must be positive");
  if (epochs < 1) throw Error("SVM needs at least one epoch");
  if (!(tail_fraction > 0.0 && tail_fraction <= 1.0)) {
    throw Error("tail fraction must lie in (0, 1]");
  }
}

std::vector<int> LinearSvm::predict(const Tensor& x) const {
  std::vector<int> out(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    out[i] = dot(w, x.row(i)) + b >= 0.0 ? 1 : -1;
  }
  return out;
}

double svm_objective(const Tensor& x, std::span<const int> y,
                     std::span<const double> w, double b, double lambda) {
  const double reg = 0.5 * lambda * dot(w, w);
  return reg + hinge_sum(x, y, w, b, nullptr) / static_cast<double>(x.rows());
}

LinearSvm train_linear_svm(const Tensor& x, std::span<const int> y,
                           const SvmConfig& cfg) {
  cfg.validate();
  check_labels(x, y);
  const std::size_t n = x.rows(), d = x.cols();
  if (n < 2) throw Error("degenerate sample");
  const auto pos = std::count(y.begin(), y.end(), 1);
  if (pos == 0 || pos == static_cast<long>(n)) {
    throw Error("both artifact labels must be present");
  }

  const Vector mean = column_mean(x);
  Tensor z = x;
  for (std::size_t i = 0; i < n; ++i) {
    auto r = z.row(i);
    for (std::size_t j = 0; j < d; ++j) r[j] -= mean[j];
  }

  const double lambda = cfg.lambda;
  const double radius = 1.0 / std::sqrt(lambda);
  const std::size_t tail = std::max<std::size_t>(
      1, static_cast<std::size_t>(
             std::llround(cfg.tail_fraction * static_cast<double>(cfg.epochs))));
  const std::size_t tail_start = cfg.epochs - std::min(tail, cfg.epochs);
  const std::size_t check_every = std::max<std::size_t>(1, tail / 4);

  Vector w(d, 0.0), avg_w(d, 0.0);
  double b = 0.0, avg_b = 0.0;
  std::size_t averaged = 0;
  bool monotone = true;
  double prev = std::numeric_limits<double>::infinity();

  Rng rng(cfg.seed);
  std::vector<std::size_t> order(n);
  std::uint64_t t = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(std::span(order));
    for (auto i : order) {
      ++t;
      const double eta = 1.0 / (lambda * static_cast<double>(t));
      auto zi = z.row(i);
      const double margin = y[i] * (dot(w, zi) + b);
      const double shrink = 1.0 - eta * lambda;
      if (margin < 1.0) {
        const double step = eta * y[i];
        for (std::size_t j = 0; j < d; ++j) w[j] = shrink * w[j] + step * zi[j];
        b = shrink * b + step;
      } else {
        for (auto& wj : w) wj *= shrink;
        b *= shrink;
      }
      const double nrm = std::sqrt(dot(w, w) + b * b);
      if (nrm > radius) {
        const double s = radius / nrm;
        for (auto& wj : w) wj *= s;
        b *= s;
      }
      if (epoch >= tail_start) {
        ++averaged;
        const double k = 1.0 / static_cast<double>(averaged);
        for (std::size_t j = 0; j < d; ++j) avg_w[j] += (w[j] - avg_w[j]) * k;
        avg_b += (b - avg_b) * k;
      }
    }
    const std::size_t into_tail = epoch + 1 - tail_start;
    if (epoch >= tail_start && into_tail % check_every == 0) {
      const double obj = svm_objective(z, y, avg_w, avg_b, lambda);
      if (obj > prev * (1.0 + kMonotoneSlack)) monotone = false;
      prev = obj;
    }
  }

  LinearSvm out;
  out.w = std::move(avg_w);
  out.b = avg_b - dot(out.w, mean);
  std::size_t errors = 0;
  out.objective = 0.5 * lambda * dot(out.w, out.w) +
                  hinge_sum(x, y, out.w, out.b, &errors) / static_cast<double>(n);
  out.train_error = static_cast<double>(errors) / static_cast<double>(n);
  out.monotone = monotone;
  return out;
}

// ---- CAV fitting --------------------------------------------------------------

DetectorResult predict_artifact_labels(const Tensor& x, std::span<const int> y_s,
                                       double fraction, const SvmConfig& cfg) {
  check_labels(x, y_s);
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw Error("detector fraction must lie in (0, 1]");
  }
  const std::size_t n = x.rows();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(mix_seed(cfg.seed, 0xde7ec7));
  rng.shuffle(std::span(order));
  std::size_t m = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n)));
  order.resize(std::clamp<std::size_t>(m, 1, n));
  std::sort(order.begin(), order.end());

  DetectorResult r;
  std::vector<int> sub_y;
  for (std::size_t i : order) sub_y.push_back(y_s[i]);
  r.svm = train_linear_svm(x.select_rows(order), sub_y, cfg);
  r.labels = r.svm.predict(x);
  std::size_t agree = 0;
  for (std::size_t i = 0; i < n; ++i) agree += r.labels[i] == y_s[i];
  r.agreement = static_cast<double>(agree) / static_cast<double>(n);
  r.train_rows = std::move(order);
  return r;
}

std::pair<Vector, Vector> concept_means(const Tensor& x,
                                        std::span<const int> y_s) {
  check_labels(x, y_s);
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < y_s.size(); ++i) (y_s[i] == 1 ? pos : neg).push_back(i);
  if (pos.empty() || neg.empty()) throw Error("both artifact labels must be present");
  return {column_mean(x.select_rows(pos)), column_mean(x.select_rows(neg))};
}

ConceptVector fit_pattern_cav(const Tensor& x, std::span<const int> y_s,
                              const PatternOptions& opts) {
  check_labels(x, y_s);
  if (x.rows() < 2) throw Error("degenerate sample");
  const Vector y(y_s.begin(), y_s.end());
  const double var = variance_of_target(y);
  if (var < opts.variance_floor || var == 0.0) throw Error("constant labels");

  ConceptVector cav;
  cav.kind = CavKind::pattern;
  cav.hook = opts.hook;
  cav.raw = covariance_with_target(x, y);
  for (auto& r : cav.raw) r /= var;
  cav.v = unit(cav.raw);
  std::tie(cav.z_plus, cav.z_minus) = concept_means(x, y_s);
  cav.fit_meta.labels = opts.labels;
  cav.fit_meta.samples = x.rows();
  cav.fit_meta.positives = static_cast<std::size_t>(std::count(y_s.begin(), y_s.end(), 1));
  return cav;
}

ConceptVector fit_filter_cav(const Tensor& x, std::span<const int> y_s,
                             const SvmConfig& cfg, HookPoint hook) {
  LinearSvm svm = train_linear_svm(x, y_s, cfg);
  ConceptVector cav;
  cav.kind = CavKind::filter;
  cav.hook = hook;
  cav.v = unit(svm.w);
  cav.raw = std::move(svm.w);
  std::tie(cav.z_plus, cav.z_minus) = concept_means(x, y_s);
  cav.fit_meta.labels = LabelSource::ground_truth;
  cav.fit_meta.samples = x.rows();
  cav.fit_meta.positives = static_cast<std::size_t>(std::count(y_s.begin(), y_s.end(), 1));
  cav.fit_meta.objective = svm.objective;
  cav.fit_meta.bias = svm.b;
  cav.fit_meta.train_error = svm.train_error;
  cav.fit_meta.monotone = svm.monotone;
  return cav;
}

NeighborResult nearest_neighbors(const ConceptVector& cav, const Tensor& x,
                                 std::size_t k) {
  if (k > x.rows()) throw Error("k exceeds the number of rows");
  if (x.cols() != cav.dim()) throw Error("dimension mismatch");
  NeighborResult out;
  std::vector<std::pair<double, std::size_t>> scored;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    if (norm(x.row(i)) == 0.0) {
      out.skipped_zero_rows.push_back(i);
      continue;
    }
    scored.emplace_back(cosine_similarity(cav.v, x.row(i)), i);
  }
  std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    return a.first > b.first;
  });
  const std::size_t take = std::min(k, scored.size());
  for (std::size_t r = 0; r < take; ++r) {
    out.similarities.push_back(scored[r].first);
    out.indices.push_back(scored[r].second);
  }
  return out;
}

// ---- logit probe --------------------------------------------------------------

double concept_gap(const ConceptVector& cav) {
  double s = 0.0;
  for (std::size_t j = 0; j < cav.z_plus.size(); ++j) {
    const double d = cav.z_plus[j] - cav.z_minus[j];
    s += d * d;
  }
  return std::sqrt(s);
}

LogitShiftReport probe_logit_shift(const NetworkModel& model,
                                   const LabeledDataset& ds,
                                   const ConceptVector& cav, int target,
                                   double scale, bool skip_target_class) {
  cav.validate();
  const std::size_t b = model.boundary(cav.hook);
  if (model.shapes()[b].size() != cav.dim()) {
    throw Error("hook mismatch: model features at " + cav.hook.to_string() +
                " have " + std::to_string(model.shapes()[b].size()) +
                " dims, concept has " + std::to_string(cav.dim()));
  }
  const std::size_t K = model.num_classes();
  if (target < 0 || static_cast<std::size_t>(target) >= K) {
    throw Error("target class out of range");
  }
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (!(skip_target_class && ds.y_c[i] == target)) rows.push_back(i);
  }

  LogitShiftReport rep;
  rep.target = target;
  rep.scale = scale;
  rep.samples = rows.size();
  rep.per_class.resize(K);
  for (std::size_t c = 0; c < K; ++c) rep.per_class[c].label = static_cast<int>(c);
  if (rows.empty()) return rep;

  const std::size_t L = model.layers().size();
  Tensor before = extract_features(model, ds.samples.select_rows(rows), cav.hook);
  Tensor after = before;
  for (std::size_t i = 0; i < after.rows(); ++i) {
    auto r = after.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += scale * cav.v[j];
  }
  const Tensor lb = forward_range(model, before, b, L, Mode::eval).logits();
  const Tensor la = forward_range(model, after, b, L, Mode::eval).logits();

  const auto t = static_cast<std::size_t>(target);
  for (std::size_t s = 0; s < rows.size(); ++s) {
    const Vector pb = softmax(lb.row(s));
    const Vector pa = softmax(la.row(s));
    const auto y = static_cast<std::size_t>(ds.y_c[rows[s]]);
    ClassShift& cs = rep.per_class[y];
    ++cs.count;
    cs.target_before += pb[t];
    cs.target_after += pa[t];
    cs.true_before += pb[y];
    cs.true_after += pa[y];
  }
  for (auto& cs : rep.per_class) {
    rep.target_before += cs.target_before;
    rep.target_after += cs.target_after;
    rep.true_before += cs.true_before;
    rep.true_after += cs.true_after;
    if (cs.count > 0) {
      const double c = static_cast<double>(cs.count);
      cs.target_before /= c;
      cs.target_after /= c;
      cs.true_before /= c;
      cs.true_after /= c;
    }
  }
  const double n = static_cast<double>(rows.size());
  rep.target_before /= n;
  rep.target_after /= n;
  rep.true_before /= n;
  rep.true_after /= n;
  return rep;
}

// ---- serialization ----------------------------------------------------------

Json to_json(const ConceptVector& cav) {
  Json j;
  j["kind"] = to_string(cav.kind);
  j["hook"] = cav.hook.to_string();
  j["dim"] = cav.dim();
  j["v"] = cav.v;
  j["raw"] = cav.raw;
  j["z_plus"] = cav.z_plus;
  j["z_minus"] = cav.z_minus;
  const FitMeta& m = cav.fit_meta;
  j["fit_meta"] = {{"labels", to_string(m.labels)},
                   {"samples", m.samples},
                   {"positives", m.positives},
                   {"objective", m.objective},
                   {"bias", m.bias},
                   {"train_error", m.train_error},
                   {"monotone", m.monotone}};
  return j;
}

ConceptVector concept_from_json(const Json& j) {
  try {
    ConceptVector cav;
    cav.kind = parse_cav_kind(j.at("kind").get<std::string>());
    cav.hook = HookPoint::parse(j.at("hook").get<std::string>());
    cav.v = j.at("v").get<Vector>();
    cav.raw = j.at("raw").get<Vector>();
    cav.z_plus = j.at("z_plus").get<Vector>();
    cav.z_minus = j.at("z_minus").get<Vector>();
    if (j.at("dim").get<std::size_t>() != cav.v.size()) {
      throw Error("concept dim field disagrees with v");
    }
    const Json& m = j.at("fit_meta");
    cav.fit_meta.labels = parse_label_source(m.at("labels").get<std::string>());
    cav.fit_meta.samples = m.at("samples").get<std::size_t>();
    cav.fit_meta.positives = m.at("positives").get<std::size_t>();
    cav.fit_meta.objective = m.at("objective").get<double>();
    cav.fit_meta.bias = m.at("bias").get<double>();
    cav.fit_meta.train_error = m.at("train_error").get<double>();
    cav.fit_meta.monotone = m.at("monotone").get<bool>();
    cav.validate();
    return cav;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed concept JSON: ") + e.what());
  }
}

Json to_json(const LogitShiftReport& r) {
  Json j;
  j["target"] = r.target;
  j["scale"] = r.scale;
  j["samples"] = r.samples;
  j["target_before"] = r.target_before;
  j["target_after"] = r.target_after;
  j["true_before"] = r.true_before;
  j["true_after"] = r.true_after;
  Json per = Json::array();
  for (const auto& c : r.per_class) {
    per.push_back({{"label", c.label},
                   {"count", c.count},
                   {"target_before", c.target_before},
                   {"target_after", c.target_after},
                   {"true_before", c.true_before},
                   {"true_after", c.true_after}});
  }
  j["per_class"] = std::move(per);
  return j;
}

void write_concept(const ConceptVector& cav, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << dump_json(to_json(cav));
}

ConceptVector read_concept(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  try {
    return concept_from_json(Json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed concept JSON: ") + e.what());
  }
}

}  // namespace pcav
