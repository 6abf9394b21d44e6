#include "pcav/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <numbers>
#include <sstream>
#include <thread>

namespace pcav {

std::string to_string(Attack attack) {
  return attack == Attack::clever_hans ? "clever_hans" : "backdoor";
}

Attack parse_attack(const std::string& text) {
  if (text == "clever_hans" || text == "clever-hans" || text == "ch") {
    return Attack::clever_hans;
  }
  if (text == "backdoor" || text == "bd") return Attack::backdoor;
  throw Error("unknown attack '" + text + "'");
}

std::string to_string(CavChoice cav) {
  switch (cav) {
    case CavChoice::filter: return "filter";
    case CavChoice::pattern_gt: return "pattern_gt";
    case CavChoice::pattern_predicted: return "pattern_predicted";
  }
  return "?";
}

CavChoice parse_cav_choice(const std::string& text) {
  if (text == "filter") return CavChoice::filter;
  if (text == "pattern_gt" || text == "pattern") return CavChoice::pattern_gt;
  if (text == "pattern_predicted") return CavChoice::pattern_predicted;
  throw Error("unknown concept vector choice '" + text + "'");
}

std::string to_string(Correction correction) {
  switch (correction) {
    case Correction::baseline: return "baseline";
    case Correction::aclarc: return "aclarc";
    case Correction::pclarc: return "pclarc";
  }
  return "?";
}

Correction parse_correction(const std::string& text) {
  if (text == "baseline") return Correction::baseline;
  if (text == "aclarc" || text == "a-clarc") return Correction::aclarc;
  if (text == "pclarc" || text == "p-clarc") return Correction::pclarc;
  throw Error("unknown correction '" + text + "'");
}

void ExperimentConfig::validate() const {
  if (data.classes < 2) throw Error("need at least two classes");
  if (data.n_per_class == 0 || test_per_class == 0) {
    throw Error("per-class sample counts must be positive");
  }
  if (!(rate > 0.0 && rate <= 1.0)) throw Error("rate must lie in (0, 1]");
  if (!(r_p > 0.0 && r_p <= 1.0)) throw Error("r_p must lie in (0, 1]");
  for (int t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= data.classes) {
      throw Error("target " + std::to_string(t) + " is not a class");
    }
  }
  if (targets.empty() || seeds.empty()) throw Error("empty target or seed list");
  if (hooks.empty()) throw Error("no hook points");
  if (corrections.empty()) throw Error("no corrections");
  bool needs_cav = std::any_of(corrections.begin(), corrections.end(),
                               [](Correction c) { return c != Correction::baseline; });
  if (needs_cav && cavs.empty()) throw Error("corrections need at least one concept vector");
  if (!(subset_fraction >= 0.0 && subset_fraction <= 1.0)) {
    throw Error("subset_fraction must lie in [0, 1]");
  }
  if (!(detector_fraction > 0.0 && detector_fraction <= 1.0)) {
    throw Error("detector_fraction must lie in (0, 1]");
  }
  if (jobs == 0) throw Error("jobs must be positive");
  optimizer.validate();
  svm.validate();
  // Shape and artifact compatibility.
  make_artifact(artifact.kind, data.shape, artifact.box_size,
                artifact.shift_factor, artifact.color_index)
      .validate(data.shape);
}

namespace {

Json shape_json(const ImageShape& s) { return Json::array({s.channels, s.height, s.width}); }

ImageShape shape_from(const Json& j) {
  if (!j.is_array() || j.size() != 3) throw Error("shape must be [C, H, W]");
  return {j[0].get<std::size_t>(), j[1].get<std::size_t>(), j[2].get<std::size_t>()};
}

Json svm_json(const SvmConfig& s) {
  return {{"lambda", s.lambda}, {"epochs", s.epochs},
          {"tail_fraction", s.tail_fraction}, {"seed", s.seed}};
}

SvmConfig svm_from(const Json& j) {
  SvmConfig s;
  s.lambda = j.value("lambda", s.lambda);
  s.epochs = j.value("epochs", s.epochs);
  s.tail_fraction = j.value("tail_fraction", s.tail_fraction);
  s.seed = j.value("seed", s.seed);
  return s;
}

Json optimizer_json(const OptimizerConfig& o) {
  return {{"kind", to_string(o.kind)}, {"lr", o.lr}, {"rho", o.rho},
          {"eps", o.eps}, {"per_epoch_lr_factor", o.per_epoch_lr_factor},
          {"epochs", o.epochs}, {"batch_size", o.batch_size}};
}

OptimizerConfig optimizer_from(const Json& j) {
  OptimizerConfig o;
  if (j.contains("kind")) o.kind = parse_optimizer_kind(j["kind"].get<std::string>());
  o.lr = j.value("lr", o.lr);
  o.rho = j.value("rho", o.rho);
  o.eps = j.value("eps", o.eps);
  o.per_epoch_lr_factor = j.value("per_epoch_lr_factor", o.per_epoch_lr_factor);
  o.epochs = j.value("epochs", o.epochs);
  o.batch_size = j.value("batch_size", o.batch_size);
  return o;
}

template <typename T, typename F>
Json names(const std::vector<T>& items, F&& name) {
  Json a = Json::array();
  for (const auto& item : items) a.push_back(name(item));
  return a;
}

}  // namespace

Json to_json(const ExperimentConfig& c) {
  Json j;
  j["data"] = {{"classes", c.data.classes},
               {"shape", shape_json(c.data.shape)},
               {"n_per_class", c.data.n_per_class},
               {"noise_sigma", c.data.noise_sigma},
               {"contrast", c.data.contrast},
               {"brightness_sigma", c.data.brightness_sigma},
               {"random_polarity", c.data.random_polarity},
               {"template_seed", c.data.template_seed}};
  j["test_per_class"] = c.test_per_class;
  j["attack"] = to_string(c.attack);
  j["rate"] = c.rate;
  j["r_p"] = c.r_p;
  j["artifact"] = {{"kind", c.artifact.kind},
                   {"box_size", c.artifact.box_size},
                   {"shift_factor", c.artifact.shift_factor},
                   {"color_index", c.artifact.color_index}};
  j["targets"] = c.targets;
  j["seeds"] = c.seeds;
  j["cavs"] = names(c.cavs, [](CavChoice x) { return to_string(x); });
  j["corrections"] = names(c.corrections, [](Correction x) { return to_string(x); });
  j["hooks"] = names(c.hooks, [](const HookPoint& h) { return h.to_string(); });
  j["network"] = {{"conv1_channels", c.network.conv1_channels},
                  {"conv2_channels", c.network.conv2_channels},
                  {"hidden", c.network.hidden},
                  {"dropout_after_pool", c.network.dropout_after_pool},
                  {"dropout_after_hidden", c.network.dropout_after_hidden}};
  j["optimizer"] = optimizer_json(c.optimizer);
  j["finetune_epochs"] = c.finetune_epochs;
  j["subset_fraction"] = c.subset_fraction;
  j["svm"] = svm_json(c.svm);
  j["detector_fraction"] = c.detector_fraction;
  j["probes"] = c.probes;
  // jobs is left out: it does not change any result.
  return j;
}

ExperimentConfig experiment_config_from_json(const Json& j) {
  try {
    ExperimentConfig c;
    if (j.contains("data")) {
      const Json& d = j["data"];
      c.data.classes = d.value("classes", c.data.classes);
      if (d.contains("shape")) c.data.shape = shape_from(d["shape"]);
      c.data.n_per_class = d.value("n_per_class", c.data.n_per_class);
      c.data.noise_sigma = d.value("noise_sigma", c.data.noise_sigma);
      c.data.contrast = d.value("contrast", c.data.contrast);
      c.data.brightness_sigma = d.value("brightness_sigma", c.data.brightness_sigma);
      c.data.random_polarity = d.value("random_polarity", c.data.random_polarity);
      c.data.template_seed = d.value("template_seed", c.data.template_seed);
    }
    c.test_per_class = j.value("test_per_class", c.test_per_class);
    if (j.contains("attack")) c.attack = parse_attack(j["attack"].get<std::string>());
    c.rate = j.value("rate", c.rate);
    c.r_p = j.value("r_p", c.r_p);
    if (j.contains("artifact")) {
      const Json& a = j["artifact"];
      c.artifact.kind = a.value("kind", c.artifact.kind);
      c.artifact.box_size = a.value("box_size", c.artifact.box_size);
      c.artifact.shift_factor = a.value("shift_factor", c.artifact.shift_factor);
      c.artifact.color_index = a.value("color_index", c.artifact.color_index);
    }
    if (j.contains("targets")) c.targets = j["targets"].get<std::vector<int>>();
    if (j.contains("seeds")) c.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
    if (j.contains("cavs")) {
      c.cavs.clear();
      for (const auto& s : j["cavs"]) c.cavs.push_back(parse_cav_choice(s.get<std::string>()));
    }
    if (j.contains("corrections")) {
      c.corrections.clear();
      for (const auto& s : j["corrections"]) {
        c.corrections.push_back(parse_correction(s.get<std::string>()));
      }
    }
    if (j.contains("hooks")) {
      c.hooks.clear();
      for (const auto& s : j["hooks"]) c.hooks.push_back(HookPoint::parse(s.get<std::string>()));
    }
    if (j.contains("network")) {
      const Json& n = j["network"];
      c.network.conv1_channels = n.value("conv1_channels", c.network.conv1_channels);
      c.network.conv2_channels = n.value("conv2_channels", c.network.conv2_channels);
      c.network.hidden = n.value("hidden", c.network.hidden);
      c.network.dropout_after_pool = n.value("dropout_after_pool", c.network.dropout_after_pool);
      c.network.dropout_after_hidden =
          n.value("dropout_after_hidden", c.network.dropout_after_hidden);
    }
    if (j.contains("optimizer")) c.optimizer = optimizer_from(j["optimizer"]);
    c.finetune_epochs = j.value("finetune_epochs", c.finetune_epochs);
    c.subset_fraction = j.value("subset_fraction", c.subset_fraction);
    if (j.contains("svm")) c.svm = svm_from(j["svm"]);
    c.detector_fraction = j.value("detector_fraction", c.detector_fraction);
    c.probes = j.value("probes", c.probes);
    c.jobs = j.value("jobs", c.jobs);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed experiment config: ") + e.what());
  }
}

// ---- controlled suite -------------------------------------------------------

namespace {

struct CellOutput {
  std::vector<SuiteCell> cells;
  TrainedSummary trained;
  std::vector<CavFitRecord> fits;
  std::vector<ProbeRecord> probes;
};

std::uint64_t cell_seed(std::uint64_t seed, int target, std::uint64_t stream) {
  return mix_seed(mix_seed(seed, stream), static_cast<std::uint64_t>(target));
}

struct FittedCav {
  CavChoice choice;
  ConceptVector cav;
};

CellOutput run_cell(const ExperimentConfig& cfg, int target, std::uint64_t seed) {
  CellOutput out;
  const ArtifactSpec spec = make_artifact(cfg.artifact.kind, cfg.data.shape,
                                          cfg.artifact.box_size,
                                          cfg.artifact.shift_factor,
                                          cfg.artifact.color_index);

  // Clean data depends on the seed only; poisoning also on the target.
  PatternConfig train_cfg = cfg.data;
  train_cfg.split = Split::train;
  Rng train_rng(mix_seed(seed, 1));
  const LabeledDataset clean_train = gen_pattern_classes(train_cfg, train_rng);

  PatternConfig test_cfg = cfg.data;
  test_cfg.split = Split::test;
  test_cfg.n_per_class = cfg.test_per_class;
  Rng test_rng(mix_seed(seed, 2));
  const LabeledDataset test = gen_pattern_classes(test_cfg, test_rng);

  Rng poison_rng(cell_seed(seed, target, 3));
  const LabeledDataset train_set =
      cfg.attack == Attack::clever_hans
          ? poison_clever_hans(clean_train, target, cfg.rate, spec, poison_rng)
          : poison_backdoor(clean_train, target, cfg.rate, spec, poison_rng);
  Rng ptest_rng(mix_seed(seed, 4));
  const LabeledDataset ptest = poison_test(test, cfg.r_p, spec, ptest_rng);

  NetworkModel model = NetworkModel::conv_net(cfg.data.shape, cfg.data.classes,
                                              cell_seed(seed, target, 5), cfg.network);
  OptimizerConfig opt = cfg.optimizer;
  opt.seed = cell_seed(seed, target, 6);
  const TrainHistory hist = train(model, train_set, opt);

  out.trained.target = target;
  out.trained.seed = seed;
  out.trained.poisoned_train_samples = static_cast<std::size_t>(
      std::count(train_set.y_s.begin(), train_set.y_s.end(), 1));
  out.trained.clean = evaluate(model, test);
  out.trained.poisoned = evaluate(model, ptest);
  out.trained.loss = hist.loss;

  OptimizerConfig ft = cfg.optimizer;
  ft.epochs = cfg.finetune_epochs;
  ft.seed = cell_seed(seed, target, 7);
  const NamedDataset evals[] = {{"poisoned", &ptest}};

  auto has = [&](Correction c) {
    return std::find(cfg.corrections.begin(), cfg.corrections.end(), c) !=
           cfg.corrections.end();
  };

  const std::vector<std::size_t> target_rows = train_set.indices_of_class(target);
  std::vector<int> ys;
  ys.reserve(target_rows.size());
  for (std::size_t i : target_rows) ys.push_back(train_set.y_s[i]);

  for (const HookPoint& hook : cfg.hooks) {
    const std::string hook_name = hook.to_string();
    const Tensor feats =
        extract_features(model, train_set.samples.select_rows(target_rows), hook);

    std::vector<FittedCav> fitted;
    for (CavChoice choice : cfg.cavs) {
      CavFitRecord rec;
      rec.target = target;
      rec.seed = seed;
      rec.hook = hook_name;
      rec.cav = to_string(choice);
      ConceptVector cav;
      if (choice == CavChoice::filter) {
        SvmConfig svm = cfg.svm;
        svm.seed = cell_seed(seed, target, 8);
        cav = fit_filter_cav(feats, ys, svm, hook);
        rec.objective = cav.fit_meta.objective;
        rec.train_error = cav.fit_meta.train_error;
        rec.monotone = cav.fit_meta.monotone;
      } else if (choice == CavChoice::pattern_gt) {
        PatternOptions po;
        po.hook = hook;
        cav = fit_pattern_cav(feats, ys, po);
      } else {
        SvmConfig svm = cfg.svm;
        svm.seed = cell_seed(seed, target, 9);
        const DetectorResult det =
            predict_artifact_labels(feats, ys, cfg.detector_fraction, svm);
        const std::vector<int>& pred = det.labels;
        PatternOptions po;
        po.hook = hook;
        po.labels = LabelSource::predicted;
        cav = fit_pattern_cav(feats, pred, po);
        rec.objective = det.svm.objective;
        rec.train_error = det.svm.train_error;
        rec.monotone = det.svm.monotone;
        rec.label_agreement = det.agreement;
      }
      rec.dim = cav.dim();
      rec.gap = concept_gap(cav);
      out.fits.push_back(rec);
      fitted.push_back({choice, std::move(cav)});
    }

    if (cfg.probes) {
      for (const auto& f : fitted) {
        const LogitShiftReport r =
            probe_logit_shift(model, test, f.cav, target, concept_gap(f.cav), true);
        ProbeRecord p;
        p.target = target;
        p.seed = seed;
        p.hook = hook_name;
        p.cav = to_string(f.choice);
        p.scale = r.scale;
        p.samples = r.samples;
        p.target_before = r.target_before;
        p.target_after = r.target_after;
        p.true_before = r.true_before;
        p.true_after = r.true_after;
        out.probes.push_back(p);
      }
    }

    auto cell = [&](Correction c, const std::string& cav) {
      SuiteCell s;
      s.target = target;
      s.seed = seed;
      s.hook = hook_name;
      s.correction = c;
      s.cav = cav;
      return s;
    };
    auto by_epoch = [&](const TrainHistory& h) {
      std::vector<double> v{out.trained.poisoned};
      v.insert(v.end(), h.eval_accuracy[0].begin(), h.eval_accuracy[0].end());
      return v;
    };

    // Plain fine-tuning of the same layers; P-ClArC runs on this model.
    NetworkModel base = model;
    TrainHistory base_hist;
    if (has(Correction::baseline) || has(Correction::pclarc)) {
      base_hist = finetune_after(base, train_set, hook, ft, evals);
    }

    for (Correction c : cfg.corrections) {
      if (c == Correction::baseline) {
        SuiteCell s = cell(c, "none");
        s.clean = evaluate(base, test);
        s.poisoned = evaluate(base, ptest);
        s.poisoned_by_epoch = by_epoch(base_hist);
        out.cells.push_back(std::move(s));
      } else if (c == Correction::aclarc) {
        for (const auto& f : fitted) {
          NetworkModel m = model;
          const ClarcHook h = make_hook(ClarcMode::augmentive, f.cav);
          const TrainHistory fh =
              finetune_subsequent(m, train_set, h, cfg.subset_fraction, ft, evals);
          SuiteCell s = cell(c, to_string(f.choice));
          s.clean = evaluate(m, test);
          s.poisoned = evaluate(m, ptest);
          s.poisoned_by_epoch = by_epoch(fh);
          out.cells.push_back(std::move(s));
        }
      } else {
        for (const auto& f : fitted) {
          const ClarcHook h = make_hook(ClarcMode::projective, f.cav);
          SuiteCell s = cell(c, to_string(f.choice));
          s.clean = evaluate(base, test, &h);
          s.poisoned = evaluate(base, ptest, &h);
          out.cells.push_back(std::move(s));
        }
      }
    }
  }
  return out;
}

}  // namespace

ExperimentReport run_controlled_suite(const ExperimentConfig& cfg) {
  cfg.validate();
  std::vector<std::pair<int, std::uint64_t>> grid;
  for (int t : cfg.targets) {
    for (std::uint64_t s : cfg.seeds) grid.emplace_back(t, s);
  }

  std::vector<CellOutput> outputs(grid.size());
  std::vector<std::string> errors(grid.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < grid.size(); i = next++) {
      try {
        outputs[i] = run_cell(cfg, grid[i].first, grid[i].second);
      } catch (const std::exception& e) {
        errors[i] = "cell target=" + std::to_string(grid[i].first) +
                    " seed=" + std::to_string(grid[i].second) + ": " + e.what();
      }
    }
  };
  const std::size_t jobs = std::min(cfg.jobs, grid.size());
  if (jobs <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t k = 0; k < jobs; ++k) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors) {
    if (!e.empty()) throw Error(e);
  }

  ExperimentReport rep;
  rep.kind = "suite";
  rep.config = to_json(cfg);
  for (auto& o : outputs) {
    rep.cells.insert(rep.cells.end(), o.cells.begin(), o.cells.end());
    rep.trained.push_back(o.trained);
    rep.fits.insert(rep.fits.end(), o.fits.begin(), o.fits.end());
    rep.probes.insert(rep.probes.end(), o.probes.begin(), o.probes.end());
  }
  rep.aggregates = aggregate_cells(rep.cells);
  return rep;
}

std::vector<SuiteAggregate> aggregate_cells(const std::vector<SuiteCell>& cells) {
  std::vector<SuiteAggregate> aggs;
  std::vector<std::vector<const SuiteCell*>> members;
  for (const auto& c : cells) {
    std::size_t k = 0;
    while (k < aggs.size() && !(aggs[k].hook == c.hook &&
                                aggs[k].correction == c.correction &&
                                aggs[k].cav == c.cav)) {
      ++k;
    }
    if (k == aggs.size()) {
      SuiteAggregate a;
      a.hook = c.hook;
      a.correction = c.correction;
      a.cav = c.cav;
      aggs.push_back(a);
      members.emplace_back();
    }
    members[k].push_back(&c);
  }
  for (std::size_t k = 0; k < aggs.size(); ++k) {
    SuiteAggregate& a = aggs[k];
    const auto& m = members[k];
    a.count = m.size();
    a.clean_min = a.poisoned_min = INFINITY;
    a.clean_max = a.poisoned_max = -INFINITY;
    for (const SuiteCell* c : m) {
      a.clean_mean += c->clean;
      a.poisoned_mean += c->poisoned;
      a.clean_min = std::min(a.clean_min, c->clean);
      a.clean_max = std::max(a.clean_max, c->clean);
      a.poisoned_min = std::min(a.poisoned_min, c->poisoned);
      a.poisoned_max = std::max(a.poisoned_max, c->poisoned);
    }
    const double n = static_cast<double>(m.size());
    a.clean_mean /= n;
    a.poisoned_mean /= n;
    // Per-epoch means only over cells that share the same epoch count.
    const std::size_t len = m.front()->poisoned_by_epoch.size();
    bool same = std::all_of(m.begin(), m.end(), [&](const SuiteCell* c) {
      return c->poisoned_by_epoch.size() == len;
    });
    if (same && len > 0) {
      a.poisoned_by_epoch_mean.assign(len, 0.0);
      for (const SuiteCell* c : m) {
        for (std::size_t e = 0; e < len; ++e) {
          a.poisoned_by_epoch_mean[e] += c->poisoned_by_epoch[e];
        }
      }
      for (double& v : a.poisoned_by_epoch_mean) v /= n;
    }
  }
  return aggs;
}

// ---- toy --------------------------------------------------------------------

Json to_json(const ToyFigureConfig& c) {
  return {{"taus_deg", c.taus_deg},
          {"seeds", c.seeds},
          {"sigma2", c.sigma2},
          {"n", c.n},
          {"artifact_fraction_in_A", c.artifact_fraction_in_A},
          {"svm", svm_json(c.svm)},
          {"classifier_epochs", c.classifier_epochs},
          {"classifier_lr", c.classifier_lr},
          {"classifier_batch", c.classifier_batch}};
}

namespace {

double angle_to_x_deg(const Vector& v) {
  const double c = std::clamp(v[0] / norm(v), -1.0, 1.0);
  return std::acos(c) * 180.0 / std::numbers::pi;
}

int classify(const ToyRun& r, std::span<const double> x) {
  Vector logits(r.classifier_b);
  for (std::size_t k = 0; k < logits.size(); ++k) logits[k] += dot(r.classifier_w[k], x);
  return argmax(logits);
}

}  // namespace

ToyRun run_toy(const ToyConfig& cfg, const ToyFigureConfig& opts) {
  const LabeledDataset ds = generate_toy(cfg);
  ToyRun r;
  r.tau_deg = cfg.tau * 180.0 / std::numbers::pi;
  r.seed = cfg.seed;
  r.n = cfg.n;
  r.sigma2 = cfg.sigma2;

  NetworkModel clf = NetworkModel::dense_net(ds.shape, 2, mix_seed(cfg.seed, 11));
  OptimizerConfig opt;
  opt.kind = OptimizerConfig::Kind::sgd;
  opt.lr = opts.classifier_lr;
  opt.per_epoch_lr_factor = 1.0;
  opt.epochs = opts.classifier_epochs;
  opt.batch_size = opts.classifier_batch;
  opt.seed = mix_seed(cfg.seed, 12);
  train(clf, ds, opt);
  for (const Layer& layer : clf.layers()) {
    if (const auto* d = std::get_if<Dense>(&layer)) {
      for (std::size_t k = 0; k < d->out; ++k) {
        r.classifier_w.emplace_back(d->weight.begin() + k * d->in,
                                    d->weight.begin() + (k + 1) * d->in);
      }
      r.classifier_b = d->bias;
    }
  }
  r.classifier_accuracy = evaluate(clf, ds);

  const std::vector<std::size_t> rows_a = ds.indices_of_class(kToyClassA);
  std::vector<int> ys;
  for (std::size_t i : rows_a) ys.push_back(ds.y_s[i]);
  const Tensor xa = ds.samples.select_rows(rows_a);
  SvmConfig svm = opts.svm;
  svm.seed = mix_seed(cfg.seed, 13);
  const ConceptVector pat = fit_pattern_cav(xa, ys);
  const ConceptVector fil = fit_filter_cav(xa, ys, svm);
  r.v_pattern = pat.v;
  r.v_filter = fil.v;
  r.angle_pattern = angle_to_x_deg(pat.v);
  r.angle_filter = angle_to_x_deg(fil.v);
  r.svm_objective = fil.fit_meta.objective;
  r.svm_monotone = fil.fit_meta.monotone;

  // First class-A sample that carries the artifact.
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.y_c[i] == kToyClassA && ds.y_s[i] == 1) {
      r.probe_index = i;
      break;
    }
  }
  const auto probe = ds.samples.row(r.probe_index);
  r.probe.assign(probe.begin(), probe.end());
  r.probe_label = ds.y_c[r.probe_index];
  r.corrected_pattern = pclarc_map(probe, pat.v, pat.z_minus);
  r.corrected_filter = pclarc_map(probe, fil.v, fil.z_minus);
  r.pred_probe = classify(r, r.probe);
  r.pred_pattern = classify(r, r.corrected_pattern);
  r.pred_filter = classify(r, r.corrected_filter);
  r.crossed_pattern = r.pred_pattern != r.probe_label;
  r.crossed_filter = r.pred_filter != r.probe_label;
  return r;
}

ExperimentReport run_toy_figure(const ToyFigureConfig& cfg) {
  ExperimentReport rep;
  rep.kind = "toy";
  rep.config = to_json(cfg);
  for (std::uint64_t seed : cfg.seeds) {
    for (double tau : cfg.taus_deg) {
      ToyConfig tc;
      tc.tau = tau * std::numbers::pi / 180.0;
      tc.sigma2 = cfg.sigma2;
      tc.n = cfg.n;
      tc.artifact_fraction_in_A = cfg.artifact_fraction_in_A;
      tc.seed = seed;
      ToyRun r = run_toy(tc, cfg);
      r.tau_deg = tau;
      rep.toy.push_back(std::move(r));
    }
  }
  return rep;
}

// ---- report I/O -------------------------------------------------------------

ReportFormat parse_report_format(const std::string& text) {
  if (text == "json") return ReportFormat::json;
  if (text == "csv") return ReportFormat::csv;
  if (text == "markdown" || text == "md") return ReportFormat::markdown;
  throw Error("unknown report format '" + text + "'");
}

Json to_json(const ExperimentReport& r) {
  Json j;
  j["schema"] = kReportSchema;
  j["kind"] = r.kind;
  j["config"] = r.config;
  Json cells = Json::array();
  for (const auto& c : r.cells) {
    cells.push_back({{"target", c.target}, {"seed", c.seed}, {"hook", c.hook},
                     {"correction", to_string(c.correction)}, {"cav", c.cav},
                     {"clean", c.clean}, {"poisoned", c.poisoned},
                     {"poisoned_by_epoch", c.poisoned_by_epoch}});
  }
  j["cells"] = std::move(cells);
  Json aggs = Json::array();
  for (const auto& a : r.aggregates) {
    aggs.push_back({{"hook", a.hook}, {"correction", to_string(a.correction)},
                    {"cav", a.cav}, {"count", a.count},
                    {"clean_mean", a.clean_mean}, {"clean_min", a.clean_min},
                    {"clean_max", a.clean_max},
                    {"poisoned_mean", a.poisoned_mean},
                    {"poisoned_min", a.poisoned_min},
                    {"poisoned_max", a.poisoned_max},
                    {"poisoned_by_epoch_mean", a.poisoned_by_epoch_mean}});
  }
  j["aggregates"] = std::move(aggs);
  Json trained = Json::array();
  for (const auto& t : r.trained) {
    trained.push_back({{"target", t.target}, {"seed", t.seed},
                       {"poisoned_train_samples", t.poisoned_train_samples},
                       {"clean", t.clean}, {"poisoned", t.poisoned},
                       {"loss", t.loss}});
  }
  j["trained"] = std::move(trained);
  Json fits = Json::array();
  for (const auto& f : r.fits) {
    fits.push_back({{"target", f.target}, {"seed", f.seed}, {"hook", f.hook},
                    {"cav", f.cav}, {"dim", f.dim}, {"objective", f.objective},
                    {"train_error", f.train_error}, {"monotone", f.monotone},
                    {"label_agreement", f.label_agreement}, {"gap", f.gap}});
  }
  j["fits"] = std::move(fits);
  Json probes = Json::array();
  for (const auto& p : r.probes) {
    probes.push_back({{"target", p.target}, {"seed", p.seed}, {"hook", p.hook},
                      {"cav", p.cav}, {"scale", p.scale}, {"samples", p.samples},
                      {"target_before", p.target_before},
                      {"target_after", p.target_after},
                      {"true_before", p.true_before},
                      {"true_after", p.true_after}});
  }
  j["probes"] = std::move(probes);
  Json toy = Json::array();
  for (const auto& t : r.toy) {
    toy.push_back({{"tau_deg", t.tau_deg}, {"seed", t.seed}, {"n", t.n},
                   {"sigma2", t.sigma2}, {"v_pattern", t.v_pattern},
                   {"v_filter", t.v_filter}, {"angle_pattern", t.angle_pattern},
                   {"angle_filter", t.angle_filter},
                   {"svm_objective", t.svm_objective},
                   {"svm_monotone", t.svm_monotone},
                   {"classifier_w", t.classifier_w},
                   {"classifier_b", t.classifier_b},
                   {"classifier_accuracy", t.classifier_accuracy},
                   {"probe_index", t.probe_index}, {"probe", t.probe},
                   {"corrected_pattern", t.corrected_pattern},
                   {"corrected_filter", t.corrected_filter},
                   {"probe_label", t.probe_label}, {"pred_probe", t.pred_probe},
                   {"pred_pattern", t.pred_pattern},
                   {"pred_filter", t.pred_filter},
                   {"crossed_pattern", t.crossed_pattern},
                   {"crossed_filter", t.crossed_filter}});
  }
  j["toy"] = std::move(toy);
  return j;
}

ExperimentReport report_from_json(const Json& j) {
  try {
    if (j.at("schema").get<std::string>() != kReportSchema) {
      throw Error("unsupported report schema '" + j["schema"].get<std::string>() + "'");
    }
    ExperimentReport r;
    r.kind = j.at("kind").get<std::string>();
    r.config = j.at("config");
    for (const auto& c : j.at("cells")) {
      SuiteCell s;
      s.target = c.at("target").get<int>();
      s.seed = c.at("seed").get<std::uint64_t>();
      s.hook = c.at("hook").get<std::string>();
      s.correction = parse_correction(c.at("correction").get<std::string>());
      s.cav = c.at("cav").get<std::string>();
      s.clean = c.at("clean").get<double>();
      s.poisoned = c.at("poisoned").get<double>();
      s.poisoned_by_epoch = c.at("poisoned_by_epoch").get<std::vector<double>>();
      r.cells.push_back(std::move(s));
    }
    for (const auto& a : j.at("aggregates")) {
      SuiteAggregate g;
      g.hook = a.at("hook").get<std::string>();
      g.correction = parse_correction(a.at("correction").get<std::string>());
      g.cav = a.at("cav").get<std::string>();
      g.count = a.at("count").get<std::size_t>();
      g.clean_mean = a.at("clean_mean").get<double>();
      g.clean_min = a.at("clean_min").get<double>();
      g.clean_max = a.at("clean_max").get<double>();
      g.poisoned_mean = a.at("poisoned_mean").get<double>();
      g.poisoned_min = a.at("poisoned_min").get<double>();
      g.poisoned_max = a.at("poisoned_max").get<double>();
      g.poisoned_by_epoch_mean = a.at("poisoned_by_epoch_mean").get<std::vector<double>>();
      r.aggregates.push_back(std::move(g));
    }
    for (const auto& t : j.at("trained")) {
      TrainedSummary s;
      s.target = t.at("target").get<int>();
      s.seed = t.at("seed").get<std::uint64_t>();
      s.poisoned_train_samples = t.at("poisoned_train_samples").get<std::size_t>();
      s.clean = t.at("clean").get<double>();
      s.poisoned = t.at("poisoned").get<double>();
      s.loss = t.at("loss").get<std::vector<double>>();
      r.trained.push_back(std::move(s));
    }
    for (const auto& f : j.at("fits")) {
      CavFitRecord c;
      c.target = f.at("target").get<int>();
      c.seed = f.at("seed").get<std::uint64_t>();
      c.hook = f.at("hook").get<std::string>();
      c.cav = f.at("cav").get<std::string>();
      c.dim = f.at("dim").get<std::size_t>();
      c.objective = f.at("objective").get<double>();
      c.train_error = f.at("train_error").get<double>();
      c.monotone = f.at("monotone").get<bool>();
      c.label_agreement = f.at("label_agreement").get<double>();
      c.gap = f.at("gap").get<double>();
      r.fits.push_back(std::move(c));
    }
    for (const auto& p : j.at("probes")) {
      ProbeRecord q;
      q.target = p.at("target").get<int>();
      q.seed = p.at("seed").get<std::uint64_t>();
      q.hook = p.at("hook").get<std::string>();
      q.cav = p.at("cav").get<std::string>();
      q.scale = p.at("scale").get<double>();
      q.samples = p.at("samples").get<std::size_t>();
      q.target_before = p.at("target_before").get<double>();
      q.target_after = p.at("target_after").get<double>();
      q.true_before = p.at("true_before").get<double>();
      q.true_after = p.at("true_after").get<double>();
      r.probes.push_back(std::move(q));
    }
    for (const auto& t : j.at("toy")) {
      ToyRun u;
      u.tau_deg = t.at("tau_deg").get<double>();
      u.seed = t.at("seed").get<std::uint64_t>();
      u.n = t.at("n").get<std::size_t>();
      u.sigma2 = t.at("sigma2").get<double>();
      u.v_pattern = t.at("v_pattern").get<Vector>();
      u.v_filter = t.at("v_filter").get<Vector>();
      u.angle_pattern = t.at("angle_pattern").get<double>();
      u.angle_filter = t.at("angle_filter").get<double>();
      u.svm_objective = t.at("svm_objective").get<double>();
      u.svm_monotone = t.at("svm_monotone").get<bool>();
      u.classifier_w = t.at("classifier_w").get<std::vector<Vector>>();
      u.classifier_b = t.at("classifier_b").get<Vector>();
      u.classifier_accuracy = t.at("classifier_accuracy").get<double>();
      u.probe_index = t.at("probe_index").get<std::size_t>();
      u.probe = t.at("probe").get<Vector>();
      u.corrected_pattern = t.at("corrected_pattern").get<Vector>();
      u.corrected_filter = t.at("corrected_filter").get<Vector>();
      u.probe_label = t.at("probe_label").get<int>();
      u.pred_probe = t.at("pred_probe").get<int>();
      u.pred_pattern = t.at("pred_pattern").get<int>();
      u.pred_filter = t.at("pred_filter").get<int>();
      u.crossed_pattern = t.at("crossed_pattern").get<bool>();
      u.crossed_filter = t.at("crossed_filter").get<bool>();
      r.toy.push_back(std::move(u));
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed report JSON: ") + e.what());
  }
}

namespace {

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

std::string joined(const std::vector<double>& v, const char* spec, char sep) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += sep;
    s += fmt(spec, v[i]);
  }
  return s;
}

std::string render_csv(const ExperimentReport& r) {
  std::ostringstream os;
  if (r.kind == "toy") {
    os << "tau_deg,seed,angle_pattern,angle_filter,classifier_accuracy,"
          "pred_probe,pred_pattern,pred_filter,crossed_pattern,crossed_filter\n";
    for (const auto& t : r.toy) {
      os << fmt("%.17g", t.tau_deg) << ',' << t.seed << ','
         << fmt("%.17g", t.angle_pattern) << ',' << fmt("%.17g", t.angle_filter)
         << ',' << fmt("%.17g", t.classifier_accuracy) << ',' << t.pred_probe
         << ',' << t.pred_pattern << ',' << t.pred_filter << ','
         << (t.crossed_pattern ? 1 : 0) << ',' << (t.crossed_filter ? 1 : 0)
         << '\n';
    }
    return os.str();
  }
  os << "target,seed,hook,correction,cav,clean,poisoned,poisoned_by_epoch\n";
  for (const auto& c : r.cells) {
    os << c.target << ',' << c.seed << ',' << c.hook << ','
       << to_string(c.correction) << ',' << c.cav << ','
       << fmt("%.17g", c.clean) << ',' << fmt("%.17g", c.poisoned) << ','
       << joined(c.poisoned_by_epoch, "%.17g", ';') << '\n';
  }
  return os.str();
}

std::string render_markdown(const ExperimentReport& r) {
  std::ostringstream os;
  if (r.kind == "toy") {
    os << "| tau | seed | angle pattern | angle filter | crossed pattern | crossed filter |\n"
       << "|---|---|---|---|---|---|\n";
    for (const auto& t : r.toy) {
      os << "| " << fmt("%.3f", t.tau_deg) << " | " << t.seed << " | "
         << fmt("%.3f", t.angle_pattern) << " | " << fmt("%.3f", t.angle_filter)
         << " | " << (t.crossed_pattern ? "yes" : "no") << " | "
         << (t.crossed_filter ? "yes" : "no") << " |\n";
    }
    return os.str();
  }
  os << "| target | seed | hook | correction | cav | clean | poisoned |\n"
     << "|---|---|---|---|---|---|---|\n";
  for (const auto& c : r.cells) {
    os << "| " << c.target << " | " << c.seed << " | " << c.hook << " | "
       << to_string(c.correction) << " | " << c.cav << " | "
       << fmt("%.3f", c.clean) << " | " << fmt("%.3f", c.poisoned) << " |\n";
  }
  if (!r.aggregates.empty()) {
    os << "\n| hook | correction | cav | n | clean mean | clean min | clean max "
          "| poisoned mean | poisoned min | poisoned max |\n"
       << "|---|---|---|---|---|---|---|---|---|---|\n";
    for (const auto& a : r.aggregates) {
      os << "| " << a.hook << " | " << to_string(a.correction) << " | " << a.cav
         << " | " << a.count << " | " << fmt("%.3f", a.clean_mean) << " | "
         << fmt("%.3f", a.clean_min) << " | " << fmt("%.3f", a.clean_max)
         << " | " << fmt("%.3f", a.poisoned_mean) << " | "
         << fmt("%.3f", a.poisoned_min) << " | " << fmt("%.3f", a.poisoned_max)
         << " |\n";
    }
  }
  return os.str();
}

}  // namespace

std::string render_report(const ExperimentReport& report, ReportFormat format) {
  switch (format) {
    case ReportFormat::json: return dump_json(to_json(report)) + "\n";
    case ReportFormat::csv: return render_csv(report);
    case ReportFormat::markdown: return render_markdown(report);
  }
  return {};
}

}  // namespace pcav
