#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "pcav/experiments.hpp"

namespace fs = std::filesystem;
using namespace pcav;

namespace {

// ---- flat key=value config files --------------------------------------------

// Lines of `key = value`; blank lines and lines starting with '#' are skipped.
std::vector<std::pair<std::string, std::string>> read_flat_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config file " + path.string());
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  std::size_t lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    }
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') {
      value = value.substr(1, value.size() - 2);
    }
    if (key.empty()) throw Error(path.string() + ":" + std::to_string(lineno) + ": empty key");
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

// Splices config-file entries in front of the command-line flags of the
// subcommand, so the flags given explicitly win.
std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  std::vector<std::string> out;
  std::string config;
  std::vector<std::string> rest;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      config = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      config = args[i].substr(9);
    } else {
      rest.push_back(args[i]);
    }
  }
  if (config.empty() || rest.size() < 2) return rest;
  out.push_back(rest[0]);
  std::size_t pos = 1;
  out.push_back(rest[pos++]);  // subcommand
  // poison takes its attack as the first positional.
  if (out.back() == "poison" && pos < rest.size() && rest[pos].rfind("-", 0) != 0) {
    out.push_back(rest[pos++]);
  }
  for (const auto& [k, v] : read_flat_config(config)) {
    out.push_back("--" + k + "=" + v);
  }
  out.insert(out.end(), rest.begin() + static_cast<std::ptrdiff_t>(pos), rest.end());
  return out;
}

std::uint64_t env_seed() {
  const char* s = std::getenv("PCAV_SEED");
  if (!s || !*s) return 0;
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(s, &used);
    if (used != std::string(s).size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw Error(std::string("PCAV_SEED is not an unsigned integer: ") + s);
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << text;
}

Json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed JSON in " + path.string() + ": " + e.what());
  }
}

std::string iso_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Resolved-config snapshot plus a timestamp sidecar under the output directory.
void write_provenance(const CLI::App& sub, const fs::path& out) {
  std::istringstream in(sub.config_to_str(true, false));
  std::string text, line;
  while (std::getline(in, line)) {
    if (line.rfind("config=", 0) == 0 || line.rfind("help=", 0) == 0) continue;
    text += line + "\n";
  }
  write_text(out / (sub.get_name() + ".config"), text);
  Json meta;
  meta["command"] = sub.get_name();
  meta["started_utc"] = iso_now();
  write_text(out / (sub.get_name() + ".meta.json"), dump_json(meta) + "\n");
}

// ---- shared option groups ---------------------------------------------------

struct ArtifactArgs {
  std::string kind = "box";
  std::size_t box_size = 4;
  double shift_factor = 0.2;
  int color_index = 0;

  void add(CLI::App* app) {
    app->add_option("--artifact", kind, "box | shift | color")
        ->check(CLI::IsMember({"box", "shift", "color"}));
    app->add_option("--box-size", box_size);
    app->add_option("--shift-factor", shift_factor);
    app->add_option("--color-index", color_index);
  }
  ArtifactSpec spec(const ImageShape& shape) const {
    return make_artifact(kind, shape, box_size, shift_factor, color_index);
  }
};

struct PatternArgs {
  PatternConfig cfg;
  std::size_t size = 16;

  void add(CLI::App* app) {
    app->add_option("--classes", cfg.classes);
    app->add_option("--channels", cfg.shape.channels);
    app->add_option("--size", size, "image height and width");
    app->add_option("--n-per-class", cfg.n_per_class);
    app->add_option("--noise", cfg.noise_sigma);
    app->add_option("--contrast", cfg.contrast);
    app->add_option("--brightness", cfg.brightness_sigma);
    app->add_flag("--polarity", cfg.random_polarity, "random template polarity");
    app->add_option("--template-seed", cfg.template_seed);
  }
  PatternConfig resolved() const {
    PatternConfig c = cfg;
    c.shape.height = c.shape.width = size;
    return c;
  }
};

struct OptimizerArgs {
  OptimizerConfig opt;
  std::string kind = "adadelta";

  void add(CLI::App* app) {
    app->add_option("--optimizer", kind)->check(CLI::IsMember({"adadelta", "sgd"}));
    app->add_option("--epochs", opt.epochs);
    app->add_option("--lr", opt.lr);
    app->add_option("--lr-decay", opt.per_epoch_lr_factor);
    app->add_option("--batch", opt.batch_size);
  }
  OptimizerConfig resolved(std::uint64_t seed) const {
    OptimizerConfig o = opt;
    o.kind = parse_optimizer_kind(kind);
    o.seed = seed;
    return o;
  }
};

std::string tau_name(double tau) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", tau);
  return buf;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Concept vectors, ClArC corrections and the controlled experiments."};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast)
      ->always_capture_default();

  std::uint64_t default_seed = 0;
  try {
    default_seed = env_seed();
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }

  fs::path out_dir = "pcav_out";
  std::uint64_t seed = default_seed;
  std::string config_unused;
  auto common = [&](CLI::App* sub) {
    sub->add_option("-o,--out", out_dir, "output directory");
    sub->add_option("--seed", seed, "seed (falls back to PCAV_SEED)");
    sub->add_option("--config", config_unused, "flat key = value file; flags override it");
  };

  // toy
  auto* toy = app.add_subcommand("toy", "two-dimensional signal/distractor figure");
  std::vector<double> toy_taus{0.0, 45.0, 135.0};
  ToyFigureConfig toy_cfg;
  common(toy);
  toy->add_option("--tau", toy_taus, "distractor angles in degrees")->delimiter(',');
  toy->add_option("--sigma2", toy_cfg.sigma2);
  toy->add_option("--n", toy_cfg.n);
  toy->add_option("--fraction", toy_cfg.artifact_fraction_in_A, "artifact share of class A");
  toy->add_option("--classifier-epochs", toy_cfg.classifier_epochs);
  toy->add_option("--classifier-lr", toy_cfg.classifier_lr);

  // gen
  auto* gen = app.add_subcommand("gen", "generate a dataset");
  std::string gen_kind = "pattern", gen_split = "train", gen_name = "dataset.bin";
  bool gen_csv = false;
  PatternArgs gen_pat;
  ToyConfig gen_toy;
  double gen_tau_deg = 0.0;
  common(gen);
  gen->add_option("--kind", gen_kind)->check(CLI::IsMember({"pattern", "toy"}));
  gen->add_option("--split", gen_split)->check(CLI::IsMember({"train", "test"}));
  gen->add_option("--name", gen_name, "output file name");
  gen->add_flag("--csv", gen_csv, "also write a CSV copy");
  gen_pat.add(gen);
  gen->add_option("--tau", gen_tau_deg, "toy distractor angle in degrees");
  gen->add_option("--sigma2", gen_toy.sigma2);
  gen->add_option("--n", gen_toy.n, "toy sample count");

  // poison
  auto* poison = app.add_subcommand("poison", "apply an attack to a dataset");
  std::string poison_kind, poison_in, poison_name = "poisoned.bin", poison_split = "train";
  int poison_target = 0;
  double poison_rate = -1.0;
  ArtifactArgs poison_art;
  common(poison);
  poison->add_option("attack", poison_kind, "clever-hans | backdoor | test")
      ->required()
      ->check(CLI::IsMember({"clever-hans", "backdoor", "test"}));
  poison->add_option("--input", poison_in)->required();
  poison->add_option("--split", poison_split)->check(CLI::IsMember({"train", "test"}));
  poison->add_option("--name", poison_name);
  poison->add_option("--target", poison_target);
  poison->add_option("--rate", poison_rate, "default 0.1, 0.01 or 1.0 by attack");
  poison_art.add(poison);

  // train
  auto* trn = app.add_subcommand("train", "train a network");
  std::string trn_data, trn_test, trn_arch = "conv", trn_name = "model.bin";
  std::vector<std::size_t> trn_hidden;
  ConvNetOptions trn_net;
  OptimizerArgs trn_opt;
  common(trn);
  trn->add_option("--data", trn_data)->required();
  trn->add_option("--test", trn_test, "dataset evaluated after every epoch");
  trn->add_option("--arch", trn_arch)->check(CLI::IsMember({"conv", "dense"}));
  trn->add_option("--hidden", trn_hidden, "dense hidden widths")->delimiter(',');
  trn->add_option("--conv1", trn_net.conv1_channels);
  trn->add_option("--conv2", trn_net.conv2_channels);
  trn->add_option("--units", trn_net.hidden, "conv net dense width");
  trn->add_option("--name", trn_name);
  trn_opt.add(trn);

  // fit-cav
  auto* fit = app.add_subcommand("fit-cav", "fit a concept vector");
  std::string fit_model, fit_data, fit_kind = "pattern", fit_labels = "gt",
                                   fit_hook = "input", fit_name = "cav.json";
  int fit_target = -1;
  double fit_detector = 0.5;
  SvmConfig fit_svm;
  common(fit);
  fit->add_option("--model", fit_model, "required unless --hook input");
  fit->add_option("--data", fit_data)->required();
  fit->add_option("--kind", fit_kind)->check(CLI::IsMember({"filter", "pattern"}));
  fit->add_option("--labels", fit_labels)->check(CLI::IsMember({"gt", "predicted"}));
  fit->add_option("--hook", fit_hook);
  fit->add_option("--target", fit_target, "restrict to one class; -1 uses every sample");
  fit->add_option("--detector-fraction", fit_detector);
  fit->add_option("--svm-lambda", fit_svm.lambda);
  fit->add_option("--svm-epochs", fit_svm.epochs);
  fit->add_option("--name", fit_name);

  // correct
  auto* cor = app.add_subcommand("correct", "apply A-ClArC or P-ClArC");
  std::string cor_mode = "pclarc", cor_model, cor_cav, cor_data, cor_name = "corrected.bin";
  double cor_subset = 0.5;
  OptimizerArgs cor_opt;
  common(cor);
  cor->add_option("--mode", cor_mode)->check(CLI::IsMember({"aclarc", "pclarc"}));
  cor->add_option("--model", cor_model)->required();
  cor->add_option("--cav", cor_cav)->required();
  cor->add_option("--data", cor_data, "training data for aclarc");
  cor->add_option("--subset", cor_subset, "share of each batch routed through the hook");
  cor->add_option("--name", cor_name);
  cor_opt.add(cor);

  // eval
  auto* ev = app.add_subcommand("eval", "accuracy of a model");
  std::string ev_model, ev_data, ev_hook;
  common(ev);
  ev->add_option("--model", ev_model)->required();
  ev->add_option("--data", ev_data)->required();
  ev->add_option("--hook", ev_hook, "ClArC hook JSON written by correct --mode pclarc");

  // logits
  auto* lg = app.add_subcommand("logits", "softmax shift when the concept is added");
  std::string lg_model, lg_data, lg_cav;
  int lg_target = 0;
  double lg_scale = -1.0;
  bool lg_all = false;
  common(lg);
  lg->add_option("--model", lg_model)->required();
  lg->add_option("--data", lg_data)->required();
  lg->add_option("--cav", lg_cav)->required();
  lg->add_option("--target", lg_target);
  lg->add_option("--scale", lg_scale, "default |z+ - z-|");
  lg->add_flag("--include-target", lg_all, "also probe target-class samples");

  // neighbors
  auto* nb = app.add_subcommand("neighbors", "samples closest to the concept");
  std::string nb_model, nb_data, nb_cav;
  std::size_t nb_k = 10;
  common(nb);
  nb->add_option("--model", nb_model, "required unless the concept lives at the input");
  nb->add_option("--data", nb_data)->required();
  nb->add_option("--cav", nb_cav)->required();
  nb->add_option("-k,--k", nb_k);

  // suite
  auto* su = app.add_subcommand("suite", "controlled poisoning experiment");
  ExperimentConfig su_cfg;
  PatternArgs su_pat;
  ArtifactArgs su_art;
  OptimizerArgs su_opt;
  std::string su_attack = "clever-hans", su_format = "all";
  double su_rch = 0.1, su_rbd = 0.01;
  std::size_t su_seeds = 3;
  std::vector<std::string> su_hooks{"input", "layer1"};
  std::vector<std::string> su_cavs{"filter", "pattern_gt", "pattern_predicted"};
  std::vector<std::string> su_corrections{"baseline", "aclarc", "pclarc"};
  bool su_no_probes = false;
  common(su);
  su->add_option("--attack", su_attack)->check(CLI::IsMember({"clever-hans", "backdoor"}));
  su->add_option("--r-ch", su_rch);
  su->add_option("--r-bd", su_rbd);
  su->add_option("--r-p", su_cfg.r_p);
  su->add_option("--seeds", su_seeds, "number of seeds, counted up from --seed");
  su->add_option("--targets", su_cfg.targets)->delimiter(',');
  su->add_option("--hooks", su_hooks)->delimiter(',');
  su->add_option("--cavs", su_cavs)->delimiter(',');
  su->add_option("--corrections", su_corrections)->delimiter(',');
  su->add_option("--test-per-class", su_cfg.test_per_class);
  su->add_option("--ft-epochs", su_cfg.finetune_epochs);
  su->add_option("--subset", su_cfg.subset_fraction);
  su->add_option("--detector-fraction", su_cfg.detector_fraction);
  su->add_option("--svm-lambda", su_cfg.svm.lambda);
  su->add_option("--svm-epochs", su_cfg.svm.epochs);
  su->add_option("--conv1", su_cfg.network.conv1_channels);
  su->add_option("--conv2", su_cfg.network.conv2_channels);
  su->add_option("--units", su_cfg.network.hidden);
  su->add_flag("--no-probes", su_no_probes);
  su->add_option("--jobs", su_cfg.jobs);
  su->add_option("--format", su_format)->check(CLI::IsMember({"all", "json", "csv", "markdown"}));
  su_pat.add(su);
  su_art.add(su);
  su_opt.add(su);

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite differences against backprop");
  std::string gc_arch = "conv";
  double gc_eps = 1e-5;
  common(gc);
  gc->add_option("--arch", gc_arch)->check(CLI::IsMember({"conv", "dense"}));
  gc->add_option("--epsilon", gc_eps);

  std::vector<std::string> args(argv, argv + argc);
  try {
    args = expand_config(args);
    std::vector<const char*> cargs;
    for (const auto& a : args) cargs.push_back(a.c_str());
    app.parse(static_cast<int>(cargs.size()), cargs.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 1;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }

  CLI::App* sub = app.get_subcommands().front();
  try {
    fs::create_directories(out_dir);
    write_provenance(*sub, out_dir);

    if (sub == toy) {
      toy_cfg.taus_deg = toy_taus;
      toy_cfg.seeds = {seed};
      for (double tau : toy_taus) {
        ToyConfig tc;
        tc.tau = tau * std::acos(-1.0) / 180.0;
        tc.sigma2 = toy_cfg.sigma2;
        tc.n = toy_cfg.n;
        tc.artifact_fraction_in_A = toy_cfg.artifact_fraction_in_A;
        tc.seed = seed;
        ToyRun run = run_toy(tc, toy_cfg);
        run.tau_deg = tau;
        ExperimentReport rep;
        rep.kind = "toy";
        ToyFigureConfig one = toy_cfg;
        one.taus_deg = {tau};
        rep.config = to_json(one);
        rep.toy.push_back(run);
        const std::string name = tau_name(tau);
        write_text(out_dir / ("toy_" + name + ".json"), render_report(rep, ReportFormat::json));
        write_text(out_dir / ("toy_" + name + ".svg"), render_toy_svg(generate_toy(tc), run));
        std::printf("tau %s: pattern %.3f deg, filter %.3f deg, crossed pattern %d filter %d\n",
                    name.c_str(), run.angle_pattern, run.angle_filter,
                    run.crossed_pattern ? 1 : 0, run.crossed_filter ? 1 : 0);
      }
    } else if (sub == gen) {
      LabeledDataset ds;
      if (gen_kind == "pattern") {
        PatternConfig pc = gen_pat.resolved();
        pc.split = parse_split(gen_split);
        Rng rng(seed);
        ds = gen_pattern_classes(pc, rng);
      } else {
        gen_toy.tau = gen_tau_deg * std::acos(-1.0) / 180.0;
        gen_toy.seed = seed;
        ds = generate_toy(gen_toy);
        ds.split = parse_split(gen_split);
      }
      write_dataset(ds, out_dir / gen_name);
      if (gen_csv) {
        fs::path csv = out_dir / gen_name;
        csv.replace_extension(".csv");
        write_dataset_csv(ds, csv);
      }
      std::printf("%zu samples, %zu classes\n", ds.size(), ds.num_classes);
    } else if (sub == poison) {
      const LabeledDataset ds = read_dataset(poison_in, parse_split(poison_split));
      const ArtifactSpec spec = poison_art.spec(ds.shape);
      Rng rng(seed);
      LabeledDataset out;
      if (poison_kind == "clever-hans") {
        out = poison_clever_hans(ds, poison_target, poison_rate < 0 ? 0.1 : poison_rate, spec, rng);
      } else if (poison_kind == "backdoor") {
        out = poison_backdoor(ds, poison_target, poison_rate < 0 ? 0.01 : poison_rate, spec, rng);
      } else {
        out = poison_test(ds, poison_rate < 0 ? 1.0 : poison_rate, spec, rng);
      }
      write_dataset(out, out_dir / poison_name);
      const PoisonRecord& rec = out.provenance.back();
      Json j = {{"attack", rec.attack}, {"artifact", rec.artifact}, {"target", rec.target},
                {"rate", rec.rate}, {"count", rec.count}};
      fs::path side = out_dir / poison_name;
      side.replace_extension(".json");
      write_text(side, dump_json(j) + "\n");
      std::printf("%s: %zu samples carry the artifact\n", rec.attack.c_str(), rec.count);
    } else if (sub == trn) {
      const LabeledDataset ds = read_dataset(trn_data);
      NetworkModel model =
          trn_arch == "conv"
              ? NetworkModel::conv_net(ds.shape, ds.num_classes, mix_seed(seed, 5), trn_net)
              : NetworkModel::dense_net(ds.shape, ds.num_classes, mix_seed(seed, 5), trn_hidden);
      LabeledDataset test;
      std::vector<NamedDataset> evals;
      if (!trn_test.empty()) {
        test = read_dataset(trn_test, Split::test);
        evals.push_back({"test", &test});
      }
      const TrainHistory h = train(model, ds, trn_opt.resolved(mix_seed(seed, 6)), evals);
      write_model(model, out_dir / trn_name);
      Json j = {{"loss", h.loss}, {"accuracy", h.accuracy}};
      if (!evals.empty()) j["test_accuracy"] = h.eval_accuracy[0];
      write_text(out_dir / "history.json", dump_json(j) + "\n");
      std::printf("final loss %.6f, train accuracy %.4f\n", h.loss.back(), h.accuracy.back());
    } else if (sub == fit) {
      const LabeledDataset ds = read_dataset(fit_data);
      const HookPoint hook = HookPoint::parse(fit_hook);
      std::vector<std::size_t> rows;
      for (std::size_t i = 0; i < ds.size(); ++i) {
        if (fit_target < 0 || ds.y_c[i] == fit_target) rows.push_back(i);
      }
      if (rows.empty()) throw Error("no samples of class " + std::to_string(fit_target));
      Tensor x = ds.samples.select_rows(rows);
      if (!hook.is_input()) {
        if (fit_model.empty()) throw Error("--model is required for hook " + fit_hook);
        x = extract_features(read_model(fit_model), x, hook);
      }
      std::vector<int> ys;
      for (std::size_t i : rows) ys.push_back(ds.y_s[i]);
      fit_svm.seed = mix_seed(seed, 8);
      LabelSource source = LabelSource::ground_truth;
      if (fit_labels == "predicted") {
        SvmConfig det_cfg = fit_svm;
        det_cfg.seed = mix_seed(seed, 9);
        const DetectorResult det = predict_artifact_labels(x, ys, fit_detector, det_cfg);
        std::printf("detector agreement %.4f\n", det.agreement);
        ys = det.labels;
        source = LabelSource::predicted;
      }
      ConceptVector cav;
      if (fit_kind == "filter") {
        cav = fit_filter_cav(x, ys, fit_svm, hook);
      } else {
        PatternOptions po;
        po.hook = hook;
        cav = fit_pattern_cav(x, ys, po);
      }
      cav.fit_meta.labels = source;
      write_concept(cav, out_dir / fit_name);
      std::printf("%s concept at %s, dim %zu, gap %.6f\n", to_string(cav.kind).c_str(),
                  hook.to_string().c_str(), cav.dim(), concept_gap(cav));
    } else if (sub == cor) {
      NetworkModel model = read_model(cor_model);
      const ConceptVector cav = read_concept(cor_cav);
      if (cor_mode == "aclarc") {
        if (cor_data.empty()) throw Error("--data is required for aclarc");
        const LabeledDataset ds = read_dataset(cor_data);
        const ClarcHook hook = make_hook(ClarcMode::augmentive, cav);
        OptimizerConfig opt = cor_opt.resolved(mix_seed(seed, 7));
        const TrainHistory h = finetune_subsequent(model, ds, hook, cor_subset, opt);
        write_model(model, out_dir / cor_name);
        std::printf("fine-tuned %zu epochs, final loss %.6f\n", h.loss.size(), h.loss.back());
      } else {
        const ClarcHook hook = make_hook(ClarcMode::projective, cav);
        Json j = {{"mode", to_string(hook.mode)}, {"cav", to_json(cav)}};
        write_model(model, out_dir / cor_name);
        write_text(out_dir / "hook.json", dump_json(j) + "\n");
        std::printf("projective hook at %s written\n", cav.hook.to_string().c_str());
      }
    } else if (sub == ev) {
      const NetworkModel model = read_model(ev_model);
      const LabeledDataset ds = read_dataset(ev_data, Split::test);
      std::optional<ClarcHook> hook;
      if (!ev_hook.empty()) {
        const Json j = read_json(ev_hook);
        try {
          hook = make_hook(parse_clarc_mode(j.at("mode").get<std::string>()),
                           concept_from_json(j.at("cav")));
        } catch (const nlohmann::json::exception& e) {
          throw Error(std::string("malformed hook JSON: ") + e.what());
        }
      }
      const double acc = evaluate(model, ds, hook ? &*hook : nullptr);
      write_text(out_dir / "eval.json", dump_json(Json{{"accuracy", acc}, {"samples", ds.size()}}) + "\n");
      std::printf("accuracy %.4f on %zu samples\n", acc, ds.size());
    } else if (sub == lg) {
      const NetworkModel model = read_model(lg_model);
      const LabeledDataset ds = read_dataset(lg_data, Split::test);
      const ConceptVector cav = read_concept(lg_cav);
      const double scale = lg_scale < 0 ? concept_gap(cav) : lg_scale;
      const LogitShiftReport r = probe_logit_shift(model, ds, cav, lg_target, scale, !lg_all);
      write_text(out_dir / "logits.json", dump_json(to_json(r)) + "\n");
      std::printf("target %d: %.4f -> %.4f, true class %.4f -> %.4f\n", r.target,
                  r.target_before, r.target_after, r.true_before, r.true_after);
    } else if (sub == nb) {
      const LabeledDataset ds = read_dataset(nb_data);
      const ConceptVector cav = read_concept(nb_cav);
      Tensor x = ds.samples;
      if (!cav.hook.is_input()) {
        if (nb_model.empty()) throw Error("--model is required for hook " + cav.hook.to_string());
        x = extract_features(read_model(nb_model), ds, cav.hook);
      }
      const NeighborResult r = nearest_neighbors(cav, x, nb_k);
      Json items = Json::array();
      for (std::size_t i = 0; i < r.indices.size(); ++i) {
        const std::size_t idx = r.indices[i];
        items.push_back({{"index", idx}, {"similarity", r.similarities[i]},
                         {"y_c", ds.y_c[idx]}, {"y_s", ds.y_s[idx]}});
        std::printf("%zu\t%.6f\tclass %d\tartifact %d\n", idx, r.similarities[i],
                    ds.y_c[idx], ds.y_s[idx]);
      }
      write_text(out_dir / "neighbors.json",
                 dump_json(Json{{"neighbors", items}, {"skipped_zero_rows", r.skipped_zero_rows}}) + "\n");
    } else if (sub == su) {
      su_cfg.data = su_pat.resolved();
      su_cfg.attack = su_attack == "clever-hans" ? Attack::clever_hans : Attack::backdoor;
      su_cfg.rate = su_cfg.attack == Attack::clever_hans ? su_rch : su_rbd;
      su_cfg.artifact = {su_art.kind, su_art.box_size, su_art.shift_factor, su_art.color_index};
      su_cfg.seeds.clear();
      for (std::size_t i = 0; i < su_seeds; ++i) su_cfg.seeds.push_back(seed + i);
      su_cfg.hooks.clear();
      for (const auto& h : su_hooks) su_cfg.hooks.push_back(HookPoint::parse(h));
      su_cfg.cavs.clear();
      for (const auto& c : su_cavs) su_cfg.cavs.push_back(parse_cav_choice(c));
      su_cfg.corrections.clear();
      for (const auto& c : su_corrections) su_cfg.corrections.push_back(parse_correction(c));
      su_cfg.optimizer = su_opt.resolved(0);
      su_cfg.probes = !su_no_probes;
      const ExperimentReport rep = run_controlled_suite(su_cfg);
      if (su_format == "all" || su_format == "json") {
        write_text(out_dir / "report.json", render_report(rep, ReportFormat::json));
      }
      if (su_format == "all" || su_format == "csv") {
        write_text(out_dir / "report.csv", render_report(rep, ReportFormat::csv));
      }
      if (su_format == "all" || su_format == "markdown") {
        write_text(out_dir / "report.md", render_report(rep, ReportFormat::markdown));
      }
      for (const auto& a : rep.aggregates) {
        std::printf("%-7s %-9s %-18s clean %.3f poisoned %.3f\n", a.hook.c_str(),
                    to_string(a.correction).c_str(), a.cav.c_str(), a.clean_mean,
                    a.poisoned_mean);
      }
    } else if (sub == gc) {
      // Small inputs; redraw until no ReLU or maxpool input sits near a kink.
      const ImageShape shape = gc_arch == "conv" ? ImageShape{1, 8, 8} : ImageShape{1, 4, 4};
      for (std::uint64_t attempt = 0; attempt < 100; ++attempt) {
        const std::uint64_t s = mix_seed(seed, attempt);
        const NetworkModel model =
            gc_arch == "conv" ? NetworkModel::conv_net(shape, 3, s, {4, 4, 8, 0.25, 0.5})
                              : NetworkModel::dense_net(shape, 3, s, {8});
        Rng rng(mix_seed(s, 1));
        Tensor x = Tensor::matrix(4, shape.size());
        for (double& v : x.data()) v = rng.uniform();
        if (kink_margin(model, x) < 1e-4) continue;
        const std::vector<int> labels{0, 1, 2, 0};
        const double err = gradient_check(model, x, labels, gc_eps);
        write_text(out_dir / "gradcheck.json",
                   dump_json(Json{{"arch", gc_arch}, {"max_relative_error", err},
                                  {"parameters", model.parameter_count()}}) + "\n");
        std::printf("max relative error %.3e over %zu parameters\n", err,
                    model.parameter_count());
        return err < 1e-4 ? 0 : 1;
      }
      throw Error("no kink-free draw found");
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
