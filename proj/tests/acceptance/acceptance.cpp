// Runs the ten acceptance criteria and prints one PASS/FAIL line for each.
//
//   pcav_acceptance [--out DIR] [--expect-fail N]... [--only N]...
//
// Exit status is 0 when every criterion that was not listed with --expect-fail
// passes. Expected failures still print FAIL.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <set>
#include <string>

#include "CLI11.hpp"
#include "pcav/clarc.hpp"
#include "pcav/concepts.hpp"
#include "pcav/experiments.hpp"
#include "pcav/models.hpp"

using namespace pcav;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

struct Outcome {
  bool pass = true;
  std::string detail;
  Json result;  // deterministic content only; compared by criterion 10

  void require(bool ok, const std::string& what) {
    if (!ok) pass = false;
    if (!detail.empty()) detail += "; ";
    detail += (ok ? "" : "NOT ") + what;
  }
};

// ---- 1 ----------------------------------------------------------------------

Outcome pattern_oracle() {
  Outcome out;
  const auto t0 = Clock::now();
  Rng rng(1001);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 3 + rng.below(998), d = 1 + rng.below(64);
    Tensor x = Tensor::matrix(n, d);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) y[i] = rng.uniform() < 0.3 ? 1 : -1;
    y[0] = 1;
    y[1] = -1;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < d; ++j) x.at(i, j) = 2.0 * rng.normal() + 0.5 * j * y[i];
    }
    const ConceptVector cav = fit_pattern_cav(x, y);
    // Least squares x_j ~ a + b y through the normal equations, long double.
    long double s1 = 0, sy = 0, syy = 0;
    for (int v : y) {
      s1 += 1;
      sy += v;
      syy += static_cast<long double>(v) * v;
    }
    for (std::size_t j = 0; j < d; ++j) {
      long double sx = 0, sxy = 0;
      for (std::size_t i = 0; i < n; ++i) {
        sx += x.at(i, j);
        sxy += x.at(i, j) * static_cast<long double>(y[i]);
      }
      const double b = static_cast<double>((s1 * sxy - sy * sx) / (s1 * syy - sy * sy));
      worst = std::max(worst, std::abs(b - cav.raw[j]));
    }
  }
  const double secs = seconds_since(t0);
  out.require(worst <= 1e-10, "max |raw - ols| = " + fmt("%.2e", worst) + " <= 1e-10");
  out.require(secs < 5.0, "runtime " + fmt("%.2f", secs) + " s < 5 s");
  out.result = {{"max_error", worst}};
  return out;
}

// ---- 2 ----------------------------------------------------------------------

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

Outcome toy_geometry() {
  Outcome out;
  const auto t0 = Clock::now();
  ToyFigureConfig cfg;
  cfg.taus_deg = {0.0, 45.0, 135.0};
  cfg.seeds.clear();
  for (std::uint64_t s = 0; s < 10; ++s) cfg.seeds.push_back(s);
  cfg.sigma2 = 0.15;
  cfg.n = 10000;
  const ExperimentReport r = run_toy_figure(cfg);
  const double secs = seconds_since(t0);

  double worst_pattern = 0.0;
  std::vector<double> pat45, fil45;
  std::size_t filter_crossed = 0, pattern_kept = 0, runs45 = 0;
  for (const ToyRun& t : r.toy) {
    worst_pattern = std::max(worst_pattern, t.angle_pattern);
    if (t.tau_deg == 45.0) {
      ++runs45;
      pat45.push_back(t.angle_pattern);
      fil45.push_back(t.angle_filter);
      filter_crossed += t.crossed_filter;
      pattern_kept += !t.crossed_pattern;
    }
  }
  const double gap = median(fil45) - median(pat45);
  out.require(worst_pattern < 2.0, "max pattern angle " + fmt("%.3f", worst_pattern) + " < 2 deg");
  out.require(gap >= 5.0, "median filter - pattern angle at 45 deg = " + fmt("%.2f", gap) + " >= 5");
  out.require(filter_crossed == runs45 && pattern_kept == runs45,
              "filter-corrected probe misclassified in " + std::to_string(filter_crossed) + "/" +
                  std::to_string(runs45) + " seeds, pattern-corrected kept in " +
                  std::to_string(pattern_kept) + "/" + std::to_string(runs45));
  out.require(secs < 30.0, "runtime " + fmt("%.1f", secs) + " s < 30 s");
  out.result = to_json(r);
  return out;
}

// ---- 3 ----------------------------------------------------------------------

Outcome projection_algebra() {
  Outcome out;
  Rng rng(3003);
  double e_idem = 0, e_pin = 0, e_perp = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t d = 1 + rng.below(256);
    Vector v(d), x(d), z(d);
    for (auto& a : v) a = rng.normal();
    const double nv = norm(v);
    for (auto& a : v) a /= nv;
    for (auto& a : x) a = 3.0 * rng.normal();
    for (auto& a : z) a = 3.0 * rng.normal();
    const bool augment = trial % 2 == 0;
    auto map = [&](const Vector& p) {
      return augment ? aclarc_map(p, v, z) : pclarc_map(p, v, z);
    };
    const Vector y = map(x);
    const Vector yy = map(y);
    for (std::size_t j = 0; j < d; ++j) e_idem = std::max(e_idem, std::abs(yy[j] - y[j]));
    e_pin = std::max(e_pin, std::abs(dot(v, y) - dot(v, z)));
    const double vx = dot(v, x), vy = dot(v, y);
    for (std::size_t j = 0; j < d; ++j) {
      e_perp = std::max(e_perp, std::abs((y[j] - v[j] * vy) - (x[j] - v[j] * vx)));
    }
  }
  out.require(e_idem <= 1e-9, "idempotence " + fmt("%.1e", e_idem));
  out.require(e_pin <= 1e-9, "pinning " + fmt("%.1e", e_pin));
  out.require(e_perp <= 1e-9, "complement " + fmt("%.1e", e_perp));
  out.result = {{"idempotence", e_idem}, {"pinning", e_pin}, {"complement", e_perp}};
  return out;
}

// ---- 4 ----------------------------------------------------------------------

double checked_gradient(const NetworkModel& model, std::size_t batch, std::uint64_t seed) {
  Rng rng(seed);
  const ImageShape s = model.input_shape();
  for (;;) {
    Tensor x({batch, s.channels, s.height, s.width}, 0.0);
    for (double& v : x.data()) v = rng.uniform();
    if (kink_margin(model, x) < 1e-4) continue;
    std::vector<int> y(batch);
    for (auto& c : y) c = static_cast<int>(rng.below(model.num_classes()));
    return gradient_check(model, x, y, 1e-5);
  }
}

Outcome gradient_checks() {
  Outcome out;
  const NetworkModel dense = NetworkModel::dense_net({1, 8, 8}, 10, 41, {32, 16});
  const NetworkModel conv = NetworkModel::conv_net({1, 16, 16}, 10, 42);
  const double ed = checked_gradient(dense, 4, 43);
  const double ec = checked_gradient(conv, 2, 44);
  out.require(ed < 1e-4, "dense " + fmt("%.2e", ed) + " < 1e-4");
  out.require(ec < 1e-4, "conv " + fmt("%.2e", ec) + " < 1e-4");
  out.result = {{"dense", ed}, {"conv", ec}};
  return out;
}

// ---- 5, 6, 8, 9: one Clever Hans suite ----------------------------------------

ExperimentConfig clever_hans_config() {
  ExperimentConfig cfg;
  cfg.data.classes = 10;
  cfg.data.shape = {1, 16, 16};
  cfg.data.n_per_class = 300;
  cfg.data.noise_sigma = 0.1;
  cfg.data.contrast = 0.05;
  cfg.attack = Attack::clever_hans;
  cfg.rate = 0.1;
  cfg.r_p = 1.0;
  cfg.artifact.kind = "box";
  cfg.artifact.box_size = 4;
  cfg.targets = {0, 1, 2};
  cfg.seeds = {0, 1, 2};
  return cfg;
}

ExperimentConfig backdoor_config() {
  ExperimentConfig cfg;
  cfg.data.classes = 10;
  cfg.data.shape = {1, 16, 16};
  cfg.data.n_per_class = 1000;
  cfg.data.noise_sigma = 0.1;
  cfg.data.contrast = 0.05;
  cfg.attack = Attack::backdoor;
  cfg.rate = 0.01;
  cfg.r_p = 1.0;
  cfg.artifact.kind = "shift";
  cfg.artifact.shift_factor = 0.2;
  cfg.targets = {0};
  cfg.seeds = {0, 1, 2};
  cfg.cavs = {CavChoice::filter, CavChoice::pattern_gt};
  cfg.probes = false;
  return cfg;
}

const SuiteAggregate* find_aggregate(const ExperimentReport& r, const std::string& hook,
                                     Correction c, const std::string& cav) {
  for (const auto& a : r.aggregates) {
    if (a.hook == hook && a.correction == c && a.cav == cav) return &a;
  }
  return nullptr;
}

std::vector<std::string> hook_names(const ExperimentReport& r) {
  std::vector<std::string> out;
  for (const auto& a : r.aggregates) {
    if (std::find(out.begin(), out.end(), a.hook) == out.end()) out.push_back(a.hook);
  }
  return out;
}

Outcome clever_hans_trend(const ExperimentReport& r, double secs) {
  Outcome out;
  for (const std::string& hook : hook_names(r)) {
    const auto* base = find_aggregate(r, hook, Correction::baseline, "none");
    const auto* pat = find_aggregate(r, hook, Correction::pclarc, "pattern_gt");
    const auto* fil = find_aggregate(r, hook, Correction::pclarc, "filter");
    if (!base || !pat || !fil) {
      out.require(false, hook + ": suite lacks baseline or P-ClArC cells");
      continue;
    }
    const double gap = base->clean_mean - base->poisoned_mean;
    const double recovered = (pat->poisoned_mean - base->poisoned_mean) / gap;
    double worst_clean = 0.0;
    for (const auto& a : r.aggregates) {
      if (a.hook != hook || a.correction == Correction::baseline) continue;
      worst_clean = std::max(worst_clean, std::abs(a.clean_mean - base->clean_mean));
    }
    out.require(gap >= 0.15, hook + " baseline gap " + fmt("%.3f", gap) + " >= 0.15");
    out.require(recovered >= 0.5, hook + " P-ClArC(pattern) recovers " + fmt("%.2f", recovered) + " >= 0.5");
    out.require(pat->poisoned_mean >= fil->poisoned_mean - 0.01,
                hook + " pattern " + fmt("%.3f", pat->poisoned_mean) + " >= filter " +
                    fmt("%.3f", fil->poisoned_mean) + " - 0.01");
    out.require(worst_clean <= 0.03, hook + " corrected clean within " + fmt("%.3f", worst_clean) + " <= 0.03");
  }
  out.require(secs < 600.0, "runtime " + fmt("%.0f", secs) + " s < 600 s");
  return out;
}

Outcome aclarc_trend(const ExperimentReport& r) {
  Outcome out;
  for (const auto& a : r.aggregates) {
    if (a.correction != Correction::aclarc) continue;
    const auto* base = find_aggregate(r, a.hook, Correction::baseline, "none");
    const auto& e = a.poisoned_by_epoch_mean;
    if (!base || e.size() < 2) {
      out.require(false, a.hook + "/" + a.cav + ": missing per-epoch means");
      continue;
    }
    const double total = e.back() - e.front();
    const double share = total > 0.0 ? (e[1] - e.front()) / total : 0.0;
    out.require(a.poisoned_mean > base->poisoned_mean,
                a.hook + "/" + a.cav + " " + fmt("%.3f", a.poisoned_mean) + " > baseline " +
                    fmt("%.3f", base->poisoned_mean));
    out.require(share >= 0.6, a.hook + "/" + a.cav + " epoch-1 share " + fmt("%.2f", share) + " >= 0.6");
  }
  return out;
}

Outcome predicted_label_equivalence(const ExperimentReport& r) {
  Outcome out;
  std::map<std::tuple<int, std::uint64_t, std::string, Correction>, double> gt;
  for (const auto& c : r.cells) {
    if (c.cav == "pattern_gt") gt[{c.target, c.seed, c.hook, c.correction}] = c.poisoned;
  }
  double worst = 0.0;
  std::size_t compared = 0;
  for (const auto& c : r.cells) {
    if (c.cav != "pattern_predicted") continue;
    const auto it = gt.find({c.target, c.seed, c.hook, c.correction});
    if (it == gt.end()) continue;
    ++compared;
    worst = std::max(worst, std::abs(c.poisoned - it->second));
  }
  double agreement = 1.0;
  for (const auto& f : r.fits) {
    if (f.cav == "pattern_predicted") agreement = std::min(agreement, f.label_agreement);
  }
  out.require(compared > 0, std::to_string(compared) + " cell pairs");
  out.require(worst <= 0.02, "max |predicted - gt| poisoned = " + fmt("%.4f", worst) + " <= 0.02");
  out.detail += "; min detector agreement " + fmt("%.3f", agreement);
  return out;
}

Outcome logit_probe(const ExperimentReport& r) {
  Outcome out;
  std::size_t increased = 0;
  for (const auto& p : r.probes) increased += p.target_after > p.target_before;
  out.require(!r.probes.empty() && increased == r.probes.size(),
              "target output increased in " + std::to_string(increased) + "/" +
                  std::to_string(r.probes.size()) + " probes");
  return out;
}

// ---- 7 ----------------------------------------------------------------------

Outcome backdoor_trend(const ExperimentReport& r) {
  Outcome out;
  for (const std::string& hook : hook_names(r)) {
    const auto* base = find_aggregate(r, hook, Correction::baseline, "none");
    if (!base) {
      out.require(false, hook + ": no baseline");
      continue;
    }
    out.require(base->poisoned_mean < 0.3, hook + " baseline poisoned " + fmt("%.3f", base->poisoned_mean) + " < 0.3");
    for (Correction c : {Correction::aclarc, Correction::pclarc}) {
      const auto* pat = find_aggregate(r, hook, c, "pattern_gt");
      const auto* fil = find_aggregate(r, hook, c, "filter");
      if (!pat || !fil) continue;
      out.require(pat->poisoned_mean > fil->poisoned_mean,
                  hook + " " + to_string(c) + " pattern " + fmt("%.3f", pat->poisoned_mean) +
                      " > filter " + fmt("%.3f", fil->poisoned_mean));
    }
  }
  return out;
}

// ---- driver -------------------------------------------------------------------

struct Run {
  std::map<int, Outcome> outcomes;
  Json results;
};

Run run_all(const std::set<int>& only) {
  Run run;
  auto wanted = [&](int k) { return only.empty() || only.count(k); };
  auto record = [&](int k, Outcome o) {
    run.results[std::to_string(k)] = o.result;
    run.outcomes[k] = std::move(o);
  };
  if (wanted(1)) record(1, pattern_oracle());
  if (wanted(2)) record(2, toy_geometry());
  if (wanted(3)) record(3, projection_algebra());
  if (wanted(4)) record(4, gradient_checks());
  if (wanted(5) || wanted(6) || wanted(8) || wanted(9)) {
    const auto t0 = Clock::now();
    const ExperimentReport ch = run_controlled_suite(clever_hans_config());
    const double secs = seconds_since(t0);
    run.results["clever_hans"] = to_json(ch);
    if (wanted(5)) record(5, clever_hans_trend(ch, secs));
    if (wanted(6)) record(6, aclarc_trend(ch));
    if (wanted(8)) record(8, predicted_label_equivalence(ch));
    if (wanted(9)) record(9, logit_probe(ch));
  }
  if (wanted(7)) {
    const ExperimentReport bd = run_controlled_suite(backdoor_config());
    run.results["backdoor"] = to_json(bd);
    record(7, backdoor_trend(bd));
  }
  return run;
}

const char* kNames[] = {"",
                        "pattern-oracle equivalence",
                        "toy geometry",
                        "projection algebra",
                        "gradient check",
                        "clever hans trend",
                        "a-clarc trend",
                        "backdoor trend",
                        "predicted-label equivalence",
                        "logit probe",
                        "determinism"};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string out_dir;
  std::vector<int> expect_fail, only_list;
  app.add_option("--out", out_dir, "write the result JSON of both runs here");
  app.add_option("--expect-fail", expect_fail, "criteria known not to hold");
  app.add_option("--only", only_list, "run a subset (criterion 10 then compares the subset)");
  CLI11_PARSE(app, argc, argv);
  const std::set<int> only(only_list.begin(), only_list.end());
  const std::set<int> expected(expect_fail.begin(), expect_fail.end());

  std::map<int, Outcome> outcomes;
  std::string first, second;
  try {
    Run a = run_all(only);
    for (auto& [k, o] : a.outcomes) {
      std::printf("criterion %d: %s  %s (%s)\n", k, o.pass ? "PASS" : "FAIL", kNames[k],
                  o.detail.c_str());
      std::fflush(stdout);
    }
    outcomes = std::move(a.outcomes);
    first = dump_json(a.results);
    if (only.empty() || only.count(10)) {
      Run b = run_all(only);
      second = dump_json(b.results);
      Outcome det;
      det.require(first == second, "report JSON identical across runs (" +
                                       std::to_string(first.size()) + " bytes)");
      std::printf("criterion 10: %s  %s (%s)\n", det.pass ? "PASS" : "FAIL", kNames[10],
                  det.detail.c_str());
      outcomes[10] = std::move(det);
    }
  } catch (const std::exception& e) {
    std::printf("error: %s\n", e.what());
    return 2;
  }

  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ofstream(std::filesystem::path(out_dir) / "run1.json") << first;
    if (!second.empty()) std::ofstream(std::filesystem::path(out_dir) / "run2.json") << second;
  }

  int unexpected = 0;
  for (const auto& [k, o] : outcomes) {
    if (!o.pass && !expected.count(k)) ++unexpected;
    if (o.pass && expected.count(k)) std::printf("note: criterion %d passed unexpectedly\n", k);
  }
  std::printf("%zu/%zu criteria pass", static_cast<std::size_t>(std::count_if(
                                           outcomes.begin(), outcomes.end(),
                                           [](const auto& kv) { return kv.second.pass; })),
              outcomes.size());
  if (!expected.empty()) {
    std::printf("; expected failures:");
    for (int k : expected) std::printf(" %d", k);
  }
  std::printf("\n");
  return unexpected == 0 ? 0 : 1;
}
