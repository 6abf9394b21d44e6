#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cmath>

#include "pcav/clarc.hpp"
#include "pcav/concepts.hpp"
#include "pcav/experiments.hpp"
#include "pcav/toygen.hpp"

namespace py = pybind11;
using namespace pcav;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  if (a.ndim() != 2) throw py::value_error("expected a 2-d array");
  const auto n = static_cast<std::size_t>(a.shape(0));
  const auto d = static_cast<std::size_t>(a.shape(1));
  return Tensor({n, d}, Vector(a.data(), a.data() + n * d));
}

Vector to_vector(const Array& a) {
  if (a.ndim() != 1) throw py::value_error("expected a 1-d array");
  return Vector(a.data(), a.data() + a.size());
}

Array to_array(const Tensor& t) {
  Array out({t.rows(), t.cols()});
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

py::array_t<double> to_array(const Vector& v) {
  py::array_t<double> out(std::vector<py::ssize_t>{static_cast<py::ssize_t>(v.size())});
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

std::string concept_json(const ConceptVector& c) { return dump_json(to_json(c)); }

}  // namespace

PYBIND11_MODULE(_pcav, m) {
  m.doc() = "pattern concept vectors and class artifact compensation";

  py::register_exception<Error>(m, "PcavError", PyExc_ValueError);

  m.def(
      "generate_toy",
      [](double tau_deg, double sigma2, std::size_t n, std::uint64_t seed) {
        ToyConfig cfg;
        cfg.tau = tau_deg * std::acos(-1.0) / 180.0;
        cfg.sigma2 = sigma2;
        cfg.n = n;
        cfg.seed = seed;
        const LabeledDataset ds = generate_toy(cfg);
        return py::make_tuple(to_array(Tensor({ds.size(), 2}, Vector(ds.samples.data().begin(),
                                                                      ds.samples.data().end()))),
                              ds.y_c, ds.y_s);
      },
      py::arg("tau_deg"), py::arg("sigma2") = 0.15, py::arg("n") = 1000, py::arg("seed") = 0);

  m.def(
      "fit_pattern_cav",
      [](const Array& x, const std::vector<int>& y_s) {
        return concept_json(fit_pattern_cav(to_tensor(x), y_s));
      },
      py::arg("x"), py::arg("y_s"));

  m.def(
      "fit_filter_cav",
      [](const Array& x, const std::vector<int>& y_s, double lambda, std::size_t epochs,
         std::uint64_t seed) {
        SvmConfig cfg;
        cfg.lambda = lambda;
        cfg.epochs = epochs;
        cfg.seed = seed;
        return concept_json(fit_filter_cav(to_tensor(x), y_s, cfg));
      },
      py::arg("x"), py::arg("y_s"), py::arg("svm_lambda") = 1e-3, py::arg("epochs") = 200,
      py::arg("seed") = 0);

  m.def(
      "pclarc_map",
      [](const Array& x, const Array& v, const Array& z) {
        return to_array(pclarc_map(to_vector(x), to_vector(v), to_vector(z)));
      },
      py::arg("x"), py::arg("v"), py::arg("z_minus"));

  m.def(
      "aclarc_map",
      [](const Array& x, const Array& v, const Array& z) {
        return to_array(aclarc_map(to_vector(x), to_vector(v), to_vector(z)));
      },
      py::arg("x"), py::arg("v"), py::arg("z_plus"));

  m.def(
      "run_toy_figure",
      [](std::vector<double> taus, std::vector<std::uint64_t> seeds, double sigma2,
         std::size_t n) {
        ToyFigureConfig cfg;
        cfg.taus_deg = std::move(taus);
        cfg.seeds = std::move(seeds);
        cfg.sigma2 = sigma2;
        cfg.n = n;
        ExperimentReport r;
        {
          py::gil_scoped_release release;
          r = run_toy_figure(cfg);
        }
        return dump_json(to_json(r));
      },
      py::arg("taus_deg"), py::arg("seeds"), py::arg("sigma2") = 0.15, py::arg("n") = 1000);

  m.def(
      "run_suite",
      [](const std::string& config_json) {
        const ExperimentConfig cfg = experiment_config_from_json(Json::parse(config_json));
        ExperimentReport r;
        {
          py::gil_scoped_release release;
          r = run_controlled_suite(cfg);
        }
        return dump_json(to_json(r));
      },
      py::arg("config_json"));

  m.def(
      "render_report",
      [](const std::string& report_json, const std::string& format) {
        return render_report(report_from_json(Json::parse(report_json)),
                             parse_report_format(format));
      },
      py::arg("report_json"), py::arg("format") = "markdown");
}
