#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>

#include "pcav/experiments.hpp"

namespace pcav {

namespace {

constexpr double kSize = 480.0;
constexpr double kMargin = 24.0;

struct Frame {
  double lo_x, hi_x, lo_y, hi_y;
  double px(double x) const { return kMargin + (x - lo_x) / (hi_x - lo_x) * (kSize - 2 * kMargin); }
  double py(double y) const { return kSize - kMargin - (y - lo_y) / (hi_y - lo_y) * (kSize - 2 * kMargin); }
};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

void line(std::string& s, const Frame& f, double x0, double y0, double x1,
          double y1, const char* color, double width, bool dashed = false) {
  s += "<line x1=\"" + num(f.px(x0)) + "\" y1=\"" + num(f.py(y0)) + "\" x2=\"" +
       num(f.px(x1)) + "\" y2=\"" + num(f.py(y1)) + "\" stroke=\"" + color +
       "\" stroke-width=\"" + num(width) + "\"";
  if (dashed) s += " stroke-dasharray=\"4 3\"";
  s += "/>\n";
}

void cross(std::string& s, const Frame& f, std::span<const double> p,
           const char* color) {
  const double x = f.px(p[0]), y = f.py(p[1]);
  s += "<path d=\"M" + num(x - 5) + ' ' + num(y - 5) + " L" + num(x + 5) + ' ' +
       num(y + 5) + " M" + num(x - 5) + ' ' + num(y + 5) + " L" + num(x + 5) +
       ' ' + num(y - 5) + "\" stroke=\"" + color + "\" stroke-width=\"2\"/>\n";
}

}  // namespace

std::string render_toy_svg(const LabeledDataset& ds, const ToyRun& run) {
  if (ds.samples.cols() != 2) throw Error("toy plot needs two-dimensional samples");
  Frame f{-2.5, 2.5, -2.5, 2.5};
  for (std::size_t i = 0; i < ds.size(); ++i) {
    f.lo_x = std::min(f.lo_x, ds.samples.at(i, 0) - 0.2);
    f.hi_x = std::max(f.hi_x, ds.samples.at(i, 0) + 0.2);
    f.lo_y = std::min(f.lo_y, ds.samples.at(i, 1) - 0.2);
    f.hi_y = std::max(f.hi_y, ds.samples.at(i, 1) + 0.2);
  }

  std::string s;
  s += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"480\" "
       "height=\"480\" viewBox=\"0 0 480 480\">\n";
  s += "<rect width=\"480\" height=\"480\" fill=\"white\"/>\n";
  line(s, f, f.lo_x, 0, f.hi_x, 0, "#cccccc", 1);
  line(s, f, 0, f.lo_y, 0, f.hi_y, "#cccccc", 1);

  s += "<g fill-opacity=\"0.5\">\n";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const char* color = ds.y_c[i] == kToyClassB ? "#1f77b4"
                        : ds.y_s[i] == 1        ? "#ff7f0e"
                                                : "#8c564b";
    s += "<circle cx=\"" + num(f.px(ds.samples.at(i, 0))) + "\" cy=\"" +
         num(f.py(ds.samples.at(i, 1))) + "\" r=\"2\" fill=\"" + color + "\"/>\n";
  }
  s += "</g>\n";

  // Decision boundary (w1 - w0).x + (b1 - b0) = 0, clipped to the frame.
  if (run.classifier_w.size() == 2) {
    const double a = run.classifier_w[1][0] - run.classifier_w[0][0];
    const double b = run.classifier_w[1][1] - run.classifier_w[0][1];
    const double c = run.classifier_b[1] - run.classifier_b[0];
    if (std::abs(b) > std::abs(a) && b != 0.0) {
      line(s, f, f.lo_x, -(a * f.lo_x + c) / b, f.hi_x, -(a * f.hi_x + c) / b,
           "black", 1.5);
    } else if (a != 0.0) {
      line(s, f, -(b * f.lo_y + c) / a, f.lo_y, -(b * f.hi_y + c) / a, f.hi_y,
           "black", 1.5);
    }
  }

  // Distractor direction, then both concept vectors from the origin.
  const double tau = run.tau_deg * std::acos(-1.0) / 180.0;
  line(s, f, -1.5 * std::sin(tau), -1.5 * std::cos(tau), 1.5 * std::sin(tau),
       1.5 * std::cos(tau), "#999999", 1, true);
  if (run.v_pattern.size() == 2) {
    line(s, f, 0, 0, 1.5 * run.v_pattern[0], 1.5 * run.v_pattern[1], "#2ca02c", 3);
  }
  if (run.v_filter.size() == 2) {
    line(s, f, 0, 0, 1.5 * run.v_filter[0], 1.5 * run.v_filter[1], "#d62728", 3);
  }

  if (run.probe.size() == 2) {
    if (run.corrected_pattern.size() == 2) {
      line(s, f, run.probe[0], run.probe[1], run.corrected_pattern[0],
           run.corrected_pattern[1], "#2ca02c", 1.5, true);
      cross(s, f, run.corrected_pattern, "#2ca02c");
    }
    if (run.corrected_filter.size() == 2) {
      line(s, f, run.probe[0], run.probe[1], run.corrected_filter[0],
           run.corrected_filter[1], "#d62728", 1.5, true);
      cross(s, f, run.corrected_filter, "#d62728");
    }
    cross(s, f, run.probe, "black");
  }

  char title[96];
  std::snprintf(title, sizeof title,
                "tau = %.0f deg, pattern %.1f deg, filter %.1f deg", run.tau_deg,
                run.angle_pattern, run.angle_filter);
  s += "<text x=\"8\" y=\"16\" font-family=\"sans-serif\" font-size=\"12\">";
  s += title;
  s += "</text>\n</svg>\n";
  return s;
}

}  // namespace pcav
