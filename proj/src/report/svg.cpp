#include "simlab/report/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "simlab/error.hpp"

namespace simlab::report {

namespace {

constexpr double kWidth = 640, kHeight = 400;
constexpr double kLeft = 70, kRight = 150, kTop = 40, kBottom = 60;
constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                    "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::string emit_svg(const std::vector<Series>& series, const ChartOptions& opt) {
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
  double ymin = xmin, ymax = -xmin;
  std::size_t points = 0;
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) throw PreconditionError("series '" + s.label + "' has x/y length mismatch");
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.y[i]);
      ymax = std::max(ymax, s.y[i]);
      ++points;
    }
  }
  if (points == 0) throw PreconditionError("cannot draw an empty series");
  if (xmax == xmin) {
    xmin -= 1;
    xmax += 1;
  }
  if (ymax == ymin) {
    ymin -= 0.5;
    ymax += 0.5;
  }
  const double pw = kWidth - kLeft - kRight, ph = kHeight - kTop - kBottom;
  auto px = [&](double x) { return kLeft + (x - xmin) / (xmax - xmin) * pw; };
  auto py = [&](double y) { return kTop + (ymax - y) / (ymax - ymin) * ph; };

  std::string out;
  out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(kWidth) + "\" height=\"" +
         num(kHeight) + "\" viewBox=\"0 0 " + num(kWidth) + " " + num(kHeight) + "\">\n";
  out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!opt.title.empty()) {
    out += "<text x=\"" + num(kWidth / 2) + "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" +
           escape(opt.title) + "</text>\n";
  }
  // Axes.
  out += "<line x1=\"" + num(kLeft) + "\" y1=\"" + num(kTop + ph) + "\" x2=\"" + num(kLeft + pw) +
         "\" y2=\"" + num(kTop + ph) + "\" stroke=\"black\"/>\n";
  out += "<line x1=\"" + num(kLeft) + "\" y1=\"" + num(kTop) + "\" x2=\"" + num(kLeft) + "\" y2=\"" +
         num(kTop + ph) + "\" stroke=\"black\"/>\n";

  std::vector<double> xticks;
  if (opt.integer_x_ticks) {
    const auto lo = static_cast<long>(std::ceil(xmin));
    const auto hi = static_cast<long>(std::floor(xmax));
    const long step = std::max(1L, (hi - lo) / 25 + 1);
    for (long t = lo; t <= hi; t += step) xticks.push_back(static_cast<double>(t));
  } else {
    for (int i = 0; i <= 5; ++i) xticks.push_back(xmin + (xmax - xmin) * i / 5.0);
  }
  for (double t : xticks) {
    const std::string label = opt.integer_x_ticks ? std::to_string(static_cast<long>(t)) : tick(t);
    out += "<line x1=\"" + num(px(t)) + "\" y1=\"" + num(kTop + ph) + "\" x2=\"" + num(px(t)) +
           "\" y2=\"" + num(kTop + ph + 5) + "\" stroke=\"black\"/>\n";
    out += "<text class=\"xtick\" x=\"" + num(px(t)) + "\" y=\"" + num(kTop + ph + 18) +
           "\" text-anchor=\"middle\" font-size=\"11\">" + label + "</text>\n";
  }
  for (int i = 0; i <= 5; ++i) {
    const double t = ymin + (ymax - ymin) * i / 5.0;
    out += "<line x1=\"" + num(kLeft - 5) + "\" y1=\"" + num(py(t)) + "\" x2=\"" + num(kLeft) +
           "\" y2=\"" + num(py(t)) + "\" stroke=\"black\"/>\n";
    out += "<text class=\"ytick\" x=\"" + num(kLeft - 8) + "\" y=\"" + num(py(t) + 4) +
           "\" text-anchor=\"end\" font-size=\"11\">" + tick(t) + "</text>\n";
  }
  if (!opt.x_label.empty()) {
    out += "<text x=\"" + num(kLeft + pw / 2) + "\" y=\"" + num(kHeight - 15) +
           "\" text-anchor=\"middle\" font-size=\"13\">" + escape(opt.x_label) + "</text>\n";
  }
  if (!opt.y_label.empty()) {
    out += "<text x=\"18\" y=\"" + num(kTop + ph / 2) + "\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 18 " +
           num(kTop + ph / 2) + ")\">" + escape(opt.y_label) + "</text>\n";
  }

  for (std::size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    const std::string colour = kPalette[si % std::size(kPalette)];
    std::string poly;
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      poly += (poly.empty() ? "" : " ") + num(px(s.x[i])) + "," + num(py(s.y[i]));
    }
    if (poly.find(' ') != std::string::npos) {
      out += "<polyline fill=\"none\" stroke=\"" + colour + "\" stroke-width=\"1.5\" points=\"" + poly + "\"/>\n";
    }
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      out += "<circle cx=\"" + num(px(s.x[i])) + "\" cy=\"" + num(py(s.y[i])) + "\" r=\"3\" fill=\"" +
             colour + "\"/>\n";
    }
    const double ly = kTop + 14 + 18 * static_cast<double>(si);
    out += "<rect x=\"" + num(kLeft + pw + 15) + "\" y=\"" + num(ly - 9) + "\" width=\"10\" height=\"10\" fill=\"" +
           colour + "\"/>\n";
    out += "<text x=\"" + num(kLeft + pw + 30) + "\" y=\"" + num(ly) + "\" font-size=\"11\">" +
           escape(s.label) + "</text>\n";
  }
  out += "</svg>\n";
  return out;
}

}  // namespace simlab::report
