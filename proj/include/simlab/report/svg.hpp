#pragma once

#include <string>
#include <vector>

namespace simlab::report {

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

struct ChartOptions {
  std::string title;
  std::string x_label;
  std::string y_label;
  bool integer_x_ticks = true;  // one tick per integer between min and max x
};

/// Standalone line chart with a marker per point. The output depends only
/// on the arguments (no timestamps, fixed number formatting).
std::string emit_svg(const std::vector<Series>& series, const ChartOptions& options = {});

}  // namespace simlab::report
