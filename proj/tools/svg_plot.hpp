#pragma once

#include <string>
#include <utility>
#include <vector>

namespace melt::tools {

struct Series {
  std::string label;
  std::vector<std::pair<double, double>> points;
};

struct PlotSpec {
  std::string title;
  std::string x_label;
  std::string y_label;
  bool log_y = false;
};

/// Static line chart, one polyline per series, with a legend.
std::string render_svg(const PlotSpec& spec, const std::vector<Series>& series);

}  // namespace melt::tools
