#include "svg_plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace melt::tools {

namespace {

constexpr double kW = 720, kH = 440, kLeft = 70, kRight = 170, kTop = 40, kBottom = 50;
const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

std::string esc(const std::string& s) {
  std::string o;
  for (char c : s) {
    switch (c) {
      case '<': o += "&lt;"; break;
      case '>': o += "&gt;"; break;
      case '&': o += "&amp;"; break;
      default: o += c;
    }
  }
  return o;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

}  // namespace

std::string render_svg(const PlotSpec& spec, const std::vector<Series>& series) {
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  auto ty = [&](double y) { return spec.log_y ? std::log10(std::max(y, 1e-300)) : y; };
  for (const auto& s : series) {
    for (auto [x, y] : s.points) {
      if (!std::isfinite(y) || (spec.log_y && y <= 0)) continue;
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, ty(y));
      y1 = std::max(y1, ty(y));
    }
  }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  const double pw = kW - kLeft - kRight, ph = kH - kTop - kBottom;
  auto px = [&](double x) { return kLeft + (x - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return kTop + ph - (ty(y) - y0) / (y1 - y0) * ph; };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << kW / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">"
     << esc(spec.title) << "</text>\n";
  os << "<rect x=\"" << kLeft << "\" y=\"" << kTop << "\" width=\"" << pw << "\" height=\"" << ph
     << "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double fx = x0 + (x1 - x0) * i / 4.0;
    const double fy = y0 + (y1 - y0) * i / 4.0;
    const double gx = kLeft + pw * i / 4.0, gy = kTop + ph - ph * i / 4.0;
    os << "<text x=\"" << gx << "\" y=\"" << kTop + ph + 16 << "\" text-anchor=\"middle\">"
       << num(fx) << "</text>\n";
    os << "<text x=\"" << kLeft - 6 << "\" y=\"" << gy + 4 << "\" text-anchor=\"end\">"
       << num(spec.log_y ? std::pow(10.0, fy) : fy) << "</text>\n";
    os << "<line x1=\"" << kLeft << "\" x2=\"" << kLeft + pw << "\" y1=\"" << gy << "\" y2=\"" << gy
       << "\" stroke=\"#ddd\"/>\n";
  }
  os << "<text x=\"" << kLeft + pw / 2 << "\" y=\"" << kH - 12 << "\" text-anchor=\"middle\">"
     << esc(spec.x_label) << "</text>\n";
  os << "<text transform=\"translate(16," << kTop + ph / 2
     << ") rotate(-90)\" text-anchor=\"middle\">" << esc(spec.y_label) << "</text>\n";

  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = kColors[s % std::size(kColors)];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (auto [x, y] : series[s].points) {
      if (!std::isfinite(y) || (spec.log_y && y <= 0)) continue;
      os << num(px(x)) << ',' << num(py(y)) << ' ';
    }
    os << "\"/>\n";
    const double ly = kTop + 14 + 18.0 * static_cast<double>(s);
    os << "<line x1=\"" << kW - kRight + 12 << "\" x2=\"" << kW - kRight + 32 << "\" y1=\"" << ly - 4
       << "\" y2=\"" << ly - 4 << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << kW - kRight + 36 << "\" y=\"" << ly << "\">" << esc(series[s].label)
       << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace melt::tools
