#include "capi/plots.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "capi/error.hpp"
#include "capi/metrics.hpp"

namespace capi {

namespace {

constexpr double kWidth = 640, kHeight = 400;
constexpr double kLeft = 70, kRight = 150, kTop = 40, kBottom = 50;
constexpr const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};

Series series_of(const std::vector<StepMetrics>& records, const std::string& name,
                 std::optional<double> (*get)(const StepMetrics&)) {
  Series s{name, {}, {}};
  for (const auto& r : records) {
    if (const auto v = get(r)) {
      s.x.push_back(static_cast<double>(r.step));
      s.y.push_back(*v);
    }
  }
  return s;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else if (c == '&') out += "&amp;";
    else out += c;
  }
  return out;
}

}  // namespace

std::vector<Plot> build_plots(const std::vector<StepMetrics>& records, double collapse_threshold) {
  std::vector<Plot> plots;
  plots.push_back({"Losses", "loss.svg",
                   {series_of(records, "mim_loss", [](const StepMetrics& m) -> std::optional<double> { return m.mim_loss; }),
                    series_of(records, "cluster_loss",
                              [](const StepMetrics& m) -> std::optional<double> { return m.cluster_loss; })},
                   std::nullopt});
  plots.push_back({"Schedules", "schedule.svg",
                   {series_of(records, "lr", [](const StepMetrics& m) -> std::optional<double> { return m.lr; }),
                    series_of(records, "1 - momentum",
                              [](const StepMetrics& m) -> std::optional<double> { return 1.0 - m.momentum; })},
                   std::nullopt});
  plots.push_back({"Position MI (nats)", "position_mi.svg",
                   {series_of(records, "window_position_mi",
                              [](const StepMetrics& m) { return m.window_position_mi; }),
                    series_of(records, "soft_position_mi",
                              [](const StepMetrics& m) -> std::optional<double> { return m.position_mi; })},
                   collapse_threshold});
  return plots;
}

std::string render_svg(const Plot& plot) {
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : plot.series) {
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  }
  if (plot.threshold) {
    y0 = std::min(y0, *plot.threshold);
    y1 = std::max(y1, *plot.threshold);
  }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x0 -= 0.5, x1 += 0.5;
  if (y1 == y0) y0 -= 0.5, y1 += 0.5;
  const double pw = kWidth - kLeft - kRight, ph = kHeight - kTop - kBottom;
  const auto px = [&](double x) { return kLeft + (x - x0) / (x1 - x0) * pw; };
  const auto py = [&](double y) { return kTop + (y1 - y) / (y1 - y0) * ph; };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << kLeft << "\" y=\"24\" font-size=\"15\">" << escape(plot.title) << "</text>\n";
  os << "<rect x=\"" << kLeft << "\" y=\"" << kTop << "\" width=\"" << pw << "\" height=\"" << ph
     << "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double xv = x0 + (x1 - x0) * t / 4, yv = y0 + (y1 - y0) * t / 4;
    os << "<text x=\"" << px(xv) << "\" y=\"" << kTop + ph + 18 << "\" text-anchor=\"middle\">" << fmt(xv)
       << "</text>\n";
    os << "<text x=\"" << kLeft - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << fmt(yv) << "</text>\n";
  }
  os << "<text x=\"" << kLeft + pw / 2 << "\" y=\"" << kHeight - 10 << "\" text-anchor=\"middle\">step</text>\n";
  if (plot.threshold) {
    os << "<line x1=\"" << kLeft << "\" x2=\"" << kLeft + pw << "\" y1=\"" << py(*plot.threshold) << "\" y2=\""
       << py(*plot.threshold) << "\" stroke=\"black\" stroke-dasharray=\"6,4\"/>\n";
    os << "<text x=\"" << kLeft + pw + 8 << "\" y=\"" << py(*plot.threshold) + 4 << "\">threshold "
       << fmt(*plot.threshold) << "</text>\n";
  }
  for (std::size_t k = 0; k < plot.series.size(); ++k) {
    const Series& s = plot.series[k];
    const char* color = kColors[k % std::size(kColors)];
    if (s.x.size() == 1) {
      os << "<circle cx=\"" << px(s.x[0]) << "\" cy=\"" << py(s.y[0]) << "\" r=\"3\" fill=\"" << color << "\"/>\n";
    } else if (!s.x.empty()) {
      os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
      for (std::size_t i = 0; i < s.x.size(); ++i) {
        if (std::isfinite(s.y[i])) os << px(s.x[i]) << ',' << py(s.y[i]) << ' ';
      }
      os << "\"/>\n";
    }
    const double ly = kTop + 16 + 18 * static_cast<double>(k);
    os << "<line x1=\"" << kLeft + pw + 8 << "\" x2=\"" << kLeft + pw + 28 << "\" y1=\"" << ly - 4 << "\" y2=\""
       << ly - 4 << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << kLeft + pw + 32 << "\" y=\"" << ly << "\">" << escape(s.name) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::vector<Plot> emit_plots(const std::filesystem::path& metrics, const std::filesystem::path& out_dir,
                             double collapse_threshold) {
  const std::vector<StepMetrics> records = read_metrics(metrics);
  if (records.empty()) throw SpecError("no valid metrics records in " + metrics.string());
  std::filesystem::create_directories(out_dir);
  std::vector<Plot> plots = build_plots(records, collapse_threshold);
  for (const Plot& p : plots) {
    std::ofstream out(out_dir / p.file);
    if (!out) throw IoError("cannot write " + (out_dir / p.file).string());
    out << render_svg(p);
  }
  return plots;
}

}  // namespace capi
