#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "capi/trainer.hpp"

namespace capi {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct Plot {
  std::string title;
  std::string file;  // base name, e.g. "loss.svg"
  std::vector<Series> series;
  std::optional<double> threshold;  // dashed horizontal line
};

// Loss curves, lr/momentum schedule and the position-MI trace, with the
// collapse threshold drawn on the latter. Series keep the record order.
std::vector<Plot> build_plots(const std::vector<StepMetrics>& records, double collapse_threshold = 0.05);

// Standalone SVG line chart; a single point renders as a marker.
std::string render_svg(const Plot& plot);

// Reads a metrics log (malformed lines skipped with a warning), writes one
// SVG per plot into `out_dir` and returns what was plotted. Throws SpecError
// when no valid record remains.
std::vector<Plot> emit_plots(const std::filesystem::path& metrics, const std::filesystem::path& out_dir,
                             double collapse_threshold = 0.05);

}  // namespace capi
