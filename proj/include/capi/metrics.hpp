#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "capi/trainer.hpp"

namespace capi {

// One JSON object per line:
// {"step", "mim_loss", "cluster_loss", "lr", "momentum", "target_entropy",
//  "position_mi", "hard_position_mi"[, "window_position_mi"]}
std::string metrics_to_json_line(const StepMetrics& m);
// nullopt for malformed records.
std::optional<StepMetrics> parse_metrics_line(std::string_view line);

// Skips malformed lines with a warning on stderr; `skipped` receives the count.
std::vector<StepMetrics> read_metrics(const std::filesystem::path& path, int* skipped = nullptr);
void write_metrics(const std::filesystem::path& path, const std::vector<StepMetrics>& records);

// Append-only writer; flushes after every record.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::filesystem::path& path);
  void write(const StepMetrics& m);

 private:
  std::ofstream out_;
};

}  // namespace capi
