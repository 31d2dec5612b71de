#include "capi/metrics.hpp"

#include <iostream>
#include "json.hpp"

#include "capi/error.hpp"

namespace capi {

std::string metrics_to_json_line(const StepMetrics& m) {
  nlohmann::ordered_json j;
  j["step"] = m.step;
  j["mim_loss"] = m.mim_loss;
  j["cluster_loss"] = m.cluster_loss;
  j["lr"] = m.lr;
  j["momentum"] = m.momentum;
  j["target_entropy"] = m.target_entropy;
  j["position_mi"] = m.position_mi;
  j["hard_position_mi"] = m.hard_position_mi;
  if (m.window_position_mi) j["window_position_mi"] = *m.window_position_mi;
  return j.dump();
}

std::optional<StepMetrics> parse_metrics_line(std::string_view line) {
  const auto j = nlohmann::json::parse(line, nullptr, false);
  if (j.is_discarded() || !j.is_object()) return std::nullopt;
  try {
    StepMetrics m;
    m.step = j.at("step").get<std::int64_t>();
    m.mim_loss = j.at("mim_loss").get<double>();
    m.cluster_loss = j.at("cluster_loss").get<double>();
    m.lr = j.at("lr").get<double>();
    m.momentum = j.at("momentum").get<double>();
    m.target_entropy = j.at("target_entropy").get<double>();
    m.position_mi = j.at("position_mi").get<double>();
    m.hard_position_mi = j.value("hard_position_mi", 0.0);
    if (j.contains("window_position_mi")) m.window_position_mi = j.at("window_position_mi").get<double>();
    return m;
  } catch (const nlohmann::json::exception&) {
    return std::nullopt;
  }
}

std::vector<StepMetrics> read_metrics(const std::filesystem::path& path, int* skipped) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open metrics log '" + path.string() + "'");
  std::vector<StepMetrics> out;
  int bad = 0;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    if (auto m = parse_metrics_line(line)) {
      out.push_back(*m);
    } else {
      ++bad;
      std::cerr << "warning: " << path.string() << ":" << line_no << ": skipping malformed metrics record\n";
    }
  }
  if (skipped != nullptr) *skipped = bad;
  return out;
}

void write_metrics(const std::filesystem::path& path, const std::vector<StepMetrics>& records) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write metrics log '" + path.string() + "'");
  for (const auto& r : records) os << metrics_to_json_line(r) << '\n';
}

MetricsWriter::MetricsWriter(const std::filesystem::path& path) : out_(path, std::ios::app) {
  if (!out_) throw IoError("cannot open metrics log '" + path.string() + "'");
}

void MetricsWriter::write(const StepMetrics& m) {
  out_ << metrics_to_json_line(m) << '\n';
  out_.flush();
  if (!out_) throw IoError("metrics write failed");
}

}  // namespace capi
