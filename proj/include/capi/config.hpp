#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "capi/trainer.hpp"

namespace capi {

// Settings for the frozen-feature probes.
struct ProbeSettings {
  double val_fraction = 0.10;
  std::vector<int> knn_k{1, 3, 10, 30};
  // Inverse regularization strengths, log-spaced.
  double logreg_c_min = 1e-6;
  double logreg_c_max = 1e5;
  int logreg_c_count = 8;
  int logreg_max_iter = 500;
  std::vector<double> attn_lrs{1e-5, 2e-5, 5e-5, 1e-4, 2e-4, 5e-4, 1e-3, 2e-3, 5e-3, 1e-2};
  std::vector<double> attn_wds{5e-4, 1e-3, 5e-2};
  int attn_epochs = 10;
  int attn_batch_size = 64;
  int attn_head_width = 64;
  bool operator==(const ProbeSettings&) const = default;
};

struct RunConfig {
  PretrainConfig pretrain{};
  ProbeSettings probe{};
  bool operator==(const RunConfig&) const = default;
};

// Flat "key = value" documents; '#' starts a comment. Keys follow the names
// of the pretraining recipe (see README). Unknown or duplicate keys are
// errors; omitted keys keep their defaults, except that an omitted
// masking_ratio follows masking_type's default.
RunConfig parse_run_config(std::string_view text);
RunConfig load_run_config(const std::filesystem::path& path);
std::string serialize_run_config(const RunConfig& config);

// Just the pretraining keys; used for checkpoint digests.
std::string serialize_pretrain_config(const PretrainConfig& config);

// Recipe-table values with the paper-scale ViT-L backbone.
RunConfig recipe_run_config();

// Desk-scale configuration used by the end-to-end acceptance run: ViT depth 4,
// width 64, 4 heads, patch 8 on 32x32 images, 64 prototypes, batch 64,
// 2000 steps.
RunConfig toy_run_config();

// Every accepted key, in serialization order.
const std::vector<std::string>& config_keys();

}  // namespace capi
