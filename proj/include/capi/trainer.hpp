#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "capi/archive.hpp"
#include "capi/image.hpp"
#include "capi/masking.hpp"
#include "capi/network.hpp"
#include "capi/objective.hpp"
#include "capi/optim.hpp"

namespace capi {

// Linear warmup followed by a truncated cosine.
struct Schedule {
  std::int64_t total_steps = 2000;
  double warmup_fraction = 0.10;
  double cosine_truncation = 0.20;
  double peak_lr = 1e-3;
  double final_lr_floor = 0.0;

  std::int64_t warmup_steps() const;
  void validate() const;
  bool operator==(const Schedule&) const = default;
};

// lr(t) = peak * t / t_warm during warmup, then
// lr(t) = floor + (peak - floor) / 2 * (1 + cos(pi * u)),
// u = (1 - cosine_truncation) * (t - t_warm) / (T - t_warm).
double lr_at(std::int64_t step, const Schedule& schedule);

enum class SinkhornMode { positionwise, standard };

struct ObjectiveConfig {
  int prototypes = 16384;
  double tau_student = 0.12;
  double tau_teacher = 0.06;
  int sk_iters = 3;
  SinkhornMode sk_mode = SinkhornMode::positionwise;
  bool operator==(const ObjectiveConfig&) const = default;
};

struct TrainConfig {
  int batch_size = 64;
  int image_size = 224;
  AdamWConfig adamw{};
  double clustering_lr_ratio = 0.5;
  double clustering_weight_decay = 0.0;
  double patch_embed_lr_ratio = 0.2;
  double norm_wd_ratio = 0.1;
  MaskSpec mask{};
  int n_pred = 7;
  double crop_scale_min = 0.6;
  double crop_scale_max = 1.0;
  bool hflip = true;
  std::int64_t checkpoint_every = 0;  // 0 = only at the end
  // Steps pooled into each windowed estimate of I(position; hard target).
  std::int64_t mi_window = 50;
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

struct PretrainConfig {
  NetworkConfig network{};
  ObjectiveConfig objective{};
  TrainConfig train{};
  Schedule schedule{};
  std::uint64_t seed = 0;
  void validate() const;
  bool operator==(const PretrainConfig&) const = default;
};

struct TrainState {
  StudentParams student;
  EncoderParams teacher;
  ClusterHead head;
  AdamW network_optimizer;
  AdamW clustering_optimizer;
  std::int64_t step = 0;  // completed steps
  std::uint64_t seed = 0;
  // Hard (position x cluster) target counts of the current MI window.
  Matrix position_counts;
};

TrainState init_train_state(const PretrainConfig& config);

struct StepMetrics {
  std::int64_t step = 0;  // 1-based index of the step just taken
  double mim_loss = 0;
  double cluster_loss = 0;
  double lr = 0;
  double momentum = 0;
  double target_entropy = 0;
  double position_mi = 0;       // soft (position, cluster) joint of the targets
  double hard_position_mi = 0;  // plug-in MI of argmax targets vs position, this batch only
  // Plug-in MI of the counts pooled over the last mi_window steps; set on
  // steps that close a window.
  std::optional<double> window_position_mi;
  bool operator==(const StepMetrics&) const = default;
};

// Gradient norms across the two losses' parameter sets; all must be exactly 0.
struct GradientAudit {
  double mim_wrt_centroids = 0;
  double mim_wrt_teacher = 0;
  double cluster_wrt_network = 0;
  double cluster_wrt_teacher = 0;
};

// Separate gradient buffers for one loss, covering every trainable tensor.
struct LossGradients {
  StudentParams network;
  EncoderParams teacher;
  Matrix centroids;
};

struct StepResult {
  StepMetrics metrics;
  GradientAudit audit;
};

// One training step on preprocessed images (image_size square, channel
// normalized). Uses lr_at(state.step + 1) and momentum 1 - lr, then
// increments state.step. Throws NumericError on non-finite losses.
StepResult train_step(TrainState& state, std::span<const Image> batch, const PretrainConfig& config);

// Loss gradients for one batch without applying any update. Exposed for the
// stop-gradient audit and gradient checks.
struct BatchGradients {
  double mim_loss = 0;
  double cluster_loss = 0;
  LossGradients mim;
  LossGradients cluster;
  Assignments targets;
  int positions = 0;
};
BatchGradients compute_batch_gradients(const TrainState& state, std::span<const Image> batch,
                                       const PretrainConfig& config);

// Random resized crop + optional flip + channel normalization to image_size.
Image train_view(const Image& image, const TrainConfig& config, Rng& rng);

// Image source for pretraining. Implementations must be deterministic in
// the index.
class ImageDataset {
 public:
  virtual ~ImageDataset() = default;
  virtual std::size_t size() const = 0;
  virtual Image load(std::size_t index) const = 0;
};

// Deterministic batch for a 1-based step: indices drawn uniformly from the
// dataset, views augmented with per-(step, slot) substreams.
std::vector<Image> sample_batch(const ImageDataset& data, const PretrainConfig& config,
                                std::int64_t step);

Archive checkpoint_archive(const TrainState& state, const std::string& config_text);
TrainState restore_checkpoint(const Archive& archive, const PretrainConfig& config);
std::uint64_t config_digest(const std::string& config_text);

struct PretrainOptions {
  std::filesystem::path out_dir;
  std::optional<std::filesystem::path> resume;
  std::int64_t stop_after = -1;  // stop early at this step count (-1 = run to total_steps)
  std::function<void(const StepMetrics&)> on_step;
};

// Runs train_step until total_steps, appending metrics to
// out_dir/metrics.jsonl and writing checkpoints every checkpoint_every steps
// plus at the end (out_dir/checkpoint_<step>.capi and checkpoint_last.capi).
TrainState pretrain(const PretrainConfig& config, const ImageDataset& data,
                    const PretrainOptions& options);

}  // namespace capi
