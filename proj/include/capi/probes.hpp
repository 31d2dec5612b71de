#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "capi/archive.hpp"
#include "capi/config.hpp"
#include "capi/data.hpp"
#include "capi/image.hpp"
#include "capi/masking.hpp"
#include "capi/network.hpp"
#include "capi/tensor.hpp"

namespace capi {

// ---------------------------------------------------------------------------
// Feature banks

enum class Split : std::uint8_t { train, val, test };
std::string_view to_string(Split split);

// One row per item. Patch banks carry (image, position) provenance; global
// banks use position -1. Labels are patch labels for segmentation banks and
// image labels otherwise.
struct FeatureBank {
  Matrix features;
  std::vector<int> labels;
  std::vector<Split> split;
  std::vector<int> image;
  std::vector<int> position;
  LatticeShape lattice{};
  int n_classes = 0;

  std::size_t size() const { return labels.size(); }
  void validate() const;
  std::vector<std::size_t> rows(Split s) const;
  Matrix features_of(Split s) const;
  std::vector<int> labels_of(Split s) const;
};

Archive bank_to_archive(const FeatureBank& bank);
FeatureBank bank_from_archive(const Archive& archive);

// Moves a `fraction` of the training images (all of their rows) to the
// validation split; the choice depends only on `seed`.
FeatureBank with_validation_split(FeatureBank bank, double fraction, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Feature extraction (frozen encoder, eval mode)

// Encoder patch outputs for one channel-normalized image; registers dropped.
Matrix patch_features(const Image& image, const EncoderParams& encoder, const NetworkConfig& config);

// Mean of the patch outputs.
Vector average_pooling(const Image& image, const EncoderParams& encoder, const NetworkConfig& config);

// Encodes the whole image, places one mask query on every patch position,
// runs only the predictor's first cross-attention sublayer against the patch
// outputs and averages the results.
Vector predictor_pooling(const Image& image, const EncoderParams& encoder, const PredictorParams& predictor,
                         const NetworkConfig& config, AttentionCounter* counter = nullptr);

enum class FeatureKind { patch, average_pooling, predictor_pooling };
FeatureKind parse_feature_kind(std::string_view name);

struct LabeledImages {
  std::vector<Image> images;                  // channel-normalized
  std::vector<std::vector<int>> patch_labels;  // optional, raster order
  std::vector<int> image_labels;
};

// `count` synthetic images starting at `first_index`, channel-normalized,
// with their patch labels.
LabeledImages labeled_synthetic(const SyntheticSpec& spec, std::size_t count, std::uint64_t seed,
                                std::uint64_t first_index = 0);
// Class-per-subdirectory folder: labels are the sorted top-level directory
// names; eval preprocessing at `resolution`. `classes` receives the names.
LabeledImages labeled_image_folder(const std::filesystem::path& dir, int resolution,
                                   std::vector<std::string>* classes = nullptr);

FeatureBank build_bank(const LabeledImages& train, const LabeledImages& test, const EncoderParams& encoder,
                       const PredictorParams& predictor, const NetworkConfig& config, FeatureKind kind,
                       int n_classes);

// ---------------------------------------------------------------------------
// Standardization

struct Standardizer {
  RowVector mean;
  RowVector scale;  // standard deviation floored at kStdFloor

  static constexpr double kStdFloor = 1e-8;
  static Standardizer fit(const Matrix& train);
  Matrix apply(const Matrix& x) const;
};

// ---------------------------------------------------------------------------
// Scores and reports

double accuracy(std::span<const int> predicted, std::span<const int> truth);
// Mean over classes that occur in either prediction or truth of TP / (TP + FP + FN).
double mean_iou(std::span<const int> predicted, std::span<const int> truth, int n_classes);

enum class Score { accuracy, miou };
std::string_view to_string(Score score);

struct ProbeRecord {
  std::vector<std::pair<std::string, std::string>> params;
  double val_score = 0;
  bool converged = true;
};

struct ProbeReport {
  std::string probe;
  Score score = Score::accuracy;
  std::vector<ProbeRecord> grid;
  std::size_t selected = 0;
  double test_score = 0;
};

// Index of the highest validation score; the first one wins ties.
std::size_t select_best(const std::vector<ProbeRecord>& grid);
// One JSON object per line: every grid point, then a summary record.
std::string report_to_jsonl(const ProbeReport& report);

// ---------------------------------------------------------------------------
// k-nearest neighbours

enum class Distance { l2, cosine };
std::string_view to_string(Distance distance);

// Majority label among the k nearest bank rows; neighbours are ordered by
// (distance, row index). Vote ties go to the label whose nearest member is
// closer, then to the lower label.
std::vector<int> knn_predict(const Matrix& bank, std::span<const int> labels, const Matrix& queries, int k,
                             Distance distance);

// Grid over settings.knn_k x {L2, cosine} on standardized features.
ProbeReport knn_probe(const FeatureBank& bank, const ProbeSettings& settings, Score score);

// ---------------------------------------------------------------------------
// Logistic regression

// Minimizes mean cross-entropy + |W|^2 / (2 C N) with L-BFGS; the bias is not
// penalized. Stops when the largest gradient entry falls below `tol`.
struct LogReg {
  Matrix weights;  // classes x dim
  RowVector bias;
  bool converged = false;
  int iterations = 0;
  double grad_norm = 0;  // max-abs gradient entry at exit
};

LogReg fit_logreg(const Matrix& x, std::span<const int> y, int n_classes, double c, int max_iter,
                  double tol = 1e-6);
Matrix logreg_probabilities(const LogReg& model, const Matrix& x);
std::vector<int> logreg_predict(const LogReg& model, const Matrix& x);
std::vector<double> logreg_c_grid(const ProbeSettings& settings);

// Grid over logreg_c_grid(settings); features standardized.
ProbeReport logreg_probe(const FeatureBank& bank, const ProbeSettings& settings, Score score);

// ---------------------------------------------------------------------------
// Attentive probe

// One learned query, key and value projections with biases, multi-head
// attention (no residual) and a bias-free linear classifier:
// d + (d^2 + d) + (d^2 + d) + c d = 2 d^2 + (3 + c) d parameters.
struct AttentiveProbe {
  Matrix query;       // 1 x d
  Matrix wk, bk;      // d x d, 1 x d
  Matrix wv, bv;      // d x d, 1 x d
  Matrix classifier;  // c x d
  int heads = 1;

  std::size_t parameter_count() const;
};

template <typename Self, typename F>
  requires std::same_as<std::remove_const_t<Self>, AttentiveProbe>
void visit(Self& p, const std::string& prefix, F&& f) {
  f(prefix + "query", p.query, ParamGroup::embedding);
  f(prefix + "wk", p.wk, ParamGroup::weight);
  f(prefix + "bk", p.bk, ParamGroup::weight);
  f(prefix + "wv", p.wv, ParamGroup::weight);
  f(prefix + "bv", p.bv, ParamGroup::weight);
  f(prefix + "classifier", p.classifier, ParamGroup::weight);
}

std::size_t attentive_parameter_count(int d, int c);

// Heads of width `head_width`; throws SpecError when d is not a multiple.
AttentiveProbe init_attentive_probe(int d, int c, int head_width, Rng& rng);

// 1 x c logits for one image's tokens.
Matrix attentive_logits(const AttentiveProbe& probe, const Matrix& tokens);

struct AttentiveLoss {
  double loss = 0;
  AttentiveProbe grad;
};
// Mean cross-entropy over the images and its gradient.
AttentiveLoss attentive_loss(const AttentiveProbe& probe, std::span<const Matrix> tokens,
                             std::span<const int> labels);

struct AttentiveTrainConfig {
  double lr = 1e-3;
  double weight_decay = 5e-4;
  int epochs = 10;
  int batch_size = 64;
  double warmup_fraction = 0.1;
  int head_width = 64;
  std::uint64_t seed = 0;
};

// AdamW (0.9, 0.999) with linear warmup then cosine to zero.
AttentiveProbe train_attentive_probe(std::span<const Matrix> tokens, std::span<const int> labels, int n_classes,
                                     const AttentiveTrainConfig& config);

// Groups the bank's patch rows by image; grid over attn_lrs x attn_wds.
ProbeReport attentive_probe(const FeatureBank& bank, const ProbeSettings& settings, std::uint64_t seed);

// ---------------------------------------------------------------------------
// PCA feature maps

struct PcaMaps {
  std::vector<Image> maps;  // one lattice-resolution RGB image per input
  // One entry per fit (per image, or a single joint fit): up to 3 x d
  // orthonormal rows and their variances.
  std::vector<Matrix> components;
  std::vector<std::vector<double>> variances;
};

// Projects patch features on the first three principal components and
// min-max rescales each channel to [0, 1], per image when `per_image` or over
// all images jointly otherwise. Channels beyond the feature rank are 0.5.
PcaMaps pca_feature_maps(std::span<const Matrix> features, LatticeShape lattice, bool per_image);

}  // namespace capi
