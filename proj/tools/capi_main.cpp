#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "capi/archive.hpp"
#include "capi/config.hpp"
#include "capi/data.hpp"
#include "capi/error.hpp"
#include "capi/plots.hpp"
#include "capi/probes.hpp"
#include "capi/trainer.hpp"

namespace fs = std::filesystem;
using namespace capi;

namespace {

bool is_synthetic(const std::string& data) { return data.rfind("synthetic", 0) == 0; }

struct Model {
  PretrainConfig config;
  TrainState state;
};

Model load_model(const fs::path& checkpoint) {
  const Archive a = Archive::load(checkpoint);
  Model m;
  m.config = parse_run_config(a.text("meta.config")).pretrain;
  m.state = restore_checkpoint(a, m.config);
  return m;
}

const EncoderParams& pick_encoder(const Model& m, const std::string& which) {
  if (which == "teacher") return m.state.teacher;
  if (which == "student") return m.state.student.encoder;
  throw SpecError("unknown model '" + which + "' (expected teacher or student)");
}

// Synthetic sources draw train and test images from disjoint index ranges of
// a stream seeded independently of pretraining.
LabeledImages load_split(const std::string& data, const PretrainConfig& config, std::size_t count,
                         std::uint64_t seed, std::uint64_t first_index, int* n_classes) {
  if (is_synthetic(data)) {
    const SyntheticSpec spec = parse_synthetic_spec(data);
    if (spec.image_size != config.train.image_size || spec.patch_size != config.network.patch_size) {
      throw SpecError("synthetic image/patch size must match the checkpoint configuration");
    }
    *n_classes = spec.n_classes;
    return labeled_synthetic(spec, count, seed, first_index);
  }
  std::vector<std::string> classes;
  LabeledImages images = labeled_image_folder(data, config.train.image_size, &classes);
  *n_classes = static_cast<int>(classes.size());
  return images;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

ProbeSettings load_probe_settings(const std::optional<fs::path>& config) {
  return config ? load_run_config(*config).probe : toy_run_config().probe;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Masked image modeling with clustering targets: pretraining and frozen-feature probes"};
  app.require_subcommand(1);

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "Pretrain an encoder");
  fs::path pre_config, pre_out;
  std::string pre_data = "synthetic";
  std::optional<fs::path> pre_resume;
  std::int64_t pre_stop = -1;
  pre->add_option("--config", pre_config, "Run configuration file")->required()->check(CLI::ExistingFile);
  pre->add_option("--data", pre_data, "Image folder or synthetic[:key=value,...]");
  pre->add_option("--out", pre_out, "Output directory")->required();
  pre->add_option("--resume", pre_resume, "Checkpoint to resume from")->check(CLI::ExistingFile);
  pre->add_option("--stop-after", pre_stop, "Stop after this many completed steps");

  // export-features
  auto* exp = app.add_subcommand("export-features", "Extract a frozen-feature bank");
  fs::path exp_ckpt, exp_out;
  std::string exp_train = "synthetic", exp_test, exp_model = "teacher", exp_kind = "patch";
  std::size_t exp_train_count = 512, exp_test_count = 128;
  std::uint64_t exp_seed = 1;
  double exp_val = 0.10;
  exp->add_option("--checkpoint", exp_ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  exp->add_option("--data", exp_train, "Training images: folder or synthetic[:...]");
  exp->add_option("--test-data", exp_test, "Test image folder (synthetic sources draw their own)");
  exp->add_option("--model", exp_model, "teacher or student")->check(CLI::IsMember({"teacher", "student"}));
  exp->add_option("--kind", exp_kind, "patch, average_pooling or predictor_pooling")
      ->check(CLI::IsMember({"patch", "average_pooling", "predictor_pooling"}));
  exp->add_option("--train-count", exp_train_count, "Synthetic training images");
  exp->add_option("--test-count", exp_test_count, "Synthetic test images");
  exp->add_option("--data-seed", exp_seed, "Seed of the synthetic probe images and validation split");
  exp->add_option("--val-fraction", exp_val, "Fraction of training images held out for selection");
  exp->add_option("--out", exp_out, "Bank archive")->required();

  // probe-classify / probe-segment
  auto* cls = app.add_subcommand("probe-classify", "Image classification probes on a global or patch bank");
  auto* seg = app.add_subcommand("probe-segment", "Patch-level segmentation probes (mIoU) on a patch bank");
  fs::path probe_bank, probe_out;
  std::string probe_kind = "knn";
  std::optional<fs::path> probe_config;
  std::uint64_t probe_seed = 0;
  for (auto* sub : {cls, seg}) {
    sub->add_option("--bank", probe_bank, "Bank archive")->required()->check(CLI::ExistingFile);
    sub->add_option("--config", probe_config, "Run configuration with probe grids")->check(CLI::ExistingFile);
    sub->add_option("--out", probe_out, "Report (JSON lines)")->required();
  }
  cls->add_option("--probe", probe_kind, "knn, logreg or attentive")
      ->check(CLI::IsMember({"knn", "logreg", "attentive"}));
  cls->add_option("--seed", probe_seed, "Seed of the attentive probe");
  seg->add_option("--probe", probe_kind, "knn or logreg")->check(CLI::IsMember({"knn", "logreg"}));

  // viz-pca
  auto* viz = app.add_subcommand("viz-pca", "Map the first three principal components of patch features to RGB");
  fs::path viz_ckpt, viz_out;
  std::string viz_data = "synthetic", viz_model = "teacher";
  std::size_t viz_count = 8;
  bool viz_joint = false;
  int viz_scale = 8;
  viz->add_option("--checkpoint", viz_ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  viz->add_option("--data", viz_data, "Image folder or synthetic[:...]");
  viz->add_option("--model", viz_model, "teacher or student")->check(CLI::IsMember({"teacher", "student"}));
  viz->add_option("--count", viz_count, "Number of synthetic images");
  viz->add_flag("--joint", viz_joint, "Fit one PCA across all images instead of one per image");
  viz->add_option("--scale", viz_scale, "Nearest-neighbour upscaling of the lattice maps")->check(CLI::PositiveNumber);
  viz->add_option("--out", viz_out, "Output directory")->required();

  // emit-plots
  auto* plt = app.add_subcommand("emit-plots", "Render SVG plots from a metrics log");
  fs::path plt_metrics, plt_out;
  double plt_threshold = 0.05;
  plt->add_option("--metrics", plt_metrics, "metrics.jsonl")->required()->check(CLI::ExistingFile);
  plt->add_option("--out", plt_out, "Output directory")->required();
  plt->add_option("--threshold", plt_threshold, "Collapse threshold line on the MI plot (nats)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*pre) {
      const RunConfig config = load_run_config(pre_config);
      std::unique_ptr<ImageDataset> data;
      if (is_synthetic(pre_data)) {
        data = std::make_unique<SyntheticDataset>(parse_synthetic_spec(pre_data), config.pretrain.seed);
      } else {
        data = std::make_unique<ImageFolderDataset>(pre_data);
      }
      PretrainOptions opts;
      opts.out_dir = pre_out;
      opts.resume = pre_resume;
      opts.stop_after = pre_stop;
      const std::int64_t total = config.pretrain.schedule.total_steps;
      opts.on_step = [total](const StepMetrics& m) {
        if (m.step % 100 == 0 || m.step == total) {
          std::cerr << "step " << m.step << "/" << total << " mim " << m.mim_loss << " cluster " << m.cluster_loss
                    << " lr " << m.lr << "\n";
        }
      };
      const TrainState state = pretrain(config.pretrain, *data, opts);
      std::cout << "finished at step " << state.step << "; outputs in " << pre_out.string() << "\n";
    } else if (*exp) {
      const Model m = load_model(exp_ckpt);
      int n_classes = 0, n_test_classes = 0;
      const LabeledImages train = load_split(exp_train, m.config, exp_train_count, exp_seed, 0, &n_classes);
      LabeledImages test;
      if (is_synthetic(exp_train)) {
        test = load_split(exp_train, m.config, exp_test_count, exp_seed, exp_train_count, &n_test_classes);
      } else {
        if (exp_test.empty()) throw SpecError("--test-data is required for folder sources");
        test = load_split(exp_test, m.config, 0, exp_seed, 0, &n_test_classes);
        if (n_test_classes != n_classes) throw SpecError("train and test folders list different classes");
      }
      FeatureBank bank = build_bank(train, test, pick_encoder(m, exp_model), m.state.student.predictor,
                                    m.config.network, parse_feature_kind(exp_kind), n_classes);
      bank = with_validation_split(std::move(bank), exp_val, exp_seed);
      bank_to_archive(bank).save(exp_out);
      std::cout << "wrote " << bank.size() << " rows of width " << bank.features.cols() << " to "
                << exp_out.string() << "\n";
    } else if (*cls || *seg) {
      const FeatureBank bank = bank_from_archive(Archive::load(probe_bank));
      const ProbeSettings settings = load_probe_settings(probe_config);
      ProbeReport report;
      if (*seg) {
        if (bank.position.empty() || bank.position.front() < 0) throw SpecError("probe-segment needs a patch bank");
        report = probe_kind == "knn" ? knn_probe(bank, settings, Score::miou) : logreg_probe(bank, settings, Score::miou);
      } else if (probe_kind == "knn") {
        report = knn_probe(bank, settings, Score::accuracy);
      } else if (probe_kind == "logreg") {
        report = logreg_probe(bank, settings, Score::accuracy);
      } else {
        if (bank.position.empty() || bank.position.front() < 0) throw SpecError("the attentive probe needs a patch bank");
        report = attentive_probe(bank, settings, probe_seed);
      }
      write_text(probe_out, report_to_jsonl(report));
      std::cout << report.probe << " test " << to_string(report.score) << " " << report.test_score << "\n";
    } else if (*viz) {
      const Model m = load_model(viz_ckpt);
      int n_classes = 0;
      const LabeledImages images = load_split(viz_data, m.config, viz_count, 0, 0, &n_classes);
      const EncoderParams& enc = pick_encoder(m, viz_model);
      std::vector<Matrix> feats;
      for (const Image& img : images.images) feats.push_back(patch_features(img, enc, m.config.network));
      const int side = m.config.train.image_size / m.config.network.patch_size;
      const PcaMaps maps = pca_feature_maps(feats, {side, side}, !viz_joint);
      fs::create_directories(viz_out);
      for (std::size_t i = 0; i < maps.maps.size(); ++i) {
        const Image& small = maps.maps[i];
        Image big(small.height * viz_scale, small.width * viz_scale);
        for (int y = 0; y < big.height; ++y)
          for (int x = 0; x < big.width; ++x)
            for (int ch = 0; ch < 3; ++ch) big.at(y, x, ch) = small.at(y / viz_scale, x / viz_scale, ch);
        write_image_png(viz_out / ("pca_" + std::to_string(i) + ".png"), big);
      }
      std::cout << "wrote " << maps.maps.size() << " maps to " << viz_out.string() << "\n";
    } else if (*plt) {
      const auto plots = emit_plots(plt_metrics, plt_out, plt_threshold);
      for (const auto& p : plots) std::cout << (plt_out / p.file).string() << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
