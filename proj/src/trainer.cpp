#include "capi/trainer.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "capi/config.hpp"
#include "capi/error.hpp"
#include "capi/metrics.hpp"

namespace capi {

// ---------------------------------------------------------------------------
// Configuration

std::int64_t Schedule::warmup_steps() const {
  return static_cast<std::int64_t>(std::llround(warmup_fraction * static_cast<double>(total_steps)));
}

void Schedule::validate() const {
  if (total_steps < 1) throw SpecError("total_steps must be positive");
  if (!(warmup_fraction >= 0 && warmup_fraction < 1)) throw SpecError("warmup_fraction must lie in [0, 1)");
  if (!(cosine_truncation >= 0 && cosine_truncation < 1)) throw SpecError("cosine_truncation must lie in [0, 1)");
  if (!(peak_lr > 0)) throw SpecError("peak_lr must be positive");
  if (!(final_lr_floor >= 0 && final_lr_floor <= peak_lr)) throw SpecError("final_lr_floor must lie in [0, peak_lr]");
}

double lr_at(std::int64_t step, const Schedule& schedule) {
  schedule.validate();
  if (step < 0 || step > schedule.total_steps) {
    throw SpecError("lr_at: step " + std::to_string(step) + " outside [0, " +
                    std::to_string(schedule.total_steps) + "]");
  }
  const std::int64_t warm = schedule.warmup_steps();
  if (step < warm) {
    return schedule.peak_lr * static_cast<double>(step) / static_cast<double>(warm);
  }
  const std::int64_t span = schedule.total_steps - warm;
  const double progress = span == 0 ? 0.0 : static_cast<double>(step - warm) / static_cast<double>(span);
  const double u = (1.0 - schedule.cosine_truncation) * progress;
  return schedule.final_lr_floor +
         0.5 * (schedule.peak_lr - schedule.final_lr_floor) * (1.0 + std::cos(std::numbers::pi * u));
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw SpecError("batch_size must be positive");
  if (image_size < 1) throw SpecError("image_size must be positive");
  if (!(clustering_lr_ratio > 0 && patch_embed_lr_ratio > 0 && norm_wd_ratio > 0)) {
    throw SpecError("learning-rate and weight-decay ratios must be positive");
  }
  if (adamw.weight_decay < 0 || clustering_weight_decay < 0) throw SpecError("weight decay must be non-negative");
  if (!(adamw.beta1 >= 0 && adamw.beta1 < 1 && adamw.beta2 >= 0 && adamw.beta2 < 1)) {
    throw SpecError("AdamW betas must lie in [0, 1)");
  }
  mask.validate();
  if (n_pred < 1) throw SpecError("n_pred must be positive");
  if (!(crop_scale_min > 0 && crop_scale_min <= crop_scale_max && crop_scale_max <= 1)) {
    throw SpecError("crop scale range must lie within (0, 1]");
  }
  if (checkpoint_every < 0) throw SpecError("checkpoint_every must be non-negative");
  if (mi_window < 1) throw SpecError("mi_window must be positive");
}

void PretrainConfig::validate() const {
  network.validate();
  train.validate();
  schedule.validate();
  if (objective.prototypes < 2) throw SpecError("at least two prototypes are required");
  if (!(objective.tau_student > 0 && objective.tau_teacher > 0)) throw SpecError("temperatures must be positive");
  if (objective.sk_iters < 1) throw SpecError("sk_iters must be positive");
  if (train.image_size % network.patch_size != 0) throw SpecError("image_size must be divisible by patch_size");
  const int side = train.image_size / network.patch_size;
  const LatticeShape lattice{side, side};
  if (train.n_pred > target_masked_count(lattice, train.mask.ratio)) {
    throw SpecError("n_pred exceeds the number of masked patches");
  }
  if (target_masked_count(lattice, train.mask.ratio) == lattice.count()) {
    throw SpecError("masking ratio leaves no visible patch for the encoder");
  }
}

TrainState init_train_state(const PretrainConfig& config) {
  config.validate();
  TrainState s;
  s.seed = config.seed;
  Rng rng = Rng::derive(config.seed, "init");
  s.student = init_student(config.network, config.objective.prototypes, rng);
  s.teacher = s.student.encoder;
  s.head = init_cluster_head(config.objective.prototypes, config.network.enc_dim, rng);
  s.head.tau_student = config.objective.tau_student;
  s.head.tau_teacher = config.objective.tau_teacher;
  s.head.sk_iters = config.objective.sk_iters;
  AdamWConfig clustering = config.train.adamw;
  clustering.weight_decay = config.train.clustering_weight_decay;
  s.network_optimizer = AdamW(config.train.adamw);
  s.clustering_optimizer = AdamW(clustering);
  return s;
}

// ---------------------------------------------------------------------------
// Step

namespace {

double squared_norm(const StudentParams& p) {
  double s = 0;
  visit(p, "", [&](const std::string&, const Matrix& m, ParamGroup) { s += m.squaredNorm(); });
  return s;
}

double squared_norm(const EncoderParams& p) {
  double s = 0;
  visit(p, "", [&](const std::string&, const Matrix& m, ParamGroup) { s += m.squaredNorm(); });
  return s;
}

LossGradients zero_gradients(const TrainState& state) {
  return {zeros_like(state.student), zeros_like(state.teacher),
          Matrix::Zero(state.head.centroids.rows(), state.head.centroids.cols())};
}

}  // namespace

BatchGradients compute_batch_gradients(const TrainState& state, std::span<const Image> batch,
                                       const PretrainConfig& config) {
  if (batch.empty()) throw SpecError("empty batch");
  const NetworkConfig& net = config.network;
  const auto b_count = static_cast<int>(batch.size());
  const std::int64_t step = state.step + 1;

  // (1) Teacher forward on the full view; targets are plain values.
  LatticeShape lattice{};
  std::vector<Matrix> pixels;
  pixels.reserve(batch.size());
  for (const Image& img : batch) {
    LatticeShape l;
    pixels.push_back(extract_patches(img, net.patch_size, &l));
    if (lattice.count() != 0 && !(l == lattice)) throw ShapeError("batch images differ in size");
    lattice = l;
  }
  const int n = lattice.count();
  Matrix teacher_features(static_cast<Eigen::Index>(b_count) * n, net.enc_dim);
  for (int b = 0; b < b_count; ++b) {
    TokenSet tokens;
    tokens.vectors = pixels[static_cast<std::size_t>(b)] * state.teacher.patch_embed.transpose();
    tokens.lattice = lattice;
    for (int i = 0; i < n; ++i) tokens.coords.emplace_back(Coord{i / lattice.cols, i % lattice.cols});
    tokens.roles.assign(static_cast<std::size_t>(n), TokenRole::patch);
    const EncoderOutput out = encode(tokens, state.teacher, net, Mode::eval);
    teacher_features.middleRows(static_cast<Eigen::Index>(b) * n, n) = out.tokens.vectors.topRows(n);
  }
  const Matrix logits = compute_logits(teacher_features, state.head.centroids);
  BatchGradients g;
  g.positions = n;
  g.targets = config.objective.sk_mode == SinkhornMode::positionwise
                  ? sinkhorn_positionwise(logits, b_count, n, state.head.tau_teacher, state.head.sk_iters)
                  : sinkhorn_standard(logits, state.head.tau_teacher, state.head.sk_iters);

  // (4) Clustering loss: gradient into the centroids only.
  g.cluster = zero_gradients(state);
  const ClusteringLossResult cl = clustering_loss_and_grad(teacher_features, state.head, g.targets.probs);
  g.cluster_loss = cl.loss;
  g.cluster.centroids = cl.grad_centroids;

  // (2)-(3) Student: mask, encode, predict, MIM loss, backward into the network.
  g.mim = zero_gradients(state);
  StudentParams& grads = g.mim.network;
  const double inv_batch = 1.0 / b_count;
  double mim_sum = 0.0;
  for (int b = 0; b < b_count; ++b) {
    const auto key = static_cast<std::uint64_t>(b);
    const auto ukey = static_cast<std::uint64_t>(step);
    Rng mask_rng = Rng::derive(state.seed, "masking", {ukey, key});
    Rng drop_rng = Rng::derive(state.seed, "drop_path", {ukey, key});
    Rng target_rng = Rng::derive(state.seed, "targets", {ukey, key});
    const PatchMask mask = generate_mask(lattice, config.train.mask, mask_rng);
    const DropPattern drop = DropPattern::sample(net.enc_depth, net.stochastic_depth, drop_rng);
    const std::vector<Coord> queries = sample_prediction_targets(mask, config.train.n_pred, target_rng);

    TokenSet pix;
    pix.vectors = pixels[static_cast<std::size_t>(b)];
    pix.lattice = lattice;
    for (int i = 0; i < n; ++i) pix.coords.emplace_back(Coord{i / lattice.cols, i % lattice.cols});
    pix.roles.assign(static_cast<std::size_t>(n), TokenRole::patch);
    TokenSet kept = drop_patches(pix, mask);
    const Matrix kept_pixels = kept.vectors;
    kept.vectors = kept_pixels * state.student.encoder.patch_embed.transpose();

    const EncoderOutput enc = encode(kept, state.student.encoder, net, Mode::train, &drop);
    const PredictorOutput pred = predict(queries, enc.tokens, state.student.predictor, net);

    Matrix targets(static_cast<Eigen::Index>(queries.size()), g.targets.probs.cols());
    for (std::size_t q = 0; q < queries.size(); ++q) {
      const int pos = queries[q].row * lattice.cols + queries[q].col;
      targets.row(static_cast<Eigen::Index>(q)) = g.targets.probs.row(static_cast<Eigen::Index>(b) * n + pos);
    }
    const MimLossResult mim = mim_loss(pred.predictions, targets, state.student.head, state.head.tau_student);
    mim_sum += mim.loss;
    grads.head += inv_batch * mim.grad_head;
    const Matrix d_context = predict_backward(*pred.trace, inv_batch * mim.grad_predictions,
                                              state.student.predictor, net, grads.predictor);
    const Matrix d_patches = encode_backward(*enc.trace, d_context, state.student.encoder, net, grads.encoder);
    grads.encoder.patch_embed.noalias() += d_patches.transpose() * kept_pixels;
  }
  g.mim_loss = mim_sum * inv_batch;

  if (!std::isfinite(g.mim_loss) || !std::isfinite(g.cluster_loss)) {
    std::ostringstream os;
    os << "non-finite loss at step " << step << ": mim_loss=" << g.mim_loss
       << " cluster_loss=" << g.cluster_loss << " max|logit|=" << logits.cwiseAbs().maxCoeff()
       << " max|teacher feature|=" << teacher_features.cwiseAbs().maxCoeff();
    throw NumericError(os.str());
  }
  return g;
}

StepResult train_step(TrainState& state, std::span<const Image> batch, const PretrainConfig& config) {
  const std::int64_t step = state.step + 1;
  if (step > config.schedule.total_steps) throw SpecError("training already reached total_steps");
  BatchGradients g = compute_batch_gradients(state, batch, config);

  StepResult result;
  result.audit.mim_wrt_centroids = g.mim.centroids.norm();
  result.audit.mim_wrt_teacher = std::sqrt(squared_norm(g.mim.teacher));
  result.audit.cluster_wrt_network = std::sqrt(squared_norm(g.cluster.network));
  result.audit.cluster_wrt_teacher = std::sqrt(squared_norm(g.cluster.teacher));

  const double lr = lr_at(step, config.schedule);
  const double momentum = 1.0 - lr;

  // (5) Optimizer A over the network with per-group scaling.
  std::vector<ParamSlot> slots;
  std::vector<const Matrix*> grad_ptrs;
  visit(g.mim.network, "", [&](const std::string&, const Matrix& m, ParamGroup) { grad_ptrs.push_back(&m); });
  std::size_t i = 0;
  visit(state.student, "", [&](const std::string& name, Matrix& m, ParamGroup group) {
    ParamSlot s{name, &m, grad_ptrs[i++], 1.0, 1.0};
    if (group == ParamGroup::patch_embed) s.lr_scale = config.train.patch_embed_lr_ratio;
    if (group == ParamGroup::norm) s.wd_scale = config.train.norm_wd_ratio;
    slots.push_back(s);
  });
  state.network_optimizer.step(slots, lr);

  // Optimizer B over the centroids at a fraction of the backbone lr.
  const ParamSlot centroid_slot{"centroids", &state.head.centroids, &g.cluster.centroids, 1.0, 1.0};
  state.clustering_optimizer.step(std::span(&centroid_slot, 1), config.train.clustering_lr_ratio * lr);

  // (6) Teacher EMA.
  ema_update(state.teacher, state.student.encoder, momentum);
  state.step = step;

  StepMetrics& m = result.metrics;
  m.step = step;
  m.mim_loss = g.mim_loss;
  m.cluster_loss = g.cluster_loss;
  m.lr = lr;
  m.momentum = momentum;
  m.target_entropy = mean_entropy(g.targets.probs);
  const int b_count = static_cast<int>(batch.size());
  m.position_mi = mutual_information(soft_position_cluster_joint(g.targets.probs, b_count, g.positions));
  const Matrix counts = hard_position_cluster_counts(g.targets.probs, b_count, g.positions);
  m.hard_position_mi = mutual_information(counts);
  if (state.position_counts.rows() != counts.rows() || state.position_counts.cols() != counts.cols()) {
    state.position_counts = Matrix::Zero(counts.rows(), counts.cols());
  }
  state.position_counts += counts;
  if (step % config.train.mi_window == 0) {
    m.window_position_mi = mutual_information(state.position_counts);
    state.position_counts.setZero();
  }
  return result;
}

// ---------------------------------------------------------------------------
// Data

Image train_view(const Image& image, const TrainConfig& config, Rng& rng) {
  const CropParams crop = sample_resized_crop(image.height, image.width, config.crop_scale_min,
                                              config.crop_scale_max, config.hflip, rng);
  return normalize_channels(apply_crop(image, crop, config.image_size));
}

std::vector<Image> sample_batch(const ImageDataset& data, const PretrainConfig& config, std::int64_t step) {
  if (data.size() == 0) throw SpecError("dataset is empty");
  Rng index_rng = Rng::derive(config.seed, "data", {static_cast<std::uint64_t>(step)});
  std::vector<Image> batch;
  batch.reserve(static_cast<std::size_t>(config.train.batch_size));
  for (int slot = 0; slot < config.train.batch_size; ++slot) {
    const std::size_t index = index_rng.uniform_index(data.size());
    Rng aug = Rng::derive(config.seed, "augment",
                          {static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(slot)});
    batch.push_back(train_view(data.load(index), config.train, aug));
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Checkpoints

std::uint64_t config_digest(const std::string& config_text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : config_text) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace {

void put_optimizer(Archive& a, const std::string& prefix, const AdamW& opt,
                   const std::vector<std::string>& names) {
  a.put(prefix + ".steps", std::vector<std::int64_t>{opt.steps()});
  const auto& m = opt.first_moments();
  const auto& v = opt.second_moments();
  for (std::size_t i = 0; i < m.size(); ++i) {
    a.put(prefix + ".m." + names[i], m[i]);
    a.put(prefix + ".v." + names[i], v[i]);
  }
}

void load_optimizer(const Archive& a, const std::string& prefix, AdamW& opt,
                    const std::vector<std::string>& names) {
  const std::int64_t steps = a.scalar_int(prefix + ".steps");
  std::vector<Matrix> m, v;
  if (steps > 0) {
    for (const auto& name : names) {
      m.push_back(a.matrix(prefix + ".m." + name));
      v.push_back(a.matrix(prefix + ".v." + name));
    }
  }
  opt.restore(steps, std::move(m), std::move(v));
}

template <typename P>
std::vector<std::string> tensor_names(const P& params) {
  std::vector<std::string> names;
  visit(params, "", [&](const std::string& name, const Matrix&, ParamGroup) { names.push_back(name); });
  return names;
}

}  // namespace

Archive checkpoint_archive(const TrainState& state, const std::string& config_text) {
  Archive a;
  a.put("meta.step", std::vector<std::int64_t>{state.step});
  a.put("meta.seed", std::vector<std::int64_t>{static_cast<std::int64_t>(state.seed)});
  a.put("meta.config_digest", std::vector<std::int64_t>{static_cast<std::int64_t>(config_digest(config_text))});
  a.put("meta.config", config_text);
  visit(state.student, "student.", [&](const std::string& name, const Matrix& m, ParamGroup) { a.put(name, m); });
  visit(state.teacher, "teacher.", [&](const std::string& name, const Matrix& m, ParamGroup) { a.put(name, m); });
  a.put("head.centroids", state.head.centroids);
  put_optimizer(a, "opt_network", state.network_optimizer, tensor_names(state.student));
  put_optimizer(a, "opt_clustering", state.clustering_optimizer, {"centroids"});
  a.put("metrics.position_counts", state.position_counts);
  return a;
}

TrainState restore_checkpoint(const Archive& archive, const PretrainConfig& config) {
  TrainState s = init_train_state(config);
  s.step = archive.scalar_int("meta.step");
  s.seed = static_cast<std::uint64_t>(archive.scalar_int("meta.seed"));
  auto load_into = [&](auto& params, const std::string& prefix) {
    visit(params, prefix, [&](const std::string& name, Matrix& m, ParamGroup) {
      const Matrix& saved = archive.matrix(name);
      if (saved.rows() != m.rows() || saved.cols() != m.cols()) {
        throw ShapeError("checkpoint tensor '" + name + "' does not match the configured network");
      }
      m = saved;
    });
  };
  load_into(s.student, "student.");
  load_into(s.teacher, "teacher.");
  const Matrix& c = archive.matrix("head.centroids");
  if (c.rows() != s.head.centroids.rows() || c.cols() != s.head.centroids.cols()) {
    throw ShapeError("checkpoint centroids do not match the configured head");
  }
  s.head.centroids = c;
  load_optimizer(archive, "opt_network", s.network_optimizer, tensor_names(s.student));
  load_optimizer(archive, "opt_clustering", s.clustering_optimizer, {"centroids"});
  s.position_counts = archive.matrix("metrics.position_counts");
  return s;
}

// ---------------------------------------------------------------------------
// Loop

TrainState pretrain(const PretrainConfig& config, const ImageDataset& data, const PretrainOptions& options) {
  config.validate();
  if (data.size() == 0) throw SpecError("dataset is empty");
  std::filesystem::create_directories(options.out_dir);
  const std::string config_text = serialize_pretrain_config(config);

  TrainState state;
  const auto metrics_path = options.out_dir / "metrics.jsonl";
  if (options.resume) {
    const Archive a = Archive::load(*options.resume);
    if (static_cast<std::uint64_t>(a.scalar_int("meta.config_digest")) != config_digest(config_text)) {
      throw SpecError("checkpoint was written with a different configuration");
    }
    state = restore_checkpoint(a, config);
    // Drop records past the checkpoint so the log stays one record per step.
    std::vector<StepMetrics> kept;
    if (std::filesystem::exists(metrics_path)) {
      for (const auto& r : read_metrics(metrics_path))
        if (r.step <= state.step) kept.push_back(r);
    }
    write_metrics(metrics_path, kept);
  } else {
    state = init_train_state(config);
    write_metrics(metrics_path, {});
  }

  MetricsWriter writer(metrics_path);
  const std::int64_t end = options.stop_after >= 0 ? std::min(options.stop_after, config.schedule.total_steps)
                                                   : config.schedule.total_steps;
  auto save = [&](const TrainState& s) {
    const Archive a = checkpoint_archive(s, config_text);
    a.save(options.out_dir / ("checkpoint_" + std::to_string(s.step) + ".capi"));
    a.save(options.out_dir / "checkpoint_last.capi");
  };
  while (state.step < end) {
    const std::vector<Image> batch = sample_batch(data, config, state.step + 1);
    const StepResult r = train_step(state, batch, config);
    writer.write(r.metrics);
    if (options.on_step) options.on_step(r.metrics);
    if (config.train.checkpoint_every > 0 && state.step % config.train.checkpoint_every == 0 && state.step != end) {
      save(state);
    }
  }
  save(state);
  return state;
}

}  // namespace capi
