#include "capi/network.hpp"

#include <cmath>
#include <numbers>

#include "capi/error.hpp"
#include "layers.hpp"

namespace capi {

using detail::RmsTrace;

// ---------------------------------------------------------------------------
// Configuration

NetworkConfig NetworkConfig::with_aligned_predictor(NetworkConfig base) {
  base.pred_depth = std::max(1, base.enc_depth / 2);
  base.pred_dim = base.enc_dim;
  base.pred_heads = base.enc_heads;
  return base;
}

int NetworkConfig::enc_hidden() const {
  return static_cast<int>(std::lround(enc_dim * mlp_ratio));
}

int NetworkConfig::pred_hidden() const {
  return static_cast<int>(std::lround(pred_dim * mlp_ratio));
}

void NetworkConfig::validate() const {
  if (patch_size < 1) throw SpecError("patch_size must be positive");
  if (enc_depth < 1 || enc_dim < 1 || enc_heads < 1) throw SpecError("encoder shape must be positive");
  if (pred_depth < 1 || pred_dim < 1 || pred_heads < 1) throw SpecError("predictor shape must be positive");
  if (enc_dim % enc_heads != 0) throw SpecError("enc_dim must be divisible by enc_heads");
  if (pred_dim % pred_heads != 0) throw SpecError("pred_dim must be divisible by pred_heads");
  if (enc_head_dim() % 4 != 0 || pred_head_dim() % 4 != 0) {
    throw SpecError("axial RoPE needs head dimensions divisible by 4");
  }
  if (n_reg < 0) throw SpecError("n_reg must be non-negative");
  if (!(mlp_ratio > 0)) throw SpecError("mlp_ratio must be positive");
  if (!(stochastic_depth >= 0.0 && stochastic_depth < 1.0)) throw SpecError("stochastic_depth must lie in [0, 1)");
  if (!(rope_freq_min > 0 && rope_freq_max >= rope_freq_min)) throw SpecError("invalid RoPE frequency range");
  if (!(norm_eps > 0)) throw SpecError("norm_eps must be positive");
}

int TokenSet::count(TokenRole role) const {
  int n = 0;
  for (auto r : roles) n += (r == role);
  return n;
}

void TokenSet::validate() const {
  if (static_cast<std::size_t>(vectors.rows()) != roles.size() || coords.size() != roles.size()) {
    throw ShapeError("TokenSet: vectors, coords and roles disagree in count");
  }
  for (std::size_t i = 0; i < roles.size(); ++i) {
    if (roles[i] == TokenRole::patch) {
      if (!coords[i]) throw ShapeError("TokenSet: patch token without coordinate");
      const Coord c = *coords[i];
      if (c.row < 0 || c.col < 0 || c.row >= lattice.rows || c.col >= lattice.cols) {
        throw ShapeError("TokenSet: patch coordinate outside lattice");
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Initialization

Matrix xavier_uniform(int fan_out, int fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / (fan_in + fan_out));
  Matrix m(fan_out, fan_in);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-bound, bound);
  return m;
}

namespace {

Matrix truncated_normal(int rows, int cols, double sigma, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    double v = rng.normal();
    while (std::abs(v) > 2.0) v = rng.normal();
    m.data()[i] = sigma * v;
  }
  return m;
}

Matrix ones_row(int dim) { return Matrix::Ones(1, dim); }

}  // namespace

EncoderParams init_encoder(const NetworkConfig& config, Rng& rng) {
  config.validate();
  const int d = config.enc_dim;
  const int hidden = config.enc_hidden();
  EncoderParams p;
  p.patch_embed = xavier_uniform(d, config.patch_dim(), rng);
  p.registers = truncated_normal(config.n_reg, d, 0.02, rng);
  for (int i = 0; i < config.enc_depth; ++i) {
    BlockParams b;
    b.norm1 = ones_row(d);
    b.qkv = xavier_uniform(3 * d, d, rng);
    b.proj = xavier_uniform(d, d, rng);
    b.norm2 = ones_row(d);
    b.fc1 = xavier_uniform(hidden, d, rng);
    b.fc2 = xavier_uniform(d, hidden, rng);
    p.blocks.push_back(std::move(b));
  }
  p.final_norm = ones_row(d);
  return p;
}

PredictorParams init_predictor(const NetworkConfig& config, Rng& rng) {
  config.validate();
  const int d = config.pred_dim;
  const int hidden = config.pred_hidden();
  PredictorParams p;
  p.mask_token = truncated_normal(1, d, 0.02, rng);
  if (config.pred_dim != config.enc_dim) p.context_proj = xavier_uniform(d, config.enc_dim, rng);
  for (int i = 0; i < config.pred_depth; ++i) {
    CrossBlockParams b;
    b.norm_q = ones_row(d);
    b.q = xavier_uniform(d, d, rng);
    b.kv = xavier_uniform(2 * d, d, rng);
    b.proj = xavier_uniform(d, d, rng);
    b.norm2 = ones_row(d);
    b.fc1 = xavier_uniform(hidden, d, rng);
    b.fc2 = xavier_uniform(d, hidden, rng);
    p.blocks.push_back(std::move(b));
  }
  p.final_norm = ones_row(d);
  return p;
}

StudentParams init_student(const NetworkConfig& config, int prototypes, Rng& rng) {
  if (prototypes < 2) throw SpecError("at least two prototypes are required");
  StudentParams s;
  s.encoder = init_encoder(config, rng);
  s.predictor = init_predictor(config, rng);
  s.head = xavier_uniform(prototypes, config.pred_dim, rng);
  return s;
}

// ---------------------------------------------------------------------------
// Patch embedding

Matrix extract_patches(const Image& image, int patch_size, LatticeShape* lattice) {
  if (patch_size < 1) throw SpecError("patch_size must be positive");
  if (image.height % patch_size != 0 || image.width % patch_size != 0 || image.height == 0 ||
      image.width == 0) {
    throw ShapeError("image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                     " is not divisible by patch size " + std::to_string(patch_size));
  }
  const LatticeShape shape{image.height / patch_size, image.width / patch_size};
  Matrix out(shape.count(), patch_size * patch_size * 3);
  for (int pr = 0; pr < shape.rows; ++pr) {
    for (int pc = 0; pc < shape.cols; ++pc) {
      const int row = pr * shape.cols + pc;
      int k = 0;
      for (int y = 0; y < patch_size; ++y)
        for (int x = 0; x < patch_size; ++x)
          for (int ch = 0; ch < 3; ++ch)
            out(row, k++) = image.at(pr * patch_size + y, pc * patch_size + x, ch);
    }
  }
  if (lattice != nullptr) *lattice = shape;
  return out;
}

TokenSet patch_pixels(const Image& image, int patch_size) {
  TokenSet t;
  t.vectors = extract_patches(image, patch_size, &t.lattice);
  for (int r = 0; r < t.lattice.rows; ++r)
    for (int c = 0; c < t.lattice.cols; ++c) t.coords.emplace_back(Coord{r, c});
  t.roles.assign(t.coords.size(), TokenRole::patch);
  return t;
}

TokenSet patchify(const Image& image, const Matrix& patch_embed, int patch_size) {
  TokenSet t = patch_pixels(image, patch_size);
  if (patch_embed.cols() != t.vectors.cols()) throw ShapeError("patch embedding width mismatch");
  t.vectors = t.vectors * patch_embed.transpose();
  return t;
}

TokenSet drop_patches(const TokenSet& tokens, const PatchMask& mask) {
  if (!(tokens.lattice == mask.shape())) throw ShapeError("drop_patches: lattice mismatch");
  std::vector<int> keep;
  for (int i = 0; i < tokens.size(); ++i) {
    const auto& c = tokens.coords[static_cast<std::size_t>(i)];
    if (tokens.roles[static_cast<std::size_t>(i)] != TokenRole::patch || !c) {
      throw ShapeError("drop_patches expects patch tokens only");
    }
    if (!mask.at(*c)) keep.push_back(i);
  }
  TokenSet out;
  out.lattice = tokens.lattice;
  out.vectors.resize(static_cast<Eigen::Index>(keep.size()), tokens.vectors.cols());
  for (std::size_t j = 0; j < keep.size(); ++j) {
    out.vectors.row(static_cast<Eigen::Index>(j)) = tokens.vectors.row(keep[j]);
    out.coords.push_back(tokens.coords[static_cast<std::size_t>(keep[j])]);
    out.roles.push_back(TokenRole::patch);
  }
  return out;
}

// ---------------------------------------------------------------------------
// RoPE

std::vector<double> rope_frequencies(int head_dim, const NetworkConfig& config) {
  if (head_dim % 4 != 0) throw SpecError("RoPE head dimension must be divisible by 4");
  const int n = head_dim / 4;
  std::vector<double> f(static_cast<std::size_t>(n));
  const double lo = std::log(config.rope_freq_min);
  const double hi = std::log(config.rope_freq_max);
  for (int j = 0; j < n; ++j) {
    const double t = n == 1 ? 0.0 : static_cast<double>(j) / (n - 1);
    f[static_cast<std::size_t>(j)] = std::numbers::pi * std::exp(lo + t * (hi - lo));
  }
  return f;
}

double rope_position(int index, int extent) {
  return 2.0 * (index + 0.5) / extent - 1.0;
}

Matrix rope_rotate_positions(const Matrix& x, std::span<const std::optional<RopePosition>> positions,
                             int heads, const NetworkConfig& config, bool inverse) {
  if (static_cast<std::size_t>(x.rows()) != positions.size()) throw ShapeError("rope: position count mismatch");
  if (heads < 1 || x.cols() % heads != 0) throw SpecError("rope: channels not divisible by heads");
  const int hd = static_cast<int>(x.cols()) / heads;
  const std::vector<double> freqs = rope_frequencies(hd, config);
  const int nf = static_cast<int>(freqs.size());
  const double sign = inverse ? -1.0 : 1.0;
  Matrix out = x;
  std::vector<double> cos_r(freqs.size()), sin_r(freqs.size()), cos_c(freqs.size()), sin_c(freqs.size());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const auto& p = positions[static_cast<std::size_t>(i)];
    if (!p) continue;
    for (int j = 0; j < nf; ++j) {
      const double f = freqs[static_cast<std::size_t>(j)];
      cos_r[static_cast<std::size_t>(j)] = std::cos(f * p->row);
      sin_r[static_cast<std::size_t>(j)] = sign * std::sin(f * p->row);
      cos_c[static_cast<std::size_t>(j)] = std::cos(f * p->col);
      sin_c[static_cast<std::size_t>(j)] = sign * std::sin(f * p->col);
    }
    for (int h = 0; h < heads; ++h) {
      for (int axis = 0; axis < 2; ++axis) {
        const int base = h * hd + axis * (hd / 2);
        const auto& cs = axis == 0 ? cos_r : cos_c;
        const auto& sn = axis == 0 ? sin_r : sin_c;
        for (int j = 0; j < nf; ++j) {
          const double a = x(i, base + 2 * j);
          const double b = x(i, base + 2 * j + 1);
          out(i, base + 2 * j) = a * cs[static_cast<std::size_t>(j)] - b * sn[static_cast<std::size_t>(j)];
          out(i, base + 2 * j + 1) = a * sn[static_cast<std::size_t>(j)] + b * cs[static_cast<std::size_t>(j)];
        }
      }
    }
  }
  return out;
}

Matrix rope_rotate(const Matrix& x, std::span<const std::optional<Coord>> coords,
                   LatticeShape lattice, int heads, const NetworkConfig& config, bool inverse) {
  if (static_cast<std::size_t>(x.rows()) != coords.size()) throw ShapeError("rope: coordinate count mismatch");
  std::vector<std::optional<RopePosition>> positions(coords.size());
  for (std::size_t i = 0; i < coords.size(); ++i) {
    if (coords[i]) {
      positions[i] = RopePosition{rope_position(coords[i]->row, lattice.rows),
                                  rope_position(coords[i]->col, lattice.cols)};
    }
  }
  return rope_rotate_positions(x, positions, heads, config, inverse);
}

// ---------------------------------------------------------------------------
// Encoder

DropPattern DropPattern::sample(int depth, double rate, Rng& rng) {
  DropPattern p;
  p.rate = rate;
  p.keep.resize(static_cast<std::size_t>(depth));
  for (auto& k : p.keep) {
    k[0] = !rng.bernoulli(rate);
    k[1] = !rng.bernoulli(rate);
  }
  return p;
}

namespace {

struct SelfBlockTrace {
  Matrix x_in;
  RmsTrace n1;
  Matrix h1;
  Matrix q, k, v;  // q and k after rotation
  std::vector<Matrix> probs;
  Matrix mixed;
  double s1 = 1.0;
  RmsTrace n2;
  Matrix h2;
  Matrix u;
  Matrix z;
  double s2 = 1.0;
};

double branch_scale(Mode mode, const DropPattern* drop, std::size_t block, int branch) {
  if (mode == Mode::eval || drop == nullptr) return 1.0;
  if (!drop->keep[block][static_cast<std::size_t>(branch)]) return 0.0;
  return 1.0 / (1.0 - drop->rate);
}

}  // namespace

struct EncoderTrace {
  std::vector<std::optional<Coord>> coords;
  LatticeShape lattice;
  int n_patch = 0;
  std::vector<SelfBlockTrace> blocks;
  RmsTrace final_norm;
};

EncoderOutput encode(const TokenSet& patches, const EncoderParams& params,
                     const NetworkConfig& config, Mode mode, const DropPattern* drop) {
  patches.validate();
  if (patches.size() == 0) throw ShapeError("encoder requires at least one patch token");
  if (patches.count(TokenRole::patch) != patches.size()) throw ShapeError("encoder input must be patch tokens");
  const int d = config.enc_dim;
  if (patches.vectors.cols() != d) throw ShapeError("encoder input width mismatch");
  if (mode == Mode::train && drop != nullptr && drop->keep.size() != params.blocks.size()) {
    throw ShapeError("drop pattern depth mismatch");
  }
  const int n_patch = patches.size();
  const int n_reg = static_cast<int>(params.registers.rows());

  auto trace = std::make_shared<EncoderTrace>();
  trace->coords = patches.coords;
  trace->coords.resize(static_cast<std::size_t>(n_patch + n_reg), std::nullopt);
  trace->lattice = patches.lattice;
  trace->n_patch = n_patch;

  Matrix x(n_patch + n_reg, d);
  x.topRows(n_patch) = patches.vectors;
  if (n_reg > 0) x.bottomRows(n_reg) = params.registers;

  for (std::size_t bi = 0; bi < params.blocks.size(); ++bi) {
    const BlockParams& b = params.blocks[bi];
    SelfBlockTrace t;
    t.x_in = x;
    t.s1 = branch_scale(mode, drop, bi, 0);
    t.s2 = branch_scale(mode, drop, bi, 1);
    if (t.s1 != 0.0) {
      t.h1 = detail::rms_norm(x, b.norm1, config.norm_eps, &t.n1);
      const Matrix qkv = t.h1 * b.qkv.transpose();
      t.q = rope_rotate(qkv.leftCols(d), trace->coords, trace->lattice, config.enc_heads, config);
      t.k = rope_rotate(qkv.middleCols(d, d), trace->coords, trace->lattice, config.enc_heads, config);
      t.v = qkv.rightCols(d);
      t.mixed = detail::multihead_attention(t.q, t.k, t.v, config.enc_heads, &t.probs);
      x.noalias() += t.s1 * (t.mixed * b.proj.transpose());
    }
    if (t.s2 != 0.0) {
      t.h2 = detail::rms_norm(x, b.norm2, config.norm_eps, &t.n2);
      t.u = t.h2 * b.fc1.transpose();
      t.z = detail::gelu(t.u);
      x.noalias() += t.s2 * (t.z * b.fc2.transpose());
    }
    trace->blocks.push_back(std::move(t));
  }

  EncoderOutput out;
  out.tokens.vectors = detail::rms_norm(x, params.final_norm, config.norm_eps, &trace->final_norm);
  out.tokens.coords = trace->coords;
  out.tokens.roles.assign(static_cast<std::size_t>(n_patch), TokenRole::patch);
  out.tokens.roles.resize(static_cast<std::size_t>(n_patch + n_reg), TokenRole::register_token);
  out.tokens.lattice = patches.lattice;
  out.trace = std::move(trace);
  return out;
}

Matrix encode_backward(const EncoderTrace& trace, const Matrix& d_output,
                       const EncoderParams& params, const NetworkConfig& config,
                       EncoderParams& grads) {
  const int d = config.enc_dim;
  Matrix dx = detail::rms_norm_backward(d_output, trace.final_norm, params.final_norm, grads.final_norm);
  for (std::size_t bi = params.blocks.size(); bi-- > 0;) {
    const BlockParams& b = params.blocks[bi];
    BlockParams& g = grads.blocks[bi];
    const SelfBlockTrace& t = trace.blocks[bi];
    if (t.s2 != 0.0) {
      const Matrix dm = t.s2 * dx;
      g.fc2.noalias() += dm.transpose() * t.z;
      const Matrix du = detail::gelu_backward(dm * b.fc2, t.u);
      g.fc1.noalias() += du.transpose() * t.h2;
      dx += detail::rms_norm_backward(du * b.fc1, t.n2, b.norm2, g.norm2);
    }
    if (t.s1 != 0.0) {
      const Matrix da = t.s1 * dx;
      g.proj.noalias() += da.transpose() * t.mixed;
      Matrix dq, dk, dv;
      detail::multihead_attention_backward(da * b.proj, t.q, t.k, t.v, t.probs, config.enc_heads, dq, dk, dv);
      Matrix dqkv(dx.rows(), 3 * d);
      dqkv.leftCols(d) = rope_rotate(dq, trace.coords, trace.lattice, config.enc_heads, config, true);
      dqkv.middleCols(d, d) = rope_rotate(dk, trace.coords, trace.lattice, config.enc_heads, config, true);
      dqkv.rightCols(d) = dv;
      g.qkv.noalias() += dqkv.transpose() * t.h1;
      dx += detail::rms_norm_backward(dqkv * b.qkv, t.n1, b.norm1, g.norm1);
    }
  }
  const auto n_reg = static_cast<Eigen::Index>(dx.rows()) - trace.n_patch;
  if (n_reg > 0) grads.registers += dx.bottomRows(n_reg);
  return dx.topRows(trace.n_patch);
}

// ---------------------------------------------------------------------------
// Predictor

namespace {

struct CrossBlockTrace {
  RmsTrace n1;
  Matrix h1;
  Matrix q, k, v;
  std::vector<Matrix> probs;
  Matrix mixed;
  RmsTrace n2;
  Matrix h2;
  Matrix u;
  Matrix z;
};

}  // namespace

struct PredictorTrace {
  std::vector<std::optional<Coord>> query_coords;
  std::vector<std::optional<Coord>> context_coords;
  LatticeShape lattice;
  Matrix context;            // raw context vectors
  Matrix projected_context;  // after context_proj (or equal to context)
  std::vector<CrossBlockTrace> blocks;
  RmsTrace final_norm;
};

namespace {

// One cross-attention sublayer: y + proj(attn(norm(y), ctx)).
Matrix cross_attention(const Matrix& y, const CrossBlockParams& b, const PredictorTrace& tr,
                       const NetworkConfig& config, CrossBlockTrace& t) {
  const int d = config.pred_dim;
  t.h1 = detail::rms_norm(y, b.norm_q, config.norm_eps, &t.n1);
  t.q = rope_rotate(t.h1 * b.q.transpose(), tr.query_coords, tr.lattice, config.pred_heads, config);
  const Matrix kv = tr.projected_context * b.kv.transpose();
  t.k = rope_rotate(kv.leftCols(d), tr.context_coords, tr.lattice, config.pred_heads, config);
  t.v = kv.rightCols(d);
  t.mixed = detail::multihead_attention(t.q, t.k, t.v, config.pred_heads, &t.probs);
  return y + t.mixed * b.proj.transpose();
}

std::shared_ptr<PredictorTrace> start_predictor(std::span<const Coord> queries, const TokenSet& context,
                                                const PredictorParams& params,
                                                const NetworkConfig& config) {
  if (queries.empty()) throw ShapeError("predictor requires at least one query");
  if (context.size() == 0) throw ShapeError("predictor context is empty");
  context.validate();
  if (context.vectors.cols() != config.enc_dim) throw ShapeError("predictor context width mismatch");
  auto tr = std::make_shared<PredictorTrace>();
  tr->lattice = context.lattice;
  for (const Coord& c : queries) {
    if (c.row < 0 || c.col < 0 || c.row >= context.lattice.rows || c.col >= context.lattice.cols) {
      throw ShapeError("predictor query outside lattice");
    }
    tr->query_coords.emplace_back(c);
  }
  tr->context_coords = context.coords;
  for (std::size_t i = 0; i < context.roles.size(); ++i) {
    if (context.roles[i] != TokenRole::patch) tr->context_coords[i] = std::nullopt;
  }
  tr->context = context.vectors;
  tr->projected_context = params.context_proj.size() > 0
                              ? Matrix(context.vectors * params.context_proj.transpose())
                              : context.vectors;
  return tr;
}

}  // namespace

PredictorOutput predict(std::span<const Coord> queries, const TokenSet& context,
                        const PredictorParams& params, const NetworkConfig& config,
                        int max_blocks, AttentionCounter* counter) {
  auto tr = start_predictor(queries, context, params, config);
  const auto m = static_cast<Eigen::Index>(queries.size());
  Matrix y = params.mask_token.replicate(m, 1);
  const std::size_t depth = max_blocks < 0 ? params.blocks.size()
                                           : std::min(params.blocks.size(), static_cast<std::size_t>(max_blocks));
  for (std::size_t bi = 0; bi < depth; ++bi) {
    const CrossBlockParams& b = params.blocks[bi];
    CrossBlockTrace t;
    y = cross_attention(y, b, *tr, config, t);
    if (counter != nullptr) ++counter->calls;
    t.h2 = detail::rms_norm(y, b.norm2, config.norm_eps, &t.n2);
    t.u = t.h2 * b.fc1.transpose();
    t.z = detail::gelu(t.u);
    y.noalias() += t.z * b.fc2.transpose();
    tr->blocks.push_back(std::move(t));
  }
  PredictorOutput out;
  out.predictions = detail::rms_norm(y, params.final_norm, config.norm_eps, &tr->final_norm);
  out.trace = std::move(tr);
  return out;
}

Matrix predict_backward(const PredictorTrace& trace, const Matrix& d_predictions,
                        const PredictorParams& params, const NetworkConfig& config,
                        PredictorParams& grads) {
  const int d = config.pred_dim;
  Matrix dy = detail::rms_norm_backward(d_predictions, trace.final_norm, params.final_norm, grads.final_norm);
  Matrix d_ctx = Matrix::Zero(trace.projected_context.rows(), trace.projected_context.cols());
  for (std::size_t bi = trace.blocks.size(); bi-- > 0;) {
    const CrossBlockParams& b = params.blocks[bi];
    CrossBlockParams& g = grads.blocks[bi];
    const CrossBlockTrace& t = trace.blocks[bi];
    g.fc2.noalias() += dy.transpose() * t.z;
    const Matrix du = detail::gelu_backward(dy * b.fc2, t.u);
    g.fc1.noalias() += du.transpose() * t.h2;
    dy += detail::rms_norm_backward(du * b.fc1, t.n2, b.norm2, g.norm2);

    g.proj.noalias() += dy.transpose() * t.mixed;
    Matrix dq, dk, dv;
    detail::multihead_attention_backward(dy * b.proj, t.q, t.k, t.v, t.probs, config.pred_heads, dq, dk, dv);
    const Matrix dq_raw = rope_rotate(dq, trace.query_coords, trace.lattice, config.pred_heads, config, true);
    Matrix dkv(dk.rows(), 2 * d);
    dkv.leftCols(d) = rope_rotate(dk, trace.context_coords, trace.lattice, config.pred_heads, config, true);
    dkv.rightCols(d) = dv;
    g.kv.noalias() += dkv.transpose() * trace.projected_context;
    d_ctx.noalias() += dkv * b.kv;
    g.q.noalias() += dq_raw.transpose() * t.h1;
    dy += detail::rms_norm_backward(dq_raw * b.q, t.n1, b.norm_q, g.norm_q);
  }
  grads.mask_token.row(0) += dy.colwise().sum();
  if (params.context_proj.size() > 0) {
    grads.context_proj.noalias() += d_ctx.transpose() * trace.context;
    return d_ctx * params.context_proj;
  }
  return d_ctx;
}

Matrix predictor_first_attention(std::span<const Coord> queries, const TokenSet& context,
                                 const PredictorParams& params, const NetworkConfig& config,
                                 AttentionCounter* counter) {
  auto tr = start_predictor(queries, context, params, config);
  if (params.blocks.empty()) throw SpecError("predictor has no blocks");
  const Matrix y = params.mask_token.replicate(static_cast<Eigen::Index>(queries.size()), 1);
  CrossBlockTrace t;
  Matrix out = cross_attention(y, params.blocks.front(), *tr, config, t);
  if (counter != nullptr) ++counter->calls;
  return out;
}

// ---------------------------------------------------------------------------
// EMA

void check_same_shapes(const EncoderParams& a, const EncoderParams& b) {
  std::vector<std::pair<std::string, std::pair<Eigen::Index, Eigen::Index>>> shapes;
  visit(a, "", [&](const std::string& name, const Matrix& m, ParamGroup) {
    shapes.push_back({name, {m.rows(), m.cols()}});
  });
  std::size_t i = 0;
  visit(b, "", [&](const std::string& name, const Matrix& m, ParamGroup) {
    if (i >= shapes.size() || shapes[i].first != name ||
        shapes[i].second != std::pair{m.rows(), m.cols()}) {
      throw ShapeError("parameter sets differ at '" + name + "'");
    }
    ++i;
  });
  if (i != shapes.size()) throw ShapeError("parameter sets differ in tensor count");
}

void ema_update(EncoderParams& teacher, const EncoderParams& student, double momentum) {
  if (!(momentum >= 0.0 && momentum <= 1.0)) throw SpecError("EMA momentum must lie in [0, 1]");
  check_same_shapes(teacher, student);
  std::vector<const Matrix*> src;
  visit(student, "", [&](const std::string&, const Matrix& m, ParamGroup) { src.push_back(&m); });
  std::size_t i = 0;
  visit(teacher, "", [&](const std::string&, Matrix& m, ParamGroup) {
    const Matrix& s = *src[i++];
    if (momentum == 1.0) return;
    if (momentum == 0.0) {
      m = s;
    } else {
      m = momentum * m + (1.0 - momentum) * s;
    }
  });
}

}  // namespace capi
