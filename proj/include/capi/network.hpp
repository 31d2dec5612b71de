#pragma once

#include <array>
#include <concepts>
#include <memory>
#include <type_traits>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "capi/image.hpp"
#include "capi/masking.hpp"
#include "capi/rng.hpp"
#include "capi/tensor.hpp"

namespace capi {

struct NetworkConfig {
  int patch_size = 16;
  int enc_depth = 12;
  int enc_dim = 768;
  int enc_heads = 12;
  int pred_depth = 6;
  int pred_dim = 768;
  int pred_heads = 12;
  int n_reg = 16;
  double mlp_ratio = 4.0;
  double stochastic_depth = 0.2;
  double rope_freq_min = 7e-4;
  double rope_freq_max = 7.0;
  double norm_eps = 1e-5;

  // Predictor depth = enc_depth / 2, width and heads copied from the encoder.
  static NetworkConfig with_aligned_predictor(NetworkConfig base);

  int patch_dim() const { return patch_size * patch_size * 3; }
  int enc_head_dim() const { return enc_dim / enc_heads; }
  int pred_head_dim() const { return pred_dim / pred_heads; }
  int enc_hidden() const;
  int pred_hidden() const;
  void validate() const;
  bool operator==(const NetworkConfig&) const = default;
};

enum class TokenRole : std::uint8_t { patch, register_token, mask_query };

// Token vectors with their lattice coordinates. Registers (and any global
// query) carry no coordinate.
struct TokenSet {
  Matrix vectors;
  std::vector<std::optional<Coord>> coords;
  std::vector<TokenRole> roles;
  LatticeShape lattice{};

  int size() const { return static_cast<int>(roles.size()); }
  int count(TokenRole role) const;
  void validate() const;
};

enum class ParamGroup : std::uint8_t { weight, norm, patch_embed, embedding };

struct BlockParams {
  Matrix norm1;  // 1 x dim
  Matrix qkv;    // 3*dim x dim
  Matrix proj;   // dim x dim
  Matrix norm2;  // 1 x dim
  Matrix fc1;    // hidden x dim
  Matrix fc2;    // dim x hidden
};

struct EncoderParams {
  Matrix patch_embed;  // dim x patch_dim
  Matrix registers;    // n_reg x dim
  std::vector<BlockParams> blocks;
  Matrix final_norm;   // 1 x dim
};

struct CrossBlockParams {
  Matrix norm_q;  // 1 x dim
  Matrix q;       // dim x dim
  Matrix kv;      // 2*dim x dim, applied to the context
  Matrix proj;    // dim x dim
  Matrix norm2;
  Matrix fc1;
  Matrix fc2;
};

struct PredictorParams {
  Matrix mask_token;    // 1 x pred_dim
  Matrix context_proj;  // pred_dim x enc_dim; empty when the widths agree
  std::vector<CrossBlockParams> blocks;
  Matrix final_norm;
};

// Everything trained by the MIM loss.
struct StudentParams {
  EncoderParams encoder;
  PredictorParams predictor;
  Matrix head;  // prototypes x pred_dim, the linear student head
};

// Visitors call f(name, tensor, group) for every tensor in a fixed order.
// The order defines checkpoint layout and optimizer state alignment.
template <typename Self, typename F>
  requires std::same_as<std::remove_const_t<Self>, BlockParams> ||
           std::same_as<std::remove_const_t<Self>, CrossBlockParams>
void visit_block(Self& b, const std::string& prefix, F&& f) {
  if constexpr (std::same_as<std::remove_const_t<Self>, BlockParams>) {
    f(prefix + "norm1", b.norm1, ParamGroup::norm);
    f(prefix + "qkv", b.qkv, ParamGroup::weight);
  } else {
    f(prefix + "norm_q", b.norm_q, ParamGroup::norm);
    f(prefix + "q", b.q, ParamGroup::weight);
    f(prefix + "kv", b.kv, ParamGroup::weight);
  }
  f(prefix + "proj", b.proj, ParamGroup::weight);
  f(prefix + "norm2", b.norm2, ParamGroup::norm);
  f(prefix + "fc1", b.fc1, ParamGroup::weight);
  f(prefix + "fc2", b.fc2, ParamGroup::weight);
}

template <typename Self, typename F>
  requires std::same_as<std::remove_const_t<Self>, EncoderParams>
void visit(Self& p, const std::string& prefix, F&& f) {
  f(prefix + "patch_embed", p.patch_embed, ParamGroup::patch_embed);
  f(prefix + "registers", p.registers, ParamGroup::embedding);
  for (std::size_t i = 0; i < p.blocks.size(); ++i)
    visit_block(p.blocks[i], prefix + "blocks." + std::to_string(i) + ".", f);
  f(prefix + "final_norm", p.final_norm, ParamGroup::norm);
}

template <typename Self, typename F>
  requires std::same_as<std::remove_const_t<Self>, PredictorParams>
void visit(Self& p, const std::string& prefix, F&& f) {
  f(prefix + "mask_token", p.mask_token, ParamGroup::embedding);
  if (p.context_proj.size() > 0) f(prefix + "context_proj", p.context_proj, ParamGroup::weight);
  for (std::size_t i = 0; i < p.blocks.size(); ++i)
    visit_block(p.blocks[i], prefix + "blocks." + std::to_string(i) + ".", f);
  f(prefix + "final_norm", p.final_norm, ParamGroup::norm);
}

template <typename Self, typename F>
  requires std::same_as<std::remove_const_t<Self>, StudentParams>
void visit(Self& p, const std::string& prefix, F&& f) {
  visit(p.encoder, prefix + "encoder.", f);
  visit(p.predictor, prefix + "predictor.", f);
  f(prefix + "head", p.head, ParamGroup::weight);
}

template <typename P>
P zeros_like(const P& params) {
  P out = params;
  visit(out, "", [](const std::string&, Matrix& m, ParamGroup) { m.setZero(); });
  return out;
}

template <typename P>
std::size_t parameter_count(const P& params) {
  std::size_t n = 0;
  visit(params, "", [&](const std::string&, const Matrix& m, ParamGroup) {
    n += static_cast<std::size_t>(m.size());
  });
  return n;
}

// xavier_uniform for linear maps, ones for norm gains, truncated normal
// (sigma 0.02, cut at 2 sigma) for register and mask embeddings.
EncoderParams init_encoder(const NetworkConfig& config, Rng& rng);
PredictorParams init_predictor(const NetworkConfig& config, Rng& rng);
StudentParams init_student(const NetworkConfig& config, int prototypes, Rng& rng);
Matrix xavier_uniform(int fan_out, int fan_in, Rng& rng);

// ---------------------------------------------------------------------------
// Patch embedding

// Raw patch pixels, one row per patch in raster order, flattened (y, x, ch).
Matrix extract_patches(const Image& image, int patch_size, LatticeShape* lattice = nullptr);
// Role-tagged pixel rows; `vectors` hold raw pixels rather than embeddings.
TokenSet patch_pixels(const Image& image, int patch_size);
// Embeds with the learned linear map (no bias).
TokenSet patchify(const Image& image, const Matrix& patch_embed, int patch_size);
TokenSet drop_patches(const TokenSet& tokens, const PatchMask& mask);

// ---------------------------------------------------------------------------
// Axial rotary position embedding
//
// Convention: a head of width h is split into a row half [0, h/2) and a
// column half [h/2, h). Within each half, channels (2j, 2j+1) form a pair
// rotated by angle theta_j * pos, where
//   theta_j = pi * logspace(rope_freq_min, rope_freq_max, h/4)[j]
//   pos     = 2 * (index + 0.5) / extent - 1        (lattice-normalized)
// so positions live in (-1, 1) regardless of resolution.

std::vector<double> rope_frequencies(int head_dim, const NetworkConfig& config);
double rope_position(int index, int extent);

// Normalized (row, col) position; the origin is the lattice center.
struct RopePosition {
  double row = 0;
  double col = 0;
};

// Rotation at explicit normalized positions; tokens without one are untouched.
Matrix rope_rotate_positions(const Matrix& x, std::span<const std::optional<RopePosition>> positions,
                             int heads, const NetworkConfig& config, bool inverse = false);

// Rotates every head of every token with a coordinate; tokens without one
// pass through unchanged. `inverse` applies the transpose rotation.
Matrix rope_rotate(const Matrix& x, std::span<const std::optional<Coord>> coords,
                   LatticeShape lattice, int heads, const NetworkConfig& config,
                   bool inverse = false);

// ---------------------------------------------------------------------------
// Encoder

enum class Mode { train, eval };

// keep[block] = {attention branch kept, mlp branch kept}.
struct DropPattern {
  std::vector<std::array<bool, 2>> keep;
  double rate = 0.0;

  static DropPattern none(int depth) { return {std::vector<std::array<bool, 2>>(static_cast<std::size_t>(depth), {true, true}), 0.0}; }
  static DropPattern sample(int depth, double rate, Rng& rng);
};

struct EncoderTrace;  // intermediate activations for the backward pass

struct EncoderOutput {
  TokenSet tokens;  // patches (input order) then registers
  std::shared_ptr<const EncoderTrace> trace;
};

// Eval mode ignores `drop`. In train mode a null `drop` means no branch drop.
EncoderOutput encode(const TokenSet& patches, const EncoderParams& params,
                     const NetworkConfig& config, Mode mode,
                     const DropPattern* drop = nullptr);

// Accumulates parameter gradients into `grads` (registers included, patch
// embedding excluded) and returns d(loss)/d(input patch vectors).
Matrix encode_backward(const EncoderTrace& trace, const Matrix& d_output,
                       const EncoderParams& params, const NetworkConfig& config,
                       EncoderParams& grads);

// ---------------------------------------------------------------------------
// Cross-attention predictor

struct PredictorTrace;

struct PredictorOutput {
  Matrix predictions;  // one row per query, after the final norm
  std::shared_ptr<const PredictorTrace> trace;
};

// Counts cross-attention evaluations, for instrumentation.
struct AttentionCounter {
  int calls = 0;
};

// Each query starts as the learned mask embedding and is positioned only
// through RoPE. Queries never attend to each other. `max_blocks` limits the
// number of blocks evaluated (used by predictor pooling).
PredictorOutput predict(std::span<const Coord> queries, const TokenSet& context,
                        const PredictorParams& params, const NetworkConfig& config,
                        int max_blocks = -1, AttentionCounter* counter = nullptr);

// Returns d(loss)/d(context vectors).
Matrix predict_backward(const PredictorTrace& trace, const Matrix& d_predictions,
                        const PredictorParams& params, const NetworkConfig& config,
                        PredictorParams& grads);

// Output of the first cross-attention sublayer (mask embedding + attention),
// one row per query, without the MLP or any later block.
Matrix predictor_first_attention(std::span<const Coord> queries, const TokenSet& context,
                                 const PredictorParams& params, const NetworkConfig& config,
                                 AttentionCounter* counter = nullptr);

// ---------------------------------------------------------------------------
// Teacher

// teacher <- momentum * teacher + (1 - momentum) * student, element-wise.
void ema_update(EncoderParams& teacher, const EncoderParams& student, double momentum);

// Throws ShapeError when any tensor differs in name or shape.
void check_same_shapes(const EncoderParams& a, const EncoderParams& b);

}  // namespace capi
