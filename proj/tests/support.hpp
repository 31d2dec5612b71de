#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "capi/network.hpp"
#include "capi/objective.hpp"
#include "capi/rng.hpp"
#include "capi/tensor.hpp"
#include "capi/trainer.hpp"

namespace capi::test {

inline Matrix random_matrix(int rows, int cols, Rng& rng, double scale = 1.0) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

inline Image random_image(int size, Rng& rng) {
  Image img(size, size);
  for (float& v : img.pixels) v = static_cast<float>(rng.normal());
  return img;
}

// Tokens for every lattice cell in raster order.
inline TokenSet lattice_tokens(const Matrix& vectors, LatticeShape lattice) {
  TokenSet t;
  t.vectors = vectors;
  t.lattice = lattice;
  for (int i = 0; i < lattice.count(); ++i) t.coords.emplace_back(Coord{i / lattice.cols, i % lattice.cols});
  t.roles.assign(static_cast<std::size_t>(lattice.count()), TokenRole::patch);
  return t;
}

// dim 16, depth 2 encoder; one predictor block; 4x4 lattice of 4-pixel patches.
inline PretrainConfig tiny_pretrain_config() {
  PretrainConfig c;
  c.network.patch_size = 4;
  c.network.enc_depth = 2;
  c.network.enc_dim = 16;
  c.network.enc_heads = 2;
  c.network.pred_depth = 1;
  c.network.pred_dim = 16;
  c.network.pred_heads = 2;
  c.network.n_reg = 2;
  c.network.stochastic_depth = 0.3;
  c.objective.prototypes = 8;
  c.train.batch_size = 2;
  c.train.image_size = 16;
  c.train.mask = MaskSpec{MaskStrategy::inverse_block_roll, 0.5};
  c.train.n_pred = 3;
  c.schedule.total_steps = 20;
  c.seed = 7;
  return c;
}

// Logits as the pipeline produces them: L2-normalized random features against
// Xavier-initialized centroids. Prototypes p in [4, 64] and tokens in
// [p, 128], matching the regime batch >= prototypes of the recipe.
inline Matrix pipeline_logits(Rng& rng) {
  const int p = rng.uniform_int(4, 64);
  const int tokens = rng.uniform_int(p, 128);
  const int d = rng.uniform_int(8, 64);
  return compute_logits(random_matrix(tokens, d, rng), xavier_uniform(p, d, rng));
}

struct GradCheck {
  double max_rel_error = 0;
  std::string worst;
  std::size_t entries = 0;
};

// Central differences over every entry of `param`, compared with `analytic`
// by |a - f| / max(|a|, |f|, floor).
inline void grad_check(GradCheck& acc, const std::string& name, Matrix& param, const Matrix& analytic,
                       const std::function<double()>& loss, double h = 1e-5, double floor = 1e-6) {
  for (Eigen::Index i = 0; i < param.size(); ++i) {
    const double saved = param.data()[i];
    param.data()[i] = saved + h;
    const double up = loss();
    param.data()[i] = saved - h;
    const double down = loss();
    param.data()[i] = saved;
    const double f = (up - down) / (2 * h);
    const double a = analytic.data()[i];
    const double rel = std::abs(a - f) / std::max({std::abs(a), std::abs(f), floor});
    if (rel > acc.max_rel_error) {
      acc.max_rel_error = rel;
      acc.worst = name + "[" + std::to_string(i) + "] analytic=" + std::to_string(a) + " fd=" + std::to_string(f);
    }
    ++acc.entries;
  }
}

// Full MIM path: every student tensor (encoder, predictor, head) of the tiny
// config, against the batch MIM loss with targets held fixed.
inline GradCheck mim_gradient_check(std::uint64_t data_seed) {
  const PretrainConfig config = tiny_pretrain_config();
  TrainState state = init_train_state(config);
  Rng rng = Rng::derive(data_seed, "test", {});
  std::vector<Image> batch;
  for (int b = 0; b < config.train.batch_size; ++b) batch.push_back(random_image(config.train.image_size, rng));

  const BatchGradients g = compute_batch_gradients(state, batch, config);
  std::vector<const Matrix*> analytic;
  visit(g.mim.network, "", [&](const std::string&, const Matrix& m, ParamGroup) { analytic.push_back(&m); });
  GradCheck acc;
  std::size_t i = 0;
  const auto loss = [&] { return compute_batch_gradients(state, batch, config).mim_loss; };
  visit(state.student, "", [&](const std::string& name, Matrix& m, ParamGroup) {
    grad_check(acc, name, m, *analytic[i++], loss);
  });
  return acc;
}

}  // namespace capi::test
