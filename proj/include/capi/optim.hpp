#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "capi/tensor.hpp"

namespace capi {

// A tensor handed to the optimizer together with its per-group multipliers.
struct ParamSlot {
  std::string name;
  Matrix* value = nullptr;
  const Matrix* grad = nullptr;
  double lr_scale = 1.0;
  double wd_scale = 1.0;
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  bool operator==(const AdamWConfig&) const = default;
};

// Decoupled weight decay Adam:
//   p -= lr * lr_scale * (m_hat / (sqrt(v_hat) + eps) + wd * wd_scale * p)
class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(AdamWConfig config) : config_(config) {}

  // Slots must arrive in the same order and shapes on every call; state is
  // created lazily on the first step.
  void step(std::span<const ParamSlot> slots, double lr);

  const AdamWConfig& config() const { return config_; }
  std::int64_t steps() const { return steps_; }
  const std::vector<Matrix>& first_moments() const { return m_; }
  const std::vector<Matrix>& second_moments() const { return v_; }

  // Restores saved moments (used when loading checkpoints).
  void restore(std::int64_t steps, std::vector<Matrix> m, std::vector<Matrix> v);

 private:
  AdamWConfig config_{};
  std::int64_t steps_ = 0;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
};

}  // namespace capi
