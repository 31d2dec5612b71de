#include "capi/optim.hpp"

#include <cmath>

#include "capi/error.hpp"

namespace capi {

void AdamW::step(std::span<const ParamSlot> slots, double lr) {
  if (m_.empty() && steps_ == 0) {
    for (const auto& s : slots) {
      m_.push_back(Matrix::Zero(s.value->rows(), s.value->cols()));
      v_.push_back(Matrix::Zero(s.value->rows(), s.value->cols()));
    }
  }
  if (m_.size() != slots.size()) throw ShapeError("AdamW: parameter slot count changed");
  ++steps_;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const ParamSlot& s = slots[i];
    Matrix& p = *s.value;
    const Matrix& g = *s.grad;
    if (g.rows() != p.rows() || g.cols() != p.cols() || m_[i].rows() != p.rows() || m_[i].cols() != p.cols()) {
      throw ShapeError("AdamW: shape mismatch for '" + s.name + "'");
    }
    m_[i] = b1 * m_[i] + (1.0 - b1) * g;
    v_[i] = b2 * v_[i] + (1.0 - b2) * g.cwiseAbs2();
    const double step_lr = lr * s.lr_scale;
    const double decay = config_.weight_decay * s.wd_scale;
    p.array() -= step_lr * ((m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + config_.eps) +
                            decay * p.array());
  }
}

void AdamW::restore(std::int64_t steps, std::vector<Matrix> m, std::vector<Matrix> v) {
  if (m.size() != v.size()) throw ShapeError("AdamW::restore: moment counts differ");
  steps_ = steps;
  m_ = std::move(m);
  v_ = std::move(v);
}

}  // namespace capi
