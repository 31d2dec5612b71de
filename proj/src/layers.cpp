#include "layers.hpp"

#include <cmath>
#include <numbers>

namespace capi::detail {

Matrix rms_norm(const Matrix& x, const Matrix& gain, double eps, RmsTrace* trace) {
  const auto dim = static_cast<double>(x.cols());
  Vector inv = (x.array().square().rowwise().sum() / dim + eps).rsqrt().matrix();
  Matrix normalized = inv.asDiagonal() * x;
  Matrix y = normalized.array().rowwise() * gain.row(0).array();
  if (trace != nullptr) {
    trace->normalized = std::move(normalized);
    trace->inv_rms = std::move(inv);
  }
  return y;
}

Matrix rms_norm_backward(const Matrix& dy, const RmsTrace& trace, const Matrix& gain,
                         Matrix& d_gain) {
  d_gain.row(0) += (dy.array() * trace.normalized.array()).colwise().sum().matrix();
  const Matrix d_norm = dy.array().rowwise() * gain.row(0).array();
  const auto dim = static_cast<double>(dy.cols());
  const Vector proj = (d_norm.array() * trace.normalized.array()).rowwise().sum() / dim;
  Matrix dx = d_norm - proj.asDiagonal() * trace.normalized;
  return trace.inv_rms.asDiagonal() * dx;
}

Matrix gelu(const Matrix& x) {
  return x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)); });
}

Matrix gelu_backward(const Matrix& dy, const Matrix& x) {
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  Matrix grad = x.unaryExpr([&](double v) {
    return 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
  });
  return dy.cwiseProduct(grad);
}

void softmax_rows_inplace(Matrix& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    auto row = m.row(i);
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    row /= row.sum();
  }
}

Matrix multihead_attention(const Matrix& q, const Matrix& k, const Matrix& v, int heads,
                           std::vector<Matrix>* probs) {
  const Eigen::Index hd = q.cols() / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  Matrix out(q.rows(), v.cols());
  if (probs != nullptr) probs->resize(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Matrix p = scale * (q.middleCols(h * hd, hd) * k.middleCols(h * hd, hd).transpose());
    softmax_rows_inplace(p);
    out.middleCols(h * hd, hd).noalias() = p * v.middleCols(h * hd, hd);
    if (probs != nullptr) (*probs)[static_cast<std::size_t>(h)] = std::move(p);
  }
  return out;
}

void multihead_attention_backward(const Matrix& d_out, const Matrix& q, const Matrix& k,
                                  const Matrix& v, const std::vector<Matrix>& probs, int heads,
                                  Matrix& dq, Matrix& dk, Matrix& dv) {
  const Eigen::Index hd = q.cols() / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  dq = Matrix::Zero(q.rows(), q.cols());
  dk = Matrix::Zero(k.rows(), k.cols());
  dv = Matrix::Zero(v.rows(), v.cols());
  for (int h = 0; h < heads; ++h) {
    const Matrix& p = probs[static_cast<std::size_t>(h)];
    const auto d_head = d_out.middleCols(h * hd, hd);
    dv.middleCols(h * hd, hd).noalias() = p.transpose() * d_head;
    const Matrix dp = d_head * v.middleCols(h * hd, hd).transpose();
    const Vector inner = (dp.array() * p.array()).rowwise().sum();
    const Matrix ds = scale * (p.array() * (dp.colwise() - inner).array()).matrix();
    dq.middleCols(h * hd, hd).noalias() = ds * k.middleCols(h * hd, hd);
    dk.middleCols(h * hd, hd).noalias() = ds.transpose() * q.middleCols(h * hd, hd);
  }
}

}  // namespace capi::detail
