#pragma once

// Forward/backward primitives shared by the encoder, predictor and probes.
// Linear maps are y = x * W^T with W stored (out x in), no bias.

#include <vector>

#include "capi/tensor.hpp"

namespace capi::detail {

struct RmsTrace {
  Matrix normalized;  // x / rms(x), before the gain
  Vector inv_rms;
};

Matrix rms_norm(const Matrix& x, const Matrix& gain, double eps, RmsTrace* trace);
// Accumulates into d_gain; returns dx.
Matrix rms_norm_backward(const Matrix& dy, const RmsTrace& trace, const Matrix& gain,
                         Matrix& d_gain);

// Exact (erf) GELU.
Matrix gelu(const Matrix& x);
Matrix gelu_backward(const Matrix& dy, const Matrix& x);

void softmax_rows_inplace(Matrix& m);

// Scaled dot-product attention over `heads` equal channel groups. q is
// (m x dim), k and v are (n x dim). Row-wise probabilities are stored per head.
Matrix multihead_attention(const Matrix& q, const Matrix& k, const Matrix& v, int heads,
                           std::vector<Matrix>* probs);
void multihead_attention_backward(const Matrix& d_out, const Matrix& q, const Matrix& k,
                                  const Matrix& v, const std::vector<Matrix>& probs, int heads,
                                  Matrix& dq, Matrix& dk, Matrix& dv);

}  // namespace capi::detail
