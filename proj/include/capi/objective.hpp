#pragma once

#include <vector>

#include "capi/rng.hpp"
#include "capi/tensor.hpp"

namespace capi {

// Clamp applied to probabilities inside every log.
inline constexpr double kProbabilityFloor = 1e-12;

struct ClusterHead {
  Matrix centroids;          // prototypes x dim
  double tau_student = 0.12;  // softmax temperature for soft assignments and the MIM loss
  double tau_teacher = 0.06;  // Sinkhorn-Knopp temperature
  int sk_iters = 3;

  int prototypes() const { return static_cast<int>(centroids.rows()); }
  void validate() const;
};

ClusterHead init_cluster_head(int prototypes, int dim, Rng& rng);

// Row-stochastic assignment matrix. `position` is filled for position-wise
// balanced assignments (one entry per row).
struct Assignments {
  Matrix probs;
  std::vector<int> position;
};

// x_i / ||x_i||; zero-norm rows raise NumericError.
Matrix l2_normalize_rows(const Matrix& x);

// l_i = C * x_i / ||x_i||.
Matrix compute_logits(const Matrix& features, const Matrix& centroids);

// softmax(l_i / tau) with per-row max subtraction.
Assignments soft_assign(const Matrix& logits, double tau);

// Sinkhorn-Knopp over all rows (tokens) jointly:
//   M = exp((L - max L) / tau)
//   repeat iters: M /= column sums; M /= p; M /= row sums
//   final row normalization.
// Gradient-free by construction (plain values in, plain values out).
Assignments sinkhorn_standard(const Matrix& logits, double tau, int iters);

// Rows ordered image-major (row = b * positions + j). Sinkhorn-Knopp runs
// independently on each position's batch slice.
Assignments sinkhorn_positionwise(const Matrix& logits, int batch, int positions, double tau,
                                  int iters);

// -(1/T) sum_i sum_k a'_i(k) log a_i(k), with a clamped at kProbabilityFloor.
// The training losses below start from logits instead and use an exact
// log-softmax, which needs no clamp.
double clustering_loss(const Assignments& targets, const Assignments& soft);

struct ClusteringLossResult {
  double loss = 0.0;
  Matrix grad_centroids;
  Assignments soft;
};

// Soft assignments of the (constant) teacher features under the head's
// student temperature, the loss against constant targets, and its gradient
// with respect to the centroids only.
ClusteringLossResult clustering_loss_and_grad(const Matrix& teacher_features,
                                              const ClusterHead& head, const Matrix& targets);

struct MimLossResult {
  double loss = 0.0;
  Matrix grad_predictions;  // d loss / d predictor outputs
  Matrix grad_head;         // d loss / d student head
};

// Mean over predicted tokens of -sum_k a'(k) log softmax(head(pred) / tau)(k).
MimLossResult mim_loss(const Matrix& predictions, const Matrix& targets, const Matrix& student_head,
                       double tau_student);

// Mean per-row entropy in nats.
double mean_entropy(const Matrix& probs);

// Mutual information (nats) of a non-negative joint table, normalized internally.
double mutual_information(const Matrix& joint);

// Joint (position x cluster) table from soft assignments laid out image-major.
Matrix soft_position_cluster_joint(const Matrix& probs, int batch, int positions);

// Count table of argmax assignments (ties to the lowest cluster index).
Matrix hard_position_cluster_counts(const Matrix& probs, int batch, int positions);

}  // namespace capi
