#include "capi/objective.hpp"

#include <cmath>
#include <limits>

#include "capi/error.hpp"
#include "capi/network.hpp"

namespace capi {

void ClusterHead::validate() const {
  if (prototypes() < 2) throw SpecError("cluster head needs at least two prototypes");
  if (!(tau_student > 0 && tau_teacher > 0)) throw SpecError("temperatures must be positive");
  if (sk_iters < 1) throw SpecError("sk_iters must be positive");
}

ClusterHead init_cluster_head(int prototypes, int dim, Rng& rng) {
  ClusterHead head;
  head.centroids = xavier_uniform(prototypes, dim, rng);
  head.validate();
  return head;
}

Matrix l2_normalize_rows(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double norm = x.row(i).norm();
    if (!(norm > 0.0) || !std::isfinite(norm)) {
      throw NumericError("cannot L2-normalize row " + std::to_string(i) + " (norm " + std::to_string(norm) + ")");
    }
    out.row(i) = x.row(i) / norm;
  }
  return out;
}

Matrix compute_logits(const Matrix& features, const Matrix& centroids) {
  if (features.cols() != centroids.cols()) throw ShapeError("compute_logits: feature/centroid width mismatch");
  return l2_normalize_rows(features) * centroids.transpose();
}

Assignments soft_assign(const Matrix& logits, double tau) {
  if (!(tau > 0)) throw SpecError("temperature must be positive");
  Assignments a;
  a.probs = logits / tau;
  for (Eigen::Index i = 0; i < a.probs.rows(); ++i) {
    auto row = a.probs.row(i);
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    row /= row.sum();
  }
  return a;
}

namespace {

void check_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) throw NumericError(std::string(what) + ": non-finite logits");
}

// -(1/T) sum_i sum_k t_i(k) log softmax(l_i / tau)(k), with log-softmax taken
// exactly from the logits so the value stays smooth where probabilities
// underflow.
double cross_entropy_from_logits(const Matrix& targets, const Matrix& logits, double tau) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const auto z = (logits.row(i) / tau).array();
    const double mx = z.maxCoeff();
    const double lse = mx + std::log((z - mx).exp().sum());
    total -= (targets.row(i).array() * (z - lse)).sum();
  }
  return total / static_cast<double>(logits.rows());
}

}  // namespace

Assignments sinkhorn_standard(const Matrix& logits, double tau, int iters) {
  if (logits.rows() < 1) throw ShapeError("sinkhorn: at least one token is required");
  if (!(tau > 0)) throw SpecError("temperature must be positive");
  if (iters < 1) throw SpecError("sinkhorn: iters must be positive");
  check_finite(logits, "sinkhorn");
  const double p = static_cast<double>(logits.cols());
  // Sums are floored at the smallest normal double so an underflowed column
  // stays zero instead of turning into NaN.
  constexpr double tiny = std::numeric_limits<double>::min();

  Matrix m = ((logits.array() - logits.maxCoeff()) / tau).exp().matrix();
  for (int it = 0; it < iters; ++it) {
    const RowVector col = m.colwise().sum().cwiseMax(tiny);
    m.array().rowwise() /= col.array() * p;
    const Vector row = m.rowwise().sum().cwiseMax(tiny);
    m.array().colwise() /= row.array();
  }
  const Vector row = m.rowwise().sum().cwiseMax(tiny);
  m.array().colwise() /= row.array();
  return {std::move(m), {}};
}

Assignments sinkhorn_positionwise(const Matrix& logits, int batch, int positions, double tau,
                                  int iters) {
  if (batch < 1 || positions < 1) throw ShapeError("sinkhorn_positionwise: empty batch or lattice");
  if (logits.rows() != static_cast<Eigen::Index>(batch) * positions) {
    throw ShapeError("sinkhorn_positionwise: row count must equal batch * positions");
  }
  check_finite(logits, "sinkhorn_positionwise");
  Assignments out;
  out.probs.resize(logits.rows(), logits.cols());
  out.position.resize(static_cast<std::size_t>(logits.rows()));
  Matrix slice(batch, logits.cols());
  for (int j = 0; j < positions; ++j) {
    for (int b = 0; b < batch; ++b) slice.row(b) = logits.row(b * positions + j);
    const Assignments a = sinkhorn_standard(slice, tau, iters);
    for (int b = 0; b < batch; ++b) {
      out.probs.row(b * positions + j) = a.probs.row(b);
      out.position[static_cast<std::size_t>(b * positions + j)] = j;
    }
  }
  return out;
}

double clustering_loss(const Assignments& targets, const Assignments& soft) {
  if (targets.probs.rows() != soft.probs.rows() || targets.probs.cols() != soft.probs.cols()) {
    throw ShapeError("clustering_loss: assignment shapes differ");
  }
  if (targets.probs.rows() == 0) throw ShapeError("clustering_loss: no tokens");
  const auto logs = soft.probs.array().max(kProbabilityFloor).log();
  return -(targets.probs.array() * logs).sum() / static_cast<double>(targets.probs.rows());
}

ClusteringLossResult clustering_loss_and_grad(const Matrix& teacher_features,
                                              const ClusterHead& head, const Matrix& targets) {
  head.validate();
  const Matrix normalized = l2_normalize_rows(teacher_features);
  const Matrix logits = normalized * head.centroids.transpose();
  ClusteringLossResult r;
  if (targets.rows() != logits.rows() || targets.cols() != logits.cols()) {
    throw ShapeError("clustering_loss: assignment shapes differ");
  }
  r.soft = soft_assign(logits, head.tau_student);
  r.loss = cross_entropy_from_logits(targets, logits, head.tau_student);
  // d/dl of -sum a' log softmax(l / tau) is (a * sum(a') - a') / tau.
  const auto t = static_cast<double>(targets.rows());
  const Vector target_mass = targets.rowwise().sum();
  const Matrix d_logits =
      ((target_mass.asDiagonal() * r.soft.probs) - targets) / (head.tau_student * t);
  r.grad_centroids = d_logits.transpose() * normalized;
  return r;
}

MimLossResult mim_loss(const Matrix& predictions, const Matrix& targets, const Matrix& student_head,
                       double tau_student) {
  if (predictions.rows() < 1) throw ShapeError("mim_loss: at least one prediction is required");
  if (targets.rows() != predictions.rows() || targets.cols() != student_head.rows()) {
    throw ShapeError("mim_loss: target shape mismatch");
  }
  if (predictions.cols() != student_head.cols()) throw ShapeError("mim_loss: head width mismatch");
  if (!(tau_student > 0)) throw SpecError("temperature must be positive");
  const Matrix logits = predictions * student_head.transpose();
  const Assignments a = soft_assign(logits, tau_student);
  const auto m = static_cast<double>(predictions.rows());
  MimLossResult r;
  r.loss = cross_entropy_from_logits(targets, logits, tau_student);
  const Vector target_mass = targets.rowwise().sum();
  const Matrix d_logits = ((target_mass.asDiagonal() * a.probs) - targets) / (tau_student * m);
  r.grad_predictions = d_logits * student_head;
  r.grad_head = d_logits.transpose() * predictions;
  return r;
}

double mean_entropy(const Matrix& probs) {
  if (probs.rows() == 0) return 0.0;
  double h = 0.0;
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    const double v = probs.data()[i];
    if (v > 0) h -= v * std::log(v);
  }
  return h / static_cast<double>(probs.rows());
}

double mutual_information(const Matrix& joint) {
  const double total = joint.sum();
  if (!(total > 0)) return 0.0;
  const Matrix p = joint / total;
  const Vector pr = p.rowwise().sum();
  const RowVector pc = p.colwise().sum();
  double mi = 0.0;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    for (Eigen::Index k = 0; k < p.cols(); ++k) {
      const double v = p(i, k);
      if (v > 0) mi += v * std::log(v / (pr(i) * pc(k)));
    }
  }
  return std::max(0.0, mi);
}

Matrix soft_position_cluster_joint(const Matrix& probs, int batch, int positions) {
  if (probs.rows() != static_cast<Eigen::Index>(batch) * positions) throw ShapeError("joint: row count mismatch");
  Matrix joint = Matrix::Zero(positions, probs.cols());
  for (int b = 0; b < batch; ++b)
    for (int j = 0; j < positions; ++j) joint.row(j) += probs.row(b * positions + j);
  return joint;
}

Matrix hard_position_cluster_counts(const Matrix& probs, int batch, int positions) {
  if (probs.rows() != static_cast<Eigen::Index>(batch) * positions) throw ShapeError("counts: row count mismatch");
  Matrix counts = Matrix::Zero(positions, probs.cols());
  for (int b = 0; b < batch; ++b) {
    for (int j = 0; j < positions; ++j) {
      Eigen::Index k = 0;
      probs.row(b * positions + j).maxCoeff(&k);
      counts(j, k) += 1.0;
    }
  }
  return counts;
}

}  // namespace capi
