#pragma once

#include <Eigen/Dense>

namespace capi {

// Row-major so that one row is one token, matching the (count x dim) layout
// used everywhere in the network and objective code.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

}  // namespace capi
