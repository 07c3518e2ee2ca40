#pragma once

#include <Eigen/Dense>

namespace cbir {

// One row per sample.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::RowVectorXd;

}  // namespace cbir
