#pragma once

#include <Eigen/Core>
#include <Eigen/Dense>

namespace in2core {

// Gradient payloads are stored as f32; every influence computation upcasts
// to f64 before any arithmetic.
using VecF = Eigen::VectorXf;
using VecD = Eigen::VectorXd;
using MatD = Eigen::MatrixXd;

}  // namespace in2core
