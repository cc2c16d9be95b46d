#pragma once

#include <Eigen/Dense>

namespace ck {

// Eigenvalues of a symmetric matrix by cyclic Jacobi sweeps. Iterates until
// the off-diagonal Frobenius norm drops below rel_tol * ||A||_F. Order of the
// returned values is unspecified.
Eigen::VectorXd symmetric_eigenvalues_jacobi(Eigen::MatrixXd a, double rel_tol = 1e-12);

// Sum of singular values. Formed from the Gram matrix of the smaller side so
// the Jacobi iteration runs on a min(rows, cols) square; eigenvalues pushed
// below zero by round-off are clamped to zero before the square root.
double nuclear_norm(const Eigen::MatrixXd& m);

}  // namespace ck
