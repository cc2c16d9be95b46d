#include <channelkit/jacobi.hpp>

#include <channelkit/common.hpp>

#include <cmath>

namespace ck {

namespace {

double offdiag_norm(const Eigen::MatrixXd& a) {
  double sum = 0.0;
  for (long q = 0; q < a.cols(); ++q)
    for (long p = 0; p < a.rows(); ++p)
      if (p != q) sum += a(p, q) * a(p, q);
  return std::sqrt(sum);
}

}  // namespace

Eigen::VectorXd symmetric_eigenvalues_jacobi(Eigen::MatrixXd a, double rel_tol) {
  const long n = a.rows();
  if (n != a.cols()) throw DomainError("jacobi needs a square matrix");
  if (n == 1) return a.diagonal();

  const double scale = a.norm();
  if (scale == 0.0) return Eigen::VectorXd::Zero(n);
  const double threshold = rel_tol * scale;

  // One extra sweep after the threshold is met: quadratic convergence takes
  // the off-diagonal mass to the rounding floor, which matters for the tiny
  // eigenvalues that nuclear_norm square-roots.
  constexpr int kMaxSweeps = 64;
  bool final_sweep = false;
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    if (offdiag_norm(a) <= threshold) {
      if (final_sweep) return a.diagonal();
      final_sweep = true;
    }
    for (long p = 0; p < n - 1; ++p) {
      for (long q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        double t;
        if (std::abs(theta) > 1e12) {
          t = 1.0 / (2.0 * theta);  // avoids theta^2 overflow; exact enough here
        } else {
          t = 1.0 / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
          if (theta < 0.0) t = -t;
        }
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        const double app = a(p, p);
        const double aqq = a(q, q);
        for (long i = 0; i < n; ++i) {
          if (i == p || i == q) continue;
          const double aip = a(i, p);
          const double aiq = a(i, q);
          a(i, p) = a(p, i) = c * aip - s * aiq;
          a(i, q) = a(q, i) = s * aip + c * aiq;
        }
        a(p, p) = app - t * apq;
        a(q, q) = aqq + t * apq;
        a(p, q) = a(q, p) = 0.0;
      }
    }
  }
  throw DomainError("jacobi eigenvalue iteration did not converge");
}

double nuclear_norm(const Eigen::MatrixXd& m) {
  if (m.rows() < 1 || m.cols() < 1) throw DomainError("nuclear norm of an empty matrix");
  if (!m.allFinite()) throw DomainError("nuclear norm of a matrix with non-finite entries");

  const long k = std::min(m.rows(), m.cols());
  Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(k, k);
  if (m.rows() <= m.cols())
    gram.selfadjointView<Eigen::Lower>().rankUpdate(m);
  else
    gram.selfadjointView<Eigen::Lower>().rankUpdate(m.transpose());
  gram.triangularView<Eigen::StrictlyUpper>() = gram.transpose();

  const Eigen::VectorXd eig = symmetric_eigenvalues_jacobi(gram);
  double sum = 0.0;
  for (long i = 0; i < eig.size(); ++i) sum += std::sqrt(std::max(eig[i], 0.0));
  return sum;
}

}  // namespace ck
