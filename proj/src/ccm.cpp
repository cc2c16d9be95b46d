#include <channelkit/ccm.hpp>

#include <channelkit/common.hpp>

#include <cmath>
#include <fstream>

namespace ck {

namespace {

struct CorrWork {
  Eigen::MatrixXd centered;      // rows centered to zero mean
  Eigen::VectorXd rownorm;       // ||centered row||, sentinel 1 for flat channels
  std::vector<char> degenerate;  // variance below kVarianceFloor
  Eigen::MatrixXd r;
};

CorrWork corr_work(const ChannelMatrix& c) {
  const long n = c.rows();
  const long p = c.cols();
  if (n < 1) throw DomainError("correlation needs at least one channel");
  if (p < 2) throw DomainError("correlation needs at least two pixels per channel, got " +
                               std::to_string(p));
  if (!c.allFinite()) throw DomainError("channel matrix holds non-finite values");

  CorrWork w;
  w.centered = c.colwise() - c.rowwise().mean();

  Eigen::MatrixXd s = Eigen::MatrixXd::Zero(n, n);
  s.selfadjointView<Eigen::Lower>().rankUpdate(w.centered);

  w.rownorm.resize(n);
  w.degenerate.assign(static_cast<std::size_t>(n), 0);
  for (long i = 0; i < n; ++i) {
    const double var = s(i, i) / static_cast<double>(p);
    if (var < kVarianceFloor) {
      w.degenerate[static_cast<std::size_t>(i)] = 1;
      w.rownorm[i] = 1.0;
    } else {
      w.rownorm[i] = std::sqrt(s(i, i));
    }
  }

  // Fill from the lower triangle only, mirroring, so symmetry is exact.
  w.r = Eigen::MatrixXd::Identity(n, n);
  for (long j = 0; j < n; ++j) {
    for (long i = j + 1; i < n; ++i) {
      double rij = 0.0;
      if (!w.degenerate[static_cast<std::size_t>(i)] && !w.degenerate[static_cast<std::size_t>(j)])
        rij = s(i, j) / (w.rownorm[i] * w.rownorm[j]);
      w.r(i, j) = w.r(j, i) = rij;
    }
  }
  return w;
}

}  // namespace

double LayerLossSet::sum() const {
  double total = 0.0;
  for (const LayerLoss& l : losses) total += l.value;
  return total;
}

CorrMatrix corr_matrix(const ChannelMatrix& c) { return CorrMatrix{corr_work(c).r}; }

double ccm_loss(const CorrMatrix& m) {
  const long n = m.r.rows();
  if (n < 1 || m.r.cols() != n) throw DomainError("correlation matrix must be square");
  return m.r.cwiseAbs().sum() / (static_cast<double>(n) * static_cast<double>(n));
}

double mean_offdiag_abs(const CorrMatrix& m) {
  const long n = m.r.rows();
  if (n < 1 || m.r.cols() != n) throw DomainError("correlation matrix must be square");
  if (n == 1) return 0.0;
  const double total = m.r.cwiseAbs().sum() - m.r.diagonal().cwiseAbs().sum();
  return total / (static_cast<double>(n) * static_cast<double>(n) - static_cast<double>(n));
}

CcmValueGrad ccm_loss_and_grad(const FeatureBatch& f) {
  const ChannelMatrix x = flatten(batch_mean(f));
  const CorrWork w = corr_work(x);
  const long n = x.rows();
  const long p = x.cols();

  CcmValueGrad out;
  out.loss = w.r.cwiseAbs().sum() / (static_cast<double>(n) * static_cast<double>(n));

  // d|r_ij|/d x_i = sign(r_ij) * (u_j - r_ij u_i) / s_i with u = centered/s.
  // Summed over j != i and both triangles of |r|:
  //   G_i = (2 / n^2 s_i) * sum_j sign(r_ij) (u_j - r_ij u_i)
  // Rows stay centered, so centering contributes nothing extra. Flat
  // channels have r_ij == 0 (hence sign 0) and get no gradient themselves.
  Eigen::MatrixXd u = w.centered;
  for (long i = 0; i < n; ++i) {
    if (w.degenerate[static_cast<std::size_t>(i)])
      u.row(i).setZero();
    else
      u.row(i) /= w.rownorm[i];
  }

  Eigen::MatrixXd t(n, n);
  for (long j = 0; j < n; ++j)
    for (long i = 0; i < n; ++i)
      t(i, j) = (i == j || w.r(i, j) == 0.0) ? 0.0 : (w.r(i, j) > 0.0 ? 1.0 : -1.0);

  const Eigen::VectorXd wsum = (t.array() * w.r.array()).rowwise().sum();
  Eigen::MatrixXd g = t * u - wsum.asDiagonal() * u;
  const double scale = 2.0 / (static_cast<double>(n) * static_cast<double>(n));
  for (long i = 0; i < n; ++i) {
    if (w.degenerate[static_cast<std::size_t>(i)])
      g.row(i).setZero();
    else
      g.row(i) *= scale / w.rownorm[i];
  }

  // Mean over the batch spreads the gradient evenly across samples.
  out.grad = FeatureBatch(f.batch, f.channels, f.height, f.width);
  const double inv_batch = 1.0 / static_cast<double>(f.batch);
  for (int b = 0; b < f.batch; ++b)
    for (int c = 0; c < f.channels; ++c) out.grad.plane(b, c) = g.row(c).transpose() * inv_batch;
  return out;
}

FeatureBatch ccm_loss_grad(const FeatureBatch& f) { return ccm_loss_and_grad(f).grad; }

double combine_objective(double ce, const LayerLossSet& losses, CcmMode mode) {
  if (losses.lambda < 0.0) throw ConfigError("lambda must be nonnegative");
  if (!std::isfinite(ce)) throw DomainError("cross-entropy term is not finite");
  const double term = losses.lambda * losses.sum();
  return mode == CcmMode::Minus ? ce - term : ce + term;
}

void write_corr_csv(const std::string& path, const CorrMatrix& m) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open correlation CSV for writing: " + path);
  for (long i = 0; i < m.r.rows(); ++i) {
    for (long j = 0; j < m.r.cols(); ++j) {
      if (j) out << ',';
      out << g17(m.r(i, j));
    }
    out << '\n';
  }
  if (!out) throw IoError("short write on correlation CSV: " + path);
}

}  // namespace ck
