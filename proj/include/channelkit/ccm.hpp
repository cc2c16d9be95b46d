#pragma once

#include <channelkit/tensor.hpp>

#include <string>
#include <vector>

namespace ck {

// Sign of the correlation term in the objective: Minus rewards correlation
// (pushes channels toward redundancy), Plus penalizes it.
enum class CcmMode { Minus, Plus };

// Pearson correlation between channel rows: symmetric, unit diagonal,
// entries in [-1, 1].
struct CorrMatrix {
  Eigen::MatrixXd r;
  int n() const { return static_cast<int>(r.rows()); }
};

struct LayerLoss {
  int layer = 0;
  double value = 0.0;
};

struct LayerLossSet {
  std::vector<LayerLoss> losses;
  double lambda = 0.0;
  double sum() const;
};

// Channels whose pixel variance falls below this are treated as flat: they
// correlate 0 with every other channel and pass no gradient.
inline constexpr double kVarianceFloor = 1e-12;

CorrMatrix corr_matrix(const ChannelMatrix& c);

// Mean absolute correlation over all n^2 entries, in [1/n, 1].
double ccm_loss(const CorrMatrix& m);

// Mean |r| over off-diagonal entries only; diagnostic, not part of the loss.
double mean_offdiag_abs(const CorrMatrix& m);

struct CcmValueGrad {
  double loss = 0.0;
  FeatureBatch grad;
};

// Loss and gradient of ccm_loss(corr_matrix(flatten(batch_mean(f)))) with
// respect to every element of f. The batch-mean and the |.| kinks make this
// (1/batch) * d loss / d mean-map, replicated across the batch.
CcmValueGrad ccm_loss_and_grad(const FeatureBatch& f);
FeatureBatch ccm_loss_grad(const FeatureBatch& f);

// ce - lambda * sum(losses) for Minus, ce + lambda * sum(losses) for Plus.
double combine_objective(double ce, const LayerLossSet& losses, CcmMode mode);

// n x n CSV of signed correlations, 17 significant digits, no header.
void write_corr_csv(const std::string& path, const CorrMatrix& m);

}  // namespace ck
