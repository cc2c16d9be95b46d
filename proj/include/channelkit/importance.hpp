#pragma once

#include <channelkit/tensor.hpp>

#include <string>
#include <vector>

namespace ck {

struct ImportanceList {
  int layer = 0;
  Eigen::VectorXd scores;  // one nonnegative entry per channel, original order
  int channels() const { return static_cast<int>(scores.size()); }
};

// Channel k scores the drop in nuclear norm when its row is zeroed out of the
// channel matrix. Round-off can push the difference a hair below zero; those
// are clamped to exactly zero.
ImportanceList chip_scores(const ChannelMatrix& c, int layer = 0);

// Element-wise mean across score lists from separate batches.
ImportanceList average_scores(const std::vector<ImportanceList>& batches);

// L1 norm of each filter; one row of `filters` per output channel.
ImportanceList l1_weight_scores(const Eigen::MatrixXd& filters, int layer = 0);

// Gini coefficient of the score distribution: 0 when all scores are equal
// (or all zero), approaching 1 as mass concentrates on few channels.
double gini(const ImportanceList& list);

// Rows of "layer,channel,score" under a header, 17 significant digits.
void write_importance_csv(const std::string& path, const ImportanceList& list);
ImportanceList read_importance_csv(const std::string& path);

}  // namespace ck
