#pragma once

#include <channelkit/importance.hpp>
#include <channelkit/smallnet.hpp>

#include <string>
#include <vector>

namespace ck {

// Retention fraction in the open interval (0, 1); construction validates.
struct Alpha {
  explicit Alpha(double v);
  double value;
};

struct RetainSet {
  int layer = 0;
  int original_width = 0;
  std::vector<int> indices;  // kept channels, ascending original order
  int k() const { return static_cast<int>(indices.size()); }
};

// Keeps the smallest count of top-scoring channels whose share of the total
// importance reaches alpha. Ties sort toward the lower channel index; at
// least one channel always survives.
RetainSet pcrr_select(const ImportanceList& scores, Alpha alpha);

// Baseline: keep the top ceil(ratio * n) channels by score, ratio in (0, 1].
RetainSet fixed_ratio_select(const ImportanceList& scores, double ratio);

struct PruningPlan {
  double alpha = 0.0;
  std::vector<RetainSet> layers;          // one per conv stage, in order
  std::vector<int> classifier_input_map;  // surviving inputs of the classifier
};

// Assembles per-layer retain sets into a plan against a concrete network.
// Global average pooling maps last-stage channels 1:1 onto classifier
// inputs, so the classifier map is the last stage's retain set.
PruningPlan build_plan(const std::vector<RetainSet>& retain_sets, const NetworkSpec& spec);

void write_plan_json(const std::string& path, const PruningPlan& plan);
PruningPlan read_plan_json(const std::string& path);

}  // namespace ck
