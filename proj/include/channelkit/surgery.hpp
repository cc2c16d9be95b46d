#pragma once

#include <channelkit/selection.hpp>
#include <channelkit/smallnet.hpp>

#include <string>
#include <vector>

namespace ck {

struct PrunedModel {
  NetworkSpec spec;
  NetworkParams params;
  PruningPlan plan;
};

// Rebuilds the network with only the retained channels: filter rows sliced
// by each stage's retain set, input slices of the following stage and of the
// classifier sliced to match. No weights are altered, only removed.
PrunedModel apply_plan(const NetworkSpec& spec, const NetworkParams& params,
                       const PruningPlan& plan);

// Trainable parameter count (kernels + biases, classifier included).
long long count_params(const NetworkSpec& spec);

// Multiply-add FLOPs (2 per MAC) of one forward pass at the spec's input
// size, convolutions and classifier only; ReLU and pooling are not counted.
long long count_flops(const NetworkSpec& spec);

struct LayerWidthChange {
  int layer = 0;
  int width_before = 0;
  int width_after = 0;
};

struct CompressionReport {
  long long params_before = 0;
  long long params_after = 0;
  long long flops_before = 0;
  long long flops_after = 0;
  double accuracy_before = 0.0;     // source model
  double accuracy_pruned = 0.0;     // straight after surgery
  double accuracy_finetuned = 0.0;  // after recovery training
  std::vector<LayerWidthChange> layers;
  double params_ratio() const;
  double flops_ratio() const;
};

CompressionReport compression_report(const NetworkSpec& before, const NetworkSpec& after);

void write_report_json(const std::string& path, const CompressionReport& r);
// CSV of "layer,width_before,width_after".
void write_report_csv(const std::string& path, const CompressionReport& r);

struct FinetuneResult {
  PrunedModel model;
  std::vector<EpochStats> history;
};

// Recovery training on the pruned network; callers normally pass a config
// with the correlation term switched off.
FinetuneResult finetune(const PrunedModel& model, const SynthDataset& data,
                        const TrainConfig& config);

}  // namespace ck
