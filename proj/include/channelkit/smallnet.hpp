#pragma once

#include <channelkit/ccm.hpp>
#include <channelkit/rng.hpp>
#include <channelkit/tensor.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace ck {

enum class TrainMode { Off, Minus, Plus };

std::string to_string(TrainMode mode);
TrainMode train_mode_from_string(const std::string& s);

// Stack of 3x3 stride-1 pad-1 conv + ReLU stages with a 2x2 mean pool
// between consecutive stages, global average pooling after the last stage,
// and a linear classifier on the pooled channel vector.
struct NetworkSpec {
  int in_channels = 1;
  int in_height = 16;
  int in_width = 16;
  std::vector<int> stage_channels{8, 12, 16};
  int num_classes = 4;
  std::vector<int> ccm_target_layers{0, 1, 2};  // stages whose correlations enter the loss

  int stages() const { return static_cast<int>(stage_channels.size()); }
  int stage_in_channels(int s) const { return s == 0 ? in_channels : stage_channels[s - 1]; }
  // Spatial size going into (and out of) stage s; the pools before it have
  // halved the input s times.
  int stage_height(int s) const { return in_height >> s; }
  int stage_width(int s) const { return in_width >> s; }
  void validate() const;
};

struct NetworkParams {
  // Stage s kernels as (out_channels, in_channels * 9); row k is filter k
  // flattened row-major over (input channel, kernel row, kernel column).
  std::vector<Eigen::MatrixXd> conv_weight;
  std::vector<Eigen::VectorXd> conv_bias;
  Eigen::MatrixXd fc_weight;  // (num_classes, last stage width)
  Eigen::VectorXd fc_bias;
};

// He-uniform kernels, zero biases. Draw order is fixed: stages in order,
// each weight matrix row-major, then the classifier row-major.
NetworkParams init_params(const NetworkSpec& spec, Rng& rng);

struct Gradients {
  std::vector<Eigen::MatrixXd> conv_weight;
  std::vector<Eigen::VectorXd> conv_bias;
  Eigen::MatrixXd fc_weight;
  Eigen::VectorXd fc_bias;
};

Gradients zero_gradients(const NetworkSpec& spec);

struct ForwardTrace {
  std::vector<Eigen::MatrixXd> cols;      // im2col buffers, one per stage
  std::vector<FeatureBatch> preact;       // conv output + bias
  std::vector<FeatureBatch> features;     // after ReLU
  Eigen::MatrixXd pooled;                 // global average pool, (batch, width)
  Eigen::MatrixXd logits;                 // (batch, num_classes)
};

ForwardTrace forward(const NetworkSpec& spec, const NetworkParams& params, const FeatureBatch& x);
Eigen::MatrixXd forward_logits(const NetworkSpec& spec, const NetworkParams& params,
                               const FeatureBatch& x);

// Mean cross-entropy of softmaxed logits against integer labels.
double cross_entropy(const Eigen::MatrixXd& logits, const std::vector<int>& labels);

struct ObjectiveBreakdown {
  double objective = 0.0;
  double ce = 0.0;
  std::vector<double> ccm_per_layer;  // one entry per ccm target stage
  double ccm_sum() const;
};

// Full backward pass. The correlation term's gradient enters at each target
// stage's post-activation maps with weight -lambda (Minus) or +lambda
// (Plus); mode Off skips the term entirely but the breakdown still reports
// the per-stage correlation losses for the history log.
ObjectiveBreakdown backward(const NetworkSpec& spec, const NetworkParams& params,
                            const ForwardTrace& trace, const std::vector<int>& labels,
                            double lambda, TrainMode mode, Gradients& grads);

// Objective value alone, via the same forward pieces; used by gradient checks.
double objective_value(const NetworkSpec& spec, const NetworkParams& params, const FeatureBatch& x,
                       const std::vector<int>& labels, double lambda, TrainMode mode);

struct TrainConfig {
  int epochs = 40;
  int batch_size = 64;
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.005;
  double lambda = 0.01;
  TrainMode mode = TrainMode::Minus;
  std::uint64_t seed = 1;
  void validate() const;
};

struct EpochStats {
  int epoch = 0;
  double objective = 0.0;
  double ce = 0.0;
  std::vector<double> ccm_per_layer;
  double accuracy = 0.0;
  double lr = 0.0;
  double ccm_sum() const;
};

// Procedural dataset: 16x16 grayscale shapes in [0, 1], four classes
// (horizontal bar, vertical bar, diagonal stripe, round blob), labels
// interleaved 0,1,2,3,... plus uniform pixel noise.
struct SynthDataset {
  int samples = 0;
  int channels = 1;
  int height = 16;
  int width = 16;
  std::uint64_t seed = 0;
  Eigen::VectorXd images;  // row-major (sample, channel, row, column)
  std::vector<int> labels;

  FeatureBatch gather(const int* idx, int count) const;
  FeatureBatch range_batch(int begin, int end) const;
};

SynthDataset synth_dataset(std::uint64_t seed, int n_samples);

// Half-open cosine schedule: full learning rate at epoch 0, decaying to the
// final epoch; never reaches zero while training.
double cosine_lr(double base, int epoch, int total_epochs);

struct TrainResult {
  NetworkParams params;
  std::vector<EpochStats> history;
};

// SGD with momentum and decoupled-from-nothing weight decay folded into the
// gradient (g + wd * w), velocity v = mu * v + g, step w -= lr * v.
TrainResult train(const NetworkSpec& spec, const SynthDataset& data, const TrainConfig& config);
TrainResult train_from(const NetworkSpec& spec, NetworkParams start, const SynthDataset& data,
                       const TrainConfig& config);

// Fraction of samples whose argmax logit (lowest index on ties) matches.
double evaluate(const NetworkSpec& spec, const NetworkParams& params, const SynthDataset& data);

// Checkpoint: one tensor file per parameter next to a JSON manifest carrying
// the spec, train config, epoch count and metric history.
struct Checkpoint {
  NetworkSpec spec;
  TrainConfig config;
  int epoch = 0;
  std::vector<EpochStats> history;
  NetworkParams params;
  std::string provenance;  // free-form note, e.g. pruning lineage
};

void save_checkpoint(const std::string& dir, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& dir);

// History CSV: "epoch,objective,ce,ccm_sum,accuracy,lr", 17 significant digits.
void write_history_csv(const std::string& path, const std::vector<EpochStats>& history);

}  // namespace ck
