#pragma once

#include <channelkit/surgery.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace ck {

// One JSON config drives every command. Unset fields keep desk-scale
// defaults; the top-level seed derives the train seed (as-is), the finetune
// seed (+1) and the dataset draw.
struct PipelineConfig {
  std::string workdir = "runs/default";
  std::string dataset_cache;  // defaults to <workdir>/dataset
  std::uint64_t seed = 1;
  int train_samples = 2000;
  int test_samples = 1000;
  int scoring_batches = 5;
  std::vector<double> alphas{0.7};
  bool reports = true;
  NetworkSpec network;
  TrainConfig train;
  TrainConfig finetune;

  void validate() const;
  std::string cache_dir() const { return dataset_cache.empty() ? workdir + "/dataset" : dataset_cache; }
};

PipelineConfig load_pipeline_config(const std::string& path);
void write_effective_config(const PipelineConfig& cfg);

// Workdir layout, shared by commands and tests.
std::string alpha_tag(double alpha);
std::string checkpoint_dir(const PipelineConfig& cfg);
std::string history_path(const PipelineConfig& cfg);
std::string importance_dir(const PipelineConfig& cfg);
std::string importance_path(const PipelineConfig& cfg, int layer);
std::string gini_path(const PipelineConfig& cfg);
std::string plan_path(const PipelineConfig& cfg, double alpha);
std::string pruned_dir(const PipelineConfig& cfg, double alpha);
std::string report_dir(const PipelineConfig& cfg);

struct DatasetPair {
  SynthDataset train;
  SynthDataset test;
};

// Reads the dataset cache when its parameters match the config, otherwise
// draws the data fresh and rewrites the cache.
DatasetPair load_or_create_datasets(const PipelineConfig& cfg);

// Averaged chip scores for every conv stage, over the leading scoring
// batches of the dataset in canonical order.
std::vector<ImportanceList> score_checkpoint(const PipelineConfig& cfg, const Checkpoint& ckpt,
                                             const SynthDataset& data);

// Dataset-mean post-activation maps per stage.
std::vector<ChannelStack> mean_feature_stacks(const NetworkSpec& spec, const NetworkParams& params,
                                              const SynthDataset& data);

// Commands. Each one recomputes its outputs when invoked directly;
// cmd_pipeline instead skips any stage whose artifacts are already on disk,
// so an interrupted run picks up where it stopped.
void cmd_train(const PipelineConfig& cfg);
void cmd_score(const PipelineConfig& cfg);
void cmd_select(const PipelineConfig& cfg, double alpha);
void cmd_prune(const PipelineConfig& cfg, double alpha);
void cmd_report(const PipelineConfig& cfg);
void cmd_pipeline(const PipelineConfig& cfg);

}  // namespace ck
