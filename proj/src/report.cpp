#include <channelkit/pipeline.hpp>

#include <channelkit/common.hpp>

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

namespace ck {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

}  // namespace

std::vector<ChannelStack> mean_feature_stacks(const NetworkSpec& spec, const NetworkParams& params,
                                              const SynthDataset& data) {
  if (data.samples < 1) throw DomainError("dataset is empty");
  constexpr int kChunk = 256;
  std::vector<ChannelStack> sums;
  for (int s = 0; s < spec.stages(); ++s)
    sums.emplace_back(spec.stage_channels[s], spec.stage_height(s), spec.stage_width(s));

  for (int at = 0; at < data.samples; at += kChunk) {
    const int end = std::min(data.samples, at + kChunk);
    const ForwardTrace trace = forward(spec, params, data.range_batch(at, end));
    for (int s = 0; s < spec.stages(); ++s) {
      const FeatureBatch& feat = trace.features[static_cast<std::size_t>(s)];
      for (int b = 0; b < feat.batch; ++b)
        for (int c = 0; c < feat.channels; ++c)
          sums[static_cast<std::size_t>(s)].plane(c) += feat.plane(b, c);
    }
  }
  for (ChannelStack& s : sums) s.data /= static_cast<double>(data.samples);
  return sums;
}

void cmd_report(const PipelineConfig& cfg) {
  cfg.validate();
  const Checkpoint ckpt = load_checkpoint(checkpoint_dir(cfg));
  const DatasetPair data = load_or_create_datasets(cfg);
  const std::string dir = report_dir(cfg);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create report directory: " + dir);

  // Correlation structure of the trained features, one CSV per stage.
  const std::vector<ChannelStack> means = mean_feature_stacks(ckpt.spec, ckpt.params, data.train);
  json stage_summary = json::array();
  for (int s = 0; s < ckpt.spec.stages(); ++s) {
    const CorrMatrix corr = corr_matrix(flatten(means[static_cast<std::size_t>(s)]));
    write_corr_csv(dir + "/corr_stage_" + std::to_string(s) + ".csv", corr);
    stage_summary.push_back(json{{"layer", s},
                                 {"width", ckpt.spec.stage_channels[s]},
                                 {"mean_offdiag_abs_corr", mean_offdiag_abs(corr)},
                                 {"ccm_loss", ccm_loss(corr)}});
  }

  // Importance: reuse the scoring artifacts when present, otherwise compute
  // them here so a report never depends on command order.
  std::vector<ImportanceList> lists;
  bool have_scores = true;
  for (int s = 0; s < ckpt.spec.stages(); ++s)
    have_scores = have_scores && fs::exists(importance_path(cfg, s));
  if (have_scores) {
    for (int s = 0; s < ckpt.spec.stages(); ++s)
      lists.push_back(read_importance_csv(importance_path(cfg, s)));
  } else {
    lists = score_checkpoint(cfg, ckpt, data.train);
  }
  for (std::size_t s = 0; s < lists.size(); ++s) {
    write_importance_csv(dir + "/importance_stage_" + std::to_string(lists[s].layer) + ".csv",
                         lists[s]);
    stage_summary[s]["gini"] = gini(lists[s]);
  }

  // Channel-count comparison: the share-based rule against a fixed-ratio
  // baseline matched to the same overall budget.
  json alpha_summary = json::object();
  for (double alpha : cfg.alphas) {
    std::vector<RetainSet> pcrr;
    int total_width = 0, total_kept = 0;
    for (const ImportanceList& list : lists) {
      pcrr.push_back(pcrr_select(list, Alpha(alpha)));
      total_width += pcrr.back().original_width;
      total_kept += pcrr.back().k();
    }
    const double matched = static_cast<double>(total_kept) / static_cast<double>(total_width);

    const std::string csv_path = dir + "/retained_counts_alpha_" + alpha_tag(alpha) + ".csv";
    std::ofstream csv(csv_path, std::ios::trunc);
    if (!csv) throw IoError("cannot write retained-count CSV: " + csv_path);
    csv << "layer,original_width,retained_pcrr,pruned_pcrr,retained_fixed,pruned_fixed\n";
    json per_layer = json::array();
    for (std::size_t s = 0; s < lists.size(); ++s) {
      const RetainSet fixed = fixed_ratio_select(lists[s], matched);
      const int n = pcrr[s].original_width;
      csv << lists[s].layer << ',' << n << ',' << pcrr[s].k() << ',' << n - pcrr[s].k() << ','
          << fixed.k() << ',' << n - fixed.k() << '\n';
      per_layer.push_back(json{{"layer", lists[s].layer},
                               {"retained_pcrr", pcrr[s].k()},
                               {"retained_fixed", fixed.k()}});
    }
    if (!csv) throw IoError("short write on retained-count CSV: " + csv_path);
    alpha_summary[alpha_tag(alpha)] =
        json{{"matched_ratio", matched}, {"total_retained", total_kept}, {"layers", per_layer}};
  }

  json summary{{"params", count_params(ckpt.spec)},
               {"flops", count_flops(ckpt.spec)},
               {"final_accuracy", ckpt.history.empty() ? 0.0 : ckpt.history.back().accuracy},
               {"stages", stage_summary},
               {"alphas", alpha_summary}};
  const std::string summary_path = dir + "/summary.json";
  std::ofstream out(summary_path, std::ios::trunc);
  if (!out) throw IoError("cannot write report summary: " + summary_path);
  out << summary.dump(2) << '\n';
  if (!out) throw IoError("short write on report summary: " + summary_path);
  std::cout << "report written to " << dir << "\n";
}

}  // namespace ck
