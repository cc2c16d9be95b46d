#include <channelkit/surgery.hpp>

#include <channelkit/common.hpp>

#include <json.hpp>

#include <fstream>

namespace ck {

namespace {

using nlohmann::json;

void check_plan(const NetworkSpec& spec, const PruningPlan& plan) {
  if (static_cast<int>(plan.layers.size()) != spec.stages())
    throw DomainError("plan stage count does not match the network");
  for (int s = 0; s < spec.stages(); ++s) {
    const RetainSet& rs = plan.layers[static_cast<std::size_t>(s)];
    if (rs.layer != s) throw DomainError("plan layers are out of order");
    if (rs.original_width != spec.stage_channels[static_cast<std::size_t>(s)])
      throw DomainError("plan was built against different stage widths");
    if (rs.indices.empty()) throw DomainError("plan empties stage " + std::to_string(s));
    int prev = -1;
    for (int idx : rs.indices) {
      if (idx <= prev || idx < 0 || idx >= rs.original_width)
        throw DomainError("plan retain indices must be ascending and in range");
      prev = idx;
    }
  }
  if (plan.classifier_input_map != plan.layers.back().indices)
    throw DomainError("classifier input map does not match the last stage's retain set");
}

}  // namespace

PrunedModel apply_plan(const NetworkSpec& spec, const NetworkParams& params,
                       const PruningPlan& plan) {
  spec.validate();
  check_plan(spec, plan);

  PrunedModel out;
  out.plan = plan;
  out.spec = spec;
  for (int s = 0; s < spec.stages(); ++s)
    out.spec.stage_channels[static_cast<std::size_t>(s)] =
        plan.layers[static_cast<std::size_t>(s)].k();
  out.spec.validate();

  for (int s = 0; s < spec.stages(); ++s) {
    const std::vector<int>& keep_out = plan.layers[static_cast<std::size_t>(s)].indices;
    // Stage 0 reads the raw input, whose channels are never pruned.
    std::vector<int> keep_in;
    if (s == 0) {
      keep_in.resize(static_cast<std::size_t>(spec.in_channels));
      for (int c = 0; c < spec.in_channels; ++c) keep_in[static_cast<std::size_t>(c)] = c;
    } else {
      keep_in = plan.layers[static_cast<std::size_t>(s - 1)].indices;
    }

    const Eigen::MatrixXd& w = params.conv_weight[static_cast<std::size_t>(s)];
    Eigen::MatrixXd sliced(static_cast<long>(keep_out.size()),
                           static_cast<long>(keep_in.size()) * 9);
    for (std::size_t r = 0; r < keep_out.size(); ++r)
      for (std::size_t c = 0; c < keep_in.size(); ++c)
        sliced.block(static_cast<long>(r), static_cast<long>(c) * 9, 1, 9) =
            w.block(keep_out[r], static_cast<long>(keep_in[c]) * 9, 1, 9);
    out.params.conv_weight.push_back(std::move(sliced));

    Eigen::VectorXd bias(static_cast<long>(keep_out.size()));
    for (std::size_t r = 0; r < keep_out.size(); ++r)
      bias[static_cast<long>(r)] = params.conv_bias[static_cast<std::size_t>(s)][keep_out[r]];
    out.params.conv_bias.push_back(std::move(bias));
  }

  const std::vector<int>& fc_in = plan.classifier_input_map;
  out.params.fc_weight.resize(spec.num_classes, static_cast<long>(fc_in.size()));
  for (std::size_t c = 0; c < fc_in.size(); ++c)
    out.params.fc_weight.col(static_cast<long>(c)) = params.fc_weight.col(fc_in[c]);
  out.params.fc_bias = params.fc_bias;
  return out;
}

long long count_params(const NetworkSpec& spec) {
  spec.validate();
  long long total = 0;
  for (int s = 0; s < spec.stages(); ++s)
    total += static_cast<long long>(spec.stage_channels[s]) * spec.stage_in_channels(s) * 9 +
             spec.stage_channels[s];
  total += static_cast<long long>(spec.num_classes) * spec.stage_channels.back() + spec.num_classes;
  return total;
}

long long count_flops(const NetworkSpec& spec) {
  spec.validate();
  long long total = 0;
  for (int s = 0; s < spec.stages(); ++s) {
    const long long macs = static_cast<long long>(spec.stage_channels[s]) *
                           spec.stage_in_channels(s) * 9 * spec.stage_height(s) *
                           spec.stage_width(s);
    total += 2 * macs;
  }
  total += 2LL * spec.num_classes * spec.stage_channels.back();
  return total;
}

double CompressionReport::params_ratio() const {
  return params_before > 0 ? static_cast<double>(params_after) / static_cast<double>(params_before)
                           : 0.0;
}

double CompressionReport::flops_ratio() const {
  return flops_before > 0 ? static_cast<double>(flops_after) / static_cast<double>(flops_before)
                          : 0.0;
}

CompressionReport compression_report(const NetworkSpec& before, const NetworkSpec& after) {
  if (before.stages() != after.stages())
    throw DomainError("compression report needs matching stage counts");
  CompressionReport r;
  r.params_before = count_params(before);
  r.params_after = count_params(after);
  r.flops_before = count_flops(before);
  r.flops_after = count_flops(after);
  for (int s = 0; s < before.stages(); ++s)
    r.layers.push_back({s, before.stage_channels[s], after.stage_channels[s]});
  return r;
}

void write_report_json(const std::string& path, const CompressionReport& r) {
  json layers = json::array();
  for (const LayerWidthChange& l : r.layers)
    layers.push_back(json{{"layer", l.layer},
                          {"width_before", l.width_before},
                          {"width_after", l.width_after}});
  json j{{"params_before", r.params_before},
         {"params_after", r.params_after},
         {"params_ratio", r.params_ratio()},
         {"flops_before", r.flops_before},
         {"flops_after", r.flops_after},
         {"flops_ratio", r.flops_ratio()},
         {"accuracy_before", r.accuracy_before},
         {"accuracy_pruned", r.accuracy_pruned},
         {"accuracy_finetuned", r.accuracy_finetuned},
         {"layers", layers}};
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open compression report for writing: " + path);
  out << j.dump(2) << '\n';
  if (!out) throw IoError("short write on compression report: " + path);
}

void write_report_csv(const std::string& path, const CompressionReport& r) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open width CSV for writing: " + path);
  out << "layer,width_before,width_after\n";
  for (const LayerWidthChange& l : r.layers)
    out << l.layer << ',' << l.width_before << ',' << l.width_after << '\n';
  if (!out) throw IoError("short write on width CSV: " + path);
}

FinetuneResult finetune(const PrunedModel& model, const SynthDataset& data,
                        const TrainConfig& config) {
  FinetuneResult out;
  out.model = model;
  TrainResult tr = train_from(model.spec, model.params, data, config);
  out.model.params = std::move(tr.params);
  out.history = std::move(tr.history);
  return out;
}

}  // namespace ck
