#include <channelkit/selection.hpp>

#include <channelkit/common.hpp>

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace ck {

namespace {

using nlohmann::json;

void check_scores(const ImportanceList& scores) {
  if (scores.channels() < 1) throw DomainError("selection needs at least one score");
  for (long i = 0; i < scores.scores.size(); ++i) {
    const double v = scores.scores[i];
    if (!std::isfinite(v) || v < 0.0)
      throw DomainError("importance scores must be finite and nonnegative");
  }
}

// Channel order used by both selection rules: score descending, original
// index ascending on ties.
std::vector<int> descending_order(const ImportanceList& scores) {
  std::vector<int> order(static_cast<std::size_t>(scores.channels()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return scores.scores[a] > scores.scores[b]; });
  return order;
}

RetainSet take_first(const ImportanceList& scores, const std::vector<int>& order, int k) {
  RetainSet out;
  out.layer = scores.layer;
  out.original_width = scores.channels();
  out.indices.assign(order.begin(), order.begin() + k);
  std::sort(out.indices.begin(), out.indices.end());
  return out;
}

}  // namespace

Alpha::Alpha(double v) : value(v) {
  if (!(v > 0.0) || !(v < 1.0))
    throw DomainError("alpha must lie strictly between 0 and 1, got " + std::to_string(v));
}

RetainSet pcrr_select(const ImportanceList& scores, Alpha alpha) {
  check_scores(scores);
  const int n = scores.channels();
  // Sequential sum in original index order; keeps the threshold comparison
  // reproducible independent of SIMD width.
  double total = 0.0;
  for (long i = 0; i < scores.scores.size(); ++i) total += scores.scores[i];
  if (total == 0.0)
    throw DomainError("layer " + std::to_string(scores.layer) +
                      " has all-zero importance; no meaningful ranking exists");

  const std::vector<int> order = descending_order(scores);
  int k = n;
  double cum = 0.0;
  for (int i = 0; i < n; ++i) {
    cum += scores.scores[order[static_cast<std::size_t>(i)]];
    if (cum / total >= alpha.value) {
      k = i + 1;
      break;
    }
  }
  return take_first(scores, order, k);
}

RetainSet fixed_ratio_select(const ImportanceList& scores, double ratio) {
  check_scores(scores);
  if (!(ratio > 0.0) || ratio > 1.0)
    throw DomainError("retain ratio must lie in (0, 1], got " + std::to_string(ratio));
  const int n = scores.channels();
  // The epsilon keeps exact products like 0.3 * 10 from rounding up a slot.
  int k = static_cast<int>(std::ceil(ratio * n - 1e-9));
  k = std::max(1, std::min(n, k));
  return take_first(scores, descending_order(scores), k);
}

PruningPlan build_plan(const std::vector<RetainSet>& retain_sets, const NetworkSpec& spec) {
  spec.validate();
  if (static_cast<int>(retain_sets.size()) != spec.stages())
    throw DomainError("plan needs exactly one retain set per conv stage");

  PruningPlan plan;
  plan.layers.resize(retain_sets.size());
  std::vector<char> seen(retain_sets.size(), 0);
  for (const RetainSet& rs : retain_sets) {
    if (rs.layer < 0 || rs.layer >= spec.stages())
      throw DomainError("retain set names stage " + std::to_string(rs.layer) +
                        " which the network does not have");
    if (seen[static_cast<std::size_t>(rs.layer)])
      throw DomainError("stage " + std::to_string(rs.layer) + " appears twice in the plan");
    seen[static_cast<std::size_t>(rs.layer)] = 1;
    if (rs.original_width != spec.stage_channels[static_cast<std::size_t>(rs.layer)])
      throw DomainError("retain set for stage " + std::to_string(rs.layer) +
                        " was built against a different width");
    if (rs.indices.empty())
      throw DomainError("stage " + std::to_string(rs.layer) + " would lose every channel");
    int prev = -1;
    for (int idx : rs.indices) {
      if (idx <= prev || idx < 0 || idx >= rs.original_width)
        throw DomainError("retain indices for stage " + std::to_string(rs.layer) +
                          " must be ascending and in range");
      prev = idx;
    }
    plan.layers[static_cast<std::size_t>(rs.layer)] = rs;
  }
  plan.classifier_input_map = plan.layers.back().indices;
  return plan;
}

void write_plan_json(const std::string& path, const PruningPlan& plan) {
  json layers = json::array();
  for (const RetainSet& rs : plan.layers)
    layers.push_back(json{{"layer", rs.layer},
                          {"retain", rs.indices},
                          {"original_width", rs.original_width}});
  json j{{"alpha", plan.alpha},
         {"layers", layers},
         {"classifier_input_map", plan.classifier_input_map}};
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open plan for writing: " + path);
  out << j.dump(2) << '\n';
  if (!out) throw IoError("short write on plan: " + path);
}

PruningPlan read_plan_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open plan: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw IoError("corrupt plan JSON: " + path + ": " + e.what());
  }
  PruningPlan plan;
  try {
    plan.alpha = j.at("alpha").get<double>();
    for (const json& lj : j.at("layers")) {
      RetainSet rs;
      rs.layer = lj.at("layer").get<int>();
      rs.indices = lj.at("retain").get<std::vector<int>>();
      rs.original_width = lj.at("original_width").get<int>();
      plan.layers.push_back(std::move(rs));
    }
    plan.classifier_input_map = j.at("classifier_input_map").get<std::vector<int>>();
  } catch (const json::exception& e) {
    throw IoError("corrupt plan JSON: " + path + ": " + e.what());
  }
  return plan;
}

}  // namespace ck
