#include <channelkit/importance.hpp>

#include <channelkit/common.hpp>
#include <channelkit/jacobi.hpp>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace ck {

ImportanceList chip_scores(const ChannelMatrix& c, int layer) {
  if (c.rows() < 1 || c.cols() < 1) throw DomainError("chip scores need a nonempty channel matrix");
  const double full = nuclear_norm(c);
  ImportanceList out;
  out.layer = layer;
  out.scores.resize(c.rows());
  Eigen::MatrixXd masked = c;
  for (long k = 0; k < c.rows(); ++k) {
    masked.row(k).setZero();
    out.scores[k] = std::max(0.0, full - nuclear_norm(masked));
    masked.row(k) = c.row(k);
  }
  return out;
}

ImportanceList average_scores(const std::vector<ImportanceList>& batches) {
  if (batches.empty()) throw DomainError("cannot average an empty score set");
  ImportanceList out;
  out.layer = batches.front().layer;
  out.scores = Eigen::VectorXd::Zero(batches.front().scores.size());
  for (const ImportanceList& b : batches) {
    if (b.layer != out.layer || b.scores.size() != out.scores.size())
      throw DomainError("importance lists disagree on layer or width while averaging");
    out.scores += b.scores;
  }
  out.scores /= static_cast<double>(batches.size());
  return out;
}

ImportanceList l1_weight_scores(const Eigen::MatrixXd& filters, int layer) {
  if (filters.rows() < 1 || filters.cols() < 1)
    throw DomainError("weight scores need a nonempty filter matrix");
  if (!filters.allFinite()) throw DomainError("filter matrix holds non-finite values");
  ImportanceList out;
  out.layer = layer;
  out.scores = filters.cwiseAbs().rowwise().sum();
  return out;
}

double gini(const ImportanceList& list) {
  const long n = list.scores.size();
  if (n < 1) throw DomainError("gini of an empty score list");
  std::vector<double> x(list.scores.data(), list.scores.data() + n);
  double total = 0.0;
  for (double v : x) {
    if (v < 0.0) throw DomainError("gini expects nonnegative scores");
    total += v;
  }
  if (total == 0.0) return 0.0;
  std::sort(x.begin(), x.end());
  double weighted = 0.0;
  for (long i = 0; i < n; ++i) weighted += static_cast<double>(i + 1) * x[static_cast<std::size_t>(i)];
  const double g =
      2.0 * weighted / (static_cast<double>(n) * total) - (static_cast<double>(n) + 1.0) / static_cast<double>(n);
  // Uniform inputs leave ~1e-16 of rounding debris; collapse it so equal
  // scores report exactly zero.
  return g < 1e-12 ? 0.0 : g;
}

void write_importance_csv(const std::string& path, const ImportanceList& list) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open importance CSV for writing: " + path);
  out << "layer,channel,score\n";
  for (long k = 0; k < list.scores.size(); ++k)
    out << list.layer << ',' << k << ',' << g17(list.scores[k]) << '\n';
  if (!out) throw IoError("short write on importance CSV: " + path);
}

ImportanceList read_importance_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open importance CSV: " + path);
  std::string line;
  if (!std::getline(in, line)) throw IoError("empty importance CSV: " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "layer,channel,score") throw IoError("unexpected importance CSV header: " + path);

  ImportanceList out;
  std::vector<double> scores;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string layer_s, channel_s, score_s;
    if (!std::getline(row, layer_s, ',') || !std::getline(row, channel_s, ',') ||
        !std::getline(row, score_s))
      throw IoError("corrupt importance CSV row: " + path);
    char* end = nullptr;
    const long layer = std::strtol(layer_s.c_str(), &end, 10);
    if (end == layer_s.c_str() || *end) throw IoError("corrupt layer id in importance CSV: " + path);
    const long channel = std::strtol(channel_s.c_str(), &end, 10);
    if (end == channel_s.c_str() || *end)
      throw IoError("corrupt channel id in importance CSV: " + path);
    const double score = std::strtod(score_s.c_str(), &end);
    if (end == score_s.c_str() || *end) throw IoError("corrupt score in importance CSV: " + path);
    if (first) {
      out.layer = static_cast<int>(layer);
      first = false;
    } else if (layer != out.layer) {
      throw IoError("importance CSV mixes layers: " + path);
    }
    if (channel != static_cast<long>(scores.size()))
      throw IoError("importance CSV channels out of order: " + path);
    scores.push_back(score);
  }
  if (scores.empty()) throw IoError("importance CSV has no rows: " + path);
  out.scores = Eigen::Map<Eigen::VectorXd>(scores.data(), static_cast<long>(scores.size()));
  return out;
}

}  // namespace ck
