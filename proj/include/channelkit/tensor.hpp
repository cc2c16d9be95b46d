#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace ck {

// Rows are channels, columns are flattened pixels (row-major over height,
// then width). Produced by flatten(); consumed by corr_matrix / chip_scores.
using ChannelMatrix = Eigen::MatrixXd;

// A batch of feature maps, stored flat in row-major (batch, channel, row,
// column) order. Eigen::Map views slice individual planes without copies.
struct FeatureBatch {
  int batch = 0;
  int channels = 0;
  int height = 0;
  int width = 0;
  Eigen::VectorXd data;

  FeatureBatch() = default;
  FeatureBatch(int b, int c, int h, int w);

  long plane_size() const { return static_cast<long>(height) * width; }
  long size() const { return data.size(); }

  double& at(int b, int c, int i, int j) {
    return data[((static_cast<long>(b) * channels + c) * height + i) * width + j];
  }
  double at(int b, int c, int i, int j) const {
    return data[((static_cast<long>(b) * channels + c) * height + i) * width + j];
  }

  Eigen::Map<Eigen::VectorXd> plane(int b, int c) {
    return {data.data() + (static_cast<long>(b) * channels + c) * plane_size(), plane_size()};
  }
  Eigen::Map<const Eigen::VectorXd> plane(int b, int c) const {
    return {data.data() + (static_cast<long>(b) * channels + c) * plane_size(), plane_size()};
  }
};

// One set of per-channel maps, e.g. a batch-averaged feature map. Flat
// row-major (channel, row, column) storage.
struct ChannelStack {
  int channels = 0;
  int height = 0;
  int width = 0;
  Eigen::VectorXd data;

  ChannelStack() = default;
  ChannelStack(int c, int h, int w);

  long plane_size() const { return static_cast<long>(height) * width; }

  Eigen::Map<Eigen::VectorXd> plane(int c) {
    return {data.data() + static_cast<long>(c) * plane_size(), plane_size()};
  }
  Eigen::Map<const Eigen::VectorXd> plane(int c) const {
    return {data.data() + static_cast<long>(c) * plane_size(), plane_size()};
  }
};

// Mean over the batch dimension, per channel and pixel.
ChannelStack batch_mean(const FeatureBatch& f);

// Channel matrix with one row per channel, pixels flattened row-major.
ChannelMatrix flatten(const ChannelStack& s);

// Binary tensor container. Layout, all little-endian, no padding:
//   magic "CKT1" | version u8 = 1 | dtype u8 = 1 (float64) | ndim u32 |
//   dims u32 * ndim | payload float64 * prod(dims), row-major.
void write_tensor(const std::string& path, const std::vector<std::uint32_t>& dims,
                  const Eigen::VectorXd& data);
std::pair<std::vector<std::uint32_t>, Eigen::VectorXd> read_tensor(const std::string& path);

}  // namespace ck
