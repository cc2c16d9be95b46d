#include <channelkit/tensor.hpp>

#include <channelkit/common.hpp>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace ck {

namespace {

constexpr char kMagic[4] = {'C', 'K', 'T', '1'};
constexpr std::uint8_t kVersion = 1;
constexpr std::uint8_t kDtypeFloat64 = 1;
constexpr std::uint64_t kMaxElements = 1ull << 31;

void check_dims(int b, int c, int h, int w) {
  if (b < 1 || c < 1 || h < 1 || w < 1)
    throw DomainError("feature dims must all be >= 1, got (" + std::to_string(b) + ", " +
                      std::to_string(c) + ", " + std::to_string(h) + ", " + std::to_string(w) + ")");
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

double get_f64(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 7; i >= 0; --i) bits = (bits << 8) | p[i];
  return std::bit_cast<double>(bits);
}

}  // namespace

FeatureBatch::FeatureBatch(int b, int c, int h, int w) : batch(b), channels(c), height(h), width(w) {
  check_dims(b, c, h, w);
  data = Eigen::VectorXd::Zero(static_cast<long>(b) * c * h * w);
}

ChannelStack::ChannelStack(int c, int h, int w) : channels(c), height(h), width(w) {
  check_dims(1, c, h, w);
  data = Eigen::VectorXd::Zero(static_cast<long>(c) * h * w);
}

ChannelStack batch_mean(const FeatureBatch& f) {
  check_dims(f.batch, f.channels, f.height, f.width);
  ChannelStack out(f.channels, f.height, f.width);
  for (int b = 0; b < f.batch; ++b)
    for (int c = 0; c < f.channels; ++c) out.plane(c) += f.plane(b, c);
  out.data /= static_cast<double>(f.batch);
  return out;
}

ChannelMatrix flatten(const ChannelStack& s) {
  check_dims(1, s.channels, s.height, s.width);
  ChannelMatrix m(s.channels, s.plane_size());
  for (int c = 0; c < s.channels; ++c) m.row(c) = s.plane(c).transpose();
  return m;
}

void write_tensor(const std::string& path, const std::vector<std::uint32_t>& dims,
                  const Eigen::VectorXd& data) {
  if (dims.empty()) throw DomainError("tensor needs at least one dimension: " + path);
  std::uint64_t count = 1;
  for (std::uint32_t d : dims) {
    if (d == 0) throw DomainError("tensor dimensions must be nonzero: " + path);
    count *= d;
    if (count > kMaxElements) throw DomainError("tensor too large: " + path);
  }
  if (static_cast<std::uint64_t>(data.size()) != count)
    throw DomainError("tensor payload size does not match dims: " + path);
  for (long i = 0; i < data.size(); ++i)
    if (!std::isfinite(data[i])) throw DomainError("tensor holds a non-finite value: " + path);

  std::string buf;
  buf.reserve(10 + 4 * dims.size() + 8 * count);
  buf.append(kMagic, 4);
  buf.push_back(static_cast<char>(kVersion));
  buf.push_back(static_cast<char>(kDtypeFloat64));
  put_u32(buf, static_cast<std::uint32_t>(dims.size()));
  for (std::uint32_t d : dims) put_u32(buf, d);
  for (long i = 0; i < data.size(); ++i) put_f64(buf, data[i]);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open tensor file for writing: " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("short write on tensor file: " + path);
}

std::pair<std::vector<std::uint32_t>, Eigen::VectorXd> read_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open tensor file: " + path);
  std::string raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failure on tensor file: " + path);
  const auto* p = reinterpret_cast<const unsigned char*>(raw.data());
  const std::size_t len = raw.size();

  if (len < 10) throw IoError("tensor file truncated before header: " + path);
  if (std::memcmp(p, kMagic, 4) != 0) throw IoError("bad magic, not a tensor file: " + path);
  if (p[4] != kVersion)
    throw IoError("unsupported tensor format version " + std::to_string(p[4]) + ": " + path);
  if (p[5] != kDtypeFloat64)
    throw IoError("unsupported tensor dtype " + std::to_string(p[5]) + ": " + path);

  std::uint32_t ndim = get_u32(p + 6);
  if (ndim == 0 || ndim > 32) throw IoError("corrupt tensor rank: " + path);
  std::size_t off = 10;
  if (len < off + 4ull * ndim) throw IoError("tensor file truncated inside dims: " + path);
  std::vector<std::uint32_t> dims(ndim);
  std::uint64_t count = 1;
  for (std::uint32_t i = 0; i < ndim; ++i) {
    dims[i] = get_u32(p + off);
    off += 4;
    if (dims[i] == 0) throw IoError("corrupt tensor dims (zero extent): " + path);
    count *= dims[i];
    if (count > kMaxElements) throw IoError("corrupt tensor dims (too large): " + path);
  }

  const std::uint64_t payload = 8 * count;
  if (len < off + payload) throw IoError("tensor payload truncated: " + path);
  if (len > off + payload) throw IoError("tensor payload longer than dims imply: " + path);

  Eigen::VectorXd data(static_cast<long>(count));
  for (std::uint64_t i = 0; i < count; ++i) data[static_cast<long>(i)] = get_f64(p + off + 8 * i);
  return {std::move(dims), std::move(data)};
}

}  // namespace ck
