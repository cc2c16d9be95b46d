#pragma once

#include <cstdint>
#include <vector>

namespace ck {

// SplitMix64. Chosen over std::mt19937 because the output sequence is fixed
// by the algorithm, not by a library implementation, so seeded runs replay
// bit-for-bit anywhere.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Modulo bias is irrelevant at our range sizes
  // but determinism of the mapping is what matters here.
  int below(int n) { return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n)); }

  // Fisher-Yates, iterating from the back.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
      int j = below(i + 1);
      std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(j)]);
    }
  }

 private:
  std::uint64_t state_;
};

}  // namespace ck
