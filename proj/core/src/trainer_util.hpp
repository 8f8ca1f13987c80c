#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <random>
#include <string>
#include <vector>

namespace kd::internal {

/// Deterministic epoch-shuffled batch cursor.
class BatchSampler {
 public:
  BatchSampler(size_t dataset_size, int batch_size, uint64_t seed)
      : rng_(seed), batch_(static_cast<size_t>(batch_size)) {
    order_.resize(dataset_size);
    std::iota(order_.begin(), order_.end(), size_t{0});
    reshuffle();
  }

  std::vector<size_t> next() {
    std::vector<size_t> out;
    out.reserve(batch_);
    for (size_t i = 0; i < batch_; ++i) {
      if (cursor_ == order_.size()) reshuffle();
      out.push_back(order_[cursor_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    std::shuffle(order_.begin(), order_.end(), rng_);
    cursor_ = 0;
  }
  std::mt19937_64 rng_;
  std::vector<size_t> order_;
  size_t cursor_ = 0;
  size_t batch_;
};

inline std::string format_value(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

inline uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t x = a + 0x9e3779b97f4a7c15ULL + (b << 6) + (b >> 2);
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebULL;
  x ^= x >> 31;
  return x;
}

}  // namespace kd::internal
