#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace vitprobe {

// Mixes a master seed with a tag and an index into an independent child seed.
std::uint64_t derive_seed(std::uint64_t master, std::string_view tag,
                          std::uint64_t index = 0);

/// Platform-stable random source. std::mt19937_64 has a fully specified
/// output sequence, but the standard distributions do not, so the
/// conversions to uniform/normal values are done here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  double uniform();                       // [0, 1)
  double uniform(double lo, double hi);   // [lo, hi)
  std::size_t uniform_index(std::size_t n);  // [0, n)
  double normal();                        // standard normal, Box-Muller
  double truncated_normal(double stddev, double bound_in_stddevs = 2.0);

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[uniform_index(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace vitprobe
