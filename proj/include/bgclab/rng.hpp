#pragma once

#include <cstdint>
#include <random>

namespace bgclab {

// Derives independent named substreams from one master seed so that adding a
// consumer (e.g. the observation-noise draw) never perturbs the draws of an
// existing one (e.g. the prior sampler).
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  static Rng substream(std::uint64_t master, std::uint64_t stream_id) {
    return Rng(splitmix64(splitmix64(master) ^ stream_id));
  }

  std::mt19937_64& engine() { return eng_; }

  double uniform(double a, double b) {
    return std::uniform_real_distribution<double>(a, b)(eng_);
  }
  double normal(double mean = 0.0, double sd = 1.0) {
    return std::normal_distribution<double>(mean, sd)(eng_);
  }
  // Uniform over {0, 1, ..., n-1}.
  std::uint64_t index(std::uint64_t n) {
    return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(eng_);
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace bgclab
