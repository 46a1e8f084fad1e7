#pragma once

#include <cstdint>
#include <random>

namespace tslora {

// Deterministic random stream. mt19937_64 is bit-specified by the standard;
// the gaussian uses the Marsaglia polar method instead of
// std::normal_distribution, whose output is implementation-defined. Streams
// are therefore reproducible across standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi], inclusive, via rejection.
  int uniform_int(int lo, int hi);

  double gaussian();

  double gaussian(double mean, double stddev) {
    return mean + stddev * gaussian();
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Derives an independent stream seed from a base seed, e.g. one stream per
// sample path or per window. splitmix64 of the pair.
uint64_t mix_seed(uint64_t base, uint64_t stream);

}  // namespace tslora
