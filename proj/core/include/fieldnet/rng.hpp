#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace fieldnet {

// Seeded random source. The engine is std::mt19937_64, whose output sequence
// is fixed by the standard; the distribution helpers below are written out so
// that draws are identical across standard library implementations (the
// std:: distributions are implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Rejection sampling keeps it unbiased.
  std::uint64_t uniform_int(std::uint64_t n);

  // Standard normal via the Box-Muller transform.
  double normal();

  // Serialized engine state (text form produced by operator<<).
  std::string state() const;
  void set_state(const std::string& s);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Derives an independent stream seed from a base seed and a counter
// (splitmix64 finalizer), e.g. one stream per training step.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t counter);

}  // namespace fieldnet
