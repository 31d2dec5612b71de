#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace capi {

// Seeded random source. All randomness in the library flows through this type.
//
// Distributions are implemented here rather than via <random> distributions so
// that streams are bit-identical across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  // Independent substream keyed by a component name and optional indices,
  // e.g. Rng::derive(seed, "masking", {step, image}).
  static Rng derive(std::uint64_t seed, std::string_view component,
                    std::initializer_list<std::uint64_t> keys = {});

  std::uint64_t next_u64() { return engine_(); }
  // Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n). n must be positive.
  std::uint64_t uniform_index(std::uint64_t n);
  int uniform_int(int lo, int hi_inclusive);
  double normal();
  bool bernoulli(double p) { return uniform() < p; }

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = uniform_index(i);
      std::swap(items[i - 1], items[j]);
    }
  }

  std::string state() const;
  void restore(const std::string& state);

  bool operator==(const Rng& other) const { return engine_ == other.engine_; }

 private:
  std::mt19937_64 engine_;
};

// splitmix64 finalizer, exposed for seed derivation in tests and tools.
std::uint64_t mix_seed(std::uint64_t x);

}  // namespace capi
