#pragma once

#include <cstddef>
#include <cstdint>
#include <utility>

namespace ctxseg {

struct RngState {
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;
  std::uint64_t counter = 0;
};

/// Counter-based generator: output i of (seed, stream) is splitmix64 of a keyed
/// counter, so streams are independent and the full state is three integers.
/// kVersion is bumped whenever the output sequence changes.
class Rng {
 public:
  static constexpr std::uint32_t kVersion = 1;

  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);
  static Rng from_state(const RngState& state);

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Standard normal via Box-Muller; consumes two outputs per call.
  double normal();
  /// Uniform integer in [0, n); n must be positive.
  std::uint64_t below(std::uint64_t n);
  bool bernoulli(double p) { return uniform() < p; }

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      const auto j = below(i);
      using std::swap;
      swap(first[i - 1], first[j]);
    }
  }

  RngState state() const { return {seed_, stream_, counter_}; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

std::uint64_t splitmix64(std::uint64_t x);
/// FNV-1a over bytes; stable across platforms (unlike std::hash).
std::uint64_t fnv1a64(const void* data, std::size_t size);

}  // namespace ctxseg
