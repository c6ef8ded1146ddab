#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <utility>

namespace capsroute {

/// Seeded generator built on std::mt19937_64, whose raw output sequence is fixed
/// by the C++ standard. All derived draws (uniform, normal, integer ranges) are
/// computed here from raw 64-bit words rather than through std distributions,
/// whose algorithms vary between standard libraries. Equal seeds therefore give
/// equal sequences on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed), seed_(seed) {}

  /// Independent stream derived from (seed, stream) by SplitMix64 mixing. Used
  /// to give every sample index its own stream regardless of which worker
  /// processes it.
  static Rng substream(std::uint64_t seed, std::uint64_t stream);

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform double in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n); unbiased (rejection on the top range).
  std::uint64_t below(std::uint64_t n);
  /// Standard normal via Box-Muller.
  double normal();
  /// Normal with the given stddev, redrawn until |z| <= 2 stddev.
  double truncated_normal(double stddev);

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t k = items.size(); k > 1; --k) {
      const auto j = static_cast<std::size_t>(below(k));
      std::swap(items[k - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  std::uint64_t seed_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace capsroute
