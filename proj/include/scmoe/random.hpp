// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>

namespace scmoe {

/// SplitMix64 finalizer; used to derive independent stream seeds.
[[nodiscard]] constexpr std::uint64_t mix_seed(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

[[nodiscard]] constexpr std::uint64_t derive_seed(std::uint64_t seed,
                                                  std::uint64_t stream) noexcept {
  return mix_seed(seed ^ mix_seed(stream + 0x51ed270b27b0e3a7ULL));
}

/// Seeded random source. Built only on mt19937_64 output (whose sequence the
/// standard fixes) so draws are identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  /// Unbiased integer in [0, n).
  std::size_t uniform_index(std::size_t n);

  /// Standard normal via Box-Muller.
  double normal();

  /// Draws an index from a probability vector by left-to-right cumulative
  /// search. Zero-probability entries are never returned.
  std::size_t categorical(std::span<const double> probs);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace scmoe
