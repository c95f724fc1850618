// SPDX-License-Identifier: Apache-2.0
#include "scmoe/random.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include "scmoe/error.hpp"

namespace scmoe {

std::size_t Rng::uniform_index(std::size_t n) {
  if (n == 0) throw Error(Errc::kInvalidArgument, "uniform_index: empty range");
  const std::uint64_t range = n;
  const std::uint64_t limit =
      std::numeric_limits<std::uint64_t>::max() -
      std::numeric_limits<std::uint64_t>::max() % range;
  std::uint64_t x = engine_();
  while (x >= limit) x = engine_();
  return static_cast<std::size_t>(x % range);
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

std::size_t Rng::categorical(std::span<const double> probs) {
  double total = 0.0;
  for (double p : probs) total += p;
  if (!(total > 0.0)) throw Error(Errc::kEmptySupport, "empty support");
  const double target = uniform() * total;
  double acc = 0.0;
  std::size_t last_positive = probs.size();
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    acc += probs[i];
    last_positive = i;
    if (target < acc) return i;
  }
  return last_positive;
}

}  // namespace scmoe
