// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <limits>
#include <span>
#include <vector>

namespace scmoe {

/// Probabilities over a discrete support; 64-bit so divergences stay stable.
using ProbVector = std::vector<double>;

/// Pre-softmax scores. Entries equal to kMaskedLogit are excluded from the
/// support; they never take part in arithmetic.
using LogitVector = std::vector<double>;

inline constexpr double kMaskedLogit = std::numeric_limits<double>::lowest();

[[nodiscard]] inline bool is_masked(double z) noexcept {
  return z == kMaskedLogit;
}

/// Max-shifted softmax over the unmasked entries; masked entries get 0.
/// Throws Errc::kEmptySupport when every entry is masked.
ProbVector softmax(std::span<const double> z);

/// log(softmax(z)); masked entries stay kMaskedLogit.
LogitVector log_softmax(std::span<const double> z);

/// KL(p || q) in nats. Terms with p_i = 0 contribute nothing; p_i > 0 with
/// q_i = 0 throws Errc::kUnboundedDivergence.
double kl_divergence(std::span<const double> p, std::span<const double> q);

/// Jensen-Shannon divergence in nats (bounded by ln 2).
double js_divergence(std::span<const double> p, std::span<const double> q);

/// Indices ordered by value descending; ties keep the lower index first.
std::vector<std::size_t> ranked_indices(std::span<const double> w);

/// Index of the largest unmasked entry, lowest index on ties.
std::size_t argmax(std::span<const double> z);

/// Largest unmasked entry.
double max_unmasked(std::span<const double> z);

double cosine_similarity(std::span<const float> a, std::span<const float> b);

}  // namespace scmoe
