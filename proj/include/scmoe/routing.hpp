// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "scmoe/core_math.hpp"
#include "scmoe/random.hpp"
#include "scmoe/tensor.hpp"

namespace scmoe {

enum class RoutingKind { kTopK, kRankK, kRandomOne, kDynamicThreshold };

/// How always-active shared experts are weighted. kRaw keeps their softmax
/// gate untouched; kRenorm rescales shared and routed weights jointly to sum 1.
enum class SharedGate { kRaw, kRenorm };

struct RoutingStrategy {
  RoutingKind kind = RoutingKind::kTopK;
  int k = 2;
  double threshold = 0.0;
  /// Leading expert indices that bypass routing. Unset means "use the
  /// model's configured count".
  std::optional<int> shared_experts;
  SharedGate shared_gate = SharedGate::kRaw;

  static RoutingStrategy top_k(int k);
  static RoutingStrategy rank_k(int k);
  static RoutingStrategy random_one();
  static RoutingStrategy dynamic(double threshold);

  [[nodiscard]] RoutingStrategy with_shared(int count) const;

  /// Throws Errc::kInvalidArgument when the strategy cannot run on
  /// `n_experts` total experts.
  void validate(int n_experts) const;

  /// Number of routed experts this strategy always activates, or nullopt for
  /// data-dependent counts (dynamic).
  [[nodiscard]] std::optional<int> fixed_routed_count() const;

  [[nodiscard]] std::string to_string() const;

  bool operator==(const RoutingStrategy&) const = default;
};

/// Parses `top:2`, `rank:3`, `random1`, `dyn:0.4`, each optionally followed by
/// `+shared:N` and/or `+gate:raw|renorm`.
RoutingStrategy parse_routing(std::string_view text);

/// Softmax gate values over all experts (shared ones included).
using GateVector = std::vector<double>;

struct ExpertSelection {
  /// Shared experts first (ascending), then routed experts in rank order.
  std::vector<int> indices;
  std::vector<double> weights;
  int shared = 0;

  [[nodiscard]] bool contains(int expert) const;
  [[nodiscard]] double weight_of(int expert) const;
  [[nodiscard]] std::span<const int> routed() const {
    return std::span<const int>(indices).subspan(static_cast<std::size_t>(shared));
  }
};

/// softmax(router * h).
GateVector compute_gates(const Matrix& router, std::span<const float> h);

ExpertSelection select_experts(std::span<const double> gates,
                               const RoutingStrategy& strategy, Rng& rng);

/// Gated feed-forward expert: down(silu(gate h) * up h).
struct ExpertWeights {
  Matrix gate;  // d_ff x d_model
  Matrix up;    // d_ff x d_model
  Matrix down;  // d_model x d_ff
};

std::vector<float> expert_forward(const ExpertWeights& expert, std::span<const float> h);

/// Weighted sum of the selected experts' outputs. `expert_fn(i, h)` returns
/// expert i's output; the sum is accumulated in selection order.
template <class ExpertFn>
std::vector<float> combine_experts(std::span<const float> h,
                                   const ExpertSelection& selection,
                                   std::size_t n_experts, ExpertFn&& expert_fn);

std::vector<float> moe_layer_forward(std::span<const float> h,
                                     const ExpertSelection& selection,
                                     std::span<const ExpertWeights> experts);

}  // namespace scmoe

#include "scmoe/routing_inl.hpp"
