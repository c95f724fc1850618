// SPDX-License-Identifier: Apache-2.0
#include "scmoe/routing.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>

#include "scmoe/error.hpp"

namespace scmoe {
namespace {

constexpr double kMinRenormDenominator = 1e-12;

[[noreturn]] void bad_spec(std::string_view text, std::string_view why) {
  throw Error(Errc::kInvalidArgument,
              "invalid routing strategy '" + std::string(text) + "': " + std::string(why));
}

int parse_int(std::string_view whole, std::string_view s) {
  int v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) bad_spec(whole, "expected an integer");
  return v;
}

double parse_double(std::string_view whole, std::string_view s) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) bad_spec(whole, "expected a number");
  return v;
}

}  // namespace

RoutingStrategy RoutingStrategy::top_k(int k) {
  RoutingStrategy s;
  s.kind = RoutingKind::kTopK;
  s.k = k;
  return s;
}

RoutingStrategy RoutingStrategy::rank_k(int k) {
  RoutingStrategy s;
  s.kind = RoutingKind::kRankK;
  s.k = k;
  return s;
}

RoutingStrategy RoutingStrategy::random_one() {
  RoutingStrategy s;
  s.kind = RoutingKind::kRandomOne;
  s.k = 1;
  return s;
}

RoutingStrategy RoutingStrategy::dynamic(double threshold) {
  RoutingStrategy s;
  s.kind = RoutingKind::kDynamicThreshold;
  s.k = 0;
  s.threshold = threshold;
  return s;
}

RoutingStrategy RoutingStrategy::with_shared(int count) const {
  RoutingStrategy s = *this;
  s.shared_experts = count;
  return s;
}

void RoutingStrategy::validate(int n_experts) const {
  const int shared = shared_experts.value_or(0);
  if (shared < 0) throw Error(Errc::kInvalidArgument, "negative shared expert count");
  const int routed = n_experts - shared;
  if (routed < 1) {
    throw Error(Errc::kInvalidArgument,
                "shared experts (" + std::to_string(shared) + ") leave no routed experts out of " +
                    std::to_string(n_experts));
  }
  switch (kind) {
    case RoutingKind::kTopK:
    case RoutingKind::kRankK:
      if (k < 1 || k > routed) {
        throw Error(Errc::kInvalidArgument,
                    "k=" + std::to_string(k) + " outside [1, " + std::to_string(routed) + "]");
      }
      break;
    case RoutingKind::kDynamicThreshold:
      if (!(threshold > 0.0 && threshold < 1.0)) {
        throw Error(Errc::kInvalidArgument, "dynamic threshold must lie in (0, 1)");
      }
      break;
    case RoutingKind::kRandomOne:
      break;
  }
}

std::optional<int> RoutingStrategy::fixed_routed_count() const {
  switch (kind) {
    case RoutingKind::kTopK: return k;
    case RoutingKind::kRankK:
    case RoutingKind::kRandomOne: return 1;
    case RoutingKind::kDynamicThreshold: return std::nullopt;
  }
  return std::nullopt;
}

std::string RoutingStrategy::to_string() const {
  std::ostringstream os;
  switch (kind) {
    case RoutingKind::kTopK: os << "top:" << k; break;
    case RoutingKind::kRankK: os << "rank:" << k; break;
    case RoutingKind::kRandomOne: os << "random1"; break;
    case RoutingKind::kDynamicThreshold: os << "dyn:" << threshold; break;
  }
  if (shared_experts) os << "+shared:" << *shared_experts;
  if (shared_gate == SharedGate::kRenorm) os << "+gate:renorm";
  return os.str();
}

RoutingStrategy parse_routing(std::string_view text) {
  std::string_view rest = text;
  std::string_view head = rest.substr(0, rest.find('+'));
  rest = head.size() < rest.size() ? rest.substr(head.size() + 1) : std::string_view{};

  RoutingStrategy s;
  if (head == "random1") {
    s = RoutingStrategy::random_one();
  } else {
    const auto colon = head.find(':');
    if (colon == std::string_view::npos) bad_spec(text, "unknown kind");
    const std::string_view kind = head.substr(0, colon);
    const std::string_view arg = head.substr(colon + 1);
    if (kind == "top") {
      s = RoutingStrategy::top_k(parse_int(text, arg));
    } else if (kind == "rank") {
      s = RoutingStrategy::rank_k(parse_int(text, arg));
    } else if (kind == "dyn") {
      s = RoutingStrategy::dynamic(parse_double(text, arg));
      if (!(s.threshold > 0.0 && s.threshold < 1.0)) bad_spec(text, "threshold outside (0, 1)");
    } else {
      bad_spec(text, "unknown kind");
    }
    if (s.kind != RoutingKind::kDynamicThreshold && s.k < 1) bad_spec(text, "k must be positive");
  }

  while (!rest.empty()) {
    std::string_view part = rest.substr(0, rest.find('+'));
    rest = part.size() < rest.size() ? rest.substr(part.size() + 1) : std::string_view{};
    if (part.starts_with("shared:")) {
      s.shared_experts = parse_int(text, part.substr(7));
      if (*s.shared_experts < 0) bad_spec(text, "negative shared count");
    } else if (part == "gate:raw") {
      s.shared_gate = SharedGate::kRaw;
    } else if (part == "gate:renorm") {
      s.shared_gate = SharedGate::kRenorm;
    } else {
      bad_spec(text, "unknown suffix '" + std::string(part) + "'");
    }
  }
  return s;
}

bool ExpertSelection::contains(int expert) const {
  return std::find(indices.begin(), indices.end(), expert) != indices.end();
}

double ExpertSelection::weight_of(int expert) const {
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] == expert) return weights[i];
  }
  return 0.0;
}

GateVector compute_gates(const Matrix& router, std::span<const float> h) {
  if (router.cols != h.size()) {
    throw Error(Errc::kInvalidArgument,
                "compute_gates: router is " + std::to_string(router.rows) + "x" +
                    std::to_string(router.cols) + " but h has " + std::to_string(h.size()));
  }
  const std::vector<float> logits = matvec(router, h);
  const std::vector<double> wide(logits.begin(), logits.end());
  return softmax(wide);
}

ExpertSelection select_experts(std::span<const double> gates,
                               const RoutingStrategy& strategy, Rng& rng) {
  const int n_total = static_cast<int>(gates.size());
  strategy.validate(n_total);
  const int shared = strategy.shared_experts.value_or(0);
  const std::span<const double> routed_gates = gates.subspan(static_cast<std::size_t>(shared));
  const std::size_t n_routed = routed_gates.size();

  ExpertSelection sel;
  sel.shared = shared;
  for (int i = 0; i < shared; ++i) {
    sel.indices.push_back(i);
    sel.weights.push_back(gates[static_cast<std::size_t>(i)]);
  }

  auto renormalize_routed = [&](std::span<const std::size_t> chosen) {
    double denom = 0.0;
    for (std::size_t r : chosen) denom += routed_gates[r];
    if (denom < kMinRenormDenominator) throw Error(Errc::kDegenerateGates, "degenerate gates");
    for (std::size_t r : chosen) {
      sel.indices.push_back(shared + static_cast<int>(r));
      sel.weights.push_back(routed_gates[r] / denom);
    }
  };

  switch (strategy.kind) {
    case RoutingKind::kTopK: {
      const auto ranked = ranked_indices(routed_gates);
      renormalize_routed(std::span(ranked).first(static_cast<std::size_t>(strategy.k)));
      break;
    }
    case RoutingKind::kRankK: {
      const auto ranked = ranked_indices(routed_gates);
      sel.indices.push_back(shared + static_cast<int>(ranked[static_cast<std::size_t>(strategy.k - 1)]));
      sel.weights.push_back(1.0);
      break;
    }
    case RoutingKind::kRandomOne: {
      sel.indices.push_back(shared + static_cast<int>(rng.uniform_index(n_routed)));
      sel.weights.push_back(1.0);
      break;
    }
    case RoutingKind::kDynamicThreshold: {
      const auto ranked = ranked_indices(routed_gates);
      double mass = 0.0;
      for (double g : routed_gates) mass += g;
      if (mass < kMinRenormDenominator) throw Error(Errc::kDegenerateGates, "degenerate gates");
      double cumulative = 0.0;
      std::size_t count = 0;
      while (count < n_routed) {
        cumulative += routed_gates[ranked[count]] / mass;
        ++count;
        if (cumulative > strategy.threshold) break;
      }
      renormalize_routed(std::span(ranked).first(count));
      break;
    }
  }

  if (shared > 0 && strategy.shared_gate == SharedGate::kRenorm) {
    double total = 0.0;
    for (double w : sel.weights) total += w;
    if (total < kMinRenormDenominator) throw Error(Errc::kDegenerateGates, "degenerate gates");
    for (double& w : sel.weights) w /= total;
  }
  return sel;
}

std::vector<float> expert_forward(const ExpertWeights& expert, std::span<const float> h) {
  std::vector<float> g = matvec(expert.gate, h);
  const std::vector<float> u = matvec(expert.up, h);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = silu(g[i]) * u[i];
  return matvec(expert.down, g);
}

std::vector<float> moe_layer_forward(std::span<const float> h,
                                     const ExpertSelection& selection,
                                     std::span<const ExpertWeights> experts) {
  return combine_experts(h, selection, experts.size(),
                         [&](int i, std::span<const float> x) {
                           return expert_forward(experts[static_cast<std::size_t>(i)], x);
                         });
}

}  // namespace scmoe
