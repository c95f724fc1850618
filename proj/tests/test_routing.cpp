// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <cmath>
#include <set>
#include <vector>

#include "scmoe/error.hpp"
#include "scmoe/routing.hpp"

using namespace scmoe;
using Catch::Matchers::WithinAbs;

namespace {

const std::vector<double> kGates{0.5, 0.3, 0.2};

}  // namespace

TEST_CASE("compute_gates of router output [ln 2, 0] is [2/3, 1/3]") {
  Matrix router(2, 1);
  router.at(0, 0) = static_cast<float>(std::log(2.0));
  const std::vector<float> h{1.0f};
  const auto g = compute_gates(router, h);
  CHECK_THAT(g[0], WithinAbs(2.0 / 3.0, 1e-7));
  CHECK_THAT(g[1], WithinAbs(1.0 / 3.0, 1e-7));
}

TEST_CASE("TopK(2) renormalizes the two largest gates") {
  Rng rng(0);
  const auto sel = select_experts(kGates, RoutingStrategy::top_k(2), rng);
  CHECK(sel.indices == std::vector<int>{0, 1});
  CHECK_THAT(sel.weights[0], WithinAbs(0.625, 1e-15));
  CHECK_THAT(sel.weights[1], WithinAbs(0.375, 1e-15));
}

TEST_CASE("RankK selects exactly the k-th ranked expert with weight 1") {
  Rng rng(0);
  auto sel = select_experts(kGates, RoutingStrategy::rank_k(2), rng);
  CHECK(sel.indices == std::vector<int>{1});
  CHECK(sel.weights == std::vector<double>{1.0});
  sel = select_experts(kGates, RoutingStrategy::rank_k(1), rng);
  CHECK(sel.indices == std::vector<int>{0});
  sel = select_experts(kGates, RoutingStrategy::rank_k(3), rng);
  CHECK(sel.indices == std::vector<int>{2});
}

TEST_CASE("RankK(1) matches TopK(1)") {
  Rng rng(0);
  const std::vector<double> g{0.1, 0.4, 0.2, 0.3};
  const auto a = select_experts(g, RoutingStrategy::rank_k(1), rng);
  const auto b = select_experts(g, RoutingStrategy::top_k(1), rng);
  CHECK(a.indices == b.indices);
  CHECK(a.weights == b.weights);
}

TEST_CASE("DynamicThreshold walks cumulative mass until it exceeds the threshold") {
  Rng rng(0);
  auto sel = select_experts(kGates, RoutingStrategy::dynamic(0.6), rng);
  CHECK(sel.indices == std::vector<int>{0, 1});
  CHECK_THAT(sel.weights[0], WithinAbs(0.625, 1e-15));
  CHECK_THAT(sel.weights[1], WithinAbs(0.375, 1e-15));
  // Exactly reaching the threshold is not exceeding it.
  sel = select_experts(kGates, RoutingStrategy::dynamic(0.5), rng);
  CHECK(sel.indices == std::vector<int>{0, 1});
  sel = select_experts(kGates, RoutingStrategy::dynamic(1e-9), rng);
  CHECK(sel.indices == std::vector<int>{0});
  sel = select_experts(kGates, RoutingStrategy::dynamic(0.99), rng);
  CHECK(sel.indices == std::vector<int>{0, 1, 2});
}

TEST_CASE("RandomOne picks one expert with weight 1 and reaches every expert") {
  Rng rng(5);
  std::set<int> seen;
  for (int i = 0; i < 200; ++i) {
    const auto sel = select_experts(kGates, RoutingStrategy::random_one(), rng);
    REQUIRE(sel.indices.size() == 1);
    REQUIRE(sel.weights == std::vector<double>{1.0});
    seen.insert(sel.indices[0]);
  }
  CHECK(seen == std::set<int>{0, 1, 2});
}

TEST_CASE("shared experts bypass routing with raw gates") {
  Rng rng(0);
  const std::vector<double> g{0.1, 0.5, 0.3, 0.1};
  const auto sel = select_experts(g, RoutingStrategy::top_k(2).with_shared(1), rng);
  CHECK(sel.shared == 1);
  CHECK(sel.indices == std::vector<int>{0, 1, 2});
  CHECK_THAT(sel.weights[0], WithinAbs(0.1, 1e-15));
  CHECK_THAT(sel.weights[1], WithinAbs(0.625, 1e-15));
  CHECK_THAT(sel.weights[2], WithinAbs(0.375, 1e-15));
  CHECK(std::vector<int>(sel.routed().begin(), sel.routed().end()) == std::vector<int>{1, 2});

  const auto rank = select_experts(g, RoutingStrategy::rank_k(1).with_shared(1), rng);
  CHECK(rank.indices == std::vector<int>{0, 1});
  CHECK(rank.weights[1] == 1.0);
}

TEST_CASE("renorm gate mode rescales shared and routed weights jointly") {
  Rng rng(0);
  const std::vector<double> g{0.1, 0.5, 0.3, 0.1};
  auto s = RoutingStrategy::top_k(2).with_shared(1);
  s.shared_gate = SharedGate::kRenorm;
  const auto sel = select_experts(g, s, rng);
  CHECK_THAT(sel.weights[0], WithinAbs(0.1 / 1.1, 1e-15));
  CHECK_THAT(sel.weights[1], WithinAbs(0.625 / 1.1, 1e-15));
  CHECK_THAT(sel.weights[2], WithinAbs(0.375 / 1.1, 1e-15));
}

TEST_CASE("degenerate gates are rejected") {
  Rng rng(0);
  const std::vector<double> g{1.0, 0.0, 0.0};
  try {
    select_experts(g, RoutingStrategy::top_k(2).with_shared(1), rng);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::kDegenerateGates);
  }
}

TEST_CASE("strategies that do not fit the expert count are rejected") {
  Rng rng(0);
  CHECK_THROWS_AS(select_experts(kGates, RoutingStrategy::top_k(4), rng), Error);
  CHECK_THROWS_AS(select_experts(kGates, RoutingStrategy::rank_k(4), rng), Error);
  CHECK_THROWS_AS(select_experts(kGates, RoutingStrategy::top_k(0), rng), Error);
  CHECK_THROWS_AS(select_experts(kGates, RoutingStrategy::top_k(1).with_shared(3), rng), Error);
  CHECK_THROWS_AS(RoutingStrategy::dynamic(1.5).validate(3), Error);
}

TEST_CASE("combine_experts forms the weighted sum of expert outputs") {
  ExpertSelection sel;
  sel.indices = {0, 1};
  sel.weights = {0.625, 0.375};
  const std::vector<float> h{0.0f, 0.0f};
  const auto out = combine_experts(h, sel, 2, [](std::size_t e, std::span<const float>) {
    return e == 0 ? std::vector<float>{1.0f, 0.0f} : std::vector<float>{0.0f, 1.0f};
  });
  CHECK_THAT(out[0], WithinAbs(0.625, 1e-7));
  CHECK_THAT(out[1], WithinAbs(0.375, 1e-7));
}

TEST_CASE("routing strings round-trip") {
  for (const char* text : {"top:2", "rank:3", "random1", "dyn:0.4", "top:6+shared:2", "rank:2+shared:0",
                           "top:2+shared:2+gate:renorm"}) {
    const auto s = parse_routing(text);
    CHECK(s.to_string() == text);
    CHECK(parse_routing(s.to_string()) == s);
  }
  CHECK(parse_routing("top:2").kind == RoutingKind::kTopK);
  CHECK(parse_routing("dyn:0.4").threshold == 0.4);
  CHECK(parse_routing("rank:3").k == 3);
}

TEST_CASE("malformed routing strings are rejected") {
  for (const char* text : {"", "top", "top:", "top:x", "rank:-1", "dyn:abc", "dyn:0.4x", "random2", "top:2+shared",
                           "top:2+gate:odd", "bottom:2"}) {
    CAPTURE(text);
    CHECK_THROWS_AS(parse_routing(text), Error);
  }
}

TEST_CASE("fixed_routed_count") {
  CHECK(RoutingStrategy::top_k(3).fixed_routed_count() == 3);
  CHECK(RoutingStrategy::rank_k(5).fixed_routed_count() == 1);
  CHECK(RoutingStrategy::random_one().fixed_routed_count() == 1);
  CHECK_FALSE(RoutingStrategy::dynamic(0.3).fixed_routed_count().has_value());
}
