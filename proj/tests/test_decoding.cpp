// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <cmath>
#include <string>
#include <vector>

#include "scmoe/core_math.hpp"
#include "scmoe/decoding.hpp"
#include "scmoe/error.hpp"
#include "test_support.hpp"

using namespace scmoe;
using namespace scmoe::testing;
using Catch::Matchers::WithinAbs;

namespace {

DecodeConfig greedy_config(int max_new, RoutingStrategy routing = RoutingStrategy::top_k(2)) {
  DecodeConfig cfg;
  cfg.routing = routing;
  cfg.max_new_tokens = max_new;
  cfg.ignore_stop = true;
  return cfg;
}

std::vector<int> greedy_tokens(const Model& m, const std::vector<int>& prompt, int n,
                               RoutingStrategy routing = RoutingStrategy::top_k(2)) {
  return baseline_generate(m, prompt, greedy_config(n, routing)).tokens;
}

}  // namespace

TEST_CASE("plausibility mask worked examples") {
  const std::vector<double> z{5.0, 3.0, 1.0};
  CHECK(plausibility_mask(z, 0.1) == std::vector<std::size_t>{0, 1});
  CHECK(plausibility_mask(z, 1e-9) == std::vector<std::size_t>{0, 1, 2});
  CHECK(plausibility_mask(z, 1.0) == std::vector<std::size_t>{0});
  CHECK_THROWS_AS(plausibility_mask(z, 0.0), Error);
  CHECK_THROWS_AS(plausibility_mask(z, 1.5), Error);
}

TEST_CASE("contrast logits worked examples") {
  const auto a = contrast_logits(std::vector<double>{2.0, 1.0}, std::vector<double>{1.5, 1.4}, 0.5, 0.1);
  CHECK_THAT(a[0], WithinAbs(2.25, 1e-9));
  CHECK_THAT(a[1], WithinAbs(0.80, 1e-9));

  const auto b = contrast_logits(std::vector<double>{5.0, 3.0, 1.0}, std::vector<double>{0.0, 0.0, 0.0}, 0.5, 0.1);
  CHECK_THAT(b[0], WithinAbs(7.5, 1e-9));
  CHECK_THAT(b[1], WithinAbs(4.5, 1e-9));
  CHECK(is_masked(b[2]));
}

TEST_CASE("contrast with beta 0 is the strong logits on the plausible set") {
  const std::vector<double> s{0.3, 2.0, 1.9, -4.0};
  const std::vector<double> w{9.0, -1.0, 3.0, 0.0};
  const auto z = contrast_logits(s, w, 0.0, 0.1);
  CHECK(z[1] == 2.0);
  CHECK(z[2] == 1.9);
  CHECK(is_masked(z[3]));
  CHECK(argmax(z) == argmax(s));
}

TEST_CASE("contrastive search score rejects a degenerate candidate") {
  const double repeat = contrastive_search_score(0.5, 1.0, 0.6);
  const double fresh = contrastive_search_score(0.4, 0.0, 0.6);
  CHECK_THAT(repeat, WithinAbs(-0.4, 1e-12));
  CHECK_THAT(fresh, WithinAbs(0.16, 1e-12));
  CHECK(fresh > repeat);
}

TEST_CASE("SCMoE degenerates to greedy") {
  const Model model = random_model(small_config(2), 21);
  Rng rng(2);
  for (int trial = 0; trial < 4; ++trial) {
    const auto prompt = random_prompt(rng, 8);
    const auto reference = greedy_tokens(model, prompt, 24);
    DecodeConfig cfg = greedy_config(24);

    Scmoe zero_beta;
    zero_beta.beta = 0.0;
    CHECK(scmoe_generate(model, prompt, zero_beta, cfg).tokens == reference);

    Scmoe unit_alpha;
    unit_alpha.alpha = 1.0;
    CHECK(scmoe_generate(model, prompt, unit_alpha, cfg).tokens == reference);

    Scmoe same;
    same.weak = same.strong;
    CHECK(scmoe_generate(model, prompt, same, cfg).tokens == reference);
  }
}

TEST_CASE("SCMoE with a real contrast runs and reports diagnostics") {
  const Model model = random_model(small_config(2), 22);
  DecodeConfig cfg = greedy_config(16);
  cfg.record_logits = true;
  const auto r = scmoe_generate(model, encode("Q: 2+2?"), Scmoe{}, cfg);
  REQUIRE(r.tokens.size() == 16);
  for (const auto& s : r.steps) {
    CHECK(s.n_valid >= 1);
    CHECK(s.strong_max.has_value());
    CHECK(s.weak_max.has_value());
    CHECK(s.strong_logits.size() == 260);
  }
}

TEST_CASE("sampling is reproducible per seed") {
  const Model model = random_model(small_config(2), 23);
  DecodeConfig cfg = greedy_config(20);
  cfg.decoder = Sample{0.7};
  cfg.seed = 5;
  const auto a = generate(model, encode("x"), cfg).tokens;
  const auto b = generate(model, encode("x"), cfg).tokens;
  cfg.seed = 6;
  const auto c = generate(model, encode("x"), cfg).tokens;
  CHECK(a == b);
  CHECK(a != c);

  Scmoe s;
  s.sample = true;
  cfg.decoder = s;
  CHECK(generate(model, encode("x"), cfg).tokens == generate(model, encode("x"), cfg).tokens);
}

TEST_CASE("near-zero temperature behaves as greedy") {
  const Model model = random_model(small_config(2), 24);
  DecodeConfig cfg = greedy_config(12);
  cfg.decoder = Sample{1e-6};
  CHECK(generate(model, encode("abc"), cfg).tokens == greedy_tokens(model, encode("abc"), 12));
}

TEST_CASE("baseline sanity checks") {
  const Model model = random_model(small_config(2), 25);
  const auto prompt = encode("The answer is");
  const auto greedy = greedy_tokens(model, prompt, 20);

  const DecodeConfig ensemble2 = parse_decoder_spec("ensemble:top:2");
  CHECK(greedy_tokens(model, prompt, 20, ensemble2.routing) == greedy);

  const auto top1 = greedy_tokens(model, prompt, 20, RoutingStrategy::top_k(1));
  CHECK(greedy_tokens(model, prompt, 20, RoutingStrategy::dynamic(1e-12)) == top1);

  DecodeConfig cs = greedy_config(20);
  cs.decoder = ContrastiveSearch{5, 0.0};
  CHECK(generate(model, prompt, cs).tokens == greedy);
  cs.decoder = ContrastiveSearch{1, 0.6};
  CHECK(generate(model, prompt, cs).tokens == greedy);
  cs.decoder = ContrastiveSearch{4, 0.6};
  CHECK(generate(model, prompt, cs).tokens.size() == 20);
}

TEST_CASE("contrastive decoding against an identical amateur is greedy") {
  const Model model = random_model(small_config(2), 26);
  const Model other = random_model(small_config(2), 27);
  const auto prompt = encode("seven");
  const auto greedy = greedy_tokens(model, prompt, 16);
  CHECK(contrastive_decoding_generate(model, model, prompt, 0.5, 0.1, greedy_config(16)).tokens == greedy);
  const auto r = contrastive_decoding_generate(model, other, prompt, 0.5, 0.1, greedy_config(16));
  CHECK(r.tokens.size() == 16);
  for (const auto& s : r.steps) CHECK(s.n_valid >= 1);

  ModelConfig wide = small_config(2);
  wide.vocab_size = 300;
  const Model mismatch = random_model(wide, 1);
  CHECK_THROWS_AS(contrastive_decoding_generate(model, mismatch, prompt, 0.5, 0.1, greedy_config(4)), Error);

  DecodeConfig via_dispatch = greedy_config(4);
  via_dispatch.decoder = ContrastiveDecoding{"unused", 0.5, 0.1};
  CHECK_THROWS_AS(generate(model, prompt, via_dispatch), Error);
}

TEST_CASE("DoLa against the final layer is greedy restricted to the plausible set") {
  const Model model = random_model(small_config(3), 28);
  const auto prompt = encode("count");
  const std::vector<int> final_only{2};
  const auto r = dola_generate(model, prompt, final_only, 0.1, greedy_config(12));
  // All scores are zero, so the lowest-index plausible token wins each step.
  GenerationContext ctx(model, RoutingStrategy::top_k(2), 0);
  StepOutput out;
  for (int t : prompt) out = ctx.forward_one(t);
  for (std::size_t i = 0; i < r.tokens.size(); ++i) {
    const auto valid = plausibility_mask(out.logits, 0.1);
    CHECK(r.tokens[i] == static_cast<int>(valid.front()));
    CHECK(r.steps[i].premature_layer == 2);
    out = ctx.forward_one(r.tokens[i]);
  }
}

TEST_CASE("DoLa picks the most divergent premature layer") {
  const std::vector<double> final_dist{0.7, 0.2, 0.1};
  const std::vector<ProbVector> candidates{final_dist, {0.1, 0.2, 0.7}, {0.3, 0.4, 0.3}};
  CHECK(select_premature_layer(final_dist, candidates) == 1);
  const std::vector<ProbVector> tie{final_dist, final_dist};
  CHECK(select_premature_layer(final_dist, tie) == 0);
}

TEST_CASE("DoLa buckets and layer validation") {
  CHECK(dola_bucket_layers(8, false) == std::vector<int>{0, 2});
  CHECK(dola_bucket_layers(8, true) == std::vector<int>{4, 6});
  CHECK(dola_bucket_layers(4, false) == std::vector<int>{0});
  CHECK(dola_bucket_layers(4, true) == std::vector<int>{2});

  const Model model = random_model(small_config(2), 29);
  CHECK_THROWS_AS(dola_generate(model, encode("a"), std::vector<int>{}, 0.1, greedy_config(2)), Error);
  CHECK_THROWS_AS(dola_generate(model, encode("a"), std::vector<int>{5}, 0.1, greedy_config(2)), Error);
  DecodeConfig d = greedy_config(6);
  d.decoder = Dola{};
  const auto r = generate(model, encode("a"), d);
  CHECK(r.tokens.size() == 6);
  CHECK(r.steps[0].premature_layer == 0);
}

TEST_CASE("generation stops at the stop token and includes it") {
  const Model model = random_model(small_config(2), 30);
  const auto prompt = encode("go");
  const auto free_run = greedy_tokens(model, prompt, 8);
  DecodeConfig cfg = greedy_config(8);
  cfg.ignore_stop = false;
  cfg.stop_token = free_run[2];
  const auto stopped = baseline_generate(model, prompt, cfg).tokens;
  const auto first = std::find(free_run.begin(), free_run.end(), free_run[2]);
  CHECK(stopped == std::vector<int>(free_run.begin(), first + 1));
}

TEST_CASE("generation rejects requests that overflow the context") {
  ModelConfig c = small_config(1);
  c.max_seq_len = 10;
  const Model model = random_model(c, 31);
  const auto prompt = encode("abcd");  // 5 tokens
  CHECK(baseline_generate(model, prompt, greedy_config(6)).tokens.size() == 6);
  try {
    baseline_generate(model, prompt, greedy_config(7));
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::kContextOverflow);
  }
  CHECK_THROWS_AS(baseline_generate(model, std::vector<int>{}, greedy_config(2)), Error);
}

TEST_CASE("majority vote") {
  auto v = [](std::vector<std::optional<std::string>> a) { return majority_vote(a); };
  const auto r = v({"3", "3", "5", "3", "2"});
  CHECK(r.answer == "3");
  CHECK(r.count == 3);
  CHECK(v({"7", "9", "7", "9"}).answer == "7");
  CHECK(v({"9", "7", "7", "9"}).answer == "9");
  CHECK(v({std::nullopt, "4", std::nullopt}).answer == "4");
  try {
    v({std::nullopt, std::nullopt});
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::kNoVotableAnswers);
  }
}

TEST_CASE("self-consistency uses consecutive seeds and ignores job count") {
  const std::vector<std::string> rigged{"3", "3", "5", "3", "2"};
  std::vector<std::uint64_t> seen(5);
  auto gen = [&](std::uint64_t seed) {
    seen[seed - 100] = seed;
    return rigged[seed - 100];
  };
  auto identity = [](const std::string& s) -> std::optional<std::string> { return s; };
  const auto a = self_consistency(gen, 5, 100, identity, 1);
  const auto b = self_consistency(gen, 5, 100, identity, 3);
  CHECK(a.answer == "3");
  CHECK(a.tally == b.tally);
  CHECK(seen == std::vector<std::uint64_t>{100, 101, 102, 103, 104});
}

TEST_CASE("numeric answer extraction") {
  CHECK(extract_numeric_answer("costs 1,234 dollars") == "1234");
  CHECK(extract_numeric_answer("so 3+4=7. The answer is 7.") == "7");
  CHECK(extract_numeric_answer("it is -3.5 degrees") == "-3.5");
  CHECK(extract_numeric_answer("we got 12.") == "12");
  CHECK_FALSE(extract_numeric_answer("no digits here").has_value());
}

TEST_CASE("decoder specs") {
  CHECK(std::holds_alternative<Greedy>(parse_decoder_spec("greedy").decoder));
  CHECK(parse_decoder_spec("ensemble:4").routing == RoutingStrategy::top_k(4));
  CHECK(parse_decoder_spec("ensemble:top:4").routing == RoutingStrategy::top_k(4));
  CHECK(parse_decoder_spec("dyn:0.4").routing == RoutingStrategy::dynamic(0.4));
  CHECK(parse_decoder_spec("route:rank:3").routing == RoutingStrategy::rank_k(3));
  CHECK(std::get<Sample>(parse_decoder_spec("sample:0.7").decoder).temperature == 0.7);

  const auto s = std::get<Scmoe>(parse_decoder_spec("scmoe:top:2/rank:2/0.5").decoder);
  CHECK(s.strong == RoutingStrategy::top_k(2));
  CHECK(s.weak == RoutingStrategy::rank_k(2));
  CHECK(s.beta == 0.5);
  CHECK(s.alpha == 0.1);
  CHECK_FALSE(s.sample);
  const auto ss = std::get<Scmoe>(parse_decoder_spec("scmoe-sample:top:6+shared:2/rank:1/0.3/0.2").decoder);
  CHECK(ss.sample);
  CHECK(ss.strong.shared_experts == 2);
  CHECK(ss.alpha == 0.2);

  const auto cd = std::get<ContrastiveDecoding>(parse_decoder_spec("cd:/tmp/a.bin/0.5").decoder);
  CHECK(cd.amateur_checkpoint == "/tmp/a.bin");
  CHECK(cd.beta == 0.5);
  const auto d = std::get<Dola>(parse_decoder_spec("dola:0;2/0.2").decoder);
  CHECK(d.bucket == Dola::Bucket::kExplicit);
  CHECK(d.layers == std::vector<int>{0, 2});
  CHECK(std::get<ContrastiveSearch>(parse_decoder_spec("cs:0.6/4").decoder).top_k == 4);

  for (const char* bad : {"", "beam:3", "scmoe:top:2", "sample:x", "cs:", "ensemble:"}) {
    CAPTURE(bad);
    CHECK_THROWS_AS(parse_decoder_spec(bad), Error);
  }
  CHECK(decoder_label(parse_decoder_spec("greedy")) == "greedy[top:2]");
  CHECK(decoder_label(parse_decoder_spec("scmoe:top:2/rank:2/0.5")) == "scmoe:top:2/rank:2/0.5/0.1");
}
