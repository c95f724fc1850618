// SPDX-License-Identifier: Apache-2.0
#include "scmoe/decoding.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <regex>
#include <sstream>

#include "scmoe/error.hpp"
#include "scmoe/parallel.hpp"

namespace scmoe {
namespace {

using Clock = std::chrono::steady_clock;

std::int64_t elapsed_ns(Clock::time_point since) {
  return std::chrono::duration_cast<std::chrono::nanoseconds>(Clock::now() - since).count();
}

void check_alpha(double alpha) {
  if (!(alpha > 0.0 && alpha <= 1.0)) {
    throw Error(Errc::kInvalidArgument, "alpha must lie in (0, 1]");
  }
}

void check_common(const Model& model, std::span<const int> prompt, const DecodeConfig& cfg) {
  if (prompt.empty()) throw Error(Errc::kInvalidArgument, "empty prompt");
  if (cfg.max_new_tokens < 1) throw Error(Errc::kInvalidArgument, "max_new_tokens must be positive");
  const std::size_t needed = prompt.size() + static_cast<std::size_t>(cfg.max_new_tokens) - 1;
  if (needed > static_cast<std::size_t>(model.config().max_seq_len)) {
    throw Error(Errc::kContextOverflow,
                "context overflow: prompt (" + std::to_string(prompt.size()) + ") + " +
                    std::to_string(cfg.max_new_tokens) + " new tokens exceeds max_seq_len " +
                    std::to_string(model.config().max_seq_len));
  }
}

StepOutput prefill(GenerationContext& ctx, std::span<const int> prompt, ForwardOptions opts = {}) {
  StepOutput last;
  for (int t : prompt) last = ctx.forward_one(t, opts);
  return last;
}

bool should_stop(const DecodeConfig& cfg, int token) {
  return !cfg.ignore_stop && cfg.stop_token && *cfg.stop_token == token;
}

/// Shared emission loop. `choose(step)` picks the next token and fills the
/// diagnostics; `advance(token)` feeds it to every live context.
template <class Choose, class Advance>
GenerationResult run_loop(const DecodeConfig& cfg, Clock::time_point started, Choose&& choose,
                          Advance&& advance) {
  GenerationResult result;
  for (int i = 0; i < cfg.max_new_tokens; ++i) {
    const auto t0 = Clock::now();
    StepDiagnostics diag;
    const int token = choose(diag);
    diag.token = token;
    result.tokens.push_back(token);
    const bool stop = should_stop(cfg, token);
    if (!stop && i + 1 < cfg.max_new_tokens) advance(token);
    diag.ns = elapsed_ns(t0);
    result.steps.push_back(std::move(diag));
    if (stop) break;
  }
  result.text = decode(result.tokens);
  result.total_ns = elapsed_ns(started);
  return result;
}

double parse_number(std::string_view s, std::string_view context) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw Error(Errc::kInvalidArgument,
                "expected a number in decoder spec '" + std::string(context) + "'");
  }
  return v;
}

bool is_number(std::string_view s) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  return !s.empty() && ec == std::errc() && ptr == s.data() + s.size();
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(s.substr(start, pos == std::string_view::npos ? pos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::string format_number(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

}  // namespace

// ---------------------------------------------------------------------------

std::vector<std::size_t> plausibility_mask(std::span<const double> z, double alpha) {
  check_alpha(alpha);
  const double cutoff = std::log(alpha) + max_unmasked(z);
  std::vector<std::size_t> valid;
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (!is_masked(z[i]) && z[i] >= cutoff) valid.push_back(i);
  }
  return valid;
}

LogitVector contrast_logits(std::span<const double> z_strong, std::span<const double> z_weak,
                            double beta, double alpha) {
  if (z_strong.size() != z_weak.size()) {
    throw Error(Errc::kInvalidArgument, "contrast_logits: length mismatch");
  }
  if (!(beta >= 0.0)) throw Error(Errc::kInvalidArgument, "beta must be non-negative");
  LogitVector out(z_strong.size(), kMaskedLogit);
  for (std::size_t i : plausibility_mask(z_strong, alpha)) {
    if (is_masked(z_weak[i])) {
      throw Error(Errc::kInvalidArgument, "contrast_logits: weak logit masked inside plausible set");
    }
    out[i] = (1.0 + beta) * z_strong[i] - beta * z_weak[i];
  }
  return out;
}

RoutingStrategy default_routing(const ModelConfig& config) {
  const int routed = config.n_experts - config.n_shared_experts;
  return RoutingStrategy::top_k(std::min(2, routed));
}

// ---------------------------------------------------------------------------

GenerationResult baseline_generate(const Model& model, std::span<const int> prompt,
                                   const DecodeConfig& cfg) {
  check_common(model, prompt, cfg);
  std::optional<double> temperature;
  if (const auto* s = std::get_if<Sample>(&cfg.decoder)) {
    if (!(s->temperature > 0.0)) throw Error(Errc::kInvalidArgument, "temperature must be positive");
    temperature = s->temperature;
  } else if (!std::holds_alternative<Greedy>(cfg.decoder)) {
    throw Error(Errc::kInvalidArgument, "baseline_generate expects Greedy or Sample");
  }

  const auto started = Clock::now();
  GenerationContext ctx(model, cfg.routing, derive_seed(cfg.seed, 1));
  Rng sampler(derive_seed(cfg.seed, 2));
  StepOutput out = prefill(ctx, prompt);

  return run_loop(
      cfg, started,
      [&](StepDiagnostics& diag) {
        diag.strong_max = max_unmasked(out.logits);
        diag.n_valid = out.logits.size();
        if (cfg.record_logits) diag.strong_logits = out.logits;
        if (!temperature) return static_cast<int>(argmax(out.logits));
        LogitVector scaled = out.logits;
        for (double& z : scaled) z /= *temperature;
        return static_cast<int>(sampler.categorical(softmax(scaled)));
      },
      [&](int token) { out = ctx.forward_one(token); });
}

GenerationResult scmoe_generate(const Model& model, std::span<const int> prompt,
                                const Scmoe& params, const DecodeConfig& cfg) {
  check_common(model, prompt, cfg);
  check_alpha(params.alpha);
  if (!(params.beta >= 0.0)) throw Error(Errc::kInvalidArgument, "beta must be non-negative");

  const auto started = Clock::now();
  GenerationContext strong(model, params.strong, derive_seed(cfg.seed, 1));
  GenerationContext weak(model, params.weak, derive_seed(cfg.seed, 3));
  Rng sampler(derive_seed(cfg.seed, 2));
  StepOutput s_out = prefill(strong, prompt);
  StepOutput w_out = prefill(weak, prompt);

  return run_loop(
      cfg, started,
      [&](StepDiagnostics& diag) {
        const LogitVector z = contrast_logits(s_out.logits, w_out.logits, params.beta, params.alpha);
        diag.strong_max = max_unmasked(s_out.logits);
        diag.weak_max = max_unmasked(w_out.logits);
        diag.n_valid = static_cast<std::size_t>(
            std::count_if(z.begin(), z.end(), [](double v) { return !is_masked(v); }));
        if (cfg.record_logits) diag.strong_logits = s_out.logits;
        if (params.sample) return static_cast<int>(sampler.categorical(softmax(z)));
        return static_cast<int>(argmax(z));
      },
      [&](int token) {
        s_out = strong.forward_one(token);
        w_out = weak.forward_one(token);
      });
}

GenerationResult contrastive_decoding_generate(const Model& strong_model, const Model& amateur,
                                               std::span<const int> prompt, double beta,
                                               double alpha, const DecodeConfig& cfg) {
  if (strong_model.config().vocab_size != amateur.config().vocab_size) {
    throw Error(Errc::kInvalidArgument, "contrastive decoding: vocabulary size mismatch (" +
                                            std::to_string(strong_model.config().vocab_size) +
                                            " vs " + std::to_string(amateur.config().vocab_size) + ")");
  }
  check_common(strong_model, prompt, cfg);
  check_common(amateur, prompt, cfg);
  check_alpha(alpha);
  if (!(beta >= 0.0)) throw Error(Errc::kInvalidArgument, "beta must be non-negative");

  const auto started = Clock::now();
  GenerationContext expert(strong_model, cfg.routing, derive_seed(cfg.seed, 1));
  GenerationContext amateur_ctx(amateur, default_routing(amateur.config()), derive_seed(cfg.seed, 3));
  StepOutput e_out = prefill(expert, prompt);
  StepOutput a_out = prefill(amateur_ctx, prompt);

  return run_loop(
      cfg, started,
      [&](StepDiagnostics& diag) {
        const LogitVector z = contrast_logits(e_out.logits, a_out.logits, beta, alpha);
        diag.strong_max = max_unmasked(e_out.logits);
        diag.weak_max = max_unmasked(a_out.logits);
        diag.n_valid = static_cast<std::size_t>(
            std::count_if(z.begin(), z.end(), [](double v) { return !is_masked(v); }));
        if (cfg.record_logits) diag.strong_logits = e_out.logits;
        return static_cast<int>(argmax(z));
      },
      [&](int token) {
        e_out = expert.forward_one(token);
        a_out = amateur_ctx.forward_one(token);
      });
}

std::vector<int> dola_bucket_layers(int n_layers, bool high) {
  const int mid = n_layers / 2;
  const int lo = high ? mid : 0;
  const int hi = high ? n_layers : mid;
  std::vector<int> layers;
  for (int l = lo; l < hi; ++l) {
    if (l % 2 == 0) layers.push_back(l);
  }
  return layers;
}

std::vector<int> resolve_premature_layers(const Dola& dola, int n_layers) {
  switch (dola.bucket) {
    case Dola::Bucket::kLow: return dola_bucket_layers(n_layers, false);
    case Dola::Bucket::kHigh: return dola_bucket_layers(n_layers, true);
    case Dola::Bucket::kExplicit: return dola.layers;
  }
  return {};
}

std::size_t select_premature_layer(std::span<const double> final_dist,
                                   std::span<const ProbVector> candidates) {
  if (candidates.empty()) throw Error(Errc::kInvalidArgument, "empty premature layer set");
  std::size_t best = 0;
  double best_jsd = -1.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const double d = js_divergence(final_dist, candidates[i]);
    if (d > best_jsd) {
      best_jsd = d;
      best = i;
    }
  }
  return best;
}

GenerationResult dola_generate(const Model& model, std::span<const int> prompt,
                               std::span<const int> premature_layers, double alpha,
                               const DecodeConfig& cfg) {
  check_common(model, prompt, cfg);
  check_alpha(alpha);
  const int n_layers = model.config().n_layers;
  if (premature_layers.empty()) throw Error(Errc::kInvalidArgument, "empty premature layer set");
  for (int l : premature_layers) {
    if (l < 0 || l >= n_layers) {
      throw Error(Errc::kInvalidArgument, "premature layer " + std::to_string(l) + " out of range");
    }
    if (l == n_layers - 1 && premature_layers.size() > 1) {
      throw Error(Errc::kInvalidArgument,
                  "the final layer may only be a premature candidate on its own");
    }
  }

  const ForwardOptions keep{.keep_hidden_by_layer = true};
  const auto started = Clock::now();
  GenerationContext ctx(model, cfg.routing, derive_seed(cfg.seed, 1));
  StepOutput out = prefill(ctx, prompt, keep);

  return run_loop(
      cfg, started,
      [&](StepDiagnostics& diag) {
        const ProbVector p_final = softmax(out.logits);
        std::vector<LogitVector> early;
        std::vector<ProbVector> dists;
        for (int l : premature_layers) {
          early.push_back(early_exit_logits(model, out.hidden_by_layer[static_cast<std::size_t>(l)], l));
          dists.push_back(softmax(early.back()));
        }
        const std::size_t pick = select_premature_layer(p_final, dists);
        const LogitVector log_final = log_softmax(out.logits);
        const LogitVector log_prem = log_softmax(early[pick]);
        LogitVector scores(out.logits.size(), kMaskedLogit);
        const auto valid = plausibility_mask(out.logits, alpha);
        for (std::size_t i : valid) scores[i] = log_final[i] - log_prem[i];
        diag.strong_max = max_unmasked(out.logits);
        diag.weak_max = max_unmasked(early[pick]);
        diag.n_valid = valid.size();
        diag.premature_layer = premature_layers[pick];
        if (cfg.record_logits) diag.strong_logits = out.logits;
        return static_cast<int>(argmax(scores));
      },
      [&](int token) { out = ctx.forward_one(token, keep); });
}

double contrastive_search_score(double prob, double max_cos, double penalty) {
  return (1.0 - penalty) * prob - penalty * max_cos;
}

GenerationResult contrastive_search_generate(const Model& model, std::span<const int> prompt,
                                             int top_k, double penalty,
                                             const DecodeConfig& cfg) {
  check_common(model, prompt, cfg);
  if (top_k < 1 || top_k > model.config().vocab_size) {
    throw Error(Errc::kInvalidArgument, "contrastive search: top_k outside [1, vocab_size]");
  }
  if (!(penalty >= 0.0 && penalty <= 1.0)) {
    throw Error(Errc::kInvalidArgument, "contrastive search: penalty outside [0, 1]");
  }

  const auto started = Clock::now();
  GenerationContext ctx(model, cfg.routing, derive_seed(cfg.seed, 1));
  std::vector<std::vector<float>> context_hidden;
  StepOutput out;
  for (int t : prompt) {
    out = ctx.forward_one(t);
    context_hidden.push_back(out.hidden_final);
  }
  const bool look_ahead = penalty > 0.0 && top_k > 1;

  return run_loop(
      cfg, started,
      [&](StepDiagnostics& diag) {
        const ProbVector probs = softmax(out.logits);
        const auto ranked = ranked_indices(probs);
        diag.strong_max = max_unmasked(out.logits);
        diag.n_valid = static_cast<std::size_t>(top_k);
        if (cfg.record_logits) diag.strong_logits = out.logits;
        if (!look_ahead) return static_cast<int>(ranked.front());

        const std::size_t base = ctx.length();
        std::size_t best = ranked.front();
        double best_score = 0.0;
        for (int c = 0; c < top_k; ++c) {
          const std::size_t cand = ranked[static_cast<std::size_t>(c)];
          const StepOutput probe = ctx.forward_one(static_cast<int>(cand));
          ctx.truncate(base);
          double max_cos = -1.0;
          for (const auto& h : context_hidden) {
            max_cos = std::max(max_cos, cosine_similarity(probe.hidden_final, h));
          }
          const double score = contrastive_search_score(probs[cand], max_cos, penalty);
          if (c == 0 || score > best_score) {
            best_score = score;
            best = cand;
          }
        }
        return static_cast<int>(best);
      },
      [&](int token) {
        out = ctx.forward_one(token);
        context_hidden.push_back(out.hidden_final);
      });
}

GenerationResult generate(const Model& model, std::span<const int> prompt,
                          const DecodeConfig& cfg, const Model* amateur) {
  return std::visit(
      [&](const auto& d) -> GenerationResult {
        using T = std::decay_t<decltype(d)>;
        if constexpr (std::is_same_v<T, Greedy> || std::is_same_v<T, Sample>) {
          return baseline_generate(model, prompt, cfg);
        } else if constexpr (std::is_same_v<T, Scmoe>) {
          return scmoe_generate(model, prompt, d, cfg);
        } else if constexpr (std::is_same_v<T, ContrastiveDecoding>) {
          if (amateur == nullptr) {
            throw Error(Errc::kInvalidArgument, "contrastive decoding needs an amateur model");
          }
          return contrastive_decoding_generate(model, *amateur, prompt, d.beta, d.alpha, cfg);
        } else if constexpr (std::is_same_v<T, Dola>) {
          const auto layers = resolve_premature_layers(d, model.config().n_layers);
          return dola_generate(model, prompt, layers, d.alpha, cfg);
        } else {
          return contrastive_search_generate(model, prompt, d.top_k, d.penalty, cfg);
        }
      },
      cfg.decoder);
}

// ---------------------------------------------------------------------------
// Self-consistency

VoteResult majority_vote(std::span<const std::optional<std::string>> answers) {
  VoteResult result;
  result.extracted.assign(answers.begin(), answers.end());
  for (const auto& a : answers) {
    if (!a) continue;
    auto it = std::find_if(result.tally.begin(), result.tally.end(),
                           [&](const auto& entry) { return entry.first == *a; });
    if (it == result.tally.end()) {
      result.tally.emplace_back(*a, 1);
    } else {
      ++it->second;
    }
  }
  if (result.tally.empty()) throw Error(Errc::kNoVotableAnswers, "no votable answers");
  // Tally is in first-appearance order, so the first maximum wins ties.
  auto best = result.tally.begin();
  for (auto it = result.tally.begin(); it != result.tally.end(); ++it) {
    if (it->second > best->second) best = it;
  }
  result.answer = best->first;
  result.count = best->second;
  return result;
}

VoteResult self_consistency(const std::function<std::string(std::uint64_t)>& generate_fn, int n,
                            std::uint64_t seed, const AnswerExtractor& extractor, int jobs) {
  if (n < 1) throw Error(Errc::kInvalidArgument, "self-consistency needs at least one sample");
  std::vector<std::optional<std::string>> answers(static_cast<std::size_t>(n));
  auto run = [&](std::size_t i) { answers[i] = extractor(generate_fn(seed + i)); };

  parallel_for(answers.size(), jobs, run);
  return majority_vote(answers);
}

std::optional<std::string> extract_numeric_answer(std::string_view text) {
  static const std::regex number(R"(-?[0-9][0-9,]*(\.[0-9]+)?)");
  std::optional<std::string> last;
  const std::string s(text);
  for (auto it = std::sregex_iterator(s.begin(), s.end(), number); it != std::sregex_iterator(); ++it) {
    last = it->str();
  }
  if (!last) return std::nullopt;
  std::string out;
  for (char c : *last) {
    if (c != ',') out.push_back(c);
  }
  while (!out.empty() && out.back() == '.') out.pop_back();
  if (out.empty() || out == "-") return std::nullopt;
  return out;
}

// ---------------------------------------------------------------------------
// Compact specs

DecodeConfig parse_decoder_spec(std::string_view spec) {
  DecodeConfig cfg;
  const auto colon = spec.find(':');
  const std::string_view name = spec.substr(0, colon);
  const std::string_view arg = colon == std::string_view::npos ? std::string_view{} : spec.substr(colon + 1);
  auto need_arg = [&] {
    if (arg.empty()) {
      throw Error(Errc::kInvalidArgument, "decoder spec '" + std::string(spec) + "' needs an argument");
    }
  };

  if (name == "greedy") {
    if (!arg.empty()) cfg.routing = parse_routing(arg);
  } else if (name == "ensemble") {
    need_arg();
    cfg.routing = is_number(arg) ? RoutingStrategy::top_k(static_cast<int>(parse_number(arg, spec)))
                                 : parse_routing(arg);
  } else if (name == "dyn") {
    need_arg();
    cfg.routing = parse_routing(spec);
  } else if (name == "route") {
    need_arg();
    cfg.routing = parse_routing(arg);
  } else if (name == "sample") {
    Sample s;
    if (!arg.empty()) s.temperature = parse_number(arg, spec);
    cfg.decoder = s;
  } else if (name == "scmoe" || name == "scmoe-sample") {
    need_arg();
    const auto parts = split(arg, '/');
    if (parts.size() < 3 || parts.size() > 4) {
      throw Error(Errc::kInvalidArgument,
                  "scmoe spec must be <strong>/<weak>/<beta>[/<alpha>]: '" + std::string(spec) + "'");
    }
    Scmoe s;
    s.strong = parse_routing(parts[0]);
    s.weak = parse_routing(parts[1]);
    s.beta = parse_number(parts[2], spec);
    if (parts.size() == 4) s.alpha = parse_number(parts[3], spec);
    s.sample = name == "scmoe-sample";
    cfg.routing = s.strong;
    cfg.decoder = s;
  } else if (name == "cd") {
    need_arg();
    auto parts = split(arg, '/');
    ContrastiveDecoding c;
    if (parts.size() >= 3 && is_number(parts.back()) && is_number(parts[parts.size() - 2])) {
      c.alpha = parse_number(parts.back(), spec);
      parts.pop_back();
    }
    if (parts.size() < 2 || !is_number(parts.back())) {
      throw Error(Errc::kInvalidArgument, "cd spec must be <path>/<beta>[/<alpha>]: '" + std::string(spec) + "'");
    }
    c.beta = parse_number(parts.back(), spec);
    parts.pop_back();
    std::string path;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      if (i) path += '/';
      path += parts[i];
    }
    c.amateur_checkpoint = path;
    cfg.decoder = c;
  } else if (name == "dola") {
    need_arg();
    const auto parts = split(arg, '/');
    Dola d;
    if (parts[0] == "low") {
      d.bucket = Dola::Bucket::kLow;
    } else if (parts[0] == "high") {
      d.bucket = Dola::Bucket::kHigh;
    } else {
      d.bucket = Dola::Bucket::kExplicit;
      for (auto l : split(parts[0], ';')) d.layers.push_back(static_cast<int>(parse_number(l, spec)));
    }
    if (parts.size() > 1) d.alpha = parse_number(parts[1], spec);
    cfg.decoder = d;
  } else if (name == "cs") {
    need_arg();
    const auto parts = split(arg, '/');
    ContrastiveSearch c;
    c.penalty = parse_number(parts[0], spec);
    if (parts.size() > 1) c.top_k = static_cast<int>(parse_number(parts[1], spec));
    cfg.decoder = c;
  } else {
    throw Error(Errc::kInvalidArgument, "unknown decoder '" + std::string(name) + "'");
  }
  return cfg;
}

std::string decoder_label(const DecodeConfig& cfg) {
  return std::visit(
      [&](const auto& d) -> std::string {
        using T = std::decay_t<decltype(d)>;
        if constexpr (std::is_same_v<T, Greedy>) {
          return "greedy[" + cfg.routing.to_string() + "]";
        } else if constexpr (std::is_same_v<T, Sample>) {
          return "sample:" + format_number(d.temperature) + "[" + cfg.routing.to_string() + "]";
        } else if constexpr (std::is_same_v<T, Scmoe>) {
          return std::string(d.sample ? "scmoe-sample:" : "scmoe:") + d.strong.to_string() + "/" +
                 d.weak.to_string() + "/" + format_number(d.beta) + "/" + format_number(d.alpha);
        } else if constexpr (std::is_same_v<T, ContrastiveDecoding>) {
          return "cd:" + d.amateur_checkpoint + "/" + format_number(d.beta) + "/" + format_number(d.alpha);
        } else if constexpr (std::is_same_v<T, Dola>) {
          std::string layers;
          if (d.bucket == Dola::Bucket::kLow) {
            layers = "low";
          } else if (d.bucket == Dola::Bucket::kHigh) {
            layers = "high";
          } else {
            for (std::size_t i = 0; i < d.layers.size(); ++i) {
              if (i) layers += ';';
              layers += std::to_string(d.layers[i]);
            }
          }
          return "dola:" + layers + "/" + format_number(d.alpha);
        } else {
          return "cs:" + format_number(d.penalty) + "/" + std::to_string(d.top_k);
        }
      },
      cfg.decoder);
}

}  // namespace scmoe
