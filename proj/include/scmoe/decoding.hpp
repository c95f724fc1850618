// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "scmoe/core_math.hpp"
#include "scmoe/model.hpp"
#include "scmoe/model_io.hpp"
#include "scmoe/routing.hpp"

namespace scmoe {

// Decoder parameter sets. Defaults follow the usual grids: alpha 0.1 for the
// plausibility mask, beta 0.5, sampling temperature 0.7, penalty 0.6.

struct Greedy {};

struct Sample {
  double temperature = 0.7;
};

/// Self-contrast between two routings of the same model.
struct Scmoe {
  RoutingStrategy strong = RoutingStrategy::top_k(2);
  RoutingStrategy weak = RoutingStrategy::rank_k(2);
  double beta = 0.5;
  double alpha = 0.1;
  /// Draw from softmax(z_sc) over the plausible set instead of taking argmax.
  bool sample = false;
};

/// Contrast against a separate amateur checkpoint, same logit form as Scmoe.
struct ContrastiveDecoding {
  std::string amateur_checkpoint;
  double beta = 0.5;
  double alpha = 0.1;
};

struct Dola {
  enum class Bucket { kExplicit, kLow, kHigh };
  Bucket bucket = Bucket::kLow;
  std::vector<int> layers;  // used when bucket == kExplicit
  double alpha = 0.1;
};

struct ContrastiveSearch {
  int top_k = 5;
  double penalty = 0.6;
};

using Decoder = std::variant<Greedy, Sample, Scmoe, ContrastiveDecoding, Dola, ContrastiveSearch>;

struct DecodeConfig {
  Decoder decoder = Greedy{};
  /// Routing for single-pass decoders (everything except Scmoe).
  RoutingStrategy routing = RoutingStrategy::top_k(2);
  int max_new_tokens = 256;
  std::optional<int> stop_token = kEos;
  /// Emit exactly max_new_tokens even if the stop token comes up.
  bool ignore_stop = false;
  std::uint64_t seed = 0;
  /// Keep the full strong-pass logits of every step in the diagnostics.
  bool record_logits = false;
};

struct StepDiagnostics {
  int token = 0;
  std::optional<double> strong_max;
  std::optional<double> weak_max;
  std::size_t n_valid = 0;
  std::optional<int> premature_layer;
  std::int64_t ns = 0;
  std::vector<double> strong_logits;  // only with record_logits
};

struct GenerationResult {
  std::vector<int> tokens;
  std::string text;
  std::vector<StepDiagnostics> steps;
  std::int64_t total_ns = 0;
};

// ---------------------------------------------------------------------------
// Logit arithmetic

/// { i : z_i >= ln(alpha) + max_j z_j }, ascending. Always holds the argmax.
std::vector<std::size_t> plausibility_mask(std::span<const double> z, double alpha);

/// (1+beta) z_strong - beta z_weak on the plausible set of z_strong; masked
/// elsewhere.
LogitVector contrast_logits(std::span<const double> z_strong, std::span<const double> z_weak,
                            double beta, double alpha);

// ---------------------------------------------------------------------------
// Generators. `prompt` must be non-empty (encode() always yields BOS).

GenerationResult baseline_generate(const Model& model, std::span<const int> prompt,
                                   const DecodeConfig& cfg);

GenerationResult scmoe_generate(const Model& model, std::span<const int> prompt,
                                const Scmoe& params, const DecodeConfig& cfg);

GenerationResult contrastive_decoding_generate(const Model& strong, const Model& amateur,
                                               std::span<const int> prompt, double beta,
                                               double alpha, const DecodeConfig& cfg);

GenerationResult dola_generate(const Model& model, std::span<const int> prompt,
                               std::span<const int> premature_layers, double alpha,
                               const DecodeConfig& cfg);

GenerationResult contrastive_search_generate(const Model& model, std::span<const int> prompt,
                                             int top_k, double penalty,
                                             const DecodeConfig& cfg);

/// Dispatches on cfg.decoder. Contrastive decoding needs `amateur`.
GenerationResult generate(const Model& model, std::span<const int> prompt,
                          const DecodeConfig& cfg, const Model* amateur = nullptr);

/// Even-numbered layers of [0, n/2) (low) or [n/2, n) (high).
std::vector<int> dola_bucket_layers(int n_layers, bool high);
std::vector<int> resolve_premature_layers(const Dola& dola, int n_layers);

/// Index of the candidate distribution with the largest JS divergence from
/// `final_dist`; the first one wins ties.
std::size_t select_premature_layer(std::span<const double> final_dist,
                                   std::span<const ProbVector> candidates);

/// (1 - penalty) * prob - penalty * max_cos.
double contrastive_search_score(double prob, double max_cos, double penalty);

/// Routing used when a model runs "as shipped": top-2, or top-1 when only one
/// routed expert exists.
RoutingStrategy default_routing(const ModelConfig& config);

// ---------------------------------------------------------------------------
// Self-consistency

using AnswerExtractor = std::function<std::optional<std::string>(const std::string&)>;

struct VoteResult {
  std::string answer;
  int count = 0;
  /// Distinct answers in order of first appearance with their counts.
  std::vector<std::pair<std::string, int>> tally;
  /// Extraction per sample, in sample order.
  std::vector<std::optional<std::string>> extracted;
};

/// Modal answer; ties go to the answer seen first. Throws
/// Errc::kNoVotableAnswers when nothing was extracted.
VoteResult majority_vote(std::span<const std::optional<std::string>> answers);

/// Runs `generate(seed + i)` for i in [0, n), possibly on `jobs` threads, and
/// votes over the extracted answers in sample order.
VoteResult self_consistency(const std::function<std::string(std::uint64_t)>& generate, int n,
                            std::uint64_t seed, const AnswerExtractor& extractor,
                            int jobs = 1);

/// Last decimal number in the text, thousands separators and trailing period
/// removed.
std::optional<std::string> extract_numeric_answer(std::string_view text);

// ---------------------------------------------------------------------------
// Compact decoder specs used by the CLI (`compare --methods`, `vote --decoder`):
//   greedy | ensemble:top:K | dyn:T | route:<routing> | sample:T
//   scmoe:<strong>/<weak>/<beta>[/<alpha>] | scmoe-sample:<strong>/<weak>/<beta>[/<alpha>]
//   cd:<path>/<beta>[/<alpha>] | dola:low|high|<l;l;...>[/<alpha>] | cs:<penalty>[/<top_k>]

DecodeConfig parse_decoder_spec(std::string_view spec);
std::string decoder_label(const DecodeConfig& cfg);

}  // namespace scmoe
