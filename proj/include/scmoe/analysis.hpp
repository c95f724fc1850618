// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "scmoe/decoding.hpp"
#include "scmoe/model.hpp"
#include "scmoe/model_io.hpp"
#include "scmoe/routing.hpp"

namespace scmoe {

enum class KlDirection { kStrongWeak, kWeakStrong };

/// Per-position divergence between a strong routing and each weak routing,
/// in nats. matrix[position][column].
struct KldHeatmap {
  std::vector<std::string> positions;
  std::vector<std::string> columns;
  std::vector<std::vector<double>> matrix;
};

/// Next-token distributions at every position of `tokens` under `strategy`.
/// Entry t is p(. | tokens[0..t]).
std::vector<ProbVector> teacher_forced_distributions(const Model& model,
                                                     std::span<const int> tokens,
                                                     const RoutingStrategy& strategy,
                                                     std::uint64_t seed);

/// Teacher-forces prompt + reference once per strategy; row t compares the
/// distributions that predict reference[t].
KldHeatmap kld_heatmap(const Model& model, std::span<const int> prompt,
                       std::span<const int> reference, const RoutingStrategy& strong,
                       std::span<const RoutingStrategy> weak_list,
                       KlDirection direction = KlDirection::kStrongWeak,
                       std::uint64_t seed = 0);

// ---------------------------------------------------------------------------
// Token classes

enum TokenClass : std::uint8_t {
  kClassAll = 0,
  kClassExpression = 1,
  kClassStopword = 2,
};
inline constexpr std::array<std::string_view, 3> kTokenClassNames = {"All", "Expression",
                                                                     "Stopword"};

struct TokenClasses {
  bool expression = false;
  bool stopword = false;
};

/// Pattern for arithmetic expressions in reference answers.
inline constexpr std::string_view kExpressionPattern =
    R"([0-9][0-9,.]*([-+*/=][0-9][0-9,.]*)+|[0-9][0-9,.]*([-+*/][0-9][0-9,.]*)*=)";

using StopwordList = std::unordered_set<std::string>;

/// One lowercase word per line; blank lines and '#' comments ignored.
StopwordList load_stopwords(const std::filesystem::path& path);
StopwordList parse_stopwords(std::string_view text);

/// [begin, end) byte spans of expression matches in `text`.
std::vector<std::pair<std::size_t, std::size_t>> expression_spans(std::string_view text);

/// Classifies tokens whose concatenation is the reference text. Expression:
/// the token overlaps an expression match. Stopword: the token overlaps at
/// least one word (letters and apostrophes) and every overlapped word is in
/// the list, compared case-insensitively.
std::vector<TokenClasses> classify_tokens(std::span<const std::string> tokens,
                                          const StopwordList& stopwords);

struct ClassCell {
  double sum = 0.0;
  std::size_t count = 0;
  [[nodiscard]] std::optional<double> mean() const {
    if (count == 0) return std::nullopt;
    return sum / static_cast<double>(count);
  }
};

struct TokenClassReport {
  std::vector<std::string> strategies;
  /// cells[class][strategy]
  std::array<std::vector<ClassCell>, 3> cells;
};

/// Mean per-token divergence per class and weak strategy over a corpus.
/// Per-example partial sums are merged in corpus order, so the result does
/// not depend on `jobs`.
TokenClassReport kld_aggregate(const Model& model, std::span<const CorpusEntry> corpus,
                               const RoutingStrategy& strong,
                               std::span<const RoutingStrategy> weak_list,
                               const StopwordList& stopwords,
                               KlDirection direction = KlDirection::kStrongWeak,
                               std::uint64_t seed = 0, int jobs = 1,
                               std::vector<KldHeatmap>* heatmaps = nullptr);

/// Byte tokens of the reference (no BOS) and their labels.
std::vector<int> reference_tokens(std::string_view reference);

// ---------------------------------------------------------------------------
// Unchosen-expert utilization

struct LayerUtilization {
  std::size_t slots = 0;
  std::size_t unchosen_hits = 0;
};

struct UtilizationReport {
  std::size_t total_slots = 0;
  std::size_t unchosen_hits = 0;
  double ratio = 0.0;
  std::vector<LayerUtilization> per_layer;

  void merge(const UtilizationReport& other);
};

/// Teacher-forces `tokens` under both routings on independent trajectories and
/// counts (MoE layer, position) slots where the weak pass's routed expert is
/// outside the strong pass's selection.
UtilizationReport expert_utilization(const Model& model, std::span<const int> tokens,
                                     const RoutingStrategy& strong, const RoutingStrategy& weak,
                                     std::uint64_t seed = 0);

// ---------------------------------------------------------------------------
// Latency

struct LatencyCase {
  std::string label;
  DecodeConfig config;
};

struct LatencyRow {
  std::string label;
  double mean_ns_per_token = 0.0;
  double ratio = 0.0;
  std::size_t tokens = 0;
};

/// Times each case generating exactly `gen_len` tokens after a `prompt_len`
/// prompt. One warm-up run per case is discarded; each case reports the
/// median over `repetitions` runs, interleaved across cases. The ratio is
/// relative to the first Greedy case, or to an extra greedy top-2 run when
/// the list has none.
std::vector<LatencyRow> latency_bench(const Model& model, std::span<const LatencyCase> cases,
                                      int prompt_len, int gen_len, int repetitions,
                                      std::uint64_t seed = 0, const Model* amateur = nullptr);

/// Deterministic prompt of `length` tokens: BOS followed by printable bytes.
std::vector<int> synthetic_prompt(int length, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Output formats

std::string csv_escape(std::string_view field);

/// example,position,token,k,kld_nats (raw nats). Control and non-ASCII bytes
/// in the token column are written as escapes.
void write_heatmap_csv(std::ostream& os, const KldHeatmap& heatmap, bool header = true,
                       std::string_view example_id = {});
/// class,strategy,mean_kld,count; empty mean when count is 0.
void write_report_csv(std::ostream& os, const TokenClassReport& report);
std::string utilization_json(const UtilizationReport& report, std::string_view strong,
                             std::string_view weak);
/// method,mean_ns_per_token,ratio_vs_greedy,tokens
void write_latency_csv(std::ostream& os, std::span<const LatencyRow> rows);
/// Heatmap as a fixed-width table with values multiplied by `scale`.
void render_heatmap(std::ostream& os, const KldHeatmap& heatmap, double scale);

}  // namespace scmoe
