// SPDX-License-Identifier: Apache-2.0
#include "scmoe/analysis.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <ostream>
#include <regex>

#include "json.hpp"
#include "scmoe/error.hpp"
#include "scmoe/parallel.hpp"

namespace scmoe {
namespace {

using Clock = std::chrono::steady_clock;

double directed_kl(const ProbVector& strong, const ProbVector& weak, KlDirection direction) {
  return direction == KlDirection::kStrongWeak ? kl_divergence(strong, weak)
                                               : kl_divergence(weak, strong);
}

std::string printable_token(int id) {
  if (id >= 0x20 && id < 0x7f) return std::string(1, static_cast<char>(id));
  if (id == '\n') return "\\n";
  if (id == '\t') return "\\t";
  if (id >= 0 && id < 256) {
    char buf[8];
    std::snprintf(buf, sizeof buf, "\\x%02x", id);
    return buf;
  }
  return token_label(id);
}

bool is_word_char(unsigned char c) { return std::isalpha(c) != 0 || c == '\''; }

}  // namespace

std::vector<ProbVector> teacher_forced_distributions(const Model& model,
                                                     std::span<const int> tokens,
                                                     const RoutingStrategy& strategy,
                                                     std::uint64_t seed) {
  GenerationContext ctx(model, strategy, seed);
  std::vector<ProbVector> out;
  out.reserve(tokens.size());
  for (int t : tokens) out.push_back(softmax(ctx.forward_one(t).logits));
  return out;
}

KldHeatmap kld_heatmap(const Model& model, std::span<const int> prompt,
                       std::span<const int> reference, const RoutingStrategy& strong,
                       std::span<const RoutingStrategy> weak_list, KlDirection direction,
                       std::uint64_t seed) {
  if (prompt.empty()) throw Error(Errc::kInvalidArgument, "kld_heatmap: empty prompt");
  if (reference.empty()) throw Error(Errc::kInvalidArgument, "kld_heatmap: empty reference");
  // The last reference token is only ever predicted, never fed.
  std::vector<int> fed(prompt.begin(), prompt.end());
  fed.insert(fed.end(), reference.begin(), reference.end() - 1);
  const std::size_t first = prompt.size() - 1;

  const auto strong_dists = teacher_forced_distributions(model, fed, strong, derive_seed(seed, 1));
  KldHeatmap hm;
  for (int t : reference) hm.positions.push_back(printable_token(t));
  for (const auto& w : weak_list) hm.columns.push_back(w.to_string());
  hm.matrix.assign(reference.size(), std::vector<double>(weak_list.size(), 0.0));
  for (std::size_t c = 0; c < weak_list.size(); ++c) {
    const auto weak_dists = teacher_forced_distributions(model, fed, weak_list[c], derive_seed(seed, 3));
    for (std::size_t t = 0; t < reference.size(); ++t) {
      hm.matrix[t][c] = directed_kl(strong_dists[first + t], weak_dists[first + t], direction);
    }
  }
  return hm;
}

// ---------------------------------------------------------------------------

StopwordList parse_stopwords(std::string_view text) {
  StopwordList out;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string word(text.substr(start, end - start));
    start = end + 1;
    while (!word.empty() && std::isspace(static_cast<unsigned char>(word.back()))) word.pop_back();
    std::size_t lead = 0;
    while (lead < word.size() && std::isspace(static_cast<unsigned char>(word[lead]))) ++lead;
    word.erase(0, lead);
    if (word.empty() || word.front() == '#') continue;
    std::transform(word.begin(), word.end(), word.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    out.insert(std::move(word));
  }
  return out;
}

StopwordList load_stopwords(const std::filesystem::path& path) {
  return parse_stopwords(read_text_file(path));
}

std::vector<std::pair<std::size_t, std::size_t>> expression_spans(std::string_view text) {
  static const std::regex pattern{std::string(kExpressionPattern)};
  std::vector<std::pair<std::size_t, std::size_t>> spans;
  const std::string s(text);
  for (auto it = std::sregex_iterator(s.begin(), s.end(), pattern); it != std::sregex_iterator(); ++it) {
    const auto begin = static_cast<std::size_t>(it->position());
    spans.emplace_back(begin, begin + static_cast<std::size_t>(it->length()));
  }
  return spans;
}

std::vector<TokenClasses> classify_tokens(std::span<const std::string> tokens,
                                          const StopwordList& stopwords) {
  std::string text;
  std::vector<std::pair<std::size_t, std::size_t>> token_spans;
  for (const auto& t : tokens) {
    token_spans.emplace_back(text.size(), text.size() + t.size());
    text += t;
  }

  // Words and whether each is a stopword.
  struct Word {
    std::size_t begin, end;
    bool stop;
  };
  std::vector<Word> words;
  for (std::size_t i = 0; i < text.size();) {
    if (!is_word_char(static_cast<unsigned char>(text[i]))) {
      ++i;
      continue;
    }
    std::size_t j = i;
    std::string lower;
    while (j < text.size() && is_word_char(static_cast<unsigned char>(text[j]))) {
      lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(text[j]))));
      ++j;
    }
    words.push_back({i, j, stopwords.contains(lower)});
    i = j;
  }
  const auto expressions = expression_spans(text);

  auto overlaps = [](std::size_t a0, std::size_t a1, std::size_t b0, std::size_t b1) {
    return a0 < b1 && b0 < a1;
  };
  std::vector<TokenClasses> out(tokens.size());
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const auto [b, e] = token_spans[t];
    for (const auto& [x0, x1] : expressions) {
      if (overlaps(b, e, x0, x1)) {
        out[t].expression = true;
        break;
      }
    }
    bool any_word = false;
    bool all_stop = true;
    for (const Word& w : words) {
      if (!overlaps(b, e, w.begin, w.end)) continue;
      any_word = true;
      all_stop = all_stop && w.stop;
    }
    out[t].stopword = any_word && all_stop;
  }
  return out;
}

std::vector<int> reference_tokens(std::string_view reference) {
  std::vector<int> ids = encode(reference);
  ids.erase(ids.begin());
  return ids;
}

TokenClassReport kld_aggregate(const Model& model, std::span<const CorpusEntry> corpus,
                               const RoutingStrategy& strong,
                               std::span<const RoutingStrategy> weak_list,
                               const StopwordList& stopwords, KlDirection direction,
                               std::uint64_t seed, int jobs, std::vector<KldHeatmap>* heatmaps) {
  TokenClassReport report;
  for (const auto& w : weak_list) report.strategies.push_back(w.to_string());
  for (auto& row : report.cells) row.assign(weak_list.size(), ClassCell{});

  struct Partial {
    KldHeatmap heatmap;
    std::vector<TokenClasses> classes;
  };
  std::vector<Partial> partials(corpus.size());
  parallel_for(corpus.size(), jobs, [&](std::size_t i) {
    const CorpusEntry& e = corpus[i];
    const auto ref = reference_tokens(e.reference);
    partials[i].heatmap = kld_heatmap(model, encode(e.prompt), ref, strong, weak_list, direction, seed);
    std::vector<std::string> token_text;
    for (int id : ref) token_text.push_back(decode(std::span<const int>(&id, 1)));
    partials[i].classes = classify_tokens(token_text, stopwords);
  });

  for (auto& p : partials) {
    for (std::size_t t = 0; t < p.heatmap.matrix.size(); ++t) {
      const TokenClasses& cls = p.classes[t];
      for (std::size_t c = 0; c < weak_list.size(); ++c) {
        const double v = p.heatmap.matrix[t][c];
        auto add = [&](TokenClass k) {
          report.cells[k][c].sum += v;
          ++report.cells[k][c].count;
        };
        add(kClassAll);
        if (cls.expression) add(kClassExpression);
        if (cls.stopword) add(kClassStopword);
      }
    }
    if (heatmaps) heatmaps->push_back(std::move(p.heatmap));
  }
  return report;
}

// ---------------------------------------------------------------------------

void UtilizationReport::merge(const UtilizationReport& other) {
  total_slots += other.total_slots;
  unchosen_hits += other.unchosen_hits;
  if (per_layer.size() < other.per_layer.size()) per_layer.resize(other.per_layer.size());
  for (std::size_t l = 0; l < other.per_layer.size(); ++l) {
    per_layer[l].slots += other.per_layer[l].slots;
    per_layer[l].unchosen_hits += other.per_layer[l].unchosen_hits;
  }
  ratio = total_slots ? static_cast<double>(unchosen_hits) / static_cast<double>(total_slots) : 0.0;
}

UtilizationReport expert_utilization(const Model& model, std::span<const int> tokens,
                                     const RoutingStrategy& strong, const RoutingStrategy& weak,
                                     std::uint64_t seed) {
  if (weak.fixed_routed_count() != 1) {
    throw Error(Errc::kInvalidArgument, "utilization defined for single-expert weak routing");
  }
  GenerationContext strong_ctx(model, strong, derive_seed(seed, 1));
  GenerationContext weak_ctx(model, weak, derive_seed(seed, 3));
  UtilizationReport report;
  report.per_layer.resize(static_cast<std::size_t>(model.config().n_layers));
  for (int t : tokens) {
    const StepOutput s = strong_ctx.forward_one(t);
    const StepOutput w = weak_ctx.forward_one(t);
    for (std::size_t l = 0; l < s.layer_records.size(); ++l) {
      if (!s.layer_records[l].moe) continue;
      const auto weak_routed = w.layer_records[l].selection.routed();
      if (weak_routed.size() != 1) {
        throw Error(Errc::kInvalidArgument, "utilization defined for single-expert weak routing");
      }
      const auto strong_routed = s.layer_records[l].selection.routed();
      const bool unchosen =
          std::find(strong_routed.begin(), strong_routed.end(), weak_routed[0]) == strong_routed.end();
      ++report.per_layer[l].slots;
      ++report.total_slots;
      if (unchosen) {
        ++report.per_layer[l].unchosen_hits;
        ++report.unchosen_hits;
      }
    }
  }
  report.ratio = report.total_slots
                     ? static_cast<double>(report.unchosen_hits) / static_cast<double>(report.total_slots)
                     : 0.0;
  return report;
}

// ---------------------------------------------------------------------------

std::vector<int> synthetic_prompt(int length, std::uint64_t seed) {
  if (length < 1) throw Error(Errc::kInvalidArgument, "prompt length must be positive");
  Rng rng(derive_seed(seed, 11));
  std::vector<int> out{kBos};
  while (static_cast<int>(out.size()) < length) {
    out.push_back(0x20 + static_cast<int>(rng.uniform_index(0x7f - 0x20)));
  }
  return out;
}

std::vector<LatencyRow> latency_bench(const Model& model, std::span<const LatencyCase> cases,
                                      int prompt_len, int gen_len, int repetitions,
                                      std::uint64_t seed, const Model* amateur) {
  if (gen_len < 1 || repetitions < 1) {
    throw Error(Errc::kInvalidArgument, "latency_bench: gen_len and repetitions must be positive");
  }
  if (prompt_len + gen_len > model.config().max_seq_len) {
    throw Error(Errc::kContextOverflow,
                "latency_bench: prompt_len + gen_len (" + std::to_string(prompt_len + gen_len) +
                    ") exceeds max_seq_len " + std::to_string(model.config().max_seq_len));
  }
  const std::vector<int> prompt = synthetic_prompt(prompt_len, seed);

  std::vector<LatencyCase> all(cases.begin(), cases.end());
  std::size_t baseline = all.size();
  for (std::size_t i = 0; i < all.size(); ++i) {
    if (std::holds_alternative<Greedy>(all[i].config.decoder) &&
        all[i].config.routing == default_routing(model.config())) {
      baseline = i;
      break;
    }
  }
  const bool extra_baseline = baseline == all.size();
  if (extra_baseline) {
    LatencyCase g{"greedy", DecodeConfig{}};
    g.config.routing = default_routing(model.config());
    all.push_back(g);
  }
  for (auto& c : all) {
    c.config.max_new_tokens = gen_len;
    c.config.ignore_stop = true;
    c.config.seed = seed;
  }

  auto time_once = [&](const DecodeConfig& cfg) {
    const auto t0 = Clock::now();
    const GenerationResult r = generate(model, prompt, cfg, amateur);
    const auto ns = std::chrono::duration_cast<std::chrono::nanoseconds>(Clock::now() - t0).count();
    if (static_cast<int>(r.tokens.size()) != gen_len) {
      throw Error(Errc::kInvalidArgument, "latency_bench: generation stopped early");
    }
    return static_cast<double>(ns);
  };

  for (const auto& c : all) time_once(c.config);  // warm-up
  std::vector<std::vector<double>> samples(all.size());
  for (int rep = 0; rep < repetitions; ++rep) {
    for (std::size_t i = 0; i < all.size(); ++i) samples[i].push_back(time_once(all[i].config));
  }

  std::vector<double> per_token(all.size());
  for (std::size_t i = 0; i < all.size(); ++i) {
    auto& s = samples[i];
    std::sort(s.begin(), s.end());
    const double median = s.size() % 2 ? s[s.size() / 2] : 0.5 * (s[s.size() / 2 - 1] + s[s.size() / 2]);
    per_token[i] = median / gen_len;
  }
  std::vector<LatencyRow> rows;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    rows.push_back({all[i].label, per_token[i], per_token[i] / per_token[baseline],
                    static_cast<std::size_t>(gen_len)});
  }
  return rows;
}

// ---------------------------------------------------------------------------

std::string csv_escape(std::string_view field) {
  const bool quote = field.find_first_of(",\"\n\r") != std::string_view::npos ||
                     (!field.empty() && (field.front() == ' ' || field.back() == ' '));
  if (!quote) return std::string(field);
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

namespace {

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void write_heatmap_csv(std::ostream& os, const KldHeatmap& heatmap, bool header,
                       std::string_view example_id) {
  if (header) os << "example,position,token,k,kld_nats\n";
  for (std::size_t t = 0; t < heatmap.matrix.size(); ++t) {
    for (std::size_t c = 0; c < heatmap.columns.size(); ++c) {
      os << csv_escape(example_id) << ',' << t << ',' << csv_escape(heatmap.positions[t]) << ','
         << csv_escape(heatmap.columns[c]) << ',' << format_double(heatmap.matrix[t][c]) << '\n';
    }
  }
}

void write_report_csv(std::ostream& os, const TokenClassReport& report) {
  os << "class,strategy,mean_kld,count\n";
  for (std::size_t k = 0; k < report.cells.size(); ++k) {
    for (std::size_t s = 0; s < report.strategies.size(); ++s) {
      const ClassCell& cell = report.cells[k][s];
      os << kTokenClassNames[k] << ',' << csv_escape(report.strategies[s]) << ',';
      if (auto m = cell.mean()) os << format_double(*m);
      os << ',' << cell.count << '\n';
    }
  }
}

std::string utilization_json(const UtilizationReport& report, std::string_view strong,
                             std::string_view weak) {
  nlohmann::json j;
  j["strong"] = strong;
  j["weak"] = weak;
  j["total_slots"] = report.total_slots;
  j["unchosen_hits"] = report.unchosen_hits;
  j["ratio"] = report.ratio;
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < report.per_layer.size(); ++l) {
    const auto& pl = report.per_layer[l];
    layers.push_back({{"layer", l},
                      {"slots", pl.slots},
                      {"unchosen_hits", pl.unchosen_hits},
                      {"ratio", pl.slots ? static_cast<double>(pl.unchosen_hits) / static_cast<double>(pl.slots) : 0.0}});
  }
  j["per_layer"] = layers;
  return j.dump(2);
}

void write_latency_csv(std::ostream& os, std::span<const LatencyRow> rows) {
  os << "method,mean_ns_per_token,ratio_vs_greedy,tokens\n";
  for (const auto& r : rows) {
    char ratio[32];
    std::snprintf(ratio, sizeof ratio, "%.2f", r.ratio);
    char ns[32];
    std::snprintf(ns, sizeof ns, "%.1f", r.mean_ns_per_token);
    os << csv_escape(r.label) << ',' << ns << ',' << ratio << ',' << r.tokens << '\n';
  }
}

void render_heatmap(std::ostream& os, const KldHeatmap& heatmap, double scale) {
  os << std::setw(8) << "token";
  for (const auto& c : heatmap.columns) os << std::setw(12) << c;
  os << '\n';
  for (std::size_t t = 0; t < heatmap.matrix.size(); ++t) {
    os << std::setw(8) << heatmap.positions[t];
    for (double v : heatmap.matrix[t]) {
      os << std::setw(12) << std::fixed << std::setprecision(1) << v * scale;
    }
    os << '\n';
  }
  os << std::defaultfloat;
}

}  // namespace scmoe
