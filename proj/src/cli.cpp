// SPDX-License-Identifier: Apache-2.0
#include "scmoe/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <ostream>
#include <regex>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "scmoe/analysis.hpp"
#include "scmoe/decoding.hpp"
#include "scmoe/error.hpp"
#include "scmoe/model_io.hpp"
#include "scmoe/parallel.hpp"

namespace scmoe::cli {
namespace {

using nlohmann::json;

/// Invalid flag combinations detected after parsing.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Reads `--settings file.json`: top-level keys name subcommands, nested keys
/// name flags without the leading dashes. Flags given on the command line win.
class JsonSettings : public CLI::Config {
 public:
  std::string to_config(const CLI::App*, bool, bool, std::string) const override { return "{}\n"; }

  std::vector<CLI::ConfigItem> from_config(std::istream& in) const override {
    json root;
    try {
      in >> root;
    } catch (const json::exception& e) {
      throw Error(Errc::kParse, std::string("settings file: ") + e.what());
    }
    if (!root.is_object()) throw Error(Errc::kParse, "settings file: top level must be an object");
    std::vector<CLI::ConfigItem> items;
    walk(root, {}, items);
    return items;
  }

 private:
  static std::string scalar(const json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    return v.dump();
  }

  static void walk(const json& node, const std::vector<std::string>& parents,
                   std::vector<CLI::ConfigItem>& items) {
    for (const auto& [key, value] : node.items()) {
      if (value.is_null()) continue;
      if (value.is_object()) {
        auto next = parents;
        next.push_back(key);
        walk(value, next, items);
        continue;
      }
      CLI::ConfigItem item;
      item.parents = parents;
      item.name = key;
      if (value.is_array()) {
        for (const auto& v : value) item.inputs.push_back(scalar(v));
      } else {
        item.inputs.push_back(scalar(value));
      }
      items.push_back(std::move(item));
    }
  }
};

std::vector<std::string> split_list(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(text);
  while (std::getline(is, cur, sep)) {
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

std::optional<SharedGate> parse_shared_gate(const std::string& text) {
  if (text.empty()) return std::nullopt;
  if (text == "raw") return SharedGate::kRaw;
  if (text == "renorm") return SharedGate::kRenorm;
  throw UsageError("--shared-gate must be raw or renorm");
}

/// Spec strings come from flags, so a malformed one is a usage error.
template <class Fn>
auto as_usage(Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const Error& e) {
    if (e.code() != Errc::kInvalidArgument) throw;
    throw UsageError(e.what());
  }
}

DecodeConfig decoder_arg(const std::string& spec) {
  return as_usage([&] { return parse_decoder_spec(spec); });
}

RoutingStrategy routing_arg(const std::string& text, std::optional<SharedGate> gate) {
  RoutingStrategy s = as_usage([&] { return parse_routing(text); });
  if (gate) s.shared_gate = *gate;
  return s;
}

/// Comma list of routings; `rank:1..8` style ranges expand in order.
std::vector<RoutingStrategy> routing_list(const std::string& text, std::optional<SharedGate> gate) {
  static const std::regex range(R"(^(.*:)([0-9]+)\.\.([0-9]+)(.*)$)");
  std::vector<RoutingStrategy> out;
  for (const auto& item : split_list(text, ',')) {
    std::smatch m;
    if (std::regex_match(item, m, range)) {
      const int lo = std::stoi(m[2].str());
      const int hi = std::stoi(m[3].str());
      if (lo > hi) throw UsageError("empty routing range '" + item + "'");
      for (int k = lo; k <= hi; ++k) {
        out.push_back(routing_arg(m[1].str() + std::to_string(k) + m[4].str(), gate));
      }
    } else {
      out.push_back(routing_arg(item, gate));
    }
  }
  if (out.empty()) throw UsageError("empty routing list");
  return out;
}

void apply_shared_gate(DecodeConfig& cfg, std::optional<SharedGate> gate) {
  if (!gate) return;
  cfg.routing.shared_gate = *gate;
  if (auto* s = std::get_if<Scmoe>(&cfg.decoder)) {
    s->strong.shared_gate = *gate;
    s->weak.shared_gate = *gate;
  }
}

/// Loads the amateur checkpoint a contrastive-decoding config refers to.
std::unique_ptr<Model> load_amateur(const DecodeConfig& cfg) {
  if (const auto* cd = std::get_if<ContrastiveDecoding>(&cfg.decoder)) {
    if (cd->amateur_checkpoint.empty()) throw UsageError("contrastive decoding needs an amateur checkpoint");
    return std::make_unique<Model>(load_checkpoint(cd->amateur_checkpoint));
  }
  return nullptr;
}

std::string strip_one_newline(std::string text) {
  if (!text.empty() && text.back() == '\n') text.pop_back();
  if (!text.empty() && text.back() == '\r') text.pop_back();
  return text;
}

/// Opens `path` for writing, or returns `fallback` when the path is empty.
class OutputTarget {
 public:
  OutputTarget(const std::string& path, std::ostream& fallback) : stream_(&fallback) {
    if (path.empty()) return;
    file_.open(path, std::ios::binary);
    if (!file_) throw Error(Errc::kIo, "cannot open '" + path + "' for writing");
    stream_ = &file_;
  }
  std::ostream& get() { return *stream_; }
  void close() {
    if (file_.is_open()) {
      file_.close();
      if (!file_) throw Error(Errc::kIo, "write failed");
    }
  }

 private:
  std::ofstream file_;
  std::ostream* stream_;
};

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

// ---------------------------------------------------------------------------
// Subcommands

struct MkmodelArgs {
  std::string config;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_mkmodel(const MkmodelArgs& a, std::ostream& out) {
  const ModelConfig config = a.config.empty() ? ModelConfig{} : load_config_file(a.config);
  const Model model = generate_random_model(config, a.seed);
  save_checkpoint(model, a.out);
  out << "wrote " << a.out << '\n';
  return kExitOk;
}

struct GenerateArgs {
  std::string model;
  std::string decoder = "greedy";
  std::string routing = "top:2";
  std::string strong = "top:2";
  std::string weak = "rank:2";
  double beta = 0.5;
  double alpha = 0.1;
  bool sample = false;
  double temperature = 0.7;
  std::string amateur;
  std::string dola_layers = "low";
  int cs_topk = 5;
  double cs_penalty = 0.6;
  std::string shared_gate;
  bool weak_no_shared = false;
  int max_new = 256;
  std::uint64_t seed = 0;
  bool ignore_stop = false;
  std::string prompt;
  std::string prompt_file;
  std::string diag;
};

DecodeConfig build_decode_config(const GenerateArgs& a, std::optional<SharedGate> gate) {
  DecodeConfig cfg;
  cfg.routing = routing_arg(a.routing, gate);
  cfg.max_new_tokens = a.max_new;
  cfg.seed = a.seed;
  cfg.ignore_stop = a.ignore_stop;
  if (a.decoder == "greedy") {
    cfg.decoder = Greedy{};
  } else if (a.decoder == "sample") {
    cfg.decoder = Sample{a.temperature};
  } else if (a.decoder == "scmoe") {
    Scmoe s;
    s.strong = routing_arg(a.strong, gate);
    s.weak = routing_arg(a.weak, gate);
    if (a.weak_no_shared) s.weak.shared_experts = 0;
    s.beta = a.beta;
    s.alpha = a.alpha;
    s.sample = a.sample;
    cfg.decoder = s;
  } else if (a.decoder == "cd") {
    if (a.amateur.empty()) throw UsageError("--decoder cd needs --amateur");
    cfg.decoder = ContrastiveDecoding{a.amateur, a.beta, a.alpha};
  } else if (a.decoder == "dola") {
    Dola d;
    d.alpha = a.alpha;
    if (a.dola_layers == "low") {
      d.bucket = Dola::Bucket::kLow;
    } else if (a.dola_layers == "high") {
      d.bucket = Dola::Bucket::kHigh;
    } else {
      d.bucket = Dola::Bucket::kExplicit;
      for (const auto& l : split_list(a.dola_layers, ',')) {
        try {
          d.layers.push_back(std::stoi(l));
        } catch (const std::exception&) {
          throw UsageError("--dola-layers must be low, high or a comma list of layer indices");
        }
      }
    }
    cfg.decoder = d;
  } else if (a.decoder == "cs") {
    cfg.decoder = ContrastiveSearch{a.cs_topk, a.cs_penalty};
  } else {
    throw UsageError("unknown decoder '" + a.decoder + "'");
  }
  return cfg;
}

int cmd_generate(const GenerateArgs& a, std::ostream& out) {
  if (a.prompt.empty() == a.prompt_file.empty()) {
    throw UsageError("generate needs exactly one of --prompt or --prompt-file");
  }
  const auto gate = parse_shared_gate(a.shared_gate);
  const DecodeConfig cfg = build_decode_config(a, gate);
  const Model model = load_checkpoint(a.model);
  const auto amateur = load_amateur(cfg);
  const std::string text = a.prompt_file.empty() ? a.prompt : strip_one_newline(read_text_file(a.prompt_file));
  const std::vector<int> prompt = encode(text);
  const GenerationResult r = generate(model, prompt, cfg, amateur.get());
  out << r.text << '\n';

  if (!a.diag.empty()) {
    json steps = json::array();
    for (const auto& s : r.steps) {
      steps.push_back({{"token", s.token},
                       {"strong_max", optional_json(s.strong_max)},
                       {"weak_max", optional_json(s.weak_max)},
                       {"n_valid", s.n_valid},
                       {"premature_layer", s.premature_layer ? json(*s.premature_layer) : json(nullptr)},
                       {"ns", s.ns}});
    }
    const json diag = {{"decoder", decoder_label(cfg)},
                       {"seed", cfg.seed},
                       {"prompt_tokens", prompt.size()},
                       {"tokens", r.tokens},
                       {"text", r.text},
                       {"total_ns", r.total_ns},
                       {"steps", steps}};
    OutputTarget target(a.diag, out);
    // Sampled bytes need not form valid UTF-8.
    target.get() << diag.dump(2, ' ', false, json::error_handler_t::replace) << '\n';
    target.close();
  }
  return kExitOk;
}

struct CompareArgs {
  std::string model;
  std::string corpus;
  std::string methods = "greedy";
  std::string beta_grid;
  std::string shared_gate;
  int max_new = 256;
  std::uint64_t seed = 0;
  int jobs = 1;
  std::string out;
};

/// Expands every SCMoE method into one entry per beta of the grid.
std::vector<DecodeConfig> compare_methods(const CompareArgs& a, std::optional<SharedGate> gate) {
  std::vector<double> betas;
  for (const auto& b : split_list(a.beta_grid, ',')) {
    try {
      betas.push_back(std::stod(b));
    } catch (const std::exception&) {
      throw UsageError("--beta-grid must be a comma list of numbers");
    }
  }
  std::vector<DecodeConfig> out;
  for (const auto& spec : split_list(a.methods, ',')) {
    DecodeConfig cfg = decoder_arg(spec);
    apply_shared_gate(cfg, gate);
    cfg.max_new_tokens = a.max_new;
    cfg.seed = a.seed;
    if (std::holds_alternative<Scmoe>(cfg.decoder) && !betas.empty()) {
      for (double b : betas) {
        DecodeConfig c = cfg;
        std::get<Scmoe>(c.decoder).beta = b;
        out.push_back(c);
      }
    } else {
      out.push_back(cfg);
    }
  }
  if (out.empty()) throw UsageError("--methods is empty");
  return out;
}

int cmd_compare(const CompareArgs& a, std::ostream& out) {
  const auto gate = parse_shared_gate(a.shared_gate);
  const auto methods = compare_methods(a, gate);
  const Model model = load_checkpoint(a.model);
  const auto corpus = load_corpus(a.corpus);

  OutputTarget target(a.out, out);
  std::ostream& os = target.get();
  os << "method,example_id,tokens,extracted,gold,correct,output\n";
  for (const auto& cfg : methods) {
    const auto amateur = load_amateur(cfg);
    std::vector<GenerationResult> results(corpus.size());
    parallel_for(corpus.size(), a.jobs, [&](std::size_t i) {
      results[i] = generate(model, encode(corpus[i].prompt), cfg, amateur.get());
    });
    const std::string label = decoder_label(cfg);
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      const auto extracted = extract_numeric_answer(results[i].text);
      const auto& gold = corpus[i].answer;
      os << csv_escape(label) << ',' << csv_escape(corpus[i].id) << ',' << results[i].tokens.size() << ','
         << csv_escape(extracted.value_or("")) << ',' << csv_escape(gold.value_or("")) << ',';
      if (gold) os << (extracted == gold ? 1 : 0);
      os << ',' << csv_escape(results[i].text) << '\n';
    }
  }
  target.close();
  return kExitOk;
}

struct KldArgs {
  std::string model;
  std::string corpus;
  std::string strong = "top:2";
  std::string weak = "rank:1..8";
  std::string stopwords;
  std::string heatmap_out;
  std::string report_out;
  bool render = false;
  double render_scale = 1e5;
  std::string direction = "strong-weak";
  std::string shared_gate;
  std::uint64_t seed = 0;
  int jobs = 1;
};

int cmd_kld(const KldArgs& a, std::ostream& out) {
  std::string stop_path = a.stopwords;
  if (stop_path.empty()) {
    if (const char* env = std::getenv("SCMX_STOPWORDS")) stop_path = env;
  }
  if (stop_path.empty()) throw UsageError("kld needs --stopwords or SCMX_STOPWORDS");
  KlDirection direction;
  if (a.direction == "strong-weak") {
    direction = KlDirection::kStrongWeak;
  } else if (a.direction == "weak-strong") {
    direction = KlDirection::kWeakStrong;
  } else {
    throw UsageError("--direction must be strong-weak or weak-strong");
  }
  const auto gate = parse_shared_gate(a.shared_gate);
  const RoutingStrategy strong = routing_arg(a.strong, gate);
  const auto weak = routing_list(a.weak, gate);
  const StopwordList stopwords = load_stopwords(stop_path);
  const Model model = load_checkpoint(a.model);
  const auto corpus = load_corpus(a.corpus);

  std::vector<KldHeatmap> heatmaps;
  const TokenClassReport report =
      kld_aggregate(model, corpus, strong, weak, stopwords, direction, a.seed, a.jobs, &heatmaps);

  if (!a.heatmap_out.empty()) {
    OutputTarget hm(a.heatmap_out, out);
    hm.get() << "example,position,token,k,kld_nats\n";
    for (std::size_t i = 0; i < heatmaps.size(); ++i) {
      write_heatmap_csv(hm.get(), heatmaps[i], false, corpus[i].id);
    }
    hm.close();
  }
  OutputTarget rep(a.report_out, out);
  write_report_csv(rep.get(), report);
  rep.close();
  if (a.render) {
    for (std::size_t i = 0; i < heatmaps.size(); ++i) {
      out << "# " << corpus[i].id << '\n';
      render_heatmap(out, heatmaps[i], a.render_scale);
    }
  }
  return kExitOk;
}

struct UtilizationArgs {
  std::string model;
  std::string corpus;
  std::string prompt;
  std::string strong = "top:2";
  std::string weak = "rank:2";
  std::string shared_gate;
  std::uint64_t seed = 0;
  int jobs = 1;
};

int cmd_utilization(const UtilizationArgs& a, std::ostream& out) {
  if (a.corpus.empty() == a.prompt.empty()) {
    throw UsageError("utilization needs exactly one of --corpus or --prompt");
  }
  const auto gate = parse_shared_gate(a.shared_gate);
  const RoutingStrategy strong = routing_arg(a.strong, gate);
  const RoutingStrategy weak = routing_arg(a.weak, gate);
  const Model model = load_checkpoint(a.model);

  std::vector<std::vector<int>> sequences;
  if (!a.prompt.empty()) {
    sequences.push_back(encode(a.prompt));
  } else {
    for (const auto& e : load_corpus(a.corpus)) {
      auto tokens = encode(e.prompt);
      const auto ref = reference_tokens(e.reference);
      tokens.insert(tokens.end(), ref.begin(), ref.end());
      sequences.push_back(std::move(tokens));
    }
  }
  std::vector<UtilizationReport> parts(sequences.size());
  parallel_for(sequences.size(), a.jobs, [&](std::size_t i) {
    parts[i] = expert_utilization(model, sequences[i], strong, weak, a.seed);
  });
  UtilizationReport total;
  total.per_layer.resize(static_cast<std::size_t>(model.config().n_layers));
  for (const auto& p : parts) total.merge(p);
  out << utilization_json(total, strong.to_string(), weak.to_string()) << '\n';
  return kExitOk;
}

struct BenchArgs {
  std::string model;
  std::string methods = "greedy,scmoe:top:2/rank:2/0.5";
  std::string shared_gate;
  int prompt_len = 32;
  int gen_len = 512;
  int reps = 3;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_bench(const BenchArgs& a, std::ostream& out) {
  const auto gate = parse_shared_gate(a.shared_gate);
  std::vector<LatencyCase> cases;
  std::unique_ptr<Model> amateur;
  for (const auto& spec : split_list(a.methods, ',')) {
    DecodeConfig cfg = decoder_arg(spec);
    apply_shared_gate(cfg, gate);
    if (!amateur) amateur = load_amateur(cfg);
    cases.push_back({spec, cfg});
  }
  if (cases.empty()) throw UsageError("--methods is empty");
  const Model model = load_checkpoint(a.model);
  const auto rows = latency_bench(model, cases, a.prompt_len, a.gen_len, a.reps, a.seed, amateur.get());
  OutputTarget target(a.out, out);
  write_latency_csv(target.get(), rows);
  target.close();
  return kExitOk;
}

struct VoteArgs {
  std::string model;
  std::string corpus;
  std::string decoder = "sample:0.7";
  std::string shared_gate;
  int n = 20;
  int max_new = 256;
  std::uint64_t seed = 0;
  int jobs = 1;
  std::string out;
};

int cmd_vote(const VoteArgs& a, std::ostream& out, std::ostream& err) {
  const auto gate = parse_shared_gate(a.shared_gate);
  DecodeConfig base = decoder_arg(a.decoder);
  apply_shared_gate(base, gate);
  const auto* scmoe = std::get_if<Scmoe>(&base.decoder);
  if (!std::holds_alternative<Sample>(base.decoder) && !(scmoe && scmoe->sample)) {
    throw UsageError("vote needs a sampling decoder (sample:T or scmoe-sample:...)");
  }
  base.max_new_tokens = a.max_new;
  const Model model = load_checkpoint(a.model);
  const auto corpus = load_corpus(a.corpus);

  OutputTarget target(a.out, out);
  std::ostream& os = target.get();
  os << "example_id,gold,voted,count,n,correct\n";
  std::size_t graded = 0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto prompt = encode(corpus[i].prompt);
    auto sample_fn = [&](std::uint64_t seed) {
      DecodeConfig cfg = base;
      cfg.seed = seed;
      return generate(model, prompt, cfg).text;
    };
    std::string voted;
    int count = 0;
    try {
      const VoteResult v = self_consistency(sample_fn, a.n, derive_seed(a.seed, i), extract_numeric_answer, a.jobs);
      voted = v.answer;
      count = v.count;
    } catch (const Error& e) {
      if (e.code() != Errc::kNoVotableAnswers) throw;
    }
    const auto& gold = corpus[i].answer;
    os << csv_escape(corpus[i].id) << ',' << csv_escape(gold.value_or("")) << ',' << csv_escape(voted) << ','
       << count << ',' << a.n << ',';
    if (gold) {
      ++graded;
      const bool ok = count > 0 && voted == *gold;
      correct += ok ? 1 : 0;
      os << (ok ? 1 : 0);
    }
    os << '\n';
  }
  target.close();
  if (graded) err << "accuracy " << correct << '/' << graded << '\n';
  return kExitOk;
}

void add_seed(CLI::App* sub, std::uint64_t& seed) { sub->add_option("--seed", seed, "Random seed")->capture_default_str(); }

void add_shared_gate(CLI::App* sub, std::string& gate) {
  sub->add_option("--shared-gate", gate, "Shared-expert weighting: raw or renorm")
      ->check(CLI::IsMember({"raw", "renorm"}));
}

void add_jobs(CLI::App* sub, int& jobs) {
  sub->add_option("--jobs", jobs, "Worker threads; output order is input order")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Self-contrast decoding for mixture-of-experts models", "scmoe"};
  app.require_subcommand(1);
  app.config_formatter(std::make_shared<JsonSettings>());
  app.set_config("--settings", "", "JSON file of flag values, keyed by subcommand; flags win");
  app.footer("Exit codes: 0 ok, 2 usage, 3 I/O or parse, 4 numeric or model error.");

  MkmodelArgs mk;
  auto* mkmodel = app.add_subcommand("mkmodel", "Write a randomly initialized checkpoint");
  mkmodel->add_option("--config", mk.config, "Model config JSON (defaults to the desk config)")
      ->check(CLI::ExistingFile);
  add_seed(mkmodel, mk.seed);
  mkmodel->add_option("--out", mk.out, "Checkpoint path")->required();

  GenerateArgs gen;
  auto* generate_cmd = app.add_subcommand("generate", "Decode a continuation of one prompt");
  generate_cmd->add_option("--model", gen.model, "Checkpoint path")->required();
  generate_cmd->add_option("--decoder", gen.decoder, "greedy, sample, scmoe, cd, dola or cs")
      ->check(CLI::IsMember({"greedy", "sample", "scmoe", "cd", "dola", "cs"}))
      ->capture_default_str();
  generate_cmd->add_option("--routing", gen.routing, "Routing for single-pass decoders")->capture_default_str();
  generate_cmd->add_option("--strong", gen.strong, "SCMoE strong routing")->capture_default_str();
  generate_cmd->add_option("--weak", gen.weak, "SCMoE weak routing")->capture_default_str();
  generate_cmd->add_option("--beta", gen.beta, "Contrast strength")->capture_default_str();
  generate_cmd->add_option("--alpha", gen.alpha, "Plausibility threshold in (0, 1]")->capture_default_str();
  generate_cmd->add_flag("--sample", gen.sample, "SCMoE: draw from the contrast distribution");
  generate_cmd->add_option("--temperature", gen.temperature, "Sampling temperature")->capture_default_str();
  generate_cmd->add_option("--amateur", gen.amateur, "Amateur checkpoint for cd");
  generate_cmd->add_option("--dola-layers", gen.dola_layers, "low, high or comma list of layers")
      ->capture_default_str();
  generate_cmd->add_option("--cs-topk", gen.cs_topk, "Contrastive search candidates")->capture_default_str();
  generate_cmd->add_option("--cs-penalty", gen.cs_penalty, "Degeneration penalty in [0, 1]")
      ->capture_default_str();
  add_shared_gate(generate_cmd, gen.shared_gate);
  generate_cmd->add_flag("--weak-no-shared", gen.weak_no_shared, "SCMoE: disable shared experts in the weak pass");
  generate_cmd->add_option("--max-new", gen.max_new, "Maximum new tokens")->capture_default_str();
  add_seed(generate_cmd, gen.seed);
  generate_cmd->add_flag("--ignore-stop", gen.ignore_stop, "Do not stop at EOS");
  auto* prompt_opt = generate_cmd->add_option("--prompt", gen.prompt, "Prompt text");
  generate_cmd->add_option("--prompt-file", gen.prompt_file, "Prompt file (one trailing newline dropped)")
      ->excludes(prompt_opt);
  generate_cmd->add_option("--diag", gen.diag, "Write per-step diagnostics JSON");

  CompareArgs cmp;
  auto* compare = app.add_subcommand("compare", "Run several decoders over a corpus");
  compare->add_option("--model", cmp.model, "Checkpoint path")->required();
  compare->add_option("--corpus", cmp.corpus, "JSONL corpus")->required();
  compare->add_option("--methods", cmp.methods, "Comma list of decoder specs")->capture_default_str();
  compare->add_option("--beta-grid", cmp.beta_grid, "Comma list of betas applied to scmoe methods");
  add_shared_gate(compare, cmp.shared_gate);
  compare->add_option("--max-new", cmp.max_new, "Maximum new tokens")->capture_default_str();
  add_seed(compare, cmp.seed);
  add_jobs(compare, cmp.jobs);
  compare->add_option("--out", cmp.out, "CSV path (default stdout)");
  compare->footer(
      "CSV columns: method,example_id,tokens,extracted,gold,correct,output\n"
      "Decoder specs: greedy[:routing] | ensemble:K | dyn:T | route:<routing> | sample:T |\n"
      "  scmoe[-sample]:<strong>/<weak>/<beta>[/<alpha>] | cd:<path>/<beta>[/<alpha>] |\n"
      "  dola:low|high|<l;l>[/<alpha>] | cs:<penalty>[/<top_k>]");

  KldArgs kl;
  auto* kld = app.add_subcommand("kld", "Per-token divergence between strong and weak routings");
  kld->add_option("--model", kl.model, "Checkpoint path")->required();
  kld->add_option("--corpus", kl.corpus, "JSONL corpus")->required();
  kld->add_option("--strong", kl.strong, "Strong routing")->capture_default_str();
  kld->add_option("--weak", kl.weak, "Comma list of weak routings; ranges like rank:1..8")->capture_default_str();
  kld->add_option("--stopwords", kl.stopwords, "Stopword file (falls back to SCMX_STOPWORDS)");
  kld->add_option("--heatmap-out", kl.heatmap_out, "Heatmap CSV path");
  kld->add_option("--report-out", kl.report_out, "Class report CSV path (default stdout)");
  kld->add_flag("--render", kl.render, "Print each heatmap as a table");
  kld->add_option("--render-scale", kl.render_scale, "Multiplier for rendered values")->capture_default_str();
  kld->add_option("--direction", kl.direction, "strong-weak or weak-strong")
      ->check(CLI::IsMember({"strong-weak", "weak-strong"}))
      ->capture_default_str();
  add_shared_gate(kld, kl.shared_gate);
  add_seed(kld, kl.seed);
  add_jobs(kld, kl.jobs);
  kld->footer(
      "Heatmap CSV columns: example,position,token,k,kld_nats\n"
      "Report CSV columns: class,strategy,mean_kld,count");

  UtilizationArgs ut;
  auto* utilization = app.add_subcommand("utilization", "Share of weak-pass experts the strong pass left unchosen");
  utilization->add_option("--model", ut.model, "Checkpoint path")->required();
  auto* ut_corpus = utilization->add_option("--corpus", ut.corpus, "JSONL corpus (prompt + reference)");
  utilization->add_option("--prompt", ut.prompt, "Single prompt text")->excludes(ut_corpus);
  utilization->add_option("--strong", ut.strong, "Strong routing")->capture_default_str();
  utilization->add_option("--weak", ut.weak, "Weak routing with one routed expert")->capture_default_str();
  add_shared_gate(utilization, ut.shared_gate);
  add_seed(utilization, ut.seed);
  add_jobs(utilization, ut.jobs);

  BenchArgs bn;
  auto* bench = app.add_subcommand("bench", "Decoding latency per token");
  bench->add_option("--model", bn.model, "Checkpoint path")->required();
  bench->add_option("--methods", bn.methods, "Comma list of decoder specs")->capture_default_str();
  add_shared_gate(bench, bn.shared_gate);
  bench->add_option("--prompt-len", bn.prompt_len, "Synthetic prompt length")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  bench->add_option("--gen-len", bn.gen_len, "Tokens generated per run")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  bench->add_option("--reps", bn.reps, "Timed runs per method")->check(CLI::PositiveNumber)->capture_default_str();
  add_seed(bench, bn.seed);
  bench->add_option("--out", bn.out, "CSV path (default stdout)");
  bench->footer("CSV columns: method,mean_ns_per_token,ratio_vs_greedy,tokens");

  VoteArgs vt;
  auto* vote = app.add_subcommand("vote", "Self-consistency majority vote over a corpus");
  vote->add_option("--model", vt.model, "Checkpoint path")->required();
  vote->add_option("--corpus", vt.corpus, "JSONL corpus")->required();
  vote->add_option("--decoder", vt.decoder, "Sampling decoder spec")->capture_default_str();
  add_shared_gate(vote, vt.shared_gate);
  vote->add_option("--n", vt.n, "Samples per example")->check(CLI::PositiveNumber)->capture_default_str();
  vote->add_option("--max-new", vt.max_new, "Maximum new tokens")->capture_default_str();
  add_seed(vote, vt.seed);
  add_jobs(vote, vt.jobs);
  vote->add_option("--out", vt.out, "CSV path (default stdout)");
  vote->footer("CSV columns: example_id,gold,voted,count,n,correct");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    // Show the help of the subcommand the user was typing, if any.
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return kExitUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e.code());
  }

  CLI::App* active = app.get_subcommands().front();
  try {
    if (active == mkmodel) return cmd_mkmodel(mk, out);
    if (active == generate_cmd) return cmd_generate(gen, out);
    if (active == compare) return cmd_compare(cmp, out);
    if (active == kld) return cmd_kld(kl, out);
    if (active == utilization) return cmd_utilization(ut, out);
    if (active == bench) return cmd_bench(bn, out);
    if (active == vote) return cmd_vote(vt, out, err);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n\n" << active->help();
    return kExitUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e.code());
  } catch (const std::ios_base::failure& e) {
    err << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitModel;
  }
  return kExitUsage;
}

}  // namespace scmoe::cli
