// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "scmoe/cli.hpp"
#include "scmoe/model_io.hpp"
#include "test_support.hpp"

using namespace scmoe;
using namespace scmoe::testing;

namespace {

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome run_cli(const std::vector<std::string>& args) {
  std::ostringstream out;
  std::ostringstream err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::string& path) { return read_text_file(path); }

void write_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  f << text;
}

std::size_t count_lines(const std::string& s) {
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

/// Writes a small checkpoint and a 3-line corpus into `dir`.
struct Fixture {
  TempDir dir;
  std::string model = dir.file("m.bin");
  std::string corpus = std::string(SCMOE_DATA_DIR) + "/corpus.jsonl";
  std::string stopwords = std::string(SCMOE_DATA_DIR) + "/stopwords_en.txt";

  Fixture() {
    write_file(dir.file("cfg.json"), R"({"n_layers": 2, "d_model": 32, "n_heads": 4, "n_experts": 8, "d_ff": 48})");
    const auto r = run_cli({"mkmodel", "--config", dir.file("cfg.json"), "--seed", "3", "--out", model});
    REQUIRE(r.code == 0);
  }
};

}  // namespace

TEST_CASE("no arguments prints usage and exits 2") {
  const auto r = run_cli({});
  CHECK(r.code == 2);
  CHECK(r.err.find("Usage") != std::string::npos);
  CHECK(r.out.empty());
}

TEST_CASE("unknown subcommands and flags are usage errors") {
  CHECK(run_cli({"frobnicate"}).code == 2);
  const auto r = run_cli({"generate", "--model", "m.bin", "--prompt", "x", "--bogus"});
  CHECK(r.code == 2);
  CHECK(r.err.find("Usage") != std::string::npos);
  CHECK(run_cli({"generate", "--prompt", "x"}).code == 2);
}

TEST_CASE("help documents csv columns") {
  const auto r = run_cli({"kld", "--help"});
  CHECK(r.code == 0);
  CHECK(r.out.find("class,strategy,mean_kld,count") != std::string::npos);
  CHECK(run_cli({"--help"}).code == 0);
}

TEST_CASE("generate is deterministic") {
  Fixture fx;
  const std::vector<std::string> args{"generate", "--model", fx.model, "--decoder", "greedy", "--seed",
                                      "7",        "--prompt", "Q: 1+1?", "--max-new", "24"};
  const auto a = run_cli(args);
  const auto b = run_cli(args);
  REQUIRE(a.code == 0);
  CHECK(a.out == b.out);

  for (const char* dec : {"sample", "scmoe", "dola", "cs"}) {
    CAPTURE(dec);
    const auto r = run_cli({"generate", "--model", fx.model, "--decoder", dec, "--prompt", "hi", "--max-new", "8"});
    CHECK(r.code == 0);
  }
  const auto cd = run_cli({"generate", "--model", fx.model, "--decoder", "cd", "--amateur", fx.model, "--prompt",
                           "hi", "--max-new", "8"});
  CHECK(cd.code == 0);
}

TEST_CASE("generate writes diagnostics") {
  Fixture fx;
  write_file(fx.dir.file("p.txt"), "Question: 2+2?\n");
  const auto r = run_cli({"generate", "--model", fx.model, "--decoder", "scmoe", "--strong", "top:2", "--weak",
                          "rank:2", "--beta", "0.5", "--prompt-file", fx.dir.file("p.txt"), "--max-new", "6",
                          "--ignore-stop", "--diag", fx.dir.file("d.json")});
  REQUIRE(r.code == 0);
  const auto diag = nlohmann::json::parse(slurp(fx.dir.file("d.json")));
  CHECK(diag["steps"].size() == 6);
  CHECK(diag["tokens"].size() == 6);
  CHECK(diag["decoder"] == "scmoe:top:2/rank:2/0.5/0.1");
  CHECK(diag["prompt_tokens"] == 15);
  CHECK(diag["steps"][0]["n_valid"].get<int>() >= 1);
}

TEST_CASE("file and model errors map to exit codes") {
  Fixture fx;
  CHECK(run_cli({"generate", "--model", fx.dir.file("missing.bin"), "--prompt", "x"}).code == 3);
  write_file(fx.dir.file("bad.bin"), "NOPE....");
  const auto bad = run_cli({"generate", "--model", fx.dir.file("bad.bin"), "--prompt", "x"});
  CHECK(bad.code == 3);
  CHECK(bad.err.find("bad magic") != std::string::npos);
  CHECK(run_cli({"generate", "--model", fx.model, "--prompt", "x", "--max-new", "5000"}).code == 4);
  CHECK(run_cli({"generate", "--model", fx.model, "--prompt", "x", "--decoder", "scmoe", "--weak", "rank:x"}).code ==
        2);
  CHECK(run_cli({"compare", "--model", fx.model, "--corpus", fx.dir.file("none.jsonl")}).code == 3);
}

TEST_CASE("settings file supplies flags and command-line flags win") {
  Fixture fx;
  write_file(fx.dir.file("s.json"),
             "{\"generate\": {\"model\": \"" + fx.model + "\", \"max-new\": 3, \"ignore-stop\": true}}");
  const auto base = run_cli({"--settings", fx.dir.file("s.json"), "generate", "--prompt", "abc", "--diag",
                             fx.dir.file("a.json")});
  REQUIRE(base.code == 0);
  CHECK(nlohmann::json::parse(slurp(fx.dir.file("a.json")))["tokens"].size() == 3);
  const auto over = run_cli({"--settings", fx.dir.file("s.json"), "generate", "--prompt", "abc", "--max-new", "5",
                             "--diag", fx.dir.file("b.json")});
  REQUIRE(over.code == 0);
  CHECK(nlohmann::json::parse(slurp(fx.dir.file("b.json")))["tokens"].size() == 5);
}

TEST_CASE("compare emits one row per method and example") {
  Fixture fx;
  const auto r = run_cli({"compare", "--model", fx.model, "--corpus", fx.corpus, "--methods",
                          "greedy,ensemble:top:4,dyn:0.4,scmoe:top:2/rank:2/0.5", "--beta-grid", "0.1,0.9",
                          "--max-new", "8", "--jobs", "2"});
  REQUIRE(r.code == 0);
  CHECK(r.out.rfind("method,example_id,tokens,extracted,gold,correct,output\n", 0) == 0);
  CHECK(count_lines(r.out) >= 1 + 5 * 20);
  CHECK(r.out.find("scmoe:top:2/rank:2/0.9/0.1,q20,") != std::string::npos);
  const auto serial = run_cli({"compare", "--model", fx.model, "--corpus", fx.corpus, "--methods",
                               "greedy,ensemble:top:4,dyn:0.4,scmoe:top:2/rank:2/0.5", "--beta-grid", "0.1,0.9",
                               "--max-new", "8", "--jobs", "1"});
  CHECK(serial.out == r.out);
}

TEST_CASE("kld emits report and heatmap csvs") {
  Fixture fx;
  const auto r = run_cli({"kld", "--model", fx.model, "--corpus", fx.corpus, "--weak", "rank:1..3,random1",
                          "--stopwords", fx.stopwords, "--heatmap-out", fx.dir.file("hm.csv"), "--jobs", "2"});
  REQUIRE(r.code == 0);
  CHECK(r.out.rfind("class,strategy,mean_kld,count\n", 0) == 0);
  CHECK(count_lines(r.out) == 1 + 3 * 4);
  CHECK(r.out.find("Stopword,rank:3,") != std::string::npos);
  const std::string hm = slurp(fx.dir.file("hm.csv"));
  CHECK(hm.rfind("example,position,token,k,kld_nats\nq01,0,", 0) == 0);
}

TEST_CASE("kld falls back to SCMX_STOPWORDS") {
  Fixture fx;
  ::unsetenv("SCMX_STOPWORDS");
  CHECK(run_cli({"kld", "--model", fx.model, "--corpus", fx.corpus, "--weak", "rank:1"}).code == 2);
  ::setenv("SCMX_STOPWORDS", fx.stopwords.c_str(), 1);
  const auto r = run_cli({"kld", "--model", fx.model, "--corpus", fx.corpus, "--weak", "rank:1", "--render"});
  ::unsetenv("SCMX_STOPWORDS");
  CHECK(r.code == 0);
  CHECK(r.out.find("# q01") != std::string::npos);
}

TEST_CASE("utilization emits json") {
  Fixture fx;
  const auto r = run_cli({"utilization", "--model", fx.model, "--corpus", fx.corpus, "--strong", "top:2", "--weak",
                          "rank:2"});
  REQUIRE(r.code == 0);
  const auto j = nlohmann::json::parse(r.out);
  CHECK(j["weak"] == "rank:2");
  CHECK(j["total_slots"].get<int>() > 0);
  CHECK(j["per_layer"].size() == 2);
  CHECK(j["ratio"].get<double>() >= 0.0);
  CHECK(run_cli({"utilization", "--model", fx.model, "--prompt", "x", "--weak", "top:2"}).code == 4);
}

TEST_CASE("bench with greedy alone reports ratio 1.00") {
  Fixture fx;
  const auto r = run_cli({"bench", "--model", fx.model, "--methods", "greedy", "--prompt-len", "8", "--gen-len",
                          "16", "--reps", "1"});
  REQUIRE(r.code == 0);
  std::istringstream lines(r.out);
  std::string header;
  std::string row;
  std::getline(lines, header);
  std::getline(lines, row);
  CHECK(header == "method,mean_ns_per_token,ratio_vs_greedy,tokens");
  CHECK(row.rfind("greedy,", 0) == 0);
  CHECK(row.substr(row.size() - 8) == ",1.00,16");
}

TEST_CASE("vote output is byte identical across runs and job counts") {
  Fixture fx;
  const std::vector<std::string> args{"vote", "--model", fx.model, "--corpus", fx.corpus, "--decoder",
                                      "scmoe-sample:top:2/rank:2/0.5", "--n", "3", "--max-new", "6", "--seed", "9"};
  const auto a = run_cli(args);
  auto threaded = args;
  threaded.insert(threaded.end(), {"--jobs", "3"});
  const auto b = run_cli(threaded);
  REQUIRE(a.code == 0);
  CHECK(a.out == b.out);
  CHECK(a.out.rfind("example_id,gold,voted,count,n,correct\n", 0) == 0);
  CHECK(count_lines(a.out) == 21);
  CHECK(run_cli({"vote", "--model", fx.model, "--corpus", fx.corpus, "--decoder", "greedy"}).code == 2);
}
