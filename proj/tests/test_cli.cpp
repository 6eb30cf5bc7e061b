// Copyright 2026 The edlab Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "edlab/checkpoint.hpp"
#include "edlab/cli.hpp"
#include "edlab/config.hpp"
#include "edlab/errors.hpp"
#include "json.hpp"

using namespace edlab;
namespace fs = std::filesystem;

namespace {

const char* kTinyConfig = R"([run]
seed = 3
workers = 2

[corpus]
num_languages = 4
num_relations = 3
num_subjects = 20
objects_per_relation = 5
num_syllables = 6

[model]
hidden_size = 16
num_layers = 3
num_heads = 2
max_seq_len = 8
mlp_ratio = 2

[pretrain]
steps = 150
batch_size = 32

[editor]
g_hidden = 8

[train]
max_steps = 120
eval_interval = 40
dev_max_edits = 3
dev_samples_per_edit = 4

[eval]
max_edits = 4
samples_per_edit = 4
top_fraction = 0.05
)";

struct Run {
  int code;
  std::string err;
};

Run run(const std::vector<std::string>& args) {
  std::ostringstream captured;
  auto* old = std::cerr.rdbuf(captured.rdbuf());
  const int code = cli::run_cli(args);
  std::cerr.rdbuf(old);
  return {code, captured.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

// Shared artifacts: config, dataset and raw model, built once.
struct Workspace {
  fs::path dir;
  fs::path config;
  fs::path data;
  fs::path raw;

  Workspace() {
    setenv("EDLAB_LOG", "error", 1);
    dir = fs::temp_directory_path() / "edlab_test_cli";
    fs::remove_all(dir);
    fs::create_directories(dir);
    config = dir / "tiny.ini";
    std::ofstream(config) << kTinyConfig;
    data = dir / "data";
    raw = dir / "raw.edlb";
    REQUIRE(run({"gen-data", "--config", config.string(), "--out", data.string()}).code == 0);
    REQUIRE(run({"pretrain", "--config", config.string(), "--data", data.string(), "--out", raw.string()}).code == 0);
  }
  std::vector<std::string> base(const std::string& cmd, const fs::path& out) const {
    return {cmd, "--config", config.string(), "--out", out.string()};
  }
};

const Workspace& ws() {
  static const Workspace w;
  return w;
}

std::vector<std::string> operator+(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

TEST_CASE("gen-data") {
  const auto& w = ws();
  const fs::path again = w.dir / "nested" / "again";
  CHECK(run(w.base("gen-data", again)).code == 0);
  CHECK(slurp(again / "examples.jsonl") == slurp(w.data / "examples.jsonl"));
  CHECK(slurp(again / "metadata.json") == slurp(w.data / "metadata.json"));

  const Run refused = run(w.base("gen-data", again));
  CHECK(refused.code == 2);
  CHECK(refused.err.find("--force") != std::string::npos);
  CHECK(run(w.base("gen-data", again) + std::vector<std::string>{"--force"}).code == 0);

  const nlohmann::json meta = read_json(w.data / "metadata.json");
  CHECK(meta.at("seed") == 3);
  CHECK(meta.at("run_config").at("run").at("seed") == "3");

  const fs::path bad = w.dir / "bad.ini";
  std::ofstream(bad) << "[corpus]\nnum_langauges = 3\n";
  const Run r = run({"gen-data", "--config", bad.string(), "--out", (w.dir / "x").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("corpus.num_langauges") != std::string::npos);

  std::ofstream(bad) << "[train]\nlambda_rel = abc\n";
  const Run r2 = run({"gen-data", "--config", bad.string(), "--out", (w.dir / "x").string()});
  CHECK(r2.code == 2);
  CHECK(r2.err.find("train.lambda_rel") != std::string::npos);
}

TEST_CASE("pretrain records its provenance") {
  const auto& w = ws();
  const auto c = io::read_container(w.raw);
  CHECK(c.metadata.at("seed") == 3);
  CHECK(c.metadata.contains("run_config"));
  CHECK(c.metadata.contains("train_accuracy"));
}

TEST_CASE("usage errors") {
  const auto& w = ws();
  CHECK(run({}).code == 2);
  CHECK(run({"frobnicate"}).code == 2);
  const Run r = run(w.base("train-editor", w.dir / "e.edlb") +
                    std::vector<std::string>{"--data", w.data.string(), "--raw", w.raw.string(), "--variant", "mend"});
  CHECK(r.code == 2);
  CHECK(r.err.find("mend") != std::string::npos);
  CHECK(run(w.base("evaluate", w.dir / "e.json") +
            std::vector<std::string>{"--data", w.data.string(), "--raw", w.raw.string(), "--variant", "bogus"})
            .code == 2);
}

TEST_CASE("mismatched checkpoints are refused") {
  const auto& w = ws();
  const fs::path other = w.dir / "other.ini";
  std::string text = kTinyConfig;
  text.replace(text.find("num_syllables = 6"), 17, "num_syllables = 7");
  std::ofstream(other) << text;
  const fs::path other_data = w.dir / "other_data";
  REQUIRE(run({"gen-data", "--config", other.string(), "--out", other_data.string()}).code == 0);
  const Run r = run({"evaluate", "--config", other.string(), "--out", (w.dir / "m.json").string(), "--data",
                     other_data.string(), "--raw", w.raw.string(), "--variant", "identity"});
  CHECK(r.code == 2);
  CHECK(r.err.find("does not match") != std::string::npos);
}

TEST_CASE("identity evaluation") {
  const auto& w = ws();
  const fs::path out = w.dir / "identity.json";
  REQUIRE(run(w.base("evaluate", out) +
              std::vector<std::string>{"--data", w.data.string(), "--raw", w.raw.string(), "--variant", "identity"})
              .code == 0);
  const auto report = read_json(out);
  CHECK(report.at("overall").at("con") == 1.0);
  for (const auto& row : report.at("per_language")) CHECK(row.at("con") == 1.0);
  CHECK(report.at("variant") == "identity");
  CHECK(report.at("seed") == 3);
  CHECK(report.at("run_config").at("corpus").at("num_subjects") == "20");
  CHECK(report.at("mask_similarity").is_null());
  CHECK(fs::exists(w.dir / "identity.csv"));
}

TEST_CASE("train, resume, evaluate and analyze") {
  const auto& w = ws();
  const std::vector<std::string> data = {"--data", w.data.string(), "--raw", w.raw.string(), "--variant",
                                         "hypernet_masked"};
  const fs::path full = w.dir / "full.edlb";
  REQUIRE(run(w.base("train-editor", full) + data).code == 0);

  const fs::path part = w.dir / "part.edlb";
  REQUIRE(run(w.base("train-editor", part) + data + std::vector<std::string>{"--stop-after", "50"}).code == 0);
  CHECK_FALSE(fs::exists(part));
  CHECK(fs::exists(part.string() + ".state"));
  REQUIRE(run(w.base("train-editor", part) + data).code == 0);
  const auto a = io::read_container(full);
  const auto b = io::read_container(part);
  REQUIRE(a.tensors.size() == b.tensors.size());
  for (std::size_t i = 0; i < a.tensors.size(); ++i) {
    CHECK(a.tensors[i].name == b.tensors[i].name);
    CHECK(a.tensors[i].value == b.tensors[i].value);
  }
  CHECK(slurp(full.string() + ".log.jsonl") == slurp(part.string() + ".log.jsonl"));
  CHECK(a.metadata.at("editor").at("variant") == "hypernet_masked");
  CHECK(a.metadata.at("seed") == 3);

  const std::vector<std::string> eval_args = {"--data", w.data.string(), "--raw", w.raw.string(), "--editor",
                                              full.string()};
  REQUIRE(run(w.base("evaluate", w.dir / "full.json") + eval_args).code == 0);
  REQUIRE(run(w.base("evaluate", w.dir / "full2.json") + eval_args + std::vector<std::string>{"--workers", "1"})
              .code == 0);
  auto r1 = read_json(w.dir / "full.json");
  auto r2 = read_json(w.dir / "full2.json");
  CHECK(r1.at("overall") == r2.at("overall"));
  CHECK(r1.at("per_language") == r2.at("per_language"));
  CHECK(r1.at("language_mode") == "cross_lingual");
  CHECK(r1.at("mask_similarity").size() == 4);

  const fs::path sim = w.dir / "sim.json";
  REQUIRE(run(w.base("analyze-masks", sim) + std::vector<std::string>{"--editor", full.string()}).code == 0);
  const auto doc = read_json(sim);
  REQUIRE(doc.at("matrix").size() == 4);
  for (std::size_t l = 0; l < 4; ++l) {
    REQUIRE(doc.at("matrix")[l].size() == 4);
    CHECK(doc.at("matrix")[l][l].get<double>() == doctest::Approx(1.0).epsilon(1e-9));
  }
  CHECK(doc.at("basis") == "gates");
  CHECK(doc.at("matrices").contains("log_alpha"));
  CHECK(fs::exists(w.dir / "sim.csv"));

  const fs::path plain = w.dir / "plain.edlb";
  REQUIRE(run(w.base("train-editor", plain) + std::vector<std::string>{"--data", w.data.string(), "--raw",
                                                                       w.raw.string(), "--variant", "identity_g"})
              .code == 0);
  const Run r = run(w.base("analyze-masks", w.dir / "plain_sim.json") +
                    std::vector<std::string>{"--editor", plain.string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("no language masks") != std::string::npos);
}

TEST_CASE("log level") {
  setenv("EDLAB_LOG", "loud", 1);
  const Run r = run(ws().base("gen-data", ws().dir / "loud") + std::vector<std::string>{"--force"});
  CHECK(r.code == 2);
  setenv("EDLAB_LOG", "error", 1);
}

TEST_CASE("config text round trip") {
  const config::RunConfig c = config::parse_config(kTinyConfig);
  CHECK(c.seed == 3);
  CHECK(c.corpus.num_subjects == 20);
  CHECK(c.train.schedule.eval_interval == 40);
  const config::RunConfig back = config::parse_config(config::format_config(c));
  CHECK(config::format_config(back) == config::format_config(c));
  CHECK(config::to_json(back) == config::to_json(c));
  CHECK_THROWS_AS(config::parse_config("[eval]\nmask_basis = raw\n"), ConfigError);
  CHECK_THROWS_AS(config::parse_config("[eval]\ntop_fraction = 0\n"), ConfigError);
  CHECK(config::parse_config("[eval]\nediting_languages = 0, 2\n").editing_languages == std::vector<int>{0, 2});
}
