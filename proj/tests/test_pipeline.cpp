#include <doctest.h>

#include "fixtures.hpp"
#include "gram/service.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

using namespace gram;
using namespace gram::testing;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string run_command(const std::string& cmd) {
  std::string out;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buf[4096];
  while (std::fgets(buf, sizeof buf, pipe) != nullptr) {
    out += buf;
  }
  CHECK(pclose(pipe) == 0);
  return out;
}

}  // namespace

TEST_CASE("config json rejects unknown keys and bad values") {
  CHECK_NOTHROW(pipeline_config_from_json(Json::object()));
  CHECK_THROWS_AS(pipeline_config_from_json(Json{{"sed", 1}}), ConfigError);
  CHECK_THROWS_AS(pipeline_config_from_json(Json{{"sft", {{"learning_rate", 0.1}}}}), ConfigError);
  CHECK_THROWS_AS(pipeline_config_from_json(Json{{"sft", 3}}), ConfigError);
  CHECK_THROWS_AS(pipeline_config_from_json(Json{{"sft", {{"lr", "fast"}}}}), ConfigError);
  CHECK_THROWS_AS(pipeline_config_from_json(Json{{"corpus", {{"n_test_queries", 600}}}}), ConfigError);
  CHECK_THROWS_AS(pipeline_config_from_json(Json{{"model", {{"heads", 5}}}}), ConfigError);
  CHECK_THROWS_AS(pipeline_config_from_json(Json::array()), ConfigError);

  const auto c = pipeline_config_from_json(Json{{"seed", 9}, {"sft", {{"lr", 0.01}}}, {"align", {{"beta_w", 0.2}}}});
  CHECK(c.seed == 9);
  CHECK(c.sft.adamw.lr == 0.01);
  CHECK(c.align.beta_w == 0.2);
}

TEST_CASE("config json round-trips and the hash ignores out_dir") {
  PipelineConfig c;
  c.seed = 4;
  c.retrieval.top_n = 77;
  c.corpus.inclusion[3] = 0.5;
  const auto back = pipeline_config_from_json(pipeline_config_to_json(c));
  CHECK(config_hash(back) == config_hash(c));
  CHECK(pipeline_config_to_json(back) == pipeline_config_to_json(c));
  auto moved = c;
  moved.out_dir = "elsewhere";
  CHECK(config_hash(moved) == config_hash(c));
  auto changed = c;
  changed.weights.lr = 0.5;
  CHECK(config_hash(changed) != config_hash(c));
  CHECK(fnv1a_hex("") == "cbf29ce484222325");
}

TEST_CASE("stages require their dependencies") {
  const auto dir = temp_dir("pipedeps");
  Pipeline p(tiny_pipeline(dir));
  try {
    p.train_sft();
    FAIL("expected a dependency error");
  } catch (const DependencyError& e) {
    CHECK(std::string(e.what()).find("gen-data") != std::string::npos);
  }
  CHECK_THROWS_AS(p.bench(), DependencyError);
  CHECK_THROWS_AS(p.run({"gen-data", "nonsense"}), ConfigError);
  p.gen_data();
  CHECK(p.completed("gen-data"));
  auto other = tiny_pipeline(dir);
  other.sft.epochs = 2;
  CHECK_FALSE(Pipeline(other).completed("gen-data"));
  CHECK_THROWS_AS(Pipeline(other).train_sft(), DependencyError);
  {
    std::ofstream tamper(dir / "clicks.jsonl", std::ios::app);
    tamper << "\n";
  }
  CHECK_FALSE(p.completed("gen-data"));
}

TEST_CASE("split keeps test queries out of training pairs") {
  const auto dir = temp_dir("pipesplit");
  Pipeline p(tiny_pipeline(dir));
  p.gen_data();
  const auto d = load_run_data(dir);
  CHECK(d.test_queries.size() == 10);
  CHECK(d.train_queries.size() + d.test_queries.size() == d.queries.size());
  const std::set<QueryId> test(d.test_queries.begin(), d.test_queries.end());
  for (const auto& ex : read_sft_jsonl(dir / "sft_initial.jsonl", d.lexicon)) {
    if (ex.side == Side::Query) {
      CHECK(test.count(ex.item) == 0);
    }
  }
  for (const auto& c : d.train_clicks()) {
    CHECK(test.count(c.query_id) == 0);
  }
  const auto vocab = read_json_file(dir / "vocab.json");
  CHECK(vocab.size() == d.vocab.size());
  CHECK(vocab["<eos>"] == Vocabulary::kEos);
}

TEST_CASE("full tiny pipeline writes every artifact deterministically") {
  const auto a = temp_dir("pipefull_a");
  const auto b = temp_dir("pipefull_b");
  Pipeline pa(tiny_pipeline(a));
  pa.run(pipeline_stages());
  for (const char* f : {"sft_dataset.jsonl", "alignment_pairs.jsonl", "code_weights.json", "index.bin", "report.csv",
                        "report.md", "sft_log.csv", "sft.ckpt", "ct.ckpt", "aligned.ckpt"}) {
    CHECK(std::filesystem::exists(a / f));
  }
  for (const auto& s : pipeline_stages()) {
    CHECK(pa.completed(s));
  }
  const auto stats = read_json_file(a / "weights_stats.json");
  CHECK(stats["model_hash_before"] == stats["model_hash_after"]);
  const auto report = slurp(a / "report.csv");
  for (const char* m : {"GRAM,", "w/o CA,", "w/o CT&CA,", "BM25,"}) {
    CHECK(report.find(m) != std::string::npos);
  }
  const auto index = load_index(a / "index.bin");
  CHECK(index.size() == 120);

  Pipeline pb(tiny_pipeline(b));
  pb.run(pipeline_stages());
  CHECK(slurp(b / "report.csv") == report);
  CHECK(file_hash(b / "index.bin") == file_hash(a / "index.bin"));
  CHECK(file_hash(b / "code_weights.json") == file_hash(a / "code_weights.json"));

  // The CLI and the service answer the same query identically.
  const auto d = load_run_data(a);
  RetrievalService svc(load_service_assets(a), pa.config().retrieval, load_index(a / "index.bin"));
  for (QueryId q : d.test_queries) {
    const auto& text = d.queries[q].text;
    const auto cli = run_command(std::string(GRAM_CLI) + " retrieve -v 0 --config " + (a / "config.json").string() +
                                 " --k 7 --query '" + text + "'");
    const auto reply = svc.retrieve(Json{{"query", text}, {"k", 7}}.dump());
    REQUIRE(reply.status == 200);
    CHECK(Json::parse(cli) == reply.body);
  }
}
