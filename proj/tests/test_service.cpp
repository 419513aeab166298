#include <doctest.h>

#include "fixtures.hpp"
#include "gram/service.hpp"

#include <httplib.h>

#include <atomic>
#include <thread>

using namespace gram;
using namespace gram::testing;

namespace {

struct Fixture {
  SmallWorld w = small_world();
  ServiceAssets assets;
  RetrievalConfig rc;
  IndexSnapshot initial;

  Fixture() {
    assets.model = std::make_shared<const Model>(Model::random(tiny_model(static_cast<int>(w.vocab.size())), 8));
    assets.vocab = std::make_shared<const Vocabulary>(w.vocab);
    assets.lexicon = std::make_shared<const AttributeLexicon>(w.world.lexicon);
    assets.weights = std::make_shared<const CodeWeights>();
    rc.generation.beam_size = 3;
    rc.generation.n_return = 3;
    rc.generation.max_code_tokens = 6;
    rc.top_n = 30;
    const std::vector<ProductRecord> some(w.world.products.begin(), w.world.products.begin() + 60);
    initial = build_index(some, *assets.model, w.vocab, w.world.lexicon, rc.generation);
  }

  Json product_body(std::size_t i) const { return {{"product", product_to_json(w.world.products.at(i))}}; }
};

Json retrieve_body(const std::string& q, std::optional<int> k = std::nullopt) {
  Json j = {{"query", q}};
  if (k) {
    j["k"] = *k;
  }
  return j;
}

}  // namespace

TEST_CASE("retrieve validates requests") {
  Fixture f;
  RetrievalService svc(f.assets, f.rc, f.initial);
  CHECK(svc.retrieve("{").status == 400);
  CHECK(svc.retrieve(R"({"k": 3})").status == 400);
  CHECK(svc.retrieve(retrieve_body("").dump()).status == 400);
  CHECK(svc.retrieve(retrieve_body("   ").dump()).status == 400);
  CHECK(svc.retrieve(retrieve_body("x", 0).dump()).status == 400);
  CHECK(svc.retrieve(R"({"query": "x", "k": "five"})").status == 400);

  const auto& q = f.w.world.queries[0].text;
  const auto r = svc.retrieve(retrieve_body(q, 5).dump());
  REQUIRE(r.status == 200);
  CHECK(r.body["index_version"] == 1);
  CHECK(r.body["products"].size() <= 5);
  for (const auto& p : r.body["products"]) {
    CHECK(p["id"].is_string());
    CHECK(p["score"].is_number());
    CHECK(p["codes"].is_array());
    CHECK(!p["codes"].empty());
  }
}

TEST_CASE("uninitialized index answers 503") {
  Fixture f;
  RetrievalService svc(f.assets, f.rc, std::nullopt);
  CHECK(svc.retrieve(retrieve_body("anything").dump()).status == 503);
  CHECK(svc.upsert(f.product_body(0).dump()).status == 503);
  CHECK(svc.health().body["status"] == "uninitialized");
  svc.load(f.initial);
  CHECK(svc.retrieve(retrieve_body("anything").dump()).status == 200);
  CHECK(svc.health().body["status"] == "ok");
}

TEST_CASE("upsert publishes a new version") {
  Fixture f;
  RetrievalService svc(f.assets, f.rc, f.initial);
  CHECK(svc.upsert("not json").status == 400);
  CHECK(svc.upsert(R"({"item": {}})").status == 400);
  CHECK(svc.upsert(R"({"product": {"product_id": "p000001", "title": "x"}})").status == 400);
  CHECK(svc.upsert(R"({"product": {"product_id": "p000001", "title": "x", "attributes": [{"type": "color", "value": "nonexistent-value"}]}})")
            .status == 400);
  const auto r = svc.upsert(f.product_body(100).dump());
  REQUIRE(r.status == 200);
  CHECK(r.body["new_version"] == 2);
  CHECK(svc.index().snapshot()->products.count(100) == 1);
  CHECK(svc.upsert(f.product_body(101).dump()).body["new_version"] == 3);
  CHECK(svc.health().body["index_version"] == 3);
  CHECK(svc.health().body["products"] == 62);
}

TEST_CASE("concurrent retrieves during upserts see whole snapshots") {
  Fixture f;
  RetrievalService svc(f.assets, f.rc, f.initial);
  std::vector<std::string> queries;
  for (std::size_t i = 0; i < 8; ++i) {
    queries.push_back(f.w.world.queries[i].text);
  }
  std::map<std::uint64_t, std::shared_ptr<const IndexSnapshot>> history;
  history[1] = svc.index().snapshot();
  std::mutex history_mu;
  std::atomic<bool> done{false};
  std::thread writer([&] {
    for (std::size_t i = 60; i < 80; ++i) {
      const auto v = svc.submit(f.w.world.products[i]).get();
      std::lock_guard lock(history_mu);
      history[v] = svc.index().snapshot();
    }
    done = true;
  });
  struct Seen {
    std::size_t query;
    RetrievalResult result;
  };
  std::vector<std::vector<Seen>> seen(8);
  std::vector<std::thread> readers;
  for (std::size_t t = 0; t < 8; ++t) {
    readers.emplace_back([&, t] {
      for (std::size_t i = 0; !done || i < 10; ++i) {
        const std::size_t q = (t + i) % queries.size();
        seen[t].push_back({q, svc.retriever().retrieve(queries[q])});
      }
    });
  }
  writer.join();
  for (auto& r : readers) {
    r.join();
  }
  CHECK(history.size() == 21);
  for (const auto& per_thread : seen) {
    std::uint64_t last = 0;
    for (const auto& s : per_thread) {
      CHECK(s.result.index_version >= last);
      last = s.result.index_version;
      const auto& snap = history.at(s.result.index_version);
      const auto codes = svc.retriever().query_codes(queries[s.query], snap->version);
      CHECK(score_candidates(codes, *snap, CodeWeights{}, f.rc.top_n) == s.result.items);
    }
  }
}

TEST_CASE("http front end") {
  Fixture f;
  RetrievalService svc(f.assets, f.rc, f.initial);
  HttpServer server(svc);
  const int port = server.bind("127.0.0.1", 0);
  std::thread loop([&] { server.listen(); });
  httplib::Client client("127.0.0.1", port);
  for (int i = 0; i < 100 && !client.Get("/health"); ++i) {
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
  auto h = client.Get("/health");
  REQUIRE(h);
  CHECK(h->status == 200);
  CHECK(Json::parse(h->body)["index_version"] == 1);
  auto r = client.Post("/retrieve", retrieve_body(f.w.world.queries[0].text, 4).dump(), "application/json");
  REQUIRE(r);
  CHECK(r->status == 200);
  CHECK(Json::parse(r->body).contains("products"));
  auto bad = client.Post("/retrieve", retrieve_body("").dump(), "application/json");
  REQUIRE(bad);
  CHECK(bad->status == 400);
  auto up = client.Post("/upsert", f.product_body(120).dump(), "application/json");
  REQUIRE(up);
  CHECK(up->status == 200);
  CHECK(Json::parse(up->body)["new_version"] == 2);
  server.stop();
  loop.join();
}
