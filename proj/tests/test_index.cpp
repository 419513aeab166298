#include <doctest.h>

#include "fixtures.hpp"

#include <algorithm>
#include <fstream>

using namespace gram;
using namespace gram::testing;

namespace {

GeneratedCodes random_codes(Rng& rng, std::size_t n_codes, std::size_t universe) {
  GeneratedCodes g;
  std::set<std::size_t> picked;
  while (picked.size() < n_codes) {
    picked.insert(uniform_index(rng, universe));
  }
  for (auto c : picked) {
    g.codes.push_back("c" + std::to_string(c));
    TokenProbProfile prof(1 + c % 4);
    for (auto& v : prof) {
      v = 0.01 + 0.99 * uniform01(rng);
    }
    g.profiles.push_back(prof);
  }
  return g;
}

// Scores every product by scanning its own code list.
std::vector<RetrievedItem> brute_force(const GeneratedCodes& q, const std::map<ProductId, GeneratedCodes>& table,
                                       const CodeWeights& w, std::size_t n) {
  std::vector<RetrievedItem> all;
  for (const auto& [pid, gc] : table) {
    RetrievedItem item{pid, 0.0, {}};
    for (std::size_t i = 0; i < q.codes.size(); ++i) {
      for (std::size_t j = 0; j < gc.codes.size(); ++j) {
        if (q.codes[i] == gc.codes[j]) {
          double s = 0.0;
          for (std::size_t t = 0; t < q.profiles[i].size(); ++t) {
            const double a = q.profiles[i][t];
            const double b = gc.profiles[j][t];
            s += a * std::log(2 * a / (a + b)) + b * std::log(2 * b / (a + b));
          }
          item.score += w.get(q.codes[i]) * s;
          item.codes.push_back(q.codes[i]);
        }
      }
    }
    if (!item.codes.empty()) {
      all.push_back(item);
    }
  }
  std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
  if (all.size() > n) {
    all.resize(n);
  }
  return all;
}

}  // namespace

TEST_CASE("score_candidates matches brute force") {
  Rng rng = make_rng(21, 0);
  std::map<ProductId, GeneratedCodes> table;
  for (ProductId p = 0; p < 300; ++p) {
    table[p] = random_codes(rng, 1 + uniform_index(rng, 5), 40);
  }
  const auto snap = make_snapshot(table, 1);
  CodeWeights w;
  for (int c = 0; c < 40; c += 3) {
    w.set("c" + std::to_string(c), 0.5 + c * 0.1);
  }
  for (int trial = 0; trial < 30; ++trial) {
    const auto q = random_codes(rng, 1 + uniform_index(rng, 6), 40);
    const auto got = score_candidates(q, snap, w, 25);
    const auto want = brute_force(q, table, w, 25);
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      CHECK(got[i].product == want[i].product);
      CHECK(std::abs(got[i].score - want[i].score) <= 1e-9);
      CHECK(got[i].codes == want[i].codes);
    }
  }
}

TEST_CASE("ties rank by ascending product id") {
  GeneratedCodes g{{"x"}, {{0.5}}, false};
  std::map<ProductId, GeneratedCodes> table{{7, g}, {3, g}, {5, g}};
  const auto res = score_candidates(g, make_snapshot(table, 1), CodeWeights{}, 10);
  REQUIRE(res.size() == 3);
  CHECK(res[0].product == 3);
  CHECK(res[1].product == 5);
  CHECK(res[2].product == 7);
  CHECK(score_candidates(g, make_snapshot(table, 1), CodeWeights{}, 2).size() == 2);
}

TEST_CASE("code index versions and snapshot isolation") {
  CodeIndex index;
  CHECK(index.version() == 0);
  CHECK(index.snapshot()->size() == 0);
  const GeneratedCodes a{{"x", "y"}, {{0.5}, {0.2, 0.3}}, false};
  CHECK(index.upsert(1, a) == 1);
  const auto old = index.snapshot();
  CHECK(index.upsert(2, GeneratedCodes{{"x"}, {{0.9}}, true}) == 2);
  CHECK(old->size() == 1);
  CHECK(old->find("x")->size() == 1);
  const auto now = index.snapshot();
  CHECK(now->find("x")->size() == 2);
  CHECK(now->fallbacks == 1);
  CHECK(index.upsert(1, GeneratedCodes{{"z"}, {{0.4}}, false}) == 3);
  CHECK(index.snapshot()->find("y") == nullptr);
  CHECK(index.remove(2) == 4);
  CHECK(index.snapshot()->find("x") == nullptr);
  CHECK_THROWS_AS(index.upsert(3, GeneratedCodes{{"z"}, {}, false}), DataError);
  CHECK(index.version() == 4);
}

TEST_CASE("index file round-trip and validation") {
  Rng rng = make_rng(4, 0);
  std::map<ProductId, GeneratedCodes> table;
  for (ProductId p = 0; p < 50; ++p) {
    table[p] = random_codes(rng, 1 + uniform_index(rng, 4), 20);
  }
  table[7].fallback = true;
  const auto snap = make_snapshot(table, 9);
  const auto dir = temp_dir("indexio");
  save_index(dir / "index.bin", snap);
  const auto back = load_index(dir / "index.bin");
  CHECK(back == snap);
  CHECK(back.checksum() == snap.checksum());
  CHECK(back.fallbacks == 1);

  std::ifstream in(dir / "index.bin", std::ios::binary);
  char magic[8];
  in.read(magic, 8);
  CHECK(std::string(magic, 7) == "GRAMIDX");

  {
    std::ofstream bad(dir / "bad.bin", std::ios::binary);
    bad << "NOTANIDX";
  }
  CHECK_THROWS_AS(load_index(dir / "bad.bin"), DataError);
  const auto size = std::filesystem::file_size(dir / "index.bin");
  std::filesystem::copy_file(dir / "index.bin", dir / "short.bin");
  std::filesystem::resize_file(dir / "short.bin", size - 5);
  CHECK_THROWS_AS(load_index(dir / "short.bin"), DataError);
}

TEST_CASE("query cache is LRU and version-checked") {
  QueryCache cache(2);
  const GeneratedCodes g{{"x"}, {{0.5}}, false};
  cache.put("a", 1, g);
  cache.put("b", 1, g);
  CHECK(cache.get("a", 1).has_value());
  cache.put("c", 1, g);  // evicts b
  CHECK_FALSE(cache.get("b", 1).has_value());
  CHECK(cache.get("c", 1).has_value());
  CHECK_FALSE(cache.get("a", 2).has_value());
  CHECK(cache.size() <= 2);
  CHECK(cache.hits() == 2);
  CHECK(cache.misses() == 2);
  QueryCache off(0);
  off.put("a", 1, g);
  CHECK_FALSE(off.get("a", 1).has_value());
}

TEST_CASE("generated codes are canonical with per-token profiles") {
  const auto w = small_world();
  const auto model = Model::random(tiny_model(static_cast<int>(w.vocab.size())), 8);
  GenerationConfig gen;
  gen.beam_size = 5;
  gen.n_return = 5;
  gen.max_code_tokens = 6;
  const auto& p = w.world.products[0];
  const auto g = generate_product_codes(model, w.vocab, w.world.lexicon, p, gen);
  REQUIRE(!g.codes.empty());
  for (std::size_t i = 0; i < g.codes.size(); ++i) {
    const Code c = parse_code(g.codes[i], w.world.lexicon);
    CHECK(make_canonical_code(code_attribute_set(c)).str() == g.codes[i]);
    const auto target = encode_code(w.vocab, c);
    REQUIRE(g.profiles[i].size() == target.size());
    const auto prompt = generation_prompt(w.vocab, Side::Product, p.title, model.config(), gen);
    const auto lp = token_logprobs(model, prompt, target);
    for (std::size_t t = 0; t < lp.size(); ++t) {
      CHECK(g.profiles[i][t] == doctest::Approx(std::exp(lp[t])).epsilon(1e-9));
    }
  }
  std::set<std::string> distinct(g.codes.begin(), g.codes.end());
  CHECK(distinct.size() == g.codes.size());
  CHECK(generate_product_codes(model, w.vocab, w.world.lexicon, p, gen) == g);
}

TEST_CASE("retriever uses the index version and cache") {
  const auto w = small_world();
  const auto model = std::make_shared<const Model>(Model::random(tiny_model(static_cast<int>(w.vocab.size())), 8));
  RetrievalConfig rc;
  rc.generation.beam_size = 4;
  rc.generation.n_return = 4;
  rc.generation.max_code_tokens = 6;
  rc.top_n = 20;
  std::vector<ProductRecord> some(w.world.products.begin(), w.world.products.begin() + 40);
  CodeIndex index(build_index(some, *model, w.vocab, w.world.lexicon, rc.generation));
  Retriever r(model, std::make_shared<const Vocabulary>(w.vocab),
              std::make_shared<const AttributeLexicon>(w.world.lexicon), std::make_shared<const CodeWeights>(), index,
              rc);
  CHECK_THROWS_AS(r.retrieve(""), DataError);
  const auto& q = w.world.queries[0].text;
  const auto a = r.retrieve(q);
  const auto b = r.retrieve(q, 3);
  CHECK(a.index_version == 1);
  CHECK(r.cache().hits() == 1);
  CHECK(b.items.size() <= 3);
  CHECK(a.items.size() <= 20);
  for (std::size_t i = 0; i < b.items.size(); ++i) {
    CHECK(b.items[i] == a.items[i]);
  }
  const auto direct = score_candidates(r.query_codes(q, 1), *index.snapshot(), CodeWeights{}, 20);
  CHECK(direct == a.items);
}

TEST_CASE("cache on and off give identical results") {
  const auto w = small_world();
  const auto model = std::make_shared<const Model>(Model::random(tiny_model(static_cast<int>(w.vocab.size())), 9));
  RetrievalConfig rc;
  rc.generation.beam_size = 4;
  rc.generation.n_return = 4;
  rc.generation.max_code_tokens = 6;
  rc.top_n = 25;
  rc.cache_capacity = 3;
  std::vector<ProductRecord> some(w.world.products.begin(), w.world.products.begin() + 80);
  CodeIndex index(build_index(some, *model, w.vocab, w.world.lexicon, rc.generation));
  const auto vocab = std::make_shared<const Vocabulary>(w.vocab);
  const auto lexicon = std::make_shared<const AttributeLexicon>(w.world.lexicon);
  const auto weights = std::make_shared<const CodeWeights>();
  Retriever cached(model, vocab, lexicon, weights, index, rc);
  auto off = rc;
  off.use_cache = false;
  Retriever uncached(model, vocab, lexicon, weights, index, off);
  for (int round = 0; round < 3; ++round) {
    for (std::size_t i : {0, 1, 0, 2, 0, 3, 0, 4, 1, 0}) {
      const auto& q = w.world.queries[i].text;
      const auto a = cached.retrieve(q);
      const auto b = uncached.retrieve(q);
      CHECK(a.index_version == b.index_version);
      CHECK(a.query_codes == b.query_codes);
      CHECK(a.items == b.items);
    }
    index.upsert(static_cast<ProductId>(100 + round),
                 generate_product_codes(*model, w.vocab, w.world.lexicon, w.world.products[100 + round],
                                        rc.generation));
  }
  CHECK(cached.cache().hits() > 0);
  CHECK(uncached.cache().size() == 0);
}

TEST_CASE("empty product set builds an empty index") {
  const auto w = small_world();
  const auto model = Model::random(tiny_model(static_cast<int>(w.vocab.size())), 9);
  const auto snap = build_index({}, model, w.vocab, w.world.lexicon, GenerationConfig{});
  CHECK(snap.size() == 0);
  CHECK(snap.postings.empty());
  const auto path = temp_dir("emptyindex") / "index.bin";
  save_index(path, snap);
  CHECK(load_index(path) == snap);
  CodeIndex index(snap);
  Retriever r(std::make_shared<const Model>(model), std::make_shared<const Vocabulary>(w.vocab),
              std::make_shared<const AttributeLexicon>(w.world.lexicon), std::make_shared<const CodeWeights>(), index,
              RetrievalConfig{});
  CHECK(r.retrieve(w.world.queries[0].text).items.empty());
}
