// Acceptance run: one PASS/FAIL line per criterion. Runs four full default
// pipelines (seeds 1, 2, 3 and a repeat of seed 1), so expect tens of minutes.
//
//   acceptance [work_dir]

#include "fixtures.hpp"
#include "gram/gradcheck.hpp"
#include "gram/service.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <thread>

using namespace gram;
using namespace gram::testing;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(int id, bool ok, const std::string& detail) {
  std::printf("%s %2d  %s\n", ok ? "PASS" : "FAIL", id, detail.c_str());
  std::fflush(stdout);
  failures += ok ? 0 : 1;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

double median3(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[1];
}

struct Run {
  std::filesystem::path dir;
  double seconds = 0.0;
  std::string aligned_before;  // checkpoint hash before and after train-weights
  std::string aligned_after;
};

Run run_pipeline(const std::filesystem::path& dir, std::uint64_t seed) {
  std::filesystem::remove_all(dir);
  PipelineConfig c;
  c.seed = seed;
  c.out_dir = dir.string();
  Pipeline p(c);
  Run r;
  r.dir = dir;
  const auto t0 = Clock::now();
  for (const auto& stage : pipeline_stages()) {
    if (stage == "train-weights") {
      r.aligned_before = file_hash(p.path("aligned.ckpt"));
    }
    p.run_stage(stage);
    if (stage == "train-weights") {
      r.aligned_after = file_hash(p.path("aligned.ckpt"));
    }
  }
  r.seconds = seconds_since(t0);
  return r;
}

std::map<std::string, Json> bench_rows(const Run& r) {
  std::map<std::string, Json> out;
  const Json report = read_json_file(r.dir / "report.json");
  for (const auto& m : report["methods"]) {
    out[m["method"].get<std::string>()] = m;
  }
  return out;
}

// 1
void gradients() {
  const auto t0 = Clock::now();
  const auto results = run_gradient_suite(1, 20);
  const double secs = seconds_since(t0);
  bool ok = secs < 60.0 && results.size() == 6;
  std::string detail;
  for (const auto& r : results) {
    ok = ok && r.passed && r.probes >= 20;
    detail += fmt("%s %.1e/%.0e ", r.objective.c_str(), r.max_rel_error, r.tolerance);
  }
  report(1, ok, "finite-difference checks: " + detail + fmt("(%.2fs)", secs));
}

// 2
void init_identity(const Run& run) {
  const RunData d = load_run_data(run.dir);
  const auto ctx = make_pair_context(d.vocab, d.queries, d.products);
  const auto pairs = read_alignment_jsonl(run.dir / "alignment_pairs.jsonl", d.lexicon);
  const auto sft = load_checkpoint<double>(run.dir / "ct.ckpt");
  Rng rng = make_rng(2, 0);
  double worst = 0.0;
  for (int b = 0; b < 10; ++b) {
    std::vector<PreferencePair> batch;
    const std::size_t n = 1 + uniform_index(rng, 64);
    for (std::size_t i = 0; i < n; ++i) {
      batch.push_back(pairs[uniform_index(rng, pairs.size())]);
    }
    worst = std::max(worst, std::abs(ca_loss(sft, sft, batch, ctx, AlignmentConfig{}) - std::log(2.0)));
  }
  report(2, worst <= 1e-9, fmt("ca_loss at the reference over 10 random batches: max |loss - ln 2| = %.2e", worst));
}

// 3
void enumerate(int vocab, TokenId eos, std::size_t max_len, TokenSeq& prefix, std::vector<TokenSeq>& out) {
  for (TokenId t = 0; t < vocab; ++t) {
    prefix.push_back(t);
    if (t == eos) {
      out.push_back(prefix);
    } else if (prefix.size() < max_len) {
      enumerate(vocab, eos, max_len, prefix, out);
    }
    prefix.pop_back();
  }
}

void beam_oracle() {
  bool ok = true;
  int cases = 0;
  for (int vocab : {3, 4, 5}) {
    for (std::size_t max_len : {1, 2, 3}) {
      for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        ModelConfig mc = tiny_model(vocab);
        mc.layers = 2;
        mc.init_std = 0.5;
        const auto p = Model::random(mc, mix_seed(seed, static_cast<std::uint64_t>(vocab * 10) + max_len));
        const TokenId eos = static_cast<TokenId>(vocab - 1);
        const TokenSeq prompt{0, static_cast<TokenId>(seed % static_cast<std::uint64_t>(vocab))};
        std::vector<TokenSeq> all;
        TokenSeq prefix;
        enumerate(vocab, eos, max_len, prefix, all);
        std::vector<std::pair<double, TokenSeq>> ranked;
        for (const auto& s : all) {
          ranked.emplace_back(sequence_logprob(p, prompt, s), s);
        }
        std::stable_sort(ranked.begin(), ranked.end(), [](auto& a, auto& b) { return a.first > b.first; });
        GenerationConfig gc;
        gc.beam_size = 125;
        gc.n_return = all.size();
        gc.max_code_tokens = max_len;
        const auto res = beam_search(p, prompt, gc, DecodeConstraints{eos, {}, nullptr});
        ok = ok && res.hypotheses.size() == ranked.size();
        for (std::size_t i = 0; ok && i < ranked.size(); ++i) {
          ok = res.hypotheses[i].tokens == ranked[i].second &&
               std::abs(res.hypotheses[i].logprob - ranked[i].first) <= 1e-9;
        }
        ++cases;
      }
    }
  }
  report(3, ok, fmt("beam search equals exhaustive enumeration on %d (vocab, length, seed) cases", cases));
}

// 4
void engine_oracle(const Run& run) {
  const RunData d = load_run_data(run.dir);
  const CodeIndex index(load_index(run.dir / "index.bin"));
  const auto snap = index.snapshot();
  const auto weights = std::make_shared<const CodeWeights>(read_code_weights(run.dir / "code_weights.json"));
  RetrievalConfig rc;
  rc.use_cache = false;
  Retriever retriever(std::make_shared<const Model>(load_checkpoint<double>(run.dir / "aligned.ckpt")),
                      std::make_shared<const Vocabulary>(d.vocab), std::make_shared<const AttributeLexicon>(d.lexicon),
                      weights, index, rc);
  Rng rng = make_rng(4, 0);
  bool ok = snap->size() == 2000;
  std::size_t candidates = 0;
  for (int i = 0; i < 100; ++i) {
    const auto& q = d.queries[uniform_index(rng, d.queries.size())];
    const auto res = retriever.retrieve(q.text);
    const auto codes = retriever.query_codes(q.text, snap->version);
    // Full scan over every product's own code list.
    std::vector<RetrievedItem> all;
    for (const auto& [pid, gc] : snap->products) {
      RetrievedItem item{pid, 0.0, {}};
      for (std::size_t a = 0; a < codes.codes.size(); ++a) {
        for (std::size_t b = 0; b < gc.codes.size(); ++b) {
          if (codes.codes[a] != gc.codes[b]) {
            continue;
          }
          double s = 0.0;
          for (std::size_t t = 0; t < codes.profiles[a].size(); ++t) {
            const double x = codes.profiles[a][t];
            const double y = gc.profiles[b][t];
            s += x * std::log(2 * x / (x + y)) + y * std::log(2 * y / (x + y));
          }
          item.score += weights->get(codes.codes[a]) * s;
          item.codes.push_back(codes.codes[a]);
        }
      }
      if (!item.codes.empty()) {
        all.push_back(std::move(item));
      }
    }
    std::stable_sort(all.begin(), all.end(), [](const auto& x, const auto& y) { return x.score > y.score; });
    candidates += all.size();
    if (all.size() > rc.top_n) {
      all.resize(rc.top_n);
    }
    ok = ok && res.items.size() == all.size();
    for (std::size_t j = 0; ok && j < all.size(); ++j) {
      ok = res.items[j].product == all[j].product && std::abs(res.items[j].score - all[j].score) <= 1e-9 &&
           res.items[j].codes == all[j].codes;
    }
  }
  report(4, ok, fmt("engine equals full scan on %zu products for 100 queries (%zu candidates in total)",
                    snap->size(), candidates));
}

// 5
void metric_oracles() {
  bool ok = recall_at_k({{1, 2, 3}, {7, 8}}, {{2, 9}, {7}}, 3).recall == 0.75;
  Rng rng = make_rng(5, 0);
  double worst = 0.0;
  for (int log = 0; log < 50; ++log) {
    std::vector<Ranking> results;
    std::vector<std::set<ProductId>> clicked;
    std::vector<std::vector<double>> scores;
    const std::size_t nq = 50;
    for (std::size_t q = 0; q < nq; ++q) {
      Ranking r;
      std::set<ProductId> used;
      const std::size_t len = uniform_index(rng, 400);
      while (r.size() < len) {
        const ProductId p = static_cast<ProductId>(uniform_index(rng, 1000));
        if (used.insert(p).second) {
          r.push_back(p);
        }
      }
      std::set<ProductId> c;
      const std::size_t nc = uniform_index(rng, 8);
      for (std::size_t i = 0; i < nc; ++i) {
        c.insert(r.empty() || uniform01(rng) < 0.5 ? static_cast<ProductId>(uniform_index(rng, 1000))
                                                   : r[uniform_index(rng, r.size())]);
      }
      std::vector<double> s(1000);
      for (auto& v : s) {
        v = uniform01(rng);
      }
      results.push_back(r);
      clicked.push_back(c);
      scores.push_back(s);
    }
    for (std::size_t k : {1, 10, 100, 300}) {
      double sum = 0.0;
      int n = 0;
      for (std::size_t q = 0; q < nq; ++q) {
        if (clicked[q].empty()) {
          continue;
        }
        std::size_t hit = 0;
        for (ProductId c : clicked[q]) {
          const auto end = results[q].begin() + static_cast<std::ptrdiff_t>(std::min(k, results[q].size()));
          hit += std::find(results[q].begin(), end, c) != end ? 1 : 0;
        }
        sum += static_cast<double>(hit) / static_cast<double>(clicked[q].size());
        ++n;
      }
      worst = std::max(worst, std::abs(recall_at_k(results, clicked, k).recall - (n ? sum / n : 0.0)));
    }
    double rel = 0.0;
    for (std::size_t q = 0; q < nq; ++q) {
      std::size_t good = 0;
      for (ProductId p : results[q]) {
        good += scores[q][p] >= 0.5 ? 1 : 0;
      }
      rel += results[q].empty() ? 0.0 : static_cast<double>(good) / static_cast<double>(results[q].size());
    }
    const auto judge = [&](std::size_t q, ProductId p) { return scores[q][p]; };
    worst = std::max(worst, std::abs(relevance_ratio(results, judge, 0.5).ratio - rel / nq));
  }
  ok = ok && worst <= 1e-12;
  report(5, ok, fmt("worked example gives 0.75; recall and relevance ratio on 50 logs: max deviation %.1e", worst));
}

// 6
void jsd_properties() {
  Rng rng = make_rng(6, 0);
  std::size_t bad = 0;
  for (int i = 0; i < 100000; ++i) {
    const double p = 1e-12 + uniform01(rng) * (1.0 - 1e-12);
    const double q = i % 10 == 0 ? p : 1e-12 + uniform01(rng) * (1.0 - 1e-12);
    const double v = jsd_term(p, q);
    bad += v >= 0.0 ? 0 : 1;
    bad += v == jsd_term(q, p) ? 0 : 1;
    bad += (v == 0.0) == (p == q) ? 0 : 1;
    bad += jsd_term(p, p) == 0.0 ? 0 : 1;
  }
  const double direct = 0.9 * std::log(1.8) + 0.1 * std::log(0.2);
  const double at = jsd_term(0.9, 0.1);
  const bool ok = bad == 0 && std::abs(at - direct) <= 1e-6 && std::abs(at - 0.3681) < 5e-5;
  report(6, ok, fmt("1e5 pairs with %zu property violations; jsd(0.9, 0.1) = %.6f", bad, at));
}

// 7
void repetition_grid() {
  std::size_t bad = 0;
  for (std::uint32_t k = 1; k <= 25; ++k) {
    for (std::size_t l = 1; l <= 6; ++l) {
      const double alpha = static_cast<double>(l) / 6.0;
      const auto want = std::max<long long>(1, std::llround(std::sqrt(static_cast<double>(k)) * alpha));
      PreferencePair p;
      p.support = k;
      AttributeSet attrs{{AttributeType::Category, "c"}};
      for (std::size_t i = 1; i < l; ++i) {
        attrs.push_back({static_cast<AttributeType>(i), "v"});
      }
      p.positive = make_canonical_code(attrs);
      const auto out = resample_positives({p}, AlignmentConfig{});
      bad += out.size() == 1 && out[0].repetitions == want && repetition_count(k, l, 6) == want ? 0 : 1;
    }
  }
  report(7, bad == 0, fmt("repetition counts over k 1..25 and code length 1..6: %zu mismatches", bad));
}

// 8
void frozen_model(const std::vector<Run>& runs) {
  bool ok = true;
  for (const auto& r : runs) {
    const auto stats = read_json_file(r.dir / "weights_stats.json");
    ok = ok && !r.aligned_before.empty() && r.aligned_before == r.aligned_after &&
         stats["model_hash_before"] == stats["model_hash_after"];
  }
  report(8, ok, fmt("aligned checkpoint unchanged by weight training in %zu runs", runs.size()));
}

// 9
void learning_signal(const Run& run) {
  const RunData d = load_run_data(run.dir);
  PipelineConfig c;
  std::vector<const QueryRecord*> queries;
  for (QueryId q : d.test_queries) {
    queries.push_back(&d.queries.at(q));
  }
  const auto clicked = d.test_clicked();
  const double gram = bench_rows(run)["GRAM"]["recall@100"].get<double>();

  const auto untrained = std::make_shared<const Model>(
      Model::random(Pipeline(c).model_config(d.vocab.size()), mix_seed(9, 1)));
  const CodeIndex index(build_index(d.products, *untrained, d.vocab, d.lexicon, c.retrieval.generation));
  const Retriever r(untrained, std::make_shared<const Vocabulary>(d.vocab),
                    std::make_shared<const AttributeLexicon>(d.lexicon), std::make_shared<const CodeWeights>(),
                    index, c.retrieval);
  const double untrained_r100 = recall_at_k(run_retrieval(r, queries), clicked, 100).recall;

  Rng rng = make_rng(9, 2);
  std::vector<Ranking> random_rankings;
  for (std::size_t q = 0; q < queries.size(); ++q) {
    Ranking all(d.products.size());
    for (std::size_t i = 0; i < all.size(); ++i) {
      all[i] = static_cast<ProductId>(i);
    }
    std::shuffle(all.begin(), all.end(), rng);
    all.resize(c.retrieval.top_n);
    random_rankings.push_back(std::move(all));
  }
  const double random_r100 = recall_at_k(random_rankings, clicked, 100).recall;
  const bool ok = gram >= 5.0 * untrained_r100 && gram >= 5.0 * random_r100 && run.seconds < 1800.0;
  report(9, ok, fmt("R@100 GRAM %.3f, untrained %.3f, random %.3f; pipeline %.0fs", gram, untrained_r100, random_r100,
                    run.seconds));
}

// 10
void ablation(const std::vector<Run>& runs) {
  std::map<std::string, std::vector<double>> r300;
  std::map<std::string, std::vector<double>> relr;
  for (const auto& run : runs) {
    for (auto& [name, m] : bench_rows(run)) {
      r300[name].push_back(m["ok"].get<bool>() ? m["recall@300"].get<double>() : -1.0);
      relr[name].push_back(m["ok"].get<bool>() ? m["relr"].get<double>() : -1.0);
    }
  }
  const double g = median3(r300["GRAM"]);
  const double ca = median3(r300["w/o CA"]);
  const double ctca = median3(r300["w/o CT&CA"]);
  const double gr = median3(relr["GRAM"]);
  const double car = median3(relr["w/o CA"]);
  const bool ok = g >= ca && ca >= ctca && gr >= car;
  report(10, ok, fmt("median R@300 GRAM %.4f, w/o CA %.4f, w/o CT&CA %.4f; RelR GRAM %.4f, w/o CA %.4f", g, ca, ctca,
                     gr, car));
}

// 11
void concurrency() {
  CatalogSpec spec;
  spec.n_products = 1600;
  spec.n_queries = 40;
  spec.seed = 11;
  const World world = generate_world(spec);
  const Vocabulary vocab = corpus_vocabulary(world.lexicon, world.filler, world.products);
  ServiceAssets assets;
  assets.model = std::make_shared<const Model>(Model::random(tiny_model(static_cast<int>(vocab.size())), 11));
  assets.vocab = std::make_shared<const Vocabulary>(vocab);
  assets.lexicon = std::make_shared<const AttributeLexicon>(world.lexicon);
  assets.weights = std::make_shared<const CodeWeights>();
  RetrievalConfig rc;
  rc.generation.beam_size = 3;
  rc.generation.n_return = 3;
  rc.generation.max_code_tokens = 6;
  rc.top_n = 50;
  const std::vector<ProductRecord> initial(world.products.begin(), world.products.begin() + 600);
  RetrievalService svc(assets, rc, build_index(initial, *assets.model, vocab, world.lexicon, rc.generation));

  std::vector<std::string> queries;
  for (std::size_t i = 0; i < 10; ++i) {
    queries.push_back(world.queries[i].text);
  }
  std::map<std::uint64_t, std::shared_ptr<const IndexSnapshot>> history;
  history[svc.index().version()] = svc.index().snapshot();
  struct Seen {
    std::size_t query;
    RetrievalResult result;
  };
  constexpr std::size_t kReaders = 10;
  constexpr std::size_t kPerReader = 10;
  std::size_t torn = 0;
  std::size_t straddled = 0;
  std::size_t checked = 0;
  for (std::size_t it = 0; it < 1000; ++it) {
    const std::uint64_t before = svc.index().version();
    auto done = svc.submit(world.products[600 + it % 1000]);
    std::vector<std::vector<Seen>> seen(kReaders);
    std::vector<std::thread> readers;
    for (std::size_t t = 0; t < kReaders; ++t) {
      readers.emplace_back([&, t] {
        for (std::size_t i = 0; i < kPerReader; ++i) {
          const std::size_t q = (t + i + it) % queries.size();
          seen[t].push_back({q, svc.retriever().retrieve(queries[q])});
        }
      });
    }
    const std::uint64_t after = done.get();
    history[after] = svc.index().snapshot();
    for (auto& r : readers) {
      r.join();
    }
    bool saw_old = false;
    bool saw_new = false;
    for (const auto& per_thread : seen) {
      for (const auto& s : per_thread) {
        ++checked;
        const auto v = s.result.index_version;
        saw_old = saw_old || v == before;
        saw_new = saw_new || v == after;
        if (v != before && v != after) {
          ++torn;
          continue;
        }
        const auto& snap = history.at(v);
        const auto codes = svc.retriever().query_codes(queries[s.query], v);
        torn += score_candidates(codes, *snap, *assets.weights, rc.top_n) == s.result.items ? 0 : 1;
      }
    }
    straddled += saw_old && saw_new ? 1 : 0;
  }
  report(11, torn == 0 && checked == 100000,
         fmt("%zu retrieves across 1000 upserts, %zu inconsistent; %zu iterations observed both versions", checked,
             torn, straddled));
}

// 12
void determinism(const Run& a, const Run& b) {
  bool ok = true;
  for (const char* f : {"report.csv", "report.json", "report.md", "eval.json", "index.bin", "code_weights.json",
                        "aligned.ckpt"}) {
    ok = ok && std::filesystem::exists(a.dir / f) && slurp(a.dir / f) == slurp(b.dir / f);
  }
  const auto ha = read_json_file(a.dir / "manifests" / "bench.json")["config_hash"];
  const auto hb = read_json_file(b.dir / "manifests" / "bench.json")["config_hash"];
  report(12, ok && ha == hb, "two seed-1 runs produce byte-identical reports, index, weights and checkpoint");
}

}  // namespace

int main(int argc, char** argv) {
  const std::filesystem::path work =
      argc > 1 ? std::filesystem::path(argv[1]) : std::filesystem::temp_directory_path() / "gram_acceptance";
  set_log_level(0);
  std::vector<Run> runs;
  try {
    for (std::uint64_t seed : {1, 2, 3}) {
      runs.push_back(run_pipeline(work / ("seed" + std::to_string(seed)), seed));
      std::printf("  seed %llu pipeline finished in %.0fs\n", static_cast<unsigned long long>(seed),
                  runs.back().seconds);
      std::fflush(stdout);
    }
    const Run repeat = run_pipeline(work / "seed1_repeat", 1);

    gradients();
    init_identity(runs[0]);
    beam_oracle();
    engine_oracle(runs[0]);
    metric_oracles();
    jsd_properties();
    repetition_grid();
    frozen_model(runs);
    learning_signal(runs[0]);
    ablation(runs);
    concurrency();
    determinism(runs[0], repeat);
  } catch (const std::exception& e) {
    std::printf("FAIL     acceptance run aborted: %s\n", e.what());
    return 1;
  }
  std::printf("%s: %d criteria failed\n", failures == 0 ? "ACCEPTED" : "REJECTED", failures);
  return failures == 0 ? 0 : 1;
}
