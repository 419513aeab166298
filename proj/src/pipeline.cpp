#include "gram/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace gram {

namespace fs = std::filesystem;

PipelineConfig::PipelineConfig() {
  sft.adamw.lr = 3e-3;
  align.adamw.lr = 1e-5;
  align.max_pairs = 2000;
  align.adamw.weight_decay = 0.0;
}

namespace {

// Every configurable field as (section, key, reference). The top level uses
// an empty section name.
template <typename Cfg, typename F>
void visit_fields(Cfg& c, F&& f) {
  f("", "seed", c.seed);
  f("", "out_dir", c.out_dir);

  f("corpus", "n_products", c.corpus.n_products);
  f("corpus", "n_queries", c.corpus.n_queries);
  f("corpus", "n_test_queries", c.n_test_queries);
  f("corpus", "lexicon_sizes", c.corpus.lexicon_sizes);
  f("corpus", "inclusion", c.corpus.inclusion);
  f("corpus", "max_attributes", c.corpus.max_attributes);
  f("corpus", "filler_words", c.corpus.filler_words);
  f("corpus", "max_title_filler", c.corpus.max_title_filler);
  f("corpus", "max_query_tokens", c.corpus.max_query_tokens);
  f("corpus", "query_keep", c.corpus.query_keep);
  f("corpus", "max_query_extra", c.corpus.max_query_extra);
  f("corpus", "query_filler", c.corpus.query_filler);
  f("corpus", "query_noise", c.corpus.query_noise);
  f("corpus", "click_ceiling", c.corpus.click_ceiling);
  f("corpus", "click_slope", c.corpus.click_slope);
  f("corpus", "click_midpoint", c.corpus.click_midpoint);
  f("corpus", "max_extra_clicks", c.corpus.max_extra_clicks);
  f("corpus", "extraction_p_drop", c.extraction_p_drop);
  f("corpus", "min_click_count", c.codes.min_click_count);
  f("corpus", "max_codes", c.codes.max_codes);

  f("model", "max_len", c.model.max_len);
  f("model", "width", c.model.width);
  f("model", "layers", c.model.layers);
  f("model", "heads", c.model.heads);
  f("model", "ffn_width", c.model.ffn_width);
  f("model", "init_std", c.model.init_std);

  f("sft", "lambda", c.sft.lambda);
  f("sft", "epochs", c.sft.epochs);
  f("sft", "augmented_epochs", c.augmented_epochs);
  f("sft", "batch_size", c.sft.batch_size);
  f("sft", "lr", c.sft.adamw.lr);
  f("sft", "weight_decay", c.sft.adamw.weight_decay);
  f("sft", "dropout", c.sft.dropout);
  f("sft", "heldout_fraction", c.sft.heldout_fraction);

  f("augment", "n_codes", c.augment.n_codes);
  f("augment", "beam_size", c.augment.generation.beam_size);

  f("align", "beta_w", c.align.beta_w);
  f("align", "beta_l", c.align.beta_l);
  f("align", "nll_weight", c.align.nll_weight);
  f("align", "max_code_l", c.align.max_code_l);
  f("align", "negatives_per_positive", c.align.negatives_per_positive);
  f("align", "max_pairs", c.align.max_pairs);
  f("align", "epochs", c.align.epochs);
  f("align", "batch_size", c.align.batch_size);
  f("align", "lr", c.align.adamw.lr);
  f("align", "weight_decay", c.align.adamw.weight_decay);
  f("align", "dropout", c.align.dropout);
  f("align", "heldout_fraction", c.align.heldout_fraction);

  f("weights", "epochs", c.weights.epochs);
  f("weights", "batch_size", c.weights.batch_size);
  f("weights", "lr", c.weights.lr);
  f("weights", "margin", c.weights.margin);
  f("weights", "top_k", c.align.top_k);
  f("weights", "negatives_per_positive", c.weight_negatives);
  f("weights", "relevance_threshold", c.weight_relevance_threshold);
  f("weights", "heldout_fraction", c.weight_heldout_fraction);

  f("retrieval", "beam_size", c.retrieval.generation.beam_size);
  f("retrieval", "n_return", c.retrieval.generation.n_return);
  f("retrieval", "max_code_tokens", c.retrieval.generation.max_code_tokens);
  f("retrieval", "length_normalize", c.retrieval.generation.length_normalize);
  f("retrieval", "top_n", c.retrieval.top_n);
  f("retrieval", "cache_capacity", c.retrieval.cache_capacity);

  f("eval", "relr_threshold", c.relr_threshold);
}

}  // namespace

void PipelineConfig::validate() const {
  CatalogSpec spec = corpus;
  spec.seed = seed;
  spec.validate();
  if (n_test_queries == 0 || n_test_queries >= corpus.n_queries) {
    throw ConfigError("n_test_queries must lie in [1, n_queries)");
  }
  if (extraction_p_drop < 0.0 || extraction_p_drop > 1.0) {
    throw ConfigError("extraction_p_drop must lie in [0,1]");
  }
  if (codes.max_codes == 0 || codes.max_code_attributes == 0 || codes.max_code_attributes > kMaxCodeAttributes) {
    throw ConfigError("invalid code limits");
  }
  ModelConfig m = model;
  m.vocab_size = Vocabulary::kNumReserved + 1;
  m.validate();
  sft.validate();
  align.validate();
  retrieval.generation.validate();
  GenerationConfig ag = retrieval.generation;
  ag.beam_size = augment.generation.beam_size;
  ag.n_return = std::min(augment.n_codes, ag.beam_size);
  ag.validate();
  if (retrieval.generation.max_code_tokens + 1 >= static_cast<std::size_t>(model.max_len)) {
    throw ConfigError("max_code_tokens leaves no room for the prompt");
  }
  if (retrieval.top_n == 0 || weights.batch_size == 0 || !(weights.lr > 0.0) || weights.margin < 0.0) {
    throw ConfigError("invalid retrieval or weight settings");
  }
  if (weight_heldout_fraction < 0.0 || weight_heldout_fraction >= 1.0) {
    throw ConfigError("weights.heldout_fraction must lie in [0,1)");
  }
}

PipelineConfig pipeline_config_from_json(const Json& j) {
  if (!j.is_object()) {
    throw ConfigError("pipeline config must be a JSON object");
  }
  PipelineConfig cfg;
  std::map<std::string, std::set<std::string>> known;
  visit_fields(cfg, [&](const char* section, const char* key, auto&) { known[section].insert(key); });
  for (const auto& [key, value] : j.items()) {
    if (known[""].count(key) != 0) {
      continue;
    }
    if (known.count(key) == 0 || key.empty()) {
      throw ConfigError("unknown key '" + key + "' in pipeline config");
    }
    if (!value.is_object()) {
      throw ConfigError("section '" + key + "' must be an object");
    }
    for (const auto& [sub, _] : value.items()) {
      if (known[key].count(sub) == 0) {
        throw ConfigError("unknown key '" + sub + "' in section '" + key + "'");
      }
    }
  }
  visit_fields(cfg, [&](const char* section, const char* key, auto& field) {
    const Json* node = &j;
    if (*section != '\0') {
      if (!j.contains(section)) {
        return;
      }
      node = &j[section];
    }
    if (!node->contains(key)) {
      return;
    }
    try {
      field = (*node)[key].template get<std::decay_t<decltype(field)>>();
    } catch (const Json::exception& e) {
      throw ConfigError(std::string("bad value for '") + (*section ? std::string(section) + "." : "") + key +
                        "': " + e.what());
    }
  });
  cfg.validate();
  return cfg;
}

PipelineConfig load_pipeline_config(const fs::path& path) {
  try {
    return pipeline_config_from_json(read_json_file(path));
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
}

Json pipeline_config_to_json(const PipelineConfig& config) {
  Json j = Json::object();
  visit_fields(config, [&](const char* section, const char* key, const auto& field) {
    if (*section == '\0') {
      j[key] = field;
    } else {
      j[section][key] = field;
    }
  });
  return j;
}

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string file_hash(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error("cannot read " + path.string());
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return fnv1a_hex(ss.str());
}

std::string config_hash(const PipelineConfig& config) {
  Json j = pipeline_config_to_json(config);
  j.erase("out_dir");
  return fnv1a_hex(j.dump());
}

const std::vector<std::string>& pipeline_stages() {
  static const std::vector<std::string> stages{"gen-data",    "train-sft",     "augment", "align",
                                               "build-index", "train-weights", "eval",    "bench"};
  return stages;
}

std::vector<ClickEvent> RunData::train_clicks() const {
  const std::set<QueryId> train(train_queries.begin(), train_queries.end());
  std::vector<ClickEvent> out;
  for (const auto& c : clicks) {
    if (train.count(c.query_id) != 0) {
      out.push_back(c);
    }
  }
  return out;
}

std::vector<std::set<ProductId>> RunData::test_clicked() const {
  std::map<QueryId, std::size_t> slot;
  for (std::size_t i = 0; i < test_queries.size(); ++i) {
    slot[test_queries[i]] = i;
  }
  std::vector<std::set<ProductId>> out(test_queries.size());
  for (const auto& c : clicks) {
    auto it = slot.find(c.query_id);
    if (it != slot.end()) {
      out[it->second].insert(c.product_id);
    }
  }
  return out;
}

Vocabulary corpus_vocabulary(const AttributeLexicon& lexicon, const std::vector<std::string>& filler,
                             const std::vector<ProductRecord>& products) {
  std::vector<std::string> corpus;
  for (std::size_t t = 0; t < kNumAttributeTypes; ++t) {
    const auto& vals = lexicon.values(static_cast<AttributeType>(t));
    corpus.insert(corpus.end(), vals.begin(), vals.end());
  }
  corpus.insert(corpus.end(), filler.begin(), filler.end());
  for (const auto& p : products) {
    corpus.push_back(p.title);
  }
  return build_vocabulary(corpus);
}

RunData load_run_data(const fs::path& dir) {
  RunData d;
  auto [lex, filler] = read_lexicon_json(dir / "lexicon.json");
  d.lexicon = std::move(lex);
  d.filler = std::move(filler);
  d.products = read_catalog_jsonl(dir / "catalog.jsonl");
  d.queries = read_queries_jsonl(dir / "queries.jsonl");
  d.clicks = read_clicks_jsonl(dir / "clicks.jsonl");
  for (std::size_t i = 0; i < d.products.size(); ++i) {
    if (d.products[i].product_id != i) {
      throw DataError("catalog ids must be dense and ordered");
    }
  }
  for (std::size_t i = 0; i < d.queries.size(); ++i) {
    if (d.queries[i].query_id != i) {
      throw DataError("query ids must be dense and ordered");
    }
  }
  const Json split = read_json_file(dir / "split.json");
  for (const auto& s : split.at("train")) {
    d.train_queries.push_back(parse_query_id(s.get<std::string>()));
  }
  for (const auto& s : split.at("test")) {
    d.test_queries.push_back(parse_query_id(s.get<std::string>()));
  }
  d.vocab = corpus_vocabulary(d.lexicon, d.filler, d.products);
  return d;
}

Pipeline::Pipeline(PipelineConfig config) : config_(std::move(config)) {
  config_.validate();
  dir_ = config_.out_dir;
  hash_ = config_hash(config_);
}

ModelConfig Pipeline::model_config(std::size_t vocab_size) const {
  ModelConfig m = config_.model;
  m.vocab_size = static_cast<int>(vocab_size);
  return m;
}

void Pipeline::write_manifest(const std::string& stage, const std::vector<std::string>& outputs) const {
  Json files = Json::object();
  for (const auto& o : outputs) {
    files[o] = file_hash(dir_ / o);
  }
  fs::create_directories(dir_ / "manifests");
  write_json_file(dir_ / "manifests" / (stage + ".json"),
                  {{"stage", stage}, {"config_hash", hash_}, {"outputs", files}});
}

bool Pipeline::completed(const std::string& stage) const {
  const auto p = dir_ / "manifests" / (stage + ".json");
  if (!fs::exists(p)) {
    return false;
  }
  const Json m = read_json_file(p);
  if (m.value("config_hash", "") != hash_) {
    return false;
  }
  for (const auto& [file, h] : m.at("outputs").items()) {
    if (!fs::exists(dir_ / file) || file_hash(dir_ / file) != h.get<std::string>()) {
      return false;
    }
  }
  return true;
}

void Pipeline::require(const std::string& stage) const {
  if (!completed(stage)) {
    throw DependencyError("stage '" + stage + "' has not completed for this config in " + dir_.string() +
                          "; run it first");
  }
}

void Pipeline::run(const std::vector<std::string>& stages) {
  const auto& all = pipeline_stages();
  std::set<std::string> wanted;
  for (const auto& s : stages) {
    if (std::find(all.begin(), all.end(), s) == all.end()) {
      throw ConfigError("unknown stage '" + s + "'");
    }
    wanted.insert(s);
  }
  for (const auto& s : all) {
    if (wanted.count(s) != 0) {
      run_stage(s);
    }
  }
}

void Pipeline::run_stage(const std::string& stage) {
  log_info("stage " + stage);
  if (stage == "gen-data") {
    gen_data();
  } else if (stage == "train-sft") {
    train_sft();
  } else if (stage == "augment") {
    augment();
  } else if (stage == "align") {
    align();
  } else if (stage == "build-index") {
    build_index();
  } else if (stage == "train-weights") {
    train_weights();
  } else if (stage == "eval") {
    eval();
  } else if (stage == "bench") {
    bench();
  } else {
    throw ConfigError("unknown stage '" + stage + "'");
  }
}

namespace {

enum SeedStream : std::uint64_t {
  kSplitSeed = 1,
  kExtractQuerySeed,
  kExtractProductSeed,
  kInitSeed,
  kSftSeed,
  kCtSeed,
  kAlignSeed,
  kWeightSeed,
  kSeparateQueryInit,
  kSeparateProductInit,
  kSeparateQueryTrain,
  kSeparateProductTrain,
  kUntrainedInit,
};

std::uint64_t stream_seed(const PipelineConfig& c, SeedStream s) { return mix_seed(c.seed, 0x9a11 + s); }

// Code tables grouped from an SFT example list.
std::pair<CodeTable, CodeTable> code_tables(const std::vector<SftExample>& examples) {
  CodeTable q;
  CodeTable t;
  for (const auto& ex : examples) {
    (ex.side == Side::Query ? q : t)[ex.item].push_back(ex.code);
  }
  return {std::move(q), std::move(t)};
}

std::shared_ptr<const Model> load_model(const fs::path& p) {
  return std::make_shared<const Model>(load_checkpoint<double>(p));
}

std::vector<const QueryRecord*> select_queries(const RunData& d, const std::vector<QueryId>& ids) {
  std::vector<const QueryRecord*> out;
  out.reserve(ids.size());
  for (QueryId id : ids) {
    out.push_back(&d.queries.at(id));
  }
  return out;
}

}  // namespace

void Pipeline::gen_data() {
  fs::create_directories(dir_);
  CatalogSpec spec = config_.corpus;
  spec.seed = config_.seed;
  const World w = generate_world(spec);

  std::vector<QueryId> ids(w.queries.size());
  std::iota(ids.begin(), ids.end(), 0);
  Rng rng = make_rng(stream_seed(config_, kSplitSeed), 0);
  std::shuffle(ids.begin(), ids.end(), rng);
  std::vector<QueryId> test(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(config_.n_test_queries));
  std::vector<QueryId> train(ids.begin() + static_cast<std::ptrdiff_t>(config_.n_test_queries), ids.end());
  std::sort(test.begin(), test.end());
  std::sort(train.begin(), train.end());

  auto qa = extract_all(w.queries, NoiseSpec{config_.extraction_p_drop}, stream_seed(config_, kExtractQuerySeed));
  const auto pa =
      extract_all(w.products, NoiseSpec{config_.extraction_p_drop}, stream_seed(config_, kExtractProductSeed));
  for (QueryId q : test) {
    qa[q].clear();  // test queries contribute no training pairs
  }
  const std::set<QueryId> train_set(train.begin(), train.end());
  std::vector<ClickEvent> train_clicks;
  for (const auto& c : w.clicks) {
    if (train_set.count(c.query_id) != 0) {
      train_clicks.push_back(c);
    }
  }
  const auto pairs = build_initial_code_pairs(train_clicks, qa, pa, config_.codes);
  const auto examples = make_sft_examples(pairs.query_codes, pairs.product_codes, w.queries, w.products);

  write_catalog_jsonl(path("catalog.jsonl"), w.products);
  write_queries_jsonl(path("queries.jsonl"), w.queries);
  write_clicks_jsonl(path("clicks.jsonl"), w.clicks);
  write_lexicon_json(path("lexicon.json"), w.lexicon, w.filler);
  Json split = {{"train", Json::array()}, {"test", Json::array()}};
  for (QueryId q : train) {
    split["train"].push_back(format_query_id(q));
  }
  for (QueryId q : test) {
    split["test"].push_back(format_query_id(q));
  }
  write_json_file(path("split.json"), split);
  const Vocabulary vocab = corpus_vocabulary(w.lexicon, w.filler, w.products);
  Json vj = Json::object();
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    vj[vocab.token(static_cast<TokenId>(i))] = i;
  }
  write_json_file(path("vocab.json"), vj);
  write_sft_jsonl(path("sft_initial.jsonl"), examples);
  write_json_file(path("config.json"), pipeline_config_to_json(config_));
  log_info("gen-data: " + std::to_string(w.products.size()) + " products, " + std::to_string(w.queries.size()) +
           " queries, " + std::to_string(w.clicks.size()) + " clicks, " + std::to_string(examples.size()) +
           " initial pairs");
  write_manifest("gen-data", {"catalog.jsonl", "queries.jsonl", "clicks.jsonl", "lexicon.json", "split.json",
                              "vocab.json", "sft_initial.jsonl"});
}

void Pipeline::train_sft() {
  require("gen-data");
  const RunData d = load_run_data(dir_);
  const auto examples = read_sft_jsonl(path("sft_initial.jsonl"), d.lexicon);
  const auto items = encode_sft(d.vocab, examples, static_cast<std::size_t>(config_.model.max_len));
  TrainingConfig tc = config_.sft;
  tc.seed = stream_seed(config_, kSftSeed);
  tc.failure_checkpoint = path("sft.failed.ckpt");
  auto res = gram::train_sft(Model::random(model_config(d.vocab.size()), stream_seed(config_, kInitSeed)), items, tc);
  save_checkpoint(path("sft.ckpt"), res.params);
  write_training_log(path("sft_log.csv"), res.log);
  write_manifest("train-sft", {"sft.ckpt", "sft_log.csv"});
}

void Pipeline::augment() {
  require("train-sft");
  const RunData d = load_run_data(dir_);
  const auto sft = load_checkpoint<double>(path("sft.ckpt"));
  const auto initial = read_sft_jsonl(path("sft_initial.jsonl"), d.lexicon);
  AugmentConfig ac = config_.augment;
  ac.generation.max_code_tokens = config_.retrieval.generation.max_code_tokens;
  ac.generation.n_return = std::min(ac.n_codes, ac.generation.beam_size);
  AugmentStats stats;
  const auto augmented =
      augment_codes(sft, d.vocab, d.lexicon, initial, d.queries, d.products, d.train_clicks(), ac, &stats);
  write_sft_jsonl(path("sft_dataset.jsonl"), augmented);
  write_json_file(path("augment_stats.json"), {{"generated", stats.generated},
                                               {"malformed", stats.malformed},
                                               {"rejected", stats.rejected},
                                               {"added", stats.added},
                                               {"initial_pairs", initial.size()},
                                               {"augmented_pairs", augmented.size()}});
  log_info("augment: added " + std::to_string(stats.added) + " pairs (" + std::to_string(stats.rejected) +
           " rejected, " + std::to_string(stats.malformed) + " malformed)");
  const auto items = encode_sft(d.vocab, augmented, static_cast<std::size_t>(config_.model.max_len));
  TrainingConfig tc = config_.sft;
  tc.epochs = config_.augmented_epochs;
  tc.seed = stream_seed(config_, kCtSeed);
  tc.failure_checkpoint = path("ct.failed.ckpt");
  auto res = gram::train_sft(sft, items, tc);
  save_checkpoint(path("ct.ckpt"), res.params);
  write_training_log(path("ct_log.csv"), res.log);
  write_manifest("augment", {"sft_dataset.jsonl", "augment_stats.json", "ct.ckpt", "ct_log.csv"});
}

void Pipeline::align() {
  require("augment");
  const RunData d = load_run_data(dir_);
  const auto reference = load_checkpoint<double>(path("ct.ckpt"));
  const auto [qtable, ptable] = code_tables(read_sft_jsonl(path("sft_initial.jsonl"), d.lexicon));
  AlignmentConfig ac = config_.align;
  ac.seed = stream_seed(config_, kAlignSeed);
  AlignmentDatasetStats st;
  auto pairs = build_alignment_dataset(d.train_clicks(), qtable, ptable, ac, &st);
  pairs = resample_positives(std::move(pairs), ac);
  write_alignment_jsonl(path("alignment_pairs.jsonl"), pairs);
  const auto ctx = make_pair_context(d.vocab, d.queries, d.products);
  const auto res = train_co_alignment(reference, pairs, ctx, ac);
  save_checkpoint(path("aligned.ckpt"), res.params);
  write_training_log(path("align_log.csv"), res.log);
  write_json_file(path("align_stats.json"), {{"click_pairs", st.click_pairs},
                                             {"empty_intersection", st.empty_intersection},
                                             {"no_negative", st.no_negative},
                                             {"pairs", pairs.size()},
                                             {"heldout_margins", res.heldout_margins}});
  write_manifest("align", {"alignment_pairs.jsonl", "aligned.ckpt", "align_log.csv", "align_stats.json"});
}

void Pipeline::build_index() {
  require("align");
  const RunData d = load_run_data(dir_);
  const auto model = load_checkpoint<double>(path("aligned.ckpt"));
  const auto snap = gram::build_index(d.products, model, d.vocab, d.lexicon, config_.retrieval.generation);
  save_index(path("index.bin"), snap);
  write_json_file(path("index_stats.json"),
                  {{"products", snap.size()}, {"codes", snap.postings.size()}, {"fallbacks", snap.fallbacks}});
  write_manifest("build-index", {"index.bin", "index_stats.json"});
}

std::vector<Ranking> run_retrieval(const Retriever& retriever, const std::vector<const QueryRecord*>& queries) {
  std::vector<Ranking> out;
  out.reserve(queries.size());
  for (const auto* q : queries) {
    Ranking r;
    if (!q->text.empty()) {
      for (const auto& item : retriever.retrieve(q->text).items) {
        r.push_back(item.product);
      }
    }
    out.push_back(std::move(r));
  }
  return out;
}

namespace {

CandidateTerms candidate_terms(const GeneratedCodes& query_codes, const IndexSnapshot& snap, ProductId product) {
  CandidateTerms t;
  for (std::size_t c = 0; c < query_codes.codes.size(); ++c) {
    const auto* list = snap.find(query_codes.codes[c]);
    if (list == nullptr) {
      continue;
    }
    auto it = std::lower_bound(list->begin(), list->end(), product,
                               [](const Posting& p, ProductId id) { return p.product < id; });
    if (it != list->end() && it->product == product) {
      t.codes.push_back(query_codes.codes[c]);
      t.divergence.push_back(s_rele(query_codes.profiles[c], it->profile, 1.0));
    }
  }
  return t;
}

}  // namespace

TripleSet build_weight_triples(const Retriever& retriever, const IndexSnapshot& snapshot, const RunData& data,
                               const PipelineConfig& config) {
  std::vector<QueryId> pool = data.train_queries;
  Rng split_rng = make_rng(stream_seed(config, kWeightSeed), 1);
  std::shuffle(pool.begin(), pool.end(), split_rng);
  const auto n_held =
      static_cast<std::size_t>(std::floor(config.weight_heldout_fraction * static_cast<double>(pool.size())));
  const std::set<QueryId> held(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_held));

  TripleSet out;
  const CodeWeights uniform;
  for (QueryId qid : data.train_queries) {
    const auto& q = data.queries.at(qid);
    const auto codes = retriever.query_codes(q.text, snapshot.version);
    const auto items = score_candidates(codes, snapshot, uniform, config.retrieval.top_n);
    std::vector<std::pair<double, ProductId>> pos;
    std::vector<ProductId> neg;
    for (const auto& item : items) {
      const double rel = relevance_oracle(q.attributes, data.products.at(item.product).attributes);
      if (rel >= config.weight_relevance_threshold) {
        pos.emplace_back(rel, item.product);
      } else {
        neg.push_back(item.product);
      }
    }
    if (pos.empty() || neg.empty()) {
      continue;
    }
    std::sort(pos.begin(), pos.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    if (pos.size() > config.align.top_k) {
      pos.resize(config.align.top_k);
    }
    Rng rng = make_rng(stream_seed(config, kWeightSeed), 0x100000 + qid);
    auto& dest = held.count(qid) != 0 ? out.heldout : out.train;
    for (const auto& [_, p] : pos) {
      const auto pt = candidate_terms(codes, snapshot, p);
      std::vector<ProductId> sample = neg;
      const std::size_t take = std::min(config.weight_negatives, sample.size());
      for (std::size_t i = 0; i < take; ++i) {
        std::swap(sample[i], sample[i + uniform_index(rng, sample.size() - i)]);
        dest.push_back({qid, pt, candidate_terms(codes, snapshot, sample[i])});
      }
    }
  }
  return out;
}

void Pipeline::train_weights() {
  require("build-index");
  const RunData d = load_run_data(dir_);
  const auto before = file_hash(path("aligned.ckpt"));
  auto model = load_model(path("aligned.ckpt"));
  CodeIndex index(load_index(path("index.bin")));
  RetrievalConfig rc = config_.retrieval;
  rc.use_cache = false;
  Retriever retriever(model, std::make_shared<const Vocabulary>(d.vocab),
                      std::make_shared<const AttributeLexicon>(d.lexicon), std::make_shared<const CodeWeights>(),
                      index, rc);
  const auto snap = index.snapshot();
  const auto triples = build_weight_triples(retriever, *snap, d, config_);
  WeightTrainingConfig wc = config_.weights;
  wc.seed = stream_seed(config_, kWeightSeed);
  const auto res = train_code_weights(triples.train, CodeWeights{}, wc);
  write_code_weights(path("code_weights.json"), res.weights);
  const auto after = file_hash(path("aligned.ckpt"));
  const CodeWeights uniform;
  write_json_file(path("weights_stats.json"),
                  {{"train_triples", triples.train.size()},
                   {"heldout_triples", triples.heldout.size()},
                   {"epoch_loss", res.epoch_loss},
                   {"heldout_accuracy_uniform", pairwise_accuracy(triples.heldout, uniform)},
                   {"heldout_accuracy_trained", pairwise_accuracy(triples.heldout, res.weights)},
                   {"model_hash_before", before},
                   {"model_hash_after", after}});
  if (before != after) {
    throw TrainingError("model checkpoint changed during weight training", 0);
  }
  write_manifest("train-weights", {"code_weights.json", "weights_stats.json"});
}

namespace {

std::function<double(std::size_t, ProductId)> oracle_judge(const RunData& d,
                                                           const std::vector<const QueryRecord*>& queries) {
  return [&d, queries](std::size_t qi, ProductId p) {
    return relevance_oracle(queries[qi]->attributes, d.products.at(p).attributes);
  };
}

Json method_json(const MethodReport& m) {
  return {{"method", m.method}, {"ok", m.ok},           {"failure", m.failure},     {"recall@10", m.recall10},
          {"recall@100", m.recall100}, {"recall@300", m.recall300}, {"relr", m.relr}, {"queries", m.queries},
          {"ret300", m.ret300},        {"rel", m.rel}};
}

}  // namespace

void Pipeline::eval() {
  require("train-weights");
  const RunData d = load_run_data(dir_);
  CodeIndex index(load_index(path("index.bin")));
  Retriever retriever(load_model(path("aligned.ckpt")), std::make_shared<const Vocabulary>(d.vocab),
                      std::make_shared<const AttributeLexicon>(d.lexicon),
                      std::make_shared<const CodeWeights>(read_code_weights(path("code_weights.json"))), index,
                      config_.retrieval);
  const auto queries = select_queries(d, d.test_queries);
  const auto rankings = run_retrieval(retriever, queries);
  const auto report = evaluate_method("GRAM", rankings, d.test_clicked(), oracle_judge(d, queries),
                                      config_.relr_threshold);
  EvalReport er{{report}, hash_};
  write_json_file(path("eval.json"), method_json(report));
  write_report_csv(path("eval.csv"), er);
  write_manifest("eval", {"eval.json", "eval.csv"});
}

void Pipeline::bench() {
  require("eval");
  const RunData d = load_run_data(dir_);
  const auto vocab = std::make_shared<const Vocabulary>(d.vocab);
  const auto lexicon = std::make_shared<const AttributeLexicon>(d.lexicon);
  const auto uniform = std::make_shared<const CodeWeights>();
  const auto queries = select_queries(d, d.test_queries);
  const auto clicked = d.test_clicked();
  const auto judge = oracle_judge(d, queries);
  EvalReport report;
  report.config_hash = hash_;

  auto attempt = [&](const std::string& name, const std::function<std::vector<Ranking>()>& fn) {
    try {
      report.methods.push_back(evaluate_method(name, fn(), clicked, judge, config_.relr_threshold));
    } catch (const Error& e) {
      MethodReport m;
      m.method = name;
      m.ok = false;
      m.failure = e.what();
      report.methods.push_back(std::move(m));
      log_warn("bench method " + name + " failed: " + e.what());
    }
  };
  auto evaluate_models = [&](std::shared_ptr<const Model> query_model, const Model& product_model,
                             std::shared_ptr<const CodeWeights> weights) {
    CodeIndex index(gram::build_index(d.products, product_model, d.vocab, d.lexicon, config_.retrieval.generation));
    Retriever r(std::move(query_model), vocab, lexicon, std::move(weights), index, config_.retrieval);
    return run_retrieval(r, queries);
  };

  attempt("GRAM", [&] {
    CodeIndex index(load_index(path("index.bin")));
    Retriever r(load_model(path("aligned.ckpt")), vocab, lexicon,
                std::make_shared<const CodeWeights>(read_code_weights(path("code_weights.json"))), index,
                config_.retrieval);
    return run_retrieval(r, queries);
  });
  attempt("w/o CA", [&] {
    auto ct = load_model(path("ct.ckpt"));
    return evaluate_models(ct, *ct, uniform);
  });
  attempt("w/o CT&CA", [&] {
    // Independent query-side and product-side generators on the initial pairs.
    const auto examples = read_sft_jsonl(path("sft_initial.jsonl"), d.lexicon);
    const auto items = encode_sft(d.vocab, examples, static_cast<std::size_t>(config_.model.max_len));
    std::vector<SftItem> q_items;
    std::vector<SftItem> t_items;
    for (const auto& it : items) {
      (it.side == Side::Query ? q_items : t_items).push_back(it);
    }
    TrainingConfig tc = config_.sft;
    tc.epochs = config_.sft.epochs + config_.augmented_epochs;
    tc.seed = stream_seed(config_, kSeparateQueryTrain);
    const auto mc = model_config(d.vocab.size());
    auto qm = gram::train_sft(Model::random(mc, stream_seed(config_, kSeparateQueryInit)), q_items, tc);
    tc.seed = stream_seed(config_, kSeparateProductTrain);
    auto tm = gram::train_sft(Model::random(mc, stream_seed(config_, kSeparateProductInit)), t_items, tc);
    save_checkpoint(path("separate_query.ckpt"), qm.params);
    save_checkpoint(path("separate_product.ckpt"), tm.params);
    return evaluate_models(std::make_shared<const Model>(std::move(qm.params)), tm.params, uniform);
  });
  attempt("BM25", [&] {
    const Bm25 bm25(d.products);
    std::vector<Ranking> out;
    for (const auto* q : queries) {
      Ranking r;
      for (const auto& h : bm25.search(q->text, config_.retrieval.top_n)) {
        r.push_back(h.product);
      }
      out.push_back(std::move(r));
    }
    return out;
  });

  write_report_csv(path("report.csv"), report);
  write_report_md(path("report.md"), report);
  Json j = Json::array();
  for (const auto& m : report.methods) {
    j.push_back(method_json(m));
  }
  write_json_file(path("report.json"), {{"config_hash", hash_}, {"methods", j}});
  write_manifest("bench", {"report.csv", "report.md", "report.json"});
}

}  // namespace gram
