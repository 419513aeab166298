#pragma once

#include "gram/pipeline.hpp"

#include <filesystem>

namespace gram::testing {

inline std::filesystem::path temp_dir(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / ("gram_test_" + name);
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

inline CatalogSpec small_spec(std::uint64_t seed = 3) {
  CatalogSpec s;
  s.n_products = 200;
  s.n_queries = 60;
  s.seed = seed;
  return s;
}

inline ModelConfig tiny_model(int vocab_size) {
  ModelConfig m;
  m.vocab_size = vocab_size;
  m.max_len = 32;
  m.width = 16;
  m.layers = 1;
  m.heads = 2;
  m.ffn_width = 32;
  m.init_std = 0.1;
  return m;
}

// A small world with vocabulary and initial SFT examples.
struct SmallWorld {
  World world;
  Vocabulary vocab;
  InitialCodePairs pairs;
  std::vector<SftExample> examples;
};

inline SmallWorld small_world(std::uint64_t seed = 3) {
  SmallWorld s;
  s.world = generate_world(small_spec(seed));
  s.vocab = corpus_vocabulary(s.world.lexicon, s.world.filler, s.world.products);
  const auto qa = extract_all(s.world.queries, NoiseSpec{}, 1);
  const auto pa = extract_all(s.world.products, NoiseSpec{}, 2);
  s.pairs = build_initial_code_pairs(s.world.clicks, qa, pa, CodePairConfig{});
  s.examples = make_sft_examples(s.pairs.query_codes, s.pairs.product_codes, s.world.queries, s.world.products);
  return s;
}

// Pipeline config small enough for unit tests.
inline PipelineConfig tiny_pipeline(const std::filesystem::path& dir, std::uint64_t seed = 5) {
  PipelineConfig c;
  c.seed = seed;
  c.out_dir = dir.string();
  c.corpus.n_products = 120;
  c.corpus.n_queries = 50;
  c.n_test_queries = 10;
  c.model = tiny_model(0);
  c.sft.epochs = 1;
  c.sft.batch_size = 64;
  c.augmented_epochs = 1;
  c.augment.generation.beam_size = 3;
  c.augment.n_codes = 3;
  c.align.max_pairs = 64;
  c.weights.epochs = 2;
  c.retrieval.generation.beam_size = 3;
  c.retrieval.generation.n_return = 3;
  c.retrieval.top_n = 50;
  return c;
}

}  // namespace gram::testing
