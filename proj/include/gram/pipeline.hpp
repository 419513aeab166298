#pragma once

#include "gram/alignment.hpp"
#include "gram/corpus.hpp"
#include "gram/eval.hpp"
#include "gram/index.hpp"
#include "gram/json_io.hpp"
#include "gram/training.hpp"

#include <filesystem>
#include <set>
#include <string>
#include <vector>

namespace gram {

struct PipelineConfig {
  std::uint64_t seed = 1;
  std::string out_dir = "run";

  CatalogSpec corpus{};
  std::size_t n_test_queries = 100;
  double extraction_p_drop = 0.0;
  CodePairConfig codes{};

  ModelConfig model{};
  TrainingConfig sft{};
  std::size_t augmented_epochs = 3;
  AugmentConfig augment{};
  AlignmentConfig align{};
  WeightTrainingConfig weights{};
  std::size_t weight_negatives = 4;
  double weight_relevance_threshold = 0.5;
  double weight_heldout_fraction = 0.1;
  RetrievalConfig retrieval{};
  double relr_threshold = 0.5;

  PipelineConfig();
  void validate() const;
};

// Unknown keys anywhere are rejected with a ConfigError.
PipelineConfig pipeline_config_from_json(const Json& j);
PipelineConfig load_pipeline_config(const std::filesystem::path& path);
Json pipeline_config_to_json(const PipelineConfig& config);
// Hash of every setting except the output directory.
std::string config_hash(const PipelineConfig& config);

std::string fnv1a_hex(std::string_view bytes);
std::string file_hash(const std::filesystem::path& path);

const std::vector<std::string>& pipeline_stages();

// Corpus artifacts of a run directory.
struct RunData {
  AttributeLexicon lexicon;
  std::vector<std::string> filler;
  std::vector<ProductRecord> products;
  std::vector<QueryRecord> queries;
  std::vector<ClickEvent> clicks;
  std::vector<QueryId> train_queries;
  std::vector<QueryId> test_queries;
  Vocabulary vocab;

  std::vector<ClickEvent> train_clicks() const;
  std::vector<std::set<ProductId>> test_clicked() const;
};

// Vocabulary over lexicon values, filler words and titles.
Vocabulary corpus_vocabulary(const AttributeLexicon& lexicon, const std::vector<std::string>& filler,
                             const std::vector<ProductRecord>& products);

RunData load_run_data(const std::filesystem::path& dir);

class Pipeline {
 public:
  explicit Pipeline(PipelineConfig config);

  const PipelineConfig& config() const { return config_; }
  const std::filesystem::path& dir() const { return dir_; }
  std::string hash() const { return hash_; }

  void run(const std::vector<std::string>& stages);
  void run_stage(const std::string& stage);

  void gen_data();
  void train_sft();
  void augment();
  void align();
  void build_index();
  void train_weights();
  void eval();
  void bench();

  // Throws DependencyError unless `stage` completed under this config.
  void require(const std::string& stage) const;
  bool completed(const std::string& stage) const;

  ModelConfig model_config(std::size_t vocab_size) const;
  std::filesystem::path path(const std::string& name) const { return dir_ / name; }

 private:
  void write_manifest(const std::string& stage, const std::vector<std::string>& outputs) const;

  PipelineConfig config_;
  std::filesystem::path dir_;
  std::string hash_;
};

// Top-n rankings of a retriever for the given query records.
std::vector<Ranking> run_retrieval(const Retriever& retriever, const std::vector<const QueryRecord*>& queries);

struct TripleSet {
  std::vector<WeightTriple> train;
  std::vector<WeightTriple> heldout;
};

// Stage-3 triples: positives are the top-k retrieved products by oracle score
// among those passing the threshold; negatives are retrieved products below it.
TripleSet build_weight_triples(const Retriever& retriever, const IndexSnapshot& snapshot, const RunData& data,
                               const PipelineConfig& config);

}  // namespace gram
