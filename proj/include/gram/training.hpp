#pragma once

#include "gram/codec.hpp"
#include "gram/corpus.hpp"
#include "gram/seqmodel.hpp"

#include <filesystem>
#include <optional>
#include <set>
#include <vector>

namespace gram {

struct SftExample {
  Side side = Side::Query;
  std::uint32_t item = 0;  // query id or product id
  std::string input;
  Code code;
  double weight = 1.0;

  bool operator==(const SftExample&) const = default;
};

struct SftItem {
  Side side = Side::Query;
  std::uint32_t item = 0;
  Sequence seq;
  double weight = 1.0;
};

struct EncodeStats {
  std::size_t truncated = 0;
  std::size_t dropped_unknown = 0;
};

std::vector<SftItem> encode_sft(const Vocabulary& vocab, std::span<const SftExample> examples, std::size_t max_len,
                                EncodeStats* stats = nullptr);

// Builds the side-specific example lists from per-item code tables.
std::vector<SftExample> make_sft_examples(const CodeTable& query_codes, const CodeTable& product_codes,
                                          const std::vector<QueryRecord>& queries,
                                          const std::vector<ProductRecord>& products);

// Mean over examples of -weight * sum_i log Pr(c_i | prompt, c_<i).
template <typename Scalar>
double sft_loss(const ModelParams<Scalar>& params, std::span<const SftItem> batch,
                std::optional<Side> side_filter = std::nullopt);

// L_q + lambda * L_t over the two sides of a mixed batch. A missing side
// contributes 0 and logs a warning.
template <typename Scalar>
double co_training_loss(const ModelParams<Scalar>& params, std::span<const SftItem> batch, double lambda);

// Differentiable form of co_training_loss (a single-side batch gives the
// plain side loss).
Objective sft_objective(std::span<const SftItem> batch, double lambda);

struct TrainingConfig {
  double lambda = 1.0;
  std::size_t epochs = 3;
  std::size_t batch_size = 128;
  AdamWConfig adamw{};
  double dropout = 0.05;
  double heldout_fraction = 0.05;
  std::uint64_t seed = 1;
  std::optional<std::filesystem::path> failure_checkpoint;

  void validate() const;
};

struct TrainLogRow {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double loss = 0.0;
  std::optional<double> heldout_nll;  // per target token
};

struct SftResult {
  Model params;
  std::vector<TrainLogRow> log;
  std::set<std::uint32_t> heldout_queries;
  double initial_heldout_nll = 0.0;
  double final_heldout_nll = 0.0;
};

// Query ids withheld from training (query-level split).
std::set<std::uint32_t> heldout_query_ids(std::span<const SftItem> items, double fraction, std::uint64_t seed);

// Mean per-token negative log-likelihood.
double token_nll(const Model& params, std::span<const SftItem> items);

// Mini-batch AdamW over shuffled, side-stratified batches.
SftResult train_sft(Model init, std::span<const SftItem> items, const TrainingConfig& config);

void write_training_log(const std::filesystem::path& path, const std::vector<TrainLogRow>& log);

struct AugmentConfig {
  GenerationConfig generation{};
  std::size_t n_codes = 10;
};

struct AugmentStats {
  std::size_t generated = 0;
  std::size_t malformed = 0;
  std::size_t rejected = 0;
  std::size_t added = 0;
};

// Code must carry the item's category and only attributes of the item or of
// a click partner.
bool augmentation_filter(const AttributeSet& code_attrs, const AttributeSet& item_attrs,
                         const std::vector<const AttributeSet*>& partner_attrs);

// Decodes beam output into canonical codes, dropping malformed ones.
std::vector<Code> decode_generated_codes(const BeamResult& beam, const Vocabulary& vocab,
                                         const AttributeLexicon& lexicon, std::size_t* malformed = nullptr);

// Generates codes for active products and co-clicked queries, filters them
// with the attribute oracle and merges them into `examples` (deduplicated,
// existing pairs kept).
std::vector<SftExample> augment_codes(const Model& params, const Vocabulary& vocab, const AttributeLexicon& lexicon,
                                      const std::vector<SftExample>& examples,
                                      const std::vector<QueryRecord>& queries,
                                      const std::vector<ProductRecord>& products,
                                      const std::vector<ClickEvent>& train_clicks, const AugmentConfig& config,
                                      AugmentStats* stats = nullptr);

void write_sft_jsonl(const std::filesystem::path& path, const std::vector<SftExample>& examples);
std::vector<SftExample> read_sft_jsonl(const std::filesystem::path& path, const AttributeLexicon& lexicon);

}  // namespace gram
