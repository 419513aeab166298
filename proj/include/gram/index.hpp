#pragma once

#include "gram/alignment.hpp"
#include "gram/codec.hpp"
#include "gram/seqmodel.hpp"

#include <filesystem>
#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace gram {

// Codes generated for one item, each with its per-token probabilities under
// the generating prompt.
struct GeneratedCodes {
  std::vector<std::string> codes;
  std::vector<TokenProbProfile> profiles;
  bool fallback = false;

  bool operator==(const GeneratedCodes&) const = default;
};

// Prompt used for generation and profile scoring of one input text.
TokenSeq generation_prompt(const Vocabulary& vocab, Side side, std::string_view text, const ModelConfig& model,
                           const GenerationConfig& gen);

// Beam-searched canonical codes. Codes whose canonical order differs from
// the generated order are re-scored teacher-forced.
GeneratedCodes generate_codes(const Model& model, const Vocabulary& vocab, const AttributeLexicon& lexicon,
                              Side side, std::string_view text, const GenerationConfig& gen);

// Product codes with the category-only fallback when generation yields none.
GeneratedCodes generate_product_codes(const Model& model, const Vocabulary& vocab, const AttributeLexicon& lexicon,
                                      const ProductRecord& product, const GenerationConfig& gen);

struct Posting {
  ProductId product = 0;
  TokenProbProfile profile;

  bool operator==(const Posting&) const = default;
};

struct IndexSnapshot {
  std::uint64_t version = 0;
  std::map<std::string, std::vector<Posting>> postings;  // sorted by product id
  std::map<ProductId, GeneratedCodes> products;
  std::size_t fallbacks = 0;

  std::size_t size() const { return products.size(); }
  const std::vector<Posting>* find(const std::string& code) const;
  // Order-sensitive digest over every posting, for consistency checks.
  std::uint64_t checksum() const;
  bool operator==(const IndexSnapshot&) const = default;
};

IndexSnapshot make_snapshot(std::map<ProductId, GeneratedCodes> products, std::uint64_t version);

IndexSnapshot build_index(const std::vector<ProductRecord>& products, const Model& model, const Vocabulary& vocab,
                          const AttributeLexicon& lexicon, const GenerationConfig& gen);

// Holder of the current snapshot. Readers take a shared_ptr and never see a
// partial update; writers are serialized and publish a fresh snapshot.
class CodeIndex {
 public:
  CodeIndex();
  explicit CodeIndex(IndexSnapshot initial);

  std::shared_ptr<const IndexSnapshot> snapshot() const;
  std::uint64_t version() const { return snapshot()->version; }

  std::uint64_t upsert(ProductId product, GeneratedCodes codes);
  std::uint64_t remove(ProductId product);
  // Publishes `next` with a version above the current one.
  std::uint64_t replace(IndexSnapshot next);

 private:
  template <typename Fn>
  std::uint64_t update(Fn&& edit);

  mutable std::mutex read_mu_;
  std::mutex write_mu_;
  std::shared_ptr<const IndexSnapshot> current_;
};

void save_index(const std::filesystem::path& path, const IndexSnapshot& snapshot);
IndexSnapshot load_index(const std::filesystem::path& path);

// LRU map from query text to generated query codes, tagged with the index
// version they were stored under.
class QueryCache {
 public:
  explicit QueryCache(std::size_t capacity);

  std::optional<GeneratedCodes> get(const std::string& query, std::uint64_t version);
  void put(const std::string& query, std::uint64_t version, GeneratedCodes codes);
  std::size_t size() const;
  std::size_t hits() const;
  std::size_t misses() const;

 private:
  struct Entry {
    std::string query;
    std::uint64_t version;
    GeneratedCodes codes;
  };
  mutable std::mutex mu_;
  std::size_t capacity_;
  std::list<Entry> order_;  // front = most recent
  std::unordered_map<std::string, std::list<Entry>::iterator> map_;
  std::size_t hits_ = 0;
  std::size_t misses_ = 0;
};

struct RetrievedItem {
  ProductId product = 0;
  double score = 0.0;
  std::vector<std::string> codes;

  bool operator==(const RetrievedItem&) const = default;
};

struct RetrievalResult {
  std::string query;
  std::uint64_t index_version = 0;
  std::vector<std::string> query_codes;
  std::vector<RetrievedItem> items;  // score descending, product id ascending on ties
};

// Scores every product sharing a code with the query and keeps the top n.
std::vector<RetrievedItem> score_candidates(const GeneratedCodes& query_codes, const IndexSnapshot& snapshot,
                                            const CodeWeights& weights, std::size_t n);

struct RetrievalConfig {
  GenerationConfig generation{};
  std::size_t top_n = 300;
  std::size_t cache_capacity = 4096;
  bool use_cache = true;
};

class Retriever {
 public:
  Retriever(std::shared_ptr<const Model> query_model, std::shared_ptr<const Vocabulary> vocab,
            std::shared_ptr<const AttributeLexicon> lexicon, std::shared_ptr<const CodeWeights> weights,
            const CodeIndex& index, RetrievalConfig config);

  RetrievalResult retrieve(const std::string& query, std::optional<std::size_t> k = std::nullopt) const;
  GeneratedCodes query_codes(const std::string& query, std::uint64_t version) const;

  const RetrievalConfig& config() const { return config_; }
  const QueryCache& cache() const { return *cache_; }

 private:
  std::shared_ptr<const Model> model_;
  std::shared_ptr<const Vocabulary> vocab_;
  std::shared_ptr<const AttributeLexicon> lexicon_;
  std::shared_ptr<const CodeWeights> weights_;
  const CodeIndex* index_;
  RetrievalConfig config_;
  std::unique_ptr<QueryCache> cache_;
};

}  // namespace gram
