#pragma once

#include "gram/attributes.hpp"
#include "gram/codec.hpp"
#include "gram/common.hpp"

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace gram {

struct ProductRecord {
  ProductId product_id = 0;
  std::string title;
  AttributeSet attributes;

  bool operator==(const ProductRecord&) const = default;
};

struct QueryRecord {
  QueryId query_id = 0;
  std::string text;
  AttributeSet attributes;
  ProductId source_product = 0;  // product the query was sampled from

  bool operator==(const QueryRecord&) const = default;
};

struct ClickEvent {
  QueryId query_id = 0;
  ProductId product_id = 0;
  std::uint32_t count = 1;

  bool operator==(const ClickEvent&) const = default;
};

// Parameters of the synthetic world. Probabilities are in [0,1]; counts of
// the optional attribute types use independent inclusion probabilities, with
// category and brand always present.
struct CatalogSpec {
  std::size_t n_products = 2000;
  std::size_t n_queries = 600;
  std::array<std::size_t, kNumAttributeTypes> lexicon_sizes{12, 30, 16, 40, 12, 10, 10, 12, 8, 10, 6, 6, 8, 10, 8};
  std::array<double, kNumAttributeTypes> inclusion{1.0, 1.0, 0.25, 0.20, 0.25, 0.25, 0.20, 0.35,
                                                   0.15, 0.15, 0.10, 0.15, 0.10, 0.10, 0.10};
  std::size_t max_attributes = kMaxCodeAttributes;
  std::size_t filler_words = 16;
  std::size_t max_title_filler = 2;
  std::size_t max_query_tokens = 16;
  // Query construction: each non-category attribute of the source product is
  // kept with this probability (at most max_query_extra of them).
  double query_keep = 0.45;
  std::size_t max_query_extra = 3;
  double query_filler = 0.3;
  double query_noise = 0.05;  // probability of swapping one kept value
  // Click model: P(click) = click_ceiling * sigmoid(click_slope * (J - click_midpoint))
  // over same-category products, J the Jaccard attribute overlap.
  double click_ceiling = 0.9;
  double click_slope = 14.0;
  double click_midpoint = 0.55;
  std::uint32_t max_extra_clicks = 3;
  std::uint64_t seed = 1;

  void validate() const;
};

struct NoiseSpec {
  double p_drop = 0.0;
};

struct World {
  AttributeLexicon lexicon;
  std::vector<std::string> filler;
  std::vector<ProductRecord> products;
  std::vector<QueryRecord> queries;
  std::vector<ClickEvent> clicks;
};

AttributeLexicon generate_lexicon(const CatalogSpec& spec);
std::vector<std::string> generate_filler(const CatalogSpec& spec, const AttributeLexicon& lexicon);

std::vector<ProductRecord> generate_catalog(const CatalogSpec& spec);
std::vector<ProductRecord> generate_catalog(const CatalogSpec& spec, const AttributeLexicon& lexicon,
                                            const std::vector<std::string>& filler);

struct QueryLog {
  std::vector<QueryRecord> queries;
  std::vector<ClickEvent> clicks;
};
QueryLog generate_queries_and_clicks(const std::vector<ProductRecord>& catalog, const CatalogSpec& spec,
                                     const AttributeLexicon& lexicon, const std::vector<std::string>& filler);

World generate_world(const CatalogSpec& spec);

// Surrogate attribute extractor: ground truth with independent drops. Falls
// back to the category attribute when everything is dropped.
AttributeSet extract_attributes(const AttributeSet& ground_truth, const NoiseSpec& noise, Rng& rng);

// Extraction for a whole record list with per-record seeded streams.
std::vector<AttributeSet> extract_all(const std::vector<ProductRecord>& products, const NoiseSpec& noise,
                                      std::uint64_t seed);
std::vector<AttributeSet> extract_all(const std::vector<QueryRecord>& queries, const NoiseSpec& noise,
                                      std::uint64_t seed);

double relevance_oracle(const AttributeSet& query_attrs, const AttributeSet& product_attrs);
inline double relevance_oracle(const QueryRecord& q, const ProductRecord& p) {
  return relevance_oracle(q.attributes, p.attributes);
}

struct CodePairConfig {
  std::size_t max_code_attributes = kMaxCodeAttributes;
  std::size_t max_codes = 10;
  std::uint32_t min_click_count = 2;  // "high-frequency" pair threshold
};

// item index -> its ordered, duplicate-free code list
using CodeTable = std::map<std::uint32_t, std::vector<Code>>;

struct InitialCodePairs {
  CodeTable query_codes;
  CodeTable product_codes;
  std::size_t n_query_pairs() const;
  std::size_t n_product_pairs() const;
};

// Codes derived from one attribute set: category alone, category paired with
// each other attribute, and the full set (first six in canonical order).
std::vector<Code> codes_from_attributes(const AttributeSet& attrs, const CodePairConfig& cfg);

// query_attrs / product_attrs are indexed by query id / product id.
InitialCodePairs build_initial_code_pairs(const std::vector<ClickEvent>& clicks,
                                          const std::vector<AttributeSet>& query_attrs,
                                          const std::vector<AttributeSet>& product_attrs,
                                          const CodePairConfig& cfg = {});

// JSONL / JSON persistence.
void write_catalog_jsonl(const std::filesystem::path& path, const std::vector<ProductRecord>& products);
void write_queries_jsonl(const std::filesystem::path& path, const std::vector<QueryRecord>& queries);
void write_clicks_jsonl(const std::filesystem::path& path, const std::vector<ClickEvent>& clicks);
void write_lexicon_json(const std::filesystem::path& path, const AttributeLexicon& lexicon,
                        const std::vector<std::string>& filler);
std::vector<ProductRecord> read_catalog_jsonl(const std::filesystem::path& path);
std::vector<QueryRecord> read_queries_jsonl(const std::filesystem::path& path);
std::vector<ClickEvent> read_clicks_jsonl(const std::filesystem::path& path);
std::pair<AttributeLexicon, std::vector<std::string>> read_lexicon_json(const std::filesystem::path& path);
CatalogSpec read_catalog_spec(const std::filesystem::path& path);

}  // namespace gram
