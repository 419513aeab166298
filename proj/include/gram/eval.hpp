#pragma once

#include "gram/corpus.hpp"

#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace gram {

using Ranking = std::vector<ProductId>;

struct RecallBreakdown {
  double recall = 0.0;
  std::size_t evaluated = 0;
  std::size_t excluded = 0;           // queries with no clicked products
  std::vector<std::size_t> retrieved;  // ret_{q,k} per evaluated query
  std::vector<std::size_t> relevant;   // rel_q per evaluated query
};

// Mean over queries of |top-k ∩ clicked| / |clicked|.
RecallBreakdown recall_at_k(const std::vector<Ranking>& results, const std::vector<std::set<ProductId>>& clicked,
                            std::size_t k);

struct RelevanceBreakdown {
  double ratio = 0.0;
  std::size_t queries = 0;
  std::size_t empty_results = 0;  // contribute 0
};

// Mean over queries of the fraction of retrieved items judged relevant.
// `judge(q, p)` returns the oracle score of product p for query index q.
RelevanceBreakdown relevance_ratio(const std::vector<Ranking>& results,
                                   const std::function<double(std::size_t, ProductId)>& judge, double threshold);

// Okapi BM25 over whitespace tokens of product titles:
// idf = ln(1 + (N - df + 0.5) / (df + 0.5)),
// score = sum over distinct query terms of idf * tf (k1 + 1) / (tf + k1 (1 - b + b |d| / avgdl)).
class Bm25 {
 public:
  explicit Bm25(const std::vector<ProductRecord>& products, double k1 = 1.2, double b = 0.75);

  struct Hit {
    ProductId product;
    double score;
  };
  // Products with positive score, descending, ties by ascending id.
  std::vector<Hit> search(const std::string& query, std::size_t k) const;
  double score(const std::string& query, std::size_t doc) const;

 private:
  double k1_;
  double b_;
  double avgdl_ = 0.0;
  std::vector<ProductId> ids_;
  std::vector<std::map<std::string, std::size_t>> tf_;
  std::vector<std::size_t> len_;
  std::map<std::string, std::size_t> df_;
  std::map<std::string, std::vector<std::size_t>> postings_;
};

struct MethodReport {
  std::string method;
  bool ok = true;
  std::string failure;
  double recall10 = 0.0;
  double recall100 = 0.0;
  double recall300 = 0.0;
  double relr = 0.0;
  std::size_t queries = 0;
  std::vector<std::size_t> ret300;
  std::vector<std::size_t> rel;
};

struct EvalReport {
  std::vector<MethodReport> methods;
  std::string config_hash;
};

MethodReport evaluate_method(const std::string& method, const std::vector<Ranking>& results,
                             const std::vector<std::set<ProductId>>& clicked,
                             const std::function<double(std::size_t, ProductId)>& judge, double relr_threshold);

void write_report_csv(const std::filesystem::path& path, const EvalReport& report);
void write_report_md(const std::filesystem::path& path, const EvalReport& report);
std::string format_report_csv(const EvalReport& report);

}  // namespace gram
