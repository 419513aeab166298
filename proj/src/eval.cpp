#include "gram/eval.hpp"

#include "gram/codec.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace gram {

RecallBreakdown recall_at_k(const std::vector<Ranking>& results, const std::vector<std::set<ProductId>>& clicked,
                            std::size_t k) {
  if (results.size() != clicked.size()) {
    throw DataError("results and click sets differ in length");
  }
  RecallBreakdown out;
  double total = 0.0;
  for (std::size_t q = 0; q < results.size(); ++q) {
    if (clicked[q].empty()) {
      ++out.excluded;
      continue;
    }
    std::size_t hit = 0;
    const std::size_t n = std::min(k, results[q].size());
    std::set<ProductId> seen;
    for (std::size_t i = 0; i < n; ++i) {
      const ProductId p = results[q][i];
      if (clicked[q].count(p) != 0 && seen.insert(p).second) {
        ++hit;
      }
    }
    out.retrieved.push_back(hit);
    out.relevant.push_back(clicked[q].size());
    total += static_cast<double>(hit) / static_cast<double>(clicked[q].size());
    ++out.evaluated;
  }
  out.recall = out.evaluated == 0 ? 0.0 : total / static_cast<double>(out.evaluated);
  return out;
}

RelevanceBreakdown relevance_ratio(const std::vector<Ranking>& results,
                                   const std::function<double(std::size_t, ProductId)>& judge, double threshold) {
  RelevanceBreakdown out;
  double total = 0.0;
  for (std::size_t q = 0; q < results.size(); ++q) {
    ++out.queries;
    if (results[q].empty()) {
      ++out.empty_results;
      continue;
    }
    std::size_t good = 0;
    for (ProductId p : results[q]) {
      good += judge(q, p) >= threshold ? 1 : 0;
    }
    total += static_cast<double>(good) / static_cast<double>(results[q].size());
  }
  out.ratio = out.queries == 0 ? 0.0 : total / static_cast<double>(out.queries);
  return out;
}

Bm25::Bm25(const std::vector<ProductRecord>& products, double k1, double b) : k1_(k1), b_(b) {
  std::size_t total = 0;
  for (const auto& p : products) {
    const std::size_t doc = ids_.size();
    ids_.push_back(p.product_id);
    std::map<std::string, std::size_t> tf;
    const auto words = split_words(p.title);
    for (const auto& w : words) {
      ++tf[w];
    }
    for (const auto& [w, _] : tf) {
      ++df_[w];
      postings_[w].push_back(doc);
    }
    len_.push_back(words.size());
    total += words.size();
    tf_.push_back(std::move(tf));
  }
  avgdl_ = ids_.empty() ? 0.0 : static_cast<double>(total) / static_cast<double>(ids_.size());
}

double Bm25::score(const std::string& query, std::size_t doc) const {
  const auto terms = split_words(query);
  const std::set<std::string> distinct(terms.begin(), terms.end());
  const double n = static_cast<double>(ids_.size());
  double s = 0.0;
  for (const auto& t : distinct) {
    auto df = df_.find(t);
    auto tf = tf_[doc].find(t);
    if (df == df_.end() || tf == tf_[doc].end()) {
      continue;
    }
    const double d = static_cast<double>(df->second);
    const double idf = std::log(1.0 + (n - d + 0.5) / (d + 0.5));
    const double f = static_cast<double>(tf->second);
    s += idf * f * (k1_ + 1.0) / (f + k1_ * (1.0 - b_ + b_ * static_cast<double>(len_[doc]) / avgdl_));
  }
  return s;
}

std::vector<Bm25::Hit> Bm25::search(const std::string& query, std::size_t k) const {
  std::set<std::size_t> docs;
  for (const auto& t : split_words(query)) {
    auto it = postings_.find(t);
    if (it != postings_.end()) {
      docs.insert(it->second.begin(), it->second.end());
    }
  }
  std::vector<Hit> hits;
  for (std::size_t d : docs) {
    const double s = score(query, d);
    if (s > 0.0) {
      hits.push_back({ids_[d], s});
    }
  }
  std::sort(hits.begin(), hits.end(), [](const Hit& a, const Hit& b) {
    return a.score != b.score ? a.score > b.score : a.product < b.product;
  });
  if (hits.size() > k) {
    hits.resize(k);
  }
  return hits;
}

MethodReport evaluate_method(const std::string& method, const std::vector<Ranking>& results,
                             const std::vector<std::set<ProductId>>& clicked,
                             const std::function<double(std::size_t, ProductId)>& judge, double relr_threshold) {
  MethodReport r;
  r.method = method;
  r.recall10 = recall_at_k(results, clicked, 10).recall;
  r.recall100 = recall_at_k(results, clicked, 100).recall;
  const auto r300 = recall_at_k(results, clicked, 300);
  r.recall300 = r300.recall;
  r.ret300 = r300.retrieved;
  r.rel = r300.relevant;
  r.queries = r300.evaluated;
  r.relr = relevance_ratio(results, judge, relr_threshold).ratio;
  return r;
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

std::string format_report_csv(const EvalReport& report) {
  std::ostringstream out;
  out << "method,recall@10,recall@100,recall@300,relr,queries,status\n";
  for (const auto& m : report.methods) {
    out << m.method << ',';
    if (m.ok) {
      out << fmt(m.recall10) << ',' << fmt(m.recall100) << ',' << fmt(m.recall300) << ',' << fmt(m.relr) << ','
          << m.queries << ",ok\n";
    } else {
      out << ",,,,,failed: " << m.failure << '\n';
    }
  }
  return out.str();
}

void write_report_csv(const std::filesystem::path& path, const EvalReport& report) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw Error("cannot write " + path.string());
  }
  out << format_report_csv(report);
}

void write_report_md(const std::filesystem::path& path, const EvalReport& report) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw Error("cannot write " + path.string());
  }
  out << "# Retrieval benchmark\n\n";
  if (!report.config_hash.empty()) {
    out << "Config hash: `" << report.config_hash << "`\n\n";
  }
  out << "| Method | Recall@10 | Recall@100 | Recall@300 | RelR | Queries |\n";
  out << "|---|---|---|---|---|---|\n";
  for (const auto& m : report.methods) {
    if (m.ok) {
      out << "| " << m.method << " | " << fmt(m.recall10) << " | " << fmt(m.recall100) << " | " << fmt(m.recall300)
          << " | " << fmt(m.relr) << " | " << m.queries << " |\n";
    } else {
      out << "| " << m.method << " | FAILED: " << m.failure << " | | | | |\n";
    }
  }
}

}  // namespace gram
