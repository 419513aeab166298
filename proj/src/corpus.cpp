#include "gram/corpus.hpp"

#include "gram/json_io.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace gram {

namespace {

constexpr std::string_view kConsonants = "bdfgklmnprstvz";
constexpr std::string_view kVowels = "aeiou";

std::string pseudo_word(Rng& rng, std::size_t syllables) {
  std::string w;
  for (std::size_t i = 0; i < syllables; ++i) {
    w.push_back(kConsonants[uniform_index(rng, kConsonants.size())]);
    w.push_back(kVowels[uniform_index(rng, kVowels.size())]);
  }
  if (uniform01(rng) < 0.5) {
    w.push_back(kConsonants[uniform_index(rng, kConsonants.size())]);
  }
  return w;
}

enum Stream : std::uint64_t {
  kLexiconStream = 0,
  kFillerStream = 1,
  kProductStream = 1ULL << 32,
  kQueryStream = 2ULL << 32,
};

std::vector<std::size_t> sample_without_replacement(Rng& rng, std::size_t n, std::size_t k) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) {
    idx[i] = i;
  }
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min(n, k));
  std::sort(idx.begin(), idx.end());
  return idx;
}

std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) {
      out.push_back(' ');
    }
    out += w;
  }
  return out;
}

}  // namespace

void CatalogSpec::validate() const {
  if (max_attributes < 2 || max_attributes > kMaxCodeAttributes) {
    throw ConfigError("max_attributes must be in [2, 6]");
  }
  for (std::size_t t = 0; t < kNumAttributeTypes; ++t) {
    if (inclusion[t] < 0.0 || inclusion[t] > 1.0) {
      throw ConfigError("inclusion probabilities must lie in [0,1]");
    }
    if (inclusion[t] > 0.0 && lexicon_sizes[t] == 0) {
      throw ConfigError("attribute type " + std::string(attribute_type_name(static_cast<AttributeType>(t))) +
                        " is included but has an empty lexicon");
    }
  }
  if (lexicon_sizes[0] == 0 || lexicon_sizes[1] == 0) {
    throw ConfigError("category and brand lexicons must be nonempty");
  }
  for (double p : {query_keep, query_filler, query_noise, click_ceiling, click_midpoint}) {
    if (p < 0.0 || p > 1.0) {
      throw ConfigError("probabilities must lie in [0,1]");
    }
  }
  if (click_slope < 0.0) {
    throw ConfigError("click_slope must be non-negative");
  }
  if (max_query_tokens == 0) {
    throw ConfigError("max_query_tokens must be positive");
  }
}

AttributeLexicon generate_lexicon(const CatalogSpec& spec) {
  Rng rng = make_rng(spec.seed, kLexiconStream);
  std::set<std::string> used;
  std::array<std::vector<std::string>, kNumAttributeTypes> values;
  for (std::size_t t = 0; t < kNumAttributeTypes; ++t) {
    while (values[t].size() < spec.lexicon_sizes[t]) {
      std::string w = pseudo_word(rng, 2 + uniform_index(rng, 2));
      if (used.insert(w).second) {
        values[t].push_back(std::move(w));
      }
    }
  }
  return AttributeLexicon(std::move(values));
}

std::vector<std::string> generate_filler(const CatalogSpec& spec, const AttributeLexicon& lexicon) {
  Rng rng = make_rng(spec.seed, kFillerStream);
  std::set<std::string> seen;
  std::vector<std::string> out;
  while (out.size() < spec.filler_words) {
    std::string w = pseudo_word(rng, 1 + uniform_index(rng, 2));
    if (!lexicon.type_of(w) && seen.insert(w).second) {
      out.push_back(std::move(w));
    }
  }
  return out;
}

std::vector<ProductRecord> generate_catalog(const CatalogSpec& spec) {
  spec.validate();
  auto lexicon = generate_lexicon(spec);
  return generate_catalog(spec, lexicon, generate_filler(spec, lexicon));
}

std::vector<ProductRecord> generate_catalog(const CatalogSpec& spec, const AttributeLexicon& lexicon,
                                            const std::vector<std::string>& filler) {
  spec.validate();
  std::vector<ProductRecord> products;
  products.reserve(spec.n_products);
  const std::size_t max_extra = spec.max_attributes - 2;
  for (std::size_t i = 0; i < spec.n_products; ++i) {
    Rng rng = make_rng(spec.seed, kProductStream + i);
    ProductRecord p;
    p.product_id = static_cast<ProductId>(i);
    for (auto t : {AttributeType::Category, AttributeType::Brand}) {
      const auto& vals = lexicon.values(t);
      p.attributes.push_back({t, vals[uniform_index(rng, vals.size())]});
    }
    // Optional types: independent inclusion, resampled when over the cap.
    std::vector<std::size_t> chosen;
    do {
      chosen.clear();
      for (std::size_t t = 2; t < kNumAttributeTypes; ++t) {
        if (uniform01(rng) < spec.inclusion[t]) {
          chosen.push_back(t);
        }
      }
    } while (chosen.size() > max_extra);
    for (std::size_t t : chosen) {
      const auto& vals = lexicon.values(static_cast<AttributeType>(t));
      p.attributes.push_back({static_cast<AttributeType>(t), vals[uniform_index(rng, vals.size())]});
    }
    canonicalize(p.attributes);

    // Title: brand, shuffled descriptive values, category, filler words.
    std::vector<std::string> words;
    std::vector<std::string> middle;
    for (const auto& a : p.attributes) {
      if (a.type != AttributeType::Category && a.type != AttributeType::Brand) {
        middle.push_back(a.value);
      }
    }
    std::shuffle(middle.begin(), middle.end(), rng);
    words.push_back(find_type(p.attributes, AttributeType::Brand)->value);
    words.insert(words.end(), middle.begin(), middle.end());
    words.push_back(find_type(p.attributes, AttributeType::Category)->value);
    const std::size_t n_filler = filler.empty() ? 0 : uniform_index(rng, spec.max_title_filler + 1);
    for (std::size_t f = 0; f < n_filler; ++f) {
      const auto pos = uniform_index(rng, words.size() + 1);
      words.insert(words.begin() + static_cast<std::ptrdiff_t>(pos), filler[uniform_index(rng, filler.size())]);
    }
    p.title = join_words(words);
    products.push_back(std::move(p));
  }
  return products;
}

QueryLog generate_queries_and_clicks(const std::vector<ProductRecord>& catalog, const CatalogSpec& spec,
                                     const AttributeLexicon& lexicon, const std::vector<std::string>& filler) {
  spec.validate();
  QueryLog log;
  if (spec.n_queries == 0) {
    return log;
  }
  if (catalog.empty()) {
    throw DataError("cannot generate queries over an empty catalog");
  }
  // Category buckets for the click model.
  std::map<std::string, std::vector<std::size_t>> by_category;
  for (std::size_t i = 0; i < catalog.size(); ++i) {
    by_category[find_type(catalog[i].attributes, AttributeType::Category)->value].push_back(i);
  }

  for (std::size_t qi = 0; qi < spec.n_queries; ++qi) {
    Rng rng = make_rng(spec.seed, kQueryStream + qi);
    const std::size_t src = uniform_index(rng, catalog.size());
    const ProductRecord& source = catalog[src];

    QueryRecord q;
    q.query_id = static_cast<QueryId>(qi);
    q.source_product = source.product_id;
    std::vector<AttributeValue> extras;
    for (const auto& a : source.attributes) {
      if (a.type != AttributeType::Category && uniform01(rng) < spec.query_keep) {
        extras.push_back(a);
      }
    }
    if (extras.size() > spec.max_query_extra) {
      auto keep = sample_without_replacement(rng, extras.size(), spec.max_query_extra);
      std::vector<AttributeValue> kept;
      for (auto k : keep) {
        kept.push_back(extras[k]);
      }
      extras = std::move(kept);
    }
    if (!extras.empty() && uniform01(rng) < spec.query_noise) {
      auto& victim = extras[uniform_index(rng, extras.size())];
      const auto& vals = lexicon.values(victim.type);
      if (vals.size() > 1) {
        std::string replacement = victim.value;
        while (replacement == victim.value) {
          replacement = vals[uniform_index(rng, vals.size())];
        }
        victim.value = replacement;
      }
    }
    q.attributes.push_back(*find_type(source.attributes, AttributeType::Category));
    q.attributes.insert(q.attributes.end(), extras.begin(), extras.end());
    canonicalize(q.attributes);

    std::vector<std::string> words;
    for (const auto& a : q.attributes) {
      words.push_back(a.value);
    }
    std::shuffle(words.begin(), words.end(), rng);
    if (!filler.empty() && uniform01(rng) < spec.query_filler) {
      const auto pos = uniform_index(rng, words.size() + 1);
      words.insert(words.begin() + static_cast<std::ptrdiff_t>(pos), filler[uniform_index(rng, filler.size())]);
    }
    if (words.size() > spec.max_query_tokens) {
      words.resize(spec.max_query_tokens);
    }
    q.text = join_words(words);

    const auto& bucket = by_category[q.attributes.front().value];
    for (std::size_t pi : bucket) {
      const ProductRecord& p = catalog[pi];
      const double overlap = relevance_oracle(q.attributes, p.attributes);
      const double prob =
          spec.click_ceiling / (1.0 + std::exp(-spec.click_slope * (overlap - spec.click_midpoint)));
      const double u = uniform01(rng);
      if (pi == src || u < prob) {
        std::uint32_t count = 1;
        for (std::uint32_t e = 0; e < spec.max_extra_clicks; ++e) {
          count += uniform01(rng) < overlap ? 1 : 0;
        }
        log.clicks.push_back({q.query_id, p.product_id, count});
      }
    }
    log.queries.push_back(std::move(q));
  }
  return log;
}

World generate_world(const CatalogSpec& spec) {
  spec.validate();
  World w;
  w.lexicon = generate_lexicon(spec);
  w.filler = generate_filler(spec, w.lexicon);
  w.products = generate_catalog(spec, w.lexicon, w.filler);
  auto log = generate_queries_and_clicks(w.products, spec, w.lexicon, w.filler);
  w.queries = std::move(log.queries);
  w.clicks = std::move(log.clicks);
  return w;
}

AttributeSet extract_attributes(const AttributeSet& ground_truth, const NoiseSpec& noise, Rng& rng) {
  AttributeSet out;
  for (const auto& a : ground_truth) {
    if (!(uniform01(rng) < noise.p_drop)) {
      out.push_back(a);
    }
  }
  if (out.empty()) {
    if (const auto* cat = find_type(ground_truth, AttributeType::Category)) {
      out.push_back(*cat);
    } else if (!ground_truth.empty()) {
      out.push_back(ground_truth.front());
    }
  }
  canonicalize(out);
  return out;
}

std::vector<AttributeSet> extract_all(const std::vector<ProductRecord>& products, const NoiseSpec& noise,
                                      std::uint64_t seed) {
  std::vector<AttributeSet> out;
  out.reserve(products.size());
  for (const auto& p : products) {
    Rng rng = make_rng(seed, kProductStream + p.product_id);
    out.push_back(extract_attributes(p.attributes, noise, rng));
  }
  return out;
}

std::vector<AttributeSet> extract_all(const std::vector<QueryRecord>& queries, const NoiseSpec& noise,
                                      std::uint64_t seed) {
  std::vector<AttributeSet> out;
  out.reserve(queries.size());
  for (const auto& q : queries) {
    Rng rng = make_rng(seed, kQueryStream + q.query_id);
    out.push_back(extract_attributes(q.attributes, noise, rng));
  }
  return out;
}

double relevance_oracle(const AttributeSet& query_attrs, const AttributeSet& product_attrs) {
  const auto* qc = find_type(query_attrs, AttributeType::Category);
  const auto* pc = find_type(product_attrs, AttributeType::Category);
  if (qc == nullptr || pc == nullptr || qc->value != pc->value) {
    return 0.0;
  }
  const std::size_t inter = set_intersection(query_attrs, product_attrs).size();
  const std::size_t uni = query_attrs.size() + product_attrs.size() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

std::size_t InitialCodePairs::n_query_pairs() const {
  std::size_t n = 0;
  for (const auto& [_, codes] : query_codes) {
    n += codes.size();
  }
  return n;
}

std::size_t InitialCodePairs::n_product_pairs() const {
  std::size_t n = 0;
  for (const auto& [_, codes] : product_codes) {
    n += codes.size();
  }
  return n;
}

namespace {

AttributeSet truncate_attrs(AttributeSet attrs, std::size_t max_attrs) {
  canonicalize(attrs);
  if (attrs.size() > max_attrs) {
    attrs.resize(max_attrs);
  }
  return attrs;
}

void add_code(std::vector<Code>& codes, Code code, std::size_t max_codes) {
  if (codes.size() >= max_codes) {
    return;
  }
  if (std::find(codes.begin(), codes.end(), code) == codes.end()) {
    codes.push_back(std::move(code));
  }
}

}  // namespace

std::vector<Code> codes_from_attributes(const AttributeSet& attrs, const CodePairConfig& cfg) {
  std::vector<Code> codes;
  if (attrs.empty()) {
    return codes;
  }
  AttributeSet sorted = attrs;
  canonicalize(sorted);
  const AttributeValue& anchor = sorted.front();
  add_code(codes, make_canonical_code({anchor}), cfg.max_codes);
  for (std::size_t i = 1; i < sorted.size(); ++i) {
    add_code(codes, make_canonical_code({anchor, sorted[i]}), cfg.max_codes);
  }
  if (sorted.size() >= 3) {
    add_code(codes, make_canonical_code(truncate_attrs(sorted, cfg.max_code_attributes)), cfg.max_codes);
  }
  return codes;
}

InitialCodePairs build_initial_code_pairs(const std::vector<ClickEvent>& clicks,
                                          const std::vector<AttributeSet>& query_attrs,
                                          const std::vector<AttributeSet>& product_attrs,
                                          const CodePairConfig& cfg) {
  InitialCodePairs out;
  for (std::size_t q = 0; q < query_attrs.size(); ++q) {
    if (!query_attrs[q].empty()) {
      out.query_codes[static_cast<std::uint32_t>(q)] = codes_from_attributes(query_attrs[q], cfg);
    }
  }
  for (std::size_t p = 0; p < product_attrs.size(); ++p) {
    if (!product_attrs[p].empty()) {
      out.product_codes[static_cast<std::uint32_t>(p)] = codes_from_attributes(product_attrs[p], cfg);
    }
  }
  for (const auto& c : clicks) {
    if (c.count < cfg.min_click_count || c.query_id >= query_attrs.size() || c.product_id >= product_attrs.size()) {
      continue;
    }
    const auto& qa = query_attrs[c.query_id];
    const auto& pa = product_attrs[c.product_id];
    if (qa.empty() || pa.empty()) {
      continue;
    }
    // Both directions restrict the partner's attributes to the item's own set.
    AttributeSet shared = truncate_attrs(set_intersection(qa, pa), cfg.max_code_attributes);
    if (shared.empty()) {
      continue;
    }
    add_code(out.query_codes[c.query_id], make_canonical_code(shared), cfg.max_codes);
    add_code(out.product_codes[c.product_id], make_canonical_code(shared), cfg.max_codes);
  }
  return out;
}

void write_catalog_jsonl(const std::filesystem::path& path, const std::vector<ProductRecord>& products) {
  std::vector<Json> rows;
  rows.reserve(products.size());
  for (const auto& p : products) {
    rows.push_back(product_to_json(p));
  }
  write_jsonl(path, rows);
}

void write_queries_jsonl(const std::filesystem::path& path, const std::vector<QueryRecord>& queries) {
  std::vector<Json> rows;
  rows.reserve(queries.size());
  for (const auto& q : queries) {
    rows.push_back(query_to_json(q));
  }
  write_jsonl(path, rows);
}

void write_clicks_jsonl(const std::filesystem::path& path, const std::vector<ClickEvent>& clicks) {
  std::vector<Json> rows;
  rows.reserve(clicks.size());
  for (const auto& c : clicks) {
    rows.push_back(click_to_json(c));
  }
  write_jsonl(path, rows);
}

void write_lexicon_json(const std::filesystem::path& path, const AttributeLexicon& lexicon,
                        const std::vector<std::string>& filler) {
  Json types = Json::object();
  for (std::size_t t = 0; t < kNumAttributeTypes; ++t) {
    const auto type = static_cast<AttributeType>(t);
    types[std::string(attribute_type_name(type))] = lexicon.values(type);
  }
  write_json_file(path, {{"types", types}, {"filler", filler}});
}

std::vector<ProductRecord> read_catalog_jsonl(const std::filesystem::path& path) {
  std::vector<ProductRecord> out;
  for_each_jsonl(path, [&](const Json& j) { out.push_back(product_from_json(j)); });
  return out;
}

std::vector<QueryRecord> read_queries_jsonl(const std::filesystem::path& path) {
  std::vector<QueryRecord> out;
  for_each_jsonl(path, [&](const Json& j) { out.push_back(query_from_json(j)); });
  return out;
}

std::vector<ClickEvent> read_clicks_jsonl(const std::filesystem::path& path) {
  std::vector<ClickEvent> out;
  for_each_jsonl(path, [&](const Json& j) { out.push_back(click_from_json(j)); });
  return out;
}

std::pair<AttributeLexicon, std::vector<std::string>> read_lexicon_json(const std::filesystem::path& path) {
  const Json j = read_json_file(path);
  std::array<std::vector<std::string>, kNumAttributeTypes> values;
  for (const auto& [name, list] : j.at("types").items()) {
    auto t = parse_attribute_type(name);
    if (!t) {
      throw DataError("unknown attribute type '" + name + "' in lexicon");
    }
    values[static_cast<std::size_t>(*t)] = list.get<std::vector<std::string>>();
  }
  return {AttributeLexicon(std::move(values)), j.at("filler").get<std::vector<std::string>>()};
}

CatalogSpec read_catalog_spec(const std::filesystem::path& path) {
  const Json j = read_json_file(path);
  require_known_keys(j,
                     {"n_products", "n_queries", "lexicon_sizes", "inclusion", "max_attributes", "filler_words",
                      "max_title_filler", "max_query_tokens", "query_keep", "max_query_extra", "query_filler",
                      "query_noise", "click_ceiling", "click_slope", "click_midpoint", "max_extra_clicks", "seed"},
                     "catalog spec");
  CatalogSpec s;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) {
      field = j[key].get<std::decay_t<decltype(field)>>();
    }
  };
  get("n_products", s.n_products);
  get("n_queries", s.n_queries);
  get("lexicon_sizes", s.lexicon_sizes);
  get("inclusion", s.inclusion);
  get("max_attributes", s.max_attributes);
  get("filler_words", s.filler_words);
  get("max_title_filler", s.max_title_filler);
  get("max_query_tokens", s.max_query_tokens);
  get("query_keep", s.query_keep);
  get("max_query_extra", s.max_query_extra);
  get("query_filler", s.query_filler);
  get("query_noise", s.query_noise);
  get("click_ceiling", s.click_ceiling);
  get("click_slope", s.click_slope);
  get("click_midpoint", s.click_midpoint);
  get("max_extra_clicks", s.max_extra_clicks);
  get("seed", s.seed);
  s.validate();
  return s;
}

}  // namespace gram
