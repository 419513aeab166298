#include "gram/index.hpp"

#include "gram/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <unordered_map>

namespace gram {

TokenSeq generation_prompt(const Vocabulary& vocab, Side side, std::string_view text, const ModelConfig& model,
                           const GenerationConfig& gen) {
  TokenSeq prompt = encode_prompt(vocab, side, text);
  const auto room = static_cast<std::size_t>(model.max_len) > gen.max_code_tokens
                        ? static_cast<std::size_t>(model.max_len) - gen.max_code_tokens
                        : 1;
  if (prompt.size() > room) {
    prompt.resize(room);
  }
  return prompt;
}

namespace {

TokenProbProfile teacher_forced_profile(const Model& model, const TokenSeq& prompt, const TokenSeq& target) {
  auto lp = token_logprobs(model, prompt, target);
  for (auto& v : lp) {
    v = std::exp(v);
  }
  return lp;
}

}  // namespace

GeneratedCodes generate_codes(const Model& model, const Vocabulary& vocab, const AttributeLexicon& lexicon,
                              Side side, std::string_view text, const GenerationConfig& gen) {
  const TokenSeq prompt = generation_prompt(vocab, side, text, model.config(), gen);
  const auto beam = beam_search(model, prompt, gen, DecodeConstraints{Vocabulary::kEos, {}, nullptr});
  GeneratedCodes out;
  for (const auto& h : beam.hypotheses) {
    const auto decoded = decode_code_tokens(vocab, h.tokens);
    if (!decoded) {
      continue;
    }
    std::optional<Code> code;
    try {
      code = make_canonical_code(code_attribute_set(parse_code(*decoded, lexicon)));
    } catch (const Error&) {
      continue;
    }
    std::string key = code->str();
    if (std::find(out.codes.begin(), out.codes.end(), key) != out.codes.end()) {
      continue;
    }
    TokenProbProfile profile;
    if (key == *decoded) {
      profile.reserve(h.token_logprobs.size());
      for (double lp : h.token_logprobs) {
        profile.push_back(std::exp(lp));
      }
    } else {
      profile = teacher_forced_profile(model, prompt, encode_code(vocab, *code));
    }
    out.codes.push_back(std::move(key));
    out.profiles.push_back(std::move(profile));
  }
  return out;
}

GeneratedCodes generate_product_codes(const Model& model, const Vocabulary& vocab, const AttributeLexicon& lexicon,
                                      const ProductRecord& product, const GenerationConfig& gen) {
  auto out = generate_codes(model, vocab, lexicon, Side::Product, product.title, gen);
  if (!out.codes.empty()) {
    return out;
  }
  const auto* cat = find_type(product.attributes, AttributeType::Category);
  if (cat == nullptr) {
    throw DataError("product " + format_product_id(product.product_id) + " has no category attribute");
  }
  const Code code({*cat});
  const TokenSeq prompt = generation_prompt(vocab, Side::Product, product.title, model.config(), gen);
  out.codes.push_back(code.str());
  out.profiles.push_back(teacher_forced_profile(model, prompt, encode_code(vocab, code)));
  out.fallback = true;
  return out;
}

const std::vector<Posting>* IndexSnapshot::find(const std::string& code) const {
  auto it = postings.find(code);
  return it == postings.end() ? nullptr : &it->second;
}

std::uint64_t IndexSnapshot::checksum() const {
  std::uint64_t h = mix_seed(version, 0);
  for (const auto& [code, list] : postings) {
    h = mix_seed(h, std::hash<std::string>{}(code));
    for (const auto& p : list) {
      h = mix_seed(h, p.product);
      for (double v : p.profile) {
        std::uint64_t bits = 0;
        std::memcpy(&bits, &v, sizeof bits);
        h = mix_seed(h, bits);
      }
    }
  }
  return h;
}

IndexSnapshot make_snapshot(std::map<ProductId, GeneratedCodes> products, std::uint64_t version) {
  IndexSnapshot s;
  s.version = version;
  for (const auto& [pid, gc] : products) {
    if (gc.codes.size() != gc.profiles.size()) {
      throw DataError("code/profile count mismatch for " + format_product_id(pid));
    }
    s.fallbacks += gc.fallback ? 1 : 0;
    for (std::size_t i = 0; i < gc.codes.size(); ++i) {
      s.postings[gc.codes[i]].push_back({pid, gc.profiles[i]});
    }
  }
  // products are visited in id order, so postings are already sorted
  s.products = std::move(products);
  return s;
}

IndexSnapshot build_index(const std::vector<ProductRecord>& products, const Model& model, const Vocabulary& vocab,
                          const AttributeLexicon& lexicon, const GenerationConfig& gen) {
  std::map<ProductId, GeneratedCodes> table;
  for (const auto& p : products) {
    if (!table.emplace(p.product_id, generate_product_codes(model, vocab, lexicon, p, gen)).second) {
      throw DataError("duplicate product id " + format_product_id(p.product_id));
    }
  }
  return make_snapshot(std::move(table), 1);
}

CodeIndex::CodeIndex() : current_(std::make_shared<const IndexSnapshot>()) {}

CodeIndex::CodeIndex(IndexSnapshot initial) : current_(std::make_shared<const IndexSnapshot>(std::move(initial))) {}

std::shared_ptr<const IndexSnapshot> CodeIndex::snapshot() const {
  std::lock_guard lock(read_mu_);
  return current_;
}

template <typename Fn>
std::uint64_t CodeIndex::update(Fn&& edit) {
  std::lock_guard writer(write_mu_);
  const auto base = snapshot();
  auto products = base->products;
  edit(products);
  auto next = std::make_shared<const IndexSnapshot>(make_snapshot(std::move(products), base->version + 1));
  const auto v = next->version;
  std::lock_guard lock(read_mu_);
  current_ = std::move(next);
  return v;
}

std::uint64_t CodeIndex::upsert(ProductId product, GeneratedCodes codes) {
  return update([&](std::map<ProductId, GeneratedCodes>& table) { table[product] = std::move(codes); });
}

std::uint64_t CodeIndex::remove(ProductId product) {
  return update([&](std::map<ProductId, GeneratedCodes>& table) { table.erase(product); });
}

std::uint64_t CodeIndex::replace(IndexSnapshot next) {
  std::lock_guard writer(write_mu_);
  next.version = std::max(next.version, snapshot()->version + 1);
  auto ptr = std::make_shared<const IndexSnapshot>(std::move(next));
  const auto v = ptr->version;
  std::lock_guard lock(read_mu_);
  current_ = std::move(ptr);
  return v;
}

namespace {

constexpr char kIndexMagic[8] = {'G', 'R', 'A', 'M', 'I', 'D', 'X', '\0'};
constexpr std::uint32_t kIndexFormat = 1;

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& in) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) {
    throw DataError("index file truncated");
  }
  return v;
}

}  // namespace

void save_index(const std::filesystem::path& path, const IndexSnapshot& snapshot) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw Error("cannot write " + path.string());
  }
  out.write(kIndexMagic, sizeof kIndexMagic);
  put(out, kIndexFormat);
  put(out, snapshot.version);
  put(out, static_cast<std::uint32_t>(snapshot.products.size()));
  for (const auto& [pid, gc] : snapshot.products) {
    put(out, pid);
    put(out, static_cast<std::uint8_t>(gc.fallback ? 1 : 0));
    put(out, static_cast<std::uint32_t>(gc.codes.size()));
    for (std::size_t i = 0; i < gc.codes.size(); ++i) {
      put(out, static_cast<std::uint32_t>(gc.codes[i].size()));
      out.write(gc.codes[i].data(), static_cast<std::streamsize>(gc.codes[i].size()));
      put(out, static_cast<std::uint32_t>(gc.profiles[i].size()));
      for (double v : gc.profiles[i]) {
        put(out, v);
      }
    }
  }
  if (!out) {
    throw Error("failed writing " + path.string());
  }
}

IndexSnapshot load_index(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error("cannot read " + path.string());
  }
  char magic[sizeof kIndexMagic];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kIndexMagic, sizeof magic) != 0) {
    throw DataError(path.string() + " is not an index file");
  }
  if (get<std::uint32_t>(in) != kIndexFormat) {
    throw DataError("unsupported index format in " + path.string());
  }
  const auto version = get<std::uint64_t>(in);
  const auto n_products = get<std::uint32_t>(in);
  std::map<ProductId, GeneratedCodes> table;
  for (std::uint32_t i = 0; i < n_products; ++i) {
    const auto pid = get<ProductId>(in);
    GeneratedCodes gc;
    gc.fallback = get<std::uint8_t>(in) != 0;
    const auto n_codes = get<std::uint32_t>(in);
    for (std::uint32_t c = 0; c < n_codes; ++c) {
      std::string code(get<std::uint32_t>(in), '\0');
      if (!in.read(code.data(), static_cast<std::streamsize>(code.size()))) {
        throw DataError("index file truncated");
      }
      TokenProbProfile prof(get<std::uint32_t>(in));
      for (auto& v : prof) {
        v = get<double>(in);
      }
      gc.codes.push_back(std::move(code));
      gc.profiles.push_back(std::move(prof));
    }
    table.emplace(pid, std::move(gc));
  }
  return make_snapshot(std::move(table), version);
}

QueryCache::QueryCache(std::size_t capacity) : capacity_(capacity) {}

std::optional<GeneratedCodes> QueryCache::get(const std::string& query, std::uint64_t version) {
  std::lock_guard lock(mu_);
  auto it = map_.find(query);
  if (it == map_.end() || it->second->version != version) {
    ++misses_;
    return std::nullopt;
  }
  order_.splice(order_.begin(), order_, it->second);
  ++hits_;
  return it->second->codes;
}

void QueryCache::put(const std::string& query, std::uint64_t version, GeneratedCodes codes) {
  if (capacity_ == 0) {
    return;
  }
  std::lock_guard lock(mu_);
  auto it = map_.find(query);
  if (it != map_.end()) {
    it->second->version = version;
    it->second->codes = std::move(codes);
    order_.splice(order_.begin(), order_, it->second);
    return;
  }
  order_.push_front({query, version, std::move(codes)});
  map_[query] = order_.begin();
  if (order_.size() > capacity_) {
    map_.erase(order_.back().query);
    order_.pop_back();
  }
}

std::size_t QueryCache::size() const {
  std::lock_guard lock(mu_);
  return order_.size();
}

std::size_t QueryCache::hits() const {
  std::lock_guard lock(mu_);
  return hits_;
}

std::size_t QueryCache::misses() const {
  std::lock_guard lock(mu_);
  return misses_;
}

std::vector<RetrievedItem> score_candidates(const GeneratedCodes& query_codes, const IndexSnapshot& snapshot,
                                            const CodeWeights& weights, std::size_t n) {
  std::unordered_map<ProductId, RetrievedItem> acc;
  for (std::size_t c = 0; c < query_codes.codes.size(); ++c) {
    const auto* list = snapshot.find(query_codes.codes[c]);
    if (list == nullptr) {
      continue;
    }
    const double w = weights.get(query_codes.codes[c]);
    for (const auto& post : *list) {
      auto& item = acc[post.product];
      item.product = post.product;
      item.score += s_rele(query_codes.profiles[c], post.profile, w);
      item.codes.push_back(query_codes.codes[c]);
    }
  }
  std::vector<RetrievedItem> out;
  out.reserve(acc.size());
  for (auto& [_, item] : acc) {
    out.push_back(std::move(item));
  }
  const auto better = [](const RetrievedItem& a, const RetrievedItem& b) {
    return a.score != b.score ? a.score > b.score : a.product < b.product;
  };
  if (out.size() > n) {
    std::partial_sort(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(n), out.end(), better);
    out.resize(n);
  } else {
    std::sort(out.begin(), out.end(), better);
  }
  return out;
}

Retriever::Retriever(std::shared_ptr<const Model> query_model, std::shared_ptr<const Vocabulary> vocab,
                     std::shared_ptr<const AttributeLexicon> lexicon, std::shared_ptr<const CodeWeights> weights,
                     const CodeIndex& index, RetrievalConfig config)
    : model_(std::move(query_model)),
      vocab_(std::move(vocab)),
      lexicon_(std::move(lexicon)),
      weights_(std::move(weights)),
      index_(&index),
      config_(std::move(config)),
      cache_(std::make_unique<QueryCache>(config_.use_cache ? config_.cache_capacity : 0)) {
  config_.generation.validate();
  if (config_.top_n == 0) {
    throw ConfigError("top_n must be positive");
  }
}

GeneratedCodes Retriever::query_codes(const std::string& query, std::uint64_t version) const {
  if (config_.use_cache) {
    if (auto hit = cache_->get(query, version)) {
      return *hit;
    }
  }
  auto codes = generate_codes(*model_, *vocab_, *lexicon_, Side::Query, query, config_.generation);
  if (config_.use_cache) {
    cache_->put(query, version, codes);
  }
  return codes;
}

RetrievalResult Retriever::retrieve(const std::string& query, std::optional<std::size_t> k) const {
  if (query.empty()) {
    throw DataError("empty query");
  }
  const std::size_t n = std::min(k.value_or(config_.top_n), config_.top_n);
  const auto snap = index_->snapshot();
  RetrievalResult res;
  res.query = query;
  res.index_version = snap->version;
  const auto codes = query_codes(query, snap->version);
  res.query_codes = codes.codes;
  res.items = score_candidates(codes, *snap, *weights_, n);
  return res;
}

}  // namespace gram
