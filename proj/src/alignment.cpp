#include "gram/alignment.hpp"

#include "gram/json_io.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <numeric>
#include <set>

namespace gram {

void AlignmentConfig::validate() const {
  if (!(beta_w > 0.0) || !(beta_l > 0.0)) {
    throw ConfigError("beta_w and beta_l must be positive");
  }
  if (!(nll_weight >= 0.0)) {
    throw ConfigError("nll_weight must be non-negative");
  }
  if (!(margin >= 0.0)) {
    throw ConfigError("margin must be non-negative");
  }
  if (max_code_l == 0 || top_k == 0 || batch_size == 0) {
    throw ConfigError("max_code_l, top_k and batch_size must be positive");
  }
  if (heldout_fraction < 0.0 || heldout_fraction >= 1.0 || dropout < 0.0 || dropout >= 1.0) {
    throw ConfigError("fractions must lie in [0,1)");
  }
}

std::vector<PreferencePair> build_alignment_dataset(const std::vector<ClickEvent>& clicks,
                                                    const CodeTable& query_codes, const CodeTable& product_codes,
                                                    const AlignmentConfig& config, AlignmentDatasetStats* stats) {
  config.validate();
  AlignmentDatasetStats st;
  static const std::vector<Code> kNone;
  auto codes_of = [](const CodeTable& table, std::uint32_t id) -> const std::vector<Code>& {
    auto it = table.find(id);
    return it == table.end() ? kNone : it->second;
  };
  auto contains = [](const std::vector<Code>& v, const Code& c) { return std::find(v.begin(), v.end(), c) != v.end(); };

  std::map<std::string, std::uint32_t> support;
  for (const auto& c : clicks) {
    const auto& qc = codes_of(query_codes, c.query_id);
    const auto& tc = codes_of(product_codes, c.product_id);
    for (const auto& code : qc) {
      if (contains(tc, code)) {
        support[code.str()] += c.count;
      }
    }
  }

  std::vector<PreferencePair> out;
  for (std::size_t ci = 0; ci < clicks.size(); ++ci) {
    const auto& c = clicks[ci];
    ++st.click_pairs;
    const auto& qc = codes_of(query_codes, c.query_id);
    const auto& tc = codes_of(product_codes, c.product_id);
    std::vector<const Code*> pos;
    std::vector<const Code*> neg;
    for (const auto& code : qc) {
      (contains(tc, code) ? pos : neg).push_back(&code);
    }
    for (const auto& code : tc) {
      if (!contains(qc, code)) {
        neg.push_back(&code);
      }
    }
    if (pos.empty()) {
      ++st.empty_intersection;
      continue;
    }
    if (neg.empty()) {
      ++st.no_negative;
      continue;
    }
    Rng rng = make_rng(config.seed, 0xa11600000000ULL + ci);
    for (const Code* p : pos) {
      std::vector<const Code*> pool = neg;
      const std::size_t take = std::min(config.negatives_per_positive, pool.size());
      for (std::size_t i = 0; i < take; ++i) {
        std::swap(pool[i], pool[i + uniform_index(rng, pool.size() - i)]);
        out.push_back({c.query_id, c.product_id, *p, *pool[i], support.at(p->str()), 1});
      }
    }
  }
  if (config.max_pairs > 0 && out.size() > config.max_pairs) {
    std::vector<std::size_t> idx(out.size());
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng = make_rng(config.seed, 0xa11700000000ULL);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(config.max_pairs);
    std::sort(idx.begin(), idx.end());
    std::vector<PreferencePair> kept;
    kept.reserve(idx.size());
    for (auto i : idx) {
      kept.push_back(std::move(out[i]));
    }
    out = std::move(kept);
  }
  if (stats != nullptr) {
    *stats = st;
  }
  return out;
}

std::uint32_t repetition_count(std::uint32_t k, std::size_t code_l, std::size_t max_code_l) {
  if (k == 0) {
    throw DataError("repetition support k must be positive");
  }
  if (code_l == 0 || max_code_l == 0) {
    throw DataError("code length and max_code_l must be positive");
  }
  const double alpha = static_cast<double>(code_l) / static_cast<double>(max_code_l);
  const double n = std::round(std::sqrt(static_cast<double>(k)) * alpha);
  return static_cast<std::uint32_t>(std::max(1.0, n));
}

std::vector<PreferencePair> resample_positives(std::vector<PreferencePair> pairs, const AlignmentConfig& config) {
  for (auto& p : pairs) {
    p.repetitions = repetition_count(p.support, p.positive.size(), config.max_code_l);
  }
  return pairs;
}

PairContext make_pair_context(const Vocabulary& vocab, const std::vector<QueryRecord>& queries,
                              const std::vector<ProductRecord>& products) {
  PairContext ctx;
  ctx.vocab = &vocab;
  for (const auto& q : queries) {
    ctx.query_text[q.query_id] = q.text;
  }
  for (const auto& p : products) {
    ctx.product_text[p.product_id] = p.title;
  }
  return ctx;
}

double averaged_logprob(double logprob_q, double logprob_t) {
  const double hi = std::max(logprob_q, logprob_t);
  const double lo = std::min(logprob_q, logprob_t);
  return hi + std::log1p(std::exp(lo - hi)) - std::numbers::ln2;
}

double averaged_prob(double logprob_q, double logprob_t) { return std::exp(averaged_logprob(logprob_q, logprob_t)); }

template <typename Scalar>
double averaged_logprob(const ModelParams<Scalar>& params, const Sequence& by_query, const Sequence& by_product) {
  return averaged_logprob(sequence_logprob(params, by_query.prompt, by_query.target),
                          sequence_logprob(params, by_product.prompt, by_product.target));
}

namespace {

Sequence make_sequence(const Vocabulary& vocab, Side side, const std::string& text, const Code& code,
                       std::size_t max_len) {
  Sequence s;
  s.target = encode_code(vocab, code);
  s.prompt = encode_prompt(vocab, side, text);
  if (s.prompt.size() + s.target.size() > max_len) {
    s.prompt.resize(max_len - s.target.size());
  }
  return s;
}

double sum(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0); }

double log_sigmoid(double z) { return z >= 0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z)); }

}  // namespace

std::array<Sequence, 4> pair_sequences(const PreferencePair& pair, const PairContext& ctx, std::size_t max_len) {
  const auto qt = ctx.query_text.find(pair.query);
  const auto pt = ctx.product_text.find(pair.product);
  if (qt == ctx.query_text.end() || pt == ctx.product_text.end()) {
    throw DataError("preference pair references unknown query or product");
  }
  const auto& v = *ctx.vocab;
  return {make_sequence(v, Side::Query, qt->second, pair.positive, max_len),
          make_sequence(v, Side::Product, pt->second, pair.positive, max_len),
          make_sequence(v, Side::Query, qt->second, pair.negative, max_len),
          make_sequence(v, Side::Product, pt->second, pair.negative, max_len)};
}

ReferenceLogprobs reference_logprobs(const Model& reference, const std::array<Sequence, 4>& seqs) {
  return {averaged_logprob(reference, seqs[0], seqs[1]), averaged_logprob(reference, seqs[2], seqs[3])};
}

Objective ca_objective(const std::vector<std::array<Sequence, 4>>& pairs, const std::vector<ReferenceLogprobs>& refs,
                       const AlignmentConfig& config, double nll_weight) {
  Objective obj;
  obj.groups.reserve(pairs.size());
  for (const auto& p : pairs) {
    obj.groups.push_back({p.begin(), p.end()});
  }
  const double inv_n = pairs.empty() ? 0.0 : 1.0 / static_cast<double>(pairs.size());
  obj.loss = [refs, inv_n, nll_weight, bw = config.beta_w, bl = config.beta_l](
                 std::size_t g, std::span<const std::vector<double>> lp, std::span<std::vector<double>> dlp) {
    const double s[4] = {sum(lp[0]), sum(lp[1]), sum(lp[2]), sum(lp[3])};
    const double aw = averaged_logprob(s[0], s[1]);
    const double al = averaged_logprob(s[2], s[3]);
    const double z = bw * (aw - refs[g].positive) - bl * (al - refs[g].negative);
    const double loss = -log_sigmoid(z) * inv_n;
    // d(-log sigmoid z)/dz = -sigmoid(-z)
    const double dz = -std::exp(log_sigmoid(-z)) * inv_n;
    // d log((e^a + e^b)/2) / da = e^a / (e^a + e^b)
    const double share[4] = {std::exp(s[0] - aw - std::numbers::ln2), std::exp(s[1] - aw - std::numbers::ln2),
                             std::exp(s[2] - al - std::numbers::ln2), std::exp(s[3] - al - std::numbers::ln2)};
    const double coef[4] = {dz * bw * share[0], dz * bw * share[1], -dz * bl * share[2], -dz * bl * share[3]};
    for (std::size_t k = 0; k < 4; ++k) {
      std::fill(dlp[k].begin(), dlp[k].end(), coef[k]);
    }
    if (nll_weight == 0.0) {
      return loss;
    }
    const double a = 0.5 * nll_weight * inv_n;
    for (std::size_t k = 0; k < 2; ++k) {
      for (auto& v : dlp[k]) {
        v -= a;
      }
    }
    return loss - a * (s[0] + s[1]);
  };
  return obj;
}

double ca_loss(const Model& theta, const Model& reference, const std::vector<PreferencePair>& batch,
               const PairContext& ctx, const AlignmentConfig& config) {
  if (batch.empty()) {
    throw DataError("ca_loss on an empty batch");
  }
  std::vector<std::array<Sequence, 4>> seqs;
  std::vector<ReferenceLogprobs> refs;
  for (const auto& p : batch) {
    seqs.push_back(pair_sequences(p, ctx, static_cast<std::size_t>(theta.config().max_len)));
    refs.push_back(reference_logprobs(reference, seqs.back()));
  }
  return evaluate_loss(theta, ca_objective(seqs, refs, config));
}

double mean_pair_margin(const Model& params, const std::vector<std::array<Sequence, 4>>& pairs) {
  if (pairs.empty()) {
    return 0.0;
  }
  double total = 0.0;
  for (const auto& s : pairs) {
    total += averaged_logprob(params, s[0], s[1]) - averaged_logprob(params, s[2], s[3]);
  }
  return total / static_cast<double>(pairs.size());
}

AlignResult train_co_alignment(const Model& reference, const std::vector<PreferencePair>& dataset,
                               const PairContext& ctx, const AlignmentConfig& config) {
  config.validate();
  AlignResult res;
  res.params = reference;
  if (dataset.empty()) {
    return res;
  }
  const auto max_len = static_cast<std::size_t>(reference.config().max_len);

  std::set<QueryId> queries;
  for (const auto& p : dataset) {
    queries.insert(p.query);
  }
  std::vector<QueryId> pool(queries.begin(), queries.end());
  Rng split_rng = make_rng(config.seed, 0xa1);
  std::shuffle(pool.begin(), pool.end(), split_rng);
  const auto n_held = static_cast<std::size_t>(std::floor(config.heldout_fraction * static_cast<double>(pool.size())));
  const std::set<QueryId> held(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_held));

  std::vector<std::array<Sequence, 4>> train_seqs;
  std::vector<ReferenceLogprobs> train_refs;
  std::vector<std::size_t> expanded;
  std::vector<std::array<Sequence, 4>> held_seqs;
  for (const auto& p : dataset) {
    auto seqs = pair_sequences(p, ctx, max_len);
    if (held.count(p.query) != 0) {
      held_seqs.push_back(std::move(seqs));
      continue;
    }
    for (std::uint32_t r = 0; r < p.repetitions; ++r) {
      expanded.push_back(train_seqs.size());
    }
    train_refs.push_back(reference_logprobs(reference, seqs));
    train_seqs.push_back(std::move(seqs));
  }

  AdamWState<double> opt;
  res.heldout_margins.push_back(mean_pair_margin(res.params, held_seqs));
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    Rng rng = make_rng(config.seed, 0xa200 + epoch);
    std::shuffle(expanded.begin(), expanded.end(), rng);
    for (std::size_t start = 0; start < expanded.size(); start += config.batch_size) {
      const std::size_t end = std::min(expanded.size(), start + config.batch_size);
      std::vector<std::array<Sequence, 4>> bseq;
      std::vector<ReferenceLogprobs> bref;
      for (std::size_t k = start; k < end; ++k) {
        bseq.push_back(train_seqs[expanded[k]]);
        bref.push_back(train_refs[expanded[k]]);
      }
      ++step;
      const auto lg = loss_grad(res.params, ca_objective(bseq, bref, config, config.nll_weight),
                                DropoutSpec{config.dropout, mix_seed(config.seed ^ 0xca, step)}, step);
      adamw_step(res.params.values(), lg.grad, opt, config.adamw);
      res.log.push_back({step, epoch, lg.loss, std::nullopt});
    }
    res.heldout_margins.push_back(mean_pair_margin(res.params, held_seqs));
    if (!res.log.empty()) {
      res.log.back().heldout_nll = res.heldout_margins.back();
    }
    log_info("co-alignment epoch " + std::to_string(epoch) + " heldout margin " +
             std::to_string(res.heldout_margins.back()));
  }
  return res;
}

void write_alignment_jsonl(const std::filesystem::path& path, const std::vector<PreferencePair>& pairs) {
  std::vector<Json> rows;
  rows.reserve(pairs.size());
  for (const auto& p : pairs) {
    rows.push_back({{"query_id", format_query_id(p.query)},
                    {"product_id", format_product_id(p.product)},
                    {"c_w", p.positive.str()},
                    {"c_l", p.negative.str()},
                    {"k", p.support},
                    {"n", p.repetitions}});
  }
  write_jsonl(path, rows);
}

std::vector<PreferencePair> read_alignment_jsonl(const std::filesystem::path& path, const AttributeLexicon& lexicon) {
  std::vector<PreferencePair> out;
  for_each_jsonl(path, [&](const Json& j) {
    PreferencePair p;
    p.query = parse_query_id(j.at("query_id").get<std::string>());
    p.product = parse_product_id(j.at("product_id").get<std::string>());
    p.positive = parse_code(j.at("c_w").get<std::string>(), lexicon);
    p.negative = parse_code(j.at("c_l").get<std::string>(), lexicon);
    p.support = j.at("k").get<std::uint32_t>();
    p.repetitions = j.at("n").get<std::uint32_t>();
    if (p.repetitions < 1 || p.positive == p.negative) {
      throw DataError("invalid preference pair");
    }
    out.push_back(std::move(p));
  });
  return out;
}

namespace {
std::atomic<std::size_t> g_jsd_clamps{0};
}

double jsd_term(double p, double q) {
  if (!(p > 0.0)) {
    p = 1e-12;
    g_jsd_clamps.fetch_add(1, std::memory_order_relaxed);
  }
  if (!(q > 0.0)) {
    q = 1e-12;
    g_jsd_clamps.fetch_add(1, std::memory_order_relaxed);
  }
  // ln(2p/(p+q)) = log1p(d), ln(2q/(p+q)) = log1p(-d)
  const double d = (p - q) / (p + q);
  return std::max(0.0, p * std::log1p(d) + q * std::log1p(-d));
}

std::size_t jsd_clamp_count() { return g_jsd_clamps.load(); }

TokenProbProfile token_prob_profile(const Model& params, const Sequence& seq) {
  auto lp = token_logprobs(params, seq.prompt, seq.target);
  for (auto& v : lp) {
    v = std::exp(v);
  }
  return lp;
}

double CodeWeights::get(const std::string& code) const {
  auto it = weights_.find(code);
  return it == weights_.end() ? 1.0 : it->second;
}

void write_code_weights(const std::filesystem::path& path, const CodeWeights& weights) {
  Json j = Json::object();
  for (const auto& [code, w] : weights.values()) {
    j[code] = w;
  }
  write_json_file(path, j);
}

CodeWeights read_code_weights(const std::filesystem::path& path) {
  const Json j = read_json_file(path);
  if (!j.is_object()) {
    throw DataError("code weights must be a JSON object");
  }
  CodeWeights w;
  for (const auto& [code, v] : j.items()) {
    if (!v.is_number()) {
      throw DataError("weight of '" + code + "' is not a number");
    }
    w.set(code, v.get<double>());
  }
  return w;
}

double s_rele(const TokenProbProfile& query_side, const TokenProbProfile& product_side, double weight) {
  if (query_side.size() != product_side.size()) {
    throw DataError("token profiles differ in length");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < query_side.size(); ++i) {
    s += jsd_term(query_side[i], product_side[i]);
  }
  return weight * s;
}

double aggregate_relevance(const std::vector<MatchedCode>& matched, const CodeWeights& weights) {
  double total = 0.0;
  for (const auto& m : matched) {
    total += s_rele(m.query_side, m.product_side, weights.get(m.code));
  }
  return total;
}

double triple_score(const CandidateTerms& terms, const CodeWeights& weights) {
  double s = 0.0;
  for (std::size_t i = 0; i < terms.codes.size(); ++i) {
    s += weights.get(terms.codes[i]) * terms.divergence[i];
  }
  return s;
}

double weight_pairwise_loss(const WeightTriple& triple, const CodeWeights& weights, double margin,
                            std::unordered_map<std::string, double>* grad) {
  const double h = triple_score(triple.negative, weights) - triple_score(triple.positive, weights) + margin;
  if (h <= 0.0) {
    return 0.0;
  }
  if (grad != nullptr) {
    for (std::size_t i = 0; i < triple.negative.codes.size(); ++i) {
      (*grad)[triple.negative.codes[i]] += triple.negative.divergence[i];
    }
    for (std::size_t i = 0; i < triple.positive.codes.size(); ++i) {
      (*grad)[triple.positive.codes[i]] -= triple.positive.divergence[i];
    }
  }
  return h;
}

double pairwise_accuracy(const std::vector<WeightTriple>& triples, const CodeWeights& weights) {
  if (triples.empty()) {
    return 0.0;
  }
  std::size_t ok = 0;
  for (const auto& t : triples) {
    ok += triple_score(t.positive, weights) > triple_score(t.negative, weights) ? 1 : 0;
  }
  return static_cast<double>(ok) / static_cast<double>(triples.size());
}

WeightTrainingResult train_code_weights(const std::vector<WeightTriple>& triples, CodeWeights init,
                                        const WeightTrainingConfig& config) {
  if (config.batch_size == 0 || !(config.lr > 0.0) || !(config.margin >= 0.0)) {
    throw ConfigError("invalid weight training settings");
  }
  std::map<std::string, Index> slot;
  for (const auto& t : triples) {
    for (const auto* terms : {&t.positive, &t.negative}) {
      for (const auto& c : terms->codes) {
        slot.emplace(c, 0);
      }
    }
  }
  Index next = 0;
  for (auto& [_, i] : slot) {
    i = next++;
  }
  Vec<double> w(next);
  for (const auto& [c, i] : slot) {
    w(i) = init.get(c);
  }
  auto to_weights = [&] {
    CodeWeights out = init;
    for (const auto& [c, i] : slot) {
      out.set(c, w(i));
    }
    return out;
  };
  auto mean_loss = [&] {
    const auto cw = to_weights();
    double total = 0.0;
    for (const auto& t : triples) {
      total += weight_pairwise_loss(t, cw, config.margin);
    }
    return triples.empty() ? 0.0 : total / static_cast<double>(triples.size());
  };

  WeightTrainingResult res;
  res.epoch_loss.push_back(mean_loss());
  AdamWConfig opt_cfg;
  opt_cfg.lr = config.lr;
  opt_cfg.weight_decay = 0.0;
  AdamWState<double> opt;
  std::vector<std::size_t> order(triples.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 1; epoch <= config.epochs && !triples.empty(); ++epoch) {
    Rng rng = make_rng(config.seed, 0xc0de + epoch);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      const auto cw = to_weights();
      std::unordered_map<std::string, double> grad;
      for (std::size_t k = start; k < end; ++k) {
        weight_pairwise_loss(triples[order[k]], cw, config.margin, &grad);
      }
      Vec<double> g = Vec<double>::Zero(next);
      for (const auto& [c, v] : grad) {
        g(slot.at(c)) = v / static_cast<double>(end - start);
      }
      adamw_step(w, g, opt, opt_cfg);
    }
    res.epoch_loss.push_back(mean_loss());
  }
  res.weights = to_weights();
  return res;
}

template double averaged_logprob(const ModelParams<double>&, const Sequence&, const Sequence&);
template double averaged_logprob(const ModelParams<float>&, const Sequence&, const Sequence&);

}  // namespace gram
