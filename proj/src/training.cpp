#include "gram/training.hpp"

#include "gram/json_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

namespace gram {

std::vector<SftItem> encode_sft(const Vocabulary& vocab, std::span<const SftExample> examples, std::size_t max_len,
                                EncodeStats* stats) {
  std::vector<SftItem> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) {
    std::size_t dropped = 0;
    TokenSeq prompt = encode_prompt(vocab, ex.side, ex.input, &dropped);
    TokenSeq target = encode_code(vocab, ex.code);
    if (target.size() + 1 > max_len) {
      throw DataError("code '" + ex.code.str() + "' does not fit max length " + std::to_string(max_len));
    }
    bool truncated = false;
    if (prompt.size() + target.size() > max_len) {
      prompt.resize(max_len - target.size());
      truncated = true;
    }
    if (stats != nullptr) {
      stats->dropped_unknown += dropped;
      stats->truncated += truncated ? 1 : 0;
    }
    out.push_back({ex.side, ex.item, Sequence{std::move(prompt), std::move(target)}, ex.weight});
  }
  return out;
}

std::vector<SftExample> make_sft_examples(const CodeTable& query_codes, const CodeTable& product_codes,
                                          const std::vector<QueryRecord>& queries,
                                          const std::vector<ProductRecord>& products) {
  std::map<std::uint32_t, const std::string*> qtext;
  for (const auto& q : queries) {
    qtext[q.query_id] = &q.text;
  }
  std::map<std::uint32_t, const std::string*> ptext;
  for (const auto& p : products) {
    ptext[p.product_id] = &p.title;
  }
  std::vector<SftExample> out;
  for (const auto& [id, codes] : query_codes) {
    auto it = qtext.find(id);
    if (it == qtext.end()) {
      throw DataError("code table references unknown query " + format_query_id(id));
    }
    for (const auto& c : codes) {
      out.push_back({Side::Query, id, *it->second, c, 1.0});
    }
  }
  for (const auto& [id, codes] : product_codes) {
    auto it = ptext.find(id);
    if (it == ptext.end()) {
      throw DataError("code table references unknown product " + format_product_id(id));
    }
    for (const auto& c : codes) {
      out.push_back({Side::Product, id, *it->second, c, 1.0});
    }
  }
  return out;
}

template <typename Scalar>
double sft_loss(const ModelParams<Scalar>& params, std::span<const SftItem> batch, std::optional<Side> side_filter) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& it : batch) {
    if (side_filter && it.side != *side_filter) {
      continue;
    }
    total -= it.weight * sequence_logprob(params, it.seq.prompt, it.seq.target);
    ++n;
  }
  if (n == 0) {
    throw DataError("sft_loss on an empty batch");
  }
  return total / static_cast<double>(n);
}

template <typename Scalar>
double co_training_loss(const ModelParams<Scalar>& params, std::span<const SftItem> batch, double lambda) {
  const bool has_q = std::any_of(batch.begin(), batch.end(), [](const SftItem& i) { return i.side == Side::Query; });
  const bool has_t =
      std::any_of(batch.begin(), batch.end(), [](const SftItem& i) { return i.side == Side::Product; });
  if (!has_q) {
    log_warn("co-training batch has no query examples");
  }
  if (!has_t) {
    log_warn("co-training batch has no product examples");
  }
  const double lq = has_q ? sft_loss(params, batch, Side::Query) : 0.0;
  const double lt = has_t ? sft_loss(params, batch, Side::Product) : 0.0;
  return lq + lambda * lt;
}

Objective sft_objective(std::span<const SftItem> batch, double lambda) {
  std::size_t nq = 0;
  std::size_t nt = 0;
  for (const auto& it : batch) {
    (it.side == Side::Query ? nq : nt) += 1;
  }
  Objective obj;
  std::vector<double> coef;
  obj.groups.reserve(batch.size());
  coef.reserve(batch.size());
  for (const auto& it : batch) {
    obj.groups.push_back({it.seq});
    coef.push_back(it.side == Side::Query ? it.weight / static_cast<double>(nq)
                                          : lambda * it.weight / static_cast<double>(nt));
  }
  obj.loss = [coef = std::move(coef)](std::size_t g, std::span<const std::vector<double>> lp,
                                      std::span<std::vector<double>> dlp) {
    double l = 0.0;
    for (std::size_t i = 0; i < lp[0].size(); ++i) {
      l -= coef[g] * lp[0][i];
      dlp[0][i] = -coef[g];
    }
    return l;
  };
  return obj;
}

void TrainingConfig::validate() const {
  if (!(lambda >= 0.0)) {
    throw ConfigError("lambda must be non-negative");
  }
  if (batch_size == 0) {
    throw ConfigError("batch_size must be positive");
  }
  if (!(adamw.lr > 0.0) || !(adamw.eps > 0.0) || adamw.weight_decay < 0.0) {
    throw ConfigError("invalid optimizer settings");
  }
  if (dropout < 0.0 || dropout >= 1.0) {
    throw ConfigError("dropout must lie in [0,1)");
  }
  if (heldout_fraction < 0.0 || heldout_fraction >= 1.0) {
    throw ConfigError("heldout_fraction must lie in [0,1)");
  }
}

std::set<std::uint32_t> heldout_query_ids(std::span<const SftItem> items, double fraction, std::uint64_t seed) {
  std::set<std::uint32_t> ids;
  for (const auto& it : items) {
    if (it.side == Side::Query) {
      ids.insert(it.item);
    }
  }
  std::vector<std::uint32_t> pool(ids.begin(), ids.end());
  const auto n = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(pool.size())));
  Rng rng = make_rng(seed, 0x5f7);
  std::shuffle(pool.begin(), pool.end(), rng);
  return {pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n)};
}

double token_nll(const Model& params, std::span<const SftItem> items) {
  double nll = 0.0;
  std::size_t tokens = 0;
  for (const auto& it : items) {
    nll -= sequence_logprob(params, it.seq.prompt, it.seq.target);
    tokens += it.seq.target.size();
  }
  return tokens == 0 ? 0.0 : nll / static_cast<double>(tokens);
}

namespace {

// Shuffles each side and interleaves them at the dataset ratio.
std::vector<std::size_t> stratified_order(const std::vector<std::size_t>& q, const std::vector<std::size_t>& t,
                                          Rng& rng) {
  std::vector<std::size_t> qs = q;
  std::vector<std::size_t> ts = t;
  std::shuffle(qs.begin(), qs.end(), rng);
  std::shuffle(ts.begin(), ts.end(), rng);
  std::vector<std::size_t> out;
  out.reserve(qs.size() + ts.size());
  std::size_t i = 0;
  std::size_t j = 0;
  while (i < qs.size() || j < ts.size()) {
    // take a query when its consumed fraction lags the product side
    const bool take_q =
        j == ts.size() || (i < qs.size() && (i + 1) * ts.size() <= (j + 1) * qs.size());
    out.push_back(take_q ? qs[i++] : ts[j++]);
  }
  return out;
}

}  // namespace

SftResult train_sft(Model init, std::span<const SftItem> items, const TrainingConfig& config) {
  config.validate();
  if (items.empty()) {
    throw DataError("train_sft requires a nonempty dataset");
  }
  SftResult res;
  res.heldout_queries = heldout_query_ids(items, config.heldout_fraction, config.seed);
  std::vector<SftItem> heldout;
  std::vector<std::size_t> q_idx;
  std::vector<std::size_t> t_idx;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& it = items[i];
    if (it.side == Side::Query && res.heldout_queries.count(it.item) != 0) {
      heldout.push_back(it);
    } else {
      (it.side == Side::Query ? q_idx : t_idx).push_back(i);
    }
  }
  if (q_idx.empty() && t_idx.empty()) {
    throw DataError("train_sft: every example is held out");
  }

  Model params = std::move(init);
  AdamWState<double> opt;
  res.initial_heldout_nll = token_nll(params, heldout);
  res.log.push_back({0, 0, std::numeric_limits<double>::quiet_NaN(), res.initial_heldout_nll});
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    Rng rng = make_rng(config.seed, 0x100 + epoch);
    const auto order = stratified_order(q_idx, t_idx, rng);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<SftItem> batch;
      batch.reserve(end - start);
      for (std::size_t k = start; k < end; ++k) {
        batch.push_back(items[order[k]]);
      }
      ++step;
      LossGrad<double> lg;
      try {
        lg = loss_grad(params, sft_objective(batch, config.lambda), DropoutSpec{config.dropout, mix_seed(config.seed, step)},
                       step);
      } catch (const TrainingError&) {
        if (config.failure_checkpoint) {
          save_checkpoint(*config.failure_checkpoint, params);
        }
        throw;
      }
      adamw_step(params.values(), lg.grad, opt, config.adamw);
      res.log.push_back({step, epoch, lg.loss, std::nullopt});
    }
    const double h = token_nll(params, heldout);
    res.log.back().heldout_nll = h;
    log_info("sft epoch " + std::to_string(epoch) + " loss " + std::to_string(res.log.back().loss) +
             " heldout nll " + std::to_string(h));
  }
  res.final_heldout_nll = token_nll(params, heldout);
  res.params = std::move(params);
  return res;
}

void write_training_log(const std::filesystem::path& path, const std::vector<TrainLogRow>& log) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw Error("cannot write " + path.string());
  }
  out << "step,epoch,loss,heldout_nll\n";
  out.precision(17);
  for (const auto& r : log) {
    out << r.step << ',' << r.epoch << ',';
    if (!std::isnan(r.loss)) {
      out << r.loss;
    }
    out << ',';
    if (r.heldout_nll) {
      out << *r.heldout_nll;
    }
    out << '\n';
  }
}

bool augmentation_filter(const AttributeSet& code_attrs, const AttributeSet& item_attrs,
                         const std::vector<const AttributeSet*>& partner_attrs) {
  const auto* item_cat = find_type(item_attrs, AttributeType::Category);
  const auto* code_cat = find_type(code_attrs, AttributeType::Category);
  if (item_cat == nullptr || code_cat == nullptr || item_cat->value != code_cat->value) {
    return false;
  }
  for (const auto* partner : partner_attrs) {
    if (is_subset(code_attrs, set_union(item_attrs, *partner))) {
      return true;
    }
  }
  return false;
}

std::vector<Code> decode_generated_codes(const BeamResult& beam, const Vocabulary& vocab,
                                         const AttributeLexicon& lexicon, std::size_t* malformed) {
  std::vector<Code> out;
  for (const auto& h : beam.hypotheses) {
    auto text = decode_code_tokens(vocab, h.tokens);
    std::optional<Code> code;
    if (text) {
      try {
        code = make_canonical_code(code_attribute_set(parse_code(*text, lexicon)));
      } catch (const Error&) {
      }
    }
    if (!code) {
      if (malformed != nullptr) {
        ++*malformed;
      }
      continue;
    }
    if (std::find(out.begin(), out.end(), *code) == out.end()) {
      out.push_back(std::move(*code));
    }
  }
  return out;
}

std::vector<SftExample> augment_codes(const Model& params, const Vocabulary& vocab, const AttributeLexicon& lexicon,
                                      const std::vector<SftExample>& examples,
                                      const std::vector<QueryRecord>& queries,
                                      const std::vector<ProductRecord>& products,
                                      const std::vector<ClickEvent>& train_clicks, const AugmentConfig& config,
                                      AugmentStats* stats) {
  AugmentStats local;
  std::map<std::uint32_t, const QueryRecord*> qrec;
  for (const auto& q : queries) {
    qrec[q.query_id] = &q;
  }
  std::map<std::uint32_t, const ProductRecord*> prec;
  for (const auto& p : products) {
    prec[p.product_id] = &p;
  }
  std::map<std::uint32_t, std::vector<const AttributeSet*>> q_partners;
  std::map<std::uint32_t, std::vector<const AttributeSet*>> p_partners;
  for (const auto& c : train_clicks) {
    auto qi = qrec.find(c.query_id);
    auto pi = prec.find(c.product_id);
    if (qi == qrec.end() || pi == prec.end()) {
      throw DataError("click references an unknown query or product");
    }
    q_partners[c.query_id].push_back(&pi->second->attributes);
    p_partners[c.product_id].push_back(&qi->second->attributes);
  }
  std::set<std::tuple<Side, std::uint32_t, std::string>> existing;
  for (const auto& ex : examples) {
    existing.insert({ex.side, ex.item, ex.code.str()});
  }

  GenerationConfig gen = config.generation;
  gen.n_return = std::min(gen.n_return, config.n_codes);
  std::vector<SftExample> out = examples;
  auto run_side = [&](Side side, const std::map<std::uint32_t, std::vector<const AttributeSet*>>& partners) {
    for (const auto& [id, partner_attrs] : partners) {
      const std::string& text = side == Side::Query ? qrec.at(id)->text : prec.at(id)->title;
      const AttributeSet& own = side == Side::Query ? qrec.at(id)->attributes : prec.at(id)->attributes;
      TokenSeq prompt = encode_prompt(vocab, side, text);
      const auto max_prompt = static_cast<std::size_t>(params.config().max_len) - 2;
      if (prompt.size() > max_prompt) {
        prompt.resize(max_prompt);
      }
      const auto beam = beam_search(params, prompt, gen, DecodeConstraints{Vocabulary::kEos, {}, nullptr});
      local.generated += beam.hypotheses.size();
      for (auto& code : decode_generated_codes(beam, vocab, lexicon, &local.malformed)) {
        if (!augmentation_filter(code_attribute_set(code), own, partner_attrs)) {
          ++local.rejected;
          continue;
        }
        if (existing.insert({side, id, code.str()}).second) {
          out.push_back({side, id, text, std::move(code), 1.0});
          ++local.added;
        }
      }
    }
  };
  run_side(Side::Product, p_partners);
  run_side(Side::Query, q_partners);
  if (stats != nullptr) {
    *stats = local;
  }
  return out;
}

void write_sft_jsonl(const std::filesystem::path& path, const std::vector<SftExample>& examples) {
  std::vector<Json> rows;
  rows.reserve(examples.size());
  for (const auto& ex : examples) {
    rows.push_back({{"side", std::string(side_name(ex.side))},
                    {"item", ex.side == Side::Query ? format_query_id(ex.item) : format_product_id(ex.item)},
                    {"input", ex.input},
                    {"code", ex.code.str()},
                    {"weight", ex.weight}});
  }
  write_jsonl(path, rows);
}

std::vector<SftExample> read_sft_jsonl(const std::filesystem::path& path, const AttributeLexicon& lexicon) {
  std::vector<SftExample> out;
  for_each_jsonl(path, [&](const Json& j) {
    SftExample ex;
    ex.side = parse_side(j.at("side").get<std::string>());
    const auto item = j.at("item").get<std::string>();
    ex.item = ex.side == Side::Query ? parse_query_id(item) : parse_product_id(item);
    ex.input = j.at("input").get<std::string>();
    ex.code = parse_code(j.at("code").get<std::string>(), lexicon);
    ex.weight = j.value("weight", 1.0);
    out.push_back(std::move(ex));
  });
  return out;
}

template double sft_loss(const ModelParams<float>&, std::span<const SftItem>, std::optional<Side>);
template double sft_loss(const ModelParams<double>&, std::span<const SftItem>, std::optional<Side>);
template double co_training_loss(const ModelParams<float>&, std::span<const SftItem>, double);
template double co_training_loss(const ModelParams<double>&, std::span<const SftItem>, double);

}  // namespace gram
