#include "gram/gradcheck.hpp"

#include "gram/alignment.hpp"
#include "gram/training.hpp"

#include <algorithm>
#include <cmath>

namespace gram {

namespace {

constexpr int kVocab = 24;

TokenSeq random_tokens(Rng& rng, std::size_t n, bool eos) {
  TokenSeq t;
  for (std::size_t i = 0; i < n; ++i) {
    t.push_back(static_cast<TokenId>(Vocabulary::kNumReserved + uniform_index(rng, kVocab - Vocabulary::kNumReserved)));
  }
  if (eos) {
    t.push_back(Vocabulary::kEos);
  }
  return t;
}

Sequence random_sequence(Rng& rng) {
  TokenSeq prompt{Vocabulary::kBos};
  const auto body = random_tokens(rng, 2 + uniform_index(rng, 4), false);
  prompt.insert(prompt.end(), body.begin(), body.end());
  prompt.push_back(Vocabulary::kSep);
  return {prompt, random_tokens(rng, 1 + uniform_index(rng, 3), true)};
}

GradCheckResult summarize(std::string name, const GradCheckReport& r, double tol) {
  GradCheckResult out;
  out.objective = std::move(name);
  out.probes = r.probes.size();
  out.max_rel_error = r.max_rel_error;
  out.tolerance = tol;
  out.passed = !r.probes.empty() && r.max_rel_error <= tol;
  return out;
}

}  // namespace

std::vector<GradCheckResult> run_gradient_suite(std::uint64_t seed, std::size_t probes) {
  ModelConfig mc;
  mc.vocab_size = kVocab;
  mc.max_len = 16;
  mc.width = 16;
  mc.layers = 2;
  mc.heads = 2;
  mc.ffn_width = 32;
  mc.init_std = 0.3;
  const auto params = Model::random(mc, mix_seed(seed, 1));
  Rng rng = make_rng(seed, 2);
  const double eps = 1e-4;
  const double tol = 1e-4;

  std::vector<SftItem> items;
  for (std::uint32_t i = 0; i < 6; ++i) {
    const Side side = i % 2 == 0 ? Side::Query : Side::Product;
    items.push_back({side, i, random_sequence(rng), 0.5 + uniform01(rng)});
  }
  std::vector<SftItem> q_items;
  std::vector<SftItem> t_items;
  for (const auto& it : items) {
    (it.side == Side::Query ? q_items : t_items).push_back(it);
  }

  std::vector<GradCheckResult> out;
  out.push_back(summarize("query-sft",
                          check_model_gradient(params, sft_objective(q_items, 1.0), probes, eps, mix_seed(seed, 3)),
                          tol));
  out.push_back(summarize("product-sft",
                          check_model_gradient(params, sft_objective(t_items, 1.0), probes, eps, mix_seed(seed, 4)),
                          tol));
  out.push_back(summarize("co-training",
                          check_model_gradient(params, sft_objective(items, 0.7), probes, eps, mix_seed(seed, 5)),
                          tol));

  const auto reference = Model::random(mc, mix_seed(seed, 6));
  std::vector<std::array<Sequence, 4>> pairs;
  std::vector<ReferenceLogprobs> refs;
  for (int i = 0; i < 4; ++i) {
    const auto q = random_sequence(rng);
    const auto t = random_sequence(rng);
    const auto cw = random_tokens(rng, 2, true);
    const auto cl = random_tokens(rng, 3, true);
    pairs.push_back({Sequence{q.prompt, cw}, Sequence{t.prompt, cw}, Sequence{q.prompt, cl}, Sequence{t.prompt, cl}});
    refs.push_back(reference_logprobs(reference, pairs.back()));
  }
  AlignmentConfig ac;
  ac.beta_w = 0.8;
  ac.beta_l = 0.6;
  out.push_back(summarize("co-alignment",
                          check_model_gradient(params, ca_objective(pairs, refs, ac), probes, eps, mix_seed(seed, 7)),
                          tol));
  out.push_back(summarize("co-alignment+nll",
                          check_model_gradient(params, ca_objective(pairs, refs, ac, 0.7), probes, eps,
                                               mix_seed(seed, 9)),
                          tol));

  // Pairwise hinge over code weights: mean loss over triples as a function
  // of the weight vector.
  const std::size_t n_codes = std::max<std::size_t>(probes, 24);
  std::vector<std::string> names;
  for (std::size_t i = 0; i < n_codes; ++i) {
    names.push_back("code" + std::to_string(i));
  }
  std::vector<WeightTriple> triples;
  for (int i = 0; i < 40; ++i) {
    WeightTriple tr;
    for (auto* side : {&tr.positive, &tr.negative}) {
      const std::size_t m = 1 + uniform_index(rng, 4);
      for (std::size_t j = 0; j < m; ++j) {
        side->codes.push_back(names[uniform_index(rng, n_codes)]);
        side->divergence.push_back(uniform01(rng));
      }
    }
    triples.push_back(std::move(tr));
  }
  const double margin = 0.5;
  Vec<double> w(static_cast<Index>(n_codes));
  for (std::size_t i = 0; i < n_codes; ++i) {
    w(static_cast<Index>(i)) = 0.5 + uniform01(rng);
  }
  auto to_weights = [&](const Vec<double>& x) {
    CodeWeights cw;
    for (std::size_t i = 0; i < n_codes; ++i) {
      cw.set(names[i], x(static_cast<Index>(i)));
    }
    return cw;
  };
  auto hinge = [&](const Vec<double>& x) {
    const auto cw = to_weights(x);
    double s = 0.0;
    for (const auto& t : triples) {
      s += weight_pairwise_loss(t, cw, margin);
    }
    return s / static_cast<double>(triples.size());
  };
  Vec<double> analytic = Vec<double>::Zero(static_cast<Index>(n_codes));
  {
    const auto cw = to_weights(w);
    for (const auto& t : triples) {
      std::unordered_map<std::string, double> g;
      weight_pairwise_loss(t, cw, margin, &g);
      for (const auto& [code, v] : g) {
        const auto idx = std::find(names.begin(), names.end(), code) - names.begin();
        analytic(idx) += v / static_cast<double>(triples.size());
      }
    }
  }
  out.push_back(summarize("code-weight-hinge",
                          finite_difference_check(w, hinge, analytic, std::min(probes, n_codes), 1e-6,
                                                  mix_seed(seed, 8), 1e-9),
                          1e-6));
  return out;
}

}  // namespace gram
