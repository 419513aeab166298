#pragma once

#include "gram/codec.hpp"
#include "gram/corpus.hpp"
#include "gram/seqmodel.hpp"
#include "gram/training.hpp"

#include <atomic>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

namespace gram {

struct PreferencePair {
  QueryId query = 0;
  ProductId product = 0;
  Code positive;
  Code negative;
  std::uint32_t support = 0;  // k: summed clicks of the pairs sharing the positive
  std::uint32_t repetitions = 1;

  bool operator==(const PreferencePair&) const = default;
};

struct AlignmentConfig {
  double beta_w = 0.1;
  double beta_l = 0.1;
  double margin = 0.5;  // mu
  // Weight of the winning-code likelihood term added while training.
  double nll_weight = 1.0;
  std::size_t top_k = 5;
  std::size_t max_code_l = kMaxCodeAttributes;
  std::size_t negatives_per_positive = 4;
  std::size_t max_pairs = 0;  // 0 keeps every pair
  std::size_t epochs = 1;
  std::size_t batch_size = 32;
  AdamWConfig adamw{};
  double dropout = 0.0;
  double heldout_fraction = 0.05;
  std::uint64_t seed = 1;

  void validate() const;
};

struct AlignmentDatasetStats {
  std::size_t click_pairs = 0;
  std::size_t empty_intersection = 0;
  std::size_t no_negative = 0;
};

// Positives: codes(q) ∩ codes(t); negatives: the symmetric difference.
std::vector<PreferencePair> build_alignment_dataset(const std::vector<ClickEvent>& clicks,
                                                    const CodeTable& query_codes, const CodeTable& product_codes,
                                                    const AlignmentConfig& config,
                                                    AlignmentDatasetStats* stats = nullptr);

// n = max(1, round(sqrt(k) * code_l / max_code_l)).
std::uint32_t repetition_count(std::uint32_t k, std::size_t code_l, std::size_t max_code_l);
std::vector<PreferencePair> resample_positives(std::vector<PreferencePair> pairs, const AlignmentConfig& config);

// Text lookups for the two prompts of a pair.
struct PairContext {
  const Vocabulary* vocab = nullptr;
  std::unordered_map<QueryId, std::string> query_text;
  std::unordered_map<ProductId, std::string> product_text;
};
PairContext make_pair_context(const Vocabulary& vocab, const std::vector<QueryRecord>& queries,
                              const std::vector<ProductRecord>& products);

// log((pi(c|q) + pi(c|t)) / 2), computed from sequence log-probabilities.
double averaged_logprob(double logprob_q, double logprob_t);
double averaged_prob(double logprob_q, double logprob_t);
template <typename Scalar>
double averaged_logprob(const ModelParams<Scalar>& params, const Sequence& by_query, const Sequence& by_product);

// The four teacher-forced sequences of a pair: (q,c_w) (t,c_w) (q,c_l) (t,c_l).
std::array<Sequence, 4> pair_sequences(const PreferencePair& pair, const PairContext& ctx, std::size_t max_len);

struct ReferenceLogprobs {
  double positive = 0.0;  // log pi_SFT(c_w|q,t)
  double negative = 0.0;
};
ReferenceLogprobs reference_logprobs(const Model& reference, const std::array<Sequence, 4>& seqs);

// -mean log sigmoid(beta_w * (log pi(c_w) - ref_w) - beta_l * (log pi(c_l) - ref_l)),
// plus nll_weight * mean (-log pi(c_w|q) - log pi(c_w|t)) / 2 when nll_weight > 0.
Objective ca_objective(const std::vector<std::array<Sequence, 4>>& pairs, const std::vector<ReferenceLogprobs>& refs,
                       const AlignmentConfig& config, double nll_weight = 0.0);
double ca_loss(const Model& theta, const Model& reference, const std::vector<PreferencePair>& batch,
               const PairContext& ctx, const AlignmentConfig& config);

struct AlignResult {
  Model params;
  std::vector<double> heldout_margins;  // after init, then after each epoch
  std::vector<TrainLogRow> log;
};
double mean_pair_margin(const Model& params, const std::vector<std::array<Sequence, 4>>& pairs);
AlignResult train_co_alignment(const Model& reference, const std::vector<PreferencePair>& dataset,
                               const PairContext& ctx, const AlignmentConfig& config);

void write_alignment_jsonl(const std::filesystem::path& path, const std::vector<PreferencePair>& pairs);
std::vector<PreferencePair> read_alignment_jsonl(const std::filesystem::path& path, const AttributeLexicon& lexicon);

// Jensen-Shannon token term. Non-positive inputs are clamped to 1e-12.
double jsd_term(double p, double q);
std::size_t jsd_clamp_count();

using TokenProbProfile = std::vector<double>;

TokenProbProfile token_prob_profile(const Model& params, const Sequence& seq);

class CodeWeights {
 public:
  double get(const std::string& code) const;
  void set(const std::string& code, double w) { weights_[code] = w; }
  const std::unordered_map<std::string, double>& values() const { return weights_; }
  bool operator==(const CodeWeights&) const = default;

 private:
  std::unordered_map<std::string, double> weights_;  // absent codes weigh 1.0
};

void write_code_weights(const std::filesystem::path& path, const CodeWeights& weights);
CodeWeights read_code_weights(const std::filesystem::path& path);

// w * sum_i jsd_term(P^q_i, P^t_i).
double s_rele(const TokenProbProfile& query_side, const TokenProbProfile& product_side, double weight);

struct MatchedCode {
  std::string code;
  TokenProbProfile query_side;
  TokenProbProfile product_side;
};
double aggregate_relevance(const std::vector<MatchedCode>& matched, const CodeWeights& weights);

// Unweighted per-code divergences of one (query, product) candidate.
struct CandidateTerms {
  std::vector<std::string> codes;
  std::vector<double> divergence;
};

struct WeightTriple {
  QueryId query = 0;
  CandidateTerms positive;
  CandidateTerms negative;
};

double triple_score(const CandidateTerms& terms, const CodeWeights& weights);
// max(0, S(neg) - S(pos) + mu); `grad` receives d loss / d w per code.
double weight_pairwise_loss(const WeightTriple& triple, const CodeWeights& weights, double margin,
                            std::unordered_map<std::string, double>* grad = nullptr);

struct WeightTrainingConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  double lr = 0.05;
  double margin = 0.5;
  std::uint64_t seed = 1;
};

struct WeightTrainingResult {
  CodeWeights weights;
  std::vector<double> epoch_loss;
};

// Trains only the code weights; the model is not an input.
WeightTrainingResult train_code_weights(const std::vector<WeightTriple>& triples, CodeWeights init,
                                        const WeightTrainingConfig& config);

double pairwise_accuracy(const std::vector<WeightTriple>& triples, const CodeWeights& weights);

}  // namespace gram
