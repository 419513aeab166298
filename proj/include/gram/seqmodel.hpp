#pragma once

#include "gram/common.hpp"

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace gram {

// Decoder-only causal transformer over [prompt tokens, target tokens]. The
// prediction for target[i] is read at the position of the token before it.
struct ModelConfig {
  int vocab_size = 0;
  int max_len = 40;  // prompt + target tokens
  int width = 64;
  int layers = 2;
  int heads = 4;
  int ffn_width = 256;
  double init_std = 0.02;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct TensorSlot {
  std::string name;
  Index rows = 0;
  Index cols = 0;
  Index offset = 0;
  Index size() const { return rows * cols; }
};

struct BlockSlots {
  int norm1, wq, wk, wv, wo, norm2, w1, b1, w2, b2;
};

class ParamLayout {
 public:
  explicit ParamLayout(const ModelConfig& cfg);

  const std::vector<TensorSlot>& slots() const { return slots_; }
  const TensorSlot& slot(int id) const { return slots_[static_cast<std::size_t>(id)]; }
  Index size() const { return size_; }

  int tok_emb = 0;
  int pos_emb = 0;
  int final_norm = 0;
  int w_out = 0;
  int b_out = 0;
  std::vector<BlockSlots> blocks;

 private:
  int add(std::string name, Index rows, Index cols);
  std::vector<TensorSlot> slots_;
  Index size_ = 0;
};

template <typename Scalar>
Eigen::Map<Mat<Scalar>> tensor_view(Vec<Scalar>& flat, const TensorSlot& s) {
  return {flat.data() + s.offset, s.rows, s.cols};
}
template <typename Scalar>
Eigen::Map<const Mat<Scalar>> tensor_view(const Vec<Scalar>& flat, const TensorSlot& s) {
  return {flat.data() + s.offset, s.rows, s.cols};
}

// All model parameters in one flat vector; tensors are column-major views.
template <typename Scalar>
class ModelParams {
 public:
  ModelParams() = default;
  explicit ModelParams(const ModelConfig& cfg);  // zeros, unit norm gains

  static ModelParams random(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const ParamLayout& layout() const { return *layout_; }
  Vec<Scalar>& values() { return values_; }
  const Vec<Scalar>& values() const { return values_; }
  Index size() const { return values_.size(); }

  Eigen::Map<Mat<Scalar>> tensor(int slot) { return tensor_view(values_, layout_->slot(slot)); }
  Eigen::Map<const Mat<Scalar>> tensor(int slot) const { return tensor_view(values_, layout_->slot(slot)); }

  template <typename Other>
  ModelParams<Other> cast() const {
    ModelParams<Other> out(config_);
    out.values() = values_.template cast<Other>();
    return out;
  }

  bool operator==(const ModelParams& o) const {
    return config_ == o.config_ && values_.size() == o.values_.size() && values_ == o.values_;
  }

 private:
  ModelConfig config_;
  std::shared_ptr<const ParamLayout> layout_;
  Vec<Scalar> values_;
};

struct Sequence {
  TokenSeq prompt;
  TokenSeq target;
};

void validate_sequence(const ModelConfig& cfg, std::span<const TokenId> prompt, std::span<const TokenId> target);

// log Pr(target[i] | prompt, target[<i]) for each i, teacher-forced.
template <typename Scalar>
std::vector<double> token_logprobs(const ModelParams<Scalar>& params, std::span<const TokenId> prompt,
                                   std::span<const TokenId> target);

template <typename Scalar>
double sequence_logprob(const ModelParams<Scalar>& params, std::span<const TokenId> prompt,
                        std::span<const TokenId> target);

// Full next-token log distribution at every target position (rows).
template <typename Scalar>
Mat<double> next_token_logprobs(const ModelParams<Scalar>& params, std::span<const TokenId> prompt,
                                std::span<const TokenId> target);

// A differentiable objective over model log-probabilities. Sequences are
// grouped; the group loss maps the group's per-token log-probabilities to a
// scalar and writes d loss / d logprob into `d_logprobs` (same shapes).
struct Objective {
  using GroupLoss = std::function<double(std::size_t group, std::span<const std::vector<double>> logprobs,
                                         std::span<std::vector<double>> d_logprobs)>;
  std::vector<std::vector<Sequence>> groups;
  GroupLoss loss;
};

struct DropoutSpec {
  double rate = 0.0;
  std::uint64_t seed = 0;
};

struct TrainingError : Error {
  TrainingError(const std::string& what, std::size_t batch_id) : Error(what), batch(batch_id) {}
  std::size_t batch;
};

template <typename Scalar>
struct LossGrad {
  double loss = 0.0;
  Vec<Scalar> grad;
};

// Loss and reverse-mode gradient. Throws TrainingError on a non-finite loss.
template <typename Scalar>
LossGrad<Scalar> loss_grad(const ModelParams<Scalar>& params, const Objective& objective,
                           const DropoutSpec& dropout = {}, std::size_t batch_id = 0);

// Loss only (no dropout).
template <typename Scalar>
double evaluate_loss(const ModelParams<Scalar>& params, const Objective& objective);

struct AdamWConfig {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

template <typename Scalar>
struct AdamWState {
  Vec<Scalar> m;
  Vec<Scalar> v;
  long step = 0;
};

// Decoupled weight decay: p <- p(1 - lr*wd) - lr * mhat / (sqrt(vhat) + eps).
template <typename Scalar>
void adamw_step(Vec<Scalar>& params, const Vec<Scalar>& grad, AdamWState<Scalar>& state, const AdamWConfig& cfg);

// Incremental (key/value cached) decoding state for generation.
template <typename Scalar>
class DecoderState {
 public:
  explicit DecoderState(const ModelParams<Scalar>& params);

  void append(TokenId token);
  const Vec<double>& next_logprobs() const { return next_; }
  Index length() const { return length_; }

 private:
  const ModelParams<Scalar>* params_;
  std::vector<Mat<Scalar>> keys_;
  std::vector<Mat<Scalar>> values_;
  Index length_ = 0;
  Vec<double> next_;
};

// Prefix trie over allowed target token sequences (each ending in EOS).
class TokenTrie {
 public:
  TokenTrie();
  void insert(std::span<const TokenId> seq);
  // Node reached from `node` by `token`, or -1.
  int child(int node, TokenId token) const;
  const std::map<TokenId, int>& children(int node) const { return nodes_[static_cast<std::size_t>(node)]; }
  std::size_t sequences() const { return n_sequences_; }

 private:
  std::vector<std::map<TokenId, int>> nodes_;
  std::size_t n_sequences_ = 0;
};

struct GenerationConfig {
  std::size_t beam_size = 10;
  std::size_t max_code_tokens = 12;  // includes EOS
  std::size_t n_return = 10;
  bool length_normalize = false;
  bool constrained = false;

  void validate() const;
};

struct DecodeConstraints {
  TokenId eos = 0;
  std::vector<TokenId> banned;        // never generated
  const TokenTrie* trie = nullptr;    // used when GenerationConfig::constrained
};

struct Hypothesis {
  TokenSeq tokens;  // EOS-terminated
  std::vector<double> token_logprobs;
  double logprob = 0.0;
  double score = 0.0;  // logprob, or logprob / length when normalized
};

struct BeamResult {
  std::vector<Hypothesis> hypotheses;  // sorted by score, descending
  bool incomplete = false;             // fewer than n_return finished
};

template <typename Scalar>
BeamResult beam_search(const ModelParams<Scalar>& params, std::span<const TokenId> prompt,
                       const GenerationConfig& config, const DecodeConstraints& constraints);

// Versioned binary checkpoint with shape metadata.
template <typename Scalar>
std::string checkpoint_bytes(const ModelParams<Scalar>& params);
template <typename Scalar>
ModelParams<Scalar> checkpoint_from_bytes(const std::string& bytes);
template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, const ModelParams<Scalar>& params);
template <typename Scalar>
ModelParams<Scalar> load_checkpoint(const std::filesystem::path& path);

struct GradProbe {
  Index coordinate = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradProbe> probes;
  double max_rel_error = 0.0;
  double max_abs_error_inactive = 0.0;  // coordinates with zero analytic gradient
};

// Central finite differences at `n_probes` random coordinates whose analytic
// gradient magnitude is at least `min_magnitude`.
GradCheckReport finite_difference_check(const Vec<double>& x, const std::function<double(const Vec<double>&)>& f,
                                        const Vec<double>& analytic, std::size_t n_probes, double eps,
                                        std::uint64_t seed, double min_magnitude = 1e-6);

GradCheckReport check_model_gradient(const ModelParams<double>& params, const Objective& objective,
                                     std::size_t n_probes, double eps, std::uint64_t seed);

#define GRAM_EXTERN_SEQMODEL(Scalar)                                                                       \
  extern template class ModelParams<Scalar>;                                                             \
  extern template std::vector<double> token_logprobs(const ModelParams<Scalar>&, std::span<const TokenId>, \
                                                     std::span<const TokenId>);                          \
  extern template double sequence_logprob(const ModelParams<Scalar>&, std::span<const TokenId>,          \
                                          std::span<const TokenId>);                                     \
  extern template Mat<double> next_token_logprobs(const ModelParams<Scalar>&, std::span<const TokenId>,  \
                                                  std::span<const TokenId>);                             \
  extern template LossGrad<Scalar> loss_grad(const ModelParams<Scalar>&, const Objective&,               \
                                             const DropoutSpec&, std::size_t);                           \
  extern template double evaluate_loss(const ModelParams<Scalar>&, const Objective&);                    \
  extern template void adamw_step(Vec<Scalar>&, const Vec<Scalar>&, AdamWState<Scalar>&,                 \
                                  const AdamWConfig&);                                                   \
  extern template class DecoderState<Scalar>;                                                            \
  extern template BeamResult beam_search(const ModelParams<Scalar>&, std::span<const TokenId>,           \
                                         const GenerationConfig&, const DecodeConstraints&);             \
  extern template std::string checkpoint_bytes(const ModelParams<Scalar>&);                              \
  extern template ModelParams<Scalar> checkpoint_from_bytes(const std::string&);                         \
  extern template void save_checkpoint(const std::filesystem::path&, const ModelParams<Scalar>&);        \
  extern template ModelParams<Scalar> load_checkpoint(const std::filesystem::path&);

GRAM_EXTERN_SEQMODEL(float)
GRAM_EXTERN_SEQMODEL(double)
#undef GRAM_EXTERN_SEQMODEL

using Model = ModelParams<double>;

}  // namespace gram
