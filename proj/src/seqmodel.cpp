#include "gram/seqmodel.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace gram {

namespace {

constexpr double kNormEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

template <typename Scalar>
Scalar gelu(Scalar u) {
  const Scalar t = std::tanh(Scalar(kGeluC) * (u + Scalar(kGeluA) * u * u * u));
  return Scalar(0.5) * u * (Scalar(1) + t);
}

template <typename Scalar>
Scalar gelu_grad(Scalar u) {
  const Scalar inner = Scalar(kGeluC) * (u + Scalar(kGeluA) * u * u * u);
  const Scalar t = std::tanh(inner);
  return Scalar(0.5) * (Scalar(1) + t) +
         Scalar(0.5) * u * (Scalar(1) - t * t) * Scalar(kGeluC) * (Scalar(1) + Scalar(3 * kGeluA) * u * u);
}

// y = (x / rms(x)) * gain, row-wise. Returns y and writes 1/rms per row.
template <typename Scalar, typename Derived>
Mat<Scalar> rms_norm(const Eigen::MatrixBase<Derived>& x, const Eigen::Ref<const Mat<Scalar>>& gain,
                     Vec<Scalar>& inv_rms) {
  const Scalar d = static_cast<Scalar>(x.cols());
  inv_rms = ((x.rowwise().squaredNorm().array() / d) + Scalar(kNormEps)).rsqrt().matrix();
  return inv_rms.asDiagonal() * x * gain.col(0).asDiagonal();
}

template <typename Scalar>
Mat<Scalar> rms_norm_backward(const Mat<Scalar>& dy, const Mat<Scalar>& x, const Vec<Scalar>& inv_rms,
                              const Eigen::Ref<const Mat<Scalar>>& gain, Eigen::Map<Mat<Scalar>> dgain) {
  const Scalar d = static_cast<Scalar>(x.cols());
  const Mat<Scalar> xhat = inv_rms.asDiagonal() * x;
  dgain.col(0) += (xhat.array() * dy.array()).colwise().sum().transpose().matrix();
  const Mat<Scalar> dxhat = dy * gain.col(0).asDiagonal();
  const Vec<Scalar> dots = (dxhat.array() * xhat.array()).rowwise().sum().matrix() / d;
  return inv_rms.asDiagonal() * (dxhat - dots.asDiagonal() * xhat);
}

template <typename Scalar>
void log_softmax_rows(Mat<Scalar>& logits) {
  for (Index r = 0; r < logits.rows(); ++r) {
    const Scalar mx = logits.row(r).maxCoeff();
    const Scalar lse = mx + std::log((logits.row(r).array() - mx).exp().sum());
    logits.row(r).array() -= lse;
  }
}

template <typename Scalar>
Mat<Scalar> dropout_mask(Index rows, Index cols, double rate, Rng& rng) {
  Mat<Scalar> m(rows, cols);
  const Scalar keep = Scalar(1.0 / (1.0 - rate));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (Index j = 0; j < cols; ++j) {
    for (Index i = 0; i < rows; ++i) {
      m(i, j) = u(rng) < rate ? Scalar(0) : keep;
    }
  }
  return m;
}

template <typename Scalar>
struct BlockCache {
  Mat<Scalar> x_in, a, q, k, v, o, x_mid, b, u, g;
  Vec<Scalar> inv_rms1, inv_rms2;
  std::vector<Mat<Scalar>> probs;
  Mat<Scalar> drop_attn, drop_ffn;
};

template <typename Scalar>
struct SequenceCache {
  TokenSeq inputs;
  TokenSeq targets;
  Index first_out = 0;  // row predicting targets[0]
  std::vector<BlockCache<Scalar>> blocks;
  Mat<Scalar> x_final_sel;  // pre-norm rows at output positions
  Vec<Scalar> inv_rms_f;
  Mat<Scalar> z_sel;
  Mat<Scalar> logp;  // M x V
  std::vector<double> token_lp;
};

template <typename Scalar>
class Transformer {
 public:
  explicit Transformer(const ModelParams<Scalar>& p) : p_(p), cfg_(p.config()), lay_(p.layout()) {}

  SequenceCache<Scalar> forward(std::span<const TokenId> prompt, std::span<const TokenId> target,
                                const DropoutSpec* dropout, Rng* rng) const {
    validate_sequence(cfg_, prompt, target);
    SequenceCache<Scalar> c;
    c.inputs.assign(prompt.begin(), prompt.end());
    c.inputs.insert(c.inputs.end(), target.begin(), target.end() - 1);
    c.targets.assign(target.begin(), target.end());
    c.first_out = static_cast<Index>(prompt.size()) - 1;
    const Index T = static_cast<Index>(c.inputs.size());
    const Index d = cfg_.width;
    const bool drop = dropout != nullptr && dropout->rate > 0.0;

    const auto tok = p_.tensor(lay_.tok_emb);
    const auto pos = p_.tensor(lay_.pos_emb);
    Mat<Scalar> x(T, d);
    for (Index t = 0; t < T; ++t) {
      x.row(t) = tok.row(c.inputs[static_cast<std::size_t>(t)]) + pos.row(t);
    }

    const Index H = cfg_.heads;
    const Index dh = d / H;
    const Scalar scale = Scalar(1.0 / std::sqrt(static_cast<double>(dh)));
    c.blocks.resize(lay_.blocks.size());
    for (std::size_t l = 0; l < lay_.blocks.size(); ++l) {
      const auto& s = lay_.blocks[l];
      auto& bc = c.blocks[l];
      bc.x_in = x;
      bc.a = rms_norm<Scalar>(x, p_.tensor(s.norm1), bc.inv_rms1);
      bc.q = bc.a * p_.tensor(s.wq);
      bc.k = bc.a * p_.tensor(s.wk);
      bc.v = bc.a * p_.tensor(s.wv);
      bc.o.resize(T, d);
      bc.probs.resize(static_cast<std::size_t>(H));
      for (Index h = 0; h < H; ++h) {
        Mat<Scalar> S = bc.q.middleCols(h * dh, dh) * bc.k.middleCols(h * dh, dh).transpose() * scale;
        Mat<Scalar> P = Mat<Scalar>::Zero(T, T);
        for (Index i = 0; i < T; ++i) {
          const Scalar mx = S.row(i).head(i + 1).maxCoeff();
          P.row(i).head(i + 1) = (S.row(i).head(i + 1).array() - mx).exp().matrix();
          P.row(i).head(i + 1) /= P.row(i).head(i + 1).sum();
        }
        bc.o.middleCols(h * dh, dh) = P * bc.v.middleCols(h * dh, dh);
        bc.probs[static_cast<std::size_t>(h)] = std::move(P);
      }
      Mat<Scalar> attn = bc.o * p_.tensor(s.wo);
      if (drop) {
        bc.drop_attn = dropout_mask<Scalar>(T, d, dropout->rate, *rng);
        attn.array() *= bc.drop_attn.array();
      }
      bc.x_mid = x + attn;
      bc.b = rms_norm<Scalar>(bc.x_mid, p_.tensor(s.norm2), bc.inv_rms2);
      bc.u = (bc.b * p_.tensor(s.w1)).rowwise() + p_.tensor(s.b1).col(0).transpose();
      bc.g = bc.u.unaryExpr([](Scalar v) { return gelu(v); });
      Mat<Scalar> f = (bc.g * p_.tensor(s.w2)).rowwise() + p_.tensor(s.b2).col(0).transpose();
      if (drop) {
        bc.drop_ffn = dropout_mask<Scalar>(T, d, dropout->rate, *rng);
        f.array() *= bc.drop_ffn.array();
      }
      x = bc.x_mid + f;
    }

    const Index M = static_cast<Index>(target.size());
    c.x_final_sel = x.middleRows(c.first_out, M);
    c.z_sel = rms_norm<Scalar>(c.x_final_sel, p_.tensor(lay_.final_norm), c.inv_rms_f);
    c.logp = (c.z_sel * p_.tensor(lay_.w_out)).rowwise() + p_.tensor(lay_.b_out).col(0).transpose();
    log_softmax_rows(c.logp);
    c.token_lp.resize(static_cast<std::size_t>(M));
    for (Index r = 0; r < M; ++r) {
      c.token_lp[static_cast<std::size_t>(r)] = static_cast<double>(c.logp(r, c.targets[static_cast<std::size_t>(r)]));
    }
    return c;
  }

  // Accumulates d(sum_i upstream[i] * token_lp[i]) / d params into grad.
  void backward(const SequenceCache<Scalar>& c, std::span<const double> upstream, Vec<Scalar>& grad) const {
    const Index M = c.logp.rows();
    const Index T = static_cast<Index>(c.inputs.size());
    const Index d = cfg_.width;
    const Index H = cfg_.heads;
    const Index dh = d / H;
    const Scalar scale = Scalar(1.0 / std::sqrt(static_cast<double>(dh)));
    auto G = [&](int slot) { return tensor_view(grad, lay_.slot(slot)); };

    Mat<Scalar> dlogits = -c.logp.array().exp().matrix();
    for (Index r = 0; r < M; ++r) {
      dlogits(r, c.targets[static_cast<std::size_t>(r)]) += Scalar(1);
      dlogits.row(r) *= static_cast<Scalar>(upstream[static_cast<std::size_t>(r)]);
    }
    G(lay_.w_out).noalias() += c.z_sel.transpose() * dlogits;
    G(lay_.b_out).col(0) += dlogits.colwise().sum().transpose();
    const Mat<Scalar> dz = dlogits * p_.tensor(lay_.w_out).transpose();

    Mat<Scalar> dx = Mat<Scalar>::Zero(T, d);
    dx.middleRows(c.first_out, M) =
        rms_norm_backward<Scalar>(dz, c.x_final_sel, c.inv_rms_f, p_.tensor(lay_.final_norm), G(lay_.final_norm));

    for (std::size_t li = lay_.blocks.size(); li-- > 0;) {
      const auto& s = lay_.blocks[li];
      const auto& bc = c.blocks[li];

      // Feed-forward branch.
      Mat<Scalar> df = dx;
      if (bc.drop_ffn.size() > 0) {
        df.array() *= bc.drop_ffn.array();
      }
      G(s.w2).noalias() += bc.g.transpose() * df;
      G(s.b2).col(0) += df.colwise().sum().transpose();
      Mat<Scalar> du = (df * p_.tensor(s.w2).transpose()).array() *
                       bc.u.unaryExpr([](Scalar v) { return gelu_grad(v); }).array();
      G(s.w1).noalias() += bc.b.transpose() * du;
      G(s.b1).col(0) += du.colwise().sum().transpose();
      const Mat<Scalar> db = du * p_.tensor(s.w1).transpose();
      Mat<Scalar> dx_mid = dx + rms_norm_backward<Scalar>(db, bc.x_mid, bc.inv_rms2, p_.tensor(s.norm2), G(s.norm2));

      // Attention branch.
      Mat<Scalar> dattn = dx_mid;
      if (bc.drop_attn.size() > 0) {
        dattn.array() *= bc.drop_attn.array();
      }
      G(s.wo).noalias() += bc.o.transpose() * dattn;
      const Mat<Scalar> d_o = dattn * p_.tensor(s.wo).transpose();
      Mat<Scalar> dq(T, d), dk(T, d), dv(T, d);
      for (Index h = 0; h < H; ++h) {
        const auto& P = bc.probs[static_cast<std::size_t>(h)];
        const auto dOh = d_o.middleCols(h * dh, dh);
        const Mat<Scalar> dP = dOh * bc.v.middleCols(h * dh, dh).transpose();
        dv.middleCols(h * dh, dh).noalias() = P.transpose() * dOh;
        const Vec<Scalar> rowdot = (dP.array() * P.array()).rowwise().sum().matrix();
        const Mat<Scalar> dS = (P.array() * (dP.colwise() - rowdot).array()).matrix() * scale;
        dq.middleCols(h * dh, dh).noalias() = dS * bc.k.middleCols(h * dh, dh);
        dk.middleCols(h * dh, dh).noalias() = dS.transpose() * bc.q.middleCols(h * dh, dh);
      }
      G(s.wq).noalias() += bc.a.transpose() * dq;
      G(s.wk).noalias() += bc.a.transpose() * dk;
      G(s.wv).noalias() += bc.a.transpose() * dv;
      const Mat<Scalar> da = dq * p_.tensor(s.wq).transpose() + dk * p_.tensor(s.wk).transpose() +
                             dv * p_.tensor(s.wv).transpose();
      dx = dx_mid + rms_norm_backward<Scalar>(da, bc.x_in, bc.inv_rms1, p_.tensor(s.norm1), G(s.norm1));
    }

    auto dtok = G(lay_.tok_emb);
    auto dpos = G(lay_.pos_emb);
    for (Index t = 0; t < T; ++t) {
      dtok.row(c.inputs[static_cast<std::size_t>(t)]) += dx.row(t);
      dpos.row(t) += dx.row(t);
    }
  }

 private:
  const ModelParams<Scalar>& p_;
  const ModelConfig& cfg_;
  const ParamLayout& lay_;
};

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) {
    throw DataError("truncated checkpoint");
  }
  return v;
}

constexpr char kCheckpointMagic[8] = {'G', 'R', 'A', 'M', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace

void ModelConfig::validate() const {
  if (vocab_size <= 0 || max_len <= 1 || width <= 0 || layers <= 0 || heads <= 0 || ffn_width <= 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (width % heads != 0) {
    throw ConfigError("width must be divisible by heads");
  }
  if (!(init_std > 0.0)) {
    throw ConfigError("init_std must be positive");
  }
}

ParamLayout::ParamLayout(const ModelConfig& cfg) {
  cfg.validate();
  const Index d = cfg.width;
  tok_emb = add("tok_emb", cfg.vocab_size, d);
  pos_emb = add("pos_emb", cfg.max_len, d);
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = "block" + std::to_string(l) + ".";
    BlockSlots b{};
    b.norm1 = add(p + "norm1", d, 1);
    b.wq = add(p + "wq", d, d);
    b.wk = add(p + "wk", d, d);
    b.wv = add(p + "wv", d, d);
    b.wo = add(p + "wo", d, d);
    b.norm2 = add(p + "norm2", d, 1);
    b.w1 = add(p + "w1", d, cfg.ffn_width);
    b.b1 = add(p + "b1", cfg.ffn_width, 1);
    b.w2 = add(p + "w2", cfg.ffn_width, d);
    b.b2 = add(p + "b2", d, 1);
    blocks.push_back(b);
  }
  final_norm = add("final_norm", d, 1);
  w_out = add("w_out", d, cfg.vocab_size);
  b_out = add("b_out", cfg.vocab_size, 1);
}

int ParamLayout::add(std::string name, Index rows, Index cols) {
  slots_.push_back({std::move(name), rows, cols, size_});
  size_ += rows * cols;
  return static_cast<int>(slots_.size() - 1);
}

template <typename Scalar>
ModelParams<Scalar>::ModelParams(const ModelConfig& cfg)
    : config_(cfg), layout_(std::make_shared<const ParamLayout>(cfg)), values_(Vec<Scalar>::Zero(layout_->size())) {
  auto set_ones = [&](int slot) { tensor(slot).setOnes(); };
  for (const auto& b : layout_->blocks) {
    set_ones(b.norm1);
    set_ones(b.norm2);
  }
  set_ones(layout_->final_norm);
}

template <typename Scalar>
ModelParams<Scalar> ModelParams<Scalar>::random(const ModelConfig& cfg, std::uint64_t seed) {
  ModelParams p(cfg);
  Rng rng = make_rng(seed, 0x5eed);
  std::normal_distribution<double> normal(0.0, cfg.init_std);
  const double resid_scale = 1.0 / std::sqrt(2.0 * cfg.layers);
  auto fill = [&](int slot, double scale) {
    auto t = p.tensor(slot);
    for (Index j = 0; j < t.cols(); ++j) {
      for (Index i = 0; i < t.rows(); ++i) {
        t(i, j) = static_cast<Scalar>(normal(rng) * scale);
      }
    }
  };
  const auto& lay = p.layout();
  fill(lay.tok_emb, 1.0);
  fill(lay.pos_emb, 1.0);
  for (const auto& b : lay.blocks) {
    fill(b.wq, 1.0);
    fill(b.wk, 1.0);
    fill(b.wv, 1.0);
    fill(b.wo, resid_scale);
    fill(b.w1, 1.0);
    fill(b.w2, resid_scale);
  }
  fill(lay.w_out, 1.0);
  return p;
}

void validate_sequence(const ModelConfig& cfg, std::span<const TokenId> prompt, std::span<const TokenId> target) {
  if (prompt.empty() || target.empty()) {
    throw DataError("prompt and target must be nonempty");
  }
  if (static_cast<int>(prompt.size() + target.size()) > cfg.max_len) {
    throw DataError("sequence of " + std::to_string(prompt.size() + target.size()) + " tokens exceeds max_len " +
                    std::to_string(cfg.max_len));
  }
  for (auto span : {prompt, target}) {
    for (TokenId t : span) {
      if (t < 0 || t >= cfg.vocab_size) {
        throw DataError("token id " + std::to_string(t) + " out of vocabulary");
      }
    }
  }
}

template <typename Scalar>
std::vector<double> token_logprobs(const ModelParams<Scalar>& params, std::span<const TokenId> prompt,
                                   std::span<const TokenId> target) {
  return Transformer<Scalar>(params).forward(prompt, target, nullptr, nullptr).token_lp;
}

template <typename Scalar>
double sequence_logprob(const ModelParams<Scalar>& params, std::span<const TokenId> prompt,
                        std::span<const TokenId> target) {
  const auto lp = token_logprobs(params, prompt, target);
  return std::accumulate(lp.begin(), lp.end(), 0.0);
}

template <typename Scalar>
Mat<double> next_token_logprobs(const ModelParams<Scalar>& params, std::span<const TokenId> prompt,
                                std::span<const TokenId> target) {
  return Transformer<Scalar>(params).forward(prompt, target, nullptr, nullptr).logp.template cast<double>();
}

template <typename Scalar>
LossGrad<Scalar> loss_grad(const ModelParams<Scalar>& params, const Objective& objective, const DropoutSpec& dropout,
                           std::size_t batch_id) {
  Transformer<Scalar> net(params);
  LossGrad<Scalar> out;
  out.grad = Vec<Scalar>::Zero(params.size());
  for (std::size_t gi = 0; gi < objective.groups.size(); ++gi) {
    const auto& group = objective.groups[gi];
    std::vector<SequenceCache<Scalar>> caches;
    caches.reserve(group.size());
    std::vector<std::vector<double>> lps;
    std::vector<std::vector<double>> dlps;
    for (std::size_t si = 0; si < group.size(); ++si) {
      Rng rng = make_rng(dropout.seed, (static_cast<std::uint64_t>(gi) << 8) + si);
      caches.push_back(net.forward(group[si].prompt, group[si].target, &dropout, &rng));
      lps.push_back(caches.back().token_lp);
      dlps.emplace_back(lps.back().size(), 0.0);
    }
    const double l = objective.loss(gi, lps, dlps);
    if (!std::isfinite(l)) {
      throw TrainingError("non-finite loss in batch " + std::to_string(batch_id), batch_id);
    }
    out.loss += l;
    for (std::size_t si = 0; si < group.size(); ++si) {
      const bool active = std::any_of(dlps[si].begin(), dlps[si].end(), [](double v) { return v != 0.0; });
      if (active) {
        net.backward(caches[si], dlps[si], out.grad);
      }
    }
  }
  return out;
}

template <typename Scalar>
double evaluate_loss(const ModelParams<Scalar>& params, const Objective& objective) {
  Transformer<Scalar> net(params);
  double total = 0.0;
  for (std::size_t gi = 0; gi < objective.groups.size(); ++gi) {
    const auto& group = objective.groups[gi];
    std::vector<std::vector<double>> lps;
    std::vector<std::vector<double>> dlps;
    for (const auto& s : group) {
      lps.push_back(net.forward(s.prompt, s.target, nullptr, nullptr).token_lp);
      dlps.emplace_back(lps.back().size(), 0.0);
    }
    total += objective.loss(gi, lps, dlps);
  }
  return total;
}

template <typename Scalar>
void adamw_step(Vec<Scalar>& params, const Vec<Scalar>& grad, AdamWState<Scalar>& state, const AdamWConfig& cfg) {
  if (grad.size() != params.size()) {
    throw DataError("gradient shape " + std::to_string(grad.size()) + " does not match parameters " +
                    std::to_string(params.size()));
  }
  if (state.m.size() == 0) {
    state.m = Vec<Scalar>::Zero(params.size());
    state.v = Vec<Scalar>::Zero(params.size());
  }
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw DataError("optimizer state shape does not match parameters");
  }
  ++state.step;
  const Scalar b1 = static_cast<Scalar>(cfg.beta1);
  const Scalar b2 = static_cast<Scalar>(cfg.beta2);
  state.m = b1 * state.m + (Scalar(1) - b1) * grad;
  state.v = b2 * state.v + (Scalar(1) - b2) * grad.cwiseAbs2();
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const Scalar lr = static_cast<Scalar>(cfg.lr);
  if (cfg.weight_decay != 0.0) {
    params *= Scalar(1) - lr * static_cast<Scalar>(cfg.weight_decay);
  }
  params.array() -= lr * (state.m.array() / static_cast<Scalar>(bc1)) /
                    ((state.v.array() / static_cast<Scalar>(bc2)).sqrt() + static_cast<Scalar>(cfg.eps));
}

template <typename Scalar>
DecoderState<Scalar>::DecoderState(const ModelParams<Scalar>& params) : params_(&params) {
  const auto& cfg = params.config();
  keys_.assign(static_cast<std::size_t>(cfg.layers), Mat<Scalar>(cfg.max_len, cfg.width));
  values_.assign(static_cast<std::size_t>(cfg.layers), Mat<Scalar>(cfg.max_len, cfg.width));
}

template <typename Scalar>
void DecoderState<Scalar>::append(TokenId token) {
  const auto& p = *params_;
  const auto& cfg = p.config();
  const auto& lay = p.layout();
  if (length_ >= cfg.max_len) {
    throw DataError("decoder state exceeds max_len");
  }
  if (token < 0 || token >= cfg.vocab_size) {
    throw DataError("token id " + std::to_string(token) + " out of vocabulary");
  }
  const Index d = cfg.width;
  const Index H = cfg.heads;
  const Index dh = d / H;
  const Scalar scale = Scalar(1.0 / std::sqrt(static_cast<double>(dh)));
  const Index n = length_;
  Mat<Scalar> x = p.tensor(lay.tok_emb).row(token) + p.tensor(lay.pos_emb).row(n);
  Vec<Scalar> inv;
  for (std::size_t l = 0; l < lay.blocks.size(); ++l) {
    const auto& s = lay.blocks[l];
    const Mat<Scalar> a = rms_norm<Scalar>(x, p.tensor(s.norm1), inv);
    const Mat<Scalar> q = a * p.tensor(s.wq);
    keys_[l].row(n) = a * p.tensor(s.wk);
    values_[l].row(n) = a * p.tensor(s.wv);
    Mat<Scalar> o(1, d);
    for (Index h = 0; h < H; ++h) {
      const auto K = keys_[l].block(0, h * dh, n + 1, dh);
      const auto V = values_[l].block(0, h * dh, n + 1, dh);
      RowVec<Scalar> sc = q.middleCols(h * dh, dh) * K.transpose() * scale;
      sc.array() = (sc.array() - sc.maxCoeff()).exp();
      sc /= sc.sum();
      o.middleCols(h * dh, dh) = sc * V;
    }
    x += o * p.tensor(s.wo);
    const Mat<Scalar> b = rms_norm<Scalar>(x, p.tensor(s.norm2), inv);
    Mat<Scalar> u = b * p.tensor(s.w1) + p.tensor(s.b1).col(0).transpose();
    u = u.unaryExpr([](Scalar v) { return gelu(v); });
    x += u * p.tensor(s.w2) + p.tensor(s.b2).col(0).transpose();
  }
  const Mat<Scalar> z = rms_norm<Scalar>(x, p.tensor(lay.final_norm), inv);
  Mat<Scalar> logits = z * p.tensor(lay.w_out) + p.tensor(lay.b_out).col(0).transpose();
  log_softmax_rows(logits);
  next_ = logits.row(0).transpose().template cast<double>();
  ++length_;
}

TokenTrie::TokenTrie() : nodes_(1) {}

void TokenTrie::insert(std::span<const TokenId> seq) {
  int node = 0;
  bool fresh = false;
  for (TokenId t : seq) {
    auto& kids = nodes_[static_cast<std::size_t>(node)];
    auto it = kids.find(t);
    if (it == kids.end()) {
      const int next = static_cast<int>(nodes_.size());
      nodes_[static_cast<std::size_t>(node)].emplace(t, next);
      nodes_.emplace_back();
      node = next;
      fresh = true;
    } else {
      node = it->second;
    }
  }
  if (fresh) {
    ++n_sequences_;
  }
}

int TokenTrie::child(int node, TokenId token) const {
  const auto& kids = nodes_[static_cast<std::size_t>(node)];
  auto it = kids.find(token);
  return it == kids.end() ? -1 : it->second;
}

void GenerationConfig::validate() const {
  if (n_return < 1 || beam_size < n_return) {
    throw ConfigError("generation requires beam_size >= n_return >= 1");
  }
  if (max_code_tokens < 1) {
    throw ConfigError("max_code_tokens must be positive");
  }
}

template <typename Scalar>
BeamResult beam_search(const ModelParams<Scalar>& params, std::span<const TokenId> prompt,
                       const GenerationConfig& config, const DecodeConstraints& constraints) {
  config.validate();
  const auto& cfg = params.config();
  if (prompt.empty() || static_cast<int>(prompt.size()) >= cfg.max_len) {
    throw DataError("prompt must hold 1.." + std::to_string(cfg.max_len - 1) + " tokens");
  }
  for (TokenId t : prompt) {
    if (t < 0 || t >= cfg.vocab_size) {
      throw DataError("token id " + std::to_string(t) + " out of vocabulary");
    }
  }
  if (config.constrained && constraints.trie == nullptr) {
    throw ConfigError("constrained decoding requires a token trie");
  }
  const std::size_t max_steps =
      std::min(config.max_code_tokens, static_cast<std::size_t>(cfg.max_len) - prompt.size());
  std::vector<char> banned(static_cast<std::size_t>(cfg.vocab_size), 0);
  for (TokenId t : constraints.banned) {
    if (t >= 0 && t < cfg.vocab_size) {
      banned[static_cast<std::size_t>(t)] = 1;
    }
  }

  struct Live {
    TokenSeq tokens;
    std::vector<double> steps;
    double logprob;
    int trie_node;
    std::shared_ptr<DecoderState<Scalar>> state;
  };
  struct Candidate {
    std::size_t beam;
    TokenId token;
    double step;
    double logprob;
  };

  auto root = std::make_shared<DecoderState<Scalar>>(params);
  for (TokenId t : prompt) {
    root->append(t);
  }
  std::vector<Live> beams{{{}, {}, 0.0, 0, root}};
  std::vector<Hypothesis> finished;
  auto score_of = [&](double lp, std::size_t len) {
    return config.length_normalize ? lp / static_cast<double>(len) : lp;
  };

  for (std::size_t step = 0; step < max_steps && !beams.empty(); ++step) {
    const bool last = step + 1 == max_steps;
    std::vector<Candidate> cands;
    for (std::size_t bi = 0; bi < beams.size(); ++bi) {
      const auto& b = beams[bi];
      const auto& lp = b.state->next_logprobs();
      auto consider = [&](TokenId t) {
        if (banned[static_cast<std::size_t>(t)] || (last && t != constraints.eos)) {
          return;
        }
        cands.push_back({bi, t, lp(t), b.logprob + lp(t)});
      };
      if (config.constrained) {
        for (const auto& [t, _] : constraints.trie->children(b.trie_node)) {
          if (t >= 0 && t < cfg.vocab_size) {
            consider(t);
          }
        }
      } else {
        for (TokenId t = 0; t < cfg.vocab_size; ++t) {
          consider(t);
        }
      }
    }
    const std::size_t keep = std::min(config.beam_size, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                      [&](const Candidate& a, const Candidate& b) {
                        const double sa = score_of(a.logprob, beams[a.beam].tokens.size() + 1);
                        const double sb = score_of(b.logprob, beams[b.beam].tokens.size() + 1);
                        if (sa != sb) {
                          return sa > sb;
                        }
                        return a.beam != b.beam ? a.beam < b.beam : a.token < b.token;
                      });
    cands.resize(keep);

    std::vector<Live> next;
    for (const auto& c : cands) {
      const auto& b = beams[c.beam];
      TokenSeq toks = b.tokens;
      toks.push_back(c.token);
      std::vector<double> steps = b.steps;
      steps.push_back(c.step);
      const int node = config.constrained ? constraints.trie->child(b.trie_node, c.token) : 0;
      if (c.token == constraints.eos) {
        const double sc = score_of(c.logprob, toks.size());
        finished.push_back({std::move(toks), std::move(steps), c.logprob, sc});
        continue;
      }
      auto state = std::make_shared<DecoderState<Scalar>>(*b.state);
      state->append(c.token);
      next.push_back({std::move(toks), std::move(steps), c.logprob, node, std::move(state)});
    }
    beams = std::move(next);

    // Without length normalization scores only decrease, so once n_return
    // finished hypotheses beat every live beam the ranking is final.
    if (!config.length_normalize && finished.size() >= config.n_return && !beams.empty()) {
      std::vector<double> scores;
      for (const auto& h : finished) {
        scores.push_back(h.score);
      }
      std::nth_element(scores.begin(), scores.begin() + static_cast<std::ptrdiff_t>(config.n_return - 1),
                       scores.end(), std::greater<>());
      const double kth = scores[config.n_return - 1];
      double best_live = -std::numeric_limits<double>::infinity();
      for (const auto& b : beams) {
        best_live = std::max(best_live, b.logprob);
      }
      if (best_live < kth) {
        break;
      }
    }
  }

  std::stable_sort(finished.begin(), finished.end(), [](const Hypothesis& a, const Hypothesis& b) {
    if (a.score != b.score) {
      return a.score > b.score;
    }
    return a.tokens < b.tokens;
  });
  BeamResult result;
  result.incomplete = finished.size() < config.n_return;
  if (finished.size() > config.n_return) {
    finished.resize(config.n_return);
  }
  result.hypotheses = std::move(finished);
  return result;
}

template <typename Scalar>
std::string checkpoint_bytes(const ModelParams<Scalar>& params) {
  std::ostringstream out(std::ios::binary);
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  write_pod(out, kCheckpointVersion);
  write_pod(out, static_cast<std::uint32_t>(sizeof(Scalar)));
  const auto& c = params.config();
  for (int v : {c.vocab_size, c.max_len, c.width, c.layers, c.heads, c.ffn_width}) {
    write_pod(out, static_cast<std::int32_t>(v));
  }
  write_pod(out, c.init_std);
  const auto& slots = params.layout().slots();
  write_pod(out, static_cast<std::uint64_t>(slots.size()));
  for (const auto& s : slots) {
    write_pod(out, static_cast<std::uint32_t>(s.name.size()));
    out.write(s.name.data(), static_cast<std::streamsize>(s.name.size()));
    write_pod(out, static_cast<std::int64_t>(s.rows));
    write_pod(out, static_cast<std::int64_t>(s.cols));
    out.write(reinterpret_cast<const char*>(params.values().data() + s.offset),
              static_cast<std::streamsize>(s.size() * static_cast<Index>(sizeof(Scalar))));
  }
  return out.str();
}

template <typename Scalar>
ModelParams<Scalar> checkpoint_from_bytes(const std::string& bytes) {
  std::istringstream in(bytes, std::ios::binary);
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
    throw DataError("not a checkpoint (bad magic)");
  }
  if (read_pod<std::uint32_t>(in) != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version");
  }
  if (read_pod<std::uint32_t>(in) != sizeof(Scalar)) {
    throw DataError("checkpoint scalar width mismatch");
  }
  ModelConfig c;
  c.vocab_size = read_pod<std::int32_t>(in);
  c.max_len = read_pod<std::int32_t>(in);
  c.width = read_pod<std::int32_t>(in);
  c.layers = read_pod<std::int32_t>(in);
  c.heads = read_pod<std::int32_t>(in);
  c.ffn_width = read_pod<std::int32_t>(in);
  c.init_std = read_pod<double>(in);
  ModelParams<Scalar> params(c);
  const auto n = read_pod<std::uint64_t>(in);
  const auto& slots = params.layout().slots();
  if (n != slots.size()) {
    throw DataError("checkpoint tensor count mismatch");
  }
  for (const auto& s : slots) {
    const auto len = read_pod<std::uint32_t>(in);
    std::string name(len, '\0');
    in.read(name.data(), len);
    const auto rows = read_pod<std::int64_t>(in);
    const auto cols = read_pod<std::int64_t>(in);
    if (name != s.name || rows != s.rows || cols != s.cols) {
      throw DataError("checkpoint tensor '" + name + "' does not match the model layout");
    }
    in.read(reinterpret_cast<char*>(params.values().data() + s.offset),
            static_cast<std::streamsize>(s.size() * static_cast<Index>(sizeof(Scalar))));
    if (!in) {
      throw DataError("truncated checkpoint");
    }
  }
  return params;
}

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, const ModelParams<Scalar>& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw Error("cannot write " + path.string());
  }
  const std::string bytes = checkpoint_bytes(params);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

template <typename Scalar>
ModelParams<Scalar> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error("cannot read " + path.string());
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return checkpoint_from_bytes<Scalar>(ss.str());
}

GradCheckReport finite_difference_check(const Vec<double>& x, const std::function<double(const Vec<double>&)>& f,
                                        const Vec<double>& analytic, std::size_t n_probes, double eps,
                                        std::uint64_t seed, double min_magnitude) {
  GradCheckReport report;
  std::vector<Index> active;
  std::vector<Index> inactive;
  for (Index i = 0; i < analytic.size(); ++i) {
    (std::abs(analytic(i)) >= min_magnitude ? active : inactive).push_back(i);
  }
  Rng rng = make_rng(seed, 0xfd);
  std::shuffle(active.begin(), active.end(), rng);
  std::shuffle(inactive.begin(), inactive.end(), rng);
  auto numeric = [&](Index i) {
    Vec<double> xp = x;
    xp(i) += eps;
    const double fp = f(xp);
    xp(i) = x(i) - eps;
    const double fm = f(xp);
    return (fp - fm) / (2.0 * eps);
  };
  for (std::size_t k = 0; k < std::min(n_probes, active.size()); ++k) {
    const Index i = active[k];
    GradProbe probe{i, analytic(i), numeric(i), 0.0};
    probe.rel_error = std::abs(probe.analytic - probe.numeric) /
                      std::max(std::abs(probe.analytic), std::abs(probe.numeric));
    report.max_rel_error = std::max(report.max_rel_error, probe.rel_error);
    report.probes.push_back(probe);
  }
  for (std::size_t k = 0; k < std::min<std::size_t>(5, inactive.size()); ++k) {
    const Index i = inactive[k];
    report.max_abs_error_inactive = std::max(report.max_abs_error_inactive, std::abs(numeric(i) - analytic(i)));
  }
  return report;
}

GradCheckReport check_model_gradient(const ModelParams<double>& params, const Objective& objective,
                                     std::size_t n_probes, double eps, std::uint64_t seed) {
  const auto lg = loss_grad(params, objective);
  ModelParams<double> probe = params;
  auto f = [&](const Vec<double>& x) {
    probe.values() = x;
    return evaluate_loss(probe, objective);
  };
  return finite_difference_check(params.values(), f, lg.grad, n_probes, eps, seed);
}

#define GRAM_INSTANTIATE_SEQMODEL(Scalar)                                                                  \
  template class ModelParams<Scalar>;                                                                    \
  template std::vector<double> token_logprobs(const ModelParams<Scalar>&, std::span<const TokenId>,      \
                                              std::span<const TokenId>);                                 \
  template double sequence_logprob(const ModelParams<Scalar>&, std::span<const TokenId>,                 \
                                   std::span<const TokenId>);                                            \
  template Mat<double> next_token_logprobs(const ModelParams<Scalar>&, std::span<const TokenId>,         \
                                           std::span<const TokenId>);                                    \
  template LossGrad<Scalar> loss_grad(const ModelParams<Scalar>&, const Objective&, const DropoutSpec&,  \
                                      std::size_t);                                                      \
  template double evaluate_loss(const ModelParams<Scalar>&, const Objective&);                           \
  template void adamw_step(Vec<Scalar>&, const Vec<Scalar>&, AdamWState<Scalar>&, const AdamWConfig&);   \
  template class DecoderState<Scalar>;                                                                   \
  template BeamResult beam_search(const ModelParams<Scalar>&, std::span<const TokenId>,                  \
                                  const GenerationConfig&, const DecodeConstraints&);                    \
  template std::string checkpoint_bytes(const ModelParams<Scalar>&);                                     \
  template ModelParams<Scalar> checkpoint_from_bytes(const std::string&);                                \
  template void save_checkpoint(const std::filesystem::path&, const ModelParams<Scalar>&);               \
  template ModelParams<Scalar> load_checkpoint(const std::filesystem::path&);

GRAM_INSTANTIATE_SEQMODEL(float)
GRAM_INSTANTIATE_SEQMODEL(double)

}  // namespace gram
