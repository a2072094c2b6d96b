#include "profpred/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include "profpred/error.hpp"
#include "profpred/seed.hpp"

namespace profpred {

void ModelConfig::validate() const {
  if (num_layers == 0 || num_heads == 0 || hidden_dim == 0 || ff_dim == 0 || max_positions == 0) {
    throw Error(ErrorKind::InvalidConfig, "model dimensions must be positive");
  }
  if (hidden_dim % num_heads != 0) {
    throw Error(ErrorKind::InvalidConfig, "hidden_dim " + std::to_string(hidden_dim) + " is not divisible by num_heads " +
                                              std::to_string(num_heads));
  }
  if (vocab_size != static_cast<std::uint32_t>(tokens::kVocabSize)) {
    throw Error(ErrorKind::InvalidConfig, "vocabulary size must be " + std::to_string(tokens::kVocabSize));
  }
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw Error(ErrorKind::InvalidConfig, "dropout_rate must be in [0, 1)");
}

namespace {

struct Shape {
  std::string name;
  Eigen::Index rows;
  Eigen::Index cols;
  std::uint32_t rank;
  enum class Init { Normal, Zero, One } init;
};

std::vector<Shape> layout(const ModelConfig& c) {
  const auto d = static_cast<Eigen::Index>(c.hidden_dim);
  const auto ff = static_cast<Eigen::Index>(c.ff_dim);
  using I = Shape::Init;
  std::vector<Shape> out;
  out.push_back({"embed.token", static_cast<Eigen::Index>(c.vocab_size), d, 2, I::Normal});
  out.push_back({"embed.position", static_cast<Eigen::Index>(c.max_positions), d, 2, I::Normal});
  for (std::uint32_t l = 0; l < c.num_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    for (const char* proj : {"attn.q", "attn.k", "attn.v", "attn.out"}) {
      out.push_back({p + proj + ".weight", d, d, 2, I::Normal});
      out.push_back({p + proj + ".bias", 1, d, 1, I::Zero});
    }
    out.push_back({p + "norm1.scale", 1, d, 1, I::One});
    out.push_back({p + "norm1.offset", 1, d, 1, I::Zero});
    out.push_back({p + "ff.in.weight", d, ff, 2, I::Normal});
    out.push_back({p + "ff.in.bias", 1, ff, 1, I::Zero});
    out.push_back({p + "ff.out.weight", ff, d, 2, I::Normal});
    out.push_back({p + "ff.out.bias", 1, d, 1, I::Zero});
    out.push_back({p + "norm2.scale", 1, d, 1, I::One});
    out.push_back({p + "norm2.offset", 1, d, 1, I::Zero});
  }
  out.push_back({"head.vocab.weight", d, static_cast<Eigen::Index>(c.vocab_size), 2, I::Normal});
  out.push_back({"head.vocab.bias", 1, static_cast<Eigen::Index>(c.vocab_size), 1, I::Zero});
  out.push_back({"head.profile.weight", d, kAlphabetSize, 2, I::Normal});
  out.push_back({"head.profile.bias", 1, kAlphabetSize, 1, I::Zero});
  return out;
}

constexpr double kInitStd = 0.02;
constexpr double kNormEps = 1e-5;

template <class T>
using ColVec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <class T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <class T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  return cdf + x * pdf;
}

template <class T>
void layer_norm(const Mat<T>& x, const Mat<T>& scale, const Mat<T>& offset, Mat<T>& xhat, ColVec<T>& inv_std,
                Mat<T>& y) {
  const auto rows = x.rows();
  const auto d = static_cast<T>(x.cols());
  xhat.resize(rows, x.cols());
  inv_std.resize(rows);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const T mean = x.row(i).sum() / d;
    const auto centered = (x.row(i).array() - mean).matrix();
    const T var = centered.squaredNorm() / d;
    inv_std(i) = T(1) / std::sqrt(var + static_cast<T>(kNormEps));
    xhat.row(i) = centered * inv_std(i);
  }
  y = (xhat.array().rowwise() * scale.row(0).array()).matrix();
  y.rowwise() += offset.row(0);
}

template <class T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const Mat<T>& xhat, const ColVec<T>& inv_std, const Mat<T>& scale,
                           Mat<T>& d_scale, Mat<T>& d_offset) {
  d_scale += (dy.array() * xhat.array()).colwise().sum().matrix();
  d_offset += dy.colwise().sum();
  const Mat<T> dxhat = (dy.array().rowwise() * scale.row(0).array()).matrix();
  const auto d = static_cast<T>(xhat.cols());
  Mat<T> dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const T sum_dxhat = dxhat.row(i).sum();
    const T sum_dxhat_xhat = dxhat.row(i).dot(xhat.row(i));
    dx.row(i) = (inv_std(i) / d) *
                (d * dxhat.row(i).array() - sum_dxhat - xhat.row(i).array() * sum_dxhat_xhat).matrix();
  }
  return dx;
}

template <class T>
Mat<T> dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, std::mt19937_64& rng) {
  Mat<T> mask(rows, cols);
  std::bernoulli_distribution keep(1.0 - rate);
  const T scale = static_cast<T>(1.0 / (1.0 - rate));
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(rng) ? scale : T(0);
  return mask;
}

template <class T>
void softmax_rows_inplace(Mat<T>& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const T mx = m.row(i).maxCoeff();
    m.row(i) = m.row(i).unaryExpr([mx](T v) { return std::exp(v - mx); });
    m.row(i) /= m.row(i).sum();
  }
}

/// log-softmax of one row, computed in double.
template <class T>
void log_softmax_row(const Eigen::Ref<const Eigen::Matrix<T, 1, Eigen::Dynamic>>& z, std::vector<double>& out) {
  out.resize(static_cast<std::size_t>(z.size()));
  double mx = -std::numeric_limits<double>::infinity();
  for (Eigen::Index s = 0; s < z.size(); ++s) mx = std::max(mx, static_cast<double>(z(s)));
  double sum = 0.0;
  for (Eigen::Index s = 0; s < z.size(); ++s) sum += std::exp(static_cast<double>(z(s)) - mx);
  const double log_z = mx + std::log(sum);
  for (Eigen::Index s = 0; s < z.size(); ++s) out[static_cast<std::size_t>(s)] = static_cast<double>(z(s)) - log_z;
}

void check_tokens(const ModelConfig& config, std::span<const Token> tokens) {
  if (tokens.size() > config.max_positions) {
    throw Error(ErrorKind::LengthExceeded, "sequence of length " + std::to_string(tokens.size()) +
                                               " exceeds max_positions " + std::to_string(config.max_positions));
  }
  if (tokens.empty()) throw Error(ErrorKind::ShapeMismatch, "empty token row");
  bool any_valid = false;
  for (Token t : tokens) {
    if (t < 0 || t >= static_cast<Token>(config.vocab_size)) {
      throw Error(ErrorKind::TokenOutOfRange, "token id " + std::to_string(t) + " outside vocabulary");
    }
    any_valid = any_valid || t != tokens::kPad;
  }
  if (!any_valid) throw Error(ErrorKind::ShapeMismatch, "row contains only padding");
}

}  // namespace

std::size_t expected_parameter_count(const ModelConfig& c) {
  const std::size_t d = c.hidden_dim, ff = c.ff_dim, v = c.vocab_size;
  const std::size_t per_layer = 4 * (d * d + d) + 2 * 2 * d + (d * ff + ff) + (ff * d + d);
  return v * d + c.max_positions * d + c.num_layers * per_layer + (d * v + v) + (d * kAlphabetSize + kAlphabetSize);
}

template <class T>
std::size_t ModelParams<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += static_cast<std::size_t>(t.value.size());
  return n;
}

template <class T>
bool ModelParams<T>::all_finite() const {
  return std::all_of(tensors.begin(), tensors.end(), [](const auto& t) { return t.value.allFinite(); });
}

template <class T>
ModelParams<T> ModelParams<T>::zeros_like() const {
  ModelParams out;
  out.config = config;
  out.tensors.reserve(tensors.size());
  for (const auto& t : tensors) out.tensors.push_back({t.name, Mat<T>::Zero(t.value.rows(), t.value.cols()), t.rank});
  return out;
}

template <class T>
ModelParams<T> init_params(const ModelConfig& config) {
  config.validate();
  ModelParams<T> params;
  params.config = config;
  std::mt19937_64 rng(derive_seed(config.seed, {0x1417}));
  std::normal_distribution<double> normal(0.0, kInitStd);
  for (const auto& s : layout(config)) {
    Mat<T> value(s.rows, s.cols);
    switch (s.init) {
      case Shape::Init::Normal:
        for (Eigen::Index i = 0; i < value.size(); ++i) value.data()[i] = static_cast<T>(normal(rng));
        break;
      case Shape::Init::Zero: value.setZero(); break;
      case Shape::Init::One: value.setOnes(); break;
    }
    params.tensors.push_back({s.name, std::move(value), s.rank});
  }
  return params;
}

TokenBatch TokenBatch::pad(const std::vector<std::vector<Token>>& sequences) {
  TokenBatch batch;
  for (const auto& s : sequences) batch.width = std::max(batch.width, s.size());
  batch.rows.reserve(sequences.size());
  for (const auto& s : sequences) {
    auto row = s;
    row.resize(batch.width, tokens::kPad);
    batch.rows.push_back(std::move(row));
  }
  return batch;
}

template <class T>
SequenceTrace<T> encode(const ModelParams<T>& params, std::span<const Token> tokens, Mode mode,
                        std::uint64_t dropout_seed) {
  const auto& cfg = params.config;
  check_tokens(cfg, tokens);
  const auto len = static_cast<Eigen::Index>(tokens.size());
  const auto d = static_cast<Eigen::Index>(cfg.hidden_dim);
  const auto heads = static_cast<Eigen::Index>(cfg.num_heads);
  const auto dh = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  const bool use_dropout = mode == Mode::Train && cfg.dropout_rate > 0.0;
  std::mt19937_64 rng(dropout_seed);

  SequenceTrace<T> tr;
  tr.tokens.assign(tokens.begin(), tokens.end());
  tr.key_valid.resize(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) tr.key_valid[i] = tokens[i] != tokens::kPad;

  Mat<T> x(len, d);
  for (Eigen::Index i = 0; i < len; ++i) {
    x.row(i) = params.token_embedding().row(tokens[static_cast<std::size_t>(i)]) + params.position_embedding().row(i);
  }

  tr.layers.resize(cfg.num_layers);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    auto& lt = tr.layers[l];
    using S = LayerSlot;
    lt.input = x;
    lt.q = x * params.layer(l, S::QWeight);
    lt.q.rowwise() += params.layer(l, S::QBias).row(0);
    lt.k = x * params.layer(l, S::KWeight);
    lt.k.rowwise() += params.layer(l, S::KBias).row(0);
    lt.v = x * params.layer(l, S::VWeight);
    lt.v.rowwise() += params.layer(l, S::VBias).row(0);

    lt.context.resize(len, d);
    lt.attention.resize(static_cast<std::size_t>(heads));
    for (Eigen::Index h = 0; h < heads; ++h) {
      Mat<T> scores = (lt.q.middleCols(h * dh, dh) * lt.k.middleCols(h * dh, dh).transpose()) * scale;
      for (Eigen::Index j = 0; j < len; ++j) {
        if (!tr.key_valid[static_cast<std::size_t>(j)]) scores.col(j).setConstant(-std::numeric_limits<T>::infinity());
      }
      softmax_rows_inplace(scores);
      lt.context.middleCols(h * dh, dh) = scores * lt.v.middleCols(h * dh, dh);
      lt.attention[static_cast<std::size_t>(h)] = std::move(scores);
    }
    lt.attn_out = lt.context * params.layer(l, S::OutWeight);
    lt.attn_out.rowwise() += params.layer(l, S::OutBias).row(0);

    Mat<T> res1 = lt.input;
    if (use_dropout) {
      lt.drop1 = dropout_mask<T>(len, d, cfg.dropout_rate, rng);
      res1 += lt.attn_out.cwiseProduct(lt.drop1);
    } else {
      res1 += lt.attn_out;
    }
    layer_norm(res1, params.layer(l, S::Norm1Scale), params.layer(l, S::Norm1Offset), lt.xhat1, lt.inv_std1, lt.x1);

    lt.ff_pre = lt.x1 * params.layer(l, S::FfInWeight);
    lt.ff_pre.rowwise() += params.layer(l, S::FfInBias).row(0);
    lt.ff_act = lt.ff_pre.unaryExpr([](T v) { return gelu(v); });
    lt.ff_out = lt.ff_act * params.layer(l, S::FfOutWeight);
    lt.ff_out.rowwise() += params.layer(l, S::FfOutBias).row(0);

    Mat<T> res2 = lt.x1;
    if (use_dropout) {
      lt.drop2 = dropout_mask<T>(len, d, cfg.dropout_rate, rng);
      res2 += lt.ff_out.cwiseProduct(lt.drop2);
    } else {
      res2 += lt.ff_out;
    }
    layer_norm(res2, params.layer(l, S::Norm2Scale), params.layer(l, S::Norm2Offset), lt.xhat2, lt.inv_std2, lt.x2);
    x = lt.x2;
  }
  tr.hidden = std::move(x);
  return tr;
}

template <class T>
void encode_backward(const ModelParams<T>& params, const SequenceTrace<T>& tr, const Mat<T>& d_hidden,
                     ModelParams<T>& grads) {
  const auto& cfg = params.config;
  const auto len = static_cast<Eigen::Index>(tr.tokens.size());
  const auto d = static_cast<Eigen::Index>(cfg.hidden_dim);
  const auto heads = static_cast<Eigen::Index>(cfg.num_heads);
  const auto dh = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  using S = LayerSlot;

  Mat<T> dx = d_hidden;
  for (std::size_t li = cfg.num_layers; li-- > 0;) {
    const auto& lt = tr.layers[li];

    const Mat<T> d_res2 = layer_norm_backward(dx, lt.xhat2, lt.inv_std2, params.layer(li, S::Norm2Scale),
                                              grads.layer(li, S::Norm2Scale), grads.layer(li, S::Norm2Offset));
    Mat<T> d_x1 = d_res2;
    const Mat<T> d_ff_out = lt.drop2.size() ? Mat<T>(d_res2.cwiseProduct(lt.drop2)) : d_res2;
    grads.layer(li, S::FfOutWeight).noalias() += lt.ff_act.transpose() * d_ff_out;
    grads.layer(li, S::FfOutBias) += d_ff_out.colwise().sum();
    Mat<T> d_ff_pre = d_ff_out * params.layer(li, S::FfOutWeight).transpose();
    d_ff_pre.array() *= lt.ff_pre.unaryExpr([](T v) { return gelu_grad(v); }).array();
    grads.layer(li, S::FfInWeight).noalias() += lt.x1.transpose() * d_ff_pre;
    grads.layer(li, S::FfInBias) += d_ff_pre.colwise().sum();
    d_x1.noalias() += d_ff_pre * params.layer(li, S::FfInWeight).transpose();

    const Mat<T> d_res1 = layer_norm_backward(d_x1, lt.xhat1, lt.inv_std1, params.layer(li, S::Norm1Scale),
                                              grads.layer(li, S::Norm1Scale), grads.layer(li, S::Norm1Offset));
    Mat<T> d_input = d_res1;
    const Mat<T> d_attn = lt.drop1.size() ? Mat<T>(d_res1.cwiseProduct(lt.drop1)) : d_res1;
    grads.layer(li, S::OutWeight).noalias() += lt.context.transpose() * d_attn;
    grads.layer(li, S::OutBias) += d_attn.colwise().sum();
    const Mat<T> d_context = d_attn * params.layer(li, S::OutWeight).transpose();

    Mat<T> dq(len, d), dk(len, d), dv(len, d);
    for (Eigen::Index h = 0; h < heads; ++h) {
      const auto& a = lt.attention[static_cast<std::size_t>(h)];
      const auto d_ctx_h = d_context.middleCols(h * dh, dh);
      const Mat<T> d_a = d_ctx_h * lt.v.middleCols(h * dh, dh).transpose();
      dv.middleCols(h * dh, dh) = a.transpose() * d_ctx_h;
      const ColVec<T> row_dot = (d_a.cwiseProduct(a)).rowwise().sum();
      Mat<T> d_scores = a.cwiseProduct(d_a.colwise() - row_dot) * scale;
      dq.middleCols(h * dh, dh) = d_scores * lt.k.middleCols(h * dh, dh);
      dk.middleCols(h * dh, dh) = d_scores.transpose() * lt.q.middleCols(h * dh, dh);
    }
    grads.layer(li, S::QWeight).noalias() += lt.input.transpose() * dq;
    grads.layer(li, S::QBias) += dq.colwise().sum();
    grads.layer(li, S::KWeight).noalias() += lt.input.transpose() * dk;
    grads.layer(li, S::KBias) += dk.colwise().sum();
    grads.layer(li, S::VWeight).noalias() += lt.input.transpose() * dv;
    grads.layer(li, S::VBias) += dv.colwise().sum();
    d_input.noalias() += dq * params.layer(li, S::QWeight).transpose();
    d_input.noalias() += dk * params.layer(li, S::KWeight).transpose();
    d_input.noalias() += dv * params.layer(li, S::VWeight).transpose();
    dx = std::move(d_input);
  }

  for (Eigen::Index i = 0; i < len; ++i) {
    grads.token_embedding().row(tr.tokens[static_cast<std::size_t>(i)]) += dx.row(i);
    grads.position_embedding().row(i) += dx.row(i);
  }
}

template <class T>
std::vector<ForwardOutput<T>> forward(const ModelParams<T>& params, const TokenBatch& batch, Mode mode,
                                      std::uint64_t dropout_seed) {
  std::vector<ForwardOutput<T>> out;
  out.reserve(batch.rows.size());
  for (std::size_t b = 0; b < batch.rows.size(); ++b) {
    auto tr = encode(params, std::span<const Token>(batch.rows[b]), mode, derive_seed(dropout_seed, {b}));
    ForwardOutput<T> fo;
    fo.vocab_logits = tr.hidden * params.vocab_weight();
    fo.vocab_logits.rowwise() += params.vocab_bias().row(0);
    fo.profile_probs = tr.hidden * params.profile_weight();
    fo.profile_probs.rowwise() += params.profile_bias().row(0);
    softmax_rows_inplace(fo.profile_probs);
    fo.hidden_states = std::move(tr.hidden);
    out.push_back(std::move(fo));
  }
  return out;
}

double LossSelector::mlm_weight() const {
  switch (objective) {
    case Objective::PP: return 0.0;
    case Objective::MLM: return 1.0;
    case Objective::JOINT: return lambda;
  }
  return 0.0;
}

double LossSelector::pp_weight() const {
  switch (objective) {
    case Objective::PP: return 1.0;
    case Objective::MLM: return 0.0;
    case Objective::JOINT: return 1.0 - lambda;
  }
  return 0.0;
}

namespace {

/// Per-sequence loss terms plus (optionally) logit gradients for unit weight.
template <class T>
struct HeadTerms {
  double pp = 0.0;
  double mlm = 0.0;
  bool has_pp = false;
  bool has_mlm = false;
  Mat<T> d_profile_logits;
  Mat<T> d_vocab_logits;
};

template <class T>
HeadTerms<T> head_terms(const ModelParams<T>& params, const Mat<T>& hidden, const SequenceTargets& tgt,
                        MlmNormalization normalization, bool need_pp_grad, bool need_mlm_grad) {
  HeadTerms<T> out;
  const auto len = hidden.rows();
  const double n = static_cast<double>(tgt.length);
  if (tgt.length == 0 || static_cast<Eigen::Index>(tgt.length) > len) {
    throw Error(ErrorKind::ShapeMismatch, "target length does not fit the token row");
  }
  std::vector<double> logp;

  if (!tgt.profile.empty()) {
    if (tgt.profile.size() != tgt.length) throw Error(ErrorKind::ShapeMismatch, "profile targets must cover every residue");
    out.has_pp = true;
    Mat<T> logits = hidden.topRows(static_cast<Eigen::Index>(tgt.length)) * params.profile_weight();
    logits.rowwise() += params.profile_bias().row(0);
    if (need_pp_grad) out.d_profile_logits = Mat<T>::Zero(len, kAlphabetSize);
    for (std::size_t i = 0; i < tgt.length; ++i) {
      const auto ii = static_cast<Eigen::Index>(i);
      log_softmax_row<T>(logits.row(ii), logp);
      const auto& label = tgt.profile[i];
      double kl = 0.0;
      double label_mass = 0.0;
      for (int s = 0; s < kAlphabetSize; ++s) {
        label_mass += label[s];
        if (label[s] > 0.0) kl += label[s] * (std::log(label[s]) - logp[static_cast<std::size_t>(s)]);
      }
      out.pp += kl / n;
      if (need_pp_grad) {
        for (int s = 0; s < kAlphabetSize; ++s) {
          out.d_profile_logits(ii, s) =
              static_cast<T>((std::exp(logp[static_cast<std::size_t>(s)]) * label_mass - label[s]) / n);
        }
      }
    }
  }

  if (!tgt.mask_positions.empty()) {
    if (tgt.mask_positions.size() != tgt.mask_tokens.size()) {
      throw Error(ErrorKind::ShapeMismatch, "mask positions and tokens differ in count");
    }
    out.has_mlm = true;
    const double denom =
        normalization == MlmNormalization::SequenceLength ? n : static_cast<double>(tgt.mask_positions.size());
    const auto vocab = static_cast<Eigen::Index>(params.config.vocab_size);
    if (need_mlm_grad) out.d_vocab_logits = Mat<T>::Zero(len, vocab);
    for (std::size_t p = 0; p < tgt.mask_positions.size(); ++p) {
      const auto pos = static_cast<Eigen::Index>(tgt.mask_positions[p]);
      if (pos >= static_cast<Eigen::Index>(tgt.length)) throw Error(ErrorKind::ShapeMismatch, "mask position past sequence end");
      const Eigen::Matrix<T, 1, Eigen::Dynamic> z = hidden.row(pos) * params.vocab_weight() + params.vocab_bias().row(0);
      log_softmax_row<T>(z, logp);
      const auto t = static_cast<std::size_t>(tgt.mask_tokens[p]);
      out.mlm += -logp[t] / denom;
      if (need_mlm_grad) {
        for (Eigen::Index s = 0; s < vocab; ++s) {
          const double g = std::exp(logp[static_cast<std::size_t>(s)]) - (static_cast<std::size_t>(s) == t ? 1.0 : 0.0);
          out.d_vocab_logits(pos, s) += static_cast<T>(g / denom);
        }
      }
    }
  }
  return out;
}

void check_batch(const TrainingBatch& batch) {
  if (batch.inputs.rows.empty()) throw Error(ErrorKind::ShapeMismatch, "empty batch");
  if (batch.targets.size() != batch.inputs.rows.size()) {
    throw Error(ErrorKind::ShapeMismatch, "target count differs from batch size");
  }
}

}  // namespace

template <class T>
LossResult<T> backward(const ModelParams<T>& params, const TrainingBatch& batch, const LossSelector& selector,
                       Mode mode, std::uint64_t dropout_seed) {
  check_batch(batch);
  const double w_pp = selector.pp_weight();
  const double w_mlm = selector.mlm_weight();
  const double inv_b = 1.0 / static_cast<double>(batch.inputs.rows.size());

  LossResult<T> res;
  res.grads = params.zeros_like();
  double pp_sum = 0.0, mlm_sum = 0.0;
  bool all_pp = true, all_mlm = true;

  for (std::size_t b = 0; b < batch.inputs.rows.size(); ++b) {
    const auto tr = encode(params, std::span<const Token>(batch.inputs.rows[b]), mode, derive_seed(dropout_seed, {b}));
    const auto& tgt = batch.targets[b];
    const bool pp_grad = w_pp != 0.0 && !tgt.profile.empty();
    const bool mlm_grad = w_mlm != 0.0 && !tgt.mask_positions.empty();
    if (w_pp != 0.0 && tgt.profile.empty()) throw Error(ErrorKind::ShapeMismatch, "objective needs profile targets");
    if (w_mlm != 0.0 && tgt.mask_positions.empty()) throw Error(ErrorKind::EmptyMask, "objective needs masked positions");

    auto terms = head_terms(params, tr.hidden, tgt, selector.normalization, pp_grad, mlm_grad);
    pp_sum += terms.pp;
    mlm_sum += terms.mlm;
    all_pp = all_pp && terms.has_pp;
    all_mlm = all_mlm && terms.has_mlm;

    Mat<T> d_hidden = Mat<T>::Zero(tr.hidden.rows(), tr.hidden.cols());
    if (mlm_grad) {
      terms.d_vocab_logits *= static_cast<T>(w_mlm * inv_b);
      res.grads.vocab_weight().noalias() += tr.hidden.transpose() * terms.d_vocab_logits;
      res.grads.vocab_bias() += terms.d_vocab_logits.colwise().sum();
      d_hidden.noalias() += terms.d_vocab_logits * params.vocab_weight().transpose();
    }
    if (pp_grad) {
      terms.d_profile_logits *= static_cast<T>(w_pp * inv_b);
      res.grads.profile_weight().noalias() += tr.hidden.transpose() * terms.d_profile_logits;
      res.grads.profile_bias() += terms.d_profile_logits.colwise().sum();
      d_hidden.noalias() += terms.d_profile_logits * params.profile_weight().transpose();
    }
    if (pp_grad || mlm_grad) encode_backward(params, tr, d_hidden, res.grads);
  }

  const double nan = std::numeric_limits<double>::quiet_NaN();
  res.pp = all_pp ? pp_sum * inv_b : nan;
  res.mlm = all_mlm ? mlm_sum * inv_b : nan;
  res.loss = (w_pp != 0.0 ? w_pp * res.pp : 0.0) + (w_mlm != 0.0 ? w_mlm * res.mlm : 0.0);
  return res;
}

template <class T>
std::vector<double> loss_values(const ModelParams<T>& params, const TrainingBatch& batch,
                                std::span<const LossSelector> selectors, Mode mode, std::uint64_t dropout_seed) {
  check_batch(batch);
  const double inv_b = 1.0 / static_cast<double>(batch.inputs.rows.size());
  // Normalization only affects the MLM term, so evaluate both variants once.
  double pp = 0.0, mlm_len = 0.0, mlm_count = 0.0;
  for (std::size_t b = 0; b < batch.inputs.rows.size(); ++b) {
    const auto tr = encode(params, std::span<const Token>(batch.inputs.rows[b]), mode, derive_seed(dropout_seed, {b}));
    const auto by_len = head_terms(params, tr.hidden, batch.targets[b], MlmNormalization::SequenceLength, false, false);
    pp += by_len.pp;
    mlm_len += by_len.mlm;
    if (!batch.targets[b].mask_positions.empty()) {
      mlm_count += by_len.mlm * static_cast<double>(batch.targets[b].length) /
                   static_cast<double>(batch.targets[b].mask_positions.size());
    }
  }
  std::vector<double> out;
  for (const auto& sel : selectors) {
    const double mlm = sel.normalization == MlmNormalization::SequenceLength ? mlm_len : mlm_count;
    const double w_pp = sel.pp_weight(), w_mlm = sel.mlm_weight();
    out.push_back(((w_pp != 0.0 ? w_pp * pp : 0.0) + (w_mlm != 0.0 ? w_mlm * mlm : 0.0)) * inv_b);
  }
  return out;
}

namespace {

std::vector<std::size_t> entries_to_check(std::size_t size, const GradCheckOptions& opt, std::size_t tensor_index) {
  std::vector<std::size_t> idx(size);
  for (std::size_t i = 0; i < size; ++i) idx[i] = i;
  if (opt.max_entries_per_tensor == 0 || size <= opt.max_entries_per_tensor) return idx;
  std::mt19937_64 rng(derive_seed(opt.sample_seed, {tensor_index}));
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(opt.max_entries_per_tensor);
  std::sort(idx.begin(), idx.end());
  return idx;
}

std::vector<GradCheckReport> compare_numeric(const ModelParams<double>& params, const TrainingBatch& batch,
                                             std::span<const LossSelector> selectors,
                                             std::span<const ModelParams<double>* const> analytic,
                                             const GradCheckOptions& opt) {
  std::vector<GradCheckReport> reports(selectors.size());
  ModelParams<double> probe = params;
  // Embedding rows the batch never reads have an exactly zero central
  // difference; they are compared without running the model.
  std::vector<bool> token_read(params.config.vocab_size, false);
  for (const auto& row : batch.inputs.rows)
    for (Token tok : row)
      if (tok != tokens::kPad && tok >= 0 && static_cast<std::uint32_t>(tok) < token_read.size()) token_read[tok] = true;
  auto inert = [&](std::size_t t, std::size_t e) {
    const auto cols = static_cast<std::size_t>(params.tensors[t].value.cols());
    if (t == ModelParams<double>::kTokenEmbedding) return !token_read[e / cols];
    if (t == ModelParams<double>::kPositionEmbedding) return e / cols >= batch.inputs.width;
    return false;
  };
  for (std::size_t t = 0; t < params.tensors.size(); ++t) {
    std::vector<TensorCheck> checks(selectors.size());
    for (auto& c : checks) c.name = params.tensors[t].name;
    auto& value = probe.tensors[t].value;
    for (std::size_t e : entries_to_check(static_cast<std::size_t>(value.size()), opt, t)) {
      const double orig = value.data()[e];
      const double h = opt.epsilon * std::max(1.0, std::abs(orig));
      auto central = [&](double step) {
        value.data()[e] = orig + step;
        const auto plus = loss_values(probe, batch, selectors);
        value.data()[e] = orig - step;
        const auto minus = loss_values(probe, batch, selectors);
        value.data()[e] = orig;
        std::vector<double> d(selectors.size());
        for (std::size_t s = 0; s < d.size(); ++s) d[s] = (plus[s] - minus[s]) / (2.0 * step);
        return d;
      };
      const bool skip = inert(t, e);
      const auto coarse = skip ? std::vector<double>(selectors.size(), 0.0) : central(h);
      std::vector<double> fine = coarse;
      if (opt.richardson && !skip) fine = central(0.5 * h);
      for (std::size_t s = 0; s < selectors.size(); ++s) {
        // Richardson: (4 D(h/2) - D(h)) / 3 cancels the h^2 term.
        const double numeric = opt.richardson ? (4.0 * fine[s] - coarse[s]) / 3.0 : coarse[s];
        const double a = analytic[s]->tensors[t].value.data()[e];
        const double abs_err = std::abs(a - numeric);
        const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), opt.abs_floor});
        checks[s].max_abs_error = std::max(checks[s].max_abs_error, abs_err);
        checks[s].max_rel_error = std::max(checks[s].max_rel_error, rel);
        ++checks[s].entries_checked;
      }
    }
    for (std::size_t s = 0; s < selectors.size(); ++s) {
      checks[s].passed = checks[s].max_rel_error < opt.tolerance;
      reports[s].max_rel_error = std::max(reports[s].max_rel_error, checks[s].max_rel_error);
      reports[s].passed = reports[s].passed && checks[s].passed;
      reports[s].tensors.push_back(checks[s]);
    }
  }
  return reports;
}

}  // namespace

std::vector<GradCheckReport> grad_check(const ModelParams<double>& params, const TrainingBatch& batch,
                                        std::span<const LossSelector> selectors, const GradCheckOptions& options) {
  std::vector<ModelParams<double>> grads;
  grads.reserve(selectors.size());
  for (const auto& sel : selectors) grads.push_back(backward(params, batch, sel).grads);
  std::vector<const ModelParams<double>*> ptrs;
  for (const auto& g : grads) ptrs.push_back(&g);
  return compare_numeric(params, batch, selectors, ptrs, options);
}

GradCheckReport grad_check_against(const ModelParams<double>& params, const TrainingBatch& batch,
                                   const LossSelector& selector, const ModelParams<double>& analytic,
                                   const GradCheckOptions& options) {
  const ModelParams<double>* ptr = &analytic;
  return compare_numeric(params, batch, std::span<const LossSelector>(&selector, 1),
                         std::span<const ModelParams<double>* const>(&ptr, 1), options)
      .front();
}

void write_config(binio::Writer& w, const ModelConfig& c) {
  w.u32(c.num_layers);
  w.u32(c.num_heads);
  w.u32(c.hidden_dim);
  w.u32(c.ff_dim);
  w.u32(c.max_positions);
  w.u32(c.vocab_size);
  w.f64(c.dropout_rate);
  w.u64(c.seed);
}

ModelConfig read_config(binio::Reader& r) {
  ModelConfig c;
  c.num_layers = r.u32();
  c.num_heads = r.u32();
  c.hidden_dim = r.u32();
  c.ff_dim = r.u32();
  c.max_positions = r.u32();
  c.vocab_size = r.u32();
  c.dropout_rate = r.f64();
  c.seed = r.u64();
  return c;
}

void write_tensors(binio::Writer& w, std::span<const NamedTensor<float>> tensors) {
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    w.str(t.name);
    w.u32(t.rank);
    if (t.rank == 1) {
      w.u32(static_cast<std::uint32_t>(t.value.size()));
    } else {
      w.u32(static_cast<std::uint32_t>(t.value.rows()));
      w.u32(static_cast<std::uint32_t>(t.value.cols()));
    }
    for (Eigen::Index i = 0; i < t.value.size(); ++i) w.f32(t.value.data()[i]);
  }
}

std::vector<NamedTensor<float>> read_tensors(binio::Reader& r) {
  const auto count = r.u32();
  std::vector<NamedTensor<float>> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor<float> t;
    t.name = r.str();
    t.rank = r.u32();
    Eigen::Index rows = 1, cols = 1;
    if (t.rank == 1) {
      cols = r.u32();
    } else if (t.rank == 2) {
      rows = r.u32();
      cols = r.u32();
    } else {
      throw Error(ErrorKind::BadFormat, "tensor '" + t.name + "' has unsupported rank " + std::to_string(t.rank));
    }
    t.value.resize(rows, cols);
    for (Eigen::Index j = 0; j < t.value.size(); ++j) t.value.data()[j] = r.f32();
    out.push_back(std::move(t));
  }
  return out;
}

std::string write_checkpoint(const Checkpoint& checkpoint) {
  binio::Writer w;
  w.magic(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  write_config(w, checkpoint.config);
  write_tensors(w, checkpoint.tensors);
  return w.take();
}

Checkpoint read_checkpoint(std::string_view bytes) {
  binio::Reader r(bytes);
  r.expect_magic(kCheckpointMagic);
  if (const auto v = r.u32(); v != kCheckpointVersion) {
    throw Error(ErrorKind::BadFormat, "unsupported PPCK version " + std::to_string(v));
  }
  Checkpoint ck;
  ck.config = read_config(r);
  ck.tensors = read_tensors(r);
  if (!r.at_end()) throw Error(ErrorKind::BadFormat, "trailing bytes after PPCK record");
  return ck;
}

Checkpoint to_checkpoint(const ModelParams<float>& params, std::span<const NamedTensor<float>> extra) {
  Checkpoint ck{params.config, params.tensors};
  ck.tensors.insert(ck.tensors.end(), extra.begin(), extra.end());
  return ck;
}

ModelParams<float> from_checkpoint(const Checkpoint& checkpoint, std::vector<NamedTensor<float>>* extra) {
  checkpoint.config.validate();
  const auto shapes = layout(checkpoint.config);
  if (checkpoint.tensors.size() < shapes.size()) {
    throw Error(ErrorKind::ConfigMismatch, "checkpoint holds fewer tensors than its config requires");
  }
  ModelParams<float> params;
  params.config = checkpoint.config;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const auto& t = checkpoint.tensors[i];
    if (t.name != shapes[i].name || t.value.rows() != shapes[i].rows || t.value.cols() != shapes[i].cols) {
      throw Error(ErrorKind::ConfigMismatch, "tensor '" + t.name + "' does not match expected '" + shapes[i].name + "'");
    }
    params.tensors.push_back(t);
  }
  if (extra != nullptr) extra->assign(checkpoint.tensors.begin() + static_cast<std::ptrdiff_t>(shapes.size()), checkpoint.tensors.end());
  return params;
}

#define PROFPRED_INSTANTIATE(T)                                                                                   \
  template struct ModelParams<T>;                                                                                 \
  template ModelParams<T> init_params<T>(const ModelConfig&);                                                     \
  template SequenceTrace<T> encode<T>(const ModelParams<T>&, std::span<const Token>, Mode, std::uint64_t);        \
  template void encode_backward<T>(const ModelParams<T>&, const SequenceTrace<T>&, const Mat<T>&, ModelParams<T>&); \
  template std::vector<ForwardOutput<T>> forward<T>(const ModelParams<T>&, const TokenBatch&, Mode, std::uint64_t); \
  template LossResult<T> backward<T>(const ModelParams<T>&, const TrainingBatch&, const LossSelector&, Mode,      \
                                     std::uint64_t);                                                              \
  template std::vector<double> loss_values<T>(const ModelParams<T>&, const TrainingBatch&,                        \
                                              std::span<const LossSelector>, Mode, std::uint64_t);

PROFPRED_INSTANTIATE(float)
PROFPRED_INSTANTIATE(double)

#undef PROFPRED_INSTANTIATE

}  // namespace profpred
