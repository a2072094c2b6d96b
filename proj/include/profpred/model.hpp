#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "profpred/alphabet.hpp"
#include "profpred/binary_io.hpp"
#include "profpred/losses.hpp"
#include "profpred/profile.hpp"

namespace profpred {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ModelConfig {
  std::uint32_t num_layers = 2;
  std::uint32_t num_heads = 4;
  std::uint32_t hidden_dim = 64;
  std::uint32_t ff_dim = 256;
  std::uint32_t max_positions = 512;
  std::uint32_t vocab_size = tokens::kVocabSize;
  double dropout_rate = 0.0;
  std::uint64_t seed = 0;

  static ModelConfig desk() { return {}; }
  static ModelConfig full_scale() { return {12, 12, 768, 3072, 1024, tokens::kVocabSize, 0.1, 0}; }

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <class T>
struct NamedTensor {
  std::string name;
  Mat<T> value;  // rank-1 tensors are stored as a single row
  std::uint32_t rank = 2;
};

/// Per-layer tensor slots, in storage order.
enum class LayerSlot : std::size_t {
  QWeight, QBias, KWeight, KBias, VWeight, VBias, OutWeight, OutBias,
  Norm1Scale, Norm1Offset, FfInWeight, FfInBias, FfOutWeight, FfOutBias, Norm2Scale, Norm2Offset,
  Count
};

/// All encoder and head parameters as an ordered list of named tensors.
/// The layout (names, order, shapes) is a pure function of the config.
template <class T>
struct ModelParams {
  ModelConfig config;
  std::vector<NamedTensor<T>> tensors;

  static constexpr std::size_t kTokenEmbedding = 0;
  static constexpr std::size_t kPositionEmbedding = 1;
  static constexpr std::size_t kLayerBase = 2;
  static constexpr std::size_t kPerLayer = static_cast<std::size_t>(LayerSlot::Count);

  std::size_t head_base() const { return kLayerBase + kPerLayer * config.num_layers; }

  Mat<T>& token_embedding() { return tensors[kTokenEmbedding].value; }
  const Mat<T>& token_embedding() const { return tensors[kTokenEmbedding].value; }
  Mat<T>& position_embedding() { return tensors[kPositionEmbedding].value; }
  const Mat<T>& position_embedding() const { return tensors[kPositionEmbedding].value; }
  Mat<T>& layer(std::size_t l, LayerSlot s) { return tensors[kLayerBase + kPerLayer * l + static_cast<std::size_t>(s)].value; }
  const Mat<T>& layer(std::size_t l, LayerSlot s) const {
    return tensors[kLayerBase + kPerLayer * l + static_cast<std::size_t>(s)].value;
  }
  Mat<T>& vocab_weight() { return tensors[head_base()].value; }
  const Mat<T>& vocab_weight() const { return tensors[head_base()].value; }
  Mat<T>& vocab_bias() { return tensors[head_base() + 1].value; }
  const Mat<T>& vocab_bias() const { return tensors[head_base() + 1].value; }
  Mat<T>& profile_weight() { return tensors[head_base() + 2].value; }
  const Mat<T>& profile_weight() const { return tensors[head_base() + 2].value; }
  Mat<T>& profile_bias() { return tensors[head_base() + 3].value; }
  const Mat<T>& profile_bias() const { return tensors[head_base() + 3].value; }

  std::size_t parameter_count() const;
  bool all_finite() const;

  /// Same layout, all zeros.
  ModelParams zeros_like() const;

  template <class U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    out.config = config;
    out.tensors.reserve(tensors.size());
    for (const auto& t : tensors) out.tensors.push_back({t.name, t.value.template cast<U>(), t.rank});
    return out;
  }
};

/// Deterministic initialization: N(0, 0.02) weights and embeddings, zero
/// offsets, unit layer-norm scales.
template <class T>
ModelParams<T> init_params(const ModelConfig& config);

/// Parameter count derived from the config shapes alone.
std::size_t expected_parameter_count(const ModelConfig& config);

enum class Mode { Train, Eval };

/// Rows of token ids, each padded with PAD to `width`.
struct TokenBatch {
  std::size_t width = 0;
  std::vector<std::vector<Token>> rows;

  static TokenBatch pad(const std::vector<std::vector<Token>>& sequences);
};

/// Cached activations of one sequence through the encoder trunk.
template <class T>
struct LayerTrace {
  Mat<T> input, q, k, v;
  std::vector<Mat<T>> attention;  // one L x L matrix per head
  Mat<T> context, attn_out, drop1;
  Mat<T> xhat1;
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std1;
  Mat<T> x1, ff_pre, ff_act, ff_out, drop2;
  Mat<T> xhat2;
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std2;
  Mat<T> x2;
};

template <class T>
struct SequenceTrace {
  std::vector<Token> tokens;
  std::vector<bool> key_valid;
  std::vector<LayerTrace<T>> layers;
  Mat<T> hidden;  // L x hidden_dim
};

/// Runs the trunk on one padded row. PAD keys are excluded from attention.
/// Dropout is applied only in Train mode, drawing from `dropout_seed`.
template <class T>
SequenceTrace<T> encode(const ModelParams<T>& params, std::span<const Token> tokens, Mode mode,
                        std::uint64_t dropout_seed = 0);

/// Accumulates into `grads` the parameter gradients implied by `d_hidden`.
template <class T>
void encode_backward(const ModelParams<T>& params, const SequenceTrace<T>& trace, const Mat<T>& d_hidden,
                     ModelParams<T>& grads);

template <class T>
struct ForwardOutput {
  Mat<T> hidden_states;  // L x hidden_dim
  Mat<T> vocab_logits;   // L x vocab
  Mat<T> profile_probs;  // L x 20, row-stochastic
};

template <class T>
std::vector<ForwardOutput<T>> forward(const ModelParams<T>& params, const TokenBatch& batch, Mode mode,
                                      std::uint64_t dropout_seed = 0);

/// Loss targets for one sequence: profile labels for its first n positions
/// and the masked positions with their original tokens.
struct SequenceTargets {
  std::size_t length = 0;
  std::vector<Emission> profile;
  std::vector<std::uint32_t> mask_positions;
  std::vector<Token> mask_tokens;
};

struct TrainingBatch {
  TokenBatch inputs;
  std::vector<SequenceTargets> targets;
};

enum class Objective { PP, MLM, JOINT };

struct LossSelector {
  Objective objective = Objective::PP;
  double lambda = 0.5;  // JOINT only
  MlmNormalization normalization = MlmNormalization::SequenceLength;

  double mlm_weight() const;
  double pp_weight() const;
};

template <class T>
struct LossResult {
  double loss = 0.0;
  double pp = 0.0;   // NaN when the batch carries no profile targets
  double mlm = 0.0;  // NaN when the batch carries no masked positions
  ModelParams<T> grads;
};

/// Batch loss (mean over sequences) and its exact parameter gradient.
template <class T>
LossResult<T> backward(const ModelParams<T>& params, const TrainingBatch& batch, const LossSelector& selector,
                       Mode mode = Mode::Eval, std::uint64_t dropout_seed = 0);

/// Loss values only, one per selector, from a single forward pass.
template <class T>
std::vector<double> loss_values(const ModelParams<T>& params, const TrainingBatch& batch,
                                std::span<const LossSelector> selectors, Mode mode = Mode::Eval,
                                std::uint64_t dropout_seed = 0);

struct TensorCheck {
  std::string name;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t entries_checked = 0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<TensorCheck> tensors;
  double max_rel_error = 0.0;
  bool passed = true;
};

struct GradCheckOptions {
  double tolerance = 1e-3;
  double epsilon = 1e-3;  // step is epsilon * max(1, |theta|)
  /// Relative error is |a - n| / max(|a|, |n|, abs_floor).
  double abs_floor = 1e-4;
  /// Combine central differences at h and h/2 to cancel the O(h^2) term.
  bool richardson = true;
  /// 0 checks every entry; otherwise a seeded sample of this many per tensor.
  std::size_t max_entries_per_tensor = 0;
  std::uint64_t sample_seed = 0;
};

/// Central-difference check of analytic gradients in 64-bit, one report per
/// selector. All selectors share each perturbed forward pass.
std::vector<GradCheckReport> grad_check(const ModelParams<double>& params, const TrainingBatch& batch,
                                        std::span<const LossSelector> selectors, const GradCheckOptions& options = {});

/// Checks a caller-supplied gradient against finite differences.
GradCheckReport grad_check_against(const ModelParams<double>& params, const TrainingBatch& batch,
                                   const LossSelector& selector, const ModelParams<double>& analytic,
                                   const GradCheckOptions& options = {});

// PPCK checkpoint: config plus any list of named float tensors. Model
// parameters come first; fine-tuned checkpoints append head tensors.
inline constexpr std::string_view kCheckpointMagic = "PPCK";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  std::vector<NamedTensor<float>> tensors;
};

std::string write_checkpoint(const Checkpoint& checkpoint);
Checkpoint read_checkpoint(std::string_view bytes);

void write_config(binio::Writer& w, const ModelConfig& config);
ModelConfig read_config(binio::Reader& r);
void write_tensors(binio::Writer& w, std::span<const NamedTensor<float>> tensors);
std::vector<NamedTensor<float>> read_tensors(binio::Reader& r);

Checkpoint to_checkpoint(const ModelParams<float>& params, std::span<const NamedTensor<float>> extra = {});
/// Validates names and shapes against the config. Tensors beyond the model
/// layout are returned through `extra` when non-null.
ModelParams<float> from_checkpoint(const Checkpoint& checkpoint, std::vector<NamedTensor<float>>* extra = nullptr);

}  // namespace profpred
