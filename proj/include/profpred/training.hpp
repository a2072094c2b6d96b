#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "profpred/corpus.hpp"
#include "profpred/losses.hpp"
#include "profpred/model.hpp"

namespace profpred {

struct AdamConstants {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Peak learning rates used for pre-training: 0.00025 for profile
/// prediction, 0.0001 for masked-LM and the joint objective.
double default_peak_lr(Objective objective);

struct TrainConfig {
  Objective objective = Objective::PP;
  double peak_lr = 0.0;  // 0 selects default_peak_lr(objective)
  std::uint64_t warmup_steps = 100;
  std::uint32_t max_epochs = 10;
  std::uint64_t max_steps = 0;  // 0 = bounded by epochs only
  std::size_t max_tokens_per_batch = 1024;
  AdamConstants adam;
  std::uint64_t seed = 0;
  std::uint64_t checkpoint_interval = 0;  // 0 = no periodic checkpoints
  std::uint64_t log_interval = 10;
  std::uint64_t eval_interval = 100;  // held-out evaluation cadence, 0 = never
  double heldout_fraction = 0.05;
  MaskingPolicy masking;
  LambdaPolicy lambda_policy = AutoBalance{};
  MlmNormalization mlm_normalization = MlmNormalization::SequenceLength;

  double resolved_lr() const { return peak_lr > 0.0 ? peak_lr : default_peak_lr(objective); }
  void validate() const;
};

/// Linear ramp from 0 to peak over `warmup_steps`, constant afterwards.
double lr_at_step(std::uint64_t step, std::uint64_t warmup_steps, double peak_lr);

template <class T>
struct AdamMoments {
  ModelParams<T> first;
  ModelParams<T> second;

  static AdamMoments zeros_like(const ModelParams<T>& params) { return {params.zeros_like(), params.zeros_like()}; }
};

/// Bias-corrected Adam step; `step` is the 1-based update count. Throws
/// NonFiniteGradient (naming the tensor) before touching any state.
template <class T>
void adam_update(ModelParams<T>& params, const ModelParams<T>& grads, AdamMoments<T>& moments, std::uint64_t step,
                 double lr, const AdamConstants& constants);

/// Greedy token-budget packing. With a seed the records are shuffled first
/// and the resulting batch order is shuffled again; without one the input
/// order is kept. Each batch satisfies size * max_length <= max_tokens.
std::vector<std::vector<std::size_t>> make_dynamic_batches(std::span<const std::size_t> lengths, std::size_t max_tokens,
                                                           std::optional<std::uint64_t> seed);

/// Everything needed to continue a run exactly where it stopped.
struct TrainState {
  std::uint64_t step = 0;
  std::uint32_t epoch = 0;
  std::uint64_t batch_in_epoch = 0;
  ModelParams<float> params;
  AdamMoments<float> moments;
  LambdaBalancer::State balance;
  double best_heldout = 0.0;  // +inf until the first evaluation
};

inline constexpr std::string_view kTrainStateMagic = "PPTS";
inline constexpr std::uint32_t kTrainStateVersion = 1;

std::string write_train_state(const TrainState& state);
TrainState read_train_state(std::string_view bytes);

struct StepStats {
  std::uint64_t step = 0;
  double lr = 0.0;
  double lambda = 0.0;
  double mlm = 0.0;
  double pp = 0.0;
  double joint = 0.0;
  LambdaBalancer::State balance;
};

struct HeldoutStats {
  std::uint64_t step = 0;
  double loss = 0.0;
  double pp = 0.0;
  double mlm = 0.0;
};

struct PretrainOptions {
  std::string out_dir;  // empty keeps everything in memory
  std::function<void(const StepStats&)> on_step;
  std::function<void(const HeldoutStats&)> on_heldout;
};

struct PretrainResult {
  TrainState state;
  std::string metrics_log;
  std::vector<HeldoutStats> heldout;
};

/// Splits records into train / held-out by id hash.
struct CorpusSplit {
  std::vector<PretrainRecord> train;
  std::vector<PretrainRecord> heldout;
};
CorpusSplit split_corpus(std::vector<PretrainRecord> records, double heldout_fraction);

/// Builds the model inputs and loss targets for a set of records. Masking
/// streams are keyed by (epoch, record index) so every batch is reproducible.
TrainingBatch make_training_batch(std::span<const PretrainRecord> records, std::span<const std::size_t> indices,
                                  const TrainConfig& config, std::uint32_t epoch);

/// Mean held-out loss for the configured objective, evaluated without
/// dropout in token-budget chunks.
HeldoutStats evaluate_heldout(const ModelParams<float>& params, std::span<const PretrainRecord> heldout,
                              const TrainConfig& config, double lambda);

/// Fresh state for a run.
TrainState initial_train_state(const ModelConfig& model_config);

/// Runs (or resumes) pre-training from `state` until the epoch or step budget
/// is exhausted. Writes metrics.tsv, heldout.tsv, best.ppck, final.ppck and
/// periodic state-<step>.ppts / ckpt-<step>.ppck into out_dir when set.
PretrainResult pretrain(const CorpusSplit& corpus, const TrainConfig& config, TrainState state,
                        const PretrainOptions& options = {});

std::string format_metrics_line(const StepStats& s);

}  // namespace profpred
