#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "profpred/model.hpp"
#include "profpred/synthgen.hpp"
#include "profpred/training.hpp"

namespace profpred {

/// Spearman rank correlation with average ranks for ties. Throws
/// LengthMismatch, or DegenerateInput when either side is constant.
double spearman(std::span<const double> predictions, std::span<const double> targets);

/// Fraction of valid positions where prediction == target.
double token_accuracy(std::span<const int> predictions, std::span<const int> targets, std::span<const bool> valid);

/// Precision of the top ceil(L/5) pairs with |i - j| >= min_separation,
/// ranked by score (ties by (i, j)). `scores` is L x L row-major; only
/// i < j entries are read. Contacts are 0-based (i, j) with i < j.
double contact_precision_at_l5(std::span<const double> scores,
                               const std::set<std::pair<std::uint32_t, std::uint32_t>>& contacts, std::size_t length,
                               std::size_t min_separation = 6);

/// Task head tensors, named "task.<shape>.weight" / "task.<shape>.bias".
/// Contact scores use the symmetric pair feature [h_i * h_j, |h_i - h_j|].
std::vector<NamedTensor<float>> init_task_head(TaskShape shape, std::size_t hidden_dim, int num_classes,
                                               std::uint64_t seed);

/// Recovers the task shape from a fine-tuned checkpoint's extra tensors.
std::optional<TaskShape> head_shape(std::span<const NamedTensor<float>> extra);

/// Trunk parameters with the task head appended as the last two tensors.
struct FinetuneModel {
  ModelParams<float> params;
  TaskShape shape = TaskShape::TokenClass;
  int num_classes = 2;
  double target_mean = 0.0;  // SeqRegression target standardization
  double target_scale = 1.0;

  const Mat<float>& head_weight() const { return params.tensors[params.tensors.size() - 2].value; }
  const Mat<float>& head_bias() const { return params.tensors.back().value; }
};

struct EvalReport {
  TaskShape shape = TaskShape::TokenClass;
  std::string metric;
  double value = 0.0;        // on the test split
  double train_value = 0.0;  // same metric on the train split
  std::size_t train_size = 0;
  std::size_t test_size = 0;
  std::string checkpoint_id;
  std::uint64_t seed = 0;
};

std::string_view metric_name(TaskShape shape);

/// One tab-separated line (no trailing newline).
std::string format_report(const EvalReport& report);

struct FinetuneConfig {
  std::uint64_t steps = 200;
  double peak_lr = 0.0001;
  std::uint64_t warmup_steps = 0;  // 0 = 10% of the budget (at least 1)
  std::size_t max_tokens_per_batch = 512;
  AdamConstants adam;
  std::uint64_t seed = 0;
  std::size_t min_separation = 6;
  std::string checkpoint_id = "random-init";
};

struct FinetuneResult {
  FinetuneModel model;
  EvalReport report;
};

/// Attaches a fresh head to `trunk` for the dataset's task.
FinetuneModel make_finetune_model(const ModelParams<float>& trunk, const DownstreamDataset& dataset,
                                  std::uint64_t seed);

/// Batch loss and gradients for the task head plus the whole trunk.
std::pair<double, ModelParams<float>> task_backward(const FinetuneModel& model,
                                                    std::span<const DownstreamExample* const> batch,
                                                    std::size_t min_separation, Mode mode, std::uint64_t dropout_seed);

/// Full-model fine-tuning on the train split, then evaluation on both
/// splits. Deterministic given the config seed.
FinetuneResult finetune(const ModelParams<float>& trunk, const DownstreamDataset& dataset,
                        const FinetuneConfig& config);

/// Metric of `model` on one split.
double evaluate_split(const FinetuneModel& model, const DownstreamDataset& dataset, Split split,
                      std::size_t min_separation = 6);

EvalReport evaluate(const FinetuneModel& model, const DownstreamDataset& dataset, const std::string& checkpoint_id,
                    std::uint64_t seed, std::size_t min_separation = 6);

/// Checkpoint holding trunk, head and regression scaling.
Checkpoint to_checkpoint(const FinetuneModel& model);
FinetuneModel finetune_model_from_checkpoint(const Checkpoint& checkpoint);

}  // namespace profpred
