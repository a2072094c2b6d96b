#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <variant>
#include <vector>

#include "profpred/alphabet.hpp"
#include "profpred/labels.hpp"

namespace profpred {

/// KL(p || q) over two probability vectors of equal length, with
/// 0 * log 0 = 0. q must be strictly positive; both must sum to 1 within 1e-6.
double kl_divergence(std::span<const double> p, std::span<const double> q);

/// Mean over residues of KL(label_i || prediction_i).
double profile_loss(std::span<const Emission> predictions, const LabelSequence& labels);

/// Mean of per-sequence profile losses.
double profile_loss_batch(std::span<const std::vector<Emission>> predictions, std::span<const LabelSequence> labels);

struct MaskingPolicy {
  double mask_rate = 0.15;
  double replace_with_mask = 0.8;
  double replace_with_random = 0.1;
  double keep = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
};

struct MaskedTokens {
  std::vector<Token> tokens;              // corrupted copy of the input
  std::vector<std::uint32_t> positions;   // selected positions, increasing
  std::vector<Token> targets;             // original tokens at those positions
};

/// Selects each position with probability mask_rate and corrupts it per the
/// action split. A draw that selects nothing forces one uniformly chosen
/// position. Pure in (policy.seed, stream, tokens); callers pass the
/// sequence index (folded with the epoch) as `stream`.
MaskedTokens apply_masking(std::span<const Token> tokens, const MaskingPolicy& policy, std::uint64_t stream);

enum class MlmNormalization { SequenceLength, MaskCount };

/// Sum over masked positions of -log softmax(logits)[target], divided by the
/// sequence length n (or by the number of masked positions).
/// `logits` holds one row of `vocab` values per masked position.
double mlm_loss(std::span<const double> logits, std::size_t vocab, std::span<const Token> targets, std::size_t n,
                MlmNormalization normalization = MlmNormalization::SequenceLength);

struct JointLoss {
  double value;
  double lambda;
};

JointLoss joint_loss(double mlm, double pp, double lambda);

/// Closed-form balance: lambda * mlm == (1 - lambda) * pp.
double calibrate_lambda(double running_mlm, double running_pp);

struct FixedLambda {
  double lambda = 0.5;
};
struct AutoBalance {
  std::uint64_t window = 100;
  double decay = 0.99;
};
using LambdaPolicy = std::variant<FixedLambda, AutoBalance>;

/// Owns the running loss means for the joint objective. Under AutoBalance the
/// weight starts at 0.5 and is recomputed from the running means at the end of
/// every window, staying frozen in between.
class LambdaBalancer {
 public:
  struct State {
    double lambda = 0.5;
    double running_mlm = 0.0;
    double running_pp = 0.0;
    std::uint64_t observed = 0;
  };

  explicit LambdaBalancer(LambdaPolicy policy = AutoBalance{});

  double lambda() const noexcept { return state_.lambda; }
  const State& state() const noexcept { return state_; }
  void restore(const State& state) { state_ = state; }

  /// Folds one step's losses into the running means. Returns true when the
  /// weight was recalibrated.
  bool observe(double mlm, double pp);

 private:
  LambdaPolicy policy_;
  State state_;
};

}  // namespace profpred
