#include "profpred/losses.hpp"

#include <cmath>
#include <random>
#include <string>

#include "profpred/error.hpp"
#include "profpred/seed.hpp"

namespace profpred {

namespace {
constexpr double kSumTolerance = 1e-6;

double sum(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}
}  // namespace

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw Error(ErrorKind::ShapeMismatch, "distributions differ in length");
  for (double x : q) {
    if (!(x > 0.0)) throw Error(ErrorKind::NonPositivePrediction, "prediction has a non-positive entry");
  }
  for (double x : p) {
    if (x < 0.0) throw Error(ErrorKind::NotNormalized, "target has a negative entry");
  }
  if (std::abs(sum(p) - 1.0) > kSumTolerance || std::abs(sum(q) - 1.0) > kSumTolerance) {
    throw Error(ErrorKind::NotNormalized, "distribution does not sum to 1");
  }
  double kl = 0.0;
  for (std::size_t s = 0; s < p.size(); ++s) {
    if (p[s] > 0.0) kl += p[s] * (std::log(p[s]) - std::log(q[s]));
  }
  // Cancellation can leave a tiny negative value when p == q.
  return kl < 0.0 ? 0.0 : kl;
}

double profile_loss(std::span<const Emission> predictions, const LabelSequence& labels) {
  if (predictions.size() != labels.n()) {
    throw Error(ErrorKind::ShapeMismatch, "got " + std::to_string(predictions.size()) + " prediction rows for " +
                                              std::to_string(labels.n()) + " residues");
  }
  if (labels.n() == 0) throw Error(ErrorKind::EmptyRow, "label sequence is empty");
  double total = 0.0;
  for (std::size_t i = 0; i < labels.n(); ++i) total += kl_divergence(labels.labels[i], predictions[i]);
  return total / static_cast<double>(labels.n());
}

double profile_loss_batch(std::span<const std::vector<Emission>> predictions, std::span<const LabelSequence> labels) {
  if (predictions.size() != labels.size() || labels.empty()) {
    throw Error(ErrorKind::ShapeMismatch, "batch sizes differ or batch is empty");
  }
  double total = 0.0;
  for (std::size_t b = 0; b < labels.size(); ++b) total += profile_loss(predictions[b], labels[b]);
  return total / static_cast<double>(labels.size());
}

void MaskingPolicy::validate() const {
  if (!(mask_rate > 0.0 && mask_rate < 1.0)) throw Error(ErrorKind::InvalidConfig, "mask_rate must be in (0, 1)");
  if (replace_with_mask < 0 || replace_with_random < 0 || keep < 0 ||
      std::abs(replace_with_mask + replace_with_random + keep - 1.0) > 1e-9) {
    throw Error(ErrorKind::InvalidConfig, "masking action split must be non-negative and sum to 1");
  }
}

MaskedTokens apply_masking(std::span<const Token> tokens, const MaskingPolicy& policy, std::uint64_t stream) {
  policy.validate();
  MaskedTokens out;
  out.tokens.assign(tokens.begin(), tokens.end());
  if (tokens.empty()) return out;

  std::mt19937_64 rng(derive_seed(policy.seed, {stream}));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<Token> residue(0, kAlphabetSize - 1);

  std::vector<bool> selected(tokens.size(), false);
  bool any = false;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    selected[i] = unit(rng) < policy.mask_rate;
    any = any || selected[i];
  }
  if (!any) {
    std::uniform_int_distribution<std::size_t> pick(0, tokens.size() - 1);
    selected[pick(rng)] = true;
  }
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (!selected[i]) continue;
    out.positions.push_back(static_cast<std::uint32_t>(i));
    out.targets.push_back(tokens[i]);
    const double action = unit(rng);
    if (action < policy.replace_with_mask) {
      out.tokens[i] = tokens::kMask;
    } else if (action < policy.replace_with_mask + policy.replace_with_random) {
      out.tokens[i] = residue(rng);
    }
  }
  return out;
}

double mlm_loss(std::span<const double> logits, std::size_t vocab, std::span<const Token> targets, std::size_t n,
                MlmNormalization normalization) {
  if (targets.empty()) throw Error(ErrorKind::EmptyMask, "no masked positions");
  if (vocab == 0 || logits.size() != targets.size() * vocab) {
    throw Error(ErrorKind::ShapeMismatch, "logit count does not match masked positions");
  }
  double total = 0.0;
  for (std::size_t p = 0; p < targets.size(); ++p) {
    const auto row = logits.subspan(p * vocab, vocab);
    const auto t = static_cast<std::size_t>(targets[p]);
    if (t >= vocab) throw Error(ErrorKind::TokenOutOfRange, "target token outside vocabulary");
    double mx = row[0];
    for (double z : row) mx = std::max(mx, z);
    double z_sum = 0.0;
    for (double z : row) z_sum += std::exp(z - mx);
    total += -(row[t] - mx - std::log(z_sum));
  }
  const double denom = normalization == MlmNormalization::SequenceLength ? static_cast<double>(n)
                                                                          : static_cast<double>(targets.size());
  if (denom <= 0.0) throw Error(ErrorKind::ShapeMismatch, "sequence length must be positive");
  return total / denom;
}

JointLoss joint_loss(double mlm, double pp, double lambda) {
  return {lambda * mlm + (1.0 - lambda) * pp, lambda};
}

double calibrate_lambda(double running_mlm, double running_pp) {
  if (!(running_mlm > 0.0) || !(running_pp > 0.0)) {
    throw Error(ErrorKind::NonPositiveLoss, "running losses must be positive to balance");
  }
  return running_pp / (running_mlm + running_pp);
}

LambdaBalancer::LambdaBalancer(LambdaPolicy policy) : policy_(policy) {
  if (const auto* fixed = std::get_if<FixedLambda>(&policy_)) {
    if (!(fixed->lambda >= 0.0 && fixed->lambda <= 1.0)) throw Error(ErrorKind::InvalidConfig, "lambda must be in [0, 1]");
    state_.lambda = fixed->lambda;
  } else {
    const auto& ab = std::get<AutoBalance>(policy_);
    if (ab.window == 0) throw Error(ErrorKind::InvalidConfig, "balance window must be >= 1");
  }
}

bool LambdaBalancer::observe(double mlm, double pp) {
  double decay = 0.99;
  if (const auto* ab = std::get_if<AutoBalance>(&policy_)) decay = ab->decay;
  if (state_.observed == 0) {
    state_.running_mlm = mlm;
    state_.running_pp = pp;
  } else {
    state_.running_mlm = decay * state_.running_mlm + (1.0 - decay) * mlm;
    state_.running_pp = decay * state_.running_pp + (1.0 - decay) * pp;
  }
  ++state_.observed;
  const auto* ab = std::get_if<AutoBalance>(&policy_);
  if (ab == nullptr || state_.observed % ab->window != 0) return false;
  state_.lambda = calibrate_lambda(state_.running_mlm, state_.running_pp);
  return true;
}

}  // namespace profpred
