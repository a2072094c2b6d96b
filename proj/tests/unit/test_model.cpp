#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "profpred/error.hpp"
#include "profpred/model.hpp"

using namespace profpred;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.num_layers = 2;
  c.num_heads = 2;
  c.hidden_dim = 8;
  c.ff_dim = 12;
  c.max_positions = 12;
  c.seed = 3;
  return c;
}

Emission random_distribution(std::mt19937_64& rng) {
  std::gamma_distribution<double> g(0.5, 1.0);
  Emission e;
  double s = 0.0;
  for (auto& x : e) s += (x = g(rng) + 1e-3);
  for (auto& x : e) x /= s;
  return e;
}

TrainingBatch make_batch(const std::vector<std::vector<Token>>& seqs, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  TrainingBatch b;
  MaskingPolicy policy;
  policy.seed = seed;
  std::vector<std::vector<Token>> inputs;
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    const auto m = apply_masking(seqs[s], policy, s);
    SequenceTargets t;
    t.length = seqs[s].size();
    for (std::size_t i = 0; i < t.length; ++i) t.profile.push_back(random_distribution(rng));
    t.mask_positions = m.positions;
    t.mask_tokens = m.targets;
    inputs.push_back(m.tokens);
    b.targets.push_back(std::move(t));
  }
  b.inputs = TokenBatch::pad(inputs);
  return b;
}

std::vector<std::vector<Token>> sample_sequences() { return {{0, 5, 9, 3, 17, 2}, {11, 4, 4, 19}, {7, 1, 13, 8, 6, 12, 10, 15}}; }

}  // namespace

TEST(ModelConfig, Validation) {
  ModelConfig c;
  c.hidden_dim = 65;
  EXPECT_THROW(c.validate(), Error);
  EXPECT_NO_THROW(ModelConfig::desk().validate());
  EXPECT_NO_THROW(ModelConfig::full_scale().validate());
}

TEST(ModelParams, DeskParameterCount) {
  // Embeddings 25*64 + 512*64; per layer 4*(64*64+64) + 4*64 + (64*256+256) + (256*64+64);
  // heads 64*25+25 and 64*20+20.
  const std::size_t expected = (1600 + 32768) + 2 * (16640 + 256 + 16640 + 16448) + (1625 + 1300);
  EXPECT_EQ(expected_parameter_count(ModelConfig::desk()), expected);
  EXPECT_EQ(init_params<float>(ModelConfig::desk()).parameter_count(), expected);
}

TEST(ModelParams, SeededInitIsDeterministic) {
  const auto a = init_params<float>(tiny());
  const auto b = init_params<float>(tiny());
  ASSERT_EQ(a.tensors.size(), b.tensors.size());
  for (std::size_t i = 0; i < a.tensors.size(); ++i) {
    EXPECT_EQ(a.tensors[i].name, b.tensors[i].name);
    EXPECT_TRUE(a.tensors[i].value == b.tensors[i].value);
  }
  auto c = tiny();
  c.seed = 4;
  EXPECT_FALSE(init_params<float>(c).tensors[0].value == a.tensors[0].value);
}

TEST(Forward, AttentionRowsNormalized) {
  const auto p = init_params<double>(tiny());
  const std::vector<Token> toks{3, 4, 5, tokens::kPad, tokens::kPad};
  const auto tr = encode(p, std::span<const Token>(toks), Mode::Eval);
  for (const auto& layer : tr.layers) {
    for (const auto& a : layer.attention) {
      for (Eigen::Index i = 0; i < a.rows(); ++i) {
        EXPECT_NEAR(a.row(i).sum(), 1.0, 1e-6);
        EXPECT_EQ(a(i, 3), 0.0);
        EXPECT_EQ(a(i, 4), 0.0);
      }
    }
  }
}

TEST(Forward, PaddingInvariance) {
  const auto p = init_params<float>(tiny());
  const std::vector<Token> seq{2, 9, 14, 1, 0};
  const auto plain = forward(p, TokenBatch::pad({seq}), Mode::Eval);
  TokenBatch padded = TokenBatch::pad({seq, std::vector<Token>(9, 3)});
  const auto out = forward(p, padded, Mode::Eval);
  for (std::size_t i = 0; i < seq.size(); ++i) {
    for (Eigen::Index d = 0; d < plain[0].hidden_states.cols(); ++d) {
      EXPECT_NEAR(plain[0].hidden_states(i, d), out[0].hidden_states(i, d), 1e-5);
    }
  }
}

TEST(Forward, IdenticalRowsIdenticalOutputs) {
  const auto p = init_params<float>(tiny());
  const std::vector<Token> seq{2, 9, 14, 1};
  const auto out = forward(p, TokenBatch::pad({seq, seq}), Mode::Eval);
  EXPECT_TRUE(out[0].profile_probs == out[1].profile_probs);
  for (Eigen::Index i = 0; i < out[0].profile_probs.rows(); ++i) EXPECT_NEAR(out[0].profile_probs.row(i).sum(), 1.0, 1e-5);
}

TEST(Forward, InputValidation) {
  const auto p = init_params<float>(tiny());
  EXPECT_THROW(forward(p, TokenBatch::pad({std::vector<Token>(13, 1)}), Mode::Eval), Error);
  EXPECT_THROW(forward(p, TokenBatch::pad({{1, 30}}), Mode::Eval), Error);
}

TEST(Backward, JointWithUnitLambdaEqualsMlm) {
  const auto p = init_params<float>(tiny());
  const auto batch = make_batch(sample_sequences(), 5);
  const auto mlm = backward(p, batch, {Objective::MLM});
  const auto joint = backward(p, batch, {Objective::JOINT, 1.0});
  EXPECT_EQ(mlm.loss, joint.loss);
  for (std::size_t i = 0; i < mlm.grads.tensors.size(); ++i) {
    EXPECT_TRUE(mlm.grads.tensors[i].value == joint.grads.tensors[i].value) << mlm.grads.tensors[i].name;
  }
}

TEST(Backward, LossValuesAgreeWithBackward) {
  const auto p = init_params<double>(tiny());
  const auto batch = make_batch(sample_sequences(), 6);
  const std::vector<LossSelector> sel{{Objective::PP}, {Objective::MLM}, {Objective::JOINT, 0.3}};
  const auto values = loss_values(p, batch, std::span<const LossSelector>(sel));
  for (std::size_t s = 0; s < sel.size(); ++s) EXPECT_NEAR(values[s], backward(p, batch, sel[s]).loss, 1e-12);
  const auto r = backward(p, batch, sel[2]);
  EXPECT_NEAR(r.loss, 0.3 * r.mlm + 0.7 * r.pp, 1e-12);
}

TEST(GradCheck, TinyConfigAllObjectives) {
  const auto p = init_params<double>(tiny());
  const auto batch = make_batch(sample_sequences(), 9);
  const std::vector<LossSelector> sel{{Objective::PP}, {Objective::MLM}, {Objective::JOINT, 0.4}};
  const auto reports = grad_check(p, batch, std::span<const LossSelector>(sel));
  ASSERT_EQ(reports.size(), 3u);
  for (const auto& r : reports) {
    EXPECT_TRUE(r.passed) << "max rel error " << r.max_rel_error;
    EXPECT_LT(r.max_rel_error, 1e-3);
    for (const auto& t : r.tensors) EXPECT_GT(t.entries_checked, 0u) << t.name;
  }
}

TEST(GradCheck, CorruptedGradientIsReported) {
  const auto p = init_params<double>(tiny());
  const auto batch = make_batch(sample_sequences(), 9);
  const LossSelector sel{Objective::PP};
  auto analytic = backward(p, batch, sel).grads;
  // Zero the largest entry of one tensor.
  const std::size_t victim = ModelParams<double>::kLayerBase + static_cast<std::size_t>(LayerSlot::FfInWeight);
  Eigen::Index r, c;
  analytic.tensors[victim].value.cwiseAbs().maxCoeff(&r, &c);
  analytic.tensors[victim].value(r, c) = 0.0;
  const auto report = grad_check_against(p, batch, sel, analytic);
  EXPECT_FALSE(report.passed);
  for (const auto& t : report.tensors) EXPECT_EQ(t.passed, t.name != analytic.tensors[victim].name) << t.name;
}

TEST(Checkpoint, RoundTripBitExact) {
  const auto p = init_params<float>(tiny());
  const auto bytes = write_checkpoint(to_checkpoint(p));
  EXPECT_EQ(bytes.substr(0, 4), "PPCK");
  const auto back = from_checkpoint(read_checkpoint(bytes));
  EXPECT_EQ(back.config, p.config);
  EXPECT_EQ(write_checkpoint(to_checkpoint(back)), bytes);
  EXPECT_THROW(read_checkpoint(bytes.substr(0, bytes.size() - 2)), Error);
}

TEST(Checkpoint, ShapeMismatchRejected) {
  auto ck = to_checkpoint(init_params<float>(tiny()));
  ck.config.hidden_dim = 16;
  EXPECT_THROW(from_checkpoint(ck), Error);
}
