#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "profpred/error.hpp"
#include "profpred/losses.hpp"

using namespace profpred;

namespace {

Emission uniform() {
  Emission e;
  e.fill(0.05);
  return e;
}

Emission one_hot(int a) {
  Emission e{};
  e[a] = 1.0;
  return e;
}

}  // namespace

TEST(Kl, Examples) {
  const auto u = uniform();
  EXPECT_EQ(kl_divergence(u, u), 0.0);
  EXPECT_NEAR(kl_divergence(one_hot(3), u), std::log(20.0), 1e-12);

  Emission p{}, q{};
  p[0] = p[1] = 0.5;
  q[0] = q[1] = 0.25;
  for (int a = 2; a < 20; ++a) q[a] = 0.5 / 18;
  EXPECT_NEAR(kl_divergence(p, q), std::log(2.0), 1e-12);
}

TEST(Kl, Errors) {
  auto q = uniform();
  q[0] = 0.0;
  q[1] = 0.1;
  try {
    kl_divergence(uniform(), q);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::NonPositivePrediction);
    EXPECT_EQ(e.category(), ErrorCategory::Numerical);
  }
  auto bad = uniform();
  bad[0] += 0.01;
  EXPECT_THROW(kl_divergence(bad, uniform()), Error);
}

TEST(Kl, NonNegativeOnRandomPairs) {
  std::mt19937_64 rng(11);
  std::gamma_distribution<double> g(0.3, 1.0);
  for (int t = 0; t < 2000; ++t) {
    Emission p, q;
    double sp = 0, sq = 0;
    for (int a = 0; a < 20; ++a) {
      p[a] = g(rng);
      q[a] = g(rng) + 1e-12;
      sp += p[a];
      sq += q[a];
    }
    for (int a = 0; a < 20; ++a) {
      p[a] /= sp;
      q[a] /= sq;
    }
    EXPECT_GE(kl_divergence(p, q), 0.0);
    EXPECT_LT(kl_divergence(p, p), 1e-12);
  }
}

TEST(ProfileLoss, Examples) {
  LabelSequence lab;
  lab.labels = {one_hot(0), one_hot(5)};
  lab.states = {ResidueState::Match, ResidueState::Match};
  const auto u = uniform();
  LabelSequence smooth = lab;
  smooth.labels = {u, u};
  EXPECT_EQ(profile_loss(std::vector<Emission>{u, u}, smooth), 0.0);

  EXPECT_NEAR(profile_loss(std::vector<Emission>{u, u}, lab), std::log(20.0), 1e-12);

  Emission p{}, q{};
  p[0] = p[1] = 0.5;
  q[0] = q[1] = 0.25;
  for (int a = 2; a < 20; ++a) q[a] = 0.5 / 18;
  LabelSequence two;
  two.labels = {q, p};
  two.states = lab.states;
  EXPECT_NEAR(profile_loss(std::vector<Emission>{q, q}, two), std::log(2.0) / 2, 1e-12);

  EXPECT_THROW(profile_loss(std::vector<Emission>{u}, lab), Error);
}

TEST(Masking, Statistics) {
  std::vector<Token> toks(100000);
  for (std::size_t i = 0; i < toks.size(); ++i) toks[i] = static_cast<Token>(i % 20);
  MaskingPolicy policy;
  policy.seed = 42;
  const auto out = apply_masking(toks, policy, 0);
  const double frac = static_cast<double>(out.positions.size()) / toks.size();
  EXPECT_NEAR(frac, 0.15, 0.005);
  std::size_t masked = 0, random = 0, kept = 0;
  for (std::size_t i = 0; i < out.positions.size(); ++i) {
    const auto pos = out.positions[i];
    EXPECT_EQ(out.targets[i], toks[pos]);
    if (out.tokens[pos] == tokens::kMask) ++masked;
    else if (out.tokens[pos] == toks[pos]) ++kept;
    else ++random;
  }
  const double sel = static_cast<double>(out.positions.size());
  EXPECT_NEAR(masked / sel, 0.8, 0.02);
  // A random replacement can coincide with the original token (1 in 20).
  EXPECT_NEAR((random + kept) / sel, 0.2, 0.02);
  EXPECT_NEAR(random / sel, 0.1 * 19.0 / 20.0, 0.02);

  const auto again = apply_masking(toks, policy, 0);
  EXPECT_EQ(again.tokens, out.tokens);
  EXPECT_EQ(again.positions, out.positions);
  EXPECT_NE(apply_masking(toks, policy, 1).positions, out.positions);
}

TEST(Masking, ForcesOnePosition) {
  MaskingPolicy policy;
  policy.mask_rate = 1e-9;
  const std::vector<Token> toks{1, 2, 3};
  const auto out = apply_masking(toks, policy, 0);
  EXPECT_EQ(out.positions.size(), 1u);
}

TEST(Masking, InvalidPolicy) {
  MaskingPolicy policy;
  policy.keep = 0.3;
  EXPECT_THROW(policy.validate(), Error);
}

TEST(Mlm, Examples) {
  std::vector<double> logits(25, 0.0);
  logits[4] = 1e6;
  const std::vector<Token> target{4};
  EXPECT_NEAR(mlm_loss(logits, 25, target, 1), 0.0, 1e-12);

  const std::vector<double> flat(25 * 3, 0.7);
  const std::vector<Token> three{1, 2, 3};
  EXPECT_NEAR(mlm_loss(flat, 25, three, 3), std::log(25.0), 1e-12);

  std::vector<double> half(25, -1e6);
  half[0] = half[1] = 0.0;
  EXPECT_NEAR(mlm_loss(half, 25, std::vector<Token>{0}, 1), std::log(2.0), 1e-12);

  EXPECT_NEAR(mlm_loss(flat, 25, three, 6), std::log(25.0) / 2, 1e-12);
  EXPECT_NEAR(mlm_loss(flat, 25, three, 6, MlmNormalization::MaskCount), std::log(25.0), 1e-12);
  EXPECT_THROW(mlm_loss({}, 25, {}, 3), Error);
}

TEST(Joint, Degeneracies) {
  EXPECT_EQ(joint_loss(3.0, 1.0, 1.0).value, 3.0);
  EXPECT_EQ(joint_loss(3.0, 1.0, 0.0).value, 1.0);
  EXPECT_DOUBLE_EQ(joint_loss(3.0, 1.0, 0.25).value, 1.5);
}

TEST(Calibrate, BalancesWeightedLosses) {
  const double l = calibrate_lambda(3.0, 1.0);
  EXPECT_DOUBLE_EQ(l, 0.25);
  EXPECT_NEAR(l * 3.0, (1 - l) * 1.0, 1e-12);
  EXPECT_DOUBLE_EQ(calibrate_lambda(2.0, 2.0), 0.5);
  EXPECT_LT(calibrate_lambda(1.0, 1e-12), 1e-11);
  EXPECT_THROW(calibrate_lambda(0.0, 1.0), Error);
}

TEST(Balancer, RecalibratesPerWindow) {
  LambdaBalancer b(AutoBalance{4, 0.99});
  EXPECT_EQ(b.lambda(), 0.5);
  for (int i = 0; i < 3; ++i) EXPECT_FALSE(b.observe(3.0, 1.0));
  EXPECT_EQ(b.lambda(), 0.5);
  EXPECT_TRUE(b.observe(3.0, 1.0));
  EXPECT_NEAR(b.lambda(), 0.25, 1e-12);

  LambdaBalancer fixed(FixedLambda{0.3});
  for (int i = 0; i < 300; ++i) fixed.observe(3.0, 1.0);
  EXPECT_EQ(fixed.lambda(), 0.3);
}
