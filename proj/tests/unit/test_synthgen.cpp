#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "profpred/error.hpp"
#include "profpred/losses.hpp"
#include "profpred/synthgen.hpp"

using namespace profpred;

namespace {

Emission one_hot(int a) {
  Emission e{};
  e[a] = 1.0;
  return e;
}

std::vector<GroundTruthFamily> families(std::size_t count, std::size_t k, IndelRates rates = {0.05, 0.05, 0.5}) {
  std::vector<GroundTruthFamily> out;
  for (std::size_t f = 0; f < count; ++f) {
    FamilyOptions opt;
    opt.family_id = "fam" + std::to_string(f);
    opt.couplings = sample_couplings(12, 3, 6, 50 + f);
    out.push_back(sample_family(sample_profile(12, 0.3, 10 + f), k, rates, 20 + f, opt));
  }
  return out;
}

}  // namespace

TEST(SampleProfile, RowsNormalizedAndDeterministic) {
  const auto a = sample_profile(30, 1.0, 5);
  for (const auto& row : a) {
    double s = 0.0;
    for (double p : row) {
      EXPECT_GE(p, 0.0);
      s += p;
    }
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
  EXPECT_EQ(sample_profile(30, 1.0, 5), a);
  EXPECT_NE(sample_profile(30, 1.0, 6), a);
  EXPECT_THROW(sample_profile(3, 0.0, 1), Error);
}

TEST(SampleProfile, SmallConcentrationNearOneHot) {
  const auto rows = sample_profile(200, 1e-3, 8);
  int peaked = 0;
  for (const auto& row : rows) peaked += *std::max_element(row.begin(), row.end()) > 0.95;
  EXPECT_GE(peaked, 190);
}

TEST(SampleFamily, NoIndelsReproducesConsensus) {
  std::vector<Emission> truth;
  for (int j = 0; j < 8; ++j) truth.push_back(one_hot((j * 7) % 20));
  const auto fam = sample_family(truth, 10, {0.0, 0.0, 0.5}, 3);
  EXPECT_EQ(fam.msa.m(), 8u);
  EXPECT_EQ(fam.classes.match_count, 8u);
  for (const auto& row : fam.msa.rows()) EXPECT_EQ(row, fam.msa.row(0));
  EXPECT_EQ(fam.msa.row(0).find('-'), std::string::npos);
}

TEST(SampleFamily, EstimatorRecoversTruth) {
  const auto truth = sample_profile(12, 0.3, 77);
  FamilyOptions opt;
  opt.label_pseudocount = 0.1;
  const auto fam = sample_family(truth, 200, {0.0, 0.0, 0.5}, 78, opt);
  ASSERT_EQ(fam.profile.length(), 12u);
  double total = 0.0;
  for (std::size_t j = 0; j < 12; ++j) total += kl_divergence(truth[j], fam.profile.match_emissions[j]);
  EXPECT_LT(total / 12.0, 0.05);
}

TEST(SampleFamily, IndelsProduceInsertsAndDeletions) {
  const auto fams = families(1, 100, {0.1, 0.1, 0.5});
  const auto& fam = fams[0];
  EXPECT_GT(fam.msa.m(), 12u);
  EXPECT_EQ(fam.labels.size(), 100u);
  bool saw_insert = false;
  for (std::size_t r = 0; r < fam.msa.k(); ++r) {
    EXPECT_EQ(fam.residue_nodes[r].size(), fam.labels[r].n());
    for (int node : fam.residue_nodes[r]) saw_insert |= node < 0;
  }
  EXPECT_TRUE(saw_insert);
}

TEST(Tasks, TokenClassOneHotAllConserved) {
  std::vector<GroundTruthFamily> fams;
  for (int f = 0; f < 2; ++f) {
    std::vector<Emission> truth;
    for (int j = 0; j < 6; ++j) truth.push_back(one_hot((j + f) % 20));
    FamilyOptions opt;
    opt.family_id = "f" + std::to_string(f);
    fams.push_back(sample_family(truth, 10, {0.0, 0.0, 0.5}, 4 + f, opt));
  }
  const auto ds = make_downstream_task(fams, TaskShape::TokenClass, 1);
  for (const auto& ex : ds.examples)
    for (int label : ex.token_labels) EXPECT_EQ(label, 1);
}

TEST(Tasks, SeqClassSplitDisjointAndCovering) {
  const auto fams = families(4, 30);
  const auto ds = make_downstream_task(fams, TaskShape::SeqClass, 2);
  EXPECT_EQ(ds.num_classes, 4);
  std::set<std::string> train, test;
  std::set<int> train_cls, test_cls;
  for (const auto& ex : ds.examples) {
    (ex.split == Split::Train ? train : test).insert(ex.id);
    (ex.split == Split::Train ? train_cls : test_cls).insert(ex.class_label);
  }
  for (const auto& id : test) EXPECT_EQ(train.count(id), 0u);
  EXPECT_EQ(train_cls.size(), 4u);
  EXPECT_EQ(test_cls.size(), 4u);
  EXPECT_NEAR(static_cast<double>(test.size()) / ds.examples.size(), 0.2, 0.03);
  EXPECT_THROW(make_downstream_task({fams[0]}, TaskShape::SeqClass, 2), Error);
}

// Independent scorer: walk the gapped row against the generating nodes.
TEST(Tasks, RegressionScoresMatchIndependentScorer) {
  const auto fams = families(2, 20);
  const auto ds = make_downstream_task(fams, TaskShape::SeqRegression, 3);
  std::size_t checked = 0;
  for (const auto& ex : ds.examples) {
    const auto& fam = fams[ex.family];
    std::size_t row = 0;
    while (fam.msa.id(row) != ex.id) ++row;
    const auto seq = fam.msa.degap(row).residues;
    double total = 0.0;
    for (std::size_t i = 0; i < seq.size(); ++i) {
      const int node = fam.residue_nodes[row][i];
      total += node < 0 ? std::log(1.0 / 20.0) : std::log(fam.true_emissions[node][*residue_index(seq[i])]);
    }
    EXPECT_NEAR(ex.score, total / static_cast<double>(seq.size()), 1e-6);
    ++checked;
  }
  EXPECT_EQ(checked, 40u);
}

TEST(Tasks, ContactPairsRespectSeparation) {
  const auto fams = families(2, 20, {0.0, 0.0, 0.5});
  const auto ds = make_downstream_task(fams, TaskShape::Contact, 4);
  std::size_t pairs = 0;
  for (const auto& ex : ds.examples) {
    for (auto [i, j] : ex.contacts) {
      EXPECT_LT(i, j);
      EXPECT_GE(j - i, 6u);
      ++pairs;
    }
  }
  EXPECT_GT(pairs, 0u);
}

TEST(Manifest, RoundTrip) {
  const auto fams = families(3, 15);
  for (auto shape : {TaskShape::TokenClass, TaskShape::SeqClass, TaskShape::SeqRegression, TaskShape::Contact}) {
    const auto ds = make_downstream_task(fams, shape, 5);
    std::unordered_map<std::string, std::string> seqs;
    for (const auto& f : fams)
      for (std::size_t r = 0; r < f.msa.k(); ++r) seqs[f.msa.id(r)] = f.msa.degap(r).residues;
    const auto text = write_manifest(ds);
    const auto back = read_manifest(text, seqs);
    EXPECT_EQ(back.shape, shape);
    ASSERT_EQ(back.examples.size(), ds.examples.size());
    for (std::size_t i = 0; i < ds.examples.size(); ++i) {
      EXPECT_EQ(back.examples[i].tokens, ds.examples[i].tokens);
      EXPECT_EQ(back.examples[i].split, ds.examples[i].split);
      EXPECT_EQ(back.examples[i].token_labels, ds.examples[i].token_labels);
      EXPECT_EQ(back.examples[i].contacts, ds.examples[i].contacts);
      EXPECT_EQ(back.examples[i].score, ds.examples[i].score);
    }
    EXPECT_EQ(write_manifest(back), text);
  }
}
