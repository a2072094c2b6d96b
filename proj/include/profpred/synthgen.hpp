#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "profpred/labels.hpp"
#include "profpred/msa.hpp"
#include "profpred/profile.hpp"

namespace profpred {

/// Draws `length` rows from a symmetric Dirichlet with the given
/// concentration. Sampling happens in log space so very small
/// concentrations still produce valid (near one-hot) rows.
std::vector<Emission> sample_profile(std::size_t length, double concentration, std::uint64_t seed);

struct IndelRates {
  double insert_open = 0.0;
  double delete_open = 0.0;
  double insert_extend = 0.5;  // geometric continuation of an insert run
};

/// Two match nodes whose emissions are coupled: when both are emitted, the
/// second copies a fixed permutation of the first with probability
/// `strength`.
struct Coupling {
  std::uint32_t first = 0;  // 0-based nodes, first < second
  std::uint32_t second = 0;
  double strength = 0.9;
};

struct FamilyOptions {
  std::string family_id = "fam";
  std::vector<Coupling> couplings;
  double label_pseudocount = 0.1;
  double label_symfrac = 0.5;
};

/// A sampled family together with the generative truth behind it.
struct GroundTruthFamily {
  std::string id;
  std::vector<Emission> true_emissions;
  IndelRates rates;
  std::vector<Coupling> couplings;
  Msa msa;
  /// Per row, per residue: 0-based generating node, or -1 for inserted residues.
  std::vector<std::vector<int>> residue_nodes;
  ColumnClasses classes;
  ProfileHmm profile;  // estimated from the sampled alignment
  std::vector<LabelSequence> labels;
};

GroundTruthFamily sample_family(const std::vector<Emission>& true_emissions, std::size_t k, const IndelRates& rates,
                                std::uint64_t seed, const FamilyOptions& options = {});

/// Random coupled node pairs with separation >= min_separation.
std::vector<Coupling> sample_couplings(std::size_t length, std::size_t count, std::size_t min_separation,
                                       std::uint64_t seed);

enum class TaskShape { TokenClass, SeqRegression, SeqClass, Contact };

std::string_view to_string(TaskShape shape);
TaskShape task_shape_from_string(std::string_view name);

enum class Split : std::uint8_t { Train, Test };

struct DownstreamExample {
  std::string id;
  std::size_t family = 0;
  std::vector<Token> tokens;
  Split split = Split::Train;
  std::vector<int> token_labels;  // TokenClass: 1 = conserved column
  int class_label = 0;            // SeqClass: family index
  double score = 0.0;             // SeqRegression
  std::vector<std::pair<std::uint32_t, std::uint32_t>> contacts;  // Contact: 0-based i < j
};

struct DownstreamDataset {
  TaskShape shape = TaskShape::TokenClass;
  int num_classes = 2;
  std::vector<DownstreamExample> examples;

  std::size_t count(Split split) const;
};

struct TaskOptions {
  double test_fraction = 0.2;
  double conserved_threshold = 0.7;
  std::size_t min_separation = 6;
};

DownstreamDataset make_downstream_task(const std::vector<GroundTruthFamily>& families, TaskShape shape,
                                       std::uint64_t seed, const TaskOptions& options = {});

/// Mean log-probability of a row's residues under its generating process:
/// true match emissions for match residues, uniform for inserts.
double sequence_score(const GroundTruthFamily& family, std::size_t row);

/// Tab-separated manifest: `#task` / `#classes` header lines, then
/// id, split, labels per example.
std::string write_manifest(const DownstreamDataset& dataset);

/// Rebuilds a dataset from a manifest, resolving tokens by id.
DownstreamDataset read_manifest(std::string_view text, const std::unordered_map<std::string, std::string>& sequences);

}  // namespace profpred
