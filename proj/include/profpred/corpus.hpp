#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "profpred/alphabet.hpp"
#include "profpred/labels.hpp"
#include "profpred/msa.hpp"

namespace profpred {

/// One pre-training example: the ungapped sequence as tokens and its
/// per-residue profile labels.
struct PretrainRecord {
  std::string id;
  std::vector<Token> tokens;
  LabelSequence labels;
};

std::vector<Token> tokenize(std::string_view residues);

/// Pairs every label record with the alignment row of the same id.
/// Throws BadFormat when an id is missing or the residue count disagrees.
std::vector<PretrainRecord> join_records(const Msa& msa, const std::vector<LabelSequence>& labels);

/// Loads every `<name>.pplb` in `dir` together with its `<name>.fasta`
/// alignment, in sorted file-name order.
std::vector<PretrainRecord> load_corpus_dir(const std::string& dir);

/// True when the id hashes into the held-out bucket.
bool is_heldout(std::string_view id, double heldout_fraction);

}  // namespace profpred
