#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "profpred/msa.hpp"
#include "profpred/profile.hpp"

namespace profpred {

enum class ResidueState : std::uint8_t { Match = 0, Insert = 1 };

/// Per-residue profile targets for one ungapped sequence. Deleted match
/// columns contribute no rows.
struct LabelSequence {
  std::string id;
  std::vector<Emission> labels;          // n rows, each a copy of a profile emission row
  std::vector<ResidueState> states;      // n tags
  std::vector<std::uint32_t> source_node;  // 0-based profile node per residue; empty after decoding

  std::size_t n() const noexcept { return labels.size(); }
  /// Every residue sits in an insert column; kept in the corpus but reported.
  bool all_insert() const noexcept;
  friend bool operator==(const LabelSequence&, const LabelSequence&) = default;
};

/// 1-based alignment column of each residue of a gapped row, in order.
std::vector<std::uint32_t> residue_column_map(std::string_view row);

/// State of 0-based residue i given its column map.
ResidueState residue_state(const ColumnClasses& classes, const std::vector<std::uint32_t>& column_map, std::size_t i);

LabelSequence build_labels(const Msa& msa, std::size_t row, const ColumnClasses& classes, const ProfileHmm& profile);

/// Labels for every row of the alignment.
std::vector<LabelSequence> build_all_labels(const Msa& msa, const ColumnClasses& classes, const ProfileHmm& profile);

// PPLB label file.
inline constexpr std::string_view kLabelMagic = "PPLB";
inline constexpr std::uint32_t kLabelVersion = 1;

std::string write_label_file(const std::vector<LabelSequence>& records);
std::vector<LabelSequence> read_label_file(std::string_view bytes);

}  // namespace profpred
