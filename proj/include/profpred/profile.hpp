#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "profpred/alphabet.hpp"
#include "profpred/msa.hpp"

namespace profpred {

using Emission = std::array<double, kAlphabetSize>;

enum class ColumnClass : std::uint8_t { Match, Insert };

struct ColumnClasses {
  std::vector<ColumnClass> classes;  // one per alignment column
  std::size_t match_count = 0;       // number of Match columns (profile length)

  /// 1-based Match column indices in increasing order.
  std::vector<std::uint32_t> match_columns() const;
};

/// Match iff the reference annotation character is not a gap symbol.
struct RfAnnotation {};
/// Match iff column occupancy >= symfrac.
struct OccupancyThreshold {
  double symfrac = 0.5;
};
/// Match iff no residue in the column was lowercase in the source file
/// (aligned-FASTA / A2M insert convention).
struct InsertCase {};

using ColumnPolicy = std::variant<RfAnnotation, OccupancyThreshold, InsertCase>;

ColumnClasses classify_columns(const Msa& msa, const ColumnPolicy& policy);

enum class Weighting { Uniform, Henikoff };

struct ProfileConfig {
  double pseudocount = 0.1;
  Weighting weighting = Weighting::Uniform;
};

/// Emission-only profile HMM. Nodes are 0-based in memory; match_map holds
/// the 1-based alignment column of each node and is strictly increasing.
struct ProfileHmm {
  std::size_t columns = 0;  // m of the source alignment
  std::vector<std::uint32_t> match_map;
  std::vector<Emission> match_emissions;
  std::vector<Emission> insert_emissions;

  std::size_t length() const noexcept { return match_map.size(); }
  friend bool operator==(const ProfileHmm&, const ProfileHmm&) = default;
};

/// Per-row sequence weights. Uniform gives every row weight 1; Henikoff
/// position-based weights (over match columns) are rescaled to sum to k so
/// the pseudocount keeps the same relative strength under both schemes.
std::vector<double> sequence_weights(const Msa& msa, const ColumnClasses& classes, Weighting weighting);

ProfileHmm build_profile(const Msa& msa, const ColumnClasses& classes, const ProfileConfig& config = {});

/// 0-based node whose match column is the 1-based `column`, if any.
std::optional<std::size_t> match_map_inverse(const ProfileHmm& profile, std::size_t column);

/// 0-based node that owns the insert column `column` (1-based): the nearest
/// match column to its left, or node 0 for leading inserts.
std::size_t insert_owner(const ProfileHmm& profile, std::size_t column);

// PPHM binary profile record.
inline constexpr std::string_view kProfileMagic = "PPHM";
inline constexpr std::uint32_t kProfileVersion = 1;

std::string write_profile(const ProfileHmm& profile);
ProfileHmm read_profile(std::string_view bytes);

/// Tab-separated dump, one line per node, 20 values at 6 decimals.
std::string profile_table(const ProfileHmm& profile);

}  // namespace profpred
