#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace profpred {

/// One ungapped sequence drawn from an alignment row.
struct SequenceRecord {
  std::string id;
  std::string residues;  // uppercase, 20 letters plus 'X'
};

/// A validated gapped alignment: k rows by m columns.
///
/// Cells are uppercase residues, 'X', or one of the gap symbols '-' and '.'.
/// Lowercase letters in the source are uppercased on load; the original case
/// is kept per cell so callers can honor the file's insert convention.
/// Instances are immutable once built.
class Msa {
 public:
  Msa() = default;

  /// Validates and normalizes. Throws MalformedRecord, EmptyAlignment or
  /// IllegalCharacter.
  static Msa from_rows(std::vector<std::string> ids, std::vector<std::string> rows,
                       std::optional<std::string> ref_annotation = std::nullopt);

  std::size_t k() const noexcept { return rows_.size(); }
  std::size_t m() const noexcept { return rows_.empty() ? 0 : rows_.front().size(); }

  const std::vector<std::string>& rows() const noexcept { return rows_; }
  const std::vector<std::string>& ids() const noexcept { return ids_; }
  const std::string& row(std::size_t r) const { return rows_.at(r); }
  const std::string& id(std::size_t r) const { return ids_.at(r); }
  const std::optional<std::string>& ref_annotation() const noexcept { return ref_; }

  /// True when cell (row r, 0-based column c) was lowercase in the source.
  bool was_lowercase(std::size_t r, std::size_t c) const { return lowercase_.at(r).at(c); }

  std::size_t residue_count(std::size_t r) const;
  SequenceRecord degap(std::size_t r) const;

  friend bool operator==(const Msa&, const Msa&) = default;

 private:
  std::vector<std::string> ids_;
  std::vector<std::string> rows_;
  std::vector<std::vector<bool>> lowercase_;
  std::optional<std::string> ref_;
};

Msa parse_stockholm(std::string_view text);
Msa parse_aligned_fasta(std::string_view text);

/// Serializes with original case and gap symbols, one line per sequence.
std::string write_aligned_fasta(const Msa& msa);

/// Fraction of non-gap cells in 1-based column j. 'X' counts as non-gap.
double column_occupancy(const Msa& msa, std::size_t j);

/// Non-gap cell count of 1-based column j.
std::size_t column_residues(const Msa& msa, std::size_t j);

}  // namespace profpred
