#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string_view>

namespace profpred {

/// Number of standard amino acids carried by every emission vector.
inline constexpr int kAlphabetSize = 20;

/// Fixed residue ordering used by emission vectors, label files and the
/// first 20 token ids.
inline constexpr std::string_view kAminoAcids = "ACDEFGHIKLMNPQRSTVWY";

using Token = std::int32_t;

/// Token vocabulary: ids 0..19 are residues in kAminoAcids order, then the
/// five specials. The ordering is part of the checkpoint format.
namespace tokens {
inline constexpr Token kPad = 20;
inline constexpr Token kMask = 21;
inline constexpr Token kUnk = 22;
inline constexpr Token kBos = 23;
inline constexpr Token kEos = 24;
inline constexpr int kVocabSize = 25;
}  // namespace tokens

inline constexpr bool is_gap(char c) noexcept { return c == '-' || c == '.'; }

/// Index of an uppercase residue letter in kAminoAcids, or nullopt for
/// anything else (including 'X').
constexpr std::optional<int> residue_index(char c) noexcept {
  for (int i = 0; i < kAlphabetSize; ++i) {
    if (kAminoAcids[static_cast<std::size_t>(i)] == c) return i;
  }
  return std::nullopt;
}

constexpr Token residue_token(char c) noexcept {
  const auto idx = residue_index(c);
  return idx ? static_cast<Token>(*idx) : tokens::kUnk;
}

constexpr bool is_residue_token(Token t) noexcept { return t >= 0 && t < kAlphabetSize; }

}  // namespace profpred
