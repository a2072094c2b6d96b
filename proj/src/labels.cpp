#include "profpred/labels.hpp"

#include <algorithm>

#include "profpred/binary_io.hpp"
#include "profpred/error.hpp"

namespace profpred {

bool LabelSequence::all_insert() const noexcept {
  return std::all_of(states.begin(), states.end(), [](ResidueState s) { return s == ResidueState::Insert; });
}

std::vector<std::uint32_t> residue_column_map(std::string_view row) {
  std::vector<std::uint32_t> g;
  for (std::size_t c = 0; c < row.size(); ++c) {
    if (!is_gap(row[c])) g.push_back(static_cast<std::uint32_t>(c + 1));
  }
  if (g.empty()) throw Error(ErrorKind::EmptyRow, "row has no residues");
  return g;
}

ResidueState residue_state(const ColumnClasses& classes, const std::vector<std::uint32_t>& column_map, std::size_t i) {
  if (i >= column_map.size()) {
    throw Error(ErrorKind::IndexOutOfRange, "residue " + std::to_string(i) + " outside sequence of length " +
                                                std::to_string(column_map.size()));
  }
  const auto col = column_map[i];
  if (col < 1 || col > classes.classes.size()) {
    throw Error(ErrorKind::IndexOutOfRange, "column " + std::to_string(col) + " outside column classes");
  }
  return classes.classes[col - 1] == ColumnClass::Match ? ResidueState::Match : ResidueState::Insert;
}

LabelSequence build_labels(const Msa& msa, std::size_t row, const ColumnClasses& classes, const ProfileHmm& profile) {
  if (row >= msa.k()) throw Error(ErrorKind::IndexOutOfRange, "row " + std::to_string(row) + " outside alignment");
  if (profile.columns != msa.m() || classes.classes.size() != msa.m() ||
      profile.match_map != classes.match_columns() || profile.match_emissions.size() != profile.length() ||
      profile.insert_emissions.size() != profile.length()) {
    throw Error(ErrorKind::ProfileMismatch, "profile was not built from these column classes");
  }

  const auto g = residue_column_map(msa.row(row));
  LabelSequence out;
  out.id = msa.id(row);
  out.labels.reserve(g.size());
  out.states.reserve(g.size());
  out.source_node.reserve(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    const auto state = residue_state(classes, g, i);
    std::size_t node;
    if (state == ResidueState::Match) {
      node = *match_map_inverse(profile, g[i]);
      out.labels.push_back(profile.match_emissions[node]);
    } else {
      node = insert_owner(profile, g[i]);
      out.labels.push_back(profile.insert_emissions[node]);
    }
    out.states.push_back(state);
    out.source_node.push_back(static_cast<std::uint32_t>(node));
  }
  return out;
}

std::vector<LabelSequence> build_all_labels(const Msa& msa, const ColumnClasses& classes, const ProfileHmm& profile) {
  std::vector<LabelSequence> out;
  out.reserve(msa.k());
  for (std::size_t r = 0; r < msa.k(); ++r) out.push_back(build_labels(msa, r, classes, profile));
  return out;
}

std::string write_label_file(const std::vector<LabelSequence>& records) {
  binio::Writer w;
  w.magic(kLabelMagic);
  w.u32(kLabelVersion);
  w.u32(static_cast<std::uint32_t>(records.size()));
  for (const auto& rec : records) {
    if (rec.states.size() != rec.labels.size()) {
      throw Error(ErrorKind::ShapeMismatch, "label record '" + rec.id + "' has mismatched state count");
    }
    w.str(rec.id);
    w.u32(static_cast<std::uint32_t>(rec.n()));
    for (const auto& row : rec.labels)
      for (double v : row) w.f32(static_cast<float>(v));
    for (auto s : rec.states) w.u8(static_cast<std::uint8_t>(s));
  }
  return w.take();
}

std::vector<LabelSequence> read_label_file(std::string_view bytes) {
  binio::Reader r(bytes);
  r.expect_magic(kLabelMagic);
  if (const auto v = r.u32(); v != kLabelVersion) {
    throw Error(ErrorKind::BadFormat, "unsupported PPLB version " + std::to_string(v));
  }
  const auto count = r.u32();
  std::vector<LabelSequence> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    LabelSequence rec;
    rec.id = r.str();
    const auto n = r.u32();
    rec.labels.resize(n);
    for (auto& row : rec.labels)
      for (double& v : row) v = r.f32();
    rec.states.resize(n);
    for (auto& s : rec.states) {
      const auto tag = r.u8();
      if (tag > 1) throw Error(ErrorKind::BadFormat, "bad state tag in record '" + rec.id + "'");
      s = static_cast<ResidueState>(tag);
    }
    out.push_back(std::move(rec));
  }
  if (!r.at_end()) throw Error(ErrorKind::BadFormat, "trailing bytes after PPLB records");
  return out;
}

}  // namespace profpred
