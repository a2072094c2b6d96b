#include "profpred/msa.hpp"

#include <cctype>
#include <unordered_map>
#include <unordered_set>

#include "profpred/alphabet.hpp"
#include "profpred/error.hpp"

namespace profpred {
namespace {

std::vector<std::string_view> split_lines(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    auto line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    lines.push_back(line);
    if (end == text.size()) break;
    start = end + 1;
  }
  return lines;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

bool is_allowed_upper(char c) { return residue_index(c).has_value() || c == 'X' || is_gap(c); }

}  // namespace

Msa Msa::from_rows(std::vector<std::string> ids, std::vector<std::string> rows,
                   std::optional<std::string> ref_annotation) {
  if (rows.empty()) throw Error(ErrorKind::EmptyAlignment, "alignment has no rows");
  if (ids.size() != rows.size()) throw Error(ErrorKind::MalformedRecord, "id count differs from row count");
  const std::size_t m = rows.front().size();
  if (m == 0) throw Error(ErrorKind::EmptyAlignment, "alignment has no columns");

  Msa msa;
  std::unordered_set<std::string> seen;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (!seen.insert(ids[r]).second) {
      throw Error(ErrorKind::MalformedRecord, "duplicate sequence id '" + ids[r] + "'");
    }
    if (rows[r].size() != m) {
      throw Error(ErrorKind::MalformedRecord, "row '" + ids[r] + "' has length " +
                                                  std::to_string(rows[r].size()) + ", expected " +
                                                  std::to_string(m));
    }
    std::vector<bool> lower(m, false);
    for (std::size_t c = 0; c < m; ++c) {
      char ch = rows[r][c];
      if (std::islower(static_cast<unsigned char>(ch))) {
        ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
        lower[c] = true;
      }
      if (!is_allowed_upper(ch)) {
        throw Error(ErrorKind::IllegalCharacter, "character '" + std::string(1, rows[r][c]) + "' in row '" +
                                                     ids[r] + "' at column " + std::to_string(c + 1));
      }
      rows[r][c] = ch;
    }
    msa.lowercase_.push_back(std::move(lower));
  }
  if (ref_annotation && ref_annotation->size() != m) {
    throw Error(ErrorKind::MalformedRecord, "reference annotation length " +
                                                std::to_string(ref_annotation->size()) + " differs from m=" +
                                                std::to_string(m));
  }
  msa.ids_ = std::move(ids);
  msa.rows_ = std::move(rows);
  msa.ref_ = std::move(ref_annotation);
  return msa;
}

std::size_t Msa::residue_count(std::size_t r) const {
  std::size_t n = 0;
  for (char c : rows_.at(r)) n += is_gap(c) ? 0 : 1;
  return n;
}

SequenceRecord Msa::degap(std::size_t r) const {
  SequenceRecord rec{ids_.at(r), {}};
  for (char c : rows_[r]) {
    if (!is_gap(c)) rec.residues.push_back(c);
  }
  if (rec.residues.empty()) throw Error(ErrorKind::EmptyRow, "row '" + rec.id + "' has no residues");
  return rec;
}

Msa parse_stockholm(std::string_view text) {
  std::vector<std::string> ids;
  std::vector<std::string> rows;
  std::unordered_map<std::string, std::size_t> index;
  std::optional<std::string> ref;
  bool terminated = false;

  const auto lines = split_lines(text);
  for (std::size_t ln = 0; ln < lines.size(); ++ln) {
    const auto line = trim(lines[ln]);
    if (line.empty()) continue;
    if (line == "//") {
      terminated = true;
      break;
    }
    if (line.starts_with("#=GC")) {
      auto rest = trim(line.substr(4));
      if (rest.starts_with("RF") && rest.size() > 2 && std::isspace(static_cast<unsigned char>(rest[2]))) {
        if (!ref) ref.emplace();
        *ref += trim(rest.substr(2));
      }
      continue;
    }
    if (line.front() == '#') continue;

    const auto ws = line.find_first_of(" \t");
    if (ws == std::string_view::npos) {
      throw Error(ErrorKind::MalformedRecord, "line " + std::to_string(ln + 1) + ": sequence line without residues");
    }
    std::string id(line.substr(0, ws));
    std::string seq;
    for (char c : line.substr(ws)) {
      if (!std::isspace(static_cast<unsigned char>(c))) seq.push_back(c);
    }
    for (std::size_t c = 0; c < seq.size(); ++c) {
      const char up = static_cast<char>(std::toupper(static_cast<unsigned char>(seq[c])));
      if (!is_allowed_upper(up)) {
        throw Error(ErrorKind::IllegalCharacter, "line " + std::to_string(ln + 1) + ", character '" +
                                                     std::string(1, seq[c]) + "' in sequence '" + id + "'");
      }
    }
    auto [it, inserted] = index.try_emplace(id, rows.size());
    if (inserted) {
      ids.push_back(id);
      rows.push_back(std::move(seq));
    } else {
      rows[it->second] += seq;
    }
  }
  if (!terminated) throw Error(ErrorKind::MalformedRecord, "missing '//' terminator");
  if (rows.empty()) throw Error(ErrorKind::EmptyAlignment, "record contains no sequences");
  return Msa::from_rows(std::move(ids), std::move(rows), std::move(ref));
}

Msa parse_aligned_fasta(std::string_view text) {
  std::vector<std::string> ids;
  std::vector<std::string> rows;
  const auto lines = split_lines(text);
  for (std::size_t ln = 0; ln < lines.size(); ++ln) {
    const auto line = trim(lines[ln]);
    if (line.empty()) continue;
    if (line.front() == '>') {
      auto header = trim(line.substr(1));
      const auto ws = header.find_first_of(" \t");
      std::string id(header.substr(0, ws));
      if (id.empty()) throw Error(ErrorKind::MalformedRecord, "line " + std::to_string(ln + 1) + ": empty header");
      ids.push_back(std::move(id));
      rows.emplace_back();
      continue;
    }
    if (rows.empty()) {
      throw Error(ErrorKind::MalformedRecord, "line " + std::to_string(ln + 1) + ": sequence data before first header");
    }
    for (char c : line) {
      if (std::isspace(static_cast<unsigned char>(c))) continue;
      const char up = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
      if (!is_allowed_upper(up)) {
        throw Error(ErrorKind::IllegalCharacter, "line " + std::to_string(ln + 1) + ", character '" +
                                                     std::string(1, c) + "' in sequence '" + ids.back() + "'");
      }
      rows.back().push_back(c);
    }
  }
  if (rows.empty()) throw Error(ErrorKind::EmptyAlignment, "no records");
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].empty()) throw Error(ErrorKind::MalformedRecord, "record '" + ids[r] + "' has no sequence");
  }
  return Msa::from_rows(std::move(ids), std::move(rows));
}

std::string write_aligned_fasta(const Msa& msa) {
  std::string out;
  for (std::size_t r = 0; r < msa.k(); ++r) {
    out += '>';
    out += msa.id(r);
    out += '\n';
    const auto& row = msa.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) {
      out += msa.was_lowercase(r, c) ? static_cast<char>(std::tolower(static_cast<unsigned char>(row[c]))) : row[c];
    }
    out += '\n';
  }
  return out;
}

std::size_t column_residues(const Msa& msa, std::size_t j) {
  if (j < 1 || j > msa.m()) {
    throw Error(ErrorKind::IndexOutOfRange, "column " + std::to_string(j) + " outside [1, " + std::to_string(msa.m()) + "]");
  }
  std::size_t count = 0;
  for (const auto& row : msa.rows()) count += is_gap(row[j - 1]) ? 0 : 1;
  return count;
}

double column_occupancy(const Msa& msa, std::size_t j) {
  return static_cast<double>(column_residues(msa, j)) / static_cast<double>(msa.k());
}

}  // namespace profpred
