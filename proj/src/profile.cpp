#include "profpred/profile.hpp"

#include <algorithm>
#include <cstdio>
#include <map>

#include "profpred/binary_io.hpp"
#include "profpred/error.hpp"

namespace profpred {

std::vector<std::uint32_t> ColumnClasses::match_columns() const {
  std::vector<std::uint32_t> out;
  out.reserve(match_count);
  for (std::size_t c = 0; c < classes.size(); ++c) {
    if (classes[c] == ColumnClass::Match) out.push_back(static_cast<std::uint32_t>(c + 1));
  }
  return out;
}

ColumnClasses classify_columns(const Msa& msa, const ColumnPolicy& policy) {
  ColumnClasses out;
  out.classes.resize(msa.m(), ColumnClass::Insert);

  std::visit(
      [&](const auto& p) {
        using P = std::decay_t<decltype(p)>;
        for (std::size_t c = 0; c < msa.m(); ++c) {
          bool match = false;
          if constexpr (std::is_same_v<P, RfAnnotation>) {
            if (!msa.ref_annotation()) throw Error(ErrorKind::MissingAnnotation, "alignment has no #=GC RF line");
            match = !is_gap((*msa.ref_annotation())[c]);
          } else if constexpr (std::is_same_v<P, OccupancyThreshold>) {
            match = column_occupancy(msa, c + 1) >= p.symfrac;
          } else {
            match = true;
            for (std::size_t r = 0; r < msa.k(); ++r) {
              if (!is_gap(msa.row(r)[c]) && msa.was_lowercase(r, c)) match = false;
            }
          }
          out.classes[c] = match ? ColumnClass::Match : ColumnClass::Insert;
        }
      },
      policy);

  out.match_count = static_cast<std::size_t>(std::count(out.classes.begin(), out.classes.end(), ColumnClass::Match));
  if (out.match_count == 0) throw Error(ErrorKind::NoMatchColumns, "no column qualifies as a match column");
  return out;
}

std::vector<double> sequence_weights(const Msa& msa, const ColumnClasses& classes, Weighting weighting) {
  const auto k = msa.k();
  std::vector<double> w(k, 1.0);
  if (weighting == Weighting::Uniform) return w;

  std::fill(w.begin(), w.end(), 0.0);
  for (std::size_t c = 0; c < msa.m(); ++c) {
    if (classes.classes[c] != ColumnClass::Match) continue;
    std::map<char, std::size_t> counts;
    for (const auto& row : msa.rows()) {
      if (!is_gap(row[c])) ++counts[row[c]];
    }
    if (counts.empty()) continue;
    const auto types = static_cast<double>(counts.size());
    for (std::size_t r = 0; r < k; ++r) {
      const char ch = msa.row(r)[c];
      if (!is_gap(ch)) w[r] += 1.0 / (types * static_cast<double>(counts[ch]));
    }
  }
  double total = 0.0;
  for (double x : w) total += x;
  if (total <= 0.0) return std::vector<double>(k, 1.0);
  for (double& x : w) x *= static_cast<double>(k) / total;
  return w;
}

namespace {

Emission normalize_counts(const Emission& counts, double total, double alpha) {
  Emission out;
  const double denom = total + kAlphabetSize * alpha;
  if (denom <= 0.0) {
    out.fill(1.0 / kAlphabetSize);
    return out;
  }
  for (int a = 0; a < kAlphabetSize; ++a) out[a] = (counts[a] + alpha) / denom;
  return out;
}

}  // namespace

ProfileHmm build_profile(const Msa& msa, const ColumnClasses& classes, const ProfileConfig& config) {
  if (config.pseudocount < 0.0) throw Error(ErrorKind::NegativePseudocount, "pseudocount must be >= 0");
  if (classes.classes.size() != msa.m()) throw Error(ErrorKind::ProfileMismatch, "column classes do not match alignment width");
  if (classes.match_count == 0) throw Error(ErrorKind::NoMatchColumns, "profile needs at least one match column");

  ProfileHmm hmm;
  hmm.columns = msa.m();
  hmm.match_map = classes.match_columns();
  const auto len = hmm.length();
  const auto weights = sequence_weights(msa, classes, config.weighting);

  std::vector<Emission> match_counts(len, Emission{});
  std::vector<Emission> insert_counts(len, Emission{});
  std::vector<double> match_total(len, 0.0);
  std::vector<double> insert_total(len, 0.0);

  std::size_t node = 0;  // owner of the current insert region
  std::size_t next_match = 0;
  for (std::size_t c = 0; c < msa.m(); ++c) {
    const bool is_match = classes.classes[c] == ColumnClass::Match;
    if (is_match) node = next_match++;
    auto& counts = is_match ? match_counts[node] : insert_counts[node];
    auto& total = is_match ? match_total[node] : insert_total[node];
    for (std::size_t r = 0; r < msa.k(); ++r) {
      const auto idx = residue_index(msa.row(r)[c]);
      if (!idx) continue;  // gaps and 'X'
      counts[*idx] += weights[r];
      total += weights[r];
    }
  }

  hmm.match_emissions.reserve(len);
  hmm.insert_emissions.reserve(len);
  for (std::size_t j = 0; j < len; ++j) {
    hmm.match_emissions.push_back(normalize_counts(match_counts[j], match_total[j], config.pseudocount));
    if (insert_total[j] > 0.0) {
      hmm.insert_emissions.push_back(normalize_counts(insert_counts[j], insert_total[j], config.pseudocount));
    } else {
      Emission uniform;
      uniform.fill(1.0 / kAlphabetSize);
      hmm.insert_emissions.push_back(uniform);
    }
  }
  return hmm;
}

std::optional<std::size_t> match_map_inverse(const ProfileHmm& profile, std::size_t column) {
  if (column < 1 || column > profile.columns) {
    throw Error(ErrorKind::IndexOutOfRange, "column " + std::to_string(column) + " outside [1, " +
                                                std::to_string(profile.columns) + "]");
  }
  const auto it = std::lower_bound(profile.match_map.begin(), profile.match_map.end(), column);
  if (it == profile.match_map.end() || *it != column) return std::nullopt;
  return static_cast<std::size_t>(it - profile.match_map.begin());
}

std::size_t insert_owner(const ProfileHmm& profile, std::size_t column) {
  if (column < 1 || column > profile.columns) {
    throw Error(ErrorKind::IndexOutOfRange, "column " + std::to_string(column) + " outside [1, " +
                                                std::to_string(profile.columns) + "]");
  }
  const auto it = std::upper_bound(profile.match_map.begin(), profile.match_map.end(), column);
  const auto left = static_cast<std::size_t>(it - profile.match_map.begin());
  return left == 0 ? 0 : left - 1;
}

std::string write_profile(const ProfileHmm& profile) {
  binio::Writer w;
  w.magic(kProfileMagic);
  w.u32(kProfileVersion);
  w.u32(static_cast<std::uint32_t>(profile.length()));
  w.u32(static_cast<std::uint32_t>(profile.columns));
  for (auto col : profile.match_map) w.u32(col);
  for (const auto& row : profile.match_emissions)
    for (double v : row) w.f32(static_cast<float>(v));
  for (const auto& row : profile.insert_emissions)
    for (double v : row) w.f32(static_cast<float>(v));
  return w.take();
}

ProfileHmm read_profile(std::string_view bytes) {
  binio::Reader r(bytes);
  r.expect_magic(kProfileMagic);
  if (const auto v = r.u32(); v != kProfileVersion) {
    throw Error(ErrorKind::BadFormat, "unsupported PPHM version " + std::to_string(v));
  }
  ProfileHmm hmm;
  const auto len = r.u32();
  hmm.columns = r.u32();
  hmm.match_map.resize(len);
  for (auto& col : hmm.match_map) col = r.u32();
  for (std::size_t j = 0; j < len; ++j) {
    if (hmm.match_map[j] < 1 || hmm.match_map[j] > hmm.columns || (j > 0 && hmm.match_map[j] <= hmm.match_map[j - 1])) {
      throw Error(ErrorKind::BadFormat, "match map is not strictly increasing within [1, m]");
    }
  }
  auto read_rows = [&](std::vector<Emission>& rows) {
    rows.resize(len);
    for (auto& row : rows)
      for (double& v : row) v = r.f32();
  };
  read_rows(hmm.match_emissions);
  read_rows(hmm.insert_emissions);
  if (!r.at_end()) throw Error(ErrorKind::BadFormat, "trailing bytes after PPHM record");
  return hmm;
}

std::string profile_table(const ProfileHmm& profile) {
  std::string out = "#state\tnode\tcolumn";
  for (char a : kAminoAcids) {
    out += '\t';
    out += a;
  }
  out += '\n';
  char buf[32];
  auto emit = [&](const char* state, const std::vector<Emission>& rows) {
    for (std::size_t j = 0; j < rows.size(); ++j) {
      out += state;
      out += '\t' + std::to_string(j + 1) + '\t' + std::to_string(profile.match_map[j]);
      for (double v : rows[j]) {
        std::snprintf(buf, sizeof buf, "\t%.6f", v);
        out += buf;
      }
      out += '\n';
    }
  };
  emit("M", profile.match_emissions);
  emit("I", profile.insert_emissions);
  return out;
}

}  // namespace profpred
