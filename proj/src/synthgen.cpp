#include "profpred/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <sstream>

#include "profpred/corpus.hpp"
#include "profpred/error.hpp"
#include "profpred/seed.hpp"

namespace profpred {

std::vector<Emission> sample_profile(std::size_t length, double concentration, std::uint64_t seed) {
  if (!(concentration > 0.0) || !std::isfinite(concentration)) {
    throw Error(ErrorKind::InvalidConcentration, "concentration must be a positive finite number");
  }
  if (length == 0) throw Error(ErrorKind::InvalidConfig, "profile length must be >= 1");
  std::mt19937_64 rng(derive_seed(seed, {0x5a}));
  // Gamma(c) = Gamma(c + 1) * U^(1/c); the log form survives tiny c.
  std::gamma_distribution<double> gamma(concentration + 1.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<Emission> rows(length);
  for (auto& row : rows) {
    std::array<double, kAlphabetSize> logs;
    for (auto& lg : logs) {
      double u = unit(rng);
      while (u <= 0.0) u = unit(rng);
      lg = std::log(gamma(rng)) + std::log(u) / concentration;
    }
    const double mx = *std::max_element(logs.begin(), logs.end());
    double sum = 0.0;
    for (int a = 0; a < kAlphabetSize; ++a) sum += (row[a] = std::exp(logs[a] - mx));
    for (double& v : row) v /= sum;
  }
  return rows;
}

namespace {

int draw(const Emission& p, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double u = unit(rng);
  for (int a = 0; a < kAlphabetSize; ++a) {
    u -= p[a];
    if (u < 0.0) return a;
  }
  return kAlphabetSize - 1;
}

struct RowDraw {
  std::vector<int> match;                 // residue index per node, -1 = deleted
  std::vector<std::vector<int>> inserts;  // residues inserted after each node
};

/// Fixed residue permutation used by every coupling of a family.
std::array<int, kAlphabetSize> coupling_permutation(std::uint64_t seed) {
  std::array<int, kAlphabetSize> perm;
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(derive_seed(seed, {0xc0}));
  std::shuffle(perm.begin(), perm.end(), rng);
  return perm;
}

}  // namespace

std::vector<Coupling> sample_couplings(std::size_t length, std::size_t count, std::size_t min_separation,
                                       std::uint64_t seed) {
  std::vector<std::pair<std::uint32_t, std::uint32_t>> candidates;
  for (std::uint32_t a = 0; a < length; ++a)
    for (std::uint32_t b = a + static_cast<std::uint32_t>(min_separation); b < length; ++b) candidates.emplace_back(a, b);
  std::mt19937_64 rng(derive_seed(seed, {0xcc}));
  std::shuffle(candidates.begin(), candidates.end(), rng);
  std::vector<Coupling> out;
  std::vector<bool> used(length, false);
  for (const auto& [a, b] : candidates) {
    if (out.size() == count) break;
    if (used[a] || used[b]) continue;
    used[a] = used[b] = true;
    out.push_back({a, b, 0.9});
  }
  std::sort(out.begin(), out.end(), [](const Coupling& x, const Coupling& y) { return x.first < y.first; });
  return out;
}

GroundTruthFamily sample_family(const std::vector<Emission>& true_emissions, std::size_t k, const IndelRates& rates,
                                std::uint64_t seed, const FamilyOptions& options) {
  if (k < 2) throw Error(ErrorKind::InvalidConfig, "a family needs at least two sequences");
  if (true_emissions.empty()) throw Error(ErrorKind::InvalidConfig, "family needs at least one node");
  const std::size_t len = true_emissions.size();
  for (const auto& c : options.couplings) {
    if (c.first >= c.second || c.second >= len) throw Error(ErrorKind::InvalidConfig, "coupling outside profile");
  }
  const auto perm = coupling_permutation(seed);
  constexpr int kMaxAttempts = 100;

  std::vector<RowDraw> draws;
  draws.reserve(k);
  for (std::size_t r = 0; r < k; ++r) {
    RowDraw rd;
    bool ok = false;
    for (int attempt = 0; attempt < kMaxAttempts && !ok; ++attempt) {
      std::mt19937_64 rng(derive_seed(seed, {r, static_cast<std::uint64_t>(attempt)}));
      std::uniform_real_distribution<double> unit(0.0, 1.0);
      std::uniform_int_distribution<int> uniform_residue(0, kAlphabetSize - 1);
      rd.match.assign(len, -1);
      rd.inserts.assign(len, {});
      std::size_t residues = 0;
      for (std::size_t j = 0; j < len; ++j) {
        if (unit(rng) >= rates.delete_open) {
          rd.match[j] = draw(true_emissions[j], rng);
          ++residues;
        }
        if (j + 1 < len && unit(rng) < rates.insert_open) {
          do {
            rd.inserts[j].push_back(uniform_residue(rng));
            ++residues;
          } while (unit(rng) < rates.insert_extend);
        }
      }
      for (const auto& c : options.couplings) {
        if (rd.match[c.first] >= 0 && rd.match[c.second] >= 0 && unit(rng) < c.strength) {
          rd.match[c.second] = perm[static_cast<std::size_t>(rd.match[c.first])];
        }
      }
      ok = residues > 0;
    }
    if (!ok) throw Error(ErrorKind::DegenerateFamily, "row " + std::to_string(r) + " stayed empty after resampling");
    draws.push_back(std::move(rd));
  }

  std::vector<std::size_t> width(len, 0);
  for (const auto& rd : draws)
    for (std::size_t j = 0; j < len; ++j) width[j] = std::max(width[j], rd.inserts[j].size());

  std::vector<std::string> ids, rows;
  GroundTruthFamily fam;
  for (std::size_t r = 0; r < k; ++r) {
    const auto& rd = draws[r];
    std::string row;
    std::vector<int> nodes;
    for (std::size_t j = 0; j < len; ++j) {
      if (rd.match[j] >= 0) {
        row += kAminoAcids[static_cast<std::size_t>(rd.match[j])];
        nodes.push_back(static_cast<int>(j));
      } else {
        row += '-';
      }
      for (int a : rd.inserts[j]) {
        row += kAminoAcids[static_cast<std::size_t>(a)];
        nodes.push_back(-1);
      }
      row.append(width[j] - rd.inserts[j].size(), '.');
    }
    char id[64];
    std::snprintf(id, sizeof id, "%s_s%04zu", options.family_id.c_str(), r);
    ids.emplace_back(id);
    rows.push_back(std::move(row));
    fam.residue_nodes.push_back(std::move(nodes));
  }

  fam.id = options.family_id;
  fam.true_emissions = true_emissions;
  fam.rates = rates;
  fam.couplings = options.couplings;
  fam.msa = Msa::from_rows(std::move(ids), std::move(rows));
  fam.classes = classify_columns(fam.msa, OccupancyThreshold{options.label_symfrac});
  fam.profile = build_profile(fam.msa, fam.classes, {options.label_pseudocount, Weighting::Uniform});
  fam.labels = build_all_labels(fam.msa, fam.classes, fam.profile);
  return fam;
}

std::string_view to_string(TaskShape shape) {
  switch (shape) {
    case TaskShape::TokenClass: return "token_class";
    case TaskShape::SeqRegression: return "seq_regression";
    case TaskShape::SeqClass: return "seq_class";
    case TaskShape::Contact: return "contact";
  }
  return "unknown";
}

TaskShape task_shape_from_string(std::string_view name) {
  for (auto s : {TaskShape::TokenClass, TaskShape::SeqRegression, TaskShape::SeqClass, TaskShape::Contact}) {
    if (to_string(s) == name) return s;
  }
  throw Error(ErrorKind::BadFormat, "unknown task shape '" + std::string(name) + "'");
}

std::size_t DownstreamDataset::count(Split split) const {
  return static_cast<std::size_t>(
      std::count_if(examples.begin(), examples.end(), [&](const auto& e) { return e.split == split; }));
}

double sequence_score(const GroundTruthFamily& family, std::size_t row) {
  const auto seq = family.msa.degap(row);
  const auto& nodes = family.residue_nodes.at(row);
  double total = 0.0;
  for (std::size_t i = 0; i < seq.residues.size(); ++i) {
    const auto a = residue_index(seq.residues[i]);
    if (nodes[i] >= 0 && a) {
      total += std::log(family.true_emissions[static_cast<std::size_t>(nodes[i])][*a]);
    } else {
      total += std::log(1.0 / kAlphabetSize);
    }
  }
  return total / static_cast<double>(seq.residues.size());
}

DownstreamDataset make_downstream_task(const std::vector<GroundTruthFamily>& families, TaskShape shape,
                                       std::uint64_t seed, const TaskOptions& options) {
  if (families.empty() || (shape == TaskShape::SeqClass && families.size() < 2)) {
    throw Error(ErrorKind::InsufficientFamilies, "task needs more families");
  }
  DownstreamDataset ds;
  ds.shape = shape;
  ds.num_classes = shape == TaskShape::SeqClass ? static_cast<int>(families.size()) : 2;

  for (std::size_t f = 0; f < families.size(); ++f) {
    const auto& fam = families[f];
    const auto k = fam.msa.k();
    std::vector<std::size_t> order(k);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(derive_seed(seed, {f}));
    std::shuffle(order.begin(), order.end(), rng);
    auto n_test = static_cast<std::size_t>(std::ceil(options.test_fraction * static_cast<double>(k)));
    n_test = std::clamp<std::size_t>(n_test, 1, k - 1);
    std::vector<Split> split(k, Split::Train);
    for (std::size_t i = 0; i < n_test; ++i) split[order[i]] = Split::Test;

    for (std::size_t r = 0; r < k; ++r) {
      DownstreamExample ex;
      const auto seq = fam.msa.degap(r);
      ex.id = seq.id;
      ex.family = f;
      ex.tokens = tokenize(seq.residues);
      ex.split = split[r];
      const auto& nodes = fam.residue_nodes[r];
      switch (shape) {
        case TaskShape::TokenClass:
          for (int node : nodes) {
            const bool conserved =
                node >= 0 && *std::max_element(fam.true_emissions[static_cast<std::size_t>(node)].begin(),
                                               fam.true_emissions[static_cast<std::size_t>(node)].end()) >
                                 options.conserved_threshold;
            ex.token_labels.push_back(conserved ? 1 : 0);
          }
          break;
        case TaskShape::SeqClass: ex.class_label = static_cast<int>(f); break;
        case TaskShape::SeqRegression: ex.score = sequence_score(fam, r); break;
        case TaskShape::Contact: {
          std::vector<int> pos_of(fam.true_emissions.size(), -1);
          for (std::size_t i = 0; i < nodes.size(); ++i) {
            if (nodes[i] >= 0) pos_of[static_cast<std::size_t>(nodes[i])] = static_cast<int>(i);
          }
          for (const auto& c : fam.couplings) {
            const int i = pos_of[c.first], j = pos_of[c.second];
            if (i >= 0 && j >= 0 && static_cast<std::size_t>(j - i) >= options.min_separation) {
              ex.contacts.emplace_back(static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j));
            }
          }
          break;
        }
      }
      ds.examples.push_back(std::move(ex));
    }
  }
  return ds;
}

std::string write_manifest(const DownstreamDataset& ds) {
  std::string out = "#task\t" + std::string(to_string(ds.shape)) + "\n#classes\t" + std::to_string(ds.num_classes) + "\n";
  char buf[64];
  for (const auto& ex : ds.examples) {
    out += ex.id;
    out += ex.split == Split::Train ? "\ttrain\t" : "\ttest\t";
    switch (ds.shape) {
      case TaskShape::TokenClass:
        for (int l : ex.token_labels) out += static_cast<char>('0' + l);
        break;
      case TaskShape::SeqClass: out += std::to_string(ex.class_label); break;
      case TaskShape::SeqRegression:
        std::snprintf(buf, sizeof buf, "%.17g", ex.score);
        out += buf;
        break;
      case TaskShape::Contact:
        if (ex.contacts.empty()) out += '-';
        for (std::size_t c = 0; c < ex.contacts.size(); ++c) {
          if (c) out += ',';
          out += std::to_string(ex.contacts[c].first) + ':' + std::to_string(ex.contacts[c].second);
        }
        break;
    }
    out += '\n';
  }
  return out;
}

DownstreamDataset read_manifest(std::string_view text, const std::unordered_map<std::string, std::string>& sequences) {
  DownstreamDataset ds;
  bool have_task = false;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t ln = 0;
  while (std::getline(in, line)) {
    ++ln;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    for (std::string f; std::getline(ss, f, '\t');) fields.push_back(f);
    if (line.front() == '#') {
      if (fields.size() == 2 && fields[0] == "#task") {
        ds.shape = task_shape_from_string(fields[1]);
        have_task = true;
      } else if (fields.size() == 2 && fields[0] == "#classes") {
        ds.num_classes = std::stoi(fields[1]);
      }
      continue;
    }
    if (!have_task) throw Error(ErrorKind::BadFormat, "manifest lacks a #task header");
    if (fields.size() != 3) throw Error(ErrorKind::BadFormat, "manifest line " + std::to_string(ln) + " needs 3 fields");
    DownstreamExample ex;
    ex.id = fields[0];
    if (fields[1] != "train" && fields[1] != "test") {
      throw Error(ErrorKind::BadFormat, "manifest line " + std::to_string(ln) + ": bad split '" + fields[1] + "'");
    }
    ex.split = fields[1] == "train" ? Split::Train : Split::Test;
    const auto it = sequences.find(ex.id);
    if (it == sequences.end()) throw Error(ErrorKind::BadFormat, "no sequence for manifest id '" + ex.id + "'");
    ex.tokens = tokenize(it->second);
    const auto& lab = fields[2];
    switch (ds.shape) {
      case TaskShape::TokenClass:
        if (lab.size() != ex.tokens.size()) throw Error(ErrorKind::BadFormat, "token labels for '" + ex.id + "' have wrong length");
        for (char c : lab) ex.token_labels.push_back(c == '1' ? 1 : 0);
        break;
      case TaskShape::SeqClass:
        ex.class_label = std::stoi(lab);
        ex.family = static_cast<std::size_t>(ex.class_label);
        break;
      case TaskShape::SeqRegression: ex.score = std::stod(lab); break;
      case TaskShape::Contact:
        if (lab != "-") {
          std::stringstream cs(lab);
          for (std::string pair; std::getline(cs, pair, ',');) {
            const auto colon = pair.find(':');
            if (colon == std::string::npos) throw Error(ErrorKind::BadFormat, "bad contact '" + pair + "'");
            ex.contacts.emplace_back(static_cast<std::uint32_t>(std::stoul(pair.substr(0, colon))),
                                     static_cast<std::uint32_t>(std::stoul(pair.substr(colon + 1))));
          }
        }
        break;
    }
    ds.examples.push_back(std::move(ex));
  }
  if (!have_task) throw Error(ErrorKind::BadFormat, "manifest lacks a #task header");
  return ds;
}

}  // namespace profpred
