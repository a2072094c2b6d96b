#include "profpred/corpus.hpp"

#include <algorithm>
#include <filesystem>
#include <unordered_map>

#include "profpred/binary_io.hpp"
#include "profpred/error.hpp"
#include "profpred/seed.hpp"

namespace profpred {

std::vector<Token> tokenize(std::string_view residues) {
  std::vector<Token> out;
  out.reserve(residues.size());
  for (char c : residues) out.push_back(residue_token(c));
  return out;
}

std::vector<PretrainRecord> join_records(const Msa& msa, const std::vector<LabelSequence>& labels) {
  std::unordered_map<std::string, std::size_t> row_of;
  for (std::size_t r = 0; r < msa.k(); ++r) row_of.emplace(msa.id(r), r);
  std::vector<PretrainRecord> out;
  out.reserve(labels.size());
  for (const auto& lab : labels) {
    const auto it = row_of.find(lab.id);
    if (it == row_of.end()) throw Error(ErrorKind::BadFormat, "label record '" + lab.id + "' has no alignment row");
    const auto seq = msa.degap(it->second);
    if (seq.residues.size() != lab.n()) {
      throw Error(ErrorKind::BadFormat, "label record '" + lab.id + "' has " + std::to_string(lab.n()) +
                                            " rows for " + std::to_string(seq.residues.size()) + " residues");
    }
    out.push_back({lab.id, tokenize(seq.residues), lab});
  }
  return out;
}

std::vector<PretrainRecord> load_corpus_dir(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw Error(ErrorKind::Io, "corpus directory '" + dir + "' not found");
  std::vector<fs::path> label_files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".pplb") label_files.push_back(entry.path());
  }
  std::sort(label_files.begin(), label_files.end());
  if (label_files.empty()) throw Error(ErrorKind::EmptyAlignment, "no .pplb files in '" + dir + "'");

  std::vector<PretrainRecord> out;
  for (const auto& lf : label_files) {
    auto fasta = lf;
    fasta.replace_extension(".fasta");
    const auto msa = parse_aligned_fasta(binio::read_file(fasta.string()));
    const auto labels = read_label_file(binio::read_file(lf.string()));
    auto recs = join_records(msa, labels);
    std::move(recs.begin(), recs.end(), std::back_inserter(out));
  }
  return out;
}

bool is_heldout(std::string_view id, double heldout_fraction) {
  constexpr std::uint64_t kBuckets = 10000;
  return static_cast<double>(fnv1a(id) % kBuckets) < heldout_fraction * static_cast<double>(kBuckets);
}

}  // namespace profpred
