#include <pybind11/numpy.h>
#include <pybind11/operators.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <set>
#include <string>
#include <vector>

#include "profpred/corpus.hpp"
#include "profpred/downstream.hpp"
#include "profpred/error.hpp"
#include "profpred/labels.hpp"
#include "profpred/losses.hpp"
#include "profpred/model.hpp"
#include "profpred/msa.hpp"
#include "profpred/profile.hpp"

namespace py = pybind11;
using namespace profpred;

namespace {

py::array_t<double> emission_array(const std::vector<Emission>& rows) {
  py::array_t<double> out({rows.size(), static_cast<std::size_t>(kAlphabetSize)});
  auto v = out.mutable_unchecked<2>();
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (int a = 0; a < kAlphabetSize; ++a) v(i, a) = rows[i][a];
  return out;
}

ColumnPolicy policy_from(const std::string& columns, double symfrac) {
  if (columns == "symfrac") return OccupancyThreshold{symfrac};
  if (columns == "rf") return RfAnnotation{};
  if (columns == "case") return InsertCase{};
  throw Error(ErrorKind::Usage, "columns must be 'symfrac', 'rf' or 'case'");
}

ProfileConfig profile_config(double pseudocount, const std::string& weighting) {
  ProfileConfig c;
  c.pseudocount = pseudocount;
  if (weighting == "uniform") c.weighting = Weighting::Uniform;
  else if (weighting == "henikoff") c.weighting = Weighting::Henikoff;
  else throw Error(ErrorKind::Usage, "weighting must be 'uniform' or 'henikoff'");
  return c;
}

py::dict label_dict(const LabelSequence& l) {
  py::dict d;
  d["id"] = l.id;
  d["labels"] = emission_array(l.labels);
  std::vector<int> states;
  for (auto s : l.states) states.push_back(static_cast<int>(s));
  d["states"] = states;
  return d;
}

struct Encoder {
  ModelParams<float> params;

  py::array_t<double> predict_profile(const std::string& residues) const {
    const auto batch = TokenBatch::pad({tokenize(residues)});
    const auto out = forward(params, batch, Mode::Eval);
    const auto& p = out.front().profile_probs;
    py::array_t<double> arr({static_cast<std::size_t>(p.rows()), static_cast<std::size_t>(p.cols())});
    auto v = arr.mutable_unchecked<2>();
    for (Eigen::Index i = 0; i < p.rows(); ++i)
      for (Eigen::Index j = 0; j < p.cols(); ++j) v(i, j) = p(i, j);
    return arr;
  }
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Native core of the profpred package";

  static py::exception<Error> base(m, "Error", PyExc_RuntimeError);
  static py::exception<Error> usage(m, "UsageError", base.ptr());
  static py::exception<Error> data(m, "DataError", base.ptr());
  static py::exception<Error> numerical(m, "NumericalError", base.ptr());
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      switch (e.category()) {
        case ErrorCategory::Usage: usage(e.what()); break;
        case ErrorCategory::Data: data(e.what()); break;
        case ErrorCategory::Numerical: numerical(e.what()); break;
      }
    }
  });

  m.attr("AMINO_ACIDS") = std::string(kAminoAcids);

  py::class_<Msa>(m, "Alignment")
      .def_property_readonly("k", &Msa::k)
      .def_property_readonly("m", &Msa::m)
      .def_property_readonly("ids", &Msa::ids)
      .def_property_readonly("rows", &Msa::rows)
      .def_property_readonly("reference", &Msa::ref_annotation)
      .def("occupancy", [](const Msa& a, std::size_t j) { return column_occupancy(a, j); }, py::arg("column"),
           "Fraction of non-gap cells in a 1-based column.")
      .def("to_fasta", &write_aligned_fasta)
      .def("__repr__", [](const Msa& a) {
        return "<Alignment k=" + std::to_string(a.k()) + " m=" + std::to_string(a.m()) + ">";
      });

  m.def("parse_stockholm", [](const std::string& text) { return parse_stockholm(text); }, py::arg("text"));
  m.def("parse_fasta", [](const std::string& text) { return parse_aligned_fasta(text); }, py::arg("text"));

  py::class_<ProfileHmm>(m, "Profile")
      .def_property_readonly("length", &ProfileHmm::length)
      .def_property_readonly("columns", [](const ProfileHmm& p) { return p.columns; })
      .def_property_readonly("match_map", [](const ProfileHmm& p) { return p.match_map; })
      .def_property_readonly("match_emissions", [](const ProfileHmm& p) { return emission_array(p.match_emissions); })
      .def_property_readonly("insert_emissions", [](const ProfileHmm& p) { return emission_array(p.insert_emissions); })
      .def("to_bytes", [](const ProfileHmm& p) { return py::bytes(write_profile(p)); })
      .def_static("from_bytes", [](const py::bytes& b) { return read_profile(std::string(b)); })
      .def(py::self == py::self);

  m.def(
      "build_profile",
      [](const Msa& msa, const std::string& columns, double symfrac, double pseudocount, const std::string& weighting) {
        return build_profile(msa, classify_columns(msa, policy_from(columns, symfrac)),
                             profile_config(pseudocount, weighting));
      },
      py::arg("alignment"), py::arg("columns") = "symfrac", py::arg("symfrac") = 0.5, py::arg("pseudocount") = 0.1,
      py::arg("weighting") = "uniform");

  m.def(
      "build_labels",
      [](const Msa& msa, const std::string& columns, double symfrac, double pseudocount, const std::string& weighting) {
        const auto cls = classify_columns(msa, policy_from(columns, symfrac));
        py::list out;
        for (const auto& l : build_all_labels(msa, cls, build_profile(msa, cls, profile_config(pseudocount, weighting))))
          out.append(label_dict(l));
        return out;
      },
      py::arg("alignment"), py::arg("columns") = "symfrac", py::arg("symfrac") = 0.5, py::arg("pseudocount") = 0.1,
      py::arg("weighting") = "uniform", "One dict per row: id, labels (n x 20), states (0 match, 1 insert).");

  m.def(
      "read_labels",
      [](const py::bytes& b) {
        py::list out;
        for (const auto& l : read_label_file(std::string(b))) out.append(label_dict(l));
        return out;
      },
      py::arg("data"));

  m.def(
      "kl_divergence",
      [](const std::vector<double>& p, const std::vector<double>& q) { return kl_divergence(p, q); }, py::arg("p"),
      py::arg("q"));
  m.def(
      "spearman", [](const std::vector<double>& p, const std::vector<double>& t) { return spearman(p, t); },
      py::arg("predictions"), py::arg("targets"));
  m.def(
      "contact_precision_at_l5",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> scores,
         const std::set<std::pair<std::uint32_t, std::uint32_t>>& contacts) {
        if (scores.ndim() != 2 || scores.shape(0) != scores.shape(1))
          throw Error(ErrorKind::ShapeMismatch, "scores must be a square L x L array");
        const auto L = static_cast<std::size_t>(scores.shape(0));
        return contact_precision_at_l5(std::span<const double>(scores.data(), L * L), contacts, L);
      },
      py::arg("scores"), py::arg("contacts"));

  py::class_<Encoder>(m, "Encoder")
      .def_static(
          "from_bytes",
          [](const py::bytes& b) { return Encoder{from_checkpoint(read_checkpoint(std::string(b)))}; },
          py::arg("data"), "Load a PPCK checkpoint; extra head tensors are ignored.")
      .def_static(
          "random",
          [](std::uint64_t seed, std::uint32_t layers, std::uint32_t heads, std::uint32_t hidden, std::uint32_t ff,
             std::uint32_t max_positions) {
            ModelConfig c;
            c.num_layers = layers;
            c.num_heads = heads;
            c.hidden_dim = hidden;
            c.ff_dim = ff;
            c.max_positions = max_positions;
            c.seed = seed;
            return Encoder{init_params<float>(c)};
          },
          py::arg("seed") = 0, py::arg("num_layers") = 2, py::arg("num_heads") = 4, py::arg("hidden_dim") = 64,
          py::arg("ff_dim") = 256, py::arg("max_positions") = 512)
      .def_property_readonly("parameter_count", [](const Encoder& e) { return e.params.parameter_count(); })
      .def("predict_profile", &Encoder::predict_profile, py::arg("sequence"),
           "Row-stochastic L x 20 profile prediction for an ungapped sequence.")
      .def("to_bytes", [](const Encoder& e) { return py::bytes(write_checkpoint(to_checkpoint(e.params))); });
}
