#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "profpred/binary_io.hpp"
#include "profpred/corpus.hpp"
#include "profpred/downstream.hpp"
#include "profpred/error.hpp"
#include "profpred/labels.hpp"
#include "profpred/model.hpp"
#include "profpred/msa.hpp"
#include "profpred/profile.hpp"
#include "profpred/seed.hpp"
#include "profpred/synthgen.hpp"
#include "profpred/training.hpp"

using namespace profpred;
namespace fs = std::filesystem;

namespace {

using Settings = std::map<std::string, std::string>;

[[noreturn]] void usage_error(const std::string& msg) { throw Error(ErrorKind::Usage, msg); }

const Settings& defaults() {
  static const Settings d{
      // shared
      {"seed", "0"},
      {"out", ""},
      // alignment -> profile -> labels
      {"columns", "symfrac"},
      {"symfrac", "0.5"},
      {"pseudocount", "0.1"},
      {"weighting", "uniform"},
      // model
      {"num_layers", "2"},
      {"num_heads", "4"},
      {"hidden_dim", "64"},
      {"ff_dim", "256"},
      {"max_positions", "512"},
      {"dropout", "0"},
      // pre-training
      {"objective", "pp"},
      {"lr", "0"},
      {"warmup", "100"},
      {"max_epochs", "10"},
      {"max_steps", "0"},
      {"max_tokens", "1024"},
      {"checkpoint_interval", "0"},
      {"log_interval", "10"},
      {"eval_interval", "100"},
      {"heldout_fraction", "0.05"},
      {"mask_rate", "0.15"},
      {"lambda", "auto"},
      {"lambda_window", "100"},
      {"mlm_normalization", "length"},
      // synthetic data
      {"families", "5"},
      {"length", "12"},
      {"k", "200"},
      {"task_k", "40"},
      {"concentration", "0.3"},
      {"insert_open", "0.05"},
      {"delete_open", "0.05"},
      {"insert_extend", "0.5"},
      {"couplings", "3"},
      {"test_fraction", "0.2"},
      // fine-tuning / evaluation
      {"steps", "200"},
      {"finetune_lr", "0.0001"},
      {"finetune_max_tokens", "512"},
      {"min_separation", "6"},
  };
  return d;
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  const auto e = s.find_last_not_of(" \t\r\n");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

void apply_config_file(Settings& s, const std::string& path) {
  std::istringstream in(binio::read_file(path));
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) usage_error(path + ":" + std::to_string(lineno) + ": expected key=value");
    const auto key = trim(line.substr(0, eq));
    if (!defaults().count(key)) usage_error(path + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
    s[key] = trim(line.substr(eq + 1));
  }
}

double get_double(const Settings& s, const std::string& key) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s.at(key), &used);
    if (used != s.at(key).size() || !std::isfinite(v)) throw std::invalid_argument(key);
    return v;
  } catch (const std::logic_error&) {
    usage_error("'" + key + "' expects a number, got '" + s.at(key) + "'");
  }
}

std::uint64_t get_uint(const Settings& s, const std::string& key) {
  const auto& v = s.at(key);
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
    usage_error("'" + key + "' expects a non-negative integer, got '" + v + "'");
  }
  try {
    return std::stoull(v);
  } catch (const std::logic_error&) {
    usage_error("'" + key + "' is out of range");
  }
}

Objective get_objective(const Settings& s) {
  const auto& v = s.at("objective");
  if (v == "pp") return Objective::PP;
  if (v == "mlm") return Objective::MLM;
  if (v == "joint") return Objective::JOINT;
  usage_error("objective must be pp, mlm or joint");
}

ColumnPolicy get_policy(const Settings& s) {
  const auto& v = s.at("columns");
  if (v == "symfrac") return OccupancyThreshold{get_double(s, "symfrac")};
  if (v == "rf") return RfAnnotation{};
  if (v == "case") return InsertCase{};
  usage_error("columns must be symfrac, rf or case");
}

ProfileConfig get_profile_config(const Settings& s) {
  ProfileConfig c;
  c.pseudocount = get_double(s, "pseudocount");
  const auto& w = s.at("weighting");
  if (w == "uniform") c.weighting = Weighting::Uniform;
  else if (w == "henikoff") c.weighting = Weighting::Henikoff;
  else usage_error("weighting must be uniform or henikoff");
  return c;
}

ModelConfig get_model_config(const Settings& s) {
  ModelConfig c;
  c.num_layers = static_cast<std::uint32_t>(get_uint(s, "num_layers"));
  c.num_heads = static_cast<std::uint32_t>(get_uint(s, "num_heads"));
  c.hidden_dim = static_cast<std::uint32_t>(get_uint(s, "hidden_dim"));
  c.ff_dim = static_cast<std::uint32_t>(get_uint(s, "ff_dim"));
  c.max_positions = static_cast<std::uint32_t>(get_uint(s, "max_positions"));
  c.dropout_rate = get_double(s, "dropout");
  c.seed = get_uint(s, "seed");
  try {
    c.validate();
  } catch (const Error& e) {
    usage_error(e.what());
  }
  return c;
}

TrainConfig get_train_config(const Settings& s) {
  TrainConfig t;
  t.objective = get_objective(s);
  t.peak_lr = get_double(s, "lr");
  t.warmup_steps = get_uint(s, "warmup");
  t.max_epochs = static_cast<std::uint32_t>(get_uint(s, "max_epochs"));
  t.max_steps = get_uint(s, "max_steps");
  t.max_tokens_per_batch = get_uint(s, "max_tokens");
  t.seed = get_uint(s, "seed");
  t.checkpoint_interval = get_uint(s, "checkpoint_interval");
  t.log_interval = std::max<std::uint64_t>(1, get_uint(s, "log_interval"));
  t.eval_interval = get_uint(s, "eval_interval");
  t.heldout_fraction = get_double(s, "heldout_fraction");
  t.masking.mask_rate = get_double(s, "mask_rate");
  t.masking.seed = get_uint(s, "seed");
  if (s.at("lambda") == "auto") {
    t.lambda_policy = AutoBalance{std::max<std::uint64_t>(1, get_uint(s, "lambda_window")), 0.99};
  } else {
    t.lambda_policy = FixedLambda{get_double(s, "lambda")};
  }
  const auto& norm = s.at("mlm_normalization");
  if (norm == "length") t.mlm_normalization = MlmNormalization::SequenceLength;
  else if (norm == "mask") t.mlm_normalization = MlmNormalization::MaskCount;
  else usage_error("mlm_normalization must be length or mask");
  try {
    t.validate();
  } catch (const Error& e) {
    usage_error(e.what());
  }
  return t;
}

void print_resolved(const std::string& command, const Settings& s, const std::vector<std::string>& keys) {
  std::cout << "[config] command=" << command << "\n";
  for (const auto& k : keys) std::cout << "[config] " << k << "=" << s.at(k) << "\n";
  std::cout.flush();
}

std::string require_out(const Settings& s) {
  const auto& out = s.at("out");
  if (out.empty()) usage_error("--out DIR is required");
  fs::create_directories(out);
  return out;
}

Msa load_alignment(const std::string& path) {
  const auto text = binio::read_file(path);
  std::size_t i = 0;
  while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
  if (text.compare(i, 11, "# STOCKHOLM") == 0) return parse_stockholm(text);
  return parse_aligned_fasta(text);
}

std::size_t worker_count(std::size_t jobs) {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("PP_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v < 1) usage_error("PP_THREADS must be a positive integer");
    n = std::min<std::size_t>(n, static_cast<std::size_t>(v));
  }
  return std::max<std::size_t>(1, std::min(n, jobs));
}

/// Runs job(i) for every input on a small pool. The first failure (by input
/// order) is rethrown after all workers finish.
void run_pool(std::size_t jobs, const std::function<void(std::size_t)>& job) {
  std::vector<std::exception_ptr> errors(jobs);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next++) < jobs;) {
      try {
        job(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  const auto n = worker_count(jobs);
  for (std::size_t t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

std::string stem(const std::string& path) { return fs::path(path).stem().string(); }

// ---------------------------------------------------------------------------

int cmd_parse(const Settings& s, const std::vector<std::string>& inputs) {
  print_resolved("parse", s, {"columns", "symfrac"});
  const auto policy = get_policy(s);
  std::cout << "file\tk\tm\tmatch_columns\tmean_occupancy\tresidues\n";
  for (const auto& path : inputs) {
    const auto msa = load_alignment(path);
    double occ = 0.0;
    std::size_t residues = 0;
    for (std::size_t j = 1; j <= msa.m(); ++j) occ += column_occupancy(msa, j);
    for (std::size_t r = 0; r < msa.k(); ++r) residues += msa.residue_count(r);
    std::string matches = "-";
    try {
      matches = std::to_string(classify_columns(msa, policy).match_count);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::NoMatchColumns && e.kind() != ErrorKind::MissingAnnotation) throw;
    }
    std::printf("%s\t%zu\t%zu\t%s\t%.4f\t%zu\n", path.c_str(), msa.k(), msa.m(), matches.c_str(),
                occ / static_cast<double>(msa.m()), residues);
  }
  return 0;
}

int cmd_profile(const Settings& s, const std::vector<std::string>& inputs) {
  print_resolved("profile", s, {"columns", "symfrac", "pseudocount", "weighting", "out"});
  const auto out = require_out(s);
  const auto policy = get_policy(s);
  const auto pc = get_profile_config(s);
  std::vector<std::size_t> lengths(inputs.size());
  run_pool(inputs.size(), [&](std::size_t i) {
    const auto msa = load_alignment(inputs[i]);
    const auto hmm = build_profile(msa, classify_columns(msa, policy), pc);
    binio::write_file(out + "/" + stem(inputs[i]) + ".pphm", write_profile(hmm));
    lengths[i] = hmm.length();
  });
  for (std::size_t i = 0; i < inputs.size(); ++i)
    std::printf("%s\t%s.pphm\tnodes=%zu\n", inputs[i].c_str(), stem(inputs[i]).c_str(), lengths[i]);
  return 0;
}

int cmd_labels(const Settings& s, const std::vector<std::string>& inputs) {
  print_resolved("labels", s, {"columns", "symfrac", "pseudocount", "weighting", "out"});
  const auto out = require_out(s);
  const auto policy = get_policy(s);
  const auto pc = get_profile_config(s);
  std::vector<std::size_t> counts(inputs.size()), all_insert(inputs.size());
  run_pool(inputs.size(), [&](std::size_t i) {
    const auto msa = load_alignment(inputs[i]);
    const auto cls = classify_columns(msa, policy);
    const auto labels = build_all_labels(msa, cls, build_profile(msa, cls, pc));
    binio::write_file(out + "/" + stem(inputs[i]) + ".pplb", write_label_file(labels));
    binio::write_file(out + "/" + stem(inputs[i]) + ".fasta", write_aligned_fasta(msa));
    counts[i] = labels.size();
    all_insert[i] = static_cast<std::size_t>(std::count_if(labels.begin(), labels.end(), [](const auto& l) { return l.all_insert(); }));
  });
  for (std::size_t i = 0; i < inputs.size(); ++i)
    std::printf("%s\t%s.pplb\tsequences=%zu\tall_insert=%zu\n", inputs[i].c_str(), stem(inputs[i]).c_str(), counts[i],
                all_insert[i]);
  return 0;
}

int cmd_synth(const Settings& s) {
  print_resolved("synth", s,
                 {"seed", "families", "length", "k", "task_k", "concentration", "insert_open", "delete_open",
                  "insert_extend", "couplings", "min_separation", "test_fraction", "symfrac", "pseudocount", "out"});
  const auto out = require_out(s);
  const auto seed = get_uint(s, "seed");
  const auto n_fam = get_uint(s, "families");
  const auto len = get_uint(s, "length");
  const IndelRates rates{get_double(s, "insert_open"), get_double(s, "delete_open"), get_double(s, "insert_extend")};
  const auto min_sep = get_uint(s, "min_separation");
  fs::create_directories(out + "/corpus");
  fs::create_directories(out + "/tasks");

  std::vector<GroundTruthFamily> task_families;
  std::string sequences;
  for (std::uint64_t f = 0; f < n_fam; ++f) {
    FamilyOptions opt;
    opt.family_id = "fam" + std::to_string(f);
    opt.label_pseudocount = get_double(s, "pseudocount");
    opt.label_symfrac = get_double(s, "symfrac");
    opt.couplings = sample_couplings(len, get_uint(s, "couplings"), min_sep, derive_seed(seed, {0x5c, f}));
    const auto truth = sample_profile(len, get_double(s, "concentration"), derive_seed(seed, {0x5a, f}));
    const auto fam = sample_family(truth, get_uint(s, "k"), rates, derive_seed(seed, {0x5b, f}), opt);
    binio::write_file(out + "/corpus/" + fam.id + ".fasta", write_aligned_fasta(fam.msa));
    binio::write_file(out + "/corpus/" + fam.id + ".pplb", write_label_file(fam.labels));
    binio::write_file(out + "/corpus/" + fam.id + ".pphm", write_profile(fam.profile));

    // Downstream sequences come from the same generator but are disjoint from the corpus.
    opt.family_id = "task_fam" + std::to_string(f);
    task_families.push_back(sample_family(truth, get_uint(s, "task_k"), rates, derive_seed(seed, {0x5d, f}), opt));
    const auto& tf = task_families.back();
    for (std::size_t r = 0; r < tf.msa.k(); ++r) sequences += ">" + tf.msa.id(r) + "\n" + tf.msa.degap(r).residues + "\n";
  }
  binio::write_file(out + "/tasks/sequences.fasta", sequences);
  TaskOptions topt;
  topt.test_fraction = get_double(s, "test_fraction");
  topt.min_separation = min_sep;
  for (auto shape : {TaskShape::TokenClass, TaskShape::SeqRegression, TaskShape::SeqClass, TaskShape::Contact}) {
    const auto ds = make_downstream_task(task_families, shape, derive_seed(seed, {0x5e}), topt);
    binio::write_file(out + "/tasks/" + std::string(to_string(shape)) + ".tsv", write_manifest(ds));
    std::printf("tasks/%s.tsv\ttrain=%zu\ttest=%zu\n", std::string(to_string(shape)).c_str(), ds.count(Split::Train),
                ds.count(Split::Test));
  }
  std::printf("corpus\tfamilies=%llu\tsequences_per_family=%llu\n", static_cast<unsigned long long>(n_fam),
              static_cast<unsigned long long>(get_uint(s, "k")));
  return 0;
}

std::unordered_map<std::string, std::string> load_sequences(const std::string& path) {
  std::unordered_map<std::string, std::string> out;
  std::istringstream in(binio::read_file(path));
  std::string line, id;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '>') {
      id = line.substr(1, line.find_first_of(" \t") - 1);
      if (out.count(id)) throw Error(ErrorKind::MalformedRecord, "duplicate sequence id '" + id + "'");
      out[id];
    } else {
      if (id.empty()) throw Error(ErrorKind::MalformedRecord, "sequence data before the first header");
      out[id] += line;
    }
  }
  return out;
}

int cmd_pretrain(const Settings& s, const std::string& corpus_dir, const std::string& resume) {
  print_resolved("pretrain", s,
                 {"seed", "objective", "lr", "warmup", "max_epochs", "max_steps", "max_tokens", "checkpoint_interval",
                  "log_interval", "eval_interval", "heldout_fraction", "mask_rate", "lambda", "lambda_window",
                  "mlm_normalization", "num_layers", "num_heads", "hidden_dim", "ff_dim", "max_positions", "dropout",
                  "out"});
  if (corpus_dir.empty()) usage_error("--corpus DIR is required");
  const auto out = require_out(s);
  const auto cfg = get_train_config(s);
  const auto model = get_model_config(s);
  std::printf("[config] resolved_lr=%.9g\n", cfg.resolved_lr());
  const auto split = split_corpus(load_corpus_dir(corpus_dir), cfg.heldout_fraction);
  std::printf("corpus\ttrain=%zu\theldout=%zu\n", split.train.size(), split.heldout.size());
  std::fflush(stdout);

  TrainState state = initial_train_state(model);
  if (!resume.empty()) {
    state = read_train_state(binio::read_file(resume));
    if (!(state.params.config == model)) throw Error(ErrorKind::ConfigMismatch, "resume state was trained with a different model config");
  }
  const auto result = pretrain(split, cfg, std::move(state), {out, {}, {}});
  if (!result.heldout.empty()) {
    const auto& h = result.heldout.back();
    std::printf("final\tstep=%llu\theldout_loss=%.6f\theldout_L_PP=%.6f\n", static_cast<unsigned long long>(result.state.step),
                h.loss, h.pp);
  } else {
    std::printf("final\tstep=%llu\n", static_cast<unsigned long long>(result.state.step));
  }
  return 0;
}

void emit_report(const Settings& s, const EvalReport& r) {
  const auto line = format_report(r);
  std::cout << line << "\n";
  if (!s.at("out").empty()) {
    fs::create_directories(s.at("out"));
    std::ofstream f(s.at("out") + "/results.tsv", std::ios::app | std::ios::binary);
    f << line << "\n";
  }
}

int cmd_finetune(const Settings& s, const std::string& checkpoint, const std::string& task,
                 const std::string& seqs) {
  print_resolved("finetune", s,
                 {"seed", "steps", "finetune_lr", "finetune_max_tokens", "min_separation", "num_layers", "num_heads",
                  "hidden_dim", "ff_dim", "max_positions", "out"});
  if (task.empty() || seqs.empty()) usage_error("--task MANIFEST and --sequences FASTA are required");
  const auto out = require_out(s);
  const auto ds = read_manifest(binio::read_file(task), load_sequences(seqs));
  FinetuneConfig fc;
  fc.steps = get_uint(s, "steps");
  fc.peak_lr = get_double(s, "finetune_lr");
  fc.max_tokens_per_batch = get_uint(s, "finetune_max_tokens");
  fc.seed = get_uint(s, "seed");
  fc.min_separation = get_uint(s, "min_separation");
  ModelParams<float> trunk;
  if (checkpoint.empty() || checkpoint == "random") {
    trunk = init_params<float>(get_model_config(s));
    fc.checkpoint_id = "random-init";
  } else {
    trunk = from_checkpoint(read_checkpoint(binio::read_file(checkpoint)));
    fc.checkpoint_id = fs::path(checkpoint).filename().string();
  }
  const auto result = finetune(trunk, ds, fc);
  binio::write_file(out + "/finetuned-" + std::string(to_string(ds.shape)) + ".ppck",
                    write_checkpoint(to_checkpoint(result.model)));
  emit_report(s, result.report);
  return 0;
}

int cmd_eval(const Settings& s, const std::string& checkpoint, const std::string& task, const std::string& seqs) {
  print_resolved("eval", s, {"seed", "min_separation", "out"});
  if (checkpoint.empty() || task.empty() || seqs.empty()) {
    usage_error("--checkpoint PPCK, --task MANIFEST and --sequences FASTA are required");
  }
  const auto ds = read_manifest(binio::read_file(task), load_sequences(seqs));
  const auto model = finetune_model_from_checkpoint(read_checkpoint(binio::read_file(checkpoint)));
  if (model.shape != ds.shape) throw Error(ErrorKind::ConfigMismatch, "checkpoint head does not match the task shape");
  emit_report(s, evaluate(model, ds, fs::path(checkpoint).filename().string(), get_uint(s, "seed"),
                          get_uint(s, "min_separation")));
  return 0;
}

int cmd_gradcheck(const Settings& s, double tolerance, std::size_t sample) {
  print_resolved("gradcheck", s,
                 {"seed", "num_layers", "num_heads", "hidden_dim", "ff_dim", "max_positions", "mlm_normalization"});
  auto cfg = get_model_config(s);
  cfg.dropout_rate = 0.0;
  const auto params = init_params<double>(cfg);
  const auto seed = get_uint(s, "seed");
  std::mt19937_64 rng(derive_seed(seed, {0x6c}));
  std::gamma_distribution<double> g(0.5, 1.0);
  MaskingPolicy policy;
  policy.seed = seed;
  TrainingBatch batch;
  std::vector<std::vector<Token>> inputs;
  for (std::size_t b = 0; b < 2; ++b) {
    std::vector<Token> toks(std::min<std::size_t>(6 - b, cfg.max_positions));
    for (auto& t : toks) t = static_cast<Token>(rng() % kAlphabetSize);
    const auto m = apply_masking(toks, policy, b);
    SequenceTargets t;
    t.length = toks.size();
    for (std::size_t i = 0; i < t.length; ++i) {
      Emission e;
      double z = 0.0;
      for (auto& x : e) z += (x = g(rng) + 1e-3);
      for (auto& x : e) x /= z;
      t.profile.push_back(e);
    }
    t.mask_positions = m.positions;
    t.mask_tokens = m.targets;
    inputs.push_back(m.tokens);
    batch.targets.push_back(std::move(t));
  }
  batch.inputs = TokenBatch::pad(inputs);
  const auto norm = s.at("mlm_normalization") == "mask" ? MlmNormalization::MaskCount : MlmNormalization::SequenceLength;
  const std::vector<LossSelector> sel{{Objective::PP, 0.5, norm}, {Objective::MLM, 0.5, norm}, {Objective::JOINT, 0.5, norm}};
  GradCheckOptions opt;
  opt.tolerance = tolerance;
  opt.max_entries_per_tensor = sample;
  opt.sample_seed = seed;
  const auto reports = grad_check(params, batch, std::span<const LossSelector>(sel), opt);
  const char* names[] = {"pp", "mlm", "joint"};
  bool ok = true;
  std::printf("objective\ttensor\tentries\tmax_rel_error\tmax_abs_error\tstatus\n");
  for (std::size_t r = 0; r < reports.size(); ++r) {
    for (const auto& t : reports[r].tensors) {
      std::printf("%s\t%s\t%zu\t%.3e\t%.3e\t%s\n", names[r], t.name.c_str(), t.entries_checked, t.max_rel_error,
                  t.max_abs_error, t.passed ? "ok" : "FAIL");
    }
    std::printf("%s\tall\t-\t%.3e\t-\t%s\n", names[r], reports[r].max_rel_error, reports[r].passed ? "ok" : "FAIL");
    ok = ok && reports[r].passed;
  }
  if (!ok) throw Error(ErrorKind::NonFiniteGradient, "analytic gradient disagrees with finite differences");
  return 0;
}

int exit_code(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::Usage: return 2;
    case ErrorCategory::Data: return 3;
    case ErrorCategory::Numerical: return 4;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Profile-prediction pre-training pipeline"};
  app.require_subcommand(1);

  struct Common {
    std::string config;
    std::map<std::string, std::string> flags;
  } common;
  std::vector<std::string> inputs;
  std::string corpus, resume, checkpoint, task, sequences;
  double tolerance = 1e-3;
  std::size_t sample = 0;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "key=value configuration file");
    for (auto [flag, key] : std::vector<std::pair<std::string, std::string>>{{"--seed", "seed"},
                                                                             {"--objective", "objective"},
                                                                             {"--lr", "lr"},
                                                                             {"--symfrac", "symfrac"},
                                                                             {"--pseudocount", "pseudocount"},
                                                                             {"--max-tokens", "max_tokens"},
                                                                             {"--out", "out"}}) {
      sub->add_option_function<std::string>(flag, [&common, key = key](const std::string& v) { common.flags[key] = v; });
    }
  };

  auto* parse = app.add_subcommand("parse", "validate alignments and print statistics");
  auto* profile = app.add_subcommand("profile", "build PPHM profiles from alignments");
  auto* labels = app.add_subcommand("labels", "build PPLB label files from alignments");
  auto* synth = app.add_subcommand("synth", "write a synthetic corpus and downstream task manifests");
  auto* pre = app.add_subcommand("pretrain", "pre-train on a corpus directory");
  auto* ft = app.add_subcommand("finetune", "fine-tune on a task manifest and report");
  auto* ev = app.add_subcommand("eval", "evaluate a fine-tuned checkpoint");
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient check");
  for (auto* sub : {parse, profile, labels, synth, pre, ft, ev, gc}) add_common(sub);
  for (auto* sub : {parse, profile, labels}) sub->add_option("alignments", inputs, "alignment files")->required();
  pre->add_option("--corpus", corpus, "directory of <name>.pplb + <name>.fasta");
  pre->add_option("--resume", resume, "PPTS train state to continue from");
  for (auto* sub : {ft, ev}) {
    sub->add_option("--checkpoint", checkpoint, "PPCK checkpoint (finetune: 'random' for a fresh trunk)");
    sub->add_option("--task", task, "task manifest");
    sub->add_option("--sequences", sequences, "FASTA of task sequences");
  }
  gc->add_option("--tolerance", tolerance, "maximum relative error");
  gc->add_option("--sample", sample, "entries per tensor (0 = all)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error [usage]: " << e.what() << "\n";
    return 2;
  }

  try {
    Settings s = defaults();
    if (!common.config.empty()) apply_config_file(s, common.config);
    for (const auto& [k, v] : common.flags) s[k] = v;
    get_uint(s, "seed");

    if (parse->parsed()) return cmd_parse(s, inputs);
    if (profile->parsed()) return cmd_profile(s, inputs);
    if (labels->parsed()) return cmd_labels(s, inputs);
    if (synth->parsed()) return cmd_synth(s);
    if (pre->parsed()) return cmd_pretrain(s, corpus, resume);
    if (ft->parsed()) return cmd_finetune(s, checkpoint, task, sequences);
    if (ev->parsed()) return cmd_eval(s, checkpoint, task, sequences);
    if (gc->parsed()) return cmd_gradcheck(s, tolerance, sample);
  } catch (const Error& e) {
    std::cerr << "error [" << to_string(e.category()) << "]: " << e.what() << "\n";
    return exit_code(e.category());
  } catch (const std::exception& e) {
    std::cerr << "error [data]: " << e.what() << "\n";
    return 3;
  }
  return 2;
}
