// Acceptance suite: one PASS/FAIL line per criterion.
//   profpred_acceptance            run all criteria
//   profpred_acceptance --only N   run criterion N

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>

#include "profpred/binary_io.hpp"
#include "profpred/downstream.hpp"
#include "profpred/labels.hpp"
#include "profpred/losses.hpp"
#include "profpred/model.hpp"
#include "profpred/msa.hpp"
#include "profpred/profile.hpp"
#include "profpred/seed.hpp"
#include "profpred/synthgen.hpp"
#include "profpred/training.hpp"

using namespace profpred;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  auto d = fs::temp_directory_path() / ("profpred_acceptance_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

Emission uniform_emission() {
  Emission e;
  e.fill(1.0 / kAlphabetSize);
  return e;
}

// 1 ------------------------------------------------------------------------

Outcome figure_one_labels() {
  const auto t0 = Clock::now();
  // Query PTHSLKQLDH over ten match columns: H and Q sit in insert columns,
  // two match columns are deleted.
  const auto msa = Msa::from_rows({"query", "c1", "c2", "c3"},
                                  {"PTHSLKQL-D-H", "PT-SLK-LADEH", "PS-SIK-LVDEH", "PT-ALR-LADEY"});
  const auto cls = classify_columns(msa, OccupancyThreshold{0.5});
  const auto hmm = build_profile(msa, cls, {0.1, Weighting::Uniform});
  const auto lab = build_labels(msa, 0, cls, hmm);

  bool ok = cls.match_count == 10 && lab.n() == 10;
  int from_insert = 0, from_match = 0;
  for (std::size_t i = 0; ok && i < lab.n(); ++i) {
    const bool insert = lab.states[i] == ResidueState::Insert;
    from_insert += insert;
    from_match += !insert;
    const auto& expected = insert ? hmm.insert_emissions[lab.source_node[i]] : hmm.match_emissions[lab.source_node[i]];
    ok = ok && lab.labels[i] == expected;
    ok = ok && insert == (i == 2 || i == 6);
    ok = ok && lab.source_node[i] != 6 && lab.source_node[i] != 8;
  }
  const double secs = seconds_since(t0);
  ok = ok && from_insert == 2 && from_match == 8 && secs < 1.0;
  return {ok, fmt("rows=%zu match=%d insert=%d (residues 3,7) deleted nodes absent, %.3fs", lab.n(), from_match,
                  from_insert, secs)};
}

// 2 ------------------------------------------------------------------------

Outcome profile_oracle() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(2024);
  const std::string alphabet = "ACDEFGHIKLMNPQRSTVWY-.X";
  double worst = 0.0;
  int built = 0;
  while (built < 200) {
    const std::size_t k = 1 + rng() % 5, m = 1 + rng() % 6;
    std::vector<std::string> ids, rows;
    for (std::size_t r = 0; r < k; ++r) {
      ids.push_back("s" + std::to_string(r));
      std::string row;
      for (std::size_t c = 0; c < m; ++c) row += alphabet[rng() % alphabet.size()];
      rows.push_back(row);
    }
    const double alpha = static_cast<double>(rng() % 5) * 0.25;

    // Brute-force counter.
    std::vector<int> node_of(m, -1);
    std::vector<bool> match(m);
    int matches = 0;
    for (std::size_t c = 0; c < m; ++c) {
      int filled = 0;
      for (const auto& row : rows) filled += row[c] != '-' && row[c] != '.';
      match[c] = 2 * filled >= static_cast<int>(k);
      if (match[c]) node_of[c] = matches++;
    }
    if (matches == 0) continue;
    ++built;
    std::vector<std::array<double, 20>> mc(matches, std::array<double, 20>{}), ic(matches, std::array<double, 20>{});
    int owner = 0;
    for (std::size_t c = 0; c < m; ++c) {
      if (match[c]) owner = node_of[c];
      for (const auto& row : rows) {
        const auto a = alphabet.find(row[c]);
        if (a < 20) (match[c] ? mc : ic)[owner][a] += 1.0;
      }
    }
    const auto hmm =
        build_profile(Msa::from_rows(ids, rows), classify_columns(Msa::from_rows(ids, rows), OccupancyThreshold{0.5}),
                      {alpha, Weighting::Uniform});
    if (static_cast<int>(hmm.length()) != matches) return {false, "match column count disagrees"};
    for (int j = 0; j < matches; ++j) {
      for (int which = 0; which < 2; ++which) {
        const auto& counts = which == 0 ? mc[j] : ic[j];
        double total = 0.0;
        for (double x : counts) total += x;
        for (int a = 0; a < 20; ++a) {
          double expect = 0.05;
          if (!(which == 1 && total == 0.0) && total + 20 * alpha > 0.0) expect = (counts[a] + alpha) / (total + 20 * alpha);
          const double got = which == 0 ? hmm.match_emissions[j][a] : hmm.insert_emissions[j][a];
          worst = std::max(worst, std::abs(got - expect));
        }
      }
    }
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-9 && secs < 10.0, fmt("200 alignments, max |diff| = %.3g, %.3fs", worst, secs)};
}

// 3 ------------------------------------------------------------------------

Outcome loss_identities() {
  std::mt19937_64 rng(3);
  std::gamma_distribution<double> g(0.4, 1.0);
  double min_kl = 1e300, max_self = 0.0;
  for (int t = 0; t < 10000; ++t) {
    Emission p, q;
    double sp = 0.0, sq = 0.0;
    for (int a = 0; a < 20; ++a) {
      sp += (p[a] = (t % 3 == 0 && a % 4 == 0) ? 0.0 : g(rng));
      sq += (q[a] = g(rng) + 1e-9);
    }
    if (sp == 0.0) p[0] = sp = 1.0;
    for (int a = 0; a < 20; ++a) {
      p[a] /= sp;
      q[a] /= sq;
    }
    if (t % 4 == 1) {
      // Near-identical pair.
      for (int a = 0; a < 20; ++a) q[a] = 0.999 * p[a] + 0.001 / 20.0;
    }
    min_kl = std::min(min_kl, kl_divergence(p, q));
    max_self = std::max(max_self, kl_divergence(q, q));
  }
  Emission hot{};
  hot[7] = 1.0;
  const double ln20_err = std::abs(kl_divergence(hot, uniform_emission()) - std::log(20.0));
  const bool joint_ok = joint_loss(2.7, 0.4, 1.0).value == 2.7 && joint_loss(2.7, 0.4, 0.0).value == 0.4;
  double balance_err = 0.0;
  for (int t = 0; t < 1000; ++t) {
    const double mlm = 0.01 + 5.0 * std::generate_canonical<double, 53>(rng);
    const double pp = 0.01 + 5.0 * std::generate_canonical<double, 53>(rng);
    const double l = calibrate_lambda(mlm, pp);
    balance_err = std::max(balance_err, std::abs(l * mlm - (1.0 - l) * pp));
  }
  const bool ok = min_kl >= 0.0 && max_self < 1e-12 && ln20_err <= 1e-9 && joint_ok && balance_err <= 1e-12;
  return {ok, fmt("min KL %.3g, max KL(p,p) %.3g, |KL(onehot,U)-ln20| %.3g, joint %s, balance err %.3g", min_kl,
                  max_self, ln20_err, joint_ok ? "exact" : "off", balance_err)};
}

// 4 ------------------------------------------------------------------------

Outcome gradient_check() {
  const auto t0 = Clock::now();
  auto cfg = ModelConfig::desk();
  cfg.seed = 4;
  const auto params = init_params<double>(cfg);

  std::mt19937_64 rng(44);
  std::gamma_distribution<double> g(0.5, 1.0);
  const std::vector<std::vector<Token>> seqs{{0, 5, 9, 3, 17, 2}, {11, 4, 4, 19, 8}};
  TrainingBatch batch;
  MaskingPolicy policy;
  policy.seed = 4;
  std::vector<std::vector<Token>> inputs;
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    const auto m = apply_masking(seqs[s], policy, s);
    SequenceTargets t;
    t.length = seqs[s].size();
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

  const std::vector<LossSelector> sel{{Objective::PP}, {Objective::MLM}, {Objective::JOINT, 0.5}};
  const auto reports = grad_check(params, batch, std::span<const LossSelector>(sel));
  const double secs = seconds_since(t0);
  bool ok = secs < 300.0;
  std::size_t entries = 0;
  for (const auto& r : reports) {
    ok = ok && r.passed && r.max_rel_error < 1e-3 && r.tensors.size() == params.tensors.size();
    for (const auto& t : r.tensors) entries += t.entries_checked;
  }
  return {ok, fmt("max rel error PP %.3g, MLM %.3g, JOINT %.3g over %zu tensors (%zu entries/objective), %.1fs",
                  reports[0].max_rel_error, reports[1].max_rel_error, reports[2].max_rel_error,
                  reports[0].tensors.size(), entries / 3, secs)};
}

// 5 ------------------------------------------------------------------------

Outcome masking_statistics() {
  std::vector<Token> toks(100000);
  std::mt19937_64 rng(5);
  for (auto& t : toks) t = static_cast<Token>(rng() % 20);
  MaskingPolicy policy;
  policy.seed = 55;
  const auto a = apply_masking(toks, policy, 0);
  const auto b = apply_masking(toks, policy, 0);
  const bool identical = a.tokens == b.tokens && a.positions == b.positions && a.targets == b.targets;

  // Action of each selected position, re-derived from the corrupted output: MASK
  // token, unchanged, or changed to a random residue. A random draw can land on
  // the original residue, so "unchanged" mixes keep and same-residue replacement.
  std::size_t masked = 0, changed = 0, unchanged = 0;
  for (std::size_t i = 0; i < a.positions.size(); ++i) {
    const Token now = a.tokens[a.positions[i]];
    if (now == tokens::kMask) ++masked;
    else if (now != a.targets[i]) ++changed;
    else ++unchanged;
  }
  const double n = static_cast<double>(a.positions.size());
  const double frac = n / static_cast<double>(toks.size());
  const double mask_share = masked / n;
  // Shares of random vs keep: changed = random*(19/20); unchanged = keep + random/20.
  const double random_est = changed / n * 20.0 / 19.0;
  const double keep_est = unchanged / n - random_est / 20.0;
  const bool ok = identical && std::abs(frac - 0.15) <= 0.005 && std::abs(mask_share - 0.8) <= 0.02 &&
                  std::abs(random_est - 0.1) <= 0.02 && std::abs(keep_est - 0.1) <= 0.02;
  return {ok, fmt("selected %.4f, mask %.4f, random %.4f, keep %.4f, repeat %s", frac, mask_share, random_est, keep_est,
                  identical ? "bit-identical" : "differs")};
}

// 6, 7 shared corpus ----------------------------------------------------------

struct SynthCorpus {
  std::vector<GroundTruthFamily> families;
  CorpusSplit split;
  std::map<std::string, std::pair<std::size_t, std::size_t>> where;  // id -> (family, row)
};

SynthCorpus pretraining_corpus(std::uint64_t seed, double concentration) {
  SynthCorpus c;
  std::vector<PretrainRecord> records;
  for (std::size_t f = 0; f < 5; ++f) {
    FamilyOptions opt;
    opt.family_id = "fam" + std::to_string(f);
    const auto truth = sample_profile(12, concentration, derive_seed(seed, {1, f}));
    c.families.push_back(sample_family(truth, 200, {0.05, 0.05, 0.5}, derive_seed(seed, {2, f}), opt));
    const auto& fam = c.families.back();
    for (std::size_t r = 0; r < fam.msa.k(); ++r) c.where[fam.msa.id(r)] = {f, r};
    auto recs = join_records(fam.msa, fam.labels);
    records.insert(records.end(), recs.begin(), recs.end());
  }
  c.split = split_corpus(std::move(records), 0.05);
  return c;
}

TrainConfig pretraining_config() {
  TrainConfig t;
  t.objective = Objective::PP;
  t.peak_lr = 0.00025;
  t.warmup_steps = 100;
  t.max_epochs = 1000;
  t.max_steps = 5000;
  t.max_tokens_per_batch = 512;
  t.seed = 6;
  t.log_interval = 100;
  t.eval_interval = 500;
  t.heldout_fraction = 0.05;
  return t;
}

// Mean over held-out residues of KL(true generating distribution || prediction).
double truth_kl(const ModelParams<float>& params, const SynthCorpus& c) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& rec : c.split.heldout) {
    const auto [f, r] = c.where.at(rec.id);
    const auto& fam = c.families[f];
    const auto out = forward(params, TokenBatch::pad({rec.tokens}), Mode::Eval);
    for (std::size_t i = 0; i < rec.tokens.size(); ++i) {
      const int node = fam.residue_nodes[r][i];
      const Emission truth = node < 0 ? uniform_emission() : fam.true_emissions[static_cast<std::size_t>(node)];
      Emission pred;
      double z = 0.0;
      for (int a = 0; a < 20; ++a) z += (pred[a] = out[0].profile_probs(static_cast<Eigen::Index>(i), a));
      for (auto& x : pred) x /= z;
      total += kl_divergence(truth, pred);
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

Outcome pretraining_convergence() {
  const auto t0 = Clock::now();
  const auto corpus = pretraining_corpus(606, 0.3);
  const auto cfg = pretraining_config();
  auto model = ModelConfig::desk();
  model.seed = 6;
  auto state = initial_train_state(model);
  const auto before = evaluate_heldout(state.params, corpus.split.heldout, cfg, 0.0);
  const double kl_before = truth_kl(state.params, corpus);
  const auto result = pretrain(corpus.split, cfg, std::move(state));
  const auto after = evaluate_heldout(result.state.params, corpus.split.heldout, cfg, 0.0);
  const double kl_after = truth_kl(result.state.params, corpus);
  const double secs = seconds_since(t0);
  const bool ok = result.state.step <= 5000 && after.pp < 0.5 * before.pp && after.pp < std::log(20.0) &&
                  kl_after <= 0.5 * kl_before && secs <= 1800.0;
  return {ok, fmt("%llu steps, held-out L_PP %.4f -> %.4f (%.1f%%), KL to truth %.4f -> %.4f (%.1f%%), %zu held-out, %.0fs",
                  static_cast<unsigned long long>(result.state.step), before.pp, after.pp, 100.0 * after.pp / before.pp,
                  kl_before, kl_after, 100.0 * kl_after / kl_before, corpus.split.heldout.size(), secs)};
}

// 7 ------------------------------------------------------------------------

Outcome downstream_direction() {
  const auto t0 = Clock::now();
  // At concentration 0.3 almost no column clears the conservation threshold
  // and TokenClass collapses to one label; 0.04 leaves about half conserved.
  const auto corpus = pretraining_corpus(707, 0.04);
  auto model = ModelConfig::desk();
  model.seed = 7;
  const auto pretrained = pretrain(corpus.split, pretraining_config(), initial_train_state(model)).state.params;

  std::string detail;
  bool ok = true;
  for (auto shape : {TaskShape::TokenClass, TaskShape::SeqClass}) {
    int wins = 0;
    detail += std::string(to_string(shape)) + " [";
    for (std::uint64_t rep = 0; rep < 5; ++rep) {
      // Fresh sequences from the same generating profiles.
      std::vector<GroundTruthFamily> fams;
      for (std::size_t f = 0; f < corpus.families.size(); ++f) {
        FamilyOptions opt;
        opt.family_id = "task" + std::to_string(rep) + "_fam" + std::to_string(f);
        fams.push_back(sample_family(corpus.families[f].true_emissions, 16, corpus.families[f].rates,
                                     derive_seed(77, {rep, f}), opt));
      }
      const auto ds = make_downstream_task(fams, shape, derive_seed(78, {rep}));
      FinetuneConfig fc;
      fc.steps = 40;
      fc.peak_lr = 0.0001;
      fc.max_tokens_per_batch = 256;
      fc.seed = derive_seed(79, {rep});
      auto random_cfg = model;
      random_cfg.seed = derive_seed(80, {rep});
      fc.checkpoint_id = "pp-pretrained";
      const auto pre = finetune(pretrained, ds, fc);
      fc.checkpoint_id = "random-init";
      const auto rnd = finetune(init_params<float>(random_cfg), ds, fc);
      wins += pre.report.value >= rnd.report.value;
      detail += fmt("%s%.3f/%.3f", rep ? " " : "", pre.report.value, rnd.report.value);
    }
    detail += fmt("] %d/5; ", wins);
    ok = ok && wins >= 4;
  }
  const double secs = seconds_since(t0);
  ok = ok && secs <= 3600.0;
  return {ok, detail + fmt("pretrained/random test metric, %.0fs", secs)};
}

// 8 ------------------------------------------------------------------------

Outcome determinism_and_resume() {
  std::vector<PretrainRecord> records;
  for (std::size_t f = 0; f < 3; ++f) {
    FamilyOptions opt;
    opt.family_id = "det" + std::to_string(f);
    const auto fam = sample_family(sample_profile(12, 0.3, 800 + f), 60, {0.05, 0.05, 0.5}, 810 + f, opt);
    auto recs = join_records(fam.msa, fam.labels);
    records.insert(records.end(), recs.begin(), recs.end());
  }
  const auto split = split_corpus(std::move(records), 0.1);
  TrainConfig cfg;
  cfg.objective = Objective::JOINT;
  cfg.warmup_steps = 10;
  cfg.max_epochs = 6;
  cfg.max_tokens_per_batch = 256;
  cfg.seed = 8;
  cfg.log_interval = 1;
  cfg.eval_interval = 10;
  cfg.checkpoint_interval = 10;
  cfg.lambda_policy = AutoBalance{10, 0.99};
  auto model = ModelConfig::desk();
  model.seed = 8;

  const auto a = scratch("run_a"), b = scratch("run_b"), c = scratch("run_c");
  const auto ra = pretrain(split, cfg, initial_train_state(model), {a.string(), {}, {}});
  pretrain(split, cfg, initial_train_state(model), {b.string(), {}, {}});
  const bool same_log = slurp(a / "metrics.tsv") == slurp(b / "metrics.tsv") && !ra.metrics_log.empty();
  const bool same_ckpt = slurp(a / "final.ppck") == slurp(b / "final.ppck");

  // Resume from a mid-run snapshot, starting from the log as it stood then.
  const std::uint64_t mid = (ra.state.step / 2) / 10 * 10;
  const auto snapshot = read_train_state(binio::read_file((a / ("state-" + std::to_string(mid) + ".ppts")).string()));
  std::istringstream full(slurp(a / "metrics.tsv"));
  std::string line, head;
  while (std::getline(full, line)) {
    if (!line.empty() && line[0] != '#' && std::stoull(line.substr(0, line.find('\t'))) > mid) break;
    head += line + "\n";
  }
  std::ofstream(c / "metrics.tsv", std::ios::binary) << head;
  std::ifstream held(a / "heldout.tsv");
  std::string held_head;
  while (std::getline(held, line)) {
    if (!line.empty() && line[0] != '#' && std::stoull(line.substr(0, line.find('\t'))) > mid) break;
    held_head += line + "\n";
  }
  std::ofstream(c / "heldout.tsv", std::ios::binary) << held_head;
  pretrain(split, cfg, snapshot, {c.string(), {}, {}});
  const bool resumed_log = slurp(c / "metrics.tsv") == slurp(a / "metrics.tsv");
  const bool resumed_heldout = slurp(c / "heldout.tsv") == slurp(a / "heldout.tsv");
  const bool resumed_ckpt = slurp(c / "final.ppck") == slurp(a / "final.ppck");
  const bool ok = same_log && same_ckpt && resumed_log && resumed_heldout && resumed_ckpt;
  return {ok, fmt("%llu steps; rerun log %s, final checkpoint %s; resume from step %llu: log %s, held-out log %s, "
                  "checkpoint %s",
                  static_cast<unsigned long long>(ra.state.step), same_log ? "identical" : "differs",
                  same_ckpt ? "identical" : "differs", static_cast<unsigned long long>(mid),
                  resumed_log ? "identical" : "differs", resumed_heldout ? "identical" : "differs",
                  resumed_ckpt ? "identical" : "differs")};
}

// 9 ------------------------------------------------------------------------

Outcome format_round_trips() {
  FamilyOptions opt;
  opt.family_id = "rt";
  const auto fam = sample_family(sample_profile(15, 0.5, 900), 40, {0.1, 0.1, 0.5}, 901, opt);
  const auto hmm = build_profile(fam.msa, fam.classes, {0.7, Weighting::Henikoff});
  const auto pphm = write_profile(hmm);
  const bool profile_ok = write_profile(read_profile(pphm)) == pphm;

  const auto pplb = write_label_file(build_all_labels(fam.msa, fam.classes, hmm));
  const bool labels_ok = write_label_file(read_label_file(pplb)) == pplb;

  auto cfg = ModelConfig::desk();
  cfg.seed = 9;
  const auto ppck = write_checkpoint(to_checkpoint(init_params<float>(cfg)));
  const bool ckpt_ok = write_checkpoint(read_checkpoint(ppck)) == ppck &&
                       write_checkpoint(to_checkpoint(from_checkpoint(read_checkpoint(ppck)))) == ppck;
  return {profile_ok && labels_ok && ckpt_ok,
          fmt("PPHM %zu bytes %s, PPLB %zu bytes %s, PPCK %zu bytes %s", pphm.size(), profile_ok ? "ok" : "differs",
              pplb.size(), labels_ok ? "ok" : "differs", ppck.size(), ckpt_ok ? "ok" : "differs")};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  int only = 0;
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--only") == 0 && i + 1 < argc) {
      only = std::atoi(argv[++i]);
    } else {
      std::fprintf(stderr, "usage: %s [--only N]\n", argv[0]);
      return 2;
    }
  }
  const std::vector<Criterion> criteria{
      {1, "label pipeline oracle", figure_one_labels},
      {2, "profile oracle equivalence", profile_oracle},
      {3, "loss identities", loss_identities},
      {4, "gradient check", gradient_check},
      {5, "masking statistics", masking_statistics},
      {6, "pre-training convergence", pretraining_convergence},
      {7, "directional downstream analog", downstream_direction},
      {8, "determinism and resumability", determinism_and_resume},
      {9, "format round-trips", format_round_trips},
  };
  int failed = 0, ran = 0;
  for (const auto& c : criteria) {
    if (only != 0 && c.id != only) continue;
    ++ran;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("%s criterion %d (%s): %s\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str());
    std::fflush(stdout);
    failed += !o.pass;
  }
  if (ran == 0) {
    std::fprintf(stderr, "no criterion %d\n", only);
    return 2;
  }
  return failed == 0 ? 0 : 1;
}
