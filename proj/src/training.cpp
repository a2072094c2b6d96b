#include "profpred/training.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>

#include "profpred/binary_io.hpp"
#include "profpred/error.hpp"
#include "profpred/seed.hpp"

namespace profpred {

double default_peak_lr(Objective objective) { return objective == Objective::PP ? 0.00025 : 0.0001; }

void TrainConfig::validate() const {
  if (!(resolved_lr() > 0.0)) throw Error(ErrorKind::InvalidConfig, "peak learning rate must be positive");
  if (warmup_steps < 1) throw Error(ErrorKind::InvalidConfig, "warmup_steps must be >= 1");
  if (max_tokens_per_batch == 0) throw Error(ErrorKind::InvalidConfig, "max_tokens_per_batch must be positive");
  if (log_interval == 0) throw Error(ErrorKind::InvalidConfig, "log_interval must be >= 1");
  if (!(heldout_fraction >= 0.0 && heldout_fraction < 1.0)) {
    throw Error(ErrorKind::InvalidConfig, "heldout_fraction must be in [0, 1)");
  }
  masking.validate();
}

double lr_at_step(std::uint64_t step, std::uint64_t warmup_steps, double peak_lr) {
  if (warmup_steps == 0 || step >= warmup_steps) return peak_lr;
  return peak_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
}

template <class T>
void adam_update(ModelParams<T>& params, const ModelParams<T>& grads, AdamMoments<T>& moments, std::uint64_t step,
                 double lr, const AdamConstants& c) {
  if (grads.tensors.size() != params.tensors.size()) throw Error(ErrorKind::ShapeMismatch, "gradient layout mismatch");
  for (const auto& g : grads.tensors) {
    if (!g.value.allFinite()) throw Error(ErrorKind::NonFiniteGradient, "non-finite gradient in tensor '" + g.name + "'");
  }
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(step));
  for (std::size_t t = 0; t < params.tensors.size(); ++t) {
    auto& p = params.tensors[t].value;
    auto& m = moments.first.tensors[t].value;
    auto& v = moments.second.tensors[t].value;
    const auto& g = grads.tensors[t].value;
    if (p.size() != g.size()) throw Error(ErrorKind::ShapeMismatch, "gradient shape mismatch for '" + params.tensors[t].name + "'");
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      const double gi = g.data()[i];
      const double mi = c.beta1 * static_cast<double>(m.data()[i]) + (1.0 - c.beta1) * gi;
      const double vi = c.beta2 * static_cast<double>(v.data()[i]) + (1.0 - c.beta2) * gi * gi;
      m.data()[i] = static_cast<T>(mi);
      v.data()[i] = static_cast<T>(vi);
      const double update = lr * (mi / bc1) / (std::sqrt(vi / bc2) + c.epsilon);
      p.data()[i] = static_cast<T>(static_cast<double>(p.data()[i]) - update);
    }
  }
}

template void adam_update<float>(ModelParams<float>&, const ModelParams<float>&, AdamMoments<float>&, std::uint64_t,
                                 double, const AdamConstants&);
template void adam_update<double>(ModelParams<double>&, const ModelParams<double>&, AdamMoments<double>&,
                                  std::uint64_t, double, const AdamConstants&);

std::vector<std::vector<std::size_t>> make_dynamic_batches(std::span<const std::size_t> lengths, std::size_t max_tokens,
                                                           std::optional<std::uint64_t> seed) {
  std::vector<std::size_t> order(lengths.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (lengths[i] > max_tokens) {
      throw Error(ErrorKind::RecordTooLong, "record " + std::to_string(i) + " of length " + std::to_string(lengths[i]) +
                                                " exceeds the token budget " + std::to_string(max_tokens));
    }
    order[i] = i;
  }
  if (seed) {
    std::mt19937_64 rng(derive_seed(*seed, {0}));
    std::shuffle(order.begin(), order.end(), rng);
  }

  std::vector<std::vector<std::size_t>> batches;
  std::vector<std::size_t> current;
  std::size_t widest = 0;
  for (std::size_t idx : order) {
    const std::size_t w = std::max(widest, lengths[idx]);
    if (!current.empty() && (current.size() + 1) * w > max_tokens) {
      batches.push_back(std::move(current));
      current.clear();
      widest = 0;
    }
    current.push_back(idx);
    widest = std::max(widest, lengths[idx]);
  }
  if (!current.empty()) batches.push_back(std::move(current));

  if (seed) {
    std::mt19937_64 rng(derive_seed(*seed, {1}));
    std::shuffle(batches.begin(), batches.end(), rng);
  }
  return batches;
}

namespace {

void write_moments(binio::Writer& w, const ModelParams<float>& p) { write_tensors(w, p.tensors); }

ModelParams<float> read_like(binio::Reader& r, const ModelParams<float>& layout_of) {
  ModelParams<float> out;
  out.config = layout_of.config;
  out.tensors = read_tensors(r);
  if (out.tensors.size() != layout_of.tensors.size()) throw Error(ErrorKind::BadFormat, "moment layout mismatch");
  return out;
}

}  // namespace

std::string write_train_state(const TrainState& s) {
  binio::Writer w;
  w.magic(kTrainStateMagic);
  w.u32(kTrainStateVersion);
  w.u64(s.step);
  w.u32(s.epoch);
  w.u64(s.batch_in_epoch);
  w.f64(s.balance.lambda);
  w.f64(s.balance.running_mlm);
  w.f64(s.balance.running_pp);
  w.u64(s.balance.observed);
  w.f64(s.best_heldout);
  write_config(w, s.params.config);
  write_tensors(w, s.params.tensors);
  write_moments(w, s.moments.first);
  write_moments(w, s.moments.second);
  return w.take();
}

TrainState read_train_state(std::string_view bytes) {
  binio::Reader r(bytes);
  r.expect_magic(kTrainStateMagic);
  if (const auto v = r.u32(); v != kTrainStateVersion) {
    throw Error(ErrorKind::BadFormat, "unsupported PPTS version " + std::to_string(v));
  }
  TrainState s;
  s.step = r.u64();
  s.epoch = r.u32();
  s.batch_in_epoch = r.u64();
  s.balance.lambda = r.f64();
  s.balance.running_mlm = r.f64();
  s.balance.running_pp = r.f64();
  s.balance.observed = r.u64();
  s.best_heldout = r.f64();
  Checkpoint ck;
  ck.config = read_config(r);
  ck.tensors = read_tensors(r);
  s.params = from_checkpoint(ck);
  s.moments.first = read_like(r, s.params);
  s.moments.second = read_like(r, s.params);
  if (!r.at_end()) throw Error(ErrorKind::BadFormat, "trailing bytes after PPTS record");
  return s;
}

CorpusSplit split_corpus(std::vector<PretrainRecord> records, double heldout_fraction) {
  CorpusSplit split;
  for (auto& rec : records) {
    (is_heldout(rec.id, heldout_fraction) ? split.heldout : split.train).push_back(std::move(rec));
  }
  return split;
}

TrainingBatch make_training_batch(std::span<const PretrainRecord> records, std::span<const std::size_t> indices,
                                  const TrainConfig& config, std::uint32_t epoch) {
  const bool masked = config.objective != Objective::PP;
  const bool profile = config.objective != Objective::MLM;
  std::vector<std::vector<Token>> inputs;
  TrainingBatch batch;
  for (std::size_t idx : indices) {
    const auto& rec = records[idx];
    SequenceTargets tgt;
    tgt.length = rec.tokens.size();
    if (profile) tgt.profile = rec.labels.labels;
    if (masked) {
      auto mt = apply_masking(rec.tokens, config.masking, derive_seed(config.seed, {epoch, idx}));
      inputs.push_back(std::move(mt.tokens));
      tgt.mask_positions = std::move(mt.positions);
      tgt.mask_tokens = std::move(mt.targets);
    } else {
      inputs.push_back(rec.tokens);
    }
    batch.targets.push_back(std::move(tgt));
  }
  batch.inputs = TokenBatch::pad(inputs);
  return batch;
}

HeldoutStats evaluate_heldout(const ModelParams<float>& params, std::span<const PretrainRecord> heldout,
                              const TrainConfig& config, double lambda) {
  HeldoutStats out;
  if (heldout.empty()) return out;
  std::vector<std::size_t> lengths;
  for (const auto& r : heldout) lengths.push_back(r.tokens.size());
  const auto plan = make_dynamic_batches(lengths, config.max_tokens_per_batch, std::nullopt);
  const std::array<LossSelector, 2> selectors{LossSelector{Objective::PP, 0.0, config.mlm_normalization},
                                              LossSelector{Objective::MLM, 1.0, config.mlm_normalization}};
  double pp = 0.0, mlm = 0.0;
  // A fixed pseudo-epoch keeps the held-out masks identical across evaluations.
  constexpr std::uint32_t kHeldoutEpoch = 0xffffffffu;
  for (const auto& idx : plan) {
    const auto batch = make_training_batch(heldout, idx, config, kHeldoutEpoch);
    const auto values = loss_values(params, batch, selectors, Mode::Eval);
    const double weight = static_cast<double>(idx.size());
    pp += values[0] * weight;
    mlm += values[1] * weight;
  }
  const double n = static_cast<double>(heldout.size());
  const double nan = std::numeric_limits<double>::quiet_NaN();
  out.pp = config.objective == Objective::MLM ? nan : pp / n;
  out.mlm = config.objective == Objective::PP ? nan : mlm / n;
  switch (config.objective) {
    case Objective::PP: out.loss = out.pp; break;
    case Objective::MLM: out.loss = out.mlm; break;
    case Objective::JOINT: out.loss = joint_loss(out.mlm, out.pp, lambda).value; break;
  }
  return out;
}

TrainState initial_train_state(const ModelConfig& model_config) {
  TrainState s;
  s.params = init_params<float>(model_config);
  s.moments = AdamMoments<float>::zeros_like(s.params);
  s.best_heldout = std::numeric_limits<double>::infinity();
  return s;
}

std::string format_metrics_line(const StepStats& s) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%llu\t%.9g\t%.9g\t%.9g\t%.9g\t%.9g\n", static_cast<unsigned long long>(s.step), s.lr,
                s.lambda, s.mlm, s.pp, s.joint);
  return buf;
}

namespace {

class OutputSink {
 public:
  OutputSink(const std::string& dir, bool resumed) : dir_(dir) {
    if (dir_.empty()) return;
    std::filesystem::create_directories(dir_);
    const auto mode = resumed ? std::ios::app : std::ios::trunc;
    metrics_.open(dir_ + "/metrics.tsv", std::ios::out | mode);
    heldout_.open(dir_ + "/heldout.tsv", std::ios::out | mode);
    if (!metrics_ || !heldout_) throw Error(ErrorKind::Io, "cannot open metric logs in '" + dir_ + "'");
    if (!resumed) {
      metrics_ << "#step\tlr\tlambda\tL_MLM\tL_PP\tL_JOINT\n";
      heldout_ << "#step\tloss\tL_PP\tL_MLM\n";
    }
  }

  void metrics(const std::string& line) {
    if (metrics_.is_open()) metrics_ << line << std::flush;
  }
  void heldout(const HeldoutStats& h) {
    if (!heldout_.is_open()) return;
    char buf[160];
    std::snprintf(buf, sizeof buf, "%llu\t%.9g\t%.9g\t%.9g\n", static_cast<unsigned long long>(h.step), h.loss, h.pp,
                  h.mlm);
    heldout_ << buf << std::flush;
  }
  void file(const std::string& name, const std::string& bytes) {
    if (!dir_.empty()) binio::write_file(dir_ + "/" + name, bytes);
  }

 private:
  std::string dir_;
  std::ofstream metrics_;
  std::ofstream heldout_;
};

}  // namespace

PretrainResult pretrain(const CorpusSplit& corpus, const TrainConfig& config, TrainState state,
                        const PretrainOptions& options) {
  config.validate();
  if (corpus.train.empty()) throw Error(ErrorKind::EmptySplit, "training split is empty");
  for (const auto& rec : corpus.train) {
    if (rec.tokens.size() > state.params.config.max_positions) {
      throw Error(ErrorKind::LengthExceeded, "record '" + rec.id + "' longer than max_positions");
    }
  }

  LambdaBalancer balancer(config.objective == Objective::JOINT ? config.lambda_policy : LambdaPolicy{FixedLambda{0.5}});
  if (config.objective == Objective::JOINT) balancer.restore(state.balance);
  auto fixed_lambda = [&]() {
    switch (config.objective) {
      case Objective::PP: return 0.0;
      case Objective::MLM: return 1.0;
      case Objective::JOINT: return balancer.lambda();
    }
    return 0.0;
  };

  const bool resumed = state.step > 0;
  OutputSink sink(options.out_dir, resumed);
  PretrainResult result;

  std::vector<std::size_t> lengths;
  for (const auto& r : corpus.train) lengths.push_back(r.tokens.size());
  const double peak = config.resolved_lr();

  auto run_heldout = [&]() {
    if (corpus.heldout.empty()) return;
    auto h = evaluate_heldout(state.params, corpus.heldout, config, fixed_lambda());
    h.step = state.step;
    result.heldout.push_back(h);
    sink.heldout(h);
    if (options.on_heldout) options.on_heldout(h);
    if (h.loss < state.best_heldout) {
      state.best_heldout = h.loss;
      sink.file("best.ppck", write_checkpoint(to_checkpoint(state.params)));
    }
  };

  if (!resumed && config.eval_interval > 0) run_heldout();

  bool done = config.max_steps > 0 && state.step >= config.max_steps;
  while (!done && state.epoch < config.max_epochs) {
    const auto plan = make_dynamic_batches(lengths, config.max_tokens_per_batch, derive_seed(config.seed, {state.epoch}));
    for (; state.batch_in_epoch < plan.size(); ) {
      const auto& idx = plan[state.batch_in_epoch];
      const auto batch = make_training_batch(corpus.train, idx, config, state.epoch);
      const double lambda = fixed_lambda();
      const LossSelector sel{config.objective, lambda, config.mlm_normalization};
      auto res = backward(state.params, batch, sel, Mode::Train, derive_seed(config.seed, {0xd0, state.step}));
      if (!std::isfinite(res.loss)) {
        sink.file("nonfinite.ppts", write_train_state(state));
        throw Error(ErrorKind::NonFiniteLoss, "non-finite loss at step " + std::to_string(state.step + 1));
      }
      const double lr = lr_at_step(state.step + 1, config.warmup_steps, peak);
      adam_update(state.params, res.grads, state.moments, state.step + 1, lr, config.adam);
      if (config.objective == Objective::JOINT) {
        balancer.observe(res.mlm, res.pp);
        state.balance = balancer.state();
      }
      ++state.step;
      ++state.batch_in_epoch;

      StepStats stats{state.step, lr, lambda, res.mlm, res.pp, res.loss, balancer.state()};
      if (options.on_step) options.on_step(stats);
      if (state.step % config.log_interval == 0) {
        const auto line = format_metrics_line(stats);
        result.metrics_log += line;
        sink.metrics(line);
      }
      if (config.eval_interval > 0 && state.step % config.eval_interval == 0) run_heldout();
      if (config.checkpoint_interval > 0 && state.step % config.checkpoint_interval == 0) {
        const auto tag = std::to_string(state.step);
        if (state.batch_in_epoch == plan.size()) {
          // Normalize so the saved state points at the next epoch's first batch.
          TrainState next = state;
          ++next.epoch;
          next.batch_in_epoch = 0;
          sink.file("state-" + tag + ".ppts", write_train_state(next));
        } else {
          sink.file("state-" + tag + ".ppts", write_train_state(state));
        }
        sink.file("ckpt-" + tag + ".ppck", write_checkpoint(to_checkpoint(state.params)));
      }
      if (config.max_steps > 0 && state.step >= config.max_steps) {
        done = true;
        break;
      }
    }
    if (state.batch_in_epoch >= plan.size()) {
      ++state.epoch;
      state.batch_in_epoch = 0;
    }
  }

  sink.file("final.ppck", write_checkpoint(to_checkpoint(state.params)));
  sink.file("final.ppts", write_train_state(state));
  result.state = std::move(state);
  return result;
}

}  // namespace profpred
