#include "profpred/downstream.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <numeric>
#include <random>

#include "profpred/error.hpp"
#include "profpred/seed.hpp"
#include "profpred/training.hpp"

namespace profpred {

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = avg;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman(std::span<const double> predictions, std::span<const double> targets) {
  if (predictions.size() != targets.size()) throw Error(ErrorKind::LengthMismatch, "prediction and target counts differ");
  if (predictions.size() < 2) throw Error(ErrorKind::LengthMismatch, "need at least two values");
  const auto rp = average_ranks(predictions);
  const auto rt = average_ranks(targets);
  const double n = static_cast<double>(rp.size());
  const double mp = std::accumulate(rp.begin(), rp.end(), 0.0) / n;
  const double mt = std::accumulate(rt.begin(), rt.end(), 0.0) / n;
  double cov = 0.0, vp = 0.0, vt = 0.0;
  for (std::size_t i = 0; i < rp.size(); ++i) {
    cov += (rp[i] - mp) * (rt[i] - mt);
    vp += (rp[i] - mp) * (rp[i] - mp);
    vt += (rt[i] - mt) * (rt[i] - mt);
  }
  if (vp == 0.0 || vt == 0.0) throw Error(ErrorKind::DegenerateInput, "rank correlation undefined for a constant vector");
  return std::clamp(cov / std::sqrt(vp * vt), -1.0, 1.0);
}

double token_accuracy(std::span<const int> predictions, std::span<const int> targets, std::span<const bool> valid) {
  if (predictions.size() != targets.size() || predictions.size() != valid.size()) {
    throw Error(ErrorKind::ShapeMismatch, "prediction, target and mask lengths differ");
  }
  std::size_t correct = 0, total = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (!valid[i]) continue;
    ++total;
    correct += predictions[i] == targets[i] ? 1 : 0;
  }
  if (total == 0) throw Error(ErrorKind::ShapeMismatch, "no valid positions");
  return static_cast<double>(correct) / static_cast<double>(total);
}

double contact_precision_at_l5(std::span<const double> scores,
                               const std::set<std::pair<std::uint32_t, std::uint32_t>>& contacts, std::size_t length,
                               std::size_t min_separation) {
  if (scores.size() != length * length) throw Error(ErrorKind::ShapeMismatch, "score matrix must be L x L");
  struct Candidate {
    double score;
    std::uint32_t i, j;
  };
  std::vector<Candidate> cands;
  for (std::uint32_t i = 0; i < length; ++i) {
    for (std::uint32_t j = i + static_cast<std::uint32_t>(min_separation); j < length; ++j) {
      cands.push_back({scores[i * length + j], i, j});
    }
  }
  if (cands.empty()) throw Error(ErrorKind::NoCandidatePairs, "no pairs at the minimum separation");
  std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
    if (a.score != b.score) return a.score > b.score;
    return std::tie(a.i, a.j) < std::tie(b.i, b.j);
  });
  const std::size_t top = std::min(cands.size(), (length + 4) / 5);
  std::size_t hits = 0;
  for (std::size_t t = 0; t < top; ++t) hits += contacts.count({cands[t].i, cands[t].j});
  return static_cast<double>(hits) / static_cast<double>(top);
}

std::string_view metric_name(TaskShape shape) {
  switch (shape) {
    case TaskShape::TokenClass: return "token_accuracy";
    case TaskShape::SeqClass: return "accuracy";
    case TaskShape::SeqRegression: return "spearman";
    case TaskShape::Contact: return "precision_at_L/5_sep6";
  }
  return "unknown";
}

std::string format_report(const EvalReport& r) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "\t%.6f\t%.6f\t%zu\t%zu\t", r.value, r.train_value, r.train_size, r.test_size);
  return std::string(to_string(r.shape)) + "\t" + std::string(r.metric) + buf + r.checkpoint_id + "\t" +
         std::to_string(r.seed);
}

std::vector<NamedTensor<float>> init_task_head(TaskShape shape, std::size_t hidden_dim, int num_classes,
                                               std::uint64_t seed) {
  Eigen::Index in = static_cast<Eigen::Index>(hidden_dim);
  Eigen::Index out = 1;
  switch (shape) {
    case TaskShape::TokenClass: out = 2; break;
    case TaskShape::SeqClass: out = num_classes; break;
    case TaskShape::SeqRegression: out = 1; break;
    case TaskShape::Contact: in *= 2; break;
  }
  if (out < 1) throw Error(ErrorKind::InvalidConfig, "task head needs at least one output");
  std::mt19937_64 rng(derive_seed(seed, {0x4ead}));
  std::normal_distribution<double> normal(0.0, 0.02);
  Mat<float> w(in, out);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<float>(normal(rng));
  const std::string prefix = "task." + std::string(to_string(shape));
  return {{prefix + ".weight", std::move(w), 2}, {prefix + ".bias", Mat<float>::Zero(1, out), 1}};
}

std::optional<TaskShape> head_shape(std::span<const NamedTensor<float>> extra) {
  for (const auto& t : extra) {
    for (auto s : {TaskShape::TokenClass, TaskShape::SeqRegression, TaskShape::SeqClass, TaskShape::Contact}) {
      if (t.name == "task." + std::string(to_string(s)) + ".weight") return s;
    }
  }
  return std::nullopt;
}

FinetuneModel make_finetune_model(const ModelParams<float>& trunk, const DownstreamDataset& dataset,
                                  std::uint64_t seed) {
  if (trunk.config.vocab_size != static_cast<std::uint32_t>(tokens::kVocabSize)) {
    throw Error(ErrorKind::ConfigMismatch, "checkpoint vocabulary does not match the residue tokenization");
  }
  FinetuneModel model;
  model.params = trunk;
  model.shape = dataset.shape;
  model.num_classes = dataset.num_classes;
  for (auto& t : init_task_head(dataset.shape, trunk.config.hidden_dim, dataset.num_classes, seed)) {
    model.params.tensors.push_back(std::move(t));
  }
  if (dataset.shape == TaskShape::SeqRegression) {
    double sum = 0.0, sq = 0.0, n = 0.0;
    for (const auto& ex : dataset.examples) {
      if (ex.split != Split::Train) continue;
      sum += ex.score;
      sq += ex.score * ex.score;
      n += 1.0;
    }
    if (n > 0.0) {
      model.target_mean = sum / n;
      const double var = sq / n - model.target_mean * model.target_mean;
      model.target_scale = var > 1e-12 ? std::sqrt(var) : 1.0;
    }
  }
  return model;
}

namespace {

using RowVec = Eigen::Matrix<float, 1, Eigen::Dynamic>;

void softmax_inplace(RowVec& z) {
  z = (z.array() - z.maxCoeff()).exp().matrix();
  z /= z.sum();
}

float sigmoid(float x) { return 1.0f / (1.0f + std::exp(-x)); }

/// Pair feature [h_i * h_j, |h_i - h_j|].
RowVec pair_feature(const Mat<float>& h, Eigen::Index i, Eigen::Index j) {
  const auto d = h.cols();
  RowVec f(2 * d);
  f.head(d) = h.row(i).cwiseProduct(h.row(j));
  f.tail(d) = (h.row(i) - h.row(j)).cwiseAbs();
  return f;
}

/// L x L symmetric score matrix (diagonal left at zero).
std::vector<double> contact_scores(const FinetuneModel& model, const Mat<float>& h) {
  const auto len = static_cast<std::size_t>(h.rows());
  std::vector<double> s(len * len, 0.0);
  const RowVec w = model.head_weight().col(0).transpose();
  const float b = model.head_bias()(0, 0);
  for (Eigen::Index i = 0; i < h.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < h.rows(); ++j) {
      const double v = static_cast<double>(pair_feature(h, i, j).dot(w) + b);
      s[static_cast<std::size_t>(i) * len + static_cast<std::size_t>(j)] = v;
      s[static_cast<std::size_t>(j) * len + static_cast<std::size_t>(i)] = v;
    }
  }
  return s;
}

}  // namespace

std::pair<double, ModelParams<float>> task_backward(const FinetuneModel& model,
                                                    std::span<const DownstreamExample* const> batch,
                                                    std::size_t min_separation, Mode mode, std::uint64_t dropout_seed) {
  if (batch.empty()) throw Error(ErrorKind::EmptySplit, "empty fine-tuning batch");
  auto grads = model.params.zeros_like();
  const auto hw = grads.tensors.size() - 2;
  const auto& W = model.head_weight();
  const RowVec bias = model.head_bias().row(0);
  const float inv_b = 1.0f / static_cast<float>(batch.size());
  double loss = 0.0;

  for (std::size_t bi = 0; bi < batch.size(); ++bi) {
    const auto& ex = *batch[bi];
    const auto tr = encode(model.params, std::span<const Token>(ex.tokens), mode, derive_seed(dropout_seed, {bi}));
    const auto& h = tr.hidden;
    const auto n = h.rows();
    Mat<float> dh = Mat<float>::Zero(n, h.cols());
    auto& gW = grads.tensors[hw].value;
    auto& gb = grads.tensors[hw + 1].value;

    switch (model.shape) {
      case TaskShape::TokenClass: {
        if (static_cast<Eigen::Index>(ex.token_labels.size()) != n) {
          throw Error(ErrorKind::ShapeMismatch, "token labels do not cover '" + ex.id + "'");
        }
        Mat<float> logits = h * W;
        logits.rowwise() += bias;
        Mat<float> dlogits(n, logits.cols());
        for (Eigen::Index i = 0; i < n; ++i) {
          RowVec p = logits.row(i);
          softmax_inplace(p);
          const int y = ex.token_labels[static_cast<std::size_t>(i)];
          loss += -std::log(std::max(p(y), 1e-30f)) / static_cast<double>(n) * inv_b;
          p(y) -= 1.0f;
          dlogits.row(i) = p * (inv_b / static_cast<float>(n));
        }
        gW.noalias() += h.transpose() * dlogits;
        gb += dlogits.colwise().sum();
        dh.noalias() += dlogits * W.transpose();
        break;
      }
      case TaskShape::SeqClass:
      case TaskShape::SeqRegression: {
        const RowVec pooled = h.colwise().mean();
        RowVec out = pooled * W + bias;
        RowVec dout(out.size());
        if (model.shape == TaskShape::SeqClass) {
          softmax_inplace(out);
          loss += -std::log(std::max(out(ex.class_label), 1e-30f)) * inv_b;
          out(ex.class_label) -= 1.0f;
          dout = out * inv_b;
        } else {
          const float target = static_cast<float>((ex.score - model.target_mean) / model.target_scale);
          const float diff = out(0) - target;
          loss += static_cast<double>(diff) * diff * inv_b;
          dout(0) = 2.0f * diff * inv_b;
        }
        gW.noalias() += pooled.transpose() * dout;
        gb += dout;
        const RowVec dpooled = dout * W.transpose();
        dh.rowwise() += dpooled / static_cast<float>(n);
        break;
      }
      case TaskShape::Contact: {
        const auto d = h.cols();
        const RowVec w = W.col(0).transpose();
        const RowVec w_prod = w.head(d), w_diff = w.tail(d);
        std::set<std::pair<std::uint32_t, std::uint32_t>> truth(ex.contacts.begin(), ex.contacts.end());
        std::size_t pairs = 0;
        for (Eigen::Index i = 0; i + static_cast<Eigen::Index>(min_separation) < n; ++i) pairs += static_cast<std::size_t>(n - i - static_cast<Eigen::Index>(min_separation));
        if (pairs == 0) break;
        const float scale = inv_b / static_cast<float>(pairs);
        for (Eigen::Index i = 0; i < n; ++i) {
          for (Eigen::Index j = i + static_cast<Eigen::Index>(min_separation); j < n; ++j) {
            const RowVec f = pair_feature(h, i, j);
            const float s = f.dot(w) + bias(0);
            const float y = truth.count({static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j)}) ? 1.0f : 0.0f;
            const float p = sigmoid(s);
            loss += -(y * std::log(std::max(p, 1e-30f)) + (1 - y) * std::log(std::max(1 - p, 1e-30f))) * scale;
            const float ds = (p - y) * scale;
            gW.col(0) += (f * ds).transpose();
            gb(0, 0) += ds;
            const RowVec sign = (h.row(i) - h.row(j)).array().sign().matrix();
            dh.row(i) += ds * (w_prod.cwiseProduct(h.row(j)) + w_diff.cwiseProduct(sign));
            dh.row(j) += ds * (w_prod.cwiseProduct(h.row(i)) - w_diff.cwiseProduct(sign));
          }
        }
        break;
      }
    }
    encode_backward(model.params, tr, dh, grads);
  }
  return {loss, std::move(grads)};
}

double evaluate_split(const FinetuneModel& model, const DownstreamDataset& dataset, Split split,
                      std::size_t min_separation) {
  std::vector<int> preds, targets;
  std::vector<double> reg_preds, reg_targets;
  double contact_sum = 0.0;
  std::size_t contact_n = 0;
  const RowVec bias = model.head_bias().row(0);

  for (const auto& ex : dataset.examples) {
    if (ex.split != split) continue;
    const auto tr = encode(model.params, std::span<const Token>(ex.tokens), Mode::Eval);
    const auto& h = tr.hidden;
    switch (model.shape) {
      case TaskShape::TokenClass: {
        Mat<float> logits = h * model.head_weight();
        logits.rowwise() += bias;
        for (Eigen::Index i = 0; i < logits.rows(); ++i) {
          Eigen::Index arg;
          logits.row(i).maxCoeff(&arg);
          preds.push_back(static_cast<int>(arg));
          targets.push_back(ex.token_labels[static_cast<std::size_t>(i)]);
        }
        break;
      }
      case TaskShape::SeqClass: {
        const RowVec out = RowVec(h.colwise().mean()) * model.head_weight() + bias;
        Eigen::Index arg;
        out.maxCoeff(&arg);
        preds.push_back(static_cast<int>(arg));
        targets.push_back(ex.class_label);
        break;
      }
      case TaskShape::SeqRegression: {
        const RowVec out = RowVec(h.colwise().mean()) * model.head_weight() + bias;
        reg_preds.push_back(static_cast<double>(out(0)) * model.target_scale + model.target_mean);
        reg_targets.push_back(ex.score);
        break;
      }
      case TaskShape::Contact: {
        const auto len = static_cast<std::size_t>(h.rows());
        if (len <= min_separation) break;
        const auto scores = contact_scores(model, h);
        std::set<std::pair<std::uint32_t, std::uint32_t>> truth(ex.contacts.begin(), ex.contacts.end());
        contact_sum += contact_precision_at_l5(scores, truth, len, min_separation);
        ++contact_n;
        break;
      }
    }
  }

  switch (model.shape) {
    case TaskShape::TokenClass:
    case TaskShape::SeqClass: {
      if (preds.empty()) throw Error(ErrorKind::EmptySplit, "split has no examples");
      const std::unique_ptr<bool[]> valid(new bool[preds.size()]);
      std::fill(valid.get(), valid.get() + preds.size(), true);
      return token_accuracy(preds, targets, std::span<const bool>(valid.get(), preds.size()));
    }
    case TaskShape::SeqRegression:
      if (reg_preds.empty()) throw Error(ErrorKind::EmptySplit, "split has no examples");
      return spearman(reg_preds, reg_targets);
    case TaskShape::Contact:
      if (contact_n == 0) throw Error(ErrorKind::EmptySplit, "split has no sequence long enough for contacts");
      return contact_sum / static_cast<double>(contact_n);
  }
  return 0.0;
}

EvalReport evaluate(const FinetuneModel& model, const DownstreamDataset& dataset, const std::string& checkpoint_id,
                    std::uint64_t seed, std::size_t min_separation) {
  EvalReport r;
  r.shape = model.shape;
  r.metric = metric_name(model.shape);
  r.train_size = dataset.count(Split::Train);
  r.test_size = dataset.count(Split::Test);
  if (r.train_size == 0 || r.test_size == 0) throw Error(ErrorKind::EmptySplit, "dataset needs both train and test examples");
  r.value = evaluate_split(model, dataset, Split::Test, min_separation);
  r.train_value = evaluate_split(model, dataset, Split::Train, min_separation);
  r.checkpoint_id = checkpoint_id;
  r.seed = seed;
  return r;
}

FinetuneResult finetune(const ModelParams<float>& trunk, const DownstreamDataset& dataset,
                        const FinetuneConfig& config) {
  std::vector<const DownstreamExample*> train;
  for (const auto& ex : dataset.examples) {
    if (ex.split == Split::Train) train.push_back(&ex);
  }
  if (train.empty() || dataset.count(Split::Test) == 0) {
    throw Error(ErrorKind::EmptySplit, "dataset needs both train and test examples");
  }
  FinetuneResult out;
  out.model = make_finetune_model(trunk, dataset, config.seed);
  auto& model = out.model;
  auto moments = AdamMoments<float>::zeros_like(model.params);
  const std::uint64_t warmup = config.warmup_steps > 0 ? config.warmup_steps : std::max<std::uint64_t>(1, config.steps / 10);

  std::vector<std::size_t> lengths;
  for (const auto* ex : train) lengths.push_back(ex->tokens.size());

  std::uint64_t step = 0;
  for (std::uint64_t epoch = 0; step < config.steps; ++epoch) {
    const auto plan = make_dynamic_batches(lengths, config.max_tokens_per_batch, derive_seed(config.seed, {0xf1, epoch}));
    for (const auto& idx : plan) {
      if (step >= config.steps) break;
      std::vector<const DownstreamExample*> batch;
      for (std::size_t i : idx) batch.push_back(train[i]);
      auto [loss, grads] = task_backward(model, batch, config.min_separation, Mode::Train, derive_seed(config.seed, {0xf2, step}));
      if (!std::isfinite(loss)) throw Error(ErrorKind::NonFiniteLoss, "non-finite fine-tuning loss at step " + std::to_string(step + 1));
      ++step;
      adam_update(model.params, grads, moments, step, lr_at_step(step, warmup, config.peak_lr), config.adam);
    }
  }
  out.report = evaluate(model, dataset, config.checkpoint_id, config.seed, config.min_separation);
  return out;
}

Checkpoint to_checkpoint(const FinetuneModel& model) {
  Checkpoint ck{model.params.config, model.params.tensors};
  Mat<float> scaling(1, 2);
  scaling << static_cast<float>(model.target_mean), static_cast<float>(model.target_scale);
  ck.tensors.push_back({"task.scaling", std::move(scaling), 1});
  return ck;
}

FinetuneModel finetune_model_from_checkpoint(const Checkpoint& checkpoint) {
  std::vector<NamedTensor<float>> extra;
  FinetuneModel model;
  model.params = from_checkpoint(checkpoint, &extra);
  const auto shape = head_shape(extra);
  if (!shape) throw Error(ErrorKind::ConfigMismatch, "checkpoint carries no task head");
  model.shape = *shape;
  const std::string prefix = "task." + std::string(to_string(*shape));
  const NamedTensor<float>* w = nullptr;
  const NamedTensor<float>* b = nullptr;
  for (const auto& t : extra) {
    if (t.name == prefix + ".weight") w = &t;
    if (t.name == prefix + ".bias") b = &t;
    if (t.name == "task.scaling" && t.value.size() == 2) {
      model.target_mean = t.value(0, 0);
      model.target_scale = t.value(0, 1);
    }
  }
  if (w == nullptr || b == nullptr) throw Error(ErrorKind::ConfigMismatch, "task head is incomplete");
  model.num_classes = static_cast<int>(w->value.cols());
  model.params.tensors.push_back(*w);
  model.params.tensors.push_back(*b);
  return model;
}

}  // namespace profpred
