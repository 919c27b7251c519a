#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "mtkd/car.hpp"
#include "mtkd/data.hpp"
#include "mtkd/error.hpp"
#include "mtkd/metrics.hpp"
#include "mtkd/model.hpp"
#include "mtkd/ops.hpp"
#include "mtkd/optim.hpp"
#include "mtkd/parallel.hpp"
#include "mtkd/rng.hpp"

namespace mtkd {

/// What the distillation term compares: post-sigmoid change maps or logits.
enum class KdTarget { probability, logits };

inline KdTarget parse_kd_target(const std::string& s) {
  if (s == "probability") return KdTarget::probability;
  if (s == "logits") return KdTarget::logits;
  throw ConfigError("unknown kd_target '" + s + "' (expected probability or logits)");
}

inline std::string to_string(KdTarget k) { return k == KdTarget::probability ? "probability" : "logits"; }

struct TrainConfig {
  std::size_t max_iters = 2000;
  std::size_t warmup_iters = 100;
  std::size_t batch_size = 8;
  double initial_lr = 1e-3;
  double warmup_start_lr = 1e-6;
  LrKind lr_kind = LrKind::linear;
  std::size_t eval_every = 100;
  double threshold = 0.5;
  double lambda = 0.0;
  KdTarget kd_target = KdTarget::probability;
  AdamWConfig adamw;
  bool augment = true;
  AugmentConfig augmentation;
  ZeroDivision zero_division = ZeroDivision::one;
  std::uint64_t seed = 0;

  LrSchedule schedule() const {
    return {lr_kind, warmup_iters, max_iters, warmup_start_lr, initial_lr};
  }

  void validate() const {
    if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
    if (eval_every == 0 || max_iters % eval_every != 0) {
      throw ConfigError("eval_every (" + std::to_string(eval_every) + ") must divide max_iters (" +
                        std::to_string(max_iters) + ")");
    }
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("threshold must lie in (0,1)");
    if (lambda < 0.0 || !std::isfinite(lambda)) throw ConfigError("lambda must be a finite value >= 0");
    schedule().validate();
  }
};

struct HistoryRow {
  std::size_t iter = 0;  // optimizer steps completed
  double lr = 0;
  double loss = 0;       // mean of the per-sample losses of the batch
  std::optional<double> val_miou;
};

/// Which teacher supervised one sample during distillation.
struct TeacherAssignment {
  std::size_t iter = 0;
  std::string id;
  double car = 0;
  std::string partition;
};

struct TrainResult {
  ModelParams<float> best;
  std::size_t best_iter = 0;
  double best_val_miou = 0;
  std::vector<HistoryRow> history;
  std::vector<TeacherAssignment> assignments;
};

/// Iteration of the evaluated checkpoint with the highest validation mIoU;
/// ties go to the earliest. Returns 0 if no row was evaluated.
inline std::size_t best_checkpoint_iter(const std::vector<HistoryRow>& history) {
  std::size_t best_iter = 0;
  double best = -1.0;
  for (const auto& row : history) {
    if (row.val_miou && *row.val_miou > best) {
      best = *row.val_miou;
      best_iter = row.iter;
    }
  }
  return best_iter;
}

/// Thresholded predictions of `model` on every sample, scored per image.
inline MetricsReport evaluate_model(const ModelParams<float>& model, const Dataset& ds,
                                    double threshold, ZeroDivision zd = ZeroDivision::one) {
  std::vector<EvalRow> rows;
  rows.reserve(ds.size());
  for (const auto& s : ds.samples) {
    const ChangeMap cm = change_map(model, s.tensor_a(), s.tensor_b());
    rows.push_back({s.id, s.label, predict_mask(cm, threshold)});
  }
  return dataset_metrics(rows, zd);
}

/// Loss of one (augmented) sample for the current model; must return a
/// scalar tensor attached to the model's parameters.
using SampleLoss =
    std::function<Tensor<float>(const ModelParams<float>&, const BitemporalSample&, std::size_t iter)>;

/// Called after every optimizer step with the step count and parameters.
using StepObserver = std::function<void(std::size_t iter, const ModelParams<float>&)>;

/// Minibatch stream: samples are visited in a per-epoch shuffled order and
/// augmented from a per-draw random stream. Two streams built from the same
/// seed and dataset yield identical batches.
class BatchStream {
 public:
  BatchStream(const Dataset& ds, const TrainConfig& cfg)
      : ds_(ds), cfg_(cfg), shuffle_(derive_seed(cfg.seed, "shuffle")) {
    order_.resize(ds.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    shuffle_.shuffle(order_);
  }

  std::vector<BitemporalSample> next() {
    std::vector<BitemporalSample> batch;
    batch.reserve(cfg_.batch_size);
    for (std::size_t b = 0; b < cfg_.batch_size; ++b) {
      if (pos_ == order_.size()) {
        shuffle_.shuffle(order_);
        pos_ = 0;
      }
      const BitemporalSample& s = ds_.samples[order_[pos_++]];
      if (cfg_.augment) {
        Rng rng(derive_seed(cfg_.seed, "augment", drawn_));
        batch.push_back(augment(s, cfg_.augmentation, rng));
      } else {
        batch.push_back(s);
      }
      ++drawn_;
    }
    return batch;
  }

 private:
  const Dataset& ds_;
  const TrainConfig& cfg_;
  Rng shuffle_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
  std::uint64_t drawn_ = 0;
};

/// Shared optimisation loop: AdamW on the mean per-sample loss, learning rate
/// from the warmup/decay schedule, validation every `eval_every` steps, and
/// the best-validation checkpoint returned.
inline TrainResult train_loop(ModelParams<float> model, const Dataset& train, const Dataset& val,
                              const TrainConfig& cfg, const SampleLoss& sample_loss,
                              const StepObserver& observer = {}) {
  cfg.validate();
  if (train.empty()) throw DataError("training set is empty");
  if (val.empty()) throw DataError("validation set is empty");

  model.set_requires_grad(true);
  OptimizerState state;
  state.config = cfg.adamw;
  const LrSchedule schedule = cfg.schedule();
  BatchStream stream(train, cfg);

  TrainResult result;
  result.best_val_miou = -1.0;
  const float inv_batch = 1.0f / static_cast<float>(cfg.batch_size);

  for (std::size_t it = 0; it < cfg.max_iters; ++it) {
    const double lr = lr_at(schedule, it);
    model.zero_grad();
    const auto batch = stream.next();
    double loss_sum = 0.0;
    for (const auto& sample : batch) {
      Tensor<float> loss;
      try {
        loss = sample_loss(model, sample, it + 1);
      } catch (const NumericError& e) {
        throw NumericError("training diverged at iteration " + std::to_string(it + 1) +
                           " on sample '" + sample.id + "' (lr " + std::to_string(lr) +
                           "): " + e.what());
      }
      loss_sum += static_cast<double>(loss.item());
      scale(loss, inv_batch).backward();
    }
    const double batch_loss = loss_sum / static_cast<double>(batch.size());
    if (!std::isfinite(batch_loss)) {
      throw NumericError("non-finite training loss at iteration " + std::to_string(it + 1));
    }

    advance(state);
    std::size_t slot = 0;
    for (auto& [name, tensor] : model.tensors) {
      const std::vector<float> grad = tensor.grad();
      adamw_update<float>(tensor.mutable_data(), grad, state, slot++, lr);
    }

    HistoryRow row{it + 1, lr, batch_loss, std::nullopt};
    if ((it + 1) % cfg.eval_every == 0) {
      const double miou = evaluate_model(model, val, cfg.threshold, cfg.zero_division).mean.miou;
      row.val_miou = miou;
      if (miou > result.best_val_miou) {
        result.best_val_miou = miou;
        result.best_iter = it + 1;
        result.best = model;
      }
    }
    result.history.push_back(row);
    if (observer) observer(it + 1, model);
  }
  if (result.best_iter == 0) {
    // Every validation score was NaN; keep the final parameters.
    result.best = model;
    result.best_iter = cfg.max_iters;
  }
  result.best.set_requires_grad(false);
  return result;
}

/// Binary cross-entropy of the model's change map against the label.
inline Tensor<float> bce_sample_loss(const ModelParams<float>& model, const BitemporalSample& s) {
  const auto out = forward(model, s.tensor_a(), s.tensor_b());
  return bce_loss(out.prob, s.target());
}

/// Trains a freshly initialised model (init stream from cfg.seed).
inline TrainResult train_model(Arch arch, std::size_t width, const Dataset& train,
                               const Dataset& val, const TrainConfig& cfg,
                               const StepObserver& observer = {}) {
  return train_loop(build_model<float>(arch, width, cfg.seed), train, val, cfg,
                    [](const ModelParams<float>& m, const BitemporalSample& s, std::size_t) {
                      return bce_sample_loss(m, s);
                    },
                    observer);
}

/// Frozen specialist models keyed by partition label.
struct TeacherBank {
  std::map<std::string, ModelParams<float>> models;

  void check_labels(const PartitionSpec& spec) const {
    const std::set<std::string> want(spec.labels.begin(), spec.labels.end());
    std::set<std::string> have;
    for (const auto& [label, m] : models) have.insert(label);
    if (want != have) {
      std::string msg = "teacher bank labels {";
      for (const auto& l : have) msg += " " + l;
      msg += " } do not match partition labels {";
      for (const auto& l : want) msg += " " + l;
      throw ConfigError(msg + " }");
    }
  }

  const ModelParams<float>& at(const std::string& label) const {
    auto it = models.find(label);
    if (it == models.end()) throw Error("no teacher for partition '" + label + "'");
    return it->second;
  }
};

/// Validation samples whose ground-truth CAR falls in `label`'s partition;
/// the whole validation set if none do.
inline Dataset partition_validation(const Dataset& val, const PartitionSpec& spec,
                                    const std::string& label) {
  Dataset subset = partition_dataset(val, spec).at(label);
  return subset.empty() ? val : subset;
}

/// One model per partition, each trained from scratch on its partition only.
inline TeacherBank train_teachers(Arch arch, std::size_t width,
                                  const std::map<std::string, Dataset>& partitions,
                                  const PartitionSpec& spec, const Dataset& val,
                                  const TrainConfig& cfg,
                                  std::map<std::string, TrainResult>* results = nullptr,
                                  std::size_t jobs = 1) {
  spec.validate();
  for (const auto& label : spec.labels) {
    auto it = partitions.find(label);
    if (it == partitions.end() || it->second.empty()) {
      throw ConfigError("partition '" + label +
                        "' has no training samples; adjust the CAR thresholds");
    }
  }
  std::vector<TrainResult> trained(spec.labels.size());
  parallel_for(spec.labels.size(), jobs, [&](std::size_t k) {
    const auto& label = spec.labels[k];
    trained[k] = train_model(arch, width, partitions.at(label),
                             partition_validation(val, spec, label), cfg);
  });
  TeacherBank bank;
  for (std::size_t k = 0; k < spec.labels.size(); ++k) {
    bank.models.emplace(spec.labels[k], trained[k].best);
    if (results) results->emplace(spec.labels[k], std::move(trained[k]));
  }
  return bank;
}

/// Student objective for one sample: BCE against the label plus lambda times
/// the MSE between the student's and the CAR-selected teacher's outputs.
inline Tensor<float> mtkd_sample_loss(const ModelParams<float>& student, const TeacherBank& teachers,
                                      const PartitionSpec& spec, const BitemporalSample& s,
                                      double lambda, KdTarget target, std::string* chosen = nullptr) {
  const std::string& label = partition_of(compute_car(s.label), spec);
  if (chosen) *chosen = label;
  const auto xa = s.tensor_a();
  const auto xb = s.tensor_b();
  Tensor<float> teacher_out;
  {
    NoGradGuard frozen;
    const auto t = forward(teachers.at(label), xa, xb);
    teacher_out = target == KdTarget::probability ? t.prob : t.logits;
  }
  const auto out = forward(student, xa, xb);
  const Tensor<float> ce = bce_loss(out.prob, s.target());
  const Tensor<float> kd =
      mse_loss(target == KdTarget::probability ? out.prob : out.logits, teacher_out);
  return add(ce, scale(kd, static_cast<float>(lambda)));
}

/// Distils the teacher bank into a student initialised as a copy of m_o.
inline TrainResult train_student_mtkd(const ModelParams<float>& m_o, const TeacherBank& teachers,
                                      const PartitionSpec& spec, const Dataset& train,
                                      const Dataset& val, const TrainConfig& cfg,
                                      const StepObserver& observer = {}) {
  spec.validate();
  teachers.check_labels(spec);
  std::vector<TeacherAssignment> log;
  auto loss = [&](const ModelParams<float>& student, const BitemporalSample& s, std::size_t iter) {
    std::string label;
    Tensor<float> l = mtkd_sample_loss(student, teachers, spec, s, cfg.lambda, cfg.kd_target, &label);
    log.push_back({iter, s.id, compute_car(s.label), label});
    return l;
  };
  TrainResult r = train_loop(m_o, train, val, cfg, loss, observer);
  r.assignments = std::move(log);
  return r;
}

struct LambdaTrial {
  double lambda = 0;
  double val_miou = 0;
  std::size_t best_iter = 0;
};

struct LambdaSearchResult {
  double best_lambda = 0;
  std::size_t max_iters = 0;  // budget used per trial
  std::vector<LambdaTrial> trials;
};

/// Trains one student per distinct lambda (ascending) and picks the highest
/// validation mIoU; ties go to the smaller lambda.
inline LambdaSearchResult lambda_search(std::vector<double> grid, const ModelParams<float>& m_o,
                                        const TeacherBank& teachers, const PartitionSpec& spec,
                                        const Dataset& train, const Dataset& val,
                                        const TrainConfig& cfg, std::size_t jobs = 1) {
  if (grid.empty()) throw ConfigError("lambda grid is empty");
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  LambdaSearchResult out;
  out.max_iters = cfg.max_iters;
  out.trials.resize(grid.size());
  parallel_for(grid.size(), jobs, [&](std::size_t k) {
    TrainConfig c = cfg;
    c.lambda = grid[k];
    const TrainResult r = train_student_mtkd(m_o, teachers, spec, train, val, c);
    out.trials[k] = {grid[k], r.best_val_miou, r.best_iter};
  });
  double best = -1.0;
  for (const auto& t : out.trials) {
    if (t.val_miou > best) {
      best = t.val_miou;
      out.best_lambda = t.lambda;
    }
  }
  return out;
}

}  // namespace mtkd
