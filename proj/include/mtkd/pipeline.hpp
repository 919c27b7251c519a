#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "mtkd/car.hpp"
#include "mtkd/config.hpp"
#include "mtkd/data.hpp"
#include "mtkd/metrics.hpp"
#include "mtkd/routing.hpp"
#include "mtkd/train.hpp"

namespace mtkd {

/// Synthetic train/val/test splits of the configured sizes: one generated
/// pool, split by a seeded shuffle.
inline std::tuple<Dataset, Dataset, Dataset> synthetic_splits(const ExperimentConfig& cfg) {
  const auto& d = cfg.data;
  SyntheticSpec spec = d.synthetic_spec;
  spec.count = d.train_count + d.val_count + d.test_count;
  const Dataset pool = generate_synthetic(spec, derive_seed(cfg.seed, "data"));
  const auto n = static_cast<double>(spec.count);
  return split_dataset(pool,
                       {static_cast<double>(d.train_count) / n, static_cast<double>(d.val_count) / n,
                        static_cast<double>(d.test_count) / n},
                       derive_seed(cfg.seed, "split"));
}

/// Two-stage inference over a dataset: route each pair by its estimated CAR.
inline MetricsReport evaluate_op(const CarEstimator& estimator, const TeacherBank& teachers,
                                 const PartitionSpec& spec, const Dataset& ds, double threshold,
                                 ZeroDivision zd, std::vector<RoutingRecord>* records = nullptr) {
  std::vector<EvalRow> rows;
  for (const auto& s : ds.samples) {
    auto [mask, rec] = route_and_predict(estimator, teachers, spec, s, threshold);
    rows.push_back({s.id, s.label, std::move(mask)});
    if (records) records->push_back(std::move(rec));
  }
  return dataset_metrics(rows, zd);
}

struct ModeResult {
  MetricsReport report;
  std::vector<PartitionRow> groups;  // equal-size CAR groups
};

struct PipelineResult {
  TrainResult original;
  std::map<std::string, TrainResult> teachers;
  TrainResult student;
  std::map<std::string, ModeResult> modes;  // "original", "op", "mtkd"
  std::vector<RoutingRecord> routing;
};

/// Original model, CAR-partition teachers, distilled student, and test
/// metrics of the three inference modes. A previously trained original model
/// may be passed in to skip its training.
inline PipelineResult run_pipeline(const ExperimentConfig& cfg, const Dataset& train,
                                   const Dataset& val, const Dataset& test,
                                   const std::optional<TrainResult>& original = std::nullopt) {
  PipelineResult out;
  out.original = original ? *original : train_model(cfg.arch, cfg.width, train, val, cfg.role("original"));
  const TeacherBank bank = train_teachers(cfg.arch, cfg.width, partition_dataset(train, cfg.partition),
                                          cfg.partition, val, cfg.role("teacher"), &out.teachers, cfg.jobs);
  out.student = train_student_mtkd(out.original.best, bank, cfg.partition, train, val, cfg.role("student"));

  auto finish = [&](const std::string& mode, MetricsReport report) {
    ModeResult m;
    m.groups = partition_report(report.images, std::min(cfg.partition_k, report.images.size()));
    m.report = std::move(report);
    out.modes[mode] = std::move(m);
  };
  finish("original", evaluate_model(out.original.best, test, cfg.threshold, cfg.zero_division));
  finish("op", evaluate_op(original_model_estimator(out.original.best, cfg.threshold), bank,
                           cfg.partition, test, cfg.threshold, cfg.zero_division, &out.routing));
  finish("mtkd", evaluate_model(out.student.best, test, cfg.threshold, cfg.zero_division));
  return out;
}

}  // namespace mtkd
