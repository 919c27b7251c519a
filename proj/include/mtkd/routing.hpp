#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mtkd/car.hpp"
#include "mtkd/data.hpp"
#include "mtkd/model.hpp"
#include "mtkd/train.hpp"

namespace mtkd {

struct RoutingRecord {
  std::string id;
  double est_car = 0;
  double gt_car = 0;
  std::string chosen;   // partition_of(est_car)
  std::string gt_part;  // partition_of(gt_car)
};

/// CAR of the original model's thresholded prediction.
inline double estimate_car(const ModelParams<float>& m_o, const BitemporalSample& s, double threshold) {
  return compute_car(predict_mask(change_map(m_o, s.tensor_a(), s.tensor_b()), threshold));
}

/// Source of the CAR used to pick a teacher at inference time.
using CarEstimator = std::function<double(const BitemporalSample&)>;

inline CarEstimator original_model_estimator(const ModelParams<float>& m_o, double threshold) {
  return [&m_o, threshold](const BitemporalSample& s) { return estimate_car(m_o, s, threshold); };
}

/// Uses the ground-truth CAR; routing is then exact by construction.
inline CarEstimator oracle_estimator() {
  return [](const BitemporalSample& s) { return compute_car(s.label); };
}

/// Routes a pair to the teacher of its estimated CAR partition and returns
/// that teacher's thresholded prediction unchanged.
inline std::pair<BinaryMask, RoutingRecord> route_and_predict(const CarEstimator& estimator,
                                                              const TeacherBank& teachers,
                                                              const PartitionSpec& spec,
                                                              const BitemporalSample& s,
                                                              double threshold) {
  RoutingRecord rec;
  rec.id = s.id;
  rec.est_car = estimator(s);
  rec.gt_car = compute_car(s.label);
  rec.chosen = partition_of(rec.est_car, spec);
  rec.gt_part = partition_of(rec.gt_car, spec);
  const ChangeMap cm = change_map(teachers.at(rec.chosen), s.tensor_a(), s.tensor_b());
  return {predict_mask(cm, threshold), std::move(rec)};
}

inline std::pair<BinaryMask, RoutingRecord> route_and_predict(const ModelParams<float>& m_o,
                                                              const TeacherBank& teachers,
                                                              const PartitionSpec& spec,
                                                              const BitemporalSample& s,
                                                              double threshold) {
  return route_and_predict(original_model_estimator(m_o, threshold), teachers, spec, s, threshold);
}

struct RoutingConfusion {
  // matrix[g][c]: samples of ground-truth partition g routed to partition c.
  std::vector<std::vector<std::size_t>> matrix;
  std::vector<std::size_t> gt_counts;
  std::vector<std::size_t> chosen_counts;
  std::vector<std::pair<double, double>> scatter;  // (gt_car, est_car)
};

inline RoutingConfusion routing_confusion(const std::vector<RoutingRecord>& records,
                                          const PartitionSpec& spec) {
  const std::size_t k = spec.partition_count();
  RoutingConfusion out;
  out.matrix.assign(k, std::vector<std::size_t>(k, 0));
  out.gt_counts.assign(k, 0);
  out.chosen_counts.assign(k, 0);
  for (const auto& r : records) {
    const std::size_t g = spec.index_of(r.gt_part);
    const std::size_t c = spec.index_of(r.chosen);
    ++out.matrix[g][c];
    ++out.gt_counts[g];
    ++out.chosen_counts[c];
    out.scatter.emplace_back(r.gt_car, r.est_car);
  }
  return out;
}

}  // namespace mtkd
