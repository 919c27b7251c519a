#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "mtkd/error.hpp"
#include "mtkd/mask.hpp"

namespace mtkd {

/// Pixel counts with class 1 (changed) as the positive class.
struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t tn = 0;
  std::uint64_t fn = 0;

  std::uint64_t total() const { return tp + fp + tn + fn; }
  bool operator==(const ConfusionCounts&) const = default;
};

inline ConfusionCounts confusion(const BinaryMask& gt, const BinaryMask& pred) {
  if (gt.height != pred.height || gt.width != pred.width || gt.size() != pred.size()) {
    throw ShapeError("confusion: ground truth is " + std::to_string(gt.height) + "x" +
                     std::to_string(gt.width) + ", prediction " + std::to_string(pred.height) +
                     "x" + std::to_string(pred.width));
  }
  ConfusionCounts c;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const bool g = gt.values[i] != 0, p = pred.values[i] != 0;
    c.tp += g && p;
    c.fp += !g && p;
    c.tn += !g && !p;
    c.fn += g && !p;
  }
  return c;
}

/// How 0/0 ratios (a class absent from both masks) are resolved.
enum class ZeroDivision {
  one,   // the quantity is 1: vacuously correct about the absent class
  skip,  // the quantity is NaN and left out of class means
};

inline ZeroDivision parse_zero_division(const std::string& s) {
  if (s == "one") return ZeroDivision::one;
  if (s == "skip") return ZeroDivision::skip;
  throw ConfigError("unknown zero-division mode '" + s + "' (expected one or skip)");
}

inline std::string to_string(ZeroDivision z) { return z == ZeroDivision::one ? "one" : "skip"; }

struct ClassMetrics {
  double iou = 0, precision = 0, recall = 0, fscore = 0;
};

/// Per-class metrics of one image and their two-class means.
struct ImageMetrics {
  ClassMetrics unchanged;  // class 0
  ClassMetrics changed;    // class 1
  double miou = 0, mprec = 0, mrec = 0, mfscore = 0;
};

namespace detail {

inline double ratio(std::uint64_t num, std::uint64_t den, ZeroDivision zd) {
  if (den == 0) return zd == ZeroDivision::one ? 1.0 : std::numeric_limits<double>::quiet_NaN();
  return static_cast<double>(num) / static_cast<double>(den);
}

/// Metrics of the class whose hits, false alarms and misses are given.
inline ClassMetrics class_metrics(std::uint64_t hit, std::uint64_t false_alarm, std::uint64_t miss,
                                  ZeroDivision zd) {
  ClassMetrics m;
  m.iou = ratio(hit, hit + false_alarm + miss, zd);
  m.precision = ratio(hit, hit + false_alarm, zd);
  m.recall = ratio(hit, hit + miss, zd);
  if (std::isnan(m.precision) || std::isnan(m.recall)) {
    m.fscore = ratio(2 * hit, 2 * hit + false_alarm + miss, zd);
  } else if (m.precision + m.recall == 0.0) {
    m.fscore = 0.0;
  } else {
    m.fscore = 2.0 * m.precision * m.recall / (m.precision + m.recall);
  }
  return m;
}

/// Mean of the defined values; NaN when neither is defined.
inline double pair_mean(double a, double b) {
  if (std::isnan(a)) return b;
  if (std::isnan(b)) return a;
  return 0.5 * (a + b);
}

}  // namespace detail

inline ImageMetrics image_metrics(const ConfusionCounts& c, ZeroDivision zd = ZeroDivision::one) {
  ImageMetrics m;
  m.changed = detail::class_metrics(c.tp, c.fp, c.fn, zd);
  m.unchanged = detail::class_metrics(c.tn, c.fn, c.fp, zd);
  m.miou = detail::pair_mean(m.unchanged.iou, m.changed.iou);
  m.mprec = detail::pair_mean(m.unchanged.precision, m.changed.precision);
  m.mrec = detail::pair_mean(m.unchanged.recall, m.changed.recall);
  m.mfscore = detail::pair_mean(m.unchanged.fscore, m.changed.fscore);
  return m;
}

struct EvalRow {
  std::string id;
  BinaryMask gt;
  BinaryMask pred;
};

struct ImageReport {
  std::string id;
  double car = 0;  // ground-truth CAR
  ConfusionCounts counts;
  ImageMetrics metrics;
};

struct MetricsReport {
  std::vector<ImageReport> images;
  // Unweighted means over images (NaN entries skipped).
  ImageMetrics mean;
};

namespace detail {

inline void accumulate_mean(double value, double& sum, std::size_t& n) {
  if (!std::isnan(value)) {
    sum += value;
    ++n;
  }
}

}  // namespace detail

/// Per-image metrics, then the plain mean over images. Pixel counts are
/// never pooled across images.
inline MetricsReport dataset_metrics(const std::vector<EvalRow>& rows,
                                     ZeroDivision zd = ZeroDivision::one) {
  if (rows.empty()) throw Error("dataset_metrics: no images to evaluate");
  MetricsReport report;
  for (const auto& r : rows) {
    ImageReport ir;
    ir.id = r.id;
    std::size_t changed = 0;
    for (auto v : r.gt.values) changed += v != 0;
    ir.car = r.gt.size() ? static_cast<double>(changed) / static_cast<double>(r.gt.size()) : 0.0;
    ir.counts = confusion(r.gt, r.pred);
    ir.metrics = image_metrics(ir.counts, zd);
    report.images.push_back(std::move(ir));
  }

  // Sum in id order so the aggregate does not depend on row order.
  std::vector<const ImageReport*> sorted;
  for (const auto& ir : report.images) sorted.push_back(&ir);
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const ImageReport* a, const ImageReport* b) { return a->id < b->id; });

  auto average = [&](auto field) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto* ir : sorted) detail::accumulate_mean(field(ir->metrics), sum, n);
    return n ? sum / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
  };
  auto& m = report.mean;
  m.unchanged.iou = average([](const ImageMetrics& x) { return x.unchanged.iou; });
  m.unchanged.precision = average([](const ImageMetrics& x) { return x.unchanged.precision; });
  m.unchanged.recall = average([](const ImageMetrics& x) { return x.unchanged.recall; });
  m.unchanged.fscore = average([](const ImageMetrics& x) { return x.unchanged.fscore; });
  m.changed.iou = average([](const ImageMetrics& x) { return x.changed.iou; });
  m.changed.precision = average([](const ImageMetrics& x) { return x.changed.precision; });
  m.changed.recall = average([](const ImageMetrics& x) { return x.changed.recall; });
  m.changed.fscore = average([](const ImageMetrics& x) { return x.changed.fscore; });
  m.miou = average([](const ImageMetrics& x) { return x.miou; });
  m.mprec = average([](const ImageMetrics& x) { return x.mprec; });
  m.mrec = average([](const ImageMetrics& x) { return x.mrec; });
  m.mfscore = average([](const ImageMetrics& x) { return x.mfscore; });
  return report;
}

struct PartitionRow {
  std::size_t index = 0;
  std::size_t count = 0;
  double car_min = 0;
  double car_max = 0;
  double miou = 0;
};

/// Sorts images by ground-truth CAR (ties by id), cuts them into k
/// contiguous groups whose sizes differ by at most one (larger groups
/// first) and reports each group's CAR bounds and mean mIoU.
inline std::vector<PartitionRow> partition_report(const std::vector<ImageReport>& images,
                                                  std::size_t k) {
  if (k == 0) throw ConfigError("partition_report: k must be at least 1");
  if (images.size() < k) {
    throw Error("partition_report: " + std::to_string(images.size()) +
                " images cannot form " + std::to_string(k) + " groups");
  }
  std::vector<const ImageReport*> sorted;
  for (const auto& ir : images) sorted.push_back(&ir);
  std::sort(sorted.begin(), sorted.end(), [](const ImageReport* a, const ImageReport* b) {
    return a->car != b->car ? a->car < b->car : a->id < b->id;
  });
  std::vector<PartitionRow> rows;
  const std::size_t base = images.size() / k, extra = images.size() % k;
  std::size_t pos = 0;
  for (std::size_t g = 0; g < k; ++g) {
    const std::size_t n = base + (g < extra ? 1 : 0);
    PartitionRow row;
    row.index = g;
    row.count = n;
    row.car_min = sorted[pos]->car;
    row.car_max = sorted[pos + n - 1]->car;
    double sum = 0.0;
    std::size_t defined = 0;
    for (std::size_t i = pos; i < pos + n; ++i) detail::accumulate_mean(sorted[i]->metrics.miou, sum, defined);
    row.miou = defined ? sum / static_cast<double>(defined) : std::numeric_limits<double>::quiet_NaN();
    rows.push_back(row);
    pos += n;
  }
  return rows;
}

}  // namespace mtkd
