#pragma once

// CSV and JSON artifacts. Numbers are written in shortest round-trip form so
// identical results always give byte-identical files.

#include <charconv>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtkd/car.hpp"
#include "mtkd/error.hpp"
#include "mtkd/metrics.hpp"
#include "mtkd/routing.hpp"
#include "mtkd/train.hpp"

namespace mtkd {

inline std::string fmt_num(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  os << text;
  if (!os) throw Error("failed writing " + path.string());
}

inline std::string history_csv(const std::vector<HistoryRow>& history) {
  std::ostringstream os;
  os << "iter,lr,loss,val_mIoU\n";
  for (const auto& r : history) {
    os << r.iter << ',' << fmt_num(r.lr) << ',' << fmt_num(r.loss) << ','
       << (r.val_miou ? fmt_num(*r.val_miou) : "") << '\n';
  }
  return os.str();
}

inline std::string assignments_csv(const std::vector<TeacherAssignment>& log) {
  std::ostringstream os;
  os << "iter,id,gt_car,teacher\n";
  for (const auto& a : log) os << a.iter << ',' << a.id << ',' << fmt_num(a.car) << ',' << a.partition << '\n';
  return os.str();
}

/// One row per sample: id, ground-truth CAR and its partition.
inline std::string car_csv(const Dataset& ds, const PartitionSpec& spec) {
  std::ostringstream os;
  os << "id,car,partition\n";
  for (const auto& s : ds.samples) {
    const double car = compute_car(s.label);
    os << s.id << ',' << fmt_num(car) << ',' << partition_of(car, spec) << '\n';
  }
  return os.str();
}

inline std::string histogram_csv(const CarHistogram& h) {
  std::ostringstream os;
  os << "bin,car_lo,car_hi,count\n";
  for (std::size_t i = 0; i < h.counts.size(); ++i) {
    os << i << ',' << fmt_num(h.edges[i]) << ',' << fmt_num(h.edges[i + 1]) << ',' << h.counts[i] << '\n';
  }
  return os.str();
}

inline std::string metrics_csv(const MetricsReport& report) {
  std::ostringstream os;
  os << "id,car,TP,FP,TN,FN,IoU_0,IoU_1,Prec_0,Prec_1,Rec_0,Rec_1,Fscore_0,Fscore_1,"
        "mIoU,mPrec,mRec,mFscore\n";
  for (const auto& r : report.images) {
    const auto& m = r.metrics;
    os << r.id << ',' << fmt_num(r.car) << ',' << r.counts.tp << ',' << r.counts.fp << ','
       << r.counts.tn << ',' << r.counts.fn << ',' << fmt_num(m.unchanged.iou) << ','
       << fmt_num(m.changed.iou) << ',' << fmt_num(m.unchanged.precision) << ','
       << fmt_num(m.changed.precision) << ',' << fmt_num(m.unchanged.recall) << ','
       << fmt_num(m.changed.recall) << ',' << fmt_num(m.unchanged.fscore) << ','
       << fmt_num(m.changed.fscore) << ',' << fmt_num(m.miou) << ',' << fmt_num(m.mprec) << ','
       << fmt_num(m.mrec) << ',' << fmt_num(m.mfscore) << '\n';
  }
  return os.str();
}

/// Reads back the id, car and mIoU columns of a metrics.csv.
inline std::vector<ImageReport> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open " + path.string());
  std::string line;
  std::getline(is, line);
  std::vector<ImageReport> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 18) throw Error(path.string() + ": malformed row '" + line + "'");
    ImageReport r;
    r.id = cells[0];
    r.car = std::stod(cells[1]);
    r.metrics.miou = std::stod(cells[14]);
    out.push_back(r);
  }
  return out;
}

inline std::string partitions_csv(const std::vector<PartitionRow>& rows) {
  std::ostringstream os;
  os << "group,count,car_min,car_max,mIoU\n";
  for (const auto& r : rows) {
    os << r.index << ',' << r.count << ',' << fmt_num(r.car_min) << ',' << fmt_num(r.car_max)
       << ',' << fmt_num(r.miou) << '\n';
  }
  return os.str();
}

/// Sample count and CAR range of every partition of a dataset.
inline std::string partition_csv(const Dataset& ds, const PartitionSpec& spec) {
  const auto parts = partition_dataset(ds, spec);
  std::ostringstream os;
  os << "partition,car_lo,car_hi,count\n";
  for (std::size_t k = 0; k < spec.partition_count(); ++k) {
    const auto [lo, hi] = spec.bounds(k);
    os << spec.labels[k] << ',' << fmt_num(lo) << ',' << fmt_num(hi) << ','
       << parts.at(spec.labels[k]).size() << '\n';
  }
  return os.str();
}

inline std::string lambda_search_csv(const LambdaSearchResult& r) {
  std::ostringstream os;
  os << "lambda,val_mIoU,best_iter,max_iters,selected\n";
  for (const auto& t : r.trials) {
    os << fmt_num(t.lambda) << ',' << fmt_num(t.val_miou) << ',' << t.best_iter << ',' << r.max_iters
       << ',' << (t.lambda == r.best_lambda ? 1 : 0) << '\n';
  }
  return os.str();
}

/// Equal-size CAR groups side by side for several inference modes. Every
/// mode must have been scored on the same images.
inline std::string comparative_partitions_csv(
    const std::vector<std::pair<std::string, std::vector<PartitionRow>>>& modes) {
  if (modes.empty()) throw Error("no evaluation results to compare");
  std::ostringstream os;
  os << "group,count,car_min,car_max";
  for (const auto& [mode, rows] : modes) os << ",mIoU_" << mode;
  os << '\n';
  const auto& first = modes.front().second;
  for (std::size_t g = 0; g < first.size(); ++g) {
    os << g << ',' << first[g].count << ',' << fmt_num(first[g].car_min) << ','
       << fmt_num(first[g].car_max);
    for (const auto& [mode, rows] : modes) {
      if (rows.size() != first.size() || rows[g].count != first[g].count ||
          rows[g].car_min != first[g].car_min || rows[g].car_max != first[g].car_max) {
        throw Error("evaluation of mode '" + mode + "' covers different images");
      }
      os << ',' << fmt_num(rows[g].miou);
    }
    os << '\n';
  }
  return os.str();
}

namespace detail {

inline nlohmann::ordered_json num_json(double v) {
  return std::isnan(v) ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(v);
}

}  // namespace detail

/// Aggregates, the per-class table (IoU/Rec/Prec/Fscore x unchanged/changed)
/// and the mean mIoU of each ground-truth CAR partition.
inline std::string summary_json(const MetricsReport& report, const PartitionSpec& spec,
                                const std::string& mode, const std::string& split,
                                std::size_t checkpoints_loaded, ZeroDivision zd) {
  using detail::num_json;
  using J = nlohmann::ordered_json;
  const auto& m = report.mean;
  J j;
  j["mode"] = mode;
  j["split"] = split;
  j["images"] = report.images.size();
  j["checkpoints_loaded"] = checkpoints_loaded;
  j["zero_division"] = to_string(zd);
  j["aggregate"] = {{"mIoU", num_json(m.miou)},
                    {"mPrec", num_json(m.mprec)},
                    {"mRec", num_json(m.mrec)},
                    {"mFscore", num_json(m.mfscore)}};
  j["per_class"] = {
      {"IoU", {{"unchanged", num_json(m.unchanged.iou)}, {"changed", num_json(m.changed.iou)}}},
      {"Rec", {{"unchanged", num_json(m.unchanged.recall)}, {"changed", num_json(m.changed.recall)}}},
      {"Prec",
       {{"unchanged", num_json(m.unchanged.precision)}, {"changed", num_json(m.changed.precision)}}},
      {"Fscore", {{"unchanged", num_json(m.unchanged.fscore)}, {"changed", num_json(m.changed.fscore)}}}};
  J parts = J::array();
  for (std::size_t k = 0; k < spec.partition_count(); ++k) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& r : report.images) {
      if (partition_index(r.car, spec) == k && !std::isnan(r.metrics.miou)) {
        sum += r.metrics.miou;
        ++n;
      }
    }
    const auto [lo, hi] = spec.bounds(k);
    parts.push_back({{"partition", spec.labels[k]},
                     {"car_lo", lo},
                     {"car_hi", hi},
                     {"images", n},
                     {"mIoU", n ? num_json(sum / static_cast<double>(n)) : J(nullptr)}});
  }
  j["car_partitions"] = parts;
  return j.dump(2) + "\n";
}

inline std::string routing_csv(const std::vector<RoutingRecord>& records) {
  std::ostringstream os;
  os << "id,gt_car,est_car,gt_part,chosen_part\n";
  for (const auto& r : records) {
    os << r.id << ',' << fmt_num(r.gt_car) << ',' << fmt_num(r.est_car) << ',' << r.gt_part << ','
       << r.chosen << '\n';
  }
  return os.str();
}

inline std::vector<RoutingRecord> read_routing_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open " + path.string());
  std::string line;
  std::getline(is, line);
  std::vector<RoutingRecord> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> c;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) c.push_back(cell);
    if (c.size() != 5) throw Error(path.string() + ": malformed row '" + line + "'");
    out.push_back({c[0], std::stod(c[2]), std::stod(c[1]), c[4], c[3]});
  }
  return out;
}

/// Rows are ground-truth partitions, columns routed partitions.
inline std::string confusion_csv(const RoutingConfusion& rc, const PartitionSpec& spec) {
  std::ostringstream os;
  os << "gt\\chosen";
  for (const auto& l : spec.labels) os << ',' << l;
  os << ",total\n";
  for (std::size_t g = 0; g < rc.matrix.size(); ++g) {
    os << spec.labels[g];
    for (auto v : rc.matrix[g]) os << ',' << v;
    os << ',' << rc.gt_counts[g] << '\n';
  }
  return os.str();
}

inline std::string scatter_csv(const std::vector<RoutingRecord>& records) {
  std::ostringstream os;
  os << "id,gt_car,est_car\n";
  for (const auto& r : records) os << r.id << ',' << fmt_num(r.gt_car) << ',' << fmt_num(r.est_car) << '\n';
  return os.str();
}

/// Side-by-side histograms of ground-truth and estimated CAR.
inline std::string car_distribution_csv(const std::vector<RoutingRecord>& records, std::size_t bins) {
  std::vector<double> gt, est;
  for (const auto& r : records) {
    gt.push_back(r.gt_car);
    est.push_back(r.est_car);
  }
  const auto hg = car_histogram(gt, bins), he = car_histogram(est, bins);
  std::ostringstream os;
  os << "bin,car_lo,car_hi,gt_count,est_count\n";
  for (std::size_t i = 0; i < bins; ++i) {
    os << i << ',' << fmt_num(hg.edges[i]) << ',' << fmt_num(hg.edges[i + 1]) << ',' << hg.counts[i]
       << ',' << he.counts[i] << '\n';
  }
  return os.str();
}

}  // namespace mtkd
