#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "mtkd/data.hpp"
#include "mtkd/error.hpp"
#include "mtkd/mask.hpp"

namespace mtkd {

/// Fraction of changed pixels.
inline double compute_car(const BinaryMask& mask) {
  if (mask.size() == 0) throw DataError("compute_car: empty mask");
  std::size_t changed = 0;
  for (auto v : mask.values) changed += v != 0;
  return static_cast<double>(changed) / static_cast<double>(mask.size());
}

/// Ordered CAR thresholds and the names of the resulting partitions.
/// Partition k holds CARs in (th[k-1], th[k]]; the first is [0, th[0]] and
/// the last (th[K-2], 1].
struct PartitionSpec {
  std::vector<double> thresholds;
  std::vector<std::string> labels;

  std::size_t partition_count() const { return labels.size(); }

  void validate() const {
    if (labels.size() != thresholds.size() + 1) {
      throw ConfigError("partition spec needs one more label than thresholds (" +
                        std::to_string(thresholds.size()) + " thresholds, " +
                        std::to_string(labels.size()) + " labels)");
    }
    for (std::size_t i = 0; i < thresholds.size(); ++i) {
      if (!(thresholds[i] > 0.0 && thresholds[i] < 1.0)) {
        throw ConfigError("CAR threshold " + std::to_string(thresholds[i]) + " is outside (0,1)");
      }
      if (i > 0 && !(thresholds[i] > thresholds[i - 1])) {
        throw ConfigError("CAR thresholds must be strictly increasing");
      }
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i].empty()) throw ConfigError("empty partition label");
      for (std::size_t j = 0; j < i; ++j) {
        if (labels[i] == labels[j]) throw ConfigError("duplicate partition label '" + labels[i] + "'");
      }
    }
  }

  /// Labels small/large, small/medium/large, or p0..pK for other counts.
  static std::vector<std::string> default_labels(std::size_t thresholds) {
    if (thresholds == 1) return {"small", "large"};
    if (thresholds == 2) return {"small", "medium", "large"};
    std::vector<std::string> out;
    for (std::size_t i = 0; i <= thresholds; ++i) out.push_back("p" + std::to_string(i));
    return out;
  }

  static PartitionSpec from_thresholds(std::vector<double> th) {
    PartitionSpec spec{std::move(th), {}};
    spec.labels = default_labels(spec.thresholds.size());
    spec.validate();
    return spec;
  }

  /// th1 = 0.05, th2 = 0.2.
  static PartitionSpec three_way() { return from_thresholds({0.05, 0.2}); }
  /// th = 0.10.
  static PartitionSpec two_way() { return from_thresholds({0.10}); }

  std::size_t index_of(const std::string& label) const {
    auto it = std::find(labels.begin(), labels.end(), label);
    if (it == labels.end()) throw ConfigError("unknown partition label '" + label + "'");
    return static_cast<std::size_t>(it - labels.begin());
  }

  /// CAR range covered by partition k.
  std::pair<double, double> bounds(std::size_t k) const {
    return {k == 0 ? 0.0 : thresholds[k - 1], k == thresholds.size() ? 1.0 : thresholds[k]};
  }
};

/// Index of the first partition whose upper threshold is >= car (every
/// boundary belongs to the lower partition).
inline std::size_t partition_index(double car, const PartitionSpec& spec) {
  std::size_t k = 0;
  while (k < spec.thresholds.size() && car > spec.thresholds[k]) ++k;
  return k;
}

inline const std::string& partition_of(double car, const PartitionSpec& spec) {
  return spec.labels[partition_index(car, spec)];
}

/// Splits a dataset by ground-truth CAR. Every label of the spec appears as
/// a key, possibly with an empty subset; input order is preserved.
inline std::map<std::string, Dataset> partition_dataset(const Dataset& ds, const PartitionSpec& spec) {
  spec.validate();
  std::map<std::string, Dataset> out;
  for (const auto& label : spec.labels) out[label].split = ds.split;
  for (const auto& s : ds.samples) {
    out[partition_of(compute_car(s.label), spec)].samples.push_back(s);
  }
  return out;
}

struct CarHistogram {
  std::vector<double> edges;         // bin_count + 1 values from 0 to 1
  std::vector<std::size_t> counts;   // bin_count values
};

/// Equal-width bins over [0,1]; the last bin includes 1.
inline CarHistogram car_histogram(const std::vector<double>& cars, std::size_t bin_count) {
  if (bin_count == 0) throw ConfigError("car_histogram: bin_count must be at least 1");
  CarHistogram h;
  h.counts.assign(bin_count, 0);
  for (std::size_t i = 0; i <= bin_count; ++i) {
    h.edges.push_back(static_cast<double>(i) / static_cast<double>(bin_count));
  }
  for (double car : cars) {
    if (!(car >= 0.0 && car <= 1.0)) throw DataError("CAR value outside [0,1]");
    auto bin = static_cast<std::size_t>(car * static_cast<double>(bin_count));
    h.counts[std::min(bin, bin_count - 1)] += 1;
  }
  return h;
}

inline CarHistogram car_histogram(const Dataset& ds, std::size_t bin_count) {
  std::vector<double> cars;
  for (const auto& s : ds.samples) cars.push_back(compute_car(s.label));
  return car_histogram(cars, bin_count);
}

}  // namespace mtkd
