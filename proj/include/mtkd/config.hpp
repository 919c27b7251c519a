#pragma once

// Experiment configuration: a flat INI-style file.
//
//   # comment
//   [section]
//   key = value
//
// Sections and keys (defaults in parentheses):
//
//   [experiment]  arch (required: fcef-mini | fcsiam-diff-mini), width (8),
//                 seed (0), out (runs/experiment), threshold (0.5),
//                 zero_division (one | skip), partition_k (5), jobs (1)
//   [partition]   thresholds (0.05,0.2), labels (small,medium,large for two
//                 thresholds, small,large for one, p0..pK otherwise)
//   [data]        root (directory holding train/ val/ test/; default <out>/data),
//                 synthetic (false), size (32), train_count (200),
//                 val_count (40), test_count (60), car_min (0), car_max (0.6),
//                 car_targets (target:weight list; replaces the uniform range),
//                 noise (0.02), shapes (rectangle,ellipse)
//   [original] [teacher] [student]
//                 max_iters (2000; student 1000), warmup_iters (100; student 50),
//                 batch_size (8), initial_lr (1e-3), warmup_start_lr (1e-6),
//                 lr_kind (linear | cosine), eval_every (100; student 50),
//                 weight_decay (0.01), beta1 (0.9), beta2 (0.99), adam_eps (1e-8),
//                 augment (true); student only: lambda (1e-3),
//                 kd_target (probability | logits)
//   [lambda_search] grid (1e-5,1e-4,5e-4,1e-3,5e-3), max_iters (200),
//                 warmup_iters (20), eval_every (50)
//
// The [data] section must set root or synthetic = true. Unknown sections or
// keys are errors.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mtkd/car.hpp"
#include "mtkd/data.hpp"
#include "mtkd/error.hpp"
#include "mtkd/metrics.hpp"
#include "mtkd/model.hpp"
#include "mtkd/rng.hpp"
#include "mtkd/train.hpp"

namespace mtkd {

struct DataConfig {
  std::optional<std::filesystem::path> root;
  bool synthetic = false;
  SyntheticSpec synthetic_spec;
  std::size_t train_count = 200;
  std::size_t val_count = 40;
  std::size_t test_count = 60;
};

struct ExperimentConfig {
  Arch arch = Arch::fcef_mini;
  std::size_t width = 8;
  std::uint64_t seed = 0;
  std::filesystem::path out = "runs/experiment";
  double threshold = 0.5;
  ZeroDivision zero_division = ZeroDivision::one;
  std::size_t partition_k = 5;
  std::size_t jobs = 1;
  PartitionSpec partition = PartitionSpec::three_way();
  DataConfig data;
  TrainConfig original;
  TrainConfig teacher;
  TrainConfig student;
  std::vector<double> lambda_grid = {1e-5, 1e-4, 5e-4, 1e-3, 5e-3};
  std::size_t lambda_search_iters = 200;
  std::size_t lambda_search_warmup = 20;
  std::size_t lambda_search_eval_every = 50;

  ExperimentConfig() {
    student.max_iters = 1000;
    student.warmup_iters = 50;
    student.eval_every = 50;
    student.lambda = 1e-3;
  }

  std::filesystem::path data_root() const { return data.root ? *data.root : out / "data"; }

  /// Training configuration of a role with the shared threshold, metric
  /// convention and a seed derived from the global seed.
  TrainConfig role(const std::string& name) const {
    TrainConfig c = name == "original" ? original : name == "teacher" ? teacher : student;
    c.threshold = threshold;
    c.zero_division = zero_division;
    c.seed = derive_seed(seed, name);
    return c;
  }

  TrainConfig lambda_search_config() const {
    TrainConfig c = role("student");
    c.max_iters = lambda_search_iters;
    c.warmup_iters = lambda_search_warmup;
    c.eval_every = lambda_search_eval_every;
    return c;
  }

  void validate() const {
    if (width < kMinWidth) throw ConfigError("experiment.width must be at least 4");
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("experiment.threshold must lie in (0,1)");
    if (partition_k == 0) throw ConfigError("experiment.partition_k must be at least 1");
    if (jobs == 0) throw ConfigError("experiment.jobs must be at least 1");
    partition.validate();
    for (const char* r : {"original", "teacher", "student"}) {
      try {
        role(r).validate();
      } catch (const ConfigError& e) {
        throw ConfigError(std::string("[") + r + "] " + e.what());
      }
    }
    try {
      lambda_search_config().validate();
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("[lambda_search] ") + e.what());
    }
    if (lambda_grid.empty()) throw ConfigError("lambda_search.grid is empty");
    for (double l : lambda_grid) {
      if (!(l >= 0.0)) throw ConfigError("lambda_search.grid values must be >= 0");
    }
    if (data.synthetic) {
      data.synthetic_spec.validate();
      if (data.train_count == 0 || data.val_count == 0 || data.test_count == 0) {
        throw ConfigError("data: train_count, val_count and test_count must be positive");
      }
    }
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(trim(item));
  return out;
}

/// One `key = value` occurrence with where it came from.
struct ConfigEntry {
  std::string value;
  std::size_t line = 0;
  bool used = false;
};

class ConfigReader {
 public:
  ConfigReader(const std::string& text, std::string source) : source_(std::move(source)) {
    static const std::set<std::string> sections = {"experiment", "partition", "data", "original",
                                                   "teacher", "student", "lambda_search"};
    std::istringstream is(text);
    std::string raw;
    std::string section;
    std::size_t lineno = 0;
    while (std::getline(is, raw)) {
      ++lineno;
      std::string line = raw;
      if (auto pos = line.find('#'); pos != std::string::npos) line.erase(pos);
      line = trim(line);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']') throw error(lineno, "malformed section header '" + line + "'");
        section = trim(line.substr(1, line.size() - 2));
        if (!sections.count(section)) throw error(lineno, "unknown section [" + section + "]");
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw error(lineno, "expected 'key = value', got '" + line + "'");
      if (section.empty()) throw error(lineno, "key outside of any [section]");
      const std::string key = section + "." + trim(line.substr(0, eq));
      if (entries_.count(key)) throw error(lineno, "duplicate key '" + key + "'");
      entries_[key] = {trim(line.substr(eq + 1)), lineno, false};
    }
  }

  bool has(const std::string& key) const { return entries_.count(key) > 0; }

  std::optional<std::string> get(const std::string& key) {
    auto it = entries_.find(key);
    if (it == entries_.end()) return std::nullopt;
    it->second.used = true;
    return it->second.value;
  }

  template <typename Parse>
  auto parse(const std::string& key, Parse&& fn) -> std::optional<decltype(fn(std::string{}))> {
    auto v = get(key);
    if (!v) return std::nullopt;
    try {
      return fn(*v);
    } catch (const std::exception& e) {
      throw error(entries_.at(key).line, "invalid value '" + *v + "' for " + key + ": " + e.what());
    }
  }

  void finish() const {
    for (const auto& [key, e] : entries_) {
      if (!e.used) throw error(e.line, "unknown key '" + key + "'");
    }
  }

  ConfigError error(std::size_t line, const std::string& msg) const {
    return ConfigError(source_ + ":" + std::to_string(line) + ": " + msg);
  }

 private:
  std::string source_;
  std::map<std::string, ConfigEntry> entries_;
};

inline double parse_double(const std::string& s) {
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw ConfigError("not a number");
  return v;
}

inline std::size_t parse_count(const std::string& s) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
    throw ConfigError("not a nonnegative integer");
  }
  return std::stoull(s);
}

inline bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError("not a boolean");
}

inline std::vector<double> parse_doubles(const std::string& s) {
  std::vector<double> out;
  for (const auto& item : split_list(s)) out.push_back(parse_double(item));
  return out;
}

inline void read_role(ConfigReader& r, const std::string& section, TrainConfig& c) {
  const std::string p = section + ".";
  if (auto v = r.parse(p + "max_iters", parse_count)) c.max_iters = *v;
  if (auto v = r.parse(p + "warmup_iters", parse_count)) c.warmup_iters = *v;
  if (auto v = r.parse(p + "batch_size", parse_count)) c.batch_size = *v;
  if (auto v = r.parse(p + "initial_lr", parse_double)) c.initial_lr = *v;
  if (auto v = r.parse(p + "warmup_start_lr", parse_double)) c.warmup_start_lr = *v;
  if (auto v = r.parse(p + "lr_kind", parse_lr_kind)) c.lr_kind = *v;
  if (auto v = r.parse(p + "eval_every", parse_count)) c.eval_every = *v;
  if (auto v = r.parse(p + "weight_decay", parse_double)) c.adamw.weight_decay = *v;
  if (auto v = r.parse(p + "beta1", parse_double)) c.adamw.beta1 = *v;
  if (auto v = r.parse(p + "beta2", parse_double)) c.adamw.beta2 = *v;
  if (auto v = r.parse(p + "adam_eps", parse_double)) c.adamw.eps = *v;
  if (auto v = r.parse(p + "augment", parse_bool)) c.augment = *v;
  if (section == "student") {
    if (auto v = r.parse(p + "lambda", parse_double)) c.lambda = *v;
    if (auto v = r.parse(p + "kd_target", parse_kd_target)) c.kd_target = *v;
  }
}

}  // namespace detail

inline ExperimentConfig parse_config(const std::string& text, const std::string& source = "config") {
  using namespace detail;
  ConfigReader r(text, source);
  ExperimentConfig cfg;

  auto arch = r.parse("experiment.arch", parse_arch);
  if (!arch) throw ConfigError(source + ": missing required key experiment.arch");
  cfg.arch = *arch;
  if (auto v = r.parse("experiment.width", parse_count)) cfg.width = *v;
  if (auto v = r.parse("experiment.seed", parse_count)) cfg.seed = *v;
  if (auto v = r.get("experiment.out")) cfg.out = *v;
  if (auto v = r.parse("experiment.threshold", parse_double)) cfg.threshold = *v;
  if (auto v = r.parse("experiment.zero_division", parse_zero_division)) cfg.zero_division = *v;
  if (auto v = r.parse("experiment.partition_k", parse_count)) cfg.partition_k = *v;
  if (auto v = r.parse("experiment.jobs", parse_count)) cfg.jobs = *v;

  auto thresholds = r.parse("partition.thresholds", parse_doubles);
  auto labels = r.parse("partition.labels", [](const std::string& s) { return split_list(s); });
  if (thresholds) cfg.partition.thresholds = *thresholds;
  cfg.partition.labels = labels ? *labels : PartitionSpec::default_labels(cfg.partition.thresholds.size());
  try {
    cfg.partition.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(source + ": [partition] " + e.what());
  }

  auto& d = cfg.data;
  if (auto v = r.get("data.root")) d.root = *v;
  if (auto v = r.parse("data.synthetic", parse_bool)) d.synthetic = *v;
  if (!d.root && !d.synthetic) {
    throw ConfigError(source + ": missing required key data.root (or data.synthetic = true)");
  }
  auto& sp = d.synthetic_spec;
  if (auto v = r.parse("data.size", parse_count)) sp.size = *v;
  if (auto v = r.parse("data.train_count", parse_count)) d.train_count = *v;
  if (auto v = r.parse("data.val_count", parse_count)) d.val_count = *v;
  if (auto v = r.parse("data.test_count", parse_count)) d.test_count = *v;
  if (auto v = r.parse("data.car_min", parse_double)) sp.car_min = *v;
  if (auto v = r.parse("data.car_max", parse_double)) sp.car_max = *v;
  if (auto v = r.parse("data.noise", parse_double)) sp.noise = *v;
  if (auto v = r.parse("data.car_targets", [](const std::string& s) {
        std::vector<std::pair<double, double>> out;
        for (const auto& item : split_list(s)) {
          const auto colon = item.find(':');
          if (colon == std::string::npos) throw ConfigError("expected target:weight pairs");
          out.emplace_back(parse_double(item.substr(0, colon)), parse_double(item.substr(colon + 1)));
        }
        return out;
      })) {
    sp.uniform_car = false;
    sp.car_targets = *v;
  }
  if (auto v = r.parse("data.shapes", [](const std::string& s) {
        std::vector<ShapeKind> out;
        for (const auto& item : split_list(s)) {
          if (item == "rectangle") out.push_back(ShapeKind::rectangle);
          else if (item == "ellipse") out.push_back(ShapeKind::ellipse);
          else throw ConfigError("unknown shape '" + item + "'");
        }
        return out;
      })) {
    sp.shapes = *v;
  }

  read_role(r, "original", cfg.original);
  read_role(r, "teacher", cfg.teacher);
  read_role(r, "student", cfg.student);

  if (auto v = r.parse("lambda_search.grid", parse_doubles)) cfg.lambda_grid = *v;
  if (auto v = r.parse("lambda_search.max_iters", parse_count)) cfg.lambda_search_iters = *v;
  if (auto v = r.parse("lambda_search.warmup_iters", parse_count)) cfg.lambda_search_warmup = *v;
  if (auto v = r.parse("lambda_search.eval_every", parse_count)) cfg.lambda_search_eval_every = *v;

  r.finish();
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(source + ": " + e.what());
  }
  return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), path.string());
}

}  // namespace mtkd
