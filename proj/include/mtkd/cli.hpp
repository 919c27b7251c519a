#pragma once

// Command-line experiment runner. Every subcommand reads the config file,
// writes its artifacts under the output directory and prints one summary
// line on stdout. Progress and checkpoint loading are logged on stderr at
// the level given by MTKD_LOG (quiet | info | debug; default info).
//
// Artifacts (relative to the output directory):
//   data/<split>/{A,B,label}/<id>.png     gen-data (unless data.root is set)
//   car-<split>.csv, car-histogram-<split>.csv          compute-car
//   partition.csv                                       partition
//   <role>-<partition|full>-<iter>.ckpt, checkpoints.json,
//   history-<role>-<partition|full>.csv                 train-*
//   assignments-student.csv                             train-student
//   lambda-search.csv                                   lambda-search
//   infer-<mode>-<split>/masks/<id>.png                 infer
//   eval-<mode>-<split>/{metrics.csv,summary.json,partitions.csv}  evaluate
//   {infer,eval}-op-<split>/{routing.csv,confusion.csv} infer/evaluate --mode op
//   partitions-k<k>-<split>.csv                         report-partitions
//   routing-<split>/{confusion.csv,scatter.csv,car-distribution.csv}  report-routing
//   grad-check.csv                                      grad-check

#include <cstdint>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mtkd/car.hpp"
#include "mtkd/checkpoint.hpp"
#include "mtkd/config.hpp"
#include "mtkd/data.hpp"
#include "mtkd/grad_suite.hpp"
#include "mtkd/metrics.hpp"
#include "mtkd/pipeline.hpp"
#include "mtkd/report.hpp"
#include "mtkd/routing.hpp"
#include "mtkd/train.hpp"

namespace mtkd::cli {

enum class LogLevel { quiet, info, debug };

inline LogLevel parse_log_level(const char* value) {
  if (value == nullptr) return LogLevel::info;
  const std::string v = value;
  if (v == "quiet" || v == "0") return LogLevel::quiet;
  if (v == "debug" || v == "2") return LogLevel::debug;
  return LogLevel::info;
}

class Logger {
 public:
  Logger(std::ostream& os, LogLevel level) : os_(os), level_(level) {}
  void info(const std::string& msg) const {
    if (level_ >= LogLevel::info) os_ << "[mtkd] " << msg << '\n';
  }
  void debug(const std::string& msg) const {
    if (level_ >= LogLevel::debug) os_ << "[mtkd] " << msg << '\n';
  }
  LogLevel level() const { return level_; }

 private:
  std::ostream& os_;
  LogLevel level_;
};

namespace fs = std::filesystem;

/// State shared by the subcommands of one invocation.
class Session {
 public:
  Session(ExperimentConfig cfg, const Logger& log) : cfg_(std::move(cfg)), log_(log) {}

  const ExperimentConfig& cfg() const { return cfg_; }
  const Logger& log() const { return log_; }
  fs::path out() const { return cfg_.out; }
  std::size_t checkpoints_loaded() const { return loaded_; }

  Dataset dataset(Split split) const {
    const fs::path root = cfg_.data_root();
    if (!fs::exists(root / to_string(split))) {
      throw DataError("no " + to_string(split) + " split under " + root.string() +
                      (cfg_.data.synthetic ? " (run gen-data first)" : ""));
    }
    Dataset ds = load_dataset(root, split);
    log_.debug("loaded " + std::to_string(ds.size()) + " " + to_string(split) + " samples");
    return ds;
  }

  /// Saves a trained model and records it in checkpoints.json.
  fs::path store(const std::string& role, const std::string& part, const TrainResult& r) {
    const std::string stem = role + "-" + part;
    const std::string file = stem + "-" + std::to_string(r.best_iter) + ".ckpt";
    fs::create_directories(out());
    for (const auto& entry : fs::directory_iterator(out())) {
      const std::string old = entry.path().filename().string();
      if (old.rfind(stem + "-", 0) == 0 && entry.path().extension() == ".ckpt" &&
          old.find_first_not_of("0123456789", stem.size() + 1) == old.size() - 5) {
        fs::remove(entry.path());
      }
    }
    save_checkpoint(out() / file, r.best);
    write_text(out() / ("history-" + stem + ".csv"), history_csv(r.history));
    auto index = read_index();
    index[role][part] = {{"file", file}, {"iter", r.best_iter}, {"val_mIoU", r.best_val_miou}};
    write_text(out() / "checkpoints.json", index.dump(2) + "\n");
    log_.info("saved " + file + " (val mIoU " + fmt_num(r.best_val_miou) + ")");
    return out() / file;
  }

  void clear_role(const std::string& role) {
    auto index = read_index();
    index.erase(role);
    write_text(out() / "checkpoints.json", index.dump(2) + "\n");
  }

  ModelParams<float> load(const std::string& role, const std::string& part) {
    const auto index = read_index();
    if (!index.contains(role) || !index[role].contains(part)) {
      throw Error("no " + role + " checkpoint for '" + part + "' in " +
                  (out() / "checkpoints.json").string() + "; run train-" + role +
                  (role == "teacher" ? "s" : "") + " first");
    }
    const std::string file = index[role][part]["file"];
    ModelParams<float> m = load_checkpoint(out() / file);
    if (m.arch != cfg_.arch || m.width != cfg_.width) {
      throw ConfigError(file + " holds a " + to_string(m.arch) + " of width " +
                        std::to_string(m.width) + ", config asks for " + to_string(cfg_.arch) +
                        " of width " + std::to_string(cfg_.width));
    }
    ++loaded_;
    log_.info("loaded checkpoint " + file);
    return m;
  }

  TeacherBank load_teachers() {
    TeacherBank bank;
    for (const auto& label : cfg_.partition.labels) bank.models.emplace(label, load("teacher", label));
    return bank;
  }

 private:
  nlohmann::json read_index() const {
    const fs::path path = out() / "checkpoints.json";
    if (!fs::exists(path)) return nlohmann::json::object();
    std::ifstream is(path);
    try {
      return nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
      throw Error(path.string() + ": " + e.what());
    }
  }

  ExperimentConfig cfg_;
  const Logger& log_;
  std::size_t loaded_ = 0;
};

inline const std::vector<std::string>& modes() {
  static const std::vector<std::string> m = {"original", "op", "mtkd"};
  return m;
}

/// Predictions of one inference mode; op mode also returns routing records.
struct Inference {
  std::vector<EvalRow> rows;
  std::vector<RoutingRecord> routing;
};

inline Inference run_inference(Session& s, const std::string& mode, const Dataset& ds) {
  const auto& cfg = s.cfg();
  Inference out;
  if (mode == "op") {
    const ModelParams<float> m_o = s.load("original", "full");
    const TeacherBank bank = s.load_teachers();
    const auto estimator = original_model_estimator(m_o, cfg.threshold);
    for (const auto& sample : ds.samples) {
      auto [mask, rec] = route_and_predict(estimator, bank, cfg.partition, sample, cfg.threshold);
      out.rows.push_back({sample.id, sample.label, std::move(mask)});
      out.routing.push_back(std::move(rec));
    }
  } else {
    const ModelParams<float> m =
        mode == "original" ? s.load("original", "full") : s.load("student", "full");
    for (const auto& sample : ds.samples) {
      const ChangeMap cm = change_map(m, sample.tensor_a(), sample.tensor_b());
      out.rows.push_back({sample.id, sample.label, predict_mask(cm, cfg.threshold)});
    }
  }
  s.log().info(mode + " inference loaded " + std::to_string(s.checkpoints_loaded()) +
               " checkpoint(s)");
  return out;
}

inline void write_routing(const fs::path& dir, const std::vector<RoutingRecord>& records,
                          const PartitionSpec& spec) {
  write_text(dir / "routing.csv", routing_csv(records));
  write_text(dir / "confusion.csv", confusion_csv(routing_confusion(records, spec), spec));
}

inline double routing_accuracy(const std::vector<RoutingRecord>& records) {
  std::size_t hit = 0;
  for (const auto& r : records) hit += r.chosen == r.gt_part ? 1 : 0;
  return records.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(records.size());
}

inline std::string join(const std::vector<std::string>& items, const std::string& sep = ", ") {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? sep : "") + items[i];
  return out;
}

/// Entry point of the `mtkd` tool.
inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  const Logger log(err, parse_log_level(std::getenv("MTKD_LOG")));

  CLI::App app{"Multi-teacher knowledge distillation for bitemporal change detection"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::string split_name = "test";
  std::string mode = "original";
  std::size_t bins = 10;
  std::size_t k_groups = 5;
  std::optional<std::size_t> jobs;
  std::size_t grad_seeds = 5;

  auto common = [&](CLI::App* sub, bool config_required = true) {
    auto* c = sub->add_option("--config", config_path, "Experiment config file");
    if (config_required) c->required();
    sub->add_option("--seed", seed, "Override experiment.seed");
    sub->add_option("--out", out_dir, "Override experiment.out");
  };
  auto mode_option = [&](CLI::App* sub) {
    sub->add_option("--mode", mode, "Inference mode")
        ->required()
        ->check(CLI::IsMember(modes()));
  };

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic dataset");
  common(gen);
  auto* car = app.add_subcommand("compute-car", "Per-sample change area ratio and histogram");
  common(car);
  car->add_option("--split", split_name, "Dataset split")->check(CLI::IsMember({"train", "val", "test"}));
  car->add_option("--bins", bins, "Histogram bins")->check(CLI::PositiveNumber);
  auto* part = app.add_subcommand("partition", "Partition the training split by CAR");
  common(part);
  auto* tro = app.add_subcommand("train-original", "Train the original model on all training data");
  common(tro);
  auto* trt = app.add_subcommand("train-teachers", "Train one teacher per CAR partition");
  common(trt);
  trt->add_option("--jobs", jobs, "Parallel workers")->check(CLI::PositiveNumber);
  auto* trs = app.add_subcommand("train-student", "Distil the teachers into the student");
  common(trs);
  auto* lam = app.add_subcommand("lambda-search", "Select the distillation weight on validation");
  common(lam);
  lam->add_option("--jobs", jobs, "Parallel workers")->check(CLI::PositiveNumber);
  auto* inf = app.add_subcommand("infer", "Write predicted masks");
  common(inf);
  mode_option(inf);
  inf->add_option("--split", split_name, "Dataset split")->check(CLI::IsMember({"train", "val", "test"}));
  auto* ev = app.add_subcommand("evaluate", "Score an inference mode");
  common(ev);
  mode_option(ev);
  ev->add_option("--split", split_name, "Dataset split")->check(CLI::IsMember({"train", "val", "test"}));
  auto* rp = app.add_subcommand("report-partitions", "Compare modes over equal-size CAR groups");
  common(rp);
  rp->add_option("--k", k_groups, "Number of groups")->check(CLI::PositiveNumber);
  rp->add_option("--split", split_name, "Dataset split")->check(CLI::IsMember({"train", "val", "test"}));
  auto* rr = app.add_subcommand("report-routing", "Routing diagnostics of the O-P mode");
  common(rr);
  rr->add_option("--split", split_name, "Dataset split")->check(CLI::IsMember({"train", "val", "test"}));
  rr->add_option("--bins", bins, "Histogram bins")->check(CLI::PositiveNumber);
  auto* gc = app.add_subcommand("grad-check", "Finite-difference gradient verification");
  common(gc, false);
  gc->add_option("--seeds", grad_seeds, "Number of seeds")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return e.get_exit_code();
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string name = sub->get_name();
  if (name == "compute-car" && sub->count("--split") == 0) split_name = "train";

  try {
    ExperimentConfig cfg;
    if (!config_path.empty()) {
      cfg = load_config(config_path);
    } else if (name != "grad-check") {
      throw ConfigError("--config is required");
    }
    if (seed) cfg.seed = *seed;
    if (out_dir) cfg.out = *out_dir;
    if (!config_path.empty()) cfg.validate();
    Session session(cfg, log);
    const Split split = parse_split(split_name);
    const std::size_t workers = jobs ? *jobs : cfg.jobs;

    if (name == "gen-data") {
      if (!cfg.data.synthetic) throw ConfigError("gen-data needs data.synthetic = true");
      const auto [train, val, test] = synthetic_splits(cfg);
      const fs::path root = cfg.data_root();
      for (const auto* ds : {&train, &val, &test}) {
        fs::remove_all(root / to_string(ds->split));
        save_dataset(root, *ds);
      }
      out << "gen-data: " << train.size() << " train / " << val.size() << " val / " << test.size()
          << " test pairs written to " << root.string() << '\n';
    } else if (name == "compute-car") {
      const Dataset ds = session.dataset(split);
      const std::string tag = to_string(split);
      write_text(session.out() / ("car-" + tag + ".csv"), car_csv(ds, cfg.partition));
      write_text(session.out() / ("car-histogram-" + tag + ".csv"),
                 histogram_csv(car_histogram(ds, bins)));
      double total = 0.0;
      for (const auto& s : ds.samples) total += compute_car(s.label);
      out << "compute-car: " << ds.size() << " " << tag << " samples, mean CAR "
          << fmt_num(ds.size() ? total / static_cast<double>(ds.size()) : 0.0) << '\n';
    } else if (name == "partition") {
      const Dataset train = session.dataset(Split::train);
      write_text(session.out() / "partition.csv", partition_csv(train, cfg.partition));
      std::vector<std::string> counts;
      for (const auto& [label, ds] : partition_dataset(train, cfg.partition)) {
        counts.push_back(label + "=" + std::to_string(ds.size()));
      }
      out << "partition: " << join(counts, " ") << '\n';
    } else if (name == "train-original") {
      const Dataset train = session.dataset(Split::train), val = session.dataset(Split::val);
      const TrainResult r = train_model(cfg.arch, cfg.width, train, val, cfg.role("original"));
      const fs::path file = session.store("original", "full", r);
      out << "train-original: best val mIoU " << fmt_num(r.best_val_miou) << " at iter "
          << r.best_iter << " -> " << file.filename().string() << '\n';
    } else if (name == "train-teachers") {
      const Dataset train = session.dataset(Split::train), val = session.dataset(Split::val);
      std::map<std::string, TrainResult> results;
      train_teachers(cfg.arch, cfg.width, partition_dataset(train, cfg.partition), cfg.partition, val,
                     cfg.role("teacher"), &results, workers);
      session.clear_role("teacher");
      std::vector<std::string> parts;
      for (const auto& label : cfg.partition.labels) {
        const auto& r = results.at(label);
        session.store("teacher", label, r);
        parts.push_back(label + " " + fmt_num(r.best_val_miou));
      }
      out << "train-teachers: " << results.size() << " teachers, best val mIoU " << join(parts)
          << '\n';
    } else if (name == "train-student") {
      const Dataset train = session.dataset(Split::train), val = session.dataset(Split::val);
      const ModelParams<float> m_o = session.load("original", "full");
      const TeacherBank bank = session.load_teachers();
      const TrainConfig tc = cfg.role("student");
      const TrainResult r = train_student_mtkd(m_o, bank, cfg.partition, train, val, tc);
      const fs::path file = session.store("student", "full", r);
      write_text(session.out() / "assignments-student.csv", assignments_csv(r.assignments));
      out << "train-student: lambda " << fmt_num(tc.lambda) << ", best val mIoU "
          << fmt_num(r.best_val_miou) << " at iter " << r.best_iter << " -> "
          << file.filename().string() << '\n';
    } else if (name == "lambda-search") {
      const Dataset train = session.dataset(Split::train), val = session.dataset(Split::val);
      const ModelParams<float> m_o = session.load("original", "full");
      const TeacherBank bank = session.load_teachers();
      const LambdaSearchResult r = lambda_search(cfg.lambda_grid, m_o, bank, cfg.partition, train, val,
                                                 cfg.lambda_search_config(), workers);
      write_text(session.out() / "lambda-search.csv", lambda_search_csv(r));
      out << "lambda-search: best lambda " << fmt_num(r.best_lambda) << " of " << r.trials.size()
          << " values (" << r.max_iters << " iters each)\n";
    } else if (name == "infer") {
      const Dataset ds = session.dataset(split);
      const Inference inf_result = run_inference(session, mode, ds);
      const fs::path dir = session.out() / ("infer-" + mode + "-" + to_string(split));
      fs::remove_all(dir / "masks");
      fs::create_directories(dir / "masks");
      for (const auto& row : inf_result.rows) write_mask_png(dir / "masks" / (row.id + ".png"), row.pred);
      if (mode == "op") write_routing(dir, inf_result.routing, cfg.partition);
      out << "infer: " << inf_result.rows.size() << " masks (" << mode << ", "
          << session.checkpoints_loaded() << " checkpoint(s) loaded) -> " << dir.string() << '\n';
    } else if (name == "evaluate") {
      const Dataset ds = session.dataset(split);
      const Inference inf_result = run_inference(session, mode, ds);
      const MetricsReport report = dataset_metrics(inf_result.rows, cfg.zero_division);
      const fs::path dir = session.out() / ("eval-" + mode + "-" + to_string(split));
      write_text(dir / "metrics.csv", metrics_csv(report));
      write_text(dir / "summary.json",
                 summary_json(report, cfg.partition, mode, to_string(split),
                              session.checkpoints_loaded(), cfg.zero_division));
      write_text(dir / "partitions.csv",
                 partitions_csv(partition_report(report.images,
                                                 std::min(cfg.partition_k, report.images.size()))));
      if (mode == "op") write_routing(dir, inf_result.routing, cfg.partition);
      out << "evaluate: " << mode << " mIoU " << fmt_num(report.mean.miou) << " on "
          << report.images.size() << " " << to_string(split) << " images ("
          << session.checkpoints_loaded() << " checkpoint(s) loaded)\n";
    } else if (name == "report-partitions") {
      std::vector<std::pair<std::string, std::vector<PartitionRow>>> table;
      for (const auto& m : modes()) {
        const fs::path metrics = session.out() / ("eval-" + m + "-" + to_string(split)) / "metrics.csv";
        if (!fs::exists(metrics)) continue;
        table.emplace_back(m, partition_report(read_metrics_csv(metrics), k_groups));
      }
      if (table.empty()) throw Error("no evaluate results for split " + to_string(split));
      const std::string csv = comparative_partitions_csv(table);
      const fs::path file =
          session.out() / ("partitions-k" + std::to_string(k_groups) + "-" + to_string(split) + ".csv");
      write_text(file, csv);
      if (log.level() >= LogLevel::info) err << csv;
      std::vector<std::string> names;
      for (const auto& [m, rows] : table) names.push_back(m);
      out << "report-partitions: " << k_groups << " CAR groups for " << join(names) << " -> "
          << file.string() << '\n';
    } else if (name == "report-routing") {
      fs::path source = session.out() / ("eval-op-" + to_string(split)) / "routing.csv";
      if (!fs::exists(source)) source = session.out() / ("infer-op-" + to_string(split)) / "routing.csv";
      if (!fs::exists(source)) {
        throw Error("no routing.csv for split " + to_string(split) + "; run evaluate --mode op first");
      }
      const auto records = read_routing_csv(source);
      const fs::path dir = session.out() / ("routing-" + to_string(split));
      write_text(dir / "confusion.csv", confusion_csv(routing_confusion(records, cfg.partition), cfg.partition));
      write_text(dir / "scatter.csv", scatter_csv(records));
      write_text(dir / "car-distribution.csv", car_distribution_csv(records, bins));
      out << "report-routing: " << fmt_num(routing_accuracy(records)) << " of " << records.size()
          << " samples routed to their ground-truth partition -> " << dir.string() << '\n';
    } else if (name == "grad-check") {
      std::vector<std::uint64_t> seeds;
      for (std::size_t i = 1; i <= grad_seeds; ++i) seeds.push_back(cfg.seed + i);
      const auto cases = grad_suite(seeds);
      std::size_t checked = 0, skipped = 0;
      std::ostringstream csv;
      csv << "case,seed,max_rel_error,max_resolved_error,resolution,checked,skipped\n";
      for (const auto& c : cases) {
        checked += c.result.checked;
        skipped += c.result.skipped;
        csv << c.name << ',' << c.seed << ',' << fmt_num(c.result.max_rel_error) << ','
            << fmt_num(c.result.max_resolved_error) << ',' << fmt_num(c.result.resolution) << ','
            << c.result.checked << ',' << c.result.skipped << '\n';
        log.debug(c.name + " seed " + std::to_string(c.seed) + ": " +
                  fmt_num(c.result.max_resolved_error));
      }
      if (!config_path.empty() || out_dir) write_text(session.out() / "grad-check.csv", csv.str());
      const GradCase& worst = worst_case(cases);
      const bool pass = worst.result.max_resolved_error <= kGradTolerance;
      out << "grad-check: max relative error " << fmt_num(worst.result.max_resolved_error) << " ("
          << worst.name << ", seed " << worst.seed << "; " << fmt_num(max_raw_error(cases))
          << " including differences below double-precision resolution) over " << checked
          << " elements, " << skipped << " skipped at kinks: " << (pass ? "PASS" : "FAIL")
          << " (threshold " << fmt_num(kGradTolerance) << ")\n";
      return pass ? 0 : 1;
    }
    return 0;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace mtkd::cli
