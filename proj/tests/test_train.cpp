#include <gtest/gtest.h>

#include <atomic>

#include "test_util.hpp"

using namespace mtkd;
using mtkd::testing::tiny_config;
using mtkd::testing::tiny_dataset;

namespace {

// CAR targets inside each of the three default partitions.
Dataset mixed_dataset(std::size_t count, std::uint64_t seed, Split split = Split::train) {
  SyntheticSpec spec;
  spec.count = count;
  spec.size = 8;
  spec.uniform_car = false;
  spec.car_targets = {{0.03, 1.0}, {0.1, 1.0}, {0.4, 1.0}};
  return generate_synthetic(spec, seed, split);
}

struct Fixture {
  Dataset train = mixed_dataset(24, 101);
  Dataset val = mixed_dataset(6, 202, Split::val);
  PartitionSpec spec = PartitionSpec::three_way();
};

SampleLoss bce_loss_fn() {
  return [](const ModelParams<float>& m, const BitemporalSample& s, std::size_t) { return bce_sample_loss(m, s); };
}

TeacherBank quick_teachers(const Fixture& f, Arch arch = Arch::fcef_mini) {
  return train_teachers(arch, 4, partition_dataset(f.train, f.spec), f.spec, f.val, tiny_config(2, 5));
}

}  // namespace

TEST(TrainConfigType, Validation) {
  TrainConfig c = tiny_config();
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config(10);
  c.eval_every = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.lambda = -1;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(BestCheckpoint, TiesGoToEarliest) {
  std::vector<HistoryRow> flat;
  for (std::size_t i = 1; i <= 6; ++i) flat.push_back({i, 1e-3, 0.5, i % 2 == 0 ? std::optional<double>(0.7) : std::nullopt});
  EXPECT_EQ(best_checkpoint_iter(flat), 2u);
  flat[5].val_miou = 0.71;
  EXPECT_EQ(best_checkpoint_iter(flat), 6u);
  EXPECT_EQ(best_checkpoint_iter({}), 0u);
}

TEST(TrainModel, SingleStepSingleEvaluation) {
  Fixture f;
  TrainConfig c = tiny_config(1);
  c.warmup_iters = 0;
  std::size_t steps = 0;
  const auto r = train_model(Arch::fcef_mini, 4, f.train, f.val, c,
                             [&](std::size_t, const ModelParams<float>&) { ++steps; });
  EXPECT_EQ(steps, 1u);
  ASSERT_EQ(r.history.size(), 1u);
  EXPECT_TRUE(r.history[0].val_miou.has_value());
  EXPECT_EQ(r.best_iter, 1u);
  EXPECT_EQ(r.history[0].lr, c.initial_lr);
}

TEST(TrainModel, Deterministic) {
  Fixture f;
  const auto a = train_model(Arch::fcsiam_diff_mini, 4, f.train, f.val, tiny_config(4));
  const auto b = train_model(Arch::fcsiam_diff_mini, 4, f.train, f.val, tiny_config(4));
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    EXPECT_EQ(a.history[i].loss, b.history[i].loss);
    EXPECT_EQ(a.history[i].lr, b.history[i].lr);
    EXPECT_EQ(a.history[i].val_miou, b.history[i].val_miou);
  }
  EXPECT_TRUE(bit_equal(a.best, b.best));
}

TEST(TrainModel, Errors) {
  Fixture f;
  EXPECT_THROW(train_model(Arch::fcef_mini, 4, Dataset{}, f.val, tiny_config()), DataError);
  EXPECT_THROW(train_model(Arch::fcef_mini, 4, f.train, Dataset{}, tiny_config()), DataError);
}

TEST(TrainModel, DivergenceIsReported) {
  Fixture f;
  TrainConfig c = tiny_config(4);
  c.initial_lr = 1e30;
  c.warmup_start_lr = 1e30;
  try {
    train_model(Arch::fcef_mini, 4, f.train, f.val, c);
    FAIL() << "expected divergence";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("iteration"), std::string::npos);
  }
}

TEST(TrainLoop, BatchLossIsMeanOfSampleLosses) {
  Fixture f;
  TrainConfig c = tiny_config(2);
  c.batch_size = 5;
  std::vector<double> seen;
  const auto r = train_loop(build_model(Arch::fcef_mini, 4, 1), f.train, f.val, c,
                            [&](const ModelParams<float>& m, const BitemporalSample& s, std::size_t iter) {
                              auto l = bce_sample_loss(m, s);
                              if (iter == 1) seen.push_back(l.item());
                              return l;
                            });
  ASSERT_EQ(seen.size(), 5u);
  double mean = 0;
  for (double v : seen) mean += v;
  mean /= 5.0;
  EXPECT_NEAR(r.history[0].loss, mean, 1e-6 * mean);
}

TEST(TrainLoop, LossDecreases) {
  Dataset train = tiny_dataset(32, 7, 16), val = tiny_dataset(8, 8, 16, Split::val);
  TrainConfig c = tiny_config(80);
  c.batch_size = 4;
  c.warmup_iters = 5;
  c.initial_lr = 3e-3;
  c.augment = false;
  const auto r = train_model(Arch::fcef_mini, 4, train, val, c);
  double head = 0, tail = 0;
  for (std::size_t i = 0; i < 10; ++i) {
    head += r.history[i].loss;
    tail += r.history[r.history.size() - 1 - i].loss;
  }
  EXPECT_LT(tail, head);
}

TEST(BatchStreamType, SameSeedSameBatches) {
  Fixture f;
  TrainConfig c = tiny_config();
  c.batch_size = 7;
  BatchStream a(f.train, c), b(f.train, c);
  for (int k = 0; k < 6; ++k) {
    const auto x = a.next(), y = b.next();
    ASSERT_EQ(x.size(), 7u);
    for (std::size_t i = 0; i < x.size(); ++i) {
      EXPECT_EQ(x[i].id, y[i].id);
      EXPECT_EQ(x[i].image_a, y[i].image_a);
    }
  }
}

TEST(TrainTeachers, OneModelPerPartition) {
  Fixture f;
  const auto bank = quick_teachers(f);
  EXPECT_EQ(bank.models.size(), 3u);
  bank.check_labels(f.spec);
  const auto two = train_teachers(Arch::fcef_mini, 4, partition_dataset(f.train, PartitionSpec::two_way()),
                                  PartitionSpec::two_way(), f.val, tiny_config(2, 5));
  EXPECT_EQ(two.models.size(), 2u);
  EXPECT_THROW(bank.check_labels(PartitionSpec::two_way()), ConfigError);
  EXPECT_THROW(bank.at("tiny"), Error);
}

TEST(TrainTeachers, EqualsTrainModelOnEachPartition) {
  Fixture f;
  const auto parts = partition_dataset(f.train, f.spec);
  const auto cfg = tiny_config(2, 5);
  const auto bank = train_teachers(Arch::fcef_mini, 4, parts, f.spec, f.val, cfg);
  for (const auto& label : f.spec.labels) {
    const auto direct =
        train_model(Arch::fcef_mini, 4, parts.at(label), partition_validation(f.val, f.spec, label), cfg);
    EXPECT_TRUE(bit_equal(bank.at(label), direct.best)) << label;
  }
}

TEST(TrainTeachers, ParallelJobsGiveSameBank) {
  Fixture f;
  const auto parts = partition_dataset(f.train, f.spec);
  const auto one = train_teachers(Arch::fcef_mini, 4, parts, f.spec, f.val, tiny_config(2, 5), nullptr, 1);
  const auto three = train_teachers(Arch::fcef_mini, 4, parts, f.spec, f.val, tiny_config(2, 5), nullptr, 3);
  for (const auto& label : f.spec.labels) EXPECT_TRUE(bit_equal(one.at(label), three.at(label)));
}

TEST(TrainTeachers, EmptyPartitionAsksForThresholdAdjustment) {
  Fixture f;
  const auto spec = PartitionSpec::from_thresholds({0.05, 0.2, 0.95});
  try {
    train_teachers(Arch::fcef_mini, 4, partition_dataset(f.train, spec), spec, f.val, tiny_config(2));
    FAIL() << "expected an error";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("threshold"), std::string::npos);
  }
}

TEST(Mtkd, LambdaZeroMatchesPlainTrainingAtEveryStep) {
  Fixture f;
  const auto bank = quick_teachers(f);
  const auto m_o = train_model(Arch::fcef_mini, 4, f.train, f.val, tiny_config(2, 9)).best;
  TrainConfig c = tiny_config(10, 77);
  c.lambda = 0.0;
  std::vector<ModelParams<float>> plain, student;
  train_loop(m_o, f.train, f.val, c, bce_loss_fn(),
             [&](std::size_t, const ModelParams<float>& m) { plain.push_back(m); });
  train_student_mtkd(m_o, bank, f.spec, f.train, f.val, c,
                     [&](std::size_t, const ModelParams<float>& m) { student.push_back(m); });
  ASSERT_EQ(plain.size(), 10u);
  ASSERT_EQ(student.size(), 10u);
  for (std::size_t i = 0; i < plain.size(); ++i) EXPECT_TRUE(bit_equal(plain[i], student[i])) << "iter " << i + 1;
}

TEST(Mtkd, PositiveLambdaChangesTheUpdate) {
  Fixture f;
  const auto bank = quick_teachers(f);
  const auto m_o = build_model(Arch::fcef_mini, 4, 3);
  TrainConfig c = tiny_config(2, 77);
  c.lambda = 1.0;
  const auto a = train_student_mtkd(m_o, bank, f.spec, f.train, f.val, c);
  c.lambda = 0.0;
  const auto b = train_student_mtkd(m_o, bank, f.spec, f.train, f.val, c);
  EXPECT_NE(a.history[0].loss, b.history[0].loss);
}

TEST(Mtkd, StudentStartsAsOriginalModel) {
  Fixture f;
  const auto bank = quick_teachers(f);
  const auto m_o = train_model(Arch::fcsiam_diff_mini, 4, f.train, f.val, tiny_config(2, 9)).best;
  TrainConfig c = tiny_config(2, 4);
  c.lambda = 1e-3;
  bool checked = false;
  train_loop(m_o, f.train, f.val, c,
             [&](const ModelParams<float>& student, const BitemporalSample& s, std::size_t iter) {
               if (iter == 1 && !checked) {
                 for (const auto& v : f.val.samples) {
                   EXPECT_EQ(change_map(student, v.tensor_a(), v.tensor_b()),
                             change_map(m_o, v.tensor_a(), v.tensor_b()));
                 }
                 checked = true;
               }
               return mtkd_sample_loss(student, bank, f.spec, s, c.lambda, c.kd_target);
             });
  EXPECT_TRUE(checked);
}

TEST(Mtkd, TeachersStayFrozenAndAssignmentsFollowGroundTruth) {
  Fixture f;
  const auto bank = quick_teachers(f);
  const TeacherBank before = bank;
  TrainConfig c = tiny_config(4, 8);
  c.lambda = 0.5;
  for (KdTarget target : {KdTarget::probability, KdTarget::logits}) {
    c.kd_target = target;
    const auto r = train_student_mtkd(build_model(Arch::fcef_mini, 4, 1), bank, f.spec, f.train, f.val, c);
    ASSERT_EQ(r.assignments.size(), 4 * c.batch_size);
    for (const auto& a : r.assignments) EXPECT_EQ(a.partition, partition_of(a.car, f.spec));
  }
  for (const auto& label : f.spec.labels) {
    EXPECT_TRUE(bit_equal(before.at(label), bank.at(label)));
    for (const auto& [name, t] : bank.at(label).tensors) EXPECT_FALSE(t.has_grad()) << name;
  }
}

TEST(Mtkd, LabelMismatchIsAnError) {
  Fixture f;
  const auto bank = quick_teachers(f);
  EXPECT_THROW(train_student_mtkd(build_model(Arch::fcef_mini, 4, 1), bank, PartitionSpec::two_way(), f.train,
                                  f.val, tiny_config()),
               ConfigError);
}

TEST(LambdaSearch, GridHandling) {
  Fixture f;
  const auto bank = quick_teachers(f);
  const auto m_o = build_model(Arch::fcef_mini, 4, 2);
  const auto cfg = tiny_config(2, 6);
  const auto single = lambda_search({5e-4}, m_o, bank, f.spec, f.train, f.val, cfg);
  EXPECT_EQ(single.best_lambda, 5e-4);
  EXPECT_EQ(single.trials.size(), 1u);
  EXPECT_EQ(single.max_iters, 2u);

  const auto dup = lambda_search({1e-3, 1e-5, 1e-3}, m_o, bank, f.spec, f.train, f.val, cfg, 2);
  ASSERT_EQ(dup.trials.size(), 2u);
  EXPECT_EQ(dup.trials[0].lambda, 1e-5);
  EXPECT_EQ(dup.trials[1].lambda, 1e-3);
  const double best = std::max(dup.trials[0].val_miou, dup.trials[1].val_miou);
  EXPECT_EQ(dup.best_lambda, dup.trials[0].val_miou == best ? 1e-5 : 1e-3);
  EXPECT_THROW(lambda_search({}, m_o, bank, f.spec, f.train, f.val, cfg), ConfigError);
}

TEST(LambdaSearch, TiesGoToSmallerLambda) {
  Fixture f;
  const auto bank = quick_teachers(f);
  const auto m_o = build_model(Arch::fcef_mini, 4, 2);
  // Weights this small leave the student unchanged at float precision.
  const auto r = lambda_search({1e-38, 0.0}, m_o, bank, f.spec, f.train, f.val, tiny_config(2, 6));
  ASSERT_EQ(r.trials.size(), 2u);
  ASSERT_EQ(r.trials[0].val_miou, r.trials[1].val_miou);
  EXPECT_EQ(r.best_lambda, 0.0);
}

TEST(ParallelFor, RunsEveryIndexOnceAndRethrowsFirstError) {
  std::vector<std::atomic<int>> hits(50);
  parallel_for(hits.size(), 4, [&](std::size_t i) { ++hits[i]; });
  for (const auto& h : hits) EXPECT_EQ(h.load(), 1);
  try {
    parallel_for(10, 3, [](std::size_t i) {
      if (i == 3 || i == 7) throw Error("index " + std::to_string(i));
    });
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "index 3");
  }
}
