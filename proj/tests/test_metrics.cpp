#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "test_util.hpp"

using namespace mtkd;
using mtkd::testing::random_mask;

namespace {

ConfusionCounts count_by_hand(const BinaryMask& gt, const BinaryMask& pred) {
  ConfusionCounts c;
  for (std::size_t y = 0; y < gt.height; ++y)
    for (std::size_t x = 0; x < gt.width; ++x) {
      const int g = gt(y, x), p = pred(y, x);
      if (g == 1 && p == 1) ++c.tp;
      if (g == 0 && p == 1) ++c.fp;
      if (g == 0 && p == 0) ++c.tn;
      if (g == 1 && p == 0) ++c.fn;
    }
  return c;
}

BinaryMask complement(BinaryMask m) {
  for (auto& v : m.values) v = 1 - v;
  return m;
}

void expect_unit_interval(const ImageMetrics& m) {
  for (double v : {m.unchanged.iou, m.unchanged.precision, m.unchanged.recall, m.unchanged.fscore,
                   m.changed.iou, m.changed.precision, m.changed.recall, m.changed.fscore, m.miou, m.mprec,
                   m.mrec, m.mfscore}) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

}  // namespace

TEST(Confusion, Examples) {
  EXPECT_EQ(confusion(BinaryMask(3, 4), BinaryMask(3, 4)), (ConfusionCounts{0, 0, 12, 0}));
  BinaryMask gt(2, 2, std::vector<std::uint8_t>{1, 0, 0, 0});
  BinaryMask pred(2, 2, std::vector<std::uint8_t>{1, 1, 0, 0});
  const auto c = confusion(gt, pred);
  EXPECT_EQ(c, (ConfusionCounts{1, 1, 2, 0}));
  const auto s = confusion(pred, gt);
  EXPECT_EQ(s.tp, c.tp);
  EXPECT_EQ(s.tn, c.tn);
  EXPECT_EQ(s.fp, c.fn);
  EXPECT_EQ(s.fn, c.fp);
  EXPECT_THROW(confusion(BinaryMask(2, 2), BinaryMask(2, 3)), ShapeError);
}

TEST(Confusion, MatchesPixelLoopAndSumsToArea) {
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const auto gt = random_mask(rng, 8, 8, rng.uniform()), pred = random_mask(rng, 8, 8, rng.uniform());
    const auto c = confusion(gt, pred);
    EXPECT_EQ(c, count_by_hand(gt, pred));
    EXPECT_EQ(c.total(), 64u);
  }
}

TEST(ImageMetricsTest, HandExample) {
  const auto m = image_metrics({1, 1, 2, 0});
  EXPECT_NEAR(m.changed.iou, 0.5, 1e-12);
  EXPECT_NEAR(m.unchanged.iou, 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(m.miou, 0.583333333333, 1e-9);
  EXPECT_NEAR(m.mprec, 0.75, 1e-12);
  EXPECT_NEAR(m.mrec, 0.833333333333, 1e-9);
  EXPECT_NEAR(m.mfscore, 0.733333333333, 1e-9);
}

TEST(ImageMetricsTest, PerfectAndEmpty) {
  BinaryMask gt(4, 4, std::vector<std::uint8_t>{1, 1, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1});
  const auto perfect = image_metrics(confusion(gt, gt));
  EXPECT_EQ(perfect.miou, 1.0);
  EXPECT_EQ(perfect.mfscore, 1.0);
  const auto empty = image_metrics(confusion(BinaryMask(4, 4), BinaryMask(4, 4)));
  EXPECT_EQ(empty.changed.iou, 1.0);
  EXPECT_EQ(empty.changed.fscore, 1.0);
  EXPECT_EQ(empty.miou, 1.0);
  EXPECT_EQ(empty.mprec, 1.0);
  EXPECT_EQ(empty.mrec, 1.0);
}

TEST(ImageMetricsTest, SkipConventionDropsAbsentClass) {
  const auto m = image_metrics({0, 0, 16, 0}, ZeroDivision::skip);
  EXPECT_TRUE(std::isnan(m.changed.iou));
  EXPECT_EQ(m.unchanged.iou, 1.0);
  EXPECT_EQ(m.miou, 1.0);
  // Missed every changed pixel: precision 0/0, recall 0 -> F from counts.
  const auto miss = image_metrics({0, 0, 12, 4}, ZeroDivision::skip);
  EXPECT_TRUE(std::isnan(miss.changed.precision));
  EXPECT_EQ(miss.changed.recall, 0.0);
  EXPECT_EQ(miss.changed.fscore, 0.0);
  EXPECT_EQ(parse_zero_division("skip"), ZeroDivision::skip);
  EXPECT_THROW(parse_zero_division("zero"), ConfigError);
}

TEST(ImageMetricsTest, FscoreIsZeroWhenNothingIsRight) {
  const auto m = image_metrics({0, 3, 0, 2});
  EXPECT_EQ(m.changed.precision, 0.0);
  EXPECT_EQ(m.changed.recall, 0.0);
  EXPECT_EQ(m.changed.fscore, 0.0);
  expect_unit_interval(m);
}

TEST(ImageMetricsTest, ComplementSwapsClasses) {
  Rng rng(2);
  for (int i = 0; i < 300; ++i) {
    const auto gt = random_mask(rng, 8, 8, rng.uniform()), pred = random_mask(rng, 8, 8, rng.uniform());
    const auto a = image_metrics(confusion(gt, pred));
    const auto b = image_metrics(confusion(complement(gt), complement(pred)));
    EXPECT_EQ(a.changed.iou, b.unchanged.iou);
    EXPECT_EQ(a.unchanged.precision, b.changed.precision);
    EXPECT_EQ(a.changed.recall, b.unchanged.recall);
    EXPECT_EQ(a.unchanged.fscore, b.changed.fscore);
    EXPECT_NEAR(a.miou, b.miou, 1e-15);
    EXPECT_NEAR(a.mprec, b.mprec, 1e-15);
    EXPECT_NEAR(a.mrec, b.mrec, 1e-15);
    EXPECT_NEAR(a.mfscore, b.mfscore, 1e-15);
    expect_unit_interval(a);
  }
}

TEST(ImageMetricsTest, PrecisionOfOneIsRecallOfOther) {
  Rng rng(3);
  for (int i = 0; i < 300; ++i) {
    const auto gt = random_mask(rng, 8, 8, rng.uniform()), pred = random_mask(rng, 8, 8, rng.uniform());
    EXPECT_EQ(image_metrics(confusion(gt, pred)).changed.precision,
              image_metrics(confusion(pred, gt)).changed.recall);
  }
}

TEST(DatasetMetrics, PerImageMean) {
  BinaryMask gt(2, 2, std::vector<std::uint8_t>{1, 0, 0, 0});
  BinaryMask pred(2, 2, std::vector<std::uint8_t>{1, 1, 0, 0});
  const auto one = dataset_metrics({{"a", gt, pred}});
  EXPECT_EQ(one.mean.miou, one.images[0].metrics.miou);
  EXPECT_EQ(one.images[0].car, 0.25);

  // mIoU 1.0 on a 2x2 image and 0.5 on an 8x8 image.
  BinaryMask big_gt(8, 8), big_pred(8, 8);
  for (std::size_t i = 0; i < 32; ++i) big_gt.values[i] = 1;
  for (std::size_t i = 16; i < 48; ++i) big_pred.values[i] = 1;
  const double big = image_metrics(confusion(big_gt, big_pred)).miou;
  const auto two = dataset_metrics({{"a", gt, gt}, {"b", big_gt, big_pred}});
  EXPECT_DOUBLE_EQ(two.mean.miou, (1.0 + big) / 2.0);
  EXPECT_THROW(dataset_metrics({}), Error);
}

TEST(DatasetMetrics, DuplicationAndReorderingLeaveMeansUnchanged) {
  Rng rng(7);
  std::vector<EvalRow> rows;
  for (int i = 0; i < 25; ++i) {
    rows.push_back({"id" + std::to_string(100 + i), random_mask(rng, 8, 8, 0.3), random_mask(rng, 8, 8, 0.3)});
  }
  const auto base = dataset_metrics(rows);
  auto shuffled = rows;
  rng.shuffle(shuffled);
  const auto moved = dataset_metrics(shuffled);
  EXPECT_EQ(base.mean.miou, moved.mean.miou);
  EXPECT_EQ(base.mean.mfscore, moved.mean.mfscore);
  auto doubled = rows;
  doubled.insert(doubled.end(), rows.begin(), rows.end());
  EXPECT_NEAR(dataset_metrics(doubled).mean.miou, base.mean.miou, 1e-15);
}

TEST(PartitionReport, GroupsByCar) {
  std::vector<ImageReport> images;
  for (int i = 0; i < 10; ++i) {
    ImageReport r;
    r.id = "s" + std::to_string(i);
    r.car = 0.05 * (9 - i);
    r.metrics.miou = 0.1 * i;
    images.push_back(r);
  }
  const auto rows = partition_report(images, 5);
  ASSERT_EQ(rows.size(), 5u);
  for (const auto& r : rows) EXPECT_EQ(r.count, 2u);
  // Lowest CARs are s9 (0.0) and s8 (0.05) with mIoU 0.9 and 0.8.
  EXPECT_DOUBLE_EQ(rows[0].miou, 0.85);
  EXPECT_EQ(rows[0].car_min, 0.0);
  EXPECT_DOUBLE_EQ(rows[0].car_max, 0.05);
  EXPECT_DOUBLE_EQ(rows[4].miou, 0.05);

  const auto single = partition_report(images, 1);
  EXPECT_NEAR(single[0].miou, 0.45, 1e-12);
  EXPECT_THROW(partition_report(images, 11), Error);
  EXPECT_THROW(partition_report(images, 0), ConfigError);
}

TEST(PartitionReport, RemainderGoesToEarliestGroups) {
  std::vector<ImageReport> images(7);
  for (std::size_t i = 0; i < 7; ++i) images[i].id = std::to_string(i);
  const auto rows = partition_report(images, 3);
  EXPECT_EQ(rows[0].count, 3u);
  EXPECT_EQ(rows[1].count, 2u);
  EXPECT_EQ(rows[2].count, 2u);
}

TEST(PartitionReport, KOfOneMatchesDatasetMean) {
  Rng rng(8);
  std::vector<EvalRow> rows;
  for (int i = 0; i < 12; ++i) rows.push_back({std::to_string(i), random_mask(rng, 8, 8, 0.2), random_mask(rng, 8, 8, 0.2)});
  const auto report = dataset_metrics(rows);
  EXPECT_NEAR(partition_report(report.images, 1)[0].miou, report.mean.miou, 1e-12);
}
