#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "test_support.hpp"

using namespace nimbus;
using namespace nimbus::testing;

namespace {

int rank(Label l) { return static_cast<int>(l); }

LabelMask random_mask(Rng& rng, int h, int w, std::uint64_t label_cap = 3) {
  LabelMask m(h, w);
  for (auto& l : m.labels) l = static_cast<Label>(rng.below(label_cap));
  return m;
}

}  // namespace

TEST(Ternarize, ThresholdExamples) {
  const Thresholds th;
  EXPECT_EQ(ternarize(0.2, th), Label::Sky);
  EXPECT_EQ(ternarize(0.45, th), Label::Thin);
  EXPECT_EQ(ternarize(0.9, th), Label::Thick);
}

TEST(Ternarize, BoundariesAreHalfOpen) {
  const Thresholds th;
  EXPECT_EQ(ternarize(0.3, th), Label::Thin);
  EXPECT_EQ(ternarize(0.6, th), Label::Thick);
  EXPECT_EQ(ternarize(std::nextafter(0.3, 0.0), th), Label::Sky);
  EXPECT_EQ(ternarize(std::nextafter(0.6, 0.0), th), Label::Thin);
  EXPECT_EQ(ternarize(0.0, th), Label::Sky);
  EXPECT_EQ(ternarize(1.0, th), Label::Thick);
}

TEST(Ternarize, UniformHalfMaskIsAllThin) {
  const ProbabilityMask m{5, 7, std::vector<float>(35, 0.5f)};
  for (Label l : ternarize(m).labels) EXPECT_EQ(l, Label::Thin);
}

TEST(Ternarize, MonotoneInProbability) {
  Rng rng(1);
  for (int i = 0; i < 100000; ++i) {
    double p = rng.uniform(), q = rng.uniform();
    if (p > q) std::swap(p, q);
    Thresholds th;
    if (i % 2) {
      th.t1 = rng.uniform(0.01, 0.5);
      th.t2 = rng.uniform(th.t1 + 0.01, 0.99);
    }
    ASSERT_LE(rank(ternarize(p, th)), rank(ternarize(q, th))) << p << " " << q;
  }
}

TEST(Ternarize, InvariantUnderIntervalPreservingRescaling) {
  // Piecewise-linear increasing maps that send [0,t1), [t1,t2), [t2,1] onto
  // themselves keep every label.
  Rng rng(2);
  const Thresholds th;
  for (int trial = 0; trial < 200; ++trial) {
    const double a = rng.uniform(0.05, 0.25), b = rng.uniform(0.35, 0.55), c = rng.uniform(0.65, 0.95);
    auto remap = [&](double p) {
      auto seg = [](double x, double x0, double x1, double y0, double y1) {
        return y0 + (x - x0) * (y1 - y0) / (x1 - x0);
      };
      if (p < th.t1) return std::min(seg(p, 0, th.t1, 0, a * th.t1 / 0.25), std::nextafter(th.t1, 0.0));
      if (p < th.t2) return std::min(seg(p, th.t1, th.t2, th.t1, th.t1 + (th.t2 - th.t1) * b / 0.55),
                                     std::nextafter(th.t2, 0.0));
      return std::min(seg(p, th.t2, 1.0, th.t2, th.t2 + (1 - th.t2) * c / 0.95), 1.0);
    };
    ProbabilityMask m{8, 8, std::vector<float>(64)};
    for (auto& v : m.values) v = static_cast<float>(rng.uniform());
    ProbabilityMask r = m;
    for (auto& v : r.values) v = static_cast<float>(remap(v));
    for (std::size_t i = 0; i < 64; ++i)
      ASSERT_EQ(ternarize(m.values[i], th), ternarize(r.values[i], th)) << m.values[i] << " -> " << r.values[i];
  }
}

TEST(Ternarize, DegenerateThresholdsMapOpenIntervalToThin) {
  const Thresholds th{std::numeric_limits<double>::denorm_min(), std::nextafter(1.0, 0.0)};
  Rng rng(3);
  for (int i = 0; i < 10000; ++i) {
    const double p = rng.uniform();
    if (p == 0.0) continue;
    ASSERT_EQ(ternarize(p, th), Label::Thin) << p;
  }
  EXPECT_EQ(ternarize(std::nextafter(1.0, 0.0) * 0.999999, th), Label::Thin);
}

TEST(Ternarize, InvalidThresholdsAreRejected) {
  const ProbabilityMask m{1, 1, {0.5f}};
  EXPECT_THROW(ternarize(m, Thresholds{0.6, 0.3}), ConfigError);
  EXPECT_THROW(ternarize(m, Thresholds{0.0, 0.5}), ConfigError);
  EXPECT_THROW(ternarize(m, Thresholds{0.5, 1.0}), ConfigError);
}

TEST(PerLabelError, PerfectPrediction) {
  Rng rng(4);
  const auto gt = random_mask(rng, 6, 6);
  const auto e = per_label_error({gt}, {gt});
  EXPECT_EQ(e.sky_pct, 0.0);
  EXPECT_EQ(e.thin_pct, 0.0);
  EXPECT_EQ(e.thick_pct, 0.0);
}

TEST(PerLabelError, TwoByTwoExample) {
  LabelMask gt(2, 2), pred(2, 2);
  gt.labels = {Label::Sky, Label::Sky, Label::Thin, Label::Thick};
  pred.labels = {Label::Sky, Label::Thin, Label::Thin, Label::Thick};
  const auto e = per_label_error({pred}, {gt});
  EXPECT_EQ(e.sky_pct, 50.0);
  EXPECT_EQ(e.thin_pct, 0.0);
  EXPECT_EQ(e.thick_pct, 0.0);
}

TEST(PerLabelError, AbsentLabelIsNotZero) {
  LabelMask gt(1, 2), pred(1, 2);
  gt.labels = {Label::Sky, Label::Thin};
  pred.labels = {Label::Thick, Label::Thin};
  const auto e = per_label_error({pred}, {gt});
  EXPECT_EQ(e.sky_pct, 100.0);
  EXPECT_FALSE(e.thick_pct.has_value());
}

TEST(PerLabelError, ShapeOrCountMismatchIsAShapeError) {
  EXPECT_THROW(per_label_error({LabelMask(2, 2)}, {LabelMask(2, 3)}), ShapeError);
  EXPECT_THROW(per_label_error({LabelMask(2, 2)}, {}), ShapeError);
}

TEST(PerLabelError, MatchesCountingOracleOnRandomMasks) {
  Rng rng(5);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t images = 1 + rng.below(4);
    std::vector<LabelMask> pred, gt;
    for (std::size_t k = 0; k < images; ++k) {
      const int h = 1 + static_cast<int>(rng.below(8)), w = 1 + static_cast<int>(rng.below(8));
      // Occasionally restrict the label set so absent labels get exercised.
      const std::uint64_t cap = 1 + rng.below(3);
      gt.push_back(random_mask(rng, h, w, cap));
      pred.push_back(random_mask(rng, h, w));
    }
    long total[3] = {0, 0, 0}, wrong[3] = {0, 0, 0};
    for (std::size_t k = 0; k < images; ++k)
      for (std::size_t i = 0; i < gt[k].size(); ++i) {
        const int g = rank(gt[k].labels[i]);
        total[g] += 1;
        if (pred[k].labels[i] != gt[k].labels[i]) wrong[g] += 1;
      }
    const auto e = per_label_error(pred, gt);
    for (Label l : kAllLabels) {
      const int i = rank(l);
      if (total[i] == 0) {
        ASSERT_FALSE(e[l].has_value());
      } else {
        ASSERT_TRUE(e[l].has_value());
        ASSERT_EQ(*e[l], 100.0 * static_cast<double>(wrong[i]) / static_cast<double>(total[i]));
        ASSERT_GE(*e[l], 0.0);
        ASSERT_LE(*e[l], 100.0);
      }
    }
  }
}

TEST(Aggregate, Examples) {
  LabelErrors a{10.0, 1.0, std::nullopt}, b{20.0, 3.0, std::nullopt};
  const auto m = aggregate({a, b});
  EXPECT_EQ(m.sky_pct, 15.0);
  EXPECT_EQ(m.thin_pct, 2.0);
  EXPECT_FALSE(m.thick_pct.has_value());

  const LabelErrors same{7.3, 4.4, 4.4};
  const auto ten = aggregate(std::vector<LabelErrors>(10, same));
  for (Label l : kAllLabels) EXPECT_NEAR(*ten[l], *same[l], 1e-12);
  EXPECT_THROW(aggregate({}), ConfigError);
}

TEST(Aggregate, SkipsRunsWhereALabelIsAbsent) {
  LabelErrors a{10.0, std::nullopt, 5.0}, b{20.0, 8.0, std::nullopt};
  const auto m = aggregate({a, b});
  EXPECT_EQ(m.thin_pct, 8.0);
  EXPECT_EQ(m.thick_pct, 5.0);
}

TEST(PerImageMean, AveragesPercentagesNotPixels) {
  LabelMask g1(1, 1), p1(1, 1), g2(1, 3), p2(1, 3);
  g1.labels = {Label::Sky};
  p1.labels = {Label::Thin};  // 100% sky error
  g2.labels = {Label::Sky, Label::Sky, Label::Sky};
  p2.labels = {Label::Sky, Label::Sky, Label::Sky};  // 0%
  EXPECT_EQ(per_image_mean_error({p1, p2}, {g1, g2}).sky_pct, 50.0);
  EXPECT_EQ(per_label_error({p1, p2}, {g1, g2}).sky_pct, 25.0);
}
