#include <gtest/gtest.h>

#include <sstream>

#include "nestseg/ordecode.hpp"
#include "oracles.hpp"

using namespace nestseg;

namespace {

VolumeF row(std::vector<float> a) {
  const auto n = static_cast<std::int64_t>(a.size());
  return VolumeF(Shape{1, 1, n}, 1, std::move(a));
}

// Small cohort of noisy activations around the true integer labels.
struct Cohort {
  std::vector<VolumeF> acts;
  std::vector<LabelVolume> gts;
};

Cohort noisy_cohort(std::uint64_t seed, int cases, double noise) {
  Rng rng(seed);
  Cohort c;
  const Shape s{1, 6, 6};
  for (int k = 0; k < cases; ++k) {
    LabelVolume g(s);
    VolumeF a(s, 1);
    for (std::size_t i = 0; i < g.data().size(); ++i) {
      g.data()[i] = static_cast<std::uint8_t>(rng.below(4));
      const double v = g.data()[i] + rng.normal(0.0, noise);
      a.data()[i] = static_cast<float>(std::clamp(v, 0.01, 2.99));
    }
    c.acts.push_back(std::move(a));
    c.gts.push_back(std::move(g));
  }
  return c;
}

}  // namespace

TEST(ThresholdScheme, Presets) {
  EXPECT_EQ(ThresholdScheme::preset().values(), (std::vector<double>{0.95, 1.65, 2.2}));
  EXPECT_EQ(ThresholdScheme::midpoint(3).values(), (std::vector<double>{0.5, 1.5, 2.5}));
  EXPECT_EQ(ThresholdScheme::midpoint(3).num_classes(), 4);
}

TEST(ThresholdScheme, RejectsInvalid) {
  EXPECT_THROW(ThresholdScheme({1.65, 0.95, 2.2}), ConfigError);
  EXPECT_THROW(ThresholdScheme({0.95, 0.95, 2.2}), ConfigError);
  EXPECT_THROW(ThresholdScheme({0.0, 1.0, 2.0}), ConfigError);
  EXPECT_THROW(ThresholdScheme({0.5, 1.0, 3.0}), ConfigError);
  EXPECT_THROW(ThresholdScheme(std::vector<double>{}), ConfigError);
}

TEST(ThresholdScheme, RejectsEveryNonAscendingPermutation) {
  std::vector<double> t{0.7, 1.4, 2.6};
  std::sort(t.begin(), t.end());
  int accepted = 0;
  do {
    try {
      ThresholdScheme s(t);
      ++accepted;
    } catch (const ConfigError&) {
    }
  } while (std::next_permutation(t.begin(), t.end()));
  EXPECT_EQ(accepted, 1);
}

TEST(ThresholdScheme, TextRoundTrip) {
  const auto s = ThresholdScheme::preset();
  EXPECT_EQ(parse_thresholds(to_string(s)), s);
  EXPECT_THROW(parse_thresholds("0.9,x,2"), ConfigError);
}

TEST(Decode, Examples) {
  const auto s = ThresholdScheme::preset();
  const auto l = decode_labels(row({1.0f, 0.5f, 2.3f, 0.95f, 1.65f, 2.2f, 2.19f}), s);
  EXPECT_EQ(l.data()[0], 1);
  EXPECT_EQ(l.data()[1], 0);
  EXPECT_EQ(l.data()[2], 3);
  EXPECT_EQ(l.data()[3], 1);  // boundary goes upward
  EXPECT_EQ(l.data()[4], 2);
  EXPECT_EQ(l.data()[5], 3);
  EXPECT_EQ(l.data()[6], 2);
  EXPECT_EQ(s.decode(0.95), 1);
  EXPECT_EQ(s.decode(0.9499999), 0);
}

TEST(Decode, ChecksChannelsAndClassCount) {
  EXPECT_THROW(decode_labels(VolumeF(Shape{1, 2, 2}, 2), ThresholdScheme::midpoint(3)), ShapeError);
  EXPECT_THROW(decode_labels(row({1.0f}), ThresholdScheme::midpoint(3), 5), ConfigError);
  EXPECT_NO_THROW(decode_labels(row({1.0f}), ThresholdScheme::midpoint(3), 4));
}

TEST(Decode, MidpointReproducesIntegerLabels) {
  for (int m = 1; m <= 6; ++m) {
    std::vector<float> a;
    for (int c = 0; c <= m; ++c) a.push_back(static_cast<float>(c));
    const auto l = decode_labels(row(a), ThresholdScheme::midpoint(m));
    for (int c = 0; c <= m; ++c) EXPECT_EQ(l.data()[c], c);
  }
}

TEST(Decode, NestedByConstruction) {
  Rng rng(41);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<double> t;
    for (int i = 0; i < 3; ++i) t.push_back(rng.uniform(0.01, 2.99));
    std::sort(t.begin(), t.end());
    if (t[0] == t[1] || t[1] == t[2]) continue;
    VolumeF a(Shape{2, 5, 5}, 1);
    for (auto& v : a.data()) v = static_cast<float>(rng.uniform(0.0, 3.0));
    const auto masks = nested_regions(decode_labels(a, ThresholdScheme(t)), 3);
    EXPECT_EQ(nesting_violations(masks), 0);
    for (std::size_t i = 0; i < masks[0].bits.size(); ++i) {
      EXPECT_GE(masks[0].bits[i], masks[1].bits[i]);
      EXPECT_GE(masks[1].bits[i], masks[2].bits[i]);
    }
  }
}

TEST(Decode, MonotoneInActivation) {
  Rng rng(2);
  const auto s = ThresholdScheme::preset();
  for (int i = 0; i < 5000; ++i) {
    const double a = rng.uniform(0, 3), b = a + rng.uniform(0, 1);
    EXPECT_LE(s.decode(a), s.decode(b));
  }
}

TEST(RegionDice, PerfectAndEmpty) {
  const LabelVolume g(Shape{1, 1, 4}, std::vector<std::uint8_t>{0, 1, 2, 3});
  for (double d : region_dice(g, g, 3)) EXPECT_EQ(d, 1.0);
  const LabelVolume zeros(Shape{1, 1, 4});
  // both empty counts as perfect agreement
  for (double d : region_dice(zeros, zeros, 3)) EXPECT_EQ(d, 1.0);
  // pred {1,1,1,1} vs gt {0,1,2,3}: region 1 is 3 of 4 predicted, 3 true
  const LabelVolume ones(Shape{1, 1, 4}, 1);
  const auto d = region_dice(ones, g, 3);
  EXPECT_DOUBLE_EQ(d[0], 6.0 / 7.0);
  EXPECT_EQ(d[1], 0.0);
  EXPECT_EQ(d[2], 0.0);
}

TEST(CohortDice, PerfectActivations) {
  Cohort c = noisy_cohort(5, 3, 0.0);
  for (auto& a : c.acts)
    for (auto& v : a.data()) v = std::round(v);
  for (double d : cohort_dice(c.acts, c.gts, ThresholdScheme::midpoint(3))) EXPECT_EQ(d, 1.0);
  for (double d : cohort_dice(c.acts, c.gts, ThresholdScheme::preset())) EXPECT_EQ(d, 1.0);
}

TEST(CohortDice, MatchesSetOracle) {
  Cohort c = noisy_cohort(17, 4, 0.4);
  const auto s = ThresholdScheme::preset();
  const auto d = cohort_dice(c.acts, c.gts, s);
  for (int r = 1; r <= 3; ++r) {
    double sum = 0.0;
    for (std::size_t k = 0; k < c.gts.size(); ++k) {
      const auto p = nested_regions(decode_labels(c.acts[k], s), 3);
      const auto g = nested_regions(c.gts[k], 3);
      sum += oracle::dice_sets(g[r - 1], p[r - 1]);
    }
    EXPECT_NEAR(d[r - 1], sum / 4.0, 1e-15);
  }
}

TEST(GridRange, RowCount) {
  EXPECT_EQ((GridRange{2.0, 2.6, 0.05}.values().size()), 13u);
  EXPECT_EQ((GridRange{0.05, 0.95, 0.05}.values().size()), 19u);
  EXPECT_EQ((GridRange{1.0, 1.0, 0.1}.values().size()), 1u);
  EXPECT_THROW((GridRange{1.0, 0.5, 0.1}.values()), ConfigError);
  EXPECT_THROW((GridRange{0.0, 1.0, 0.0}.values()), ConfigError);
}

TEST(Sweep, RowsAndCsvRoundTrip) {
  Cohort c = noisy_cohort(23, 3, 0.3);
  const auto rows =
      sweep_threshold(c.acts, c.gts, 2, GridRange{2.0, 2.6, 0.05}, ThresholdScheme::preset());
  ASSERT_EQ(rows.size(), 13u);
  for (const auto& r : rows) {
    EXPECT_EQ(r.threshold_index, 2);
    ASSERT_EQ(r.dice.size(), 3u);
    auto t = ThresholdScheme::preset().values();
    t[2] = r.value;
    EXPECT_EQ(r.dice, cohort_dice(c.acts, c.gts, ThresholdScheme(t)));
  }
  std::stringstream ss;
  write_sweep_csv(ss, rows);
  const auto back = read_sweep_csv(ss);
  ASSERT_EQ(back.size(), rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(back[i].value, rows[i].value);
    EXPECT_EQ(back[i].dice, rows[i].dice);
  }
}

TEST(Sweep, RangeMustStayBetweenNeighbours) {
  Cohort c = noisy_cohort(1, 1, 0.3);
  const auto s = ThresholdScheme::preset();
  EXPECT_THROW(sweep_threshold(c.acts, c.gts, 1, GridRange{0.9, 1.5, 0.1}, s), ConfigError);
  EXPECT_THROW(sweep_threshold(c.acts, c.gts, 2, GridRange{2.5, 3.0, 0.1}, s), ConfigError);
  EXPECT_THROW(sweep_threshold(c.acts, c.gts, 3, GridRange{2.5, 2.9, 0.1}, s), ConfigError);
}

TEST(Sweep, RejectsCorruptCsv) {
  std::stringstream bad("threshold_index,value,dice_c1,dice_c2,dice_c3\n0,0.5,0.9\n");
  EXPECT_THROW(read_sweep_csv(bad), DataError);
  std::stringstream wrong_header("index,value\n");
  EXPECT_THROW(read_sweep_csv(wrong_header), DataError);
}

TEST(Optimize, NeverWorseThanStartAndBoundedByExhaustive) {
  const std::vector<GridRange> grid{{0.25, 0.75, 0.25}, {1.25, 1.75, 0.25}, {2.25, 2.75, 0.25}};
  for (std::uint64_t seed = 1; seed <= 8; ++seed) {
    Cohort c = noisy_cohort(seed, 3, 0.45);
    const auto mid = ThresholdScheme::midpoint(3);
    const double start = mean_of(cohort_dice(c.acts, c.gts, mid));
    const auto opt = optimize_thresholds(c.acts, c.gts, grid);
    const auto ex = exhaustive_thresholds(c.acts, c.gts, grid);
    EXPECT_GE(opt.score, start);
    EXPECT_LE(opt.score, ex.score + 1e-15);
    EXPECT_DOUBLE_EQ(opt.score, mean_of(cohort_dice(c.acts, c.gts, opt.scheme)));
    EXPECT_DOUBLE_EQ(ex.score, mean_of(cohort_dice(c.acts, c.gts, ex.scheme)));
  }
}

TEST(Optimize, StartOutsideGridIsKeptWhenBest) {
  // Perfect integer activations: the preset already scores 1 and no grid
  // value can improve on it, so the start survives.
  Cohort c = noisy_cohort(3, 2, 0.0);
  for (auto& a : c.acts)
    for (auto& v : a.data()) v = std::round(v);
  const std::vector<GridRange> grid{{0.1, 0.2, 0.1}, {1.1, 1.2, 0.1}, {2.1, 2.2, 0.1}};
  const auto start = ThresholdScheme::preset();
  const auto r = optimize_thresholds(c.acts, c.gts, grid, start);
  EXPECT_EQ(r.score, 1.0);
  EXPECT_GE(r.score, mean_of(cohort_dice(c.acts, c.gts, start)));
}

TEST(Optimize, SingleVoxel) {
  VolumeF a = row({1.3f});
  LabelVolume g(Shape{1, 1, 1}, 2);
  const std::vector<GridRange> grid{{0.5, 0.5, 0.1}, {1.0, 1.4, 0.1}, {2.5, 2.5, 0.1}};
  const auto r = optimize_thresholds(std::span<const VolumeF>(&a, 1),
                                     std::span<const LabelVolume>(&g, 1), grid);
  EXPECT_EQ(r.score, 1.0);
  EXPECT_EQ(r.scheme.decode(1.3f), 2);
}

TEST(Optimize, GridCountMustMatch) {
  Cohort c = noisy_cohort(1, 1, 0.3);
  const std::vector<GridRange> grid{{0.25, 0.75, 0.25}};
  EXPECT_THROW(optimize_thresholds(c.acts, c.gts, grid, ThresholdScheme::midpoint(3)), ConfigError);
}
