#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <set>

#include "tract/schedules.hpp"

using namespace tract;

TEST(VpSchedule, NoiseFreeStepIsExactlyOne) {
  for (int T : {1, 2, 4, 64, 1024}) EXPECT_EQ(make_vp_schedule(T).gamma(0), 1.0);
}

TEST(VpSchedule, StrictlyDecreasingInsideUnitInterval) {
  for (int T : {1, 3, 64, 1024, 4096}) {
    const auto s = make_vp_schedule(T);
    ASSERT_EQ(s.steps(), T);
    for (int t = 1; t <= T; ++t) {
      EXPECT_GT(s.gamma(t), 0.0);
      EXPECT_LT(s.gamma(t), 1.0);
      EXPECT_LT(s.gamma(t), s.gamma(t - 1)) << "T=" << T << " t=" << t;
    }
  }
}

TEST(VpSchedule, CosineValueAtT4) {
  // mpmath: 1e-5 + (1 - 1e-5) c(2)/c(0), c(u) = cos^2((u/4 + 0.008)/1.008 * pi/2)
  EXPECT_NEAR(make_vp_schedule(4).gamma(2), 0.49384865200473330694, 1e-15);
}

TEST(VpSchedule, RejectsZeroSteps) { EXPECT_THROW(make_vp_schedule(0), InvalidArgument); }

TEST(VeSchedule, Boundaries) {
  for (int T : {2, 3, 18, 40, 256}) {
    const auto s = make_ve_schedule(T, {0.002, 80.0, 7.0});
    EXPECT_EQ(s.sigma(0), 0.0);
    EXPECT_EQ(s.sigma(1), 0.002);
    EXPECT_EQ(s.sigma(T), 80.0);
    for (int t = 0; t < T; ++t) EXPECT_LT(s.sigma(t), s.sigma(t + 1));
  }
}

TEST(VeSchedule, RhoInterpolationAtT3) {
  EXPECT_NEAR(make_ve_schedule(3, {0.002, 80.0, 7.0}).sigma(2), 2.5152189761471585788, 1e-14);
}

TEST(VeSchedule, SingleStepLandsOnSigmaMax) {
  const auto s = make_ve_schedule(1, {0.002, 80.0, 7.0});
  EXPECT_EQ(s.sigma(0), 0.0);
  EXPECT_EQ(s.sigma(1), 80.0);
}

TEST(VeSchedule, RejectsBadRange) {
  EXPECT_THROW(make_ve_schedule(4, {80.0, 0.002, 7.0}), InvalidArgument);
  EXPECT_THROW(make_ve_schedule(4, {1.0, 1.0, 7.0}), InvalidArgument);
  EXPECT_THROW(make_ve_schedule(0, {}), InvalidArgument);
}

TEST(NoiseSchedule, ValidatesLevels) {
  EXPECT_THROW(NoiseSchedule(ScheduleKind::VP, {0.9, 0.5}), InvalidArgument);
  EXPECT_THROW(NoiseSchedule(ScheduleKind::VP, {1.0, 0.5, 0.6}), InvalidArgument);
  EXPECT_THROW(NoiseSchedule(ScheduleKind::VE, {0.1, 0.5}), InvalidArgument);
  EXPECT_THROW(NoiseSchedule(ScheduleKind::VE, {0.0, 0.5, 0.5}), InvalidArgument);
  EXPECT_NO_THROW(NoiseSchedule(ScheduleKind::VE, {0.0, 0.5, 0.6}));
}

TEST(NoiseSchedule, CoarsenKeepsEveryStrideLevel) {
  const auto s = make_vp_schedule(64);
  const auto c = s.coarsen(8);
  ASSERT_EQ(c.steps(), 8);
  for (int t = 0; t <= 8; ++t) EXPECT_EQ(c.gamma(t), s.gamma(8 * t));
  EXPECT_THROW(s.coarsen(7), InvalidArgument);
}

TEST(NoiseSchedule, Deterministic) {
  EXPECT_EQ(make_vp_schedule(1024), make_vp_schedule(1024));
  EXPECT_EQ(make_ve_schedule(40), make_ve_schedule(40));
}

TEST(Partition, Starts) {
  EXPECT_EQ(make_partition(8, 4).starts(), (std::vector<int>{0, 4}));
  EXPECT_EQ(make_partition(32, 32).starts(), (std::vector<int>{0}));
  const auto p = make_partition(1024, 32).starts();
  ASSERT_EQ(p.size(), 32u);
  for (std::size_t i = 1; i < p.size(); ++i) EXPECT_EQ(p[i] - p[i - 1], 32);
  EXPECT_EQ(p.back(), 992);
}

TEST(Partition, RejectsNonDivisor) {
  EXPECT_THROW(make_partition(10, 4), InvalidArgument);
  EXPECT_THROW(make_partition(8, 0), InvalidArgument);
}

TEST(Partition, CoverIsExactAndDisjoint) {
  for (auto [T, S] : std::vector<std::pair<int, int>>{{8, 4}, {64, 8}, {64, 1}, {64, 64}, {1024, 32}}) {
    const auto p = make_partition(T, S);
    std::vector<int> hits(static_cast<std::size_t>(T) + 1, 0);
    for (int s : p.starts()) {
      for (int t = s + 1; t <= s + S; ++t) ++hits[static_cast<std::size_t>(t)];
    }
    EXPECT_EQ(hits[0], 0);
    for (int t = 1; t <= T; ++t) {
      EXPECT_EQ(hits[static_cast<std::size_t>(t)], 1);
      EXPECT_EQ(p.group_start(t), ((t - 1) / S) * S);
    }
  }
}

TEST(TimestepDraw, RangeInvariant) {
  const auto p = make_partition(64, 8);
  Rng rng(5, 0);
  for (int i = 0; i < 20000; ++i) {
    const auto d = sample_training_timestep(p, rng);
    EXPECT_EQ(d.s % 8, 0);
    EXPECT_LT(d.s, d.t);
    EXPECT_LE(d.t, d.s + 8);
  }
}

TEST(TimestepDraw, UniformOverStartOffsetPairs) {
  // (T=8, S=4): 8 equally likely (s, p) cells. Pearson chi-square with 7 dof;
  // 24.32 is the 0.999 quantile.
  const auto p = make_partition(8, 4);
  Rng rng(11, 0);
  std::map<std::pair<int, int>, int> counts;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const auto d = sample_training_timestep(p, rng);
    ++counts[{d.s, d.t - d.s}];
  }
  ASSERT_EQ(counts.size(), 8u);
  const double expected = n / 8.0;
  double chi2 = 0.0;
  for (const auto& [cell, c] : counts) {
    chi2 += (c - expected) * (c - expected) / expected;
    EXPECT_LT(std::abs(c - expected), 3.0 * std::sqrt(expected * (1 - 1.0 / 8)));
  }
  EXPECT_LT(chi2, 24.32);
}

TEST(TimestepDraw, ExampleOffsetComposition) {
  const TimestepDraw d{4, 4 + 3};
  EXPECT_EQ(d.t, 7);
}

TEST(TimestepDraw, DeterministicGivenSeed) {
  const auto p = make_partition(1024, 32);
  Rng a(99, 3), b(99, 3);
  for (int i = 0; i < 1000; ++i) {
    const auto x = sample_training_timestep(p, a);
    const auto y = sample_training_timestep(p, b);
    EXPECT_EQ(x.s, y.s);
    EXPECT_EQ(x.t, y.t);
  }
}
