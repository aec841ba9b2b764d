#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tract/eval.hpp"

using namespace tract;

namespace {

Vec v2(double a, double b) { return (Vec(2) << a, b).finished(); }

Mat gaussian_cov() { return (Mat(2, 2) << 1.0, 0.3, 0.3, 0.5).finished(); }

// Student whose DDIM jump to each group start reproduces the chained teacher.
struct ChainedComposite {
  const AnalyticTeacher* teacher;
  const GroupPartition* part;
  const NoiseSchedule* sched;

  Vec operator()(const Vec& x, int t) const {
    const int s = part->group_start(t);
    const int ts[1] = {t};
    const int ss[1] = {s};
    const Vec chain = chained_teacher(*teacher, Mat(x), ts, ss, *sched).col(0);
    return tract_target_vp(x, chain, sched->gamma(t), sched->gamma(s));
  }
  Mat batch(const Mat& X, std::span<const int> ts) const {
    Mat out(X.rows(), X.cols());
    for (Eigen::Index b = 0; b < X.cols(); ++b) out.col(b) = (*this)(X.col(b), ts[static_cast<std::size_t>(b)]);
    return out;
  }
};

Mat gaussian_draws(const Vec& mean, const Mat& cov, int n, Rng& rng) {
  Dataset d(Gaussian{mean, cov});
  return d.draw(n, rng);
}

}  // namespace

TEST(AnalyticTeacher, ConstantReturnsConstant) {
  const auto t = AnalyticTeacher::constant(v2(1.0, -2.0), make_vp_schedule(16));
  EXPECT_EQ(t(v2(100.0, 3.0), 7), v2(1.0, -2.0));
  EXPECT_EQ(t(v2(0.0, 0.0), 16), v2(1.0, -2.0));
}

TEST(AnalyticTeacher, OneDimensionalHandValue) {
  // gamma = 0.25, mu = 0, Sigma = 1, x_t = 1: 0.5 * 1 * (0.25 + 0.75)^-1 * 1
  const NoiseSchedule sched(ScheduleKind::VP, {1.0, 0.25});
  const auto t = AnalyticTeacher::gaussian(Vec::Zero(1), Mat::Identity(1, 1), sched);
  EXPECT_NEAR(t(Vec::Ones(1), 1)(0), 0.5, 1e-15);
}

TEST(AnalyticTeacher, MatchesDirectFormulaVp) {
  const auto sched = make_vp_schedule(64);
  const Vec mu = v2(0.5, -0.3);
  const Mat S = gaussian_cov();
  const auto t = AnalyticTeacher::gaussian(mu, S, sched);
  for (int step : {1, 10, 40, 64}) {
    const double g = sched.gamma(step);
    const Vec x = v2(0.7, 1.1);
    const Vec direct =
        mu + std::sqrt(g) * S * (g * S + (1 - g) * Mat::Identity(2, 2)).inverse() * (x - std::sqrt(g) * mu);
    EXPECT_TRUE(t(x, step).isApprox(direct, 1e-12)) << step;
  }
}

TEST(AnalyticTeacher, MatchesDirectFormulaVe) {
  const auto sched = make_ve_schedule(18);
  const Vec mu = v2(0.5, -0.3);
  const Mat S = gaussian_cov();
  const auto t = AnalyticTeacher::gaussian(mu, S, sched);
  for (int step : {1, 9, 18}) {
    const double s = sched.sigma(step);
    const Vec x = v2(-2.0, 4.0);
    const Vec direct = mu + S * (S + s * s * Mat::Identity(2, 2)).inverse() * (x - mu);
    EXPECT_TRUE(t(x, step).isApprox(direct, 1e-12)) << step;
  }
}

TEST(AnalyticTeacher, CollapsesToObservationAsNoiseVanishes) {
  const NoiseSchedule sched(ScheduleKind::VP, {1.0, 1.0 - 1e-12});
  const auto t = AnalyticTeacher::gaussian(v2(0.5, -0.3), gaussian_cov(), sched);
  const Vec x = v2(1.7, -0.4);
  EXPECT_LT((t(x, 1) - x).norm(), 1e-9);
}

TEST(AnalyticTeacher, MixtureSingleComponentEqualsGaussian) {
  const auto sched = make_vp_schedule(32);
  const auto g = AnalyticTeacher::gaussian(v2(0.5, -0.3), gaussian_cov(), sched);
  GaussianMixture m{{0.5, 0.5}, {v2(0.5, -0.3), v2(0.5, -0.3)}, {gaussian_cov(), gaussian_cov()}};
  const auto mm = AnalyticTeacher::mixture(m, sched);
  for (int t : {1, 16, 32}) EXPECT_TRUE(g(v2(0.2, 0.9), t).isApprox(mm(v2(0.2, 0.9), t), 1e-12));
}

TEST(AnalyticTeacher, PosteriorMeanBeatsPerturbedDenoisers) {
  // The posterior mean minimizes denoising MSE; any perturbation does worse.
  const auto sched = make_vp_schedule(64);
  const Vec mu = v2(0.5, -0.3);
  const auto t = AnalyticTeacher::gaussian(mu, gaussian_cov(), sched);
  Rng rng(4, 0);
  const int n = 10000;
  const Mat x0 = gaussian_draws(mu, gaussian_cov(), n, rng);
  for (int step : {4, 32, 60}) {
    const double g = sched.gamma(step);
    double best = 0.0, shifted = 0.0, shrunk = 0.0;
    for (int i = 0; i < n; ++i) {
      const Vec eps = v2(rng.normal(), rng.normal());
      const Vec xt = noisify_vp(x0.col(i), eps, g);
      const Vec p = t(xt, step);
      best += (p - x0.col(i)).squaredNorm();
      shifted += (p + v2(0.05, 0.0) - x0.col(i)).squaredNorm();
      shrunk += (0.95 * p - x0.col(i)).squaredNorm();
    }
    EXPECT_LT(best, shifted);
    EXPECT_LT(best, shrunk);
  }
}

TEST(AnalyticTeacher, RejectsBadCovariance) {
  const auto sched = make_vp_schedule(8);
  EXPECT_THROW(AnalyticTeacher::gaussian(Vec::Zero(2), (Mat(2, 2) << 1, 2, 2, 1).finished(), sched), InvalidArgument);
  EXPECT_THROW(AnalyticTeacher::gaussian(Vec::Zero(2), (Mat(2, 2) << 1, 0.5, 0, 1).finished(), sched), InvalidArgument);
  EXPECT_THROW(AnalyticTeacher::for_dataset(Dataset(SwissRoll{}), sched), InvalidArgument);
}

TEST(ClosureGap, ChainedCompositeStudentHasZeroGap) {
  const auto sched = make_vp_schedule(64);
  const auto part = make_partition(64, 8);
  const auto teacher = AnalyticTeacher::gaussian(v2(0.5, -0.3), gaussian_cov(), sched);
  const ChainedComposite student{&teacher, &part, &sched};
  Rng rng(2, 0);
  const auto probes = make_probes(Dataset(Gaussian{v2(0.5, -0.3), gaussian_cov()}), sched, 256, rng);
  EXPECT_LT(closure_gap(student, teacher, part, sched, probes), 1e-10);
}

TEST(ClosureGap, ConstantTeacherAndStudentZero) {
  const Vec c = v2(0.25, -1.0);
  for (const auto& sched : {make_vp_schedule(64), make_ve_schedule(64)}) {
    const auto part = make_partition(64, 8);
    const auto f = AnalyticTeacher::constant(c, sched);
    Rng rng(3, 0);
    const auto probes = make_probes(Dataset(SinglePoint{c}), sched, 128, rng);
    // zero up to the rounding of up to eight chained steps
    EXPECT_LT(closure_gap(f, f, part, sched, probes), 1e-13);
  }
}

TEST(ClosureGap, WrongStudentHasPositiveGap) {
  const auto sched = make_vp_schedule(64);
  const auto part = make_partition(64, 8);
  const auto teacher = AnalyticTeacher::gaussian(v2(0.5, -0.3), gaussian_cov(), sched);
  const auto student = AnalyticTeacher::constant(v2(0.0, 0.0), sched);
  Rng rng(2, 0);
  const auto probes = make_probes(Dataset(Gaussian{v2(0.5, -0.3), gaussian_cov()}), sched, 256, rng);
  EXPECT_GT(closure_gap(student, teacher, part, sched, probes), 0.01);
}

TEST(ChainedTeacher, SingleStepIsOneDdimStep) {
  const auto sched = make_vp_schedule(16);
  const auto teacher = AnalyticTeacher::gaussian(v2(0.5, -0.3), gaussian_cov(), sched);
  const Vec x = v2(0.3, 0.8);
  const int ts[1] = {9}, to[1] = {8};
  const Vec chain = chained_teacher(teacher, Mat(x), ts, to, sched).col(0);
  EXPECT_EQ(chain, ddim_vp_from_prediction(x, teacher(x, 9), sched.gamma(9), sched.gamma(8)));
}

TEST(EnergyDistance, IdenticalMultisetsZero) {
  Rng rng(1, 0);
  const Mat a = gaussian_draws(v2(0, 0), Mat::Identity(2, 2), 300, rng);
  EXPECT_LT(energy_distance(a, a), 1e-12);
  // same multiset in another order
  Mat b = a;
  std::vector<Eigen::Index> perm(300);
  std::iota(perm.begin(), perm.end(), 0);
  std::reverse(perm.begin(), perm.end());
  for (Eigen::Index i = 0; i < 300; ++i) b.col(i) = a.col(perm[static_cast<std::size_t>(i)]);
  EXPECT_LT(energy_distance(a, b), 1e-12);
}

TEST(EnergyDistance, PointMassesGiveDistance) {
  EXPECT_NEAR(energy_distance(Mat(v2(0, 0)), Mat(v2(3, 4))), 5.0, 1e-15);
  EXPECT_NEAR(energy_distance(Mat::Constant(1, 1, -1.0), Mat::Constant(1, 1, 1.5)), 2.5, 1e-15);
}

TEST(EnergyDistance, Symmetric) {
  Rng rng(2, 0);
  const Mat a = gaussian_draws(v2(0, 0), Mat::Identity(2, 2), 200, rng);
  const Mat b = gaussian_draws(v2(0.5, 0), gaussian_cov(), 150, rng);
  EXPECT_NEAR(energy_distance(a, b), energy_distance(b, a), 1e-14);
  EXPECT_GT(energy_distance(a, b), 0.0);
}

TEST(EnergyDistance, SameLawBelowPermutationNull) {
  // 2000 draws per side; 199 label permutations give the null distribution.
  Rng rng(7, 0);
  const int n = 2000;
  const Mat a = gaussian_draws(v2(0.5, -0.3), gaussian_cov(), n, rng);
  const Mat b = gaussian_draws(v2(0.5, -0.3), gaussian_cov(), n, rng);
  const double observed = energy_distance(a, b);
  Mat pooled(2, 2 * n);
  pooled << a, b;
  std::vector<Eigen::Index> idx(2 * n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng prng(8, 0);
  std::vector<double> null;
  for (int k = 0; k < 199; ++k) {
    std::shuffle(idx.begin(), idx.end(), prng);
    Mat pa(2, n), pb(2, n);
    for (int i = 0; i < n; ++i) {
      pa.col(i) = pooled.col(idx[static_cast<std::size_t>(i)]);
      pb.col(i) = pooled.col(idx[static_cast<std::size_t>(n + i)]);
    }
    null.push_back(energy_distance(pa, pb));
  }
  std::sort(null.begin(), null.end());
  EXPECT_LT(observed, null[197]);  // 99th percentile of 199
}

TEST(EnergyDistance, DetectsShiftedLaw) {
  Rng rng(9, 0);
  const Mat a = gaussian_draws(v2(0, 0), Mat::Identity(2, 2), 1000, rng);
  const Mat b = gaussian_draws(v2(0, 0), Mat::Identity(2, 2), 1000, rng);
  const Mat c = gaussian_draws(v2(0.5, 0), Mat::Identity(2, 2), 1000, rng);
  EXPECT_GT(energy_distance(a, c), 10.0 * energy_distance(a, b));
}

TEST(SlicedWasserstein, IdenticalZero) {
  Rng rng(1, 0);
  const Mat a = gaussian_draws(v2(0, 0), Mat::Identity(2, 2), 300, rng);
  EXPECT_EQ(sliced_wasserstein(a, a, 32, 5), 0.0);
}

TEST(SlicedWasserstein, OneDimensionalPointSets) {
  EXPECT_NEAR(sliced_wasserstein(Mat::Zero(1, 1), Mat::Constant(1, 1, 3.0), 8, 1), 3.0, 1e-15);
  // in 1D every projection is +-identity, so the value is the sorted-sample W2
  const Mat a = (Mat(1, 3) << 0.0, 2.0, 1.0).finished();
  const Mat b = (Mat(1, 3) << 1.0, 4.0, 2.0).finished();
  EXPECT_NEAR(sliced_wasserstein(a, b, 16, 3), std::sqrt((1.0 + 1.0 + 4.0) / 3.0), 1e-15);
}

TEST(SlicedWasserstein, SymmetricAndSeeded) {
  Rng rng(2, 0);
  const Mat a = gaussian_draws(v2(0, 0), Mat::Identity(2, 2), 200, rng);
  const Mat b = gaussian_draws(v2(0.5, 0), gaussian_cov(), 200, rng);
  EXPECT_NEAR(sliced_wasserstein(a, b, 64, 11), sliced_wasserstein(b, a, 64, 11), 1e-14);
  EXPECT_EQ(sliced_wasserstein(a, b, 64, 11), sliced_wasserstein(a, b, 64, 11));
  EXPECT_THROW(sliced_wasserstein(a, b.leftCols(10), 4, 1), InvalidArgument);
}

TEST(CompareSamples, ReportFields) {
  Rng rng(3, 0);
  const Mat a = gaussian_draws(v2(0, 0), Mat::Identity(2, 2), 100, rng);
  const Mat b = gaussian_draws(v2(0, 0), Mat::Identity(2, 2), 100, rng);
  const auto r = compare_samples(a, b, 16, 42);
  EXPECT_GE(r.energy_distance, 0.0);
  EXPECT_GE(r.sliced_wasserstein, 0.0);
  EXPECT_EQ(r.n_samples, 100);
  EXPECT_EQ(r.n_projections, 16);
  EXPECT_EQ(r.seed, 42u);
}
