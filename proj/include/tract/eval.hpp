#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include "tract/data.hpp"
#include "tract/diffusion_ops.hpp"
#include "tract/error.hpp"
#include "tract/rng.hpp"
#include "tract/schedules.hpp"

namespace tract {

// Exact posterior-mean denoiser E[x0 | x_t] for a constant, Gaussian or
// Gaussian-mixture data law under VP or VE noising on a bound schedule.
//
// Each component covariance is diagonalized once (Sigma = Q diag(l) Q^T), so
// with x_t = a x0 + sqrt(n) eps the per-component posterior mean is
//   mu + Q diag(a l / (a^2 l + n)) Q^T (x_t - a mu)
// and mixture responsibilities use N(x_t; a mu, Q diag(a^2 l + n) Q^T).
class AnalyticTeacher {
 public:
  static AnalyticTeacher constant(Vec c, NoiseSchedule sched) {
    AnalyticTeacher t(std::move(sched));
    t.constant_ = std::move(c);
    t.is_constant_ = true;
    return t;
  }

  static AnalyticTeacher gaussian(const Vec& mean, const Mat& cov, NoiseSchedule sched) {
    GaussianMixture m{{1.0}, {mean}, {cov}};
    return mixture(m, std::move(sched));
  }

  static AnalyticTeacher mixture(const GaussianMixture& m, NoiseSchedule sched) {
    AnalyticTeacher t(std::move(sched));
    require(!m.means.empty() && m.means.size() == m.covs.size() && m.means.size() == m.weights.size(),
            "analytic teacher: malformed mixture");
    for (std::size_t k = 0; k < m.means.size(); ++k) {
      const Mat& cov = m.covs[k];
      require(cov.rows() == m.means[k].size() && cov.cols() == cov.rows(), "analytic teacher: covariance shape");
      require((cov - cov.transpose()).cwiseAbs().maxCoeff() <= 1e-12 * (1.0 + cov.cwiseAbs().maxCoeff()),
              "analytic teacher: covariance must be symmetric");
      Eigen::SelfAdjointEigenSolver<Mat> eig(cov);
      require(eig.info() == Eigen::Success && eig.eigenvalues().minCoeff() > 0.0,
              "analytic teacher: covariance must be positive definite");
      t.components_.push_back({std::log(m.weights[k]), m.means[k], eig.eigenvectors(), eig.eigenvalues()});
    }
    return t;
  }

  // Teacher matching a dataset's law; curved datasets have no closed form.
  static AnalyticTeacher for_dataset(const Dataset& data, NoiseSchedule sched) {
    const auto& k = data.kind();
    if (auto* p = std::get_if<SinglePoint>(&k)) return constant(p->point, std::move(sched));
    if (auto* g = std::get_if<Gaussian>(&k)) return gaussian(g->mean, g->cov, std::move(sched));
    if (auto* m = std::get_if<GaussianMixture>(&k)) return mixture(*m, std::move(sched));
    throw InvalidArgument("analytic teacher: no closed-form denoiser for dataset '" + data.name() + "'");
  }

  const NoiseSchedule& schedule() const { return sched_; }

  Vec operator()(const Vec& x, int t) const {
    if (is_constant_) {
      require(x.size() == constant_.size(), "analytic teacher: dimension mismatch");
      return constant_;
    }
    require(x.size() == components_.front().mean.size(), "analytic teacher: dimension mismatch");
    double a, n;
    noise_level(t, a, n);
    if (components_.size() == 1) return component_mean(components_[0], x, a, n);

    std::vector<double> logp(components_.size());
    for (std::size_t k = 0; k < components_.size(); ++k) {
      const Component& c = components_[k];
      const Eigen::ArrayXd var = a * a * c.eigval.array() + n;
      const Eigen::ArrayXd z = c.eigvec.transpose() * (x - a * c.mean);
      logp[k] = c.log_weight - 0.5 * (var.log().sum() + (z.square() / var).sum());
    }
    const double top = *std::max_element(logp.begin(), logp.end());
    double norm = 0.0;
    Vec out = Vec::Zero(x.size());
    for (std::size_t k = 0; k < components_.size(); ++k) {
      const double r = std::exp(logp[k] - top);
      norm += r;
      out += r * component_mean(components_[k], x, a, n);
    }
    return out / norm;
  }

  Mat batch(const Mat& X, std::span<const int> ts) const {
    require(static_cast<std::size_t>(X.cols()) == ts.size(), "analytic teacher: one timestep per column required");
    Mat out(X.rows(), X.cols());
    for (Eigen::Index b = 0; b < X.cols(); ++b) out.col(b) = (*this)(X.col(b), ts[static_cast<std::size_t>(b)]);
    return out;
  }

 private:
  struct Component {
    double log_weight;
    Vec mean;
    Mat eigvec;
    Vec eigval;
  };

  explicit AnalyticTeacher(NoiseSchedule sched) : sched_(std::move(sched)) {}

  // x_t = a x0 + sqrt(n) eps
  void noise_level(int t, double& a, double& n) const {
    if (sched_.kind() == ScheduleKind::VP) {
      const double g = sched_.gamma(t);
      a = std::sqrt(g);
      n = 1.0 - g;
    } else {
      const double s = sched_.sigma(t);
      a = 1.0;
      n = s * s;
    }
  }

  static Vec component_mean(const Component& c, const Vec& x, double a, double n) {
    const Eigen::ArrayXd gain = a * c.eigval.array() / (a * a * c.eigval.array() + n);
    const Vec z = c.eigvec.transpose() * (x - a * c.mean);
    return c.mean + c.eigvec * (gain * z.array()).matrix();
  }

  NoiseSchedule sched_;
  bool is_constant_ = false;
  Vec constant_;
  std::vector<Component> components_;
};


// Teacher's own sampler chained one step at a time from ts[b] down to
// targets[b]: DDIM steps on VP schedules, Heun steps on VE schedules.
template <BatchDenoiser F>
Mat chained_teacher(const F& teacher, const Mat& X, std::span<const int> ts, std::span<const int> targets,
                    const NoiseSchedule& sched) {
  require(static_cast<std::size_t>(X.cols()) == ts.size() && ts.size() == targets.size(),
          "chained_teacher: one (t, target) pair per column required");
  Mat cur = X;
  std::vector<int> t(ts.begin(), ts.end());
  for (;;) {
    std::vector<Eigen::Index> active;
    for (std::size_t i = 0; i < t.size(); ++i) {
      require(targets[i] <= t[i] && targets[i] >= 0, "chained_teacher: target must not exceed t");
      if (t[i] > targets[i]) active.push_back(static_cast<Eigen::Index>(i));
    }
    if (active.empty()) return cur;
    Mat sub(cur.rows(), static_cast<Eigen::Index>(active.size()));
    std::vector<int> from, to;
    for (std::size_t j = 0; j < active.size(); ++j) {
      sub.col(static_cast<Eigen::Index>(j)) = cur.col(active[j]);
      from.push_back(t[static_cast<std::size_t>(active[j])]);
      to.push_back(from.back() - 1);
    }
    const StepRule rule = sched.kind() == ScheduleKind::VE ? StepRule::Heun : StepRule::DDIM;
    const Mat next = step_batch(teacher, sub, from, to, sched, rule);
    for (std::size_t j = 0; j < active.size(); ++j) {
      cur.col(active[j]) = next.col(static_cast<Eigen::Index>(j));
      --t[static_cast<std::size_t>(active[j])];
    }
  }
}

// Student's single DDIM jump from ts[b] to targets[b].
template <BatchDenoiser F>
Mat ddim_jump(const F& student, const Mat& X, std::span<const int> ts, std::span<const int> targets,
              const NoiseSchedule& sched) {
  return step_batch(student, X, ts, targets, sched, StepRule::DDIM);
}

struct ProbeSet {
  Mat x;
  std::vector<int> t;
};

// Noisy states x_t of fresh data at timesteps uniform over {1..T}.
inline ProbeSet make_probes(const Dataset& data, const NoiseSchedule& sched, int n, Rng& rng) {
  ProbeSet p;
  p.x = data.draw(n, rng);
  for (int b = 0; b < n; ++b) {
    const int t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.steps())));
    p.t.push_back(t);
    Vec eps(data.dim());
    for (int i = 0; i < data.dim(); ++i) eps(i) = rng.normal();
    p.x.col(b) = sched.kind() == ScheduleKind::VP ? noisify_vp(p.x.col(b), eps, sched.gamma(t))
                                                  : noisify_ve(p.x.col(b), eps, sched.sigma(t));
  }
  return p;
}

// Mean distance between the student's one jump to each probe's group start
// and the teacher's step-by-step chain to the same point.
template <BatchDenoiser S, BatchDenoiser F>
double closure_gap(const S& student, const F& teacher, const GroupPartition& part, const NoiseSchedule& sched,
                   const ProbeSet& probes) {
  require(part.steps() == sched.steps(), "closure_gap: partition and schedule disagree on T");
  require(!probes.t.empty(), "closure_gap: empty probe set");
  std::vector<int> starts;
  for (int t : probes.t) starts.push_back(part.group_start(t));
  const Mat jump = ddim_jump(student, probes.x, probes.t, starts, sched);
  const Mat chain = chained_teacher(teacher, probes.x, probes.t, starts, sched);
  return (jump - chain).colwise().norm().mean();
}

// E|A-B| - E|A-A'|/2 - E|B-B'|/2 with all-pairs (V-statistic) averages, so
// identical multisets give exactly zero.
inline double energy_distance(const Mat& a, const Mat& b) {
  require(a.rows() == b.rows(), "energy_distance: dimension mismatch");
  require(a.cols() > 0 && b.cols() > 0, "energy_distance: empty sample");
  const auto mean_pair = [](const Mat& p, const Mat& q) {
    const Eigen::Index d = p.rows();
    double total = 0.0;
    for (Eigen::Index i = 0; i < p.cols(); ++i) {
      const double* pi = p.data() + i * d;
      double row = 0.0;
      for (Eigen::Index j = 0; j < q.cols(); ++j) {
        const double* qj = q.data() + j * d;
        double sq = 0.0;
        for (Eigen::Index k = 0; k < d; ++k) sq += (pi[k] - qj[k]) * (pi[k] - qj[k]);
        row += std::sqrt(sq);
      }
      total += row;
    }
    return total / (static_cast<double>(p.cols()) * static_cast<double>(q.cols()));
  };
  const double cross = mean_pair(a, b);
  const double self_a = mean_pair(a, a);
  const double self_b = mean_pair(b, b);
  return std::max(0.0, cross - 0.5 * self_a - 0.5 * self_b);
}

// Mean over random unit directions of the 1D 2-Wasserstein distance between
// the sorted projections. Both samples must have the same size.
inline double sliced_wasserstein(const Mat& a, const Mat& b, int n_projections, std::uint64_t seed) {
  require(a.rows() == b.rows(), "sliced_wasserstein: dimension mismatch");
  require(a.cols() == b.cols() && a.cols() > 0, "sliced_wasserstein: samples must be non-empty and equally sized");
  require(n_projections >= 1, "sliced_wasserstein: need at least one projection");
  Rng rng(seed, 0x5117ced);
  const Eigen::Index n = a.cols();
  std::vector<double> pa(static_cast<std::size_t>(n)), pb(static_cast<std::size_t>(n));
  double total = 0.0;
  for (int k = 0; k < n_projections; ++k) {
    Vec dir(a.rows());
    double norm = 0.0;
    do {
      for (Eigen::Index i = 0; i < dir.size(); ++i) dir(i) = rng.normal();
      norm = dir.norm();
    } while (norm == 0.0);
    dir /= norm;
    for (Eigen::Index i = 0; i < n; ++i) {
      pa[static_cast<std::size_t>(i)] = dir.dot(a.col(i));
      pb[static_cast<std::size_t>(i)] = dir.dot(b.col(i));
    }
    std::sort(pa.begin(), pa.end());
    std::sort(pb.begin(), pb.end());
    double sq = 0.0;
    for (std::size_t i = 0; i < pa.size(); ++i) sq += (pa[i] - pb[i]) * (pa[i] - pb[i]);
    total += std::sqrt(sq / static_cast<double>(n));
  }
  return total / n_projections;
}

struct MetricReport {
  double energy_distance = 0.0;
  double sliced_wasserstein = 0.0;
  int n_samples = 0;
  int n_projections = 0;
  std::uint64_t seed = 0;
};

inline MetricReport compare_samples(const Mat& generated, const Mat& reference, int n_projections, std::uint64_t seed) {
  MetricReport r;
  r.energy_distance = energy_distance(generated, reference);
  r.sliced_wasserstein = sliced_wasserstein(generated, reference, n_projections, seed);
  r.n_samples = static_cast<int>(generated.cols());
  r.n_projections = n_projections;
  r.seed = seed;
  return r;
}

}  // namespace tract
