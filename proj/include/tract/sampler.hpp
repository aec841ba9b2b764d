#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "tract/diffusion_ops.hpp"
#include "tract/error.hpp"
#include "tract/schedules.hpp"

namespace tract {

// K-step deterministic sampler: boundaries run T = b_0 > b_1 > ... > b_K = 0.
struct SamplerSpec {
  int steps = 1;
  std::vector<int> boundaries;
  ScheduleKind kind = ScheduleKind::VP;

  void validate(const NoiseSchedule& sched) const {
    require(kind == sched.kind(), "sampler: spec and schedule kinds differ");
    require(steps >= 1 && boundaries.size() == static_cast<std::size_t>(steps) + 1,
            "sampler: need K + 1 boundaries");
    require(boundaries.front() == sched.steps() && boundaries.back() == 0, "sampler: boundaries must run from T to 0");
    for (std::size_t i = 1; i < boundaries.size(); ++i) {
      require(boundaries[i] < boundaries[i - 1], "sampler: boundaries must be strictly decreasing");
    }
  }
};

// Group starts of make_partition(T, T/K), visited from T down to 0.
inline SamplerSpec make_sampler_spec(const NoiseSchedule& sched, int K) {
  require(K >= 1 && sched.steps() % K == 0,
          "sampler: K=" + std::to_string(K) + " must divide T=" + std::to_string(sched.steps()));
  const GroupPartition part = make_partition(sched.steps(), sched.steps() / K);
  SamplerSpec spec{K, {sched.steps()}, sched.kind()};
  const auto starts = part.starts();
  for (auto it = starts.rbegin(); it != starts.rend(); ++it) spec.boundaries.push_back(*it);
  return spec;
}

// Starting state at t = T: noisify_vp(0, eps, gamma_T) on VP, sigma_T * eps on VE.
inline Mat initial_state(const NoiseSchedule& sched, const Mat& eps) {
  const int T = sched.steps();
  if (sched.kind() == ScheduleKind::VP) return eps * std::sqrt(1.0 - sched.gamma(T));
  return eps * sched.sigma(T);
}

template <BatchDenoiser F>
Mat sample_batch(const F& model, const NoiseSchedule& sched, const SamplerSpec& spec, const Mat& eps) {
  spec.validate(sched);
  Mat x = initial_state(sched, eps);
  std::vector<int> from(static_cast<std::size_t>(eps.cols())), to(from.size());
  for (std::size_t k = 0; k + 1 < spec.boundaries.size(); ++k) {
    std::fill(from.begin(), from.end(), spec.boundaries[k]);
    std::fill(to.begin(), to.end(), spec.boundaries[k + 1]);
    x = step_batch(model, x, from, to, sched, StepRule::DDIM);
  }
  return x;
}

template <BatchDenoiser F>
Vec sample(const F& model, const NoiseSchedule& sched, const SamplerSpec& spec, const Vec& eps) {
  return sample_batch(model, sched, spec, Mat(eps)).col(0);
}

// Same noise batch pushed through the sampler at each step count.
template <BatchDenoiser F>
std::vector<Mat> fixed_noise_panel(const F& model, const NoiseSchedule& sched, std::span<const int> step_counts,
                                   const Mat& eps) {
  std::vector<Mat> out;
  out.reserve(step_counts.size());
  for (int K : step_counts) out.push_back(sample_batch(model, sched, make_sampler_spec(sched, K), eps));
  return out;
}

}  // namespace tract
