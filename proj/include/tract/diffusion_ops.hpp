#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "tract/error.hpp"
#include "tract/schedules.hpp"

namespace tract {

using Vec = Eigen::VectorXd;
// Batches are stored one sample per column.
using Mat = Eigen::MatrixXd;

// Signal-predicting denoiser evaluated on a single state: (x_t, t) -> x0_hat.
template <class F>
concept Denoiser = requires(const F& f, const Vec& x, int t) {
  { f(x, t) } -> std::convertible_to<Vec>;
};

// Batched form: column b of X is evaluated at timestep ts[b].
template <class F>
concept BatchDenoiser = Denoiser<F> && requires(const F& f, const Mat& X, std::span<const int> ts) {
  { f.batch(X, ts) } -> std::convertible_to<Mat>;
};

inline constexpr double kDegenerateDenominator = 1e-12;

namespace detail {
inline void same_dim(const Vec& a, const Vec& b, const char* op) {
  if (a.size() != b.size()) {
    throw InvalidArgument(std::string(op) + ": dimension mismatch (" + std::to_string(a.size()) + " vs " +
                          std::to_string(b.size()) + ")");
  }
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Noising

// x_t = x0 * sqrt(gamma) + eps * sqrt(1 - gamma)
inline Vec noisify_vp(const Vec& x0, const Vec& eps, double gamma) {
  detail::same_dim(x0, eps, "noisify_vp");
  require(gamma > 0.0 && gamma <= 1.0, "noisify_vp: gamma must lie in (0, 1]");
  return x0 * std::sqrt(gamma) + eps * std::sqrt(1.0 - gamma);
}

// x_t = x0 + sigma * eps
inline Vec noisify_ve(const Vec& x0, const Vec& eps, double sigma) {
  detail::same_dim(x0, eps, "noisify_ve");
  require(sigma >= 0.0, "noisify_ve: sigma must be non-negative");
  return x0 + sigma * eps;
}

// Noise implied by a signal estimate at level gamma.
inline Vec epsilon_from_signal_vp(const Vec& x_t, const Vec& x0_hat, double gamma) {
  detail::same_dim(x_t, x0_hat, "epsilon_from_signal_vp");
  require(gamma > 0.0 && gamma < 1.0, "epsilon_from_signal_vp: gamma must lie in (0, 1)");
  return (x_t - x0_hat * std::sqrt(gamma)) / std::sqrt(1.0 - gamma);
}

// ---------------------------------------------------------------------------
// Step functions given an explicit signal prediction.

inline Vec ddim_vp_from_prediction(const Vec& x_t, const Vec& x0_hat, double gamma_t, double gamma_to) {
  detail::same_dim(x_t, x0_hat, "ddim_step_vp");
  if (!(gamma_t < 1.0)) throw InvalidArgument("ddim_step_vp: source step has gamma = 1 (t = 0)");
  const double den = std::sqrt(1.0 - gamma_t);
  const double carry = std::sqrt(1.0 - gamma_to) / den;
  const double signal = (std::sqrt(gamma_to * (1.0 - gamma_t)) - std::sqrt(gamma_t * (1.0 - gamma_to))) / den;
  return x_t * carry + x0_hat * signal;
}

inline Vec ddim_ve_from_prediction(const Vec& x_t, const Vec& x0_hat, double sigma_t, double sigma_to) {
  detail::same_dim(x_t, x0_hat, "ddim_step_ve");
  if (!(sigma_t > 0.0)) throw InvalidArgument("ddim_step_ve: source step has sigma = 0 (t = 0)");
  const double r = sigma_to / sigma_t;
  return x0_hat * (1.0 - r) + r * x_t;
}

// ---------------------------------------------------------------------------
// Step functions driven by a denoiser.

template <Denoiser F>
Vec ddim_step_vp(const F& f, const Vec& x_t, int t, int t_to, const NoiseSchedule& sched) {
  require(sched.kind() == ScheduleKind::VP, "ddim_step_vp: schedule is not VP");
  if (t < 1) throw InvalidArgument("ddim_step_vp: t must be >= 1");
  return ddim_vp_from_prediction(x_t, f(x_t, t), sched.gamma(t), sched.gamma(t_to));
}

template <Denoiser F>
Vec ddim_step_ve(const F& f, const Vec& x_t, int t, int t_to, const NoiseSchedule& sched) {
  require(sched.kind() == ScheduleKind::VE, "ddim_step_ve: schedule is not VE");
  if (t < 1) throw InvalidArgument("ddim_step_ve: t must be >= 1");
  return ddim_ve_from_prediction(x_t, f(x_t, t), sched.sigma(t), sched.sigma(t_to));
}

// Heun step of the probability-flow ODE dx/dsigma = (x - f(x)) / sigma.
// The corrector is skipped when landing on sigma = 0.
template <Denoiser F>
Vec rk_step(const F& f, const Vec& x_t, int t, int t_to, const NoiseSchedule& sched) {
  require(sched.kind() == ScheduleKind::VE, "rk_step: schedule is not VE");
  if (t < 1 || !(sched.sigma(t) > 0.0)) throw InvalidArgument("rk_step: source step has sigma = 0");
  const double s_t = sched.sigma(t);
  const double s_to = sched.sigma(t_to);
  const Vec pred = f(x_t, t);
  // Euler to sigma = 0 is x - sigma * (x - pred) / sigma, i.e. pred itself.
  if (s_to == 0.0) return pred;
  const Vec d_t = (x_t - pred) / s_t;
  const Vec euler = x_t + (s_to - s_t) * d_t;
  const Vec d_to = (euler - f(euler, t_to)) / s_to;
  return x_t + 0.5 * (s_to - s_t) * (d_t + d_to);
}

enum class StepRule { DDIM, Heun };

// One step per column, from[b] -> to[b]. Heun applies to VE schedules only and
// matches rk_step; DDIM dispatches on the schedule kind.
template <BatchDenoiser F>
Mat step_batch(const F& f, const Mat& X, std::span<const int> from, std::span<const int> to,
               const NoiseSchedule& sched, StepRule rule) {
  require(static_cast<std::size_t>(X.cols()) == from.size() && from.size() == to.size(),
          "step_batch: one (from, to) pair per column required");
  const Mat pred = f.batch(X, from);
  Mat out(X.rows(), X.cols());
  if (sched.kind() == ScheduleKind::VP && rule == StepRule::DDIM) {
    for (Eigen::Index b = 0; b < X.cols(); ++b) {
      const auto i = static_cast<std::size_t>(b);
      out.col(b) = ddim_vp_from_prediction(X.col(b), pred.col(b), sched.gamma(from[i]), sched.gamma(to[i]));
    }
    return out;
  }
  require(sched.kind() == ScheduleKind::VE || rule == StepRule::DDIM, "step_batch: Heun steps need a VE schedule");
  if (rule == StepRule::DDIM) {
    for (Eigen::Index b = 0; b < X.cols(); ++b) {
      const auto i = static_cast<std::size_t>(b);
      out.col(b) = ddim_ve_from_prediction(X.col(b), pred.col(b), sched.sigma(from[i]), sched.sigma(to[i]));
    }
    return out;
  }
  // Heun: Euler predictor for every column, corrector where sigma_to > 0.
  std::vector<Eigen::Index> corr;
  std::vector<int> corr_t;
  Mat euler(X.rows(), X.cols());
  for (Eigen::Index b = 0; b < X.cols(); ++b) {
    const auto i = static_cast<std::size_t>(b);
    const double s_t = sched.sigma(from[i]);
    const double s_to = sched.sigma(to[i]);
    require(s_t > 0.0, "rk step from sigma = 0");
    if (s_to == 0.0) {
      out.col(b) = pred.col(b);
      continue;
    }
    const Vec d_t = (X.col(b) - pred.col(b)) / s_t;
    euler.col(b) = X.col(b) + (s_to - s_t) * d_t;
    corr.push_back(b);
    corr_t.push_back(to[i]);
  }
  if (corr.empty()) return out;
  Mat E(X.rows(), static_cast<Eigen::Index>(corr.size()));
  for (std::size_t j = 0; j < corr.size(); ++j) E.col(static_cast<Eigen::Index>(j)) = euler.col(corr[j]);
  const Mat pred2 = f.batch(E, corr_t);
  for (std::size_t j = 0; j < corr.size(); ++j) {
    const Eigen::Index b = corr[j];
    const auto i = static_cast<std::size_t>(b);
    const double s_t = sched.sigma(from[i]);
    const double s_to = sched.sigma(to[i]);
    const Vec d_t = (X.col(b) - pred.col(b)) / s_t;
    const Vec d_to = (E.col(static_cast<Eigen::Index>(j)) - pred2.col(static_cast<Eigen::Index>(j))) / s_to;
    out.col(b) = X.col(b) + 0.5 * (s_to - s_t) * (d_t + d_to);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Closure targets: the signal a DDIM jump t -> t_i must predict to land on x_ti.

inline Vec tract_target_vp(const Vec& x_t, const Vec& x_ti, double gamma_t, double gamma_ti) {
  detail::same_dim(x_t, x_ti, "tract_target_vp");
  const double a_t = std::sqrt(1.0 - gamma_t);
  const double a_i = std::sqrt(1.0 - gamma_ti);
  const double den = std::sqrt(gamma_ti) * a_t - std::sqrt(gamma_t) * a_i;
  if (!(std::abs(den) >= kDegenerateDenominator)) {
    throw DegenerateTarget("tract_target_vp: |denominator| = " + std::to_string(std::abs(den)) +
                           " for gamma_t=" + std::to_string(gamma_t) + ", gamma_ti=" + std::to_string(gamma_ti));
  }
  return (x_ti * a_t - x_t * a_i) / den;
}

// Two-step binary distillation target, x_{t-2} reached by two teacher steps.
inline Vec btd_target_vp(const Vec& x_t, const Vec& x_tm2, int t, const NoiseSchedule& sched) {
  require(t >= 2, "btd_target_vp: t must be >= 2");
  detail::same_dim(x_t, x_tm2, "btd_target_vp");
  const double g_t = sched.gamma(t);
  const double g_2 = sched.gamma(t - 2);
  const double den = std::sqrt(g_2) * std::sqrt(1.0 - g_t) - std::sqrt(g_t) * std::sqrt(1.0 - g_2);
  if (!(std::abs(den) >= kDegenerateDenominator)) throw DegenerateTarget("btd_target_vp: degenerate denominator");
  return (x_tm2 * std::sqrt(1.0 - g_t) - x_t * std::sqrt(1.0 - g_2)) / den;
}

inline Vec tract_target_ve(const Vec& x_t, const Vec& x_ti, double sigma_t, double sigma_ti) {
  detail::same_dim(x_t, x_ti, "tract_target_ve");
  require(sigma_ti >= 0.0, "tract_target_ve: sigma_ti must be non-negative");
  if (!(sigma_t > sigma_ti)) throw InvalidArgument("tract_target_ve: need sigma_t > sigma_ti");
  return (sigma_t * x_ti - sigma_ti * x_t) / (sigma_t - sigma_ti);
}

// ---------------------------------------------------------------------------
// Losses. Each has a *_weight companion so batched trainers can form the
// gradient 2 * w * (pred - target) without re-deriving the weighting.

inline double loss_vp_weight(double gamma, bool clamped = true) {
  require(gamma > 0.0 && gamma < 1.0, "loss_vp: gamma must lie in (0, 1)");
  const double snr = gamma / (1.0 - gamma);
  return clamped ? std::max(1.0, snr) : snr;
}

inline double loss_vp(const Vec& pred, const Vec& target, double gamma, bool clamped = true) {
  detail::same_dim(pred, target, "loss_vp");
  return loss_vp_weight(gamma, clamped) * (pred - target).squaredNorm();
}

inline constexpr double kSigmaData = 0.5;

// lambda(sigma) = (sigma^2 + sigma_data^2) / (sigma * sigma_data)^2
inline double loss_edm_weight(double sigma, double sigma_data = kSigmaData) {
  require(sigma > 0.0 && sigma_data > 0.0, "loss_edm: sigma and sigma_data must be positive");
  const double sd = sigma * sigma_data;
  return (sigma * sigma + sigma_data * sigma_data) / (sd * sd);
}

inline double loss_edm(const Vec& pred, const Vec& target, double sigma, double sigma_data = kSigmaData) {
  detail::same_dim(pred, target, "loss_edm");
  return loss_edm_weight(sigma, sigma_data) * (pred - target).squaredNorm();
}

}  // namespace tract
