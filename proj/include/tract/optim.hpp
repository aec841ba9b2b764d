#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "tract/error.hpp"

namespace tract {

struct AdamHyper {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  friend bool operator==(const AdamHyper&, const AdamHyper&) = default;
};

struct AdamState {
  AdamHyper hyper;
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;

  AdamState() = default;
  AdamState(std::size_t n, AdamHyper h) : hyper(h), m(n, 0.0), v(n, 0.0) {}
};

// Bias-corrected Adam; updates params and state in place.
inline void adam_step(AdamState& state, std::span<double> params, std::span<const double> grads) {
  require(params.size() == grads.size() && state.m.size() == params.size() && state.v.size() == params.size(),
          "adam_step: parameter, gradient and moment sizes differ");
  const AdamHyper& h = state.hyper;
  ++state.step;
  const double k = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(h.beta1, k);
  const double c2 = 1.0 - std::pow(h.beta2, k);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.m[i] = h.beta1 * state.m[i] + (1.0 - h.beta1) * g;
    state.v[i] = h.beta2 * state.v[i] + (1.0 - h.beta2) * g * g;
    params[i] -= h.lr * (state.m[i] / c1) / (std::sqrt(state.v[i] / c2) + h.eps);
  }
}

inline double l2_norm(std::span<const double> g) {
  double s = 0.0;
  for (double x : g) s += x * x;
  return std::sqrt(s);
}

// Rescales in place so that ||grads|| <= max_norm; returns the norm before clipping.
// A norm within a few ulps of max_norm counts as clipped already, so that a
// second clip is a no-op.
inline double clip_grad_norm(std::span<double> grads, double max_norm) {
  require(max_norm > 0.0, "clip_grad_norm: max_norm must be positive");
  const double norm = l2_norm(grads);
  if (norm > max_norm * (1.0 + 8.0 * std::numeric_limits<double>::epsilon())) {
    const double scale = max_norm / norm;
    for (double& g : grads) g *= scale;
  }
  return norm;
}

// Bias-corrected exponential moving average of a parameter vector:
//   w_i = (1 - mu) / (1 - mu^i),  shadow_i = (1 - w_i) shadow_{i-1} + w_i phi_i
// with shadow_0 = phi_0.
struct EmaState {
  std::vector<double> shadow;
  double mu = 0.5;
  std::uint64_t step = 0;

  EmaState() = default;
  EmaState(std::vector<double> initial, double momentum) : shadow(std::move(initial)), mu(momentum) {
    require(mu >= 0.0 && mu < 1.0, "ema: momentum must lie in [0, 1)");
  }

  // Weight given to the newest parameters at update number i (i >= 1).
  static double weight(double mu, std::uint64_t i) {
    if (!(mu >= 0.0 && mu < 1.0)) throw InvalidArgument("ema: momentum must lie in [0, 1)");
    if (mu == 0.0 || i == 1) return 1.0;
    // 1 - mu^i computed without cancellation for mu close to 1.
    return (1.0 - mu) / -std::expm1(static_cast<double>(i) * std::log(mu));
  }
};

inline void ema_update(EmaState& state, std::span<const double> params) {
  require(params.size() == state.shadow.size(), "ema_update: size mismatch");
  ++state.step;
  const double w = EmaState::weight(state.mu, state.step);
  if (w == 1.0) {
    state.shadow.assign(params.begin(), params.end());
    return;
  }
  // shadow + w (phi - shadow): leaves the shadow bit-identical when phi equals it.
  for (std::size_t i = 0; i < params.size(); ++i) state.shadow[i] += w * (params[i] - state.shadow[i]);
}

// Momentum whose N-th power equals eps_h: the weight left on the initial
// parameters after N plain EMA updates.
inline double momentum_from_epsilon(std::uint64_t n_steps, double eps_h) {
  require(n_steps >= 1, "momentum_from_epsilon: N must be >= 1");
  require(eps_h > 0.0 && eps_h < 1.0, "momentum_from_epsilon: epsilon must lie in (0, 1)");
  return std::exp(std::log(eps_h) / static_cast<double>(n_steps));
}

}  // namespace tract
