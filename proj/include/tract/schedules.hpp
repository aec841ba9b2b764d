#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tract/error.hpp"
#include "tract/rng.hpp"

namespace tract {

enum class ScheduleKind { VP, VE };

inline std::string_view to_string(ScheduleKind k) { return k == ScheduleKind::VP ? "vp" : "ve"; }

inline ScheduleKind schedule_kind_from_string(std::string_view s) {
  if (s == "vp") return ScheduleKind::VP;
  if (s == "ve") return ScheduleKind::VE;
  throw InvalidArgument("unknown schedule kind '" + std::string(s) + "'");
}

// Discrete noise levels indexed 0..T. VP stores signal fractions gamma_t with
// gamma_0 = 1 and strictly decreasing; VE stores standard deviations sigma_t
// with sigma_0 = 0 and strictly increasing.
class NoiseSchedule {
 public:
  NoiseSchedule() = default;
  NoiseSchedule(ScheduleKind kind, std::vector<double> levels) : kind_(kind), levels_(std::move(levels)) {
    validate();
  }

  ScheduleKind kind() const { return kind_; }
  int steps() const { return static_cast<int>(levels_.size()) - 1; }
  const std::vector<double>& levels() const { return levels_; }

  double operator[](int t) const {
    require(t >= 0 && t <= steps(), "timestep " + std::to_string(t) + " outside [0, " + std::to_string(steps()) + "]");
    return levels_[static_cast<std::size_t>(t)];
  }
  double gamma(int t) const {
    require(kind_ == ScheduleKind::VP, "gamma requested from a VE schedule");
    return (*this)[t];
  }
  double sigma(int t) const {
    require(kind_ == ScheduleKind::VE, "sigma requested from a VP schedule");
    return (*this)[t];
  }

  // Every stride-th level: the schedule a T/stride-step student lives on.
  NoiseSchedule coarsen(int stride) const {
    require(stride >= 1 && steps() % stride == 0,
            "stride " + std::to_string(stride) + " does not divide T=" + std::to_string(steps()));
    std::vector<double> out;
    for (int t = 0; t <= steps(); t += stride) out.push_back(levels_[static_cast<std::size_t>(t)]);
    return NoiseSchedule(kind_, std::move(out));
  }

  friend bool operator==(const NoiseSchedule&, const NoiseSchedule&) = default;

 private:
  void validate() const {
    require(levels_.size() >= 2, "a schedule needs T >= 1");
    if (kind_ == ScheduleKind::VP) {
      require(levels_[0] == 1.0, "VP schedule must have gamma_0 = 1");
      for (std::size_t t = 1; t < levels_.size(); ++t) {
        require(levels_[t] > 0.0 && levels_[t] < 1.0, "VP gamma_t must lie in (0, 1) for t >= 1");
        require(levels_[t] < levels_[t - 1], "VP gammas must be strictly decreasing");
      }
    } else {
      require(levels_[0] == 0.0, "VE schedule must have sigma_0 = 0");
      for (std::size_t t = 1; t < levels_.size(); ++t) {
        require(std::isfinite(levels_[t]) && levels_[t] > levels_[t - 1], "VE sigmas must be strictly increasing");
      }
    }
  }

  ScheduleKind kind_ = ScheduleKind::VP;
  std::vector<double> levels_{1.0, 0.5};
};

inline constexpr double kCosineOffset = 0.008;
inline constexpr double kCosineGammaMin = 1e-5;

// Cosine schedule, affinely squeezed into [gamma_min, 1) for t >= 1:
//   gamma_t = gamma_min + (1 - gamma_min) * c(t) / c(0),
//   c(t) = cos^2(((t/T + s) / (1 + s)) * pi/2),  s = 0.008.
inline NoiseSchedule make_vp_schedule(int T) {
  require(T >= 1, "make_vp_schedule: T must be >= 1");
  const auto c = [T](int t) {
    const double v = std::cos((static_cast<double>(t) / T + kCosineOffset) / (1.0 + kCosineOffset) * std::numbers::pi / 2);
    return v * v;
  };
  const double c0 = c(0);
  std::vector<double> g(static_cast<std::size_t>(T) + 1);
  g[0] = 1.0;
  for (int t = 1; t <= T; ++t) g[static_cast<std::size_t>(t)] = kCosineGammaMin + (1.0 - kCosineGammaMin) * c(t) / c0;
  return NoiseSchedule(ScheduleKind::VP, std::move(g));
}

struct VeParams {
  double sigma_min = 0.002;
  double sigma_max = 80.0;
  double rho = 7.0;
};

// rho-power interpolation between sigma_min (t = 1) and sigma_max (t = T).
// With T = 1 the single noisy level is sigma_max.
inline NoiseSchedule make_ve_schedule(int T, VeParams p = {}) {
  require(T >= 1, "make_ve_schedule: T must be >= 1");
  require(p.sigma_min > 0.0 && p.sigma_min < p.sigma_max, "make_ve_schedule: need 0 < sigma_min < sigma_max");
  require(p.rho > 0.0, "make_ve_schedule: rho must be positive");
  std::vector<double> s(static_cast<std::size_t>(T) + 1);
  s[0] = 0.0;
  const double a = std::pow(p.sigma_min, 1.0 / p.rho);
  const double b = std::pow(p.sigma_max, 1.0 / p.rho);
  for (int t = 1; t <= T; ++t) {
    const double frac = T == 1 ? 1.0 : static_cast<double>(t - 1) / (T - 1);
    s[static_cast<std::size_t>(t)] = std::pow(a + frac * (b - a), p.rho);
  }
  if (T > 1) s[1] = p.sigma_min;
  s[static_cast<std::size_t>(T)] = p.sigma_max;
  return NoiseSchedule(ScheduleKind::VE, std::move(s));
}

// T timesteps cut into T/S contiguous groups (s, s + S].
class GroupPartition {
 public:
  GroupPartition(int T, int S) : T_(T), S_(S) {
    require(T >= 1 && S >= 1, "make_partition: T and S must be positive");
    require(T % S == 0, "make_partition: group size " + std::to_string(S) + " does not divide T=" + std::to_string(T));
  }

  int steps() const { return T_; }
  int group_size() const { return S_; }
  int groups() const { return T_ / S_; }

  std::vector<int> starts() const {
    std::vector<int> out;
    for (int s = 0; s < T_; s += S_) out.push_back(s);
    return out;
  }

  // Start of the group containing t, for 1 <= t <= T.
  int group_start(int t) const {
    require(t >= 1 && t <= T_, "group_start: timestep outside [1, T]");
    return ((t - 1) / S_) * S_;
  }

 private:
  int T_;
  int S_;
};

inline GroupPartition make_partition(int T, int S) { return GroupPartition(T, S); }

struct TimestepDraw {
  int s;  // group start
  int t;  // s < t <= s + S
};

// Two-stage draw: group start uniform over the starts, then offset p uniform
// over {1..S}.
inline TimestepDraw sample_training_timestep(const GroupPartition& part, Rng& rng) {
  const int s = static_cast<int>(rng.below(static_cast<std::uint64_t>(part.groups()))) * part.group_size();
  const int p = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(part.group_size())));
  return {s, s + p};
}

}  // namespace tract
