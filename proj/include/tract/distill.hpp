#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tract/data.hpp"
#include "tract/diffusion_ops.hpp"
#include "tract/error.hpp"
#include "tract/eval.hpp"
#include "tract/model.hpp"
#include "tract/optim.hpp"
#include "tract/rng.hpp"
#include "tract/sampler.hpp"
#include "tract/schedules.hpp"

namespace tract {

enum class DistillMode { TractVP, TractVE, BtdVP, ArchKD };

inline std::string_view to_string(DistillMode m) {
  switch (m) {
    case DistillMode::TractVP: return "tract-vp";
    case DistillMode::TractVE: return "tract-ve-edm";
    case DistillMode::BtdVP: return "btd";
    case DistillMode::ArchKD: return "arch-kd";
  }
  return "?";
}

inline DistillMode distill_mode_from_string(std::string_view s) {
  if (s == "tract-vp") return DistillMode::TractVP;
  if (s == "tract-ve-edm") return DistillMode::TractVE;
  if (s == "btd") return DistillMode::BtdVP;
  if (s == "arch-kd") return DistillMode::ArchKD;
  throw InvalidArgument("unknown distillation mode '" + std::string(s) + "'");
}

struct PhaseConfig {
  DistillMode mode = DistillMode::TractVP;
  int teacher_steps = 64;
  int student_steps = 8;
  std::uint64_t sample_budget = 0;
  int batch_size = 256;
  double mu_s = 0.5;
  std::optional<double> mu_i;   // explicit inference momentum
  double eps_heuristic = 1e-4;  // used when mu_i is unset
  AdamHyper adam;
  double clip_norm = 1.0;
  bool clamp_loss_weight = true;
  double sigma_data = kSigmaData;
  std::optional<ArchDescriptor> student_arch;  // ARCH_KD only

  void validate() const {
    require(teacher_steps >= 1 && student_steps >= 1, "phase: step counts must be positive");
    require(batch_size >= 1, "phase: batch size must be positive");
    require(mu_s >= 0.0 && mu_s < 1.0, "phase: mu_s must lie in [0, 1)");
    if (mu_i) require(*mu_i >= 0.0 && *mu_i < 1.0, "phase: mu_i must lie in [0, 1)");
    require(eps_heuristic > 0.0 && eps_heuristic < 1.0, "phase: epsilon heuristic must lie in (0, 1)");
    require(clip_norm > 0.0, "phase: clip norm must be positive");
    switch (mode) {
      case DistillMode::TractVP:
      case DistillMode::TractVE:
        require(student_steps < teacher_steps && teacher_steps % student_steps == 0,
                "phase: student steps must divide and be fewer than teacher steps (" +
                    std::to_string(teacher_steps) + " -> " + std::to_string(student_steps) + ")");
        break;
      case DistillMode::BtdVP:
        require(teacher_steps % 2 == 0 && student_steps * 2 == teacher_steps, "phase: BTD halves the step count");
        break;
      case DistillMode::ArchKD:
        require(student_steps == teacher_steps, "phase: architecture distillation keeps the step count");
        break;
    }
  }

  int group_size() const { return teacher_steps / student_steps; }

  std::uint64_t optimizer_steps() const {
    return (sample_budget + static_cast<std::uint64_t>(batch_size) - 1) / static_cast<std::uint64_t>(batch_size);
  }

  // Explicit mu_i, else eps_heuristic^(1 / optimizer steps).
  double inference_momentum() const {
    if (mu_i) return *mu_i;
    const std::uint64_t n = optimizer_steps();
    return n == 0 ? 0.0 : momentum_from_epsilon(n, eps_heuristic);
  }

  ScheduleKind schedule_kind() const { return mode == DistillMode::TractVE ? ScheduleKind::VE : ScheduleKind::VP; }
};

// Raw student, both EMAs and the optimizer: everything a checkpoint holds.
struct TrainingState {
  DenoiserModel student;
  EmaState self_teacher;
  EmaState inference;
  AdamState adam;
  std::uint64_t step = 0;

  DenoiserModel inference_model() const { return {student.arch, inference.shadow}; }
};

inline TrainingState start_training(const DenoiserModel& init, double mu_s, double mu_i, const AdamHyper& adam) {
  init.validate();
  return TrainingState{init, EmaState(init.params, mu_s), EmaState(init.params, mu_i),
                       AdamState(init.params.size(), adam), 0};
}

struct LogRecord {
  int phase = 0;
  std::uint64_t step = 0;
  double loss = 0.0;
  std::optional<double> closure_gap;
  double wall_seconds = 0.0;
};

struct PhaseHooks {
  std::uint64_t log_every = 0;  // 0 disables logging
  std::function<void(const LogRecord&)> on_log;
  const ProbeSet* probes = nullptr;  // closure gap of the inference student at each log
  int phase_index = 0;
  std::function<void(const TrainingState&)> on_step;  // after every optimizer update
};

struct PhaseResult {
  TrainingState state;
  std::vector<double> losses;  // one per optimizer step

  DenoiserModel student() const { return state.inference_model(); }
};

// Mean weighted squared error over a batch and its gradient w.r.t. the
// student parameters. Targets enter as constants: nothing upstream of them
// receives gradient.
struct StudentLoss {
  double loss = 0.0;
  std::vector<double> grad;
};

inline StudentLoss student_loss(const ArchDescriptor& arch, std::span<const double> params, const NoiseSchedule& sched,
                                const Mat& x_t, std::span<const int> ts, const Mat& targets,
                                std::span<const double> weights) {
  const auto n = static_cast<double>(x_t.cols());
  ForwardCache cache;
  const Mat pred = forward_batch(arch, params, x_t, ts, sched, &cache);
  const Mat diff = pred - targets;
  Mat g(diff.rows(), diff.cols());
  StudentLoss out;
  for (Eigen::Index b = 0; b < diff.cols(); ++b) {
    const double w = weights[static_cast<std::size_t>(b)];
    out.loss += w * diff.col(b).squaredNorm() / n;
    g.col(b) = (2.0 * w / n) * diff.col(b);
  }
  out.grad = backward_batch(arch, params, cache, g);
  return out;
}

namespace detail {

inline Mat gather(const Mat& X, std::span<const Eigen::Index> cols) {
  Mat out(X.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j) out.col(static_cast<Eigen::Index>(j)) = X.col(cols[j]);
  return out;
}

struct Batch {
  Mat x_t;
  std::vector<int> t;
  std::vector<int> s;  // jump destination (group start)
  Mat x0;              // clean data
};

inline Batch noisy_batch(const Dataset& data, const NoiseSchedule& sched, const GroupPartition& part, int n,
                         bool group_end_only, Rng& rng) {
  Batch b;
  b.x0 = data.draw(n, rng);
  b.x_t.resize(data.dim(), n);
  for (int i = 0; i < n; ++i) {
    Vec eps(data.dim());
    for (int k = 0; k < data.dim(); ++k) eps(k) = rng.normal();
    TimestepDraw d = sample_training_timestep(part, rng);
    if (group_end_only) d.t = d.s + part.group_size();
    b.s.push_back(d.s);
    b.t.push_back(d.t);
    b.x_t.col(i) = sched.kind() == ScheduleKind::VP ? noisify_vp(b.x0.col(i), eps, sched.gamma(d.t))
                                                    : noisify_ve(b.x0.col(i), eps, sched.sigma(d.t));
  }
  return b;
}

inline std::vector<double> loss_weights(const NoiseSchedule& sched, std::span<const int> ts, const PhaseConfig& cfg) {
  std::vector<double> w;
  w.reserve(ts.size());
  for (int t : ts) {
    w.push_back(sched.kind() == ScheduleKind::VP ? loss_vp_weight(sched.gamma(t), cfg.clamp_loss_weight)
                                                 : loss_edm_weight(sched.sigma(t), cfg.sigma_data));
  }
  return w;
}

// Distillation targets for one batch, one column per sample.
template <BatchDenoiser Teacher>
Mat distill_targets(const Teacher& teacher, const ModelDenoiser& self_teacher, const NoiseSchedule& sched,
                    const PhaseConfig& cfg, const Batch& b) {
  const Eigen::Index n = b.x_t.cols();
  std::vector<int> prev(b.t.size());
  for (std::size_t i = 0; i < b.t.size(); ++i) prev[i] = b.t[i] - 1;

  if (cfg.mode == DistillMode::ArchKD) return teacher.batch(b.x_t, b.t);

  const StepRule teacher_rule = cfg.mode == DistillMode::TractVE ? StepRule::Heun : StepRule::DDIM;
  const Mat x_prev = step_batch(teacher, b.x_t, b.t, prev, sched, teacher_rule);

  Mat x_s = x_prev;
  if (cfg.mode == DistillMode::BtdVP) {
    std::vector<int> prev2(prev.size());
    for (std::size_t i = 0; i < prev.size(); ++i) prev2[i] = prev[i] - 1;
    x_s = step_batch(teacher, x_prev, prev, prev2, sched, StepRule::DDIM);
  } else {
    // Self-teacher jump t-1 -> s, skipped when the teacher step already landed on s.
    std::vector<Eigen::Index> cols;
    std::vector<int> from, to;
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto k = static_cast<std::size_t>(i);
      if (b.s[k] == b.t[k] - 1) continue;
      cols.push_back(i);
      from.push_back(prev[k]);
      to.push_back(b.s[k]);
    }
    if (!cols.empty()) {
      const Mat jumped = step_batch(self_teacher, gather(x_prev, cols), from, to, sched, StepRule::DDIM);
      for (std::size_t j = 0; j < cols.size(); ++j) x_s.col(cols[j]) = jumped.col(static_cast<Eigen::Index>(j));
    }
  }

  Mat targets(b.x_t.rows(), n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    const int t = b.t[k];
    switch (cfg.mode) {
      case DistillMode::TractVP:
        targets.col(i) = tract_target_vp(b.x_t.col(i), x_s.col(i), sched.gamma(t), sched.gamma(b.s[k]));
        break;
      case DistillMode::BtdVP:
        targets.col(i) = btd_target_vp(b.x_t.col(i), x_s.col(i), t, sched);
        break;
      case DistillMode::TractVE:
        // Terminal base case: with t - 1 = 0 the teacher's own prediction is the target.
        targets.col(i) = t - 1 == 0 ? Vec(x_prev.col(i))
                                    : tract_target_ve(b.x_t.col(i), x_s.col(i), sched.sigma(t), sched.sigma(b.s[k]));
        break;
      case DistillMode::ArchKD:
        break;
    }
  }
  return targets;
}

// Shared optimizer plumbing: Adam on clipped gradients, then both EMAs.
inline void apply_update(TrainingState& st, std::vector<double>& grad, double clip_norm) {
  clip_grad_norm(grad, clip_norm);
  adam_step(st.adam, st.student.params, grad);
  ema_update(st.self_teacher, st.student.params);
  ema_update(st.inference, st.student.params);
  ++st.step;
}

template <BatchDenoiser Teacher>
void maybe_log(const PhaseHooks& hooks, const TrainingState& st, const Teacher& teacher, const NoiseSchedule& sched,
               const GroupPartition& part, double loss, std::chrono::steady_clock::time_point t0, bool force) {
  if (!hooks.on_log || hooks.log_every == 0) return;
  if (!force && st.step % hooks.log_every != 0) return;
  LogRecord r;
  r.phase = hooks.phase_index;
  r.step = st.step;
  r.loss = loss;
  if (hooks.probes) {
    const DenoiserModel inf = st.inference_model();
    r.closure_gap = closure_gap(ModelDenoiser(inf, sched), teacher, part, sched, *hooks.probes);
  }
  r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  hooks.on_log(r);
}

}  // namespace detail

// One distillation phase against any batch denoiser. `init` seeds the raw
// student, the self-teacher and the inference EMA; when the teacher is itself
// a network this is the teacher's own parameters.
template <BatchDenoiser Teacher>
PhaseResult run_phase(const Teacher& teacher, const NoiseSchedule& sched, const DenoiserModel& init,
                      const PhaseConfig& cfg, const Dataset& data, Rng& rng, const PhaseHooks& hooks = {}) {
  cfg.validate();
  require(sched.steps() == cfg.teacher_steps, "phase: schedule has T=" + std::to_string(sched.steps()) +
                                                  " but the phase expects T=" + std::to_string(cfg.teacher_steps));
  require(sched.kind() == cfg.schedule_kind(),
          "phase: mode " + std::string(to_string(cfg.mode)) + " needs a " + std::string(to_string(cfg.schedule_kind())) +
              " schedule");
  require(init.arch.input_dim == data.dim(), "phase: model and dataset dimensions differ");

  const GroupPartition part = make_partition(cfg.teacher_steps, cfg.group_size());
  const bool group_end_only = cfg.mode == DistillMode::BtdVP;
  PhaseResult res{start_training(init, cfg.mu_s, cfg.inference_momentum(), cfg.adam), {}};
  TrainingState& st = res.state;
  const auto t0 = std::chrono::steady_clock::now();

  const std::uint64_t n_steps = cfg.optimizer_steps();
  res.losses.reserve(n_steps);
  for (std::uint64_t k = 0; k < n_steps; ++k) {
    const std::uint64_t used = k * static_cast<std::uint64_t>(cfg.batch_size);
    const int n = static_cast<int>(std::min<std::uint64_t>(cfg.batch_size, cfg.sample_budget - used));
    const detail::Batch b = detail::noisy_batch(data, sched, part, n, group_end_only, rng);
    const ModelDenoiser self_teacher(st.student.arch, st.self_teacher.shadow, sched);
    const Mat targets = detail::distill_targets(teacher, self_teacher, sched, cfg, b);
    const auto weights = detail::loss_weights(sched, b.t, cfg);
    StudentLoss l = student_loss(st.student.arch, st.student.params, sched, b.x_t, b.t, targets, weights);
    if (!std::isfinite(l.loss)) throw TrainingDiverged(st.step, "non-finite loss");
    detail::apply_update(st, l.grad, cfg.clip_norm);
    res.losses.push_back(l.loss);
    if (hooks.on_step) hooks.on_step(st);
    detail::maybe_log(hooks, st, teacher, sched, part, l.loss, t0, k + 1 == n_steps);
  }
  return res;
}

// Algorithm-level entry points. A network teacher seeds its student.

template <BatchDenoiser Teacher>
PhaseResult train_tract_phase_vp(const Teacher& teacher, const NoiseSchedule& sched, const DenoiserModel& init,
                                 const PhaseConfig& cfg, const Dataset& data, Rng& rng, const PhaseHooks& hooks = {}) {
  require(cfg.mode == DistillMode::TractVP, "train_tract_phase_vp: mode must be tract-vp");
  return run_phase(teacher, sched, init, cfg, data, rng, hooks);
}

inline PhaseResult train_tract_phase_vp(const DenoiserModel& teacher, const NoiseSchedule& sched,
                                        const PhaseConfig& cfg, const Dataset& data, Rng& rng,
                                        const PhaseHooks& hooks = {}) {
  return train_tract_phase_vp(ModelDenoiser(teacher, sched), sched, teacher, cfg, data, rng, hooks);
}

template <BatchDenoiser Teacher>
PhaseResult train_tract_phase_ve(const Teacher& teacher, const NoiseSchedule& sched, const DenoiserModel& init,
                                 const PhaseConfig& cfg, const Dataset& data, Rng& rng, const PhaseHooks& hooks = {}) {
  require(cfg.mode == DistillMode::TractVE, "train_tract_phase_ve: mode must be tract-ve-edm");
  return run_phase(teacher, sched, init, cfg, data, rng, hooks);
}

inline PhaseResult train_tract_phase_ve(const DenoiserModel& teacher, const NoiseSchedule& sched,
                                        const PhaseConfig& cfg, const Dataset& data, Rng& rng,
                                        const PhaseHooks& hooks = {}) {
  return train_tract_phase_ve(ModelDenoiser(teacher, sched), sched, teacher, cfg, data, rng, hooks);
}

template <BatchDenoiser Teacher>
PhaseResult train_btd_phase(const Teacher& teacher, const NoiseSchedule& sched, const DenoiserModel& init,
                            const PhaseConfig& cfg, const Dataset& data, Rng& rng, const PhaseHooks& hooks = {}) {
  require(cfg.mode == DistillMode::BtdVP, "train_btd_phase: mode must be btd");
  return run_phase(teacher, sched, init, cfg, data, rng, hooks);
}

inline PhaseResult train_btd_phase(const DenoiserModel& teacher, const NoiseSchedule& sched, const PhaseConfig& cfg,
                                   const Dataset& data, Rng& rng, const PhaseHooks& hooks = {}) {
  return train_btd_phase(ModelDenoiser(teacher, sched), sched, teacher, cfg, data, rng, hooks);
}

// Student initialization for architecture distillation: a copy of the
// teacher when the architectures match, otherwise a fresh init.
inline DenoiserModel arch_kd_init(const DenoiserModel& teacher, const ArchDescriptor& student_arch, Rng& rng) {
  if (student_arch == teacher.arch) return teacher;
  return init_model(student_arch, rng);
}

inline PhaseResult train_arch_kd_phase(const DenoiserModel& teacher, const ArchDescriptor& student_arch,
                                       const NoiseSchedule& sched, const PhaseConfig& cfg, const Dataset& data,
                                       Rng& rng, const PhaseHooks& hooks = {}) {
  require(cfg.mode == DistillMode::ArchKD, "train_arch_kd_phase: mode must be arch-kd");
  const DenoiserModel init = arch_kd_init(teacher, student_arch, rng);
  return run_phase(ModelDenoiser(teacher, sched), sched, init, cfg, data, rng, hooks);
}

// ---------------------------------------------------------------------------
// Teacher training from data with the standard denoising objective.

struct TeacherConfig {
  std::uint64_t sample_budget = 0;
  int batch_size = 256;
  AdamHyper adam;
  double clip_norm = 1.0;
  std::optional<double> mu_i;
  double eps_heuristic = 1e-4;
  bool clamp_loss_weight = true;
  double sigma_data = kSigmaData;

  std::uint64_t optimizer_steps() const {
    return (sample_budget + static_cast<std::uint64_t>(batch_size) - 1) / static_cast<std::uint64_t>(batch_size);
  }
  double inference_momentum() const {
    if (mu_i) return *mu_i;
    return optimizer_steps() == 0 ? 0.0 : momentum_from_epsilon(optimizer_steps(), eps_heuristic);
  }
};

inline PhaseResult train_teacher(const DenoiserModel& init, const NoiseSchedule& sched, const TeacherConfig& cfg,
                                 const Dataset& data, Rng& rng, const PhaseHooks& hooks = {}) {
  require(cfg.batch_size >= 1, "teacher: batch size must be positive");
  require(init.arch.input_dim == data.dim(), "teacher: model and dataset dimensions differ");
  const GroupPartition part = make_partition(sched.steps(), 1);
  PhaseConfig loss_cfg;
  loss_cfg.clamp_loss_weight = cfg.clamp_loss_weight;
  loss_cfg.sigma_data = cfg.sigma_data;
  PhaseResult res{start_training(init, 0.0, cfg.inference_momentum(), cfg.adam), {}};
  TrainingState& st = res.state;
  const auto t0 = std::chrono::steady_clock::now();
  const std::uint64_t n_steps = cfg.optimizer_steps();
  for (std::uint64_t k = 0; k < n_steps; ++k) {
    const std::uint64_t used = k * static_cast<std::uint64_t>(cfg.batch_size);
    const int n = static_cast<int>(std::min<std::uint64_t>(cfg.batch_size, cfg.sample_budget - used));
    const detail::Batch b = detail::noisy_batch(data, sched, part, n, false, rng);
    const auto weights = detail::loss_weights(sched, b.t, loss_cfg);
    StudentLoss l = student_loss(st.student.arch, st.student.params, sched, b.x_t, b.t, b.x0, weights);
    if (!std::isfinite(l.loss)) throw TrainingDiverged(st.step, "non-finite loss");
    detail::apply_update(st, l.grad, cfg.clip_norm);
    res.losses.push_back(l.loss);
    if (hooks.on_step) hooks.on_step(st);
    if (hooks.on_log && hooks.log_every != 0 && (st.step % hooks.log_every == 0 || k + 1 == n_steps)) {
      hooks.on_log({hooks.phase_index, st.step, l.loss, std::nullopt,
                    std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()});
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Multi-phase plans.

struct DistillPlan {
  std::vector<PhaseConfig> phases;

  void validate() const {
    require(!phases.empty(), "plan: at least one phase is required");
    for (std::size_t k = 0; k < phases.size(); ++k) {
      phases[k].validate();
      if (k > 0) {
        require(phases[k].teacher_steps == phases[k - 1].student_steps,
                "plan: phase " + std::to_string(k + 1) + " teacher steps must equal the previous phase's student steps");
      }
    }
  }
};

// Phases for a strictly decreasing step chain such as {64, 8, 1}; the total
// budget is split by `weights` (equal when empty).
inline DistillPlan make_plan(std::span<const int> steps, DistillMode mode, std::uint64_t total_budget,
                             const PhaseConfig& base, std::span<const double> weights = {}) {
  require(steps.size() >= 2, "plan: need at least two step counts");
  for (std::size_t i = 1; i < steps.size(); ++i) {
    require(steps[i] < steps[i - 1], "plan: step counts must be strictly decreasing");
    require(steps[i] >= 1, "plan: step counts must end at >= 1");
  }
  const std::size_t n_phases = steps.size() - 1;
  require(weights.empty() || weights.size() == n_phases, "plan: one budget weight per phase required");
  double wsum = 0.0;
  for (std::size_t k = 0; k < n_phases; ++k) wsum += weights.empty() ? 1.0 : weights[k];
  require(wsum > 0.0, "plan: budget weights must be positive");
  DistillPlan plan;
  std::uint64_t assigned = 0;
  for (std::size_t k = 0; k < n_phases; ++k) {
    PhaseConfig p = base;
    p.mode = mode;
    p.teacher_steps = steps[k];
    p.student_steps = steps[k + 1];
    const double w = weights.empty() ? 1.0 : weights[k];
    require(w > 0.0, "plan: budget weights must be positive");
    p.sample_budget = k + 1 == n_phases ? total_budget - assigned
                                        : static_cast<std::uint64_t>(std::floor(total_budget * (w / wsum)));
    assigned += p.sample_budget;
    plan.phases.push_back(p);
  }
  plan.validate();
  return plan;
}

struct PlanOptions {
  int eval_probes = 0;    // closure-gap probes per phase (0 disables)
  int eval_samples = 0;   // generated samples for the distribution distance (0 disables)
  int eval_projections = 64;
  std::uint64_t eval_seed = 0x5eed;
  std::uint64_t log_every = 0;
  std::function<void(const LogRecord&)> on_log;
};

struct PhaseRecord {
  int index = 0;
  DistillMode mode = DistillMode::TractVP;
  int teacher_steps = 0;
  int student_steps = 0;
  std::uint64_t optimizer_steps = 0;
  double mu_i = 0.0;
  double final_loss = 0.0;
  std::optional<double> closure_gap_initial;
  std::optional<double> closure_gap_final;
  std::optional<MetricReport> metrics;
};

struct PlanResult {
  std::vector<TrainingState> states;  // one per phase
  std::vector<NoiseSchedule> schedules;
  std::vector<PhaseRecord> records;

  DenoiserModel final_student() const { return states.back().inference_model(); }
  const NoiseSchedule& final_schedule() const { return schedules.back(); }
};

namespace detail {
template <BatchDenoiser Teacher>
PhaseRecord phase_metrics_before(const Teacher& teacher, const DenoiserModel& init, const NoiseSchedule& sched,
                                 const PhaseConfig& cfg, const Dataset& data, const PlanOptions& opt, int index,
                                 std::optional<ProbeSet>& probes) {
  PhaseRecord rec;
  rec.index = index;
  rec.mode = cfg.mode;
  rec.teacher_steps = cfg.teacher_steps;
  rec.student_steps = cfg.student_steps;
  rec.optimizer_steps = cfg.optimizer_steps();
  rec.mu_i = cfg.inference_momentum();
  if (opt.eval_probes > 0) {
    Rng prng(opt.eval_seed, 100 + static_cast<std::uint64_t>(index));
    probes = make_probes(data, sched, opt.eval_probes, prng);
    rec.closure_gap_initial = closure_gap(ModelDenoiser(init, sched), teacher,
                                          make_partition(cfg.teacher_steps, cfg.group_size()), sched, *probes);
  }
  return rec;
}
}  // namespace detail

// Runs the phases in order. Phase k operates on the base schedule coarsened
// to its teacher step count; its inference-EMA student becomes the teacher
// (and the initialization) of phase k + 1.
template <BatchDenoiser Teacher>
PlanResult run_plan(const Teacher& initial_teacher, const NoiseSchedule& base_schedule,
                    const DenoiserModel& initial_student, const DistillPlan& plan, const Dataset& data, Rng& rng,
                    const PlanOptions& opt = {}) {
  plan.validate();
  require(base_schedule.steps() == plan.phases.front().teacher_steps,
          "plan: first phase must start at the teacher's step count T=" + std::to_string(base_schedule.steps()));
  PlanResult out;
  for (std::size_t k = 0; k < plan.phases.size(); ++k) {
    const PhaseConfig& cfg = plan.phases[k];
    const NoiseSchedule sched = base_schedule.coarsen(base_schedule.steps() / cfg.teacher_steps);
    const int index = static_cast<int>(k) + 1;

    auto run_with = [&](const auto& teacher, const DenoiserModel& teacher_init) {
      DenoiserModel init = teacher_init;
      if (cfg.mode == DistillMode::ArchKD && cfg.student_arch) init = arch_kd_init(teacher_init, *cfg.student_arch, rng);
      std::optional<ProbeSet> probes;
      PhaseRecord rec = detail::phase_metrics_before(teacher, init, sched, cfg, data, opt, index, probes);
      PhaseHooks hooks{opt.log_every, opt.on_log, probes ? &*probes : nullptr, index, {}};
      PhaseResult res = run_phase(teacher, sched, init, cfg, data, rng, hooks);
      const DenoiserModel student = res.student();
      rec.final_loss = res.losses.empty() ? 0.0 : res.losses.back();
      if (probes) {
        rec.closure_gap_final = closure_gap(ModelDenoiser(student, sched), teacher,
                                            make_partition(cfg.teacher_steps, cfg.group_size()), sched, *probes);
      }
      if (opt.eval_samples > 0) {
        Rng erng(opt.eval_seed, 200 + static_cast<std::uint64_t>(index));
        const NoiseSchedule student_sched = sched.coarsen(cfg.group_size());
        Mat eps(data.dim(), opt.eval_samples);
        for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = erng.normal();
        const Mat gen = sample_batch(ModelDenoiser(student, student_sched), student_sched,
                                     make_sampler_spec(student_sched, cfg.student_steps), eps);
        const Mat ref = data.draw(opt.eval_samples, erng);
        rec.metrics = compare_samples(gen, ref, opt.eval_projections, opt.eval_seed);
      }
      out.records.push_back(rec);
      out.states.push_back(std::move(res.state));
      out.schedules.push_back(sched.coarsen(cfg.group_size()));
    };

    if (k == 0) {
      run_with(initial_teacher, initial_student);
    } else {
      const DenoiserModel prev = out.states.back().inference_model();
      run_with(ModelDenoiser(prev, sched), prev);
    }
  }
  return out;
}

}  // namespace tract
