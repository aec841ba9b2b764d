#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "tract/checkpoint.hpp"
#include "tract/config.hpp"
#include "tract/data.hpp"
#include "tract/distill.hpp"
#include "tract/eval.hpp"
#include "tract/io.hpp"
#include "tract/model.hpp"
#include "tract/rng.hpp"
#include "tract/sampler.hpp"

namespace tract {

namespace fs = std::filesystem;

// Random streams carved from the run seed, one per purpose.
enum RunStream : std::uint64_t { kStreamInit = 1, kStreamTrain = 2, kStreamSample = 3, kStreamEval = 4 };

inline nlohmann::json config_json(const RunConfig& c) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : c.values()) {
    if (config_key_hashed(k)) j[k] = v;
  }
  return j;
}

// ---------------------------------------------------------------------------

inline Checkpoint cmd_train_teacher(const RunConfig& c, const fs::path& out) {
  const Dataset data = build_dataset(c);
  const NoiseSchedule sched = build_schedule(c);
  const ArchDescriptor arch = build_arch(c, data.dim());
  const TeacherConfig tc = build_teacher_config(c);
  const std::uint64_t seed = c.unsigned_integer("seed");
  Rng init_rng(seed, kStreamInit);
  Rng rng(seed, kStreamTrain);

  MetricsLog log(out / "metrics.jsonl");
  PhaseHooks hooks;
  hooks.log_every = c.unsigned_integer("log_every");
  hooks.on_log = [&](const LogRecord& r) { log.write(to_json(r)); };
  PhaseResult res = train_teacher(init_model(arch, init_rng), sched, tc, data, rng, hooks);

  Checkpoint ck{sched, std::move(res.state), c.hash(), {{"role", "teacher"}, {"config", config_json(c)}}};
  save_checkpoint(out / "teacher.ckpt", ck);
  return ck;
}

// ---------------------------------------------------------------------------

struct DistillOutcome {
  PlanResult plan;
  std::vector<Checkpoint> checkpoints;
};

// Analytic teachers start from a fresh student; checkpoint teachers seed the
// student with their own inference weights.
inline DistillOutcome run_distill(const RunConfig& c, const std::optional<fs::path>& teacher_path,
                                  MetricsLog* log = nullptr) {
  const Dataset data = build_dataset(c);
  const DistillPlan plan = build_plan(c, data.dim());
  PlanOptions opt = build_plan_options(c);
  if (log) opt.on_log = [log](const LogRecord& r) { log->write(to_json(r)); };
  const std::uint64_t seed = c.unsigned_integer("seed");
  Rng rng(seed, kStreamTrain);

  std::optional<fs::path> path = teacher_path;
  if (!path && c.get("teacher") != "analytic") path = fs::path(c.get("teacher"));

  DistillOutcome res;
  if (path) {
    const Checkpoint teacher = load_checkpoint(*path);
    require(teacher.arch().input_dim == data.dim(), "distill: teacher and dataset dimensions differ");
    const DenoiserModel model = teacher.inference_model();
    res.plan = run_plan(ModelDenoiser(model, teacher.schedule), teacher.schedule, model, plan, data, rng, opt);
  } else {
    const NoiseSchedule sched = build_schedule(c);
    Rng init_rng(seed, kStreamInit);
    const ArchDescriptor arch = build_arch(c, data.dim());
    const AnalyticTeacher teacher = AnalyticTeacher::for_dataset(data, sched);
    res.plan = run_plan(teacher, sched, init_model(arch, init_rng), plan, data, rng, opt);
  }

  const std::size_t n = res.plan.states.size();
  for (std::size_t k = 0; k < n; ++k) {
    const PhaseRecord& r = res.plan.records[k];
    nlohmann::json meta{{"role", "student"},
                        {"phase", r.index},
                        {"phases", n},
                        {"mode", std::string(to_string(r.mode))},
                        {"teacher_steps", r.teacher_steps},
                        {"student_steps", r.student_steps},
                        {"final", k + 1 == n},
                        {"config", config_json(c)}};
    res.checkpoints.push_back(Checkpoint{res.plan.schedules[k], res.plan.states[k], c.hash(), std::move(meta)});
  }
  return res;
}

inline std::string phase_checkpoint_name(int index) { return "phase-" + std::to_string(index) + ".ckpt"; }

inline DistillOutcome cmd_distill(const RunConfig& c, const fs::path& out,
                                  const std::optional<fs::path>& teacher_path = std::nullopt) {
  MetricsLog log(out / "metrics.jsonl");
  DistillOutcome res = run_distill(c, teacher_path, &log);
  nlohmann::json summary{{"config_hash", c.hash()}, {"phases", nlohmann::json::array()}};
  for (std::size_t k = 0; k < res.checkpoints.size(); ++k) {
    const std::string name = phase_checkpoint_name(static_cast<int>(k) + 1);
    save_checkpoint(out / name, res.checkpoints[k]);
    log.write(to_json(res.plan.records[k]));
    nlohmann::json p = to_json(res.plan.records[k]);
    p["checkpoint"] = name;
    summary["phases"].push_back(p);
  }
  summary["final_checkpoint"] = phase_checkpoint_name(static_cast<int>(res.checkpoints.size()));
  write_file(out / "distill.json", summary.dump(2) + "\n");
  return res;
}

// ---------------------------------------------------------------------------

inline Mat noise_batch(int dim, int n, std::uint64_t seed) {
  require(n >= 1, "sample: n must be positive");
  Rng rng(seed, kStreamSample);
  Mat eps(dim, n);
  for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = rng.normal();
  return eps;
}

// K defaults to the checkpoint's own step count.
inline Mat cmd_sample(const fs::path& checkpoint, std::optional<int> K, int n, std::uint64_t seed, const fs::path& out,
                      const std::vector<int>& panel = {}) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const DenoiserModel model = ck.inference_model();
  const ModelDenoiser f(model, ck.schedule);
  const Mat eps = noise_batch(model.arch.input_dim, n, seed);
  const Mat x = sample_batch(f, ck.schedule, make_sampler_spec(ck.schedule, K.value_or(ck.schedule.steps())), eps);
  write_npy(out / "samples.npy", x);
  if (!panel.empty()) {
    write_npy_stack(out / "panel.npy", fixed_noise_panel(f, ck.schedule, panel, eps));
    write_file(out / "panel.json", nlohmann::json{{"steps", panel}, {"n", n}, {"seed", seed}}.dump() + "\n");
  }
  return x;
}

// ---------------------------------------------------------------------------

// The checkpoint must have been built for the config's schedule (or a
// coarsening of it) and architecture.
inline void check_compatible(const Checkpoint& ck, const RunConfig& c) {
  const NoiseSchedule base = build_schedule(c);
  const int T = ck.schedule.steps();
  if (ck.schedule.kind() != base.kind() || base.steps() % T != 0 || !(base.coarsen(base.steps() / T) == ck.schedule)) {
    throw ConfigMismatch("checkpoint schedule (" + std::string(to_string(ck.schedule.kind())) + ", T=" +
                         std::to_string(T) + ") is not derived from the configured " + c.get("schedule") +
                         " schedule with T=" + c.get("schedule.steps"));
  }
  const int d = ck.arch().input_dim;
  const bool arch_ok = ck.arch() == build_arch(c, d) ||
                       (!c.get("student.hidden").empty() && ck.arch() == build_arch(c, d, "student.hidden"));
  if (!arch_ok) throw ConfigMismatch("checkpoint architecture differs from the configured one");
}

struct EvalOptions {
  std::optional<int> steps;
  int n = 4096;
  int projections = 64;
  std::uint64_t seed = 0;
};

inline MetricReport cmd_eval(const fs::path& checkpoint, const std::optional<RunConfig>& config, const EvalOptions& o,
                             const std::optional<fs::path>& out = std::nullopt) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  RunConfig c;
  if (config) {
    check_compatible(ck, *config);
    c = *config;
  } else {
    for (const auto& [k, v] : ck.meta.at("config").items()) c.set(k, v.get<std::string>());
  }
  const Dataset data = build_dataset(c);
  if (data.dim() != ck.arch().input_dim) throw ConfigMismatch("dataset dimension differs from the checkpoint's");
  const DenoiserModel model = ck.inference_model();
  const Mat gen = sample_batch(ModelDenoiser(model, ck.schedule), ck.schedule,
                               make_sampler_spec(ck.schedule, o.steps.value_or(ck.schedule.steps())),
                               noise_batch(data.dim(), o.n, o.seed));
  Rng ref_rng(o.seed, kStreamEval);
  const MetricReport r = compare_samples(gen, data.draw(o.n, ref_rng), o.projections, o.seed);
  if (out) {
    nlohmann::json j = to_json(r);
    j["checkpoint_config_hash"] = ck.config_hash;
    j["steps"] = o.steps.value_or(ck.schedule.steps());
    write_file(*out / "eval.json", j.dump(2) + "\n");
  }
  return r;
}

// ---------------------------------------------------------------------------

struct SweepRow {
  std::string axis;
  std::string value;
  std::uint64_t budget = 0;
  std::uint64_t seed = 0;
  double energy_distance = 0.0;
  double sliced_wasserstein = 0.0;
  double closure_gap = 0.0;
};

inline std::string sweep_key(const std::string& axis) {
  if (axis == "mu-s") return "mu_s";
  if (axis == "eps-heuristic") return "eps_heuristic";
  if (axis == "mu-i") return "mu_i";
  if (axis == "plan") return "plan";
  throw InvalidArgument("unknown sweep axis '" + axis + "' (expected mu-s, eps-heuristic, mu-i or plan)");
}

// Runs the grid values x budgets x seeds; rows are ordered by budget, then
// by final energy distance.
inline std::vector<SweepRow> cmd_sweep(const RunConfig& base, const std::string& axis,
                                       const std::vector<std::string>& values, const std::vector<std::uint64_t>& seeds,
                                       const std::vector<std::uint64_t>& budgets, const fs::path& out,
                                       const std::optional<fs::path>& teacher_path = std::nullopt, int parallel = 1) {
  const std::string key = sweep_key(axis);
  require(!values.empty() && !seeds.empty(), "sweep: need at least one value and one seed");
  require(parallel >= 1, "sweep: parallel must be >= 1");
  const std::vector<std::uint64_t> lengths = budgets.empty() ? std::vector{base.unsigned_integer("budget")} : budgets;

  struct Job {
    RunConfig cfg;
    SweepRow row;
  };
  std::vector<Job> jobs;
  for (auto b : lengths) {
    for (const auto& v : values) {
      for (auto s : seeds) {
        RunConfig c = base;
        c.set(key, v);
        // A fixed inference momentum and the epsilon heuristic are alternatives.
        if (key == "eps_heuristic") c.set("mu_i", "");
        c.set("seed", std::to_string(s));
        c.set("budget", std::to_string(b));
        jobs.push_back({c, SweepRow{axis, v, b, s}});
      }
    }
  }
  // Validate every grid point before spending compute on any of them.
  for (const auto& j : jobs) build_plan(j.cfg, build_dataset(j.cfg).dim()).validate();

  std::size_t next = 0;
  std::mutex mu;
  std::exception_ptr failure;
  auto worker = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard lock(mu);
        if (next >= jobs.size() || failure) return;
        i = next++;
      }
      try {
        const DistillOutcome r = run_distill(jobs[i].cfg, teacher_path);
        const PhaseRecord& last = r.plan.records.back();
        if (last.metrics) {
          jobs[i].row.energy_distance = last.metrics->energy_distance;
          jobs[i].row.sliced_wasserstein = last.metrics->sliced_wasserstein;
        }
        jobs[i].row.closure_gap = last.closure_gap_final.value_or(0.0);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int t = 1; t < parallel; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);

  std::vector<SweepRow> rows;
  for (const auto& j : jobs) rows.push_back(j.row);
  std::stable_sort(rows.begin(), rows.end(), [](const SweepRow& a, const SweepRow& b) {
    if (a.budget != b.budget) return a.budget < b.budget;
    return a.energy_distance < b.energy_distance;
  });

  std::string table = "axis\tvalue\tbudget\tseed\tenergy_distance\tsliced_wasserstein\tclosure_gap\n";
  for (const auto& r : rows) {
    table += r.axis + "\t" + r.value + "\t" + std::to_string(r.budget) + "\t" + std::to_string(r.seed) + "\t" +
             nlohmann::json(r.energy_distance).dump() + "\t" + nlohmann::json(r.sliced_wasserstein).dump() + "\t" +
             nlohmann::json(r.closure_gap).dump() + "\n";
  }
  write_file(out / "sweep.tsv", table);
  return rows;
}

}  // namespace tract
