// Acceptance checks, one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset. The exit status is nonzero only when a check
// could not run to completion; a FAIL line is a result, not a crash.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "tract/commands.hpp"

using namespace tract;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

Vec random_vec(Rng& rng, int d, double scale) {
  Vec v(d);
  for (int i = 0; i < d; ++i) v(i) = scale * rng.normal();
  return v;
}

Mat normal_mat(int d, int n, Rng& rng) {
  Mat m(d, n);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

double rel_err(const Vec& a, const Vec& b) { return (a - b).norm() / std::max(1.0, b.norm()); }

Gaussian gaussian_task() {
  return Gaussian{(Vec(2) << 0.5, -0.3).finished(), (Mat(2, 2) << 1.0, 0.3, 0.3, 0.5).finished()};
}

// 1-step energy distance of a student on shared noise and reference draws.
double one_step_ed(const DenoiserModel& m, const NoiseSchedule& sched, const Mat& eps, const Mat& ref) {
  const Mat gen = sample_batch(ModelDenoiser(m, sched), sched, make_sampler_spec(sched, sched.steps()), eps);
  return energy_distance(gen, ref);
}

// ---------------------------------------------------------------------------

Outcome target_round_trip() {
  Rng rng(11, 0);
  double worst_vp = 0.0, worst_ve = 0.0;
  int n = 0;
  while (n < 10000) {
    double gt = rng.uniform(), gi = rng.uniform();
    if (gi < gt) std::swap(gi, gt);
    if (gt <= 1e-6 || gi - gt < 1e-3) continue;
    const Vec x = random_vec(rng, 2, 1.0), xr = random_vec(rng, 2, 1.0);
    const Vec xi = ddim_vp_from_prediction(x, xr, gt, gi);
    worst_vp = std::max(worst_vp, rel_err(tract_target_vp(x, xi, gt, gi), xr));
    ++n;
  }
  for (int i = 0; i < 10000; ++i) {
    const double st = 0.002 + 80.0 * rng.uniform();
    const double si = st * rng.uniform() * 0.999;
    const Vec x = random_vec(rng, 2, st), xr = random_vec(rng, 2, 1.0);
    worst_ve = std::max(worst_ve, rel_err(tract_target_ve(x, ddim_ve_from_prediction(x, xr, st, si), st, si), xr));
  }
  return {worst_vp <= 1e-9 && worst_ve <= 1e-9,
          "max relative error vp " + fmt("%.2e", worst_vp) + ", ve " + fmt("%.2e", worst_ve) + " (bound 1e-9)"};
}

Outcome special_cases() {
  ArchDescriptor arch;
  arch.hidden_widths = {32, 32};
  arch.time_embed_dim = 8;
  Rng init(12, 0);
  const DenoiserModel m = init_model(arch, init);
  Rng rng(12, 1);
  const auto vp = make_vp_schedule(64);
  const auto ve = make_ve_schedule(64);
  int exact_fail = 0;
  double worst = 0.0;
  for (const NoiseSchedule* s : {&vp, &ve}) {
    const ModelDenoiser f(m, *s);
    const bool is_vp = s->kind() == ScheduleKind::VP;
    auto step = [&](const Vec& x, int t, int to) {
      return is_vp ? ddim_step_vp(f, x, t, to, *s) : ddim_step_ve(f, x, t, to, *s);
    };
    for (int t = 1; t <= 64; ++t) {
      for (int rep = 0; rep < 8; ++rep) {
        const Vec x = random_vec(rng, 2, is_vp ? 1.0 : s->sigma(t));
        if (step(x, t, t) != x) ++exact_fail;
        const Vec pred = f(x, t);
        if (step(x, t, 0) != pred) ++exact_fail;
        const Vec xi = step(x, t, t - 1);
        const Vec target = is_vp ? tract_target_vp(x, xi, s->gamma(t), s->gamma(t - 1))
                                 : tract_target_ve(x, xi, s->sigma(t), s->sigma(t - 1));
        worst = std::max(worst, rel_err(target, pred));
      }
    }
  }
  return {exact_fail == 0 && worst <= 1e-12, std::to_string(exact_fail) + " inexact identities over t = 1..64 (vp, ve); " +
                                                  "t-1 target error " + fmt("%.2e", worst) + " (bound 1e-12)"};
}

Outcome btd_agreement() {
  const auto s = make_vp_schedule(64);
  Rng rng(13, 0);
  double worst = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const int t = 2 + static_cast<int>(rng.below(63));
    const Vec x = random_vec(rng, 2, 1.0), x2 = random_vec(rng, 2, 1.0);
    const Vec a = btd_target_vp(x, x2, t, s);
    const Vec b = tract_target_vp(x, x2, s.gamma(t), s.gamma(t - 2));
    worst = std::max(worst, (a - b).cwiseAbs().maxCoeff() / std::max(1.0, b.cwiseAbs().maxCoeff()));
  }
  return {worst <= 1e-12, "max relative difference " + fmt("%.2e", worst) + " (bound 1e-12)"};
}

Outcome gradient_check() {
  ArchDescriptor arch;
  arch.hidden_widths = {24, 12};
  arch.time_embed_dim = 4;
  const std::size_t n = param_count(arch);
  const auto vp = make_vp_schedule(64);
  const auto ve = make_ve_schedule(32);
  const double h = 1e-5;
  double worst = 0.0;
  for (std::uint64_t probe = 0; probe < 20; ++probe) {
    Rng rng(1400 + probe, 0);
    DenoiserModel m{arch, std::vector<double>(n)};
    for (double& p : m.params) p = 0.5 * rng.normal();
    const Vec x = random_vec(rng, 2, 2.0), c = random_vec(rng, 2, 1.0);
    const auto& sched = probe % 2 ? ve : vp;
    const int t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.steps())));
    const auto grad = backward(m, x, t, sched, c);
    double scale = 0.0;
    for (double g : grad) scale = std::max(scale, std::abs(g));
    for (std::size_t i = 0; i < n; ++i) {
      const double p = m.params[i];
      m.params[i] = p + h;
      const double up = c.dot(forward(m, x, t, sched));
      m.params[i] = p - h;
      const double dn = c.dot(forward(m, x, t, sched));
      m.params[i] = p;
      // entries far below the largest gradient are held to a floor of 1e-3 of it
      const double err = std::abs((up - dn) / (2 * h) - grad[i]) / std::max(std::abs(grad[i]), 1e-3 * scale);
      worst = std::max(worst, err);
    }
  }
  return {worst <= 1e-4, std::to_string(n) + " parameters x 20 probes, worst relative error " + fmt("%.2e", worst) +
                             " (bound 1e-4)"};
}

Outcome ema_laws() {
  bool ok = true;
  std::ostringstream d;
  // first update copies
  EmaState e({0.0, 0.0}, 0.9);
  const std::vector<double> phi1{1.25, -3.5};
  ema_update(e, phi1);
  ok &= e.shadow == phi1;
  // constant trajectories are fixed points
  bool fixed = true;
  for (double mu : {0.0, 0.5, 0.9, 0.999, 0.99997}) {
    EmaState c({0.3, -7.0}, mu);
    for (int i = 0; i < 1000; ++i) ema_update(c, std::vector<double>{0.3, -7.0});
    fixed &= c.shadow == std::vector<double>{0.3, -7.0};
  }
  ok &= fixed;
  // hand recurrence with mu = 0.9 over 1, 4, -2, 0.5
  EmaState s({0.0}, 0.9);
  for (double v : {1.0, 4.0, -2.0, 0.5}) ema_update(s, std::vector<double>{v});
  const double rec_err = std::abs(s.shadow[0] - 0.7760977028205873800523408);
  ok &= rec_err <= 1e-12;
  // heuristic momentum
  double pow_err = 0.0;
  for (std::uint64_t N : {1ull, 10ull, 1000ull, 375000ull}) {
    for (double eps : {1e-3, 1e-4, 1e-5}) {
      pow_err = std::max(pow_err, std::abs(std::pow(momentum_from_epsilon(N, eps), static_cast<double>(N)) - eps));
    }
  }
  ok &= pow_err <= 1e-12;
  const double mu = momentum_from_epsilon(375000, 1e-4);
  // 0.99997545 is quoted to 8 decimals but the exact value rounds to
  // ...544, so the quoted figure is held to two units of its last digit
  ok &= std::abs(mu - 0.99997543939395802002) <= 1e-12;
  ok &= std::abs(mu - 0.99997545) <= 2e-8 && std::abs(mu - 0.99997) < 1e-5;
  d << "copy " << (e.shadow == phi1 ? "exact" : "inexact") << ", fixed points " << (fixed ? "exact" : "inexact")
    << ", recurrence error " << fmt("%.1e", rec_err) << ", |mu^N - eps| " << fmt("%.1e", pow_err) << ", mu(375000, 1e-4) = "
    << fmt("%.11f", mu) << " (quoted 0.99997545, off by " << fmt("%.1e", std::abs(mu - 0.99997545)) << ")";
  return {ok, d.str()};
}

Outcome rk_order() {
  const Vec mean = (Vec(2) << 0.4, -0.2).finished();
  const Mat cov = (Mat(2, 2) << 0.9, 0.2, 0.2, 0.4).finished();
  const double smin = 0.05, smax = 20.0;
  // K Heun steps from sigma_max to sigma_min on nested grids
  auto traj = [&](int K) {
    const auto s = make_ve_schedule(K + 1, {smin, smax, 7.0});
    const auto f = AnalyticTeacher::gaussian(mean, cov, s);
    Vec x = (Vec(2) << 0.7, -1.1).finished() * smax;
    for (int t = K + 1; t > 1; --t) x = rk_step(f, x, t, t - 1, s);
    return x;
  };
  const Vec ref = traj(10000);
  const double e10 = (traj(10) - ref).norm(), e20 = (traj(20) - ref).norm(), e40 = (traj(40) - ref).norm();
  const double r1 = e10 / e20, r2 = e20 / e40;
  const bool ok = r1 >= 3.3 && r1 <= 4.7 && r2 >= 3.3 && r2 <= 4.7;
  return {ok, "error ratios 10/20 " + fmt("%.3f", r1) + ", 20/40 " + fmt("%.3f", r2) + " (band 3.3..4.7)"};
}

Outcome end_to_end() {
  RunConfig c;
  c.set("budget", "2000000");
  c.set("batch_size", "256");
  c.set("plan", "64,8,1");
  c.set("eval.probes", "1024");
  c.set("eval.samples", "0");
  c.set("seed", "1");
  const DistillOutcome r = run_distill(c, std::nullopt);

  const Dataset data = build_dataset(c);
  const NoiseSchedule sched = build_schedule(c);
  const AnalyticTeacher teacher = AnalyticTeacher::for_dataset(data, sched);
  Rng erng(7007, 0);
  const Mat eps = normal_mat(2, 10000, erng);
  const Mat ref = data.draw(10000, erng);
  const double ed_teacher = energy_distance(sample_batch(teacher, sched, make_sampler_spec(sched, 64), eps), ref);
  const double ed_student = one_step_ed(r.plan.final_student(), r.plan.final_schedule(), eps, ref);

  bool gap_ok = true;
  std::ostringstream d;
  d << "1-step ED " << fmt("%.3e", ed_student) << " vs teacher 64-step " << fmt("%.3e", ed_teacher) << " (ratio "
    << fmt("%.2f", ed_student / ed_teacher) << ", bound 2); closure gap";
  for (const auto& rec : r.plan.records) {
    const double ratio = *rec.closure_gap_initial / *rec.closure_gap_final;
    gap_ok &= ratio >= 5.0;
    d << " phase " << rec.index << " " << fmt("%.3g", *rec.closure_gap_initial) << " -> "
      << fmt("%.3g", *rec.closure_gap_final) << " (" << fmt("%.0f", ratio) << "x)";
  }
  return {gap_ok && ed_student <= 2.0 * ed_teacher, d.str()};
}

Outcome phase_count() {
  const GaussianMixture ring = make_ring_mixture(8, 2.0, 0.2);
  const Dataset data(ring);
  const NoiseSchedule sched = make_vp_schedule(64);
  const AnalyticTeacher teacher = AnalyticTeacher::mixture(ring, sched);
  ArchDescriptor arch;
  arch.hidden_widths = {64, 64, 64};
  arch.time_embed_dim = 32;
  PhaseConfig base;
  base.batch_size = 256;
  const std::uint64_t budget = 1000000;
  const std::vector<std::vector<int>> plans{{64, 1}, {64, 8, 1}, {64, 16, 4, 1}};

  int wins = 0;
  std::ostringstream d;
  d << "1-step ED by plan (1/2/3 phases):";
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng erng(8000 + seed, 0);
    const Mat eps = normal_mat(2, 10000, erng);
    const Mat ref = data.draw(10000, erng);
    std::vector<double> ed;
    for (const auto& steps : plans) {
      Rng init_rng(seed, kStreamInit), rng(seed, kStreamTrain);
      const DistillPlan plan = make_plan(steps, DistillMode::TractVP, budget, base);
      const PlanResult r = run_plan(teacher, sched, init_model(arch, init_rng), plan, data, rng);
      ed.push_back(one_step_ed(r.final_student(), r.final_schedule(), eps, ref));
    }
    if (ed[1] < ed[0] && ed[1] < ed[2]) ++wins;
    d << " seed " << seed << " " << fmt("%.3g", ed[0]) << "/" << fmt("%.3g", ed[1]) << "/" << fmt("%.3g", ed[2]) << ";";
  }
  d << " 2-phase best in " << wins << " of 3";
  return {wins >= 2, d.str()};
}

Outcome ema_heuristic() {
  // Inference EMAs never feed back into training, so every candidate
  // momentum can ride along on a single run per (length, seed).
  const Dataset data(gaussian_task());
  const NoiseSchedule sched = make_vp_schedule(64);
  const AnalyticTeacher teacher = AnalyticTeacher::for_dataset(data, sched);
  ArchDescriptor arch;
  arch.hidden_widths = {64, 64, 64};
  arch.time_embed_dim = 32;
  const std::vector<double> epsilons{1e-3, 1e-4, 1e-5};
  const std::vector<double> fixed{0.99, 0.999, 0.9999};
  const std::vector<std::uint64_t> budgets{250000, 1000000};
  const double tie = 0.05;  // relative

  int best_or_tied = 0, runs = 0, longer_wins = 0;
  std::ostringstream d;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng erng(9000 + seed, 0);
    const Mat eps = normal_mat(2, 10000, erng);
    const Mat ref = data.draw(10000, erng);
    std::vector<double> matched;  // eps = 1e-4 row per budget
    for (std::uint64_t budget : budgets) {
      PhaseConfig cfg;
      cfg.teacher_steps = 64;
      cfg.student_steps = 1;
      cfg.sample_budget = budget;
      cfg.batch_size = 256;
      const std::uint64_t N = cfg.optimizer_steps();
      Rng init_rng(seed, kStreamInit), rng(seed, kStreamTrain);
      const DenoiserModel init = init_model(arch, init_rng);
      std::vector<EmaState> emas;
      for (double e : epsilons) emas.emplace_back(init.params, momentum_from_epsilon(N, e));
      for (double mu : fixed) emas.emplace_back(init.params, mu);
      PhaseHooks hooks;
      hooks.on_step = [&](const TrainingState& st) {
        for (auto& e : emas) ema_update(e, st.student.params);
      };
      const PhaseResult r = run_phase(teacher, sched, init, cfg, data, rng, hooks);
      const NoiseSchedule student_sched = sched.coarsen(64);
      std::vector<double> ed;
      for (const auto& e : emas) ed.push_back(one_step_ed({arch, e.shadow}, student_sched, eps, ref));
      const double best_h = *std::min_element(ed.begin(), ed.begin() + 3);
      const double best_f = *std::min_element(ed.begin() + 3, ed.end());
      ++runs;
      if (best_h <= best_f * (1.0 + tie)) ++best_or_tied;
      matched.push_back(ed[1]);
      d << " s" << seed << "/" << budget << ": heuristic " << fmt("%.3g", best_h) << " fixed " << fmt("%.3g", best_f)
        << ";";
    }
    if (matched[1] < matched[0]) ++longer_wins;
  }
  const bool ok = 2 * best_or_tied >= runs && longer_wins >= 2;
  return {ok, "heuristic best-or-tied in " + std::to_string(best_or_tied) + " of " + std::to_string(runs) +
                  " runs, longer budget better in " + std::to_string(longer_wins) + " of 3 seeds;" + d.str()};
}

Outcome determinism() {
  RunConfig c = RunConfig::parse(
      "schedule.steps = 16\nplan = 16,4,1\narch.hidden = 16,16\narch.time_embed = 8\nbudget = 20000\n"
      "batch_size = 64\neval.probes = 32\neval.samples = 256\n");
  const fs::path root = fs::temp_directory_path() / "tract_acceptance_determinism";
  fs::remove_all(root);
  std::vector<std::string> mismatched;
  auto same = [&](const fs::path& a, const fs::path& b, const std::string& what) {
    if (read_file(a) != read_file(b)) mismatched.push_back(what);
  };
  for (const char* run : {"a", "b"}) {
    cmd_train_teacher(c, root / run / "teacher");
    cmd_distill(c, root / run / "distill");
    cmd_distill(c, root / run / "from-teacher", root / run / "teacher" / "teacher.ckpt");
    cmd_sample(root / run / "distill" / "phase-2.ckpt", std::nullopt, 500, 3, root / run / "distill", {1});
    RunConfig ve = c;
    ve.set("schedule", "ve");
    ve.set("mode", "tract-ve-edm");
    cmd_distill(ve, root / run / "ve");
  }
  same(root / "a/teacher/teacher.ckpt", root / "b/teacher/teacher.ckpt", "train-teacher");
  for (const char* dir : {"distill", "from-teacher", "ve"}) {
    for (const char* ck : {"phase-1.ckpt", "phase-2.ckpt"}) {
      same(root / "a" / dir / ck, root / "b" / dir / ck, std::string(dir) + "/" + ck);
    }
  }
  same(root / "a/distill/samples.npy", root / "b/distill/samples.npy", "sample");
  int round_trip_fail = 0, files = 0;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (entry.path().extension() != ".ckpt") continue;
    ++files;
    const std::string bytes = read_file(entry.path());
    const fs::path copy = entry.path().string() + ".copy";
    save_checkpoint(copy, load_checkpoint(entry.path()));
    if (read_file(copy) != bytes || serialize_checkpoint(deserialize_checkpoint(bytes)) != bytes) ++round_trip_fail;
  }
  fs::remove_all(root);
  std::string d = std::to_string(mismatched.size()) + " re-run mismatches";
  for (const auto& m : mismatched) d += " [" + m + "]";
  d += ", " + std::to_string(round_trip_fail) + " of " + std::to_string(files) + " checkpoints fail save/load/save";
  return {mismatched.empty() && round_trip_fail == 0 && files > 0, d};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"target round trip", target_round_trip},
      {"special-case identities", special_cases},
      {"BTD and TRACT targets agree", btd_agreement},
      {"gradient matches finite differences", gradient_check},
      {"EMA laws and momentum heuristic", ema_laws},
      {"RK second-order convergence", rk_order},
      {"end-to-end 64->8->1 distillation", end_to_end},
      {"two phases beat one and three", phase_count},
      {"EMA heuristic trend", ema_heuristic},
      {"determinism and persistence", determinism},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  int passed = 0, failed = 0, errors = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.contains(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
      ++errors;
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    (o.pass ? passed : failed)++;
    std::cout << "criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << " - " << criteria[i].first << ": "
              << o.detail << " [" << fmt("%.1f", secs) << " s]" << std::endl;
  }
  std::cout << passed << " passed, " << failed << " failed" << std::endl;
  return errors == 0 ? 0 : 1;
}
