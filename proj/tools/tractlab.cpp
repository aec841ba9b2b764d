// tractlab: train toy diffusion teachers, distill them, sample and evaluate.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "tract/commands.hpp"

namespace {

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::string> plan, mode, mu_s, eps_heuristic, mu_i, budget, batch_size;
  std::optional<std::string> teacher;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "flat key = value config file");
  app->add_option("--set", c.sets, "override a config key (key=value), repeatable");
  app->add_option("--seed", c.seed, "run seed");
  app->add_option("--out", c.out, "output directory");
  app->add_option("--plan", c.plan, "strictly decreasing step counts, e.g. 64,8,1");
  app->add_option("--mode", c.mode, "tract-vp | tract-ve-edm | btd | arch-kd");
  app->add_option("--mu-s", c.mu_s, "self-teacher EMA momentum");
  app->add_option("--eps-heuristic", c.eps_heuristic, "inference EMA epsilon (mu_i^N = eps)");
  app->add_option("--mu-i", c.mu_i, "fixed inference EMA momentum");
  app->add_option("--budget", c.budget, "training samples");
  app->add_option("--batch-size", c.batch_size, "batch size");
  app->add_option("--teacher", c.teacher, "teacher checkpoint (default: analytic teacher)");
}

tract::RunConfig resolve(const Common& o) {
  tract::RunConfig c = o.config.empty() ? tract::RunConfig() : tract::RunConfig::load(o.config);
  for (const auto& kv : o.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw tract::InvalidArgument("--set expects key=value, got '" + kv + "'");
    c.set(tract::RunConfig::trim(kv.substr(0, eq)), tract::RunConfig::trim(kv.substr(eq + 1)));
  }
  if (o.seed) c.set("seed", std::to_string(*o.seed));
  if (!o.out.empty()) c.set("out", o.out);
  if (o.plan) c.set("plan", *o.plan);
  if (o.mode) c.set("mode", *o.mode);
  if (o.mu_s) c.set("mu_s", *o.mu_s);
  if (o.eps_heuristic) {
    c.set("eps_heuristic", *o.eps_heuristic);
    if (!o.mu_i) c.set("mu_i", "");
  }
  if (o.mu_i) c.set("mu_i", *o.mu_i);
  if (o.budget) c.set("budget", *o.budget);
  if (o.batch_size) c.set("batch_size", *o.batch_size);
  if (o.teacher) c.set("teacher", *o.teacher);
  return c;
}

std::vector<std::uint64_t> to_u64(const std::vector<std::string>& v) {
  std::vector<std::uint64_t> out;
  for (const auto& s : v) out.push_back(static_cast<std::uint64_t>(tract::RunConfig::parse_int(s, "list")));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tractlab: transitive closure time-distillation on toy data"};
  app.require_subcommand(1);

  Common tt;
  auto* train = app.add_subcommand("train-teacher", "train a T-step denoiser from data");
  add_common(train, tt);

  Common di;
  auto* distill = app.add_subcommand("distill", "run a distillation plan; one checkpoint per phase");
  add_common(distill, di);

  std::string ckpt;
  std::optional<int> steps;
  int n = 1024;
  std::uint64_t seed = 0;
  std::string out = ".";
  std::vector<int> panel;
  auto* sample = app.add_subcommand("sample", "generate samples from a checkpoint");
  sample->add_option("--checkpoint", ckpt, "checkpoint file")->required();
  sample->add_option("--steps,-K", steps, "sampling steps (default: the checkpoint's T)");
  sample->add_option("--n", n, "number of samples");
  sample->add_option("--seed", seed, "noise seed");
  sample->add_option("--out", out, "output directory");
  sample->add_option("--panel", panel, "also run the same noise at these step counts")->delimiter(',');

  Common ev;
  int projections = 64;
  auto* eval = app.add_subcommand("eval", "distribution distances of checkpoint samples to fresh data");
  eval->add_option("--checkpoint", ckpt, "checkpoint file")->required();
  eval->add_option("--steps,-K", steps, "sampling steps (default: the checkpoint's T)");
  eval->add_option("--n", n, "samples per side");
  eval->add_option("--projections", projections, "sliced Wasserstein projections");
  eval->add_option("--config", ev.config, "config the checkpoint must match (default: its own)");
  eval->add_option("--set", ev.sets, "override a config key (key=value), repeatable");
  eval->add_option("--seed", ev.seed, "evaluation seed");
  eval->add_option("--out", ev.out, "write eval.json here");

  Common sw;
  std::string axis;
  std::vector<std::string> values, seeds, budgets;
  int parallel = 1;
  auto* sweep = app.add_subcommand("sweep", "ablation grid over one axis");
  add_common(sweep, sw);
  sweep->add_option("--axis", axis, "mu-s | eps-heuristic | mu-i | plan")->required();
  sweep->add_option("--values", values, "axis values; plans are separated by ';'")->required()->delimiter(';');
  sweep->add_option("--seeds", seeds, "seeds")->delimiter(',');
  sweep->add_option("--budgets", budgets, "training lengths")->delimiter(',');
  sweep->add_option("--parallel", parallel, "concurrent runs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error[invalid-argument]: " << e.what() << "\n";
    return tract::InvalidArgument("").exit_code();
  }

  try {
    if (*train) {
      const auto c = resolve(tt);
      const auto ck = tract::cmd_train_teacher(c, c.get("out"));
      std::cout << "teacher: " << (std::filesystem::path(c.get("out")) / "teacher.ckpt").string() << " ("
                << ck.state.step << " steps)\n";
    } else if (*distill) {
      const auto c = resolve(di);
      const auto res = tract::cmd_distill(c, c.get("out"));
      for (const auto& r : res.plan.records) {
        std::cout << "phase " << r.index << ": " << r.teacher_steps << " -> " << r.student_steps;
        if (r.closure_gap_final) std::cout << "  closure gap " << *r.closure_gap_initial << " -> " << *r.closure_gap_final;
        if (r.metrics) std::cout << "  energy distance " << r.metrics->energy_distance;
        std::cout << "\n";
      }
    } else if (*sample) {
      tract::cmd_sample(ckpt, steps, n, seed, out, panel);
      std::cout << "samples: " << (std::filesystem::path(out) / "samples.npy").string() << "\n";
    } else if (*eval) {
      std::optional<tract::RunConfig> cfg;
      if (!ev.config.empty() || !ev.sets.empty()) cfg = resolve(ev);
      tract::EvalOptions o{steps, n, projections, ev.seed.value_or(0)};
      std::optional<std::filesystem::path> dir;
      if (!ev.out.empty()) dir = ev.out;
      const auto r = tract::cmd_eval(ckpt, cfg, o, dir);
      std::cout << tract::to_json(r).dump() << "\n";
    } else if (*sweep) {
      const auto c = resolve(sw);
      std::vector<std::uint64_t> seed_list = to_u64(seeds);
      if (seed_list.empty()) seed_list.push_back(c.unsigned_integer("seed"));
      const auto rows = tract::cmd_sweep(c, axis, values, seed_list, to_u64(budgets), c.get("out"), std::nullopt, parallel);
      std::cout << tract::read_file(std::filesystem::path(c.get("out")) / "sweep.tsv");
      (void)rows;
    }
  } catch (const tract::Error& e) {
    std::cerr << "error[" << e.kind() << "]: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error[internal]: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
