#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "tract/data.hpp"
#include "tract/distill.hpp"
#include "tract/error.hpp"
#include "tract/eval.hpp"
#include "tract/model.hpp"
#include "tract/schedules.hpp"

namespace tract {

// Every key a run config may set, with its default. Values are kept as text
// so the resolved configuration hashes the same however it was written.
inline const std::map<std::string, std::string>& config_defaults() {
  static const std::map<std::string, std::string> d{
      {"dataset", "gaussian"},
      {"dataset.mean", "0.5,-0.3"},
      {"dataset.cov", "1,0.3,0.3,0.5"},
      {"dataset.point", "0.5,-0.3"},
      {"dataset.components", "8"},
      {"dataset.radius", "2"},
      {"dataset.std", "0.2"},
      {"dataset.noise", "0.05"},
      {"dataset.cells", "4"},
      {"schedule", "vp"},
      {"schedule.steps", "64"},
      {"schedule.sigma_min", "0.002"},
      {"schedule.sigma_max", "80"},
      {"schedule.rho", "7"},
      {"arch.hidden", "128,128,128"},
      {"arch.time_embed", "64"},
      {"arch.activation", "silu"},
      {"student.hidden", ""},
      {"teacher", "analytic"},
      {"plan", "64,8,1"},
      {"plan.weights", ""},
      {"mode", "tract-vp"},
      {"budget", "1000000"},
      {"batch_size", "256"},
      {"mu_s", "0.5"},
      {"eps_heuristic", "1e-4"},
      {"mu_i", ""},
      {"lr", "2e-4"},
      {"beta1", "0.9"},
      {"beta2", "0.999"},
      {"adam_eps", "1e-8"},
      {"clip", "1.0"},
      {"loss_clamp", "true"},
      {"sigma_data", "0.5"},
      {"seed", "0"},
      {"out", "run"},
      {"log_every", "500"},
      {"eval.probes", "512"},
      {"eval.samples", "4096"},
      {"eval.projections", "64"},
      {"eval.seed", "24301"},
  };
  return d;
}

// Keys that locate outputs rather than define the experiment.
inline bool config_key_hashed(const std::string& key) { return key != "out" && key != "log_every"; }

class RunConfig {
 public:
  RunConfig() : values_(config_defaults()) {}

  // key = value lines; '#' starts a comment.
  static RunConfig parse(std::string_view text) {
    RunConfig c;
    std::istringstream in{std::string(text)};
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const std::string t = trim(line);
      if (t.empty()) continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos) throw InvalidArgument("config line " + std::to_string(lineno) + ": expected key = value");
      c.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
    return c;
  }

  static RunConfig load(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config " + path.string());
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
  }

  void set(const std::string& key, const std::string& value) {
    if (!config_defaults().contains(key)) throw InvalidArgument("unknown config key '" + key + "'");
    values_[key] = value;
    explicit_.insert(key);
  }

  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw InvalidArgument("unknown config key '" + key + "'");
    return it->second;
  }

  bool is_set(const std::string& key) const { return explicit_.contains(key); }
  const std::map<std::string, std::string>& values() const { return values_; }

  double number(const std::string& key) const { return parse_double(get(key), key); }
  std::int64_t integer(const std::string& key) const { return parse_int(get(key), key); }
  std::uint64_t unsigned_integer(const std::string& key) const {
    const auto v = integer(key);
    require(v >= 0, "config " + key + " must be non-negative");
    return static_cast<std::uint64_t>(v);
  }
  bool flag(const std::string& key) const {
    const std::string& v = get(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw InvalidArgument("config " + key + ": expected a boolean, got '" + v + "'");
  }
  std::vector<double> numbers(const std::string& key) const {
    std::vector<double> out;
    for (const auto& s : split(get(key), ',')) out.push_back(parse_double(s, key));
    return out;
  }
  std::vector<int> integers(const std::string& key) const {
    std::vector<int> out;
    for (const auto& s : split(get(key), ',')) out.push_back(static_cast<int>(parse_int(s, key)));
    return out;
  }

  // Canonical "key=value" text of the hashed keys, sorted.
  std::string canonical() const {
    std::string s;
    for (const auto& [k, v] : values_) {
      if (config_key_hashed(k)) s += k + "=" + v + "\n";
    }
    return s;
  }

  std::uint64_t hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (unsigned char ch : canonical()) {
      h ^= ch;
      h *= 0x100000001b3ULL;
    }
    return h;
  }

  static std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
  }

  static std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    if (trim(s).empty()) return out;
    std::string item;
    std::istringstream in(s);
    while (std::getline(in, item, sep)) out.push_back(trim(item));
    return out;
  }

  static double parse_double(const std::string& s, const std::string& key) {
    try {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      if (used == s.size()) return v;
    } catch (const std::exception&) {
    }
    throw InvalidArgument("config " + key + ": '" + s + "' is not a number");
  }

  static std::int64_t parse_int(const std::string& s, const std::string& key) {
    std::int64_t v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) {
      // accept integral scientific notation such as 2e6
      const double d = parse_double(s, key);
      if (d != static_cast<double>(static_cast<std::int64_t>(d))) {
        throw InvalidArgument("config " + key + ": '" + s + "' is not an integer");
      }
      return static_cast<std::int64_t>(d);
    }
    return v;
  }

 private:
  std::map<std::string, std::string> values_;
  std::set<std::string> explicit_;
};

// Plan grammar: comma-separated, strictly decreasing step counts ending >= 1.
inline std::vector<int> parse_plan(const std::string& text) {
  std::vector<int> steps;
  for (const auto& s : RunConfig::split(text, ',')) {
    const auto v = RunConfig::parse_int(s, "plan");
    require(v >= 1, "plan: step counts must be >= 1 (got " + s + ")");
    steps.push_back(static_cast<int>(v));
  }
  require(steps.size() >= 2, "plan: need at least two step counts, e.g. 64,8,1");
  for (std::size_t i = 1; i < steps.size(); ++i) {
    require(steps[i] < steps[i - 1], "plan '" + text + "' is non-decreasing at position " + std::to_string(i + 1));
  }
  return steps;
}

inline Dataset build_dataset(const RunConfig& c) {
  const std::string& kind = c.get("dataset");
  if (kind == "gaussian") {
    const auto mean = c.numbers("dataset.mean");
    const auto cov = c.numbers("dataset.cov");
    const auto d = static_cast<Eigen::Index>(mean.size());
    require(d >= 1 && cov.size() == mean.size() * mean.size(), "dataset.cov must hold d*d entries");
    Vec mu = Eigen::Map<const Vec>(mean.data(), d);
    Mat sigma = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(cov.data(), d, d);
    return Dataset(Gaussian{mu, sigma});
  }
  if (kind == "single-point") {
    const auto p = c.numbers("dataset.point");
    return Dataset(SinglePoint{Eigen::Map<const Vec>(p.data(), static_cast<Eigen::Index>(p.size()))});
  }
  if (kind == "mixture") {
    return Dataset(make_ring_mixture(static_cast<int>(c.integer("dataset.components")), c.number("dataset.radius"),
                                     c.number("dataset.std")));
  }
  if (kind == "swiss-roll") return Dataset(SwissRoll{c.number("dataset.noise")});
  if (kind == "checkerboard") return Dataset(Checkerboard{static_cast<int>(c.integer("dataset.cells"))});
  throw InvalidArgument("unknown dataset '" + kind + "'");
}

inline NoiseSchedule build_schedule(const RunConfig& c) {
  const auto kind = schedule_kind_from_string(c.get("schedule"));
  const int T = static_cast<int>(c.integer("schedule.steps"));
  require(T >= 1, "schedule.steps must be >= 1");
  if (kind == ScheduleKind::VP) return make_vp_schedule(T);
  return make_ve_schedule(T, VeParams{c.number("schedule.sigma_min"), c.number("schedule.sigma_max"),
                                      c.number("schedule.rho")});
}

inline ArchDescriptor build_arch(const RunConfig& c, int input_dim, const std::string& hidden_key = "arch.hidden") {
  ArchDescriptor a;
  a.input_dim = input_dim;
  a.hidden_widths = c.integers(hidden_key);
  a.time_embed_dim = static_cast<int>(c.integer("arch.time_embed"));
  a.activation = activation_from_string(c.get("arch.activation"));
  a.validate();
  return a;
}

inline AdamHyper build_adam(const RunConfig& c) {
  return AdamHyper{c.number("lr"), c.number("beta1"), c.number("beta2"), c.number("adam_eps")};
}

inline PhaseConfig build_phase_template(const RunConfig& c, int input_dim) {
  PhaseConfig p;
  p.mode = distill_mode_from_string(c.get("mode"));
  p.batch_size = static_cast<int>(c.integer("batch_size"));
  p.mu_s = c.number("mu_s");
  if (!c.get("mu_i").empty()) p.mu_i = c.number("mu_i");
  p.eps_heuristic = c.number("eps_heuristic");
  p.adam = build_adam(c);
  p.clip_norm = c.number("clip");
  p.clamp_loss_weight = c.flag("loss_clamp");
  p.sigma_data = c.number("sigma_data");
  if (!c.get("student.hidden").empty()) p.student_arch = build_arch(c, input_dim, "student.hidden");
  return p;
}

inline DistillPlan build_plan(const RunConfig& c, int input_dim) {
  const auto steps = parse_plan(c.get("plan"));
  const PhaseConfig base = build_phase_template(c, input_dim);
  const auto weights = c.numbers("plan.weights");
  if (base.mode == DistillMode::ArchKD) {
    // A single non-time phase at the plan's first step count.
    PhaseConfig p = base;
    p.teacher_steps = p.student_steps = steps.front();
    p.sample_budget = c.unsigned_integer("budget");
    return DistillPlan{{p}};
  }
  return make_plan(steps, base.mode, c.unsigned_integer("budget"), base, weights);
}

inline TeacherConfig build_teacher_config(const RunConfig& c) {
  TeacherConfig t;
  t.sample_budget = c.unsigned_integer("budget");
  t.batch_size = static_cast<int>(c.integer("batch_size"));
  t.adam = build_adam(c);
  t.clip_norm = c.number("clip");
  if (!c.get("mu_i").empty()) t.mu_i = c.number("mu_i");
  t.eps_heuristic = c.number("eps_heuristic");
  t.clamp_loss_weight = c.flag("loss_clamp");
  t.sigma_data = c.number("sigma_data");
  return t;
}

inline PlanOptions build_plan_options(const RunConfig& c) {
  PlanOptions o;
  o.eval_probes = static_cast<int>(c.integer("eval.probes"));
  o.eval_samples = static_cast<int>(c.integer("eval.samples"));
  o.eval_projections = static_cast<int>(c.integer("eval.projections"));
  o.eval_seed = c.unsigned_integer("eval.seed");
  o.log_every = c.unsigned_integer("log_every");
  return o;
}

}  // namespace tract
