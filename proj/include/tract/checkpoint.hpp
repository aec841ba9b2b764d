#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "json.hpp"

#include "tract/distill.hpp"
#include "tract/error.hpp"
#include "tract/model.hpp"
#include "tract/optim.hpp"
#include "tract/schedules.hpp"

namespace tract {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

// Layout: "TRACTCKP" | u32 version | u32 reserved | u64 header length |
// JSON header (sorted keys) | float64 arrays at the header's byte offsets,
// relative to the first byte after the header.
inline constexpr std::array<char, 8> kCheckpointMagic{'T', 'R', 'A', 'C', 'T', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  NoiseSchedule schedule;
  TrainingState state;
  std::uint64_t config_hash = 0;
  nlohmann::json meta = nlohmann::json::object();

  const ArchDescriptor& arch() const { return state.student.arch; }
  DenoiserModel inference_model() const { return state.inference_model(); }
};

namespace detail {

inline nlohmann::json arch_to_json(const ArchDescriptor& a) {
  return {{"input_dim", a.input_dim},
          {"hidden_widths", a.hidden_widths},
          {"time_embed_dim", a.time_embed_dim},
          {"activation", std::string(to_string(a.activation))}};
}

inline ArchDescriptor arch_from_json(const nlohmann::json& j) {
  ArchDescriptor a;
  a.input_dim = j.at("input_dim").get<int>();
  a.hidden_widths = j.at("hidden_widths").get<std::vector<int>>();
  a.time_embed_dim = j.at("time_embed_dim").get<int>();
  a.activation = activation_from_string(j.at("activation").get<std::string>());
  a.validate();
  return a;
}

template <class T>
void put_le(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <class T>
T get_le(const std::string& in, std::size_t at) {
  if (at + sizeof(T) > in.size()) throw CheckpointError("truncated checkpoint preamble");
  T v;
  std::memcpy(&v, in.data() + at, sizeof(T));
  return v;
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& c) {
  const TrainingState& s = c.state;
  const std::size_t n = s.student.params.size();
  require(s.self_teacher.shadow.size() == n && s.inference.shadow.size() == n && s.adam.m.size() == n &&
              s.adam.v.size() == n,
          "checkpoint: state vectors disagree in length");

  const std::vector<std::pair<std::string, const std::vector<double>*>> arrays{
      {"schedule_levels", &c.schedule.levels()}, {"params", &s.student.params},
      {"ema_self", &s.self_teacher.shadow},      {"ema_inference", &s.inference.shadow},
      {"adam_m", &s.adam.m},                     {"adam_v", &s.adam.v}};

  nlohmann::json h;
  h["format"] = "tract-checkpoint";
  h["arch"] = detail::arch_to_json(s.student.arch);
  h["schedule"] = {{"kind", std::string(to_string(c.schedule.kind()))}, {"steps", c.schedule.steps()}};
  h["step"] = s.step;
  h["ema_self"] = {{"mu", s.self_teacher.mu}, {"step", s.self_teacher.step}};
  h["ema_inference"] = {{"mu", s.inference.mu}, {"step", s.inference.step}};
  h["adam"] = {{"lr", s.adam.hyper.lr},       {"beta1", s.adam.hyper.beta1}, {"beta2", s.adam.hyper.beta2},
               {"eps", s.adam.hyper.eps},     {"step", s.adam.step}};
  h["config_hash"] = c.config_hash;
  h["meta"] = c.meta;
  std::uint64_t offset = 0;
  for (const auto& [name, vec] : arrays) {
    h["arrays"][name] = {{"offset", offset}, {"count", vec->size()}, {"dtype", "<f8"}};
    offset += vec->size() * sizeof(double);
  }
  const std::string header = h.dump();

  std::string out;
  out.reserve(24 + header.size() + offset);
  out.append(kCheckpointMagic.data(), kCheckpointMagic.size());
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint32_t>(out, 0);
  detail::put_le<std::uint64_t>(out, header.size());
  out += header;
  for (const auto& [name, vec] : arrays) {
    out.append(reinterpret_cast<const char*>(vec->data()), vec->size() * sizeof(double));
  }
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 24 || std::memcmp(bytes.data(), kCheckpointMagic.data(), kCheckpointMagic.size()) != 0) {
    throw CheckpointError("not a checkpoint (bad magic)");
  }
  const auto version = detail::get_le<std::uint32_t>(bytes, 8);
  if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const auto header_len = detail::get_le<std::uint64_t>(bytes, 16);
  if (header_len > bytes.size() - 24) throw CheckpointError("header length exceeds file size");
  const std::size_t data_start = 24 + static_cast<std::size_t>(header_len);

  try {
    const nlohmann::json h = nlohmann::json::parse(bytes.begin() + 24, bytes.begin() + static_cast<long>(data_start));
    auto array = [&](const char* name) {
      const auto& a = h.at("arrays").at(name);
      if (a.at("dtype").get<std::string>() != "<f8") throw CheckpointError(std::string("array ") + name + " is not <f8");
      const auto off = a.at("offset").get<std::uint64_t>();
      const auto count = a.at("count").get<std::uint64_t>();
      if (off % sizeof(double) != 0 || count > (bytes.size() - data_start) / sizeof(double) ||
          off > bytes.size() - data_start - count * sizeof(double)) {
        throw CheckpointError(std::string("array ") + name + " lies outside the file");
      }
      std::vector<double> v(count);
      std::memcpy(v.data(), bytes.data() + data_start + off, count * sizeof(double));
      return v;
    };

    std::uint64_t total = 0;
    for (const auto& [name, a] : h.at("arrays").items()) total += a.at("count").get<std::uint64_t>() * sizeof(double);
    if (data_start + total != bytes.size()) throw CheckpointError("trailing or missing array bytes");

    const ArchDescriptor arch = detail::arch_from_json(h.at("arch"));
    const auto kind = schedule_kind_from_string(h.at("schedule").at("kind").get<std::string>());
    NoiseSchedule sched(kind, array("schedule_levels"));
    if (sched.steps() != h.at("schedule").at("steps").get<int>()) throw CheckpointError("schedule length mismatch");

    DenoiserModel student{arch, array("params")};
    if (student.params.size() != param_count(arch)) throw CheckpointError("parameter count does not match the arch");
    const auto& es = h.at("ema_self");
    const auto& ei = h.at("ema_inference");
    const auto& ad = h.at("adam");
    EmaState self(array("ema_self"), es.at("mu").get<double>());
    self.step = es.at("step").get<std::uint64_t>();
    EmaState inf(array("ema_inference"), ei.at("mu").get<double>());
    inf.step = ei.at("step").get<std::uint64_t>();
    AdamHyper hyper{ad.at("lr").get<double>(), ad.at("beta1").get<double>(), ad.at("beta2").get<double>(),
                    ad.at("eps").get<double>()};
    AdamState adam(student.params.size(), hyper);
    adam.m = array("adam_m");
    adam.v = array("adam_v");
    adam.step = ad.at("step").get<std::uint64_t>();
    const std::size_t n = student.params.size();
    if (self.shadow.size() != n || inf.shadow.size() != n || adam.m.size() != n || adam.v.size() != n) {
      throw CheckpointError("state arrays disagree in length");
    }
    TrainingState st{std::move(student), std::move(self), std::move(inf), std::move(adam),
                     h.at("step").get<std::uint64_t>()};
    return Checkpoint{std::move(sched), std::move(st), h.at("config_hash").get<std::uint64_t>(), h.at("meta")};
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint header: ") + e.what());
  }
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed for " + path.string());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(f), {});
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  write_file(path, serialize_checkpoint(c));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return deserialize_checkpoint(read_file(path)); }

}  // namespace tract
