#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "tract/checkpoint.hpp"
#include "tract/diffusion_ops.hpp"
#include "tract/distill.hpp"
#include "tract/error.hpp"
#include "tract/eval.hpp"

namespace tract {

// NumPy .npy v1.0, little-endian float64, C order.
inline std::string npy_bytes(const std::vector<double>& data, const std::vector<std::size_t>& shape) {
  std::size_t count = 1;
  for (auto d : shape) count *= d;
  require(count == data.size(), "npy: shape does not match data length");
  std::string shape_str = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) shape_str += (i ? ", " : "") + std::to_string(shape[i]);
  shape_str += shape.size() == 1 ? ",)" : ")";
  std::string header = "{'descr': '<f8', 'fortran_order': False, 'shape': " + shape_str + ", }";
  const std::size_t unpadded = 10 + header.size() + 1;
  header.append((64 - unpadded % 64) % 64, ' ');
  header += '\n';
  std::string out("\x93NUMPY\x01\x00", 8);
  const auto len = static_cast<std::uint16_t>(header.size());
  out += static_cast<char>(len & 0xff);
  out += static_cast<char>(len >> 8);
  out += header;
  out.append(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(double));
  return out;
}

// Samples stored column-wise (d x n) become an n x d array.
inline void write_npy(const std::filesystem::path& path, const Mat& samples) {
  std::vector<double> flat(samples.data(), samples.data() + samples.size());
  write_file(path, npy_bytes(flat, {static_cast<std::size_t>(samples.cols()), static_cast<std::size_t>(samples.rows())}));
}

// Stack of equally shaped sample batches as a (k, n, d) array.
inline void write_npy_stack(const std::filesystem::path& path, const std::vector<Mat>& batches) {
  require(!batches.empty(), "npy: empty stack");
  std::vector<double> flat;
  for (const Mat& m : batches) {
    require(m.rows() == batches[0].rows() && m.cols() == batches[0].cols(), "npy: ragged stack");
    flat.insert(flat.end(), m.data(), m.data() + m.size());
  }
  write_file(path, npy_bytes(flat, {batches.size(), static_cast<std::size_t>(batches[0].cols()),
                                    static_cast<std::size_t>(batches[0].rows())}));
}

inline nlohmann::json to_json(const MetricReport& r) {
  return {{"energy_distance", r.energy_distance},
          {"sliced_wasserstein", r.sliced_wasserstein},
          {"n_samples", r.n_samples},
          {"n_projections", r.n_projections},
          {"seed", r.seed}};
}

inline nlohmann::json to_json(const LogRecord& r) {
  nlohmann::json j{{"record", "step"}, {"phase", r.phase}, {"step", r.step}, {"loss", r.loss},
                   {"wall_seconds", r.wall_seconds}};
  j["closure_gap"] = r.closure_gap ? nlohmann::json(*r.closure_gap) : nlohmann::json(nullptr);
  return j;
}

inline nlohmann::json to_json(const PhaseRecord& r) {
  nlohmann::json j{{"record", "phase"},
                   {"phase", r.index},
                   {"mode", std::string(to_string(r.mode))},
                   {"teacher_steps", r.teacher_steps},
                   {"student_steps", r.student_steps},
                   {"optimizer_steps", r.optimizer_steps},
                   {"mu_i", r.mu_i},
                   {"final_loss", r.final_loss}};
  j["closure_gap_initial"] = r.closure_gap_initial ? nlohmann::json(*r.closure_gap_initial) : nlohmann::json(nullptr);
  j["closure_gap_final"] = r.closure_gap_final ? nlohmann::json(*r.closure_gap_final) : nlohmann::json(nullptr);
  j["metrics"] = r.metrics ? to_json(*r.metrics) : nlohmann::json(nullptr);
  return j;
}

// Append-only line-delimited JSON records.
class MetricsLog {
 public:
  explicit MetricsLog(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    out_.open(path, std::ios::app);
    if (!out_) throw IoError("cannot open metrics log " + path.string());
  }

  void write(const nlohmann::json& record) {
    out_ << record.dump() << '\n';
    out_.flush();
    if (!out_) throw IoError("metrics log write failed");
  }

 private:
  std::ofstream out_;
};

}  // namespace tract
