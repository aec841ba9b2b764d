#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "tract/diffusion_ops.hpp"
#include "tract/error.hpp"
#include "tract/rng.hpp"
#include "tract/schedules.hpp"

namespace tract {

// Identity exists for hand-checkable linear test networks.
enum class Activation { SiLU, ReLU, Identity };

inline std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::SiLU: return "silu";
    case Activation::ReLU: return "relu";
    case Activation::Identity: return "identity";
  }
  return "?";
}

inline Activation activation_from_string(std::string_view s) {
  if (s == "silu") return Activation::SiLU;
  if (s == "relu") return Activation::ReLU;
  if (s == "identity") return Activation::Identity;
  throw InvalidArgument("unknown activation '" + std::string(s) + "'");
}

struct ArchDescriptor {
  int input_dim = 2;
  std::vector<int> hidden_widths{256, 256, 256};
  int time_embed_dim = 64;
  Activation activation = Activation::SiLU;

  void validate() const {
    require(input_dim >= 1, "arch: input_dim must be positive");
    require(!hidden_widths.empty(), "arch: at least one hidden layer is required");
    for (int w : hidden_widths) require(w >= 1, "arch: hidden widths must be positive");
    require(time_embed_dim >= 2 && time_embed_dim % 2 == 0, "arch: time_embed_dim must be a positive even integer");
  }

  friend bool operator==(const ArchDescriptor&, const ArchDescriptor&) = default;
};

struct LayerShape {
  int in;
  int out;
  std::size_t weight_offset;  // row-major out x in
  std::size_t bias_offset;
};

// Parameter layout: for each layer, its weight matrix then its bias.
inline std::vector<LayerShape> layer_layout(const ArchDescriptor& arch) {
  arch.validate();
  std::vector<LayerShape> layers;
  int in = arch.input_dim + arch.time_embed_dim;
  std::size_t off = 0;
  auto push = [&](int out) {
    LayerShape l{in, out, off, off + static_cast<std::size_t>(in) * static_cast<std::size_t>(out)};
    off = l.bias_offset + static_cast<std::size_t>(out);
    layers.push_back(l);
    in = out;
  };
  for (int w : arch.hidden_widths) push(w);
  push(arch.input_dim);
  return layers;
}

inline std::size_t param_count(const ArchDescriptor& arch) {
  const auto layers = layer_layout(arch);
  return layers.back().bias_offset + static_cast<std::size_t>(layers.back().out);
}

struct DenoiserModel {
  ArchDescriptor arch;
  std::vector<double> params;

  void validate() const {
    require(params.size() == param_count(arch), "model: parameter vector does not match the architecture layout");
    for (double p : params) require(std::isfinite(p), "model: non-finite parameter");
  }
};

// Fan-in scaled uniform weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)); the output
// layer is shrunk by 0.1 so the fresh model predicts a near-zero signal.
inline constexpr double kOutputInitScale = 0.1;

inline DenoiserModel init_model(const ArchDescriptor& arch, Rng& rng) {
  const auto layers = layer_layout(arch);
  DenoiserModel m{arch, std::vector<double>(param_count(arch), 0.0)};
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const double bound = (l + 1 == layers.size() ? kOutputInitScale : 1.0) / std::sqrt(static_cast<double>(layers[l].in));
    const std::size_t n = static_cast<std::size_t>(layers[l].in) * static_cast<std::size_t>(layers[l].out);
    for (std::size_t i = 0; i < n; ++i) m.params[layers[l].weight_offset + i] = bound * (2.0 * rng.uniform() - 1.0);
  }
  return m;
}

// Scalar time coordinate fed to the embedding: t/T on VP schedules and
// log(sigma_t)/4 on VE schedules, so coarsened schedules map consistently.
inline double time_coordinate(const NoiseSchedule& sched, int t) {
  if (sched.kind() == ScheduleKind::VP) return static_cast<double>(t) / sched.steps();
  const double s = sched.sigma(t);
  require(s > 0.0, "time_coordinate: VE models are not evaluated at sigma = 0");
  return 0.25 * std::log(s);
}

// Output = skip * x + out * net(in * x, t). Identity on VP schedules, whose
// states already have unit scale. VE uses the EDM preconditioning with
// sigma_data = 0.5, which keeps the sigma-weighted loss of order one across
// sigma in [0.002, 80].
struct Precondition {
  double in = 1.0;
  double skip = 0.0;
  double out = 1.0;
};

inline Precondition precondition(const NoiseSchedule& sched, int t) {
  if (sched.kind() == ScheduleKind::VP) return {};
  const double s = sched.sigma(t);
  const double d = kSigmaData;
  const double r = s * s + d * d;
  return {1.0 / std::sqrt(r), d * d / r, s * d / std::sqrt(r)};
}

// [sin(f_k u), cos(f_k u)] with frequencies geometric over [1, 1000].
template <class Out>
void time_embedding(double u, int dim, Out&& out) {
  const int half = dim / 2;
  for (int k = 0; k < half; ++k) {
    const double f = half == 1 ? 1.0 : std::pow(1000.0, static_cast<double>(k) / (half - 1));
    out(k) = std::sin(f * u);
    out(half + k) = std::cos(f * u);
  }
}

struct ForwardCache {
  std::vector<Mat> inputs;  // input of each layer
  std::vector<Mat> pre;     // pre-activation of each hidden layer
  std::vector<double> out_scale;  // per column
};

namespace detail {
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Mat activate(const Mat& z, Activation a) {
  switch (a) {
    case Activation::SiLU: return z.array() / (1.0 + (-z.array()).exp());
    case Activation::ReLU: return z.array().max(0.0);
    case Activation::Identity: return z;
  }
  return z;
}

inline Mat activation_grad(const Mat& z, Activation a) {
  switch (a) {
    case Activation::SiLU: {
      const Eigen::ArrayXXd s = 1.0 / (1.0 + (-z.array()).exp());
      return s * (1.0 + z.array() * (1.0 - s));
    }
    case Activation::ReLU: return (z.array() > 0.0).cast<double>();
    case Activation::Identity: return Mat::Ones(z.rows(), z.cols());
  }
  return Mat::Ones(z.rows(), z.cols());
}
}  // namespace detail

// Batched forward pass; column b of X is evaluated at timestep ts[b].
inline Mat forward_batch(const ArchDescriptor& arch, std::span<const double> params, const Mat& X,
                         std::span<const int> ts, const NoiseSchedule& sched, ForwardCache* cache = nullptr) {
  const auto layers = layer_layout(arch);
  require(params.size() == param_count(arch), "forward: parameter vector does not match the architecture layout");
  require(X.rows() == arch.input_dim, "forward: input dimension mismatch (" + std::to_string(X.rows()) + " vs " +
                                          std::to_string(arch.input_dim) + ")");
  require(static_cast<std::size_t>(X.cols()) == ts.size(), "forward: one timestep per column required");

  Mat h(arch.input_dim + arch.time_embed_dim, X.cols());
  std::vector<Precondition> pc(static_cast<std::size_t>(X.cols()));
  bool plain = true;
  for (Eigen::Index b = 0; b < X.cols(); ++b) {
    const int t = ts[static_cast<std::size_t>(b)];
    const Precondition& p = pc[static_cast<std::size_t>(b)] = precondition(sched, t);
    plain = plain && p.in == 1.0 && p.skip == 0.0 && p.out == 1.0;
    h.col(b).head(arch.input_dim) = p.in * X.col(b);
    auto col = h.col(b).tail(arch.time_embed_dim);
    time_embedding(time_coordinate(sched, t), arch.time_embed_dim, col);
  }
  if (cache) {
    cache->inputs.clear();
    cache->pre.clear();
    cache->out_scale.resize(pc.size());
    for (std::size_t b = 0; b < pc.size(); ++b) cache->out_scale[b] = pc[b].out;
  }
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const LayerShape& L = layers[l];
    Eigen::Map<const detail::RowMat> W(params.data() + L.weight_offset, L.out, L.in);
    Eigen::Map<const Vec> bias(params.data() + L.bias_offset, L.out);
    Mat z = W * h;
    z.colwise() += bias;
    if (cache) cache->inputs.push_back(h);
    if (l + 1 == layers.size()) {
      if (plain) return z;
      for (Eigen::Index b = 0; b < z.cols(); ++b) {
        const Precondition& p = pc[static_cast<std::size_t>(b)];
        z.col(b) = p.skip * X.col(b) + p.out * z.col(b);
      }
      return z;
    }
    if (cache) cache->pre.push_back(z);
    h = detail::activate(z, arch.activation);
  }
  return h;
}

// Reverse-mode gradient of sum(out_grad .* forward) w.r.t. the parameters,
// using the cache filled by the matching forward_batch call.
inline std::vector<double> backward_batch(const ArchDescriptor& arch, std::span<const double> params,
                                          const ForwardCache& cache, const Mat& out_grad) {
  const auto layers = layer_layout(arch);
  require(cache.inputs.size() == layers.size(), "backward: cache does not come from this architecture");
  require(out_grad.rows() == arch.input_dim && out_grad.cols() == cache.inputs.front().cols(),
          "backward: output cotangent shape mismatch");
  std::vector<double> grad(param_count(arch), 0.0);
  Mat g = out_grad;
  if (cache.out_scale.size() == static_cast<std::size_t>(g.cols())) {
    for (Eigen::Index b = 0; b < g.cols(); ++b) g.col(b) *= cache.out_scale[static_cast<std::size_t>(b)];
  }
  for (std::size_t l = layers.size(); l-- > 0;) {
    const LayerShape& L = layers[l];
    Eigen::Map<detail::RowMat> gW(grad.data() + L.weight_offset, L.out, L.in);
    Eigen::Map<Vec> gb(grad.data() + L.bias_offset, L.out);
    gW.noalias() = g * cache.inputs[l].transpose();
    gb = g.rowwise().sum();
    if (l == 0) break;
    Eigen::Map<const detail::RowMat> W(params.data() + L.weight_offset, L.out, L.in);
    Mat up = W.transpose() * g;
    g = up.array() * detail::activation_grad(cache.pre[l - 1], arch.activation).array();
  }
  return grad;
}

inline Vec forward(const DenoiserModel& m, const Vec& x, int t, const NoiseSchedule& sched) {
  const int ts[1] = {t};
  return forward_batch(m.arch, m.params, x, ts, sched).col(0);
}

inline std::vector<double> backward(const DenoiserModel& m, const Vec& x, int t, const NoiseSchedule& sched,
                                    const Vec& loss_grad) {
  const int ts[1] = {t};
  ForwardCache cache;
  forward_batch(m.arch, m.params, x, ts, sched, &cache);
  return backward_batch(m.arch, m.params, cache, loss_grad);
}

// Non-owning view binding a parameter vector and schedule into a denoiser.
// The referenced arch, parameters and schedule must outlive the view.
class ModelDenoiser {
 public:
  ModelDenoiser(const ArchDescriptor& arch, std::span<const double> params, const NoiseSchedule& sched)
      : arch_(&arch), params_(params), sched_(&sched) {}
  ModelDenoiser(const DenoiserModel& m, const NoiseSchedule& sched) : ModelDenoiser(m.arch, m.params, sched) {}

  Vec operator()(const Vec& x, int t) const {
    const int ts[1] = {t};
    return forward_batch(*arch_, params_, x, ts, *sched_).col(0);
  }
  Mat batch(const Mat& X, std::span<const int> ts) const { return forward_batch(*arch_, params_, X, ts, *sched_); }

 private:
  const ArchDescriptor* arch_;
  std::span<const double> params_;
  const NoiseSchedule* sched_;
};

}  // namespace tract
