#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <type_traits>
#include <utility>
#include <variant>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "tract/diffusion_ops.hpp"
#include "tract/error.hpp"
#include "tract/rng.hpp"

namespace tract {

struct SinglePoint {
  Vec point;
};

struct Gaussian {
  Vec mean;
  Mat cov;
};

struct GaussianMixture {
  std::vector<double> weights;
  std::vector<Vec> means;
  std::vector<Mat> covs;
};

struct SwissRoll {
  double noise = 0.05;
};

struct Checkerboard {
  int cells = 4;
};

using DatasetKind = std::variant<SinglePoint, Gaussian, GaussianMixture, SwissRoll, Checkerboard>;

namespace detail {
inline Mat cholesky_factor(const Mat& cov, const char* what) {
  require(cov.rows() == cov.cols(), std::string(what) + ": covariance must be square");
  require((cov - cov.transpose()).cwiseAbs().maxCoeff() <= 1e-12 * (1.0 + cov.cwiseAbs().maxCoeff()),
          std::string(what) + ": covariance must be symmetric");
  Eigen::LLT<Mat> llt(cov);
  require(llt.info() == Eigen::Success, std::string(what) + ": covariance must be positive definite");
  return llt.matrixL();
}

inline Vec std_normal(int d, Rng& rng) {
  Vec z(d);
  for (int i = 0; i < d; ++i) z(i) = rng.normal();
  return z;
}
}  // namespace detail

// Synthetic data law with a known structure. Swiss roll and checkerboard are
// standardized to zero mean and unit per-axis variance using constants fixed
// once from a reference draw, so every batch is still i.i.d.
class Dataset {
 public:
  explicit Dataset(DatasetKind kind) : kind_(std::move(kind)) {
    std::visit([this](const auto& k) { setup(k); }, kind_);
  }

  int dim() const { return dim_; }
  const DatasetKind& kind() const { return kind_; }

  std::string name() const {
    return std::visit(
        [](const auto& k) -> std::string {
          using K = std::decay_t<decltype(k)>;
          if constexpr (std::is_same_v<K, SinglePoint>) return "single-point";
          else if constexpr (std::is_same_v<K, Gaussian>) return "gaussian";
          else if constexpr (std::is_same_v<K, GaussianMixture>) return "mixture";
          else if constexpr (std::is_same_v<K, SwissRoll>) return "swiss-roll";
          else return "checkerboard";
        },
        kind_);
  }

  // n draws as columns; labels (mixture component, else 0) when requested.
  Mat draw(int n, Rng& rng, std::vector<int>* labels = nullptr) const {
    require(n >= 0, "draw: n must be non-negative");
    Mat out(dim_, n);
    if (labels) labels->assign(static_cast<std::size_t>(n), 0);
    for (int i = 0; i < n; ++i) {
      int label = 0;
      out.col(i) = std::visit([&](const auto& k) { return raw(k, rng, label); }, kind_);
      if (labels) (*labels)[static_cast<std::size_t>(i)] = label;
    }
    if (standardize_) out = (out.colwise() - shift_).array().colwise() / scale_.array();
    return out;
  }

 private:
  void setup(const SinglePoint& k) {
    require(k.point.size() >= 1, "dataset: single point must be non-empty");
    dim_ = static_cast<int>(k.point.size());
  }

  void setup(const Gaussian& k) {
    require(k.mean.size() >= 1 && k.cov.rows() == k.mean.size(), "dataset: gaussian mean/cov shape mismatch");
    dim_ = static_cast<int>(k.mean.size());
    chol_.push_back(detail::cholesky_factor(k.cov, "gaussian dataset"));
  }

  void setup(const GaussianMixture& k) {
    require(!k.weights.empty() && k.weights.size() == k.means.size() && k.means.size() == k.covs.size(),
            "dataset: mixture needs matching weights, means and covs");
    double total = 0.0;
    for (double w : k.weights) {
      require(w > 0.0, "dataset: mixture weights must be positive");
      total += w;
    }
    require(std::abs(total - 1.0) <= 1e-9, "dataset: mixture weights must sum to 1");
    dim_ = static_cast<int>(k.means.front().size());
    double acc = 0.0;
    for (std::size_t c = 0; c < k.means.size(); ++c) {
      require(k.means[c].size() == dim_ && k.covs[c].rows() == dim_, "dataset: mixture component shape mismatch");
      chol_.push_back(detail::cholesky_factor(k.covs[c], "mixture component"));
      acc += k.weights[c];
      cumulative_.push_back(acc);
    }
    cumulative_.back() = 1.0;
  }

  void setup(const SwissRoll& k) {
    require(k.noise >= 0.0, "dataset: swiss roll noise must be non-negative");
    dim_ = 2;
    fit_standardization();
  }

  void setup(const Checkerboard& k) {
    require(k.cells >= 2, "dataset: checkerboard needs at least 2 cells per side");
    dim_ = 2;
    fit_standardization();
  }

  void fit_standardization() {
    Rng ref(0x5eed5eedULL, 0);
    const int n = 200000;
    Mat sample(dim_, n);
    int label = 0;
    for (int i = 0; i < n; ++i) sample.col(i) = std::visit([&](const auto& k) { return raw(k, ref, label); }, kind_);
    shift_ = sample.rowwise().mean();
    scale_ = ((sample.colwise() - shift_).array().square().rowwise().mean()).sqrt();
    standardize_ = true;
  }

  Vec raw(const SinglePoint& k, Rng&, int&) const { return k.point; }

  Vec raw(const Gaussian& k, Rng& rng, int&) const { return k.mean + chol_[0] * detail::std_normal(dim_, rng); }

  Vec raw(const GaussianMixture& k, Rng& rng, int& label) const {
    const double u = rng.uniform();
    std::size_t c = 0;
    while (c + 1 < cumulative_.size() && u >= cumulative_[c]) ++c;
    label = static_cast<int>(c);
    return k.means[c] + chol_[c] * detail::std_normal(dim_, rng);
  }

  Vec raw(const SwissRoll& k, Rng& rng, int&) const {
    const double theta = 1.5 * std::numbers::pi * (1.0 + 2.0 * rng.uniform());
    Vec p(2);
    p << theta * std::cos(theta), theta * std::sin(theta);
    p /= 10.0;
    p(0) += k.noise * rng.normal();
    p(1) += k.noise * rng.normal();
    return p;
  }

  Vec raw(const Checkerboard& k, Rng& rng, int&) const {
    // Uniform over the squares with even (row + col) of a cells x cells board on [-1, 1]^2.
    const int n_dark = (k.cells * k.cells + 1) / 2;
    const int pick = static_cast<int>(rng.below(static_cast<std::uint64_t>(n_dark)));
    int seen = 0;
    int row = 0, col = 0;
    for (int r = 0; r < k.cells; ++r) {
      for (int c = 0; c < k.cells; ++c) {
        if ((r + c) % 2 != 0) continue;
        if (seen++ == pick) {
          row = r;
          col = c;
        }
      }
    }
    const double w = 2.0 / k.cells;
    Vec p(2);
    p << -1.0 + w * (col + rng.uniform()), -1.0 + w * (row + rng.uniform());
    return p;
  }

  DatasetKind kind_;
  int dim_ = 0;
  std::vector<Mat> chol_;
  std::vector<double> cumulative_;
  bool standardize_ = false;
  Vec shift_;
  Vec scale_;
};

inline Mat draw(const Dataset& data, int n, Rng& rng) { return data.draw(n, rng); }

// Equal-weight isotropic components evenly spaced on a circle.
inline GaussianMixture make_ring_mixture(int components, double radius, double component_std) {
  require(components >= 1 && radius >= 0.0 && component_std > 0.0, "ring mixture: invalid parameters");
  GaussianMixture m;
  for (int c = 0; c < components; ++c) {
    const double a = 2.0 * std::numbers::pi * c / components;
    Vec mu(2);
    mu << radius * std::cos(a), radius * std::sin(a);
    m.weights.push_back(1.0 / components);
    m.means.push_back(mu);
    m.covs.push_back(Mat::Identity(2, 2) * component_std * component_std);
  }
  return m;
}

}  // namespace tract
