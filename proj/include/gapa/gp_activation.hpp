#pragma once

// The GAPA layer: a GP activation whose posterior mean is the original
// activation and whose variance comes from conditioning on the K inducing
// inputs nearest to the query pre-activation.

#include <algorithm>
#include <atomic>
#include <memory>
#include <span>
#include <vector>

#include "gapa/activation.hpp"
#include "gapa/inducing.hpp"
#include "gapa/kernel.hpp"
#include "gapa/neighbor_index.hpp"
#include "gapa/network.hpp"
#include "gapa/tensor.hpp"

namespace gapa {

inline constexpr std::size_t kDefaultNeighbors = 50;

/// Counts variances that went negative through round-off and were clamped.
struct ClampCounter {
  std::atomic<std::size_t> count{0};
};

/// Reduction q = rᵀ (R + jitter·I)⁻¹ r of the shared correlation system for
/// a query against `support` rows. Neuron i then has variance c_i² (1 - q).
inline double explained_correlation(const Matrix& support,
                                    std::span<const double> z,
                                    double lengthscale, double jitter) {
  const std::size_t k = support.rows();
  GAPA_REQUIRE(z.size() == support.cols(), ErrorCode::kDimensionMismatch,
          "query width " + dims(z.size(), support.cols()));
  Matrix r(k, k);
  for (std::size_t a = 0; a < k; ++a) {
    r(a, a) = 1.0 + jitter;
    for (std::size_t b = a + 1; b < k; ++b) {
      const double v = rbf_correlation(support.row(a), support.row(b), lengthscale);
      r(a, b) = v;
      r(b, a) = v;
    }
  }
  std::vector<double> rz(k);
  for (std::size_t a = 0; a < k; ++a)
    rz[a] = rbf_correlation(z, support.row(a), lengthscale);
  return Cholesky(r).quadratic_form(rz);
}

/// Per-neuron GP conditional variance given explicit support rows:
/// σ²_i = c_i² − k_iᵀ (K_i + jitter·c_i²·I)⁻¹ k_i, clamped at zero.
inline Vector conditional_variance(const KernelParams& params,
                                   const Matrix& support,
                                   std::span<const double> z,
                                   ClampCounter* clamps = nullptr) {
  const double q =
      explained_correlation(support, z, params.lengthscale, params.jitter);
  Vector var(params.signal_var.size());
  bool clamped = false;
  for (std::size_t i = 0; i < var.size(); ++i) {
    const double v = params.signal_var[i] * (1.0 - q);
    if (v < 0.0) clamped = true;
    var[i] = std::max(v, 0.0);
  }
  if (clamped && clamps != nullptr) clamps->count.fetch_add(1);
  return var;
}

class GapaLayer {
 public:
  GapaLayer(std::size_t layer_index, ActivationTag activation,
            NeighborIndex index, std::size_t k = kDefaultNeighbors,
            Vector aleatoric_var = {})
      : layer_index_(layer_index),
        activation_(activation),
        index_(std::move(index)),
        k_(k),
        aleatoric_(std::move(aleatoric_var)),
        clamps_(std::make_shared<ClampCounter>()) {
    const auto& set = index_.inducing();
    GAPA_REQUIRE(k_ >= 1 && k_ <= set.size(), ErrorCode::kInvalidArgument,
            "K=" + std::to_string(k_) + " must lie in [1, M=" +
                std::to_string(set.size()) + "]");
    GAPA_REQUIRE(set.params.signal_var.size() == set.width(),
            ErrorCode::kDimensionMismatch, "signal variance length");
    set.params.check();
    if (!aleatoric_.empty()) {
      GAPA_REQUIRE(aleatoric_.size() == set.width(), ErrorCode::kDimensionMismatch,
              "aleatoric variance length");
      for (double a : aleatoric_)
        GAPA_REQUIRE(a >= 0.0, ErrorCode::kNegativeVariance,
                "aleatoric variance must be non-negative");
    }
  }

  std::size_t layer_index() const noexcept { return layer_index_; }
  ActivationTag activation() const noexcept { return activation_; }
  std::size_t k() const noexcept { return k_; }
  std::size_t width() const noexcept { return index_.inducing().width(); }
  const NeighborIndex& index() const noexcept { return index_; }
  const InducingSet& inducing() const noexcept { return index_.inducing(); }
  const Vector& aleatoric_var() const noexcept { return aleatoric_; }
  std::size_t clamp_count() const noexcept { return clamps_->count.load(); }

  /// Epistemic variance at pre-activation `z` from the K nearest inducing
  /// inputs. One neighbour query and one Cholesky serve every neuron.
  Vector local_variance(std::span<const double> z) const {
    GAPA_REQUIRE(z.size() == width(), ErrorCode::kDimensionMismatch,
            "pre-activation width " + dims(z.size(), width()));
    const auto nn = index_.query(z, k_);
    Matrix support(nn.size(), width());
    for (std::size_t a = 0; a < nn.size(); ++a) {
      const auto row = inducing().z.row(nn[a].id);
      std::copy(row.begin(), row.end(), support.row(a).begin());
    }
    return conditional_variance(inducing().params, support, z, clamps_.get());
  }

  /// Mean-preserving forward: mean φ(μ), variance = epistemic(μ) +
  /// φ'(μ)²·v_in + aleatoric.
  GaussianVector forward(const GaussianVector& in) const {
    GAPA_REQUIRE(in.size() == width(), ErrorCode::kDimensionMismatch,
            "gapa input width " + dims(in.size(), width()));
    Vector mean = apply_activation(activation_, in.mean());
    Vector var = local_variance(in.mean().span());
    for (std::size_t i = 0; i < var.size(); ++i) {
      const double slope = activation_derivative(activation_, in.mean()[i]);
      var[i] += slope * slope * in.var()[i];
      if (!aleatoric_.empty()) var[i] += aleatoric_[i];
    }
    return GaussianVector(std::move(mean), std::move(var));
  }

 private:
  std::size_t layer_index_;
  ActivationTag activation_;
  NeighborIndex index_;
  std::size_t k_;
  Vector aleatoric_;
  std::shared_ptr<ClampCounter> clamps_;
};

inline Vector local_variance(const GapaLayer& layer, std::span<const double> z) {
  return layer.local_variance(z);
}

inline GaussianVector gapa_forward(const GapaLayer& layer,
                                   const GaussianVector& in) {
  return layer.forward(in);
}

}  // namespace gapa
