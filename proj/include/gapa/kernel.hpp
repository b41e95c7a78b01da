#pragma once

#include <cmath>
#include <span>

#include "gapa/error.hpp"
#include "gapa/tensor.hpp"

namespace gapa {

/// Fixed RBF hyperparameters of one GAPA layer.
///
/// Neuron i uses k_i(z, z') = c_i² exp(-‖z - z'‖² / (2 ℓ²)) with a shared
/// lengthscale ℓ and per-neuron amplitude c_i². The jitter is relative: the
/// conditioning system is K_i + jitter·c_i²·I, so all neurons share one
/// correlation matrix R + jitter·I.
struct KernelParams {
  double lengthscale = 1.0;
  Vector signal_var;
  double jitter = 1e-6;

  void check() const {
    GAPA_REQUIRE(lengthscale > 0.0 && std::isfinite(lengthscale),
            ErrorCode::kInvalidArgument, "lengthscale must be positive");
    GAPA_REQUIRE(jitter > 0.0 && std::isfinite(jitter), ErrorCode::kInvalidArgument,
            "jitter must be positive");
    for (double c2 : signal_var)
      GAPA_REQUIRE(c2 >= 1e-12 && std::isfinite(c2), ErrorCode::kInvalidArgument,
              "signal variance below 1e-12");
  }
};

/// Shared RBF correlation exp(-‖a - b‖² / (2 ℓ²)).
inline double rbf_correlation(std::span<const double> a,
                              std::span<const double> b, double lengthscale) {
  return std::exp(-squared_distance(a, b) / (2.0 * lengthscale * lengthscale));
}

inline double rbf_correlation_sq(double squared_dist, double lengthscale) {
  return std::exp(-squared_dist / (2.0 * lengthscale * lengthscale));
}

}  // namespace gapa
