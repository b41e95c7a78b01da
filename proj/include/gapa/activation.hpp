#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <string_view>

#include "gapa/error.hpp"

namespace gapa {

enum class ActivationTag { kReLU, kTanh, kSiLU, kIdentity };

inline double logistic(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline double activation_value(ActivationTag tag, double z) {
  switch (tag) {
    case ActivationTag::kReLU: return z > 0.0 ? z : 0.0;
    case ActivationTag::kTanh: return std::tanh(z);
    case ActivationTag::kSiLU: return z * logistic(z);
    case ActivationTag::kIdentity: return z;
  }
  return z;
}

/// Exact analytic derivative g'(z). ReLU uses g'(0) = 0.
inline double activation_derivative(ActivationTag tag, double z) {
  switch (tag) {
    case ActivationTag::kReLU: return z > 0.0 ? 1.0 : 0.0;
    case ActivationTag::kTanh: {
      const double t = std::tanh(z);
      return 1.0 - t * t;
    }
    case ActivationTag::kSiLU: {
      const double s = logistic(z);
      return s * (1.0 + z * (1.0 - s));
    }
    case ActivationTag::kIdentity: return 1.0;
  }
  return 1.0;
}

inline std::string_view activation_name(ActivationTag tag) {
  switch (tag) {
    case ActivationTag::kReLU: return "relu";
    case ActivationTag::kTanh: return "tanh";
    case ActivationTag::kSiLU: return "silu";
    case ActivationTag::kIdentity: return "identity";
  }
  return "identity";
}

inline ActivationTag parse_activation(std::string_view name) {
  if (name == "relu") return ActivationTag::kReLU;
  if (name == "tanh") return ActivationTag::kTanh;
  if (name == "silu") return ActivationTag::kSiLU;
  if (name == "identity") return ActivationTag::kIdentity;
  fail(ErrorCode::kInvalidArgument,
       "unknown activation '" + std::string(name) + "'");
}

}  // namespace gapa
