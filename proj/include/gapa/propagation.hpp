#pragma once

// Moment propagation of diagonal Gaussian states through frozen layers.
// Means always follow the deterministic forward pass (the same mean-path
// helpers as network.hpp); only variances are new.

#include <cmath>
#include <map>
#include <memory>
#include <type_traits>
#include <utility>
#include <variant>
#include <vector>

#include "gapa/gp_activation.hpp"
#include "gapa/network.hpp"
#include "gapa/tensor.hpp"

namespace gapa {

using GaussianSequence = std::vector<GaussianVector>;

enum class AttentionVariant { kA, kB };

inline GaussianVector propagate_linear(const Matrix& w, const Vector& b,
                                       const GaussianVector& in) {
  GAPA_REQUIRE(w.cols() == in.size() && b.size() == w.rows(),
          ErrorCode::kDimensionMismatch,
          "linear propagation " + dims(w.cols(), in.size()));
  Vector mean = apply_linear(LinearLayer{w, b}, in.mean());
  Vector var(w.rows());
  for (std::size_t r = 0; r < w.rows(); ++r) {
    const auto row = w.row(r);
    double s = 0.0;
    for (std::size_t c = 0; c < row.size(); ++c) s += row[c] * row[c] * in.var()[c];
    var[r] = s;
  }
  return GaussianVector(std::move(mean), std::move(var));
}

/// Linear propagation without bias and without copying the layer.
inline GaussianVector propagate_projection(const Matrix& w,
                                           const GaussianVector& in) {
  GAPA_REQUIRE(w.cols() == in.size(), ErrorCode::kDimensionMismatch,
          "projection " + dims(w.cols(), in.size()));
  Vector mean = matvec(w, in.mean());
  Vector var(w.rows());
  for (std::size_t r = 0; r < w.rows(); ++r) {
    const auto row = w.row(r);
    double s = 0.0;
    for (std::size_t c = 0; c < row.size(); ++c) s += row[c] * row[c] * in.var()[c];
    var[r] = s;
  }
  return GaussianVector(std::move(mean), std::move(var));
}

/// Delta method: mean g(μ), variance g'(μ)²·v.
inline GaussianVector propagate_elementwise(ActivationTag tag,
                                            const GaussianVector& in) {
  Vector mean = apply_activation(tag, in.mean());
  Vector var(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    const double g = activation_derivative(tag, in.mean()[i]);
    var[i] = g * g * in.var()[i];
  }
  return GaussianVector(std::move(mean), std::move(var));
}

/// RMSNorm with the normaliser treated as deterministic:
/// s² = mean(μ²) + mean(v) + eps, var_out = γ² v / s². The mean uses the
/// ordinary RMSNorm of μ.
inline GaussianVector propagate_rmsnorm(const Vector& gamma, double eps,
                                        const GaussianVector& in) {
  GAPA_REQUIRE(gamma.size() == in.size(), ErrorCode::kDimensionMismatch,
          "rmsnorm " + dims(gamma.size(), in.size()));
  GAPA_REQUIRE(eps > 0.0, ErrorCode::kInvalidArgument, "rmsnorm eps must be positive");
  RMSNormLayer layer{gamma, eps};
  Vector mean = apply_rmsnorm(layer, in.mean());
  const double d = static_cast<double>(in.size());
  double mean_sq = 0.0, mean_var = 0.0;
  for (std::size_t i = 0; i < in.size(); ++i) {
    mean_sq += in.mean()[i] * in.mean()[i];
    mean_var += in.var()[i];
  }
  const double s2 = mean_sq / d + mean_var / d + eps;
  Vector var(in.size());
  for (std::size_t i = 0; i < in.size(); ++i)
    var[i] = in.var()[i] / s2 * gamma[i] * gamma[i];
  return GaussianVector(std::move(mean), std::move(var));
}

/// Delta-method variance of softmax outputs s given logit variances v:
/// Var(s_k) = s_k² [(1 - s_k)² v_k + Σ_{i≠k} s_i² v_i].
inline Vector propagate_softmax_var(std::span<const double> s,
                                    std::span<const double> v) {
  GAPA_REQUIRE(s.size() == v.size(), ErrorCode::kDimensionMismatch,
          "softmax variance " + dims(s.size(), v.size()));
  double total = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) total += s[i] * s[i] * v[i];
  Vector out(s.size());
  for (std::size_t k = 0; k < s.size(); ++k) {
    const double others = total - s[k] * s[k] * v[k];
    const double one_minus = 1.0 - s[k];
    out[k] = s[k] * s[k] * (one_minus * one_minus * v[k] + std::max(others, 0.0));
  }
  return out;
}

/// Residual sum of two independent branches: means and variances add.
inline GaussianVector propagate_residual(const GaussianVector& a,
                                         const GaussianVector& b) {
  return GaussianVector(add(a.mean(), b.mean()), add(a.var(), b.var()));
}

namespace detail {

inline Sequence means_of(const GaussianSequence& x) {
  Sequence m;
  m.reserve(x.size());
  for (const auto& g : x) m.push_back(g.mean());
  return m;
}

/// Per-position projection variances (W ⊙ W) v.
inline std::vector<Vector> projected_var(const Matrix& w,
                                         const GaussianSequence& x) {
  const Matrix w2 = squared(w);
  std::vector<Vector> out;
  out.reserve(x.size());
  for (const auto& g : x) out.push_back(matvec(w2, g.var()));
  return out;
}

inline void check_sequence(const GaussianSequence& x, std::size_t width) {
  GAPA_REQUIRE(!x.empty(), ErrorCode::kDimensionMismatch, "empty sequence");
  for (const auto& g : x)
    GAPA_REQUIRE(g.size() == width, ErrorCode::kDimensionMismatch,
            "sequence width " + dims(g.size(), width));
}

/// Shared tail of both variants: head outputs (mean, var) then Wo.
inline GaussianSequence finish_attention(const SelfAttentionLayer& l,
                                         const AttentionState& st,
                                         const std::vector<Vector>& head_var) {
  const auto y_mean = attention_mix(l, st);
  GaussianSequence out;
  out.reserve(y_mean.size());
  for (std::size_t t = 0; t < y_mean.size(); ++t) {
    GaussianVector y(y_mean[t], head_var[t]);
    out.push_back(propagate_projection(l.wo, y));
  }
  return out;
}

}  // namespace detail

/// Variant A: attention weights are deterministic,
/// Var(y_{t,i}) = Σ_s a_ts² Var(v_{s,i}).
inline GaussianSequence propagate_attention_a(const SelfAttentionLayer& l,
                                              const GaussianSequence& in) {
  detail::check_sequence(in, l.d_model());
  const auto st = attention_state(l, detail::means_of(in));
  const auto var_v = detail::projected_var(l.wv, in);
  const std::size_t seq_len = in.size();
  const std::size_t dk = l.head_dim();
  std::vector<Vector> head_var(seq_len, Vector(l.d_attn(), 0.0));
  for (std::size_t h = 0; h < l.heads; ++h) {
    const std::size_t off = h * dk;
    for (std::size_t t = 0; t < seq_len; ++t)
      for (std::size_t s = 0; s < seq_len; ++s) {
        const double a = st.weights[h][t][s];
        if (a == 0.0) continue;
        for (std::size_t j = 0; j < dk; ++j)
          head_var[t][off + j] += a * a * var_v[s][off + j];
      }
  }
  return detail::finish_attention(l, st, head_var);
}

/// Variant B: logit variances by the delta method, pushed through the
/// (masked) softmax, then
/// Var(y_{t,i}) = Σ_s [Var(a_ts) μ_v² + a_ts² Var(v) + Var(a_ts) Var(v)].
inline GaussianSequence propagate_attention_b(const SelfAttentionLayer& l,
                                              const GaussianSequence& in) {
  detail::check_sequence(in, l.d_model());
  const auto st = attention_state(l, detail::means_of(in));
  const auto var_q = detail::projected_var(l.wq, in);
  const auto var_k = detail::projected_var(l.wk, in);
  const auto var_v = detail::projected_var(l.wv, in);
  const std::size_t seq_len = in.size();
  const std::size_t dk = l.head_dim();
  std::vector<Vector> head_var(seq_len, Vector(l.d_attn(), 0.0));
  for (std::size_t h = 0; h < l.heads; ++h) {
    const std::size_t off = h * dk;
    for (std::size_t t = 0; t < seq_len; ++t) {
      const std::size_t visible = l.causal ? t + 1 : seq_len;
      std::vector<double> e_var(visible), a(visible);
      for (std::size_t s = 0; s < visible; ++s) {
        double acc = 0.0;
        for (std::size_t j = 0; j < dk; ++j) {
          const double q = st.q[t][off + j], k = st.k[s][off + j];
          const double vq = var_q[t][off + j], vk = var_k[s][off + j];
          acc += q * q * vk + k * k * vq + vq * vk;
        }
        e_var[s] = acc / static_cast<double>(dk);
        a[s] = st.weights[h][t][s];
      }
      const Vector a_var = propagate_softmax_var(a, e_var);
      for (std::size_t s = 0; s < visible; ++s) {
        for (std::size_t j = 0; j < dk; ++j) {
          const double mv = st.v[s][off + j];
          const double vv = var_v[s][off + j];
          head_var[t][off + j] +=
              a_var[s] * mv * mv + a[s] * a[s] * vv + a_var[s] * vv;
        }
      }
    }
  }
  return detail::finish_attention(l, st, head_var);
}

// ---------------------------------------------------------------------------
// Whole-network propagation.

/// A frozen backbone with GAPA layers attached at its gapa points.
struct GapaNetwork {
  NetworkSpec net;
  std::map<std::size_t, GapaLayer> gapa;
  AttentionVariant variant = AttentionVariant::kA;

  void check() const {
    validate(net);
    for (std::size_t p : net.gapa_points)
      GAPA_REQUIRE(gapa.count(p) == 1, ErrorCode::kMissingArtifact,
              "no GAPA layer attached at gapa point " + std::to_string(p));
    for (const auto& [idx, layer] : gapa) {
      GAPA_REQUIRE(net.gapa_points.count(idx) == 1, ErrorCode::kInvalidArgument,
              "GAPA layer attached at non-gapa layer " + std::to_string(idx));
      const auto& act = std::get<ActivationLayer>(net.layers[idx]);
      GAPA_REQUIRE(act.fn == layer.activation(), ErrorCode::kInvalidArgument,
              "GAPA activation differs from the backbone at layer " +
                  std::to_string(idx));
      GAPA_REQUIRE(layer.width() == width_before(net, idx),
              ErrorCode::kDimensionMismatch,
              "GAPA width at layer " + std::to_string(idx));
    }
  }
};

inline GaussianSequence propagate_layer(const GapaNetwork& g, std::size_t index,
                                        const GaussianSequence& x) {
  const LayerSpec& layer = g.net.layers[index];
  if (auto it = g.gapa.find(index); it != g.gapa.end()) {
    GaussianSequence out;
    out.reserve(x.size());
    for (const auto& xt : x) out.push_back(it->second.forward(xt));
    return out;
  }
  return std::visit(
      [&](const auto& l) -> GaussianSequence {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, SelfAttentionLayer>) {
          return g.variant == AttentionVariant::kA ? propagate_attention_a(l, x)
                                                   : propagate_attention_b(l, x);
        } else if constexpr (std::is_same_v<T, SoftmaxHeadLayer>) {
          return x;
        } else {
          GaussianSequence out;
          out.reserve(x.size());
          for (const auto& xt : x) {
            if constexpr (std::is_same_v<T, LinearLayer>) {
              out.push_back(propagate_linear(l.weight, l.bias, xt));
            } else if constexpr (std::is_same_v<T, ActivationLayer>) {
              out.push_back(propagate_elementwise(l.fn, xt));
            } else {
              out.push_back(propagate_rmsnorm(l.gamma, l.eps, xt));
            }
          }
          return out;
        }
      },
      layer);
}

/// Propagates a deterministic input (zero variance) through every layer and
/// returns the per-position output states.
inline GaussianSequence propagate_sequence(const GapaNetwork& g,
                                           const Sequence& x) {
  check_input(g.net, x);
  GaussianSequence state;
  state.reserve(x.size());
  for (const auto& xt : x) state.push_back(GaussianVector::point(xt));
  for (std::size_t i = 0; i < g.net.layers.size(); ++i)
    state = propagate_layer(g, i, state);
  return state;
}

/// Output mean and variance at the last position.
inline GaussianVector propagate_network(const GapaNetwork& g, const Sequence& x) {
  return propagate_sequence(g, x).back();
}

inline GaussianVector propagate_network(const GapaNetwork& g, const Vector& x) {
  return propagate_network(g, Sequence{x});
}

}  // namespace gapa
