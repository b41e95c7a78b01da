#pragma once

// Declarative description of a frozen backbone and its deterministic forward
// pass. The layer-application helpers here are the single source of truth for
// the mean path: variance propagation calls the same functions so the GAPA
// mean is bit-identical to the backbone output.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <variant>
#include <vector>

#include "gapa/activation.hpp"
#include "gapa/error.hpp"
#include "gapa/tensor.hpp"

namespace gapa {

struct LinearLayer {
  Matrix weight;  // out × in
  Vector bias;    // out
};

struct ActivationLayer {
  ActivationTag fn = ActivationTag::kIdentity;
};

struct RMSNormLayer {
  Vector gamma;
  double eps = 1e-6;
};

/// Multi-head self-attention. q/k/v projections map d_model -> d_attn, the
/// output projection maps d_attn -> d_out. Head dimension is d_attn / heads.
struct SelfAttentionLayer {
  Matrix wq;
  Matrix wk;
  Matrix wv;
  Matrix wo;
  std::size_t heads = 1;
  bool causal = true;

  std::size_t d_model() const { return wq.cols(); }
  std::size_t d_attn() const { return wq.rows(); }
  std::size_t head_dim() const { return wq.rows() / heads; }
};

/// Marks the output as class logits. The forward pass leaves logits untouched;
/// probabilities are produced by the predictive heads.
struct SoftmaxHeadLayer {};

using LayerSpec = std::variant<LinearLayer, ActivationLayer, RMSNormLayer,
                               SelfAttentionLayer, SoftmaxHeadLayer>;

enum class Task { kRegression, kClassification, kTokenLM };

inline std::string_view task_name(Task t) {
  switch (t) {
    case Task::kRegression: return "regression";
    case Task::kClassification: return "classification";
    case Task::kTokenLM: return "token_lm";
  }
  return "regression";
}

inline Task parse_task(std::string_view s) {
  if (s == "regression") return Task::kRegression;
  if (s == "classification") return Task::kClassification;
  if (s == "token_lm") return Task::kTokenLM;
  fail(ErrorCode::kInvalidArgument, "unknown task '" + std::string(s) + "'");
}

using Sequence = std::vector<Vector>;

struct NetworkSpec {
  std::size_t input_width = 0;
  std::vector<LayerSpec> layers;
  std::set<std::size_t> gapa_points;
  Task task = Task::kClassification;
};

/// Width produced by `layer` given the incoming width; throws on
/// non-conforming shapes.
inline std::size_t layer_output_width(const LayerSpec& layer,
                                      std::size_t in_width,
                                      std::size_t index) {
  const std::string where = "layer " + std::to_string(index) + ": ";
  return std::visit(
      [&](const auto& l) -> std::size_t {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, LinearLayer>) {
          GAPA_REQUIRE(l.weight.cols() == in_width, ErrorCode::kDimensionMismatch,
                  where + "linear input width " +
                      dims(l.weight.cols(), in_width));
          GAPA_REQUIRE(l.bias.size() == l.weight.rows(),
                  ErrorCode::kDimensionMismatch,
                  where + "bias length " +
                      dims(l.bias.size(), l.weight.rows()));
          return l.weight.rows();
        } else if constexpr (std::is_same_v<T, RMSNormLayer>) {
          GAPA_REQUIRE(l.gamma.size() == in_width, ErrorCode::kDimensionMismatch,
                  where + "rmsnorm width " + dims(l.gamma.size(), in_width));
          GAPA_REQUIRE(l.eps > 0.0, ErrorCode::kInvalidArgument,
                  where + "rmsnorm eps must be positive");
          return in_width;
        } else if constexpr (std::is_same_v<T, SelfAttentionLayer>) {
          GAPA_REQUIRE(l.heads > 0, ErrorCode::kInvalidArgument,
                  where + "attention needs at least one head");
          GAPA_REQUIRE(l.wq.cols() == in_width && l.wk.cols() == in_width &&
                      l.wv.cols() == in_width,
                  ErrorCode::kDimensionMismatch,
                  where + "attention projections must read width " +
                      std::to_string(in_width));
          GAPA_REQUIRE(l.wk.rows() == l.wq.rows() && l.wv.rows() == l.wq.rows(),
                  ErrorCode::kDimensionMismatch,
                  where + "q/k/v projection widths differ");
          GAPA_REQUIRE(l.wq.rows() % l.heads == 0, ErrorCode::kDimensionMismatch,
                  where + "projection width not divisible by heads");
          GAPA_REQUIRE(l.wo.cols() == l.wq.rows(), ErrorCode::kDimensionMismatch,
                  where + "output projection input " +
                      dims(l.wo.cols(), l.wq.rows()));
          return l.wo.rows();
        } else {
          return in_width;
        }
      },
      layer);
}

/// Checks shapes and the GAPA attachment invariant. Returns the output width.
inline std::size_t validate(const NetworkSpec& net) {
  GAPA_REQUIRE(net.input_width > 0, ErrorCode::kInvalidArgument,
          "network input width must be positive");
  std::size_t width = net.input_width;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    width = layer_output_width(net.layers[i], width, i);
    if (std::holds_alternative<SoftmaxHeadLayer>(net.layers[i])) {
      GAPA_REQUIRE(i + 1 == net.layers.size(), ErrorCode::kInvalidArgument,
              "softmax head must be the last layer");
    }
  }
  for (std::size_t p : net.gapa_points) {
    GAPA_REQUIRE(p < net.layers.size() &&
                std::holds_alternative<ActivationLayer>(net.layers[p]),
            ErrorCode::kInvalidArgument,
            "gapa point " + std::to_string(p) +
                " does not index an activation layer");
  }
  return width;
}

/// Width entering layer `index` (the pre-activation width for activations).
inline std::size_t width_before(const NetworkSpec& net, std::size_t index) {
  std::size_t width = net.input_width;
  for (std::size_t i = 0; i < index && i < net.layers.size(); ++i)
    width = layer_output_width(net.layers[i], width, i);
  return width;
}

// ---------------------------------------------------------------------------
// Mean-path primitives.

inline Vector apply_linear(const LinearLayer& l, const Vector& x) {
  Vector y = matvec(l.weight, x);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += l.bias[i];
  return y;
}

inline Vector apply_activation(ActivationTag fn, const Vector& z) {
  Vector h(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) h[i] = activation_value(fn, z[i]);
  return h;
}

inline double rms_inverse(const Vector& x, double eps) {
  double ms = 0.0;
  for (double v : x) ms += v * v;
  ms /= static_cast<double>(x.size());
  return 1.0 / std::sqrt(ms + eps);
}

inline Vector apply_rmsnorm(const RMSNormLayer& l, const Vector& x) {
  GAPA_REQUIRE(x.size() == l.gamma.size(), ErrorCode::kDimensionMismatch,
          "rmsnorm " + dims(x.size(), l.gamma.size()));
  const double inv = rms_inverse(x, l.eps);
  Vector y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * inv * l.gamma[i];
  return y;
}

/// Numerically stable softmax.
inline std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> p(logits.size());
  if (logits.empty()) return p;
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

/// Per-head q/k/v projections of a sequence plus the attention weights
/// computed on them. Shared by the deterministic pass and both variance
/// propagation variants.
struct AttentionState {
  Sequence q, k, v;
  // weights[h][t] holds a_{t,s} for s in [0, T) (zero where masked).
  std::vector<std::vector<std::vector<double>>> weights;
};

inline AttentionState attention_state(const SelfAttentionLayer& l,
                                      const Sequence& x) {
  AttentionState st;
  const std::size_t seq_len = x.size();
  st.q.reserve(seq_len);
  st.k.reserve(seq_len);
  st.v.reserve(seq_len);
  for (const auto& xt : x) {
    st.q.push_back(matvec(l.wq, xt));
    st.k.push_back(matvec(l.wk, xt));
    st.v.push_back(matvec(l.wv, xt));
  }
  const std::size_t dk = l.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  st.weights.assign(l.heads, std::vector<std::vector<double>>(
                                 seq_len, std::vector<double>(seq_len, 0.0)));
  for (std::size_t h = 0; h < l.heads; ++h) {
    const std::size_t off = h * dk;
    for (std::size_t t = 0; t < seq_len; ++t) {
      const std::size_t visible = l.causal ? t + 1 : seq_len;
      std::vector<double> e(visible);
      for (std::size_t s = 0; s < visible; ++s) {
        double acc = 0.0;
        for (std::size_t j = 0; j < dk; ++j)
          acc += st.q[t][off + j] * st.k[s][off + j];
        e[s] = acc * scale;
      }
      const auto a = softmax(e);
      for (std::size_t s = 0; s < visible; ++s) st.weights[h][t][s] = a[s];
    }
  }
  return st;
}

/// Concatenated head outputs y_t (before the output projection).
inline Sequence attention_mix(const SelfAttentionLayer& l,
                              const AttentionState& st) {
  const std::size_t seq_len = st.v.size();
  const std::size_t dk = l.head_dim();
  Sequence y(seq_len, Vector(l.d_attn(), 0.0));
  for (std::size_t h = 0; h < l.heads; ++h) {
    const std::size_t off = h * dk;
    for (std::size_t t = 0; t < seq_len; ++t) {
      for (std::size_t s = 0; s < seq_len; ++s) {
        const double a = st.weights[h][t][s];
        if (a == 0.0) continue;
        for (std::size_t j = 0; j < dk; ++j) y[t][off + j] += a * st.v[s][off + j];
      }
    }
  }
  return y;
}

inline Sequence apply_attention(const SelfAttentionLayer& l, const Sequence& x) {
  const auto st = attention_state(l, x);
  auto y = attention_mix(l, st);
  for (auto& yt : y) yt = matvec(l.wo, yt);
  return y;
}

/// Applies one layer to a whole sequence (position-wise for everything but
/// attention).
inline Sequence apply_layer(const LayerSpec& layer, const Sequence& x) {
  return std::visit(
      [&](const auto& l) -> Sequence {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, SelfAttentionLayer>) {
          return apply_attention(l, x);
        } else if constexpr (std::is_same_v<T, SoftmaxHeadLayer>) {
          return x;
        } else {
          Sequence out;
          out.reserve(x.size());
          for (const auto& xt : x) {
            if constexpr (std::is_same_v<T, LinearLayer>) {
              out.push_back(apply_linear(l, xt));
            } else if constexpr (std::is_same_v<T, ActivationLayer>) {
              out.push_back(apply_activation(l.fn, xt));
            } else {
              out.push_back(apply_rmsnorm(l, xt));
            }
          }
          return out;
        }
      },
      layer);
}

inline void check_input(const NetworkSpec& net, const Sequence& x) {
  GAPA_REQUIRE(!x.empty(), ErrorCode::kDimensionMismatch, "empty input sequence");
  for (const auto& xt : x) {
    GAPA_REQUIRE(xt.size() == net.input_width, ErrorCode::kDimensionMismatch,
            "input width " + dims(xt.size(), net.input_width));
  }
}

/// Runs layers [0, stop) and returns the per-position state entering `stop`.
inline Sequence forward_until(const NetworkSpec& net, Sequence x,
                              std::size_t stop) {
  check_input(net, x);
  for (std::size_t i = 0; i < stop && i < net.layers.size(); ++i)
    x = apply_layer(net.layers[i], x);
  return x;
}

inline Sequence forward_sequence(const NetworkSpec& net, Sequence x) {
  return forward_until(net, std::move(x), net.layers.size());
}

/// Canonical point prediction: logits or regression mean. For sequence input
/// the output at the last position is returned.
inline Vector forward_deterministic(const NetworkSpec& net, const Sequence& x) {
  return forward_sequence(net, x).back();
}

inline Vector forward_deterministic(const NetworkSpec& net, const Vector& x) {
  return forward_deterministic(net, Sequence{x});
}

}  // namespace gapa
