#pragma once

// Output heads: Laplace bridge, logit-space Monte-Carlo entropy
// decomposition, and the heteroscedastic regression noise head.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "gapa/error.hpp"
#include "gapa/io.hpp"
#include "gapa/network.hpp"
#include "gapa/random.hpp"
#include "gapa/tensor.hpp"

namespace gapa {

/// p_c = softmax_c(μ_c / √(1 + π v_c / 8)).
inline Vector laplace_bridge(const Vector& mu, const Vector& v) {
  GAPA_REQUIRE(mu.size() == v.size(), ErrorCode::kDimensionMismatch,
          "laplace bridge " + dims(mu.size(), v.size()));
  std::vector<double> scaled(mu.size());
  for (std::size_t c = 0; c < mu.size(); ++c) {
    GAPA_REQUIRE(v[c] >= 0.0, ErrorCode::kNegativeVariance, "negative logit variance");
    scaled[c] = mu[c] / std::sqrt(1.0 + std::numbers::pi / 8.0 * v[c]);
  }
  return Vector(softmax(scaled));
}

inline double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double x : p)
    if (x > 0.0) h -= x * std::log(x);
  return h;
}

struct UncertaintyDecomposition {
  double total = 0.0;
  double aleatoric = 0.0;
  double epistemic = 0.0;
};

struct McDecomposition {
  UncertaintyDecomposition u;
  Vector mean_probs;                // over the kept top_k classes
  std::vector<std::size_t> classes;  // vocabulary ids of the kept classes
  double epistemic_se = 0.0;
};

inline constexpr std::size_t kDefaultSamples = 512;
inline constexpr std::size_t kDefaultTopK = 512;

/// Samples ℓ = μ + √v ⊙ ε over the top_k logits (by mean), then
/// TU = H(p̄), AU = mean H(p_s), EU = TU - AU. EU equals the average of
/// KL(p_s ‖ p̄), which gives its standard error.
inline McDecomposition mc_entropy_decomposition(const Vector& mu, const Vector& v,
                                                std::size_t samples,
                                                std::size_t top_k,
                                                std::uint64_t seed) {
  GAPA_REQUIRE(mu.size() == v.size() && !mu.empty(), ErrorCode::kDimensionMismatch,
          "mc decomposition " + dims(mu.size(), v.size()));
  GAPA_REQUIRE(samples >= 1 && top_k >= 1, ErrorCode::kInvalidArgument,
          "samples and top_k must be positive");
  for (double x : v)
    GAPA_REQUIRE(x >= 0.0, ErrorCode::kNegativeVariance, "negative logit variance");

  const std::size_t k = std::min(top_k, mu.size());
  std::vector<std::size_t> order(mu.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return mu[a] > mu[b]; });
  order.resize(k);

  std::vector<double> m(k), sd(k);
  for (std::size_t j = 0; j < k; ++j) {
    m[j] = mu[order[j]];
    sd[j] = std::sqrt(v[order[j]]);
  }

  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<double>> probs(samples);
  std::vector<double> logits(k);
  Vector pbar(k, 0.0);
  double au = 0.0;
  for (std::size_t s = 0; s < samples; ++s) {
    for (std::size_t j = 0; j < k; ++j) logits[j] = m[j] + sd[j] * normal(rng);
    probs[s] = softmax(logits);
    au += entropy(probs[s]);
    for (std::size_t j = 0; j < k; ++j) pbar[j] += probs[s][j];
  }
  const double n = static_cast<double>(samples);
  au /= n;
  for (double& p : pbar) p /= n;

  McDecomposition out;
  out.u.total = entropy(pbar.span());
  out.u.aleatoric = au;
  out.u.epistemic = out.u.total - out.u.aleatoric;

  if (samples > 1) {
    double mean = 0.0, m2 = 0.0;
    for (std::size_t s = 0; s < samples; ++s) {
      double kl = 0.0;
      for (std::size_t j = 0; j < k; ++j)
        if (probs[s][j] > 0.0) kl += probs[s][j] * std::log(probs[s][j] / pbar[j]);
      const double delta = kl - mean;
      mean += delta / static_cast<double>(s + 1);
      m2 += delta * (kl - mean);
    }
    out.epistemic_se = std::sqrt(m2 / (n - 1.0) / n);
  }
  out.mean_probs = std::move(pbar);
  out.classes = std::move(order);
  return out;
}

/// Mutual information between the sampled categorical and the logits.
inline double bald_score(const Vector& mu, const Vector& v,
                         std::size_t samples = kDefaultSamples,
                         std::uint64_t seed = 0,
                         std::size_t top_k = kDefaultTopK) {
  return mc_entropy_decomposition(mu, v, samples, top_k, seed).u.epistemic;
}

// ---------------------------------------------------------------------------
// Noise head.

inline double softplus(double s) {
  return s > 30.0 ? s : std::log1p(std::exp(s));
}

/// s(x) = w·h(x) + b, where h is the identity (linear head) or
/// tanh(W₁x + b₁). Predicted aleatoric variance softplus(s) + floor.
struct NoiseHead {
  Matrix hidden_w;  // empty for the linear head
  Vector hidden_b;
  Vector w;
  double b = 0.0;
  double floor = 1e-6;

  bool has_hidden() const noexcept { return hidden_w.rows() > 0; }
  std::size_t input_width() const noexcept {
    return has_hidden() ? hidden_w.cols() : w.size();
  }

  Vector hidden(std::span<const double> x) const {
    if (!has_hidden()) return Vector(x);
    Vector h(hidden_w.rows());
    for (std::size_t j = 0; j < h.size(); ++j)
      h[j] = std::tanh(dot(hidden_w.row(j), x) + hidden_b[j]);
    return h;
  }

  double raw(std::span<const double> x) const {
    GAPA_REQUIRE(x.size() == input_width(), ErrorCode::kDimensionMismatch,
            "noise head input " + dims(x.size(), input_width()));
    return dot(w.span(), hidden(x).span()) + b;
  }

  double variance(std::span<const double> x) const {
    return softplus(raw(x)) + floor;
  }

  std::size_t param_count() const {
    return hidden_w.values().size() + hidden_b.size() + w.size() + 1;
  }

  std::vector<double> params() const {
    std::vector<double> p(hidden_w.values());
    p.insert(p.end(), hidden_b.begin(), hidden_b.end());
    p.insert(p.end(), w.begin(), w.end());
    p.push_back(b);
    return p;
  }

  void set_params(std::span<const double> p) {
    GAPA_REQUIRE(p.size() == param_count(), ErrorCode::kDimensionMismatch,
            "noise head parameters " + dims(p.size(), param_count()));
    std::size_t at = 0;
    std::copy_n(p.begin(), hidden_w.values().size(), hidden_w.data());
    at += hidden_w.values().size();
    std::copy_n(p.begin() + at, hidden_b.size(), hidden_b.begin());
    at += hidden_b.size();
    std::copy_n(p.begin() + at, w.size(), w.begin());
    at += w.size();
    b = p[at];
  }
};

struct NoiseHeadConfig {
  std::size_t epochs = 2000;
  double lr = 0.05;
  std::size_t hidden = 0;  // 0 = linear head, else tanh hidden width (e.g. 32)
  std::uint64_t seed = 0;
};

struct NoiseProblem {
  const Matrix& features;
  const Vector& targets;
  const Vector& means;
  const Vector& epi_var;

  void check() const {
    const std::size_t n = features.rows();
    GAPA_REQUIRE(n > 0, ErrorCode::kTooFewRows, "noise head needs data");
    GAPA_REQUIRE(targets.size() == n && means.size() == n && epi_var.size() == n,
            ErrorCode::kDimensionMismatch, "noise head row counts");
    for (double e : epi_var)
      GAPA_REQUIRE(e >= 0.0, ErrorCode::kNegativeVariance, "negative epistemic variance");
  }
};

/// (1/N) Σ [(y-μ)²/(2σ²_tot) + ½ log(2πσ²_tot)], σ²_tot = epi + ale(x).
inline double noise_head_loss(const NoiseHead& head, const NoiseProblem& p) {
  const std::size_t n = p.features.rows();
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double s2 = p.epi_var[i] + head.variance(p.features.row(i));
    const double r = p.targets[i] - p.means[i];
    loss += r * r / (2.0 * s2) + 0.5 * std::log(2.0 * std::numbers::pi * s2);
  }
  return loss / static_cast<double>(n);
}

/// Analytic gradient of noise_head_loss in params() order.
inline std::vector<double> noise_head_gradient(const NoiseHead& head,
                                               const NoiseProblem& p) {
  const std::size_t n = p.features.rows();
  const std::size_t hw = head.hidden_w.rows();
  const std::size_t d = head.input_width();
  std::vector<double> g(head.param_count(), 0.0);
  const std::size_t w_at = hw * d + hw;
  for (std::size_t i = 0; i < n; ++i) {
    const auto x = p.features.row(i);
    const Vector h = head.hidden(x);
    const double s = dot(head.w.span(), h.span()) + head.b;
    const double s2 = p.epi_var[i] + softplus(s) + head.floor;
    const double r = p.targets[i] - p.means[i];
    const double sig = logistic(s);
    const double ds = (0.5 / s2 - r * r / (2.0 * s2 * s2)) * sig;
    for (std::size_t j = 0; j < h.size(); ++j) g[w_at + j] += ds * h[j];
    g[w_at + h.size()] += ds;
    for (std::size_t j = 0; j < hw; ++j) {
      const double dz = ds * head.w[j] * (1.0 - h[j] * h[j]);
      for (std::size_t c = 0; c < d; ++c) g[j * d + c] += dz * x[c];
      g[hw * d + j] += dz;
    }
  }
  for (double& v : g) v /= static_cast<double>(n);
  return g;
}

inline NoiseHead init_noise_head(std::size_t width, const NoiseHeadConfig& cfg) {
  NoiseHead head;
  Rng rng(cfg.seed);
  if (cfg.hidden > 0) {
    std::normal_distribution<double> n1(0.0, 1.0 / std::sqrt(double(width)));
    head.hidden_w = Matrix(cfg.hidden, width);
    for (std::size_t j = 0; j < cfg.hidden; ++j)
      for (double& v : head.hidden_w.row(j)) v = n1(rng);
    head.hidden_b = Vector(cfg.hidden, 0.0);
    head.w = Vector(cfg.hidden, 0.0);
  } else {
    head.w = Vector(width, 0.0);
  }
  std::normal_distribution<double> n2(0.0, 0.01);
  for (double& v : head.w) v = n2(rng);
  return head;
}

/// Plain gradient descent on the noise-head loss with the backbone means and
/// epistemic variances held fixed. Returns the lowest-loss iterate.
inline NoiseHead fit_noise_head(const Matrix& features, const Vector& targets,
                                const Vector& means, const Vector& epi_var,
                                const NoiseHeadConfig& cfg = {},
                                std::vector<double>* history = nullptr) {
  const NoiseProblem prob{features, targets, means, epi_var};
  prob.check();
  GAPA_REQUIRE(cfg.lr > 0.0, ErrorCode::kInvalidArgument, "learning rate must be positive");
  NoiseHead head = init_noise_head(features.cols(), cfg);
  NoiseHead best = head;
  double best_loss = noise_head_loss(head, prob);
  if (history) history->assign(1, best_loss);
  std::vector<double> theta = head.params();
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const auto g = noise_head_gradient(head, prob);
    for (std::size_t j = 0; j < theta.size(); ++j) theta[j] -= cfg.lr * g[j];
    head.set_params(theta);
    const double loss = noise_head_loss(head, prob);
    if (!std::isfinite(loss))
      fail(ErrorCode::kNonFiniteLoss,
           "noise head loss diverged at epoch " + std::to_string(e) +
               "; lower the learning rate");
    if (history) history->push_back(loss);
    if (loss < best_loss) {
      best_loss = loss;
      best = head;
    }
  }
  return best;
}

inline void encode_noise_head(ByteWriter& w, const NoiseHead& head) {
  w.put_string("GAPANOIS");
  w.put(static_cast<std::uint32_t>(head.hidden_w.rows()));
  w.put(static_cast<std::uint32_t>(head.input_width()));
  w.put(head.floor);
  const auto p = head.params();
  w.put_doubles(p);
}

inline NoiseHead decode_noise_head(ByteReader& r) {
  check_magic(r, "GAPANOIS", "noise head");
  const auto hidden = r.get<std::uint32_t>();
  const auto width = r.get<std::uint32_t>();
  NoiseHead head;
  head.floor = r.get<double>();
  if (hidden > 0) {
    head.hidden_w = Matrix(hidden, width);
    head.hidden_b = Vector(hidden);
    head.w = Vector(hidden);
  } else {
    head.w = Vector(width);
  }
  head.set_params(r.get_doubles(head.param_count()));
  if (!(head.floor > 0.0)) fail(ErrorCode::kCorruptFile, "noise head floor");
  return head;
}

}  // namespace gapa
