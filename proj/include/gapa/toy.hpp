#pragma once

// Desk-scale datasets and a full-batch Adam trainer for small tanh MLPs.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "gapa/error.hpp"
#include "gapa/network.hpp"
#include "gapa/random.hpp"
#include "gapa/tensor.hpp"

namespace gapa {

struct Dataset {
  Matrix x;
  Vector y;                          // regression targets
  std::vector<std::size_t> labels;   // class labels
  Task task = Task::kClassification;

  std::size_t size() const noexcept { return x.rows(); }
  std::size_t num_classes() const {
    return labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
  }
  std::vector<Vector> inputs() const {
    std::vector<Vector> out;
    out.reserve(size());
    for (std::size_t i = 0; i < size(); ++i) out.emplace_back(x.row(i));
    return out;
  }
};

enum class ToyKind { kTwoMoons, kGapRegression1D, kRotatedShift };

inline ToyKind parse_toy(std::string_view s) {
  if (s == "two_moons") return ToyKind::kTwoMoons;
  if (s == "gap_regression") return ToyKind::kGapRegression1D;
  if (s == "rotated_shift") return ToyKind::kRotatedShift;
  fail(ErrorCode::kInvalidArgument, "unknown toy dataset: " + std::string(s));
}

/// Two interleaved half circles with isotropic Gaussian noise; classes
/// alternate so either half of the rows is balanced.
inline Dataset make_two_moons(std::size_t n, double noise, std::uint64_t seed) {
  GAPA_REQUIRE(n >= 2, ErrorCode::kInvalidArgument, "two moons needs n >= 2");
  Rng rng(seed);
  std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
  std::normal_distribution<double> eps(0.0, noise);
  Dataset d;
  d.x = Matrix(n, 2);
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = angle(rng);
    const std::size_t c = i % 2;
    d.x(i, 0) = (c == 0 ? std::cos(t) : 1.0 - std::cos(t)) + eps(rng);
    d.x(i, 1) = (c == 0 ? std::sin(t) : 0.5 - std::sin(t)) + eps(rng);
    d.labels[i] = c;
  }
  return d;
}

struct GapParams {
  double lo = -3.0, gap_lo = -1.0, gap_hi = 1.0, hi = 3.0;
  bool fill_gap = false;  // sample the whole [lo, hi] range (held-out sets)
};

inline double gap_function(double x) { return std::sin(1.5 * x) + 0.3 * x; }
inline double gap_noise_std(double x) { return 0.05 + 0.12 * std::abs(x); }

/// y = f(x) + heteroscedastic noise with x on [lo, gap_lo] ∪ [gap_hi, hi].
inline Dataset make_gap_regression(std::size_t n, std::uint64_t seed,
                                   const GapParams& p = {}) {
  GAPA_REQUIRE(p.lo < p.gap_lo && p.gap_lo < p.gap_hi && p.gap_hi < p.hi,
          ErrorCode::kInvalidArgument, "gap intervals out of order");
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> eps(0.0, 1.0);
  const double left = p.gap_lo - p.lo, right = p.hi - p.gap_hi;
  Dataset d;
  d.task = Task::kRegression;
  d.x = Matrix(n, 1);
  d.y = Vector(n);
  for (std::size_t i = 0; i < n; ++i) {
    double x;
    if (p.fill_gap) {
      x = p.lo + (p.hi - p.lo) * unit(rng);
    } else {
      const double u = unit(rng) * (left + right);
      x = u < left ? p.lo + u : p.gap_hi + (u - left);
    }
    d.x(i, 0) = x;
    d.y[i] = gap_function(x) + gap_noise_std(x) * eps(rng);
  }
  return d;
}

/// Rotates 2-D inputs by `degrees` about `center`.
inline Dataset rotate(Dataset d, double degrees, double cx = 0.5, double cy = 0.25) {
  GAPA_REQUIRE(d.x.cols() == 2, ErrorCode::kDimensionMismatch, "rotation needs 2-D inputs");
  const double a = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(a), s = std::sin(a);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double x = d.x(i, 0) - cx, y = d.x(i, 1) - cy;
    d.x(i, 0) = cx + c * x - s * y;
    d.x(i, 1) = cy + s * x + c * y;
  }
  return d;
}

inline Dataset make_rotated_shift(std::size_t n, double noise, double degrees,
                                  std::uint64_t seed) {
  return rotate(make_two_moons(n, noise, seed), degrees);
}

/// Centroid and maximum distance of rows from it.
inline std::pair<Vector, double> data_radius(const Matrix& x) {
  Vector c(x.cols(), 0.0);
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) c[j] += x(i, j);
  for (double& v : c) v /= static_cast<double>(x.rows());
  double r = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i)
    r = std::max(r, std::sqrt(squared_distance(x.row(i), c.span())));
  return {c, r};
}

/// 2-D points at distance uniform in (lo·R, hi·R) from the data centroid.
inline Matrix far_field(const Matrix& train, std::size_t n, std::uint64_t seed,
                        double lo = 3.2, double hi = 5.0) {
  GAPA_REQUIRE(train.cols() == 2, ErrorCode::kDimensionMismatch, "far field needs 2-D data");
  const auto [c, r] = data_radius(train);
  Rng rng(seed);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  std::uniform_real_distribution<double> dist(lo * r, hi * r);
  Matrix out(n, 2);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = angle(rng), rho = dist(rng);
    out(i, 0) = c[0] + rho * std::cos(t);
    out(i, 1) = c[1] + rho * std::sin(t);
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV: feature columns x0..x{d-1} then "y" (regression) or "label".

inline void write_csv(const Dataset& d, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  GAPA_REQUIRE(out.good(), ErrorCode::kIoError, "cannot write " + path.string());
  out.precision(17);
  for (std::size_t j = 0; j < d.x.cols(); ++j) out << 'x' << j << ',';
  out << (d.task == Task::kRegression ? "y" : "label") << '\n';
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (std::size_t j = 0; j < d.x.cols(); ++j) out << d.x(i, j) << ',';
    if (d.task == Task::kRegression) out << d.y[i];
    else out << d.labels[i];
    out << '\n';
  }
  GAPA_REQUIRE(out.good(), ErrorCode::kIoError, "write failed: " + path.string());
}

inline Dataset read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  GAPA_REQUIRE(in.good(), ErrorCode::kMissingArtifact, "cannot open " + path.string());
  std::string line;
  GAPA_REQUIRE(static_cast<bool>(std::getline(in, line)), ErrorCode::kCorruptFile,
          "empty csv " + path.string());
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  GAPA_REQUIRE(header.size() >= 2, ErrorCode::kCorruptFile, "csv needs features and a target");
  Dataset d;
  if (header.back() == "y") d.task = Task::kRegression;
  else GAPA_REQUIRE(header.back() == "label", ErrorCode::kCorruptFile,
               "last csv column must be y or label");
  const std::size_t cols = header.size() - 1;
  std::vector<double> xs, ys;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> vals;
    while (std::getline(ss, cell, ',')) {
      try {
        vals.push_back(std::stod(cell));
      } catch (const std::exception&) {
        fail(ErrorCode::kCorruptFile, "bad csv number '" + cell + "'");
      }
    }
    GAPA_REQUIRE(vals.size() == header.size(), ErrorCode::kCorruptFile,
            "csv row " + std::to_string(rows + 1) + " has wrong column count");
    xs.insert(xs.end(), vals.begin(), vals.end() - 1);
    if (d.task == Task::kRegression) {
      ys.push_back(vals.back());
    } else {
      GAPA_REQUIRE(vals.back() >= 0.0 && vals.back() == std::floor(vals.back()),
              ErrorCode::kCorruptFile, "labels must be non-negative integers");
      d.labels.push_back(static_cast<std::size_t>(vals.back()));
    }
    ++rows;
  }
  d.x = Matrix(rows, cols, std::move(xs));
  if (d.task == Task::kRegression) d.y = Vector(std::move(ys));
  return d;
}

// ---------------------------------------------------------------------------
// MLP training.

struct MlpConfig {
  std::vector<std::size_t> hidden = {32, 32};
  ActivationTag activation = ActivationTag::kTanh;
  std::size_t epochs = 2000;
  double lr = 0.01;
  double weight_decay = 0.0;  // L2 penalty on weights (not biases)
  std::uint64_t seed = 0;
};

namespace detail {

struct Adam {
  std::vector<double> m, v;
  double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  std::size_t t = 0;

  explicit Adam(std::size_t n) : m(n, 0.0), v(n, 0.0) {}

  void step(std::vector<double*>& params, const std::vector<double>& grad, double lr) {
    ++t;
    const double c1 = 1.0 - std::pow(b1, double(t));
    const double c2 = 1.0 - std::pow(b2, double(t));
    for (std::size_t i = 0; i < grad.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
      v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
      *params[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
    }
  }
};

}  // namespace detail

/// Trains Linear/activation/.../Linear on the dataset (cross-entropy for
/// classification, squared error for regression) and returns the frozen
/// network with every activation marked as a gapa point.
inline NetworkSpec train_mlp(const Dataset& data, const MlpConfig& cfg = {}) {
  const std::size_t n = data.size();
  GAPA_REQUIRE(n > 0, ErrorCode::kTooFewRows, "empty training set");
  const bool cls = data.task != Task::kRegression;
  const std::size_t out_w = cls ? data.num_classes() : 1;
  GAPA_REQUIRE(!cls || out_w >= 2, ErrorCode::kSingleClass, "classification needs 2+ classes");

  std::vector<std::size_t> widths{data.x.cols()};
  widths.insert(widths.end(), cfg.hidden.begin(), cfg.hidden.end());
  widths.push_back(out_w);
  const std::size_t nl = widths.size() - 1;

  Rng rng(cfg.seed);
  std::vector<LinearLayer> lin(nl);
  std::vector<double*> params;
  for (std::size_t l = 0; l < nl; ++l) {
    std::normal_distribution<double> init(0.0, 1.0 / std::sqrt(double(widths[l])));
    lin[l].weight = Matrix(widths[l + 1], widths[l]);
    lin[l].bias = Vector(widths[l + 1], 0.0);
    for (std::size_t r = 0; r < widths[l + 1]; ++r)
      for (double& w : lin[l].weight.row(r)) w = init(rng);
  }
  for (auto& L : lin) {
    for (std::size_t i = 0; i < L.weight.values().size(); ++i)
      params.push_back(L.weight.data() + i);
    for (double& b : L.bias) params.push_back(&b);
  }
  detail::Adam adam(params.size());
  std::vector<double> grad(params.size());

  std::vector<std::vector<Vector>> acts(nl + 1, std::vector<Vector>(n));
  std::vector<std::vector<Vector>> pre(nl, std::vector<Vector>(n));
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    for (std::size_t i = 0; i < n; ++i) {
      acts[0][i] = Vector(data.x.row(i));
      for (std::size_t l = 0; l < nl; ++l) {
        pre[l][i] = apply_linear(lin[l], acts[l][i]);
        acts[l + 1][i] = l + 1 < nl ? apply_activation(cfg.activation, pre[l][i])
                                    : pre[l][i];
      }
    }
    std::fill(grad.begin(), grad.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      Vector delta = acts[nl][i];
      if (cls) {
        delta = Vector(softmax(delta.span()));
        delta[data.labels[i]] -= 1.0;
      } else {
        delta[0] -= data.y[i];
      }
      std::size_t at = params.size();
      for (std::size_t l = nl; l-- > 0;) {
        const auto& L = lin[l];
        const std::size_t in_w = widths[l], o_w = widths[l + 1];
        at -= o_w * in_w + o_w;
        for (std::size_t r = 0; r < o_w; ++r) {
          for (std::size_t c = 0; c < in_w; ++c)
            grad[at + r * in_w + c] += delta[r] * acts[l][i][c];
          grad[at + o_w * in_w + r] += delta[r];
        }
        if (l == 0) break;
        Vector back(in_w, 0.0);
        for (std::size_t r = 0; r < o_w; ++r)
          for (std::size_t c = 0; c < in_w; ++c) back[c] += L.weight(r, c) * delta[r];
        for (std::size_t c = 0; c < in_w; ++c)
          back[c] *= activation_derivative(cfg.activation, pre[l - 1][i][c]);
        delta = std::move(back);
      }
    }
    for (double& g : grad) g /= static_cast<double>(n);
    if (cfg.weight_decay > 0.0) {
      std::size_t at = 0;
      for (const auto& L : lin) {
        for (std::size_t i = 0; i < L.weight.values().size(); ++i)
          grad[at + i] += cfg.weight_decay * L.weight.values()[i];
        at += L.weight.values().size() + L.bias.size();
      }
    }
    adam.step(params, grad, cfg.lr);
  }

  NetworkSpec net;
  net.input_width = data.x.cols();
  net.task = cls ? Task::kClassification : Task::kRegression;
  for (std::size_t l = 0; l < nl; ++l) {
    net.layers.emplace_back(lin[l]);
    if (l + 1 < nl) {
      net.gapa_points.insert(net.layers.size());
      net.layers.emplace_back(ActivationLayer{cfg.activation});
    }
  }
  if (cls) net.layers.emplace_back(SoftmaxHeadLayer{});
  validate(net);
  return net;
}

}  // namespace gapa
