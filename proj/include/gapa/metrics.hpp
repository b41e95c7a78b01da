#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <span>
#include <vector>

#include <boost/math/distributions/normal.hpp>

#include "gapa/error.hpp"
#include "gapa/heads.hpp"
#include "gapa/tensor.hpp"

namespace gapa {

inline double normal_pdf(double z) {
  return std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
}

inline double normal_cdf(double z) {
  return 0.5 * std::erfc(-z / std::numbers::sqrt2);
}

inline double normal_quantile(double p) {
  return boost::math::quantile(boost::math::normal_distribution<double>(), p);
}

inline double gaussian_nll(double y, double mu, double sigma2) {
  GAPA_REQUIRE(sigma2 > 0.0, ErrorCode::kNonPositiveVariance,
          "gaussian_nll needs positive variance");
  const double r = y - mu;
  return 0.5 * std::log(2.0 * std::numbers::pi * sigma2) + r * r / (2.0 * sigma2);
}

/// Mean per-sample Gaussian NLL over a batch.
inline double gaussian_nll(const Vector& y, const Vector& mu, const Vector& sigma2) {
  GAPA_REQUIRE(y.size() == mu.size() && y.size() == sigma2.size() && !y.empty(),
          ErrorCode::kDimensionMismatch, "gaussian_nll batch sizes");
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += gaussian_nll(y[i], mu[i], sigma2[i]);
  return s / static_cast<double>(y.size());
}

/// Closed-form CRPS of N(μ, σ²) at y.
inline double crps_gaussian(double y, double mu, double sigma) {
  GAPA_REQUIRE(sigma > 0.0, ErrorCode::kNonPositiveScale, "crps needs positive sigma");
  const double z = (y - mu) / sigma;
  return sigma * (z * (2.0 * normal_cdf(z) - 1.0) + 2.0 * normal_pdf(z) -
                  1.0 / std::sqrt(std::numbers::pi));
}

inline double crps_gaussian(const Vector& y, const Vector& mu, const Vector& sigma) {
  GAPA_REQUIRE(y.size() == mu.size() && y.size() == sigma.size() && !y.empty(),
          ErrorCode::kDimensionMismatch, "crps batch sizes");
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += crps_gaussian(y[i], mu[i], sigma[i]);
  return s / static_cast<double>(y.size());
}

inline std::vector<double> default_cqm_levels() {
  return {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
}

/// Mean over central-coverage levels q of |coverage of μ ± σ Φ⁻¹((1+q)/2) - q|.
inline double cqm(const Vector& y, const Vector& mu, const Vector& sigma,
                  std::span<const double> levels) {
  GAPA_REQUIRE(y.size() == mu.size() && y.size() == sigma.size() && !y.empty(),
          ErrorCode::kDimensionMismatch, "cqm batch sizes");
  GAPA_REQUIRE(!levels.empty(), ErrorCode::kInvalidArgument, "cqm needs levels");
  double total = 0.0;
  for (double q : levels) {
    GAPA_REQUIRE(q > 0.0 && q < 1.0, ErrorCode::kInvalidArgument,
            "cqm level outside (0,1)");
    const double half = normal_quantile(0.5 * (1.0 + q));
    std::size_t inside = 0;
    for (std::size_t i = 0; i < y.size(); ++i)
      if (std::abs(y[i] - mu[i]) <= sigma[i] * half) ++inside;
    total += std::abs(static_cast<double>(inside) / static_cast<double>(y.size()) - q);
  }
  return total / static_cast<double>(levels.size());
}

inline double cqm(const Vector& y, const Vector& mu, const Vector& sigma) {
  const auto levels = default_cqm_levels();
  return cqm(y, mu, sigma, levels);
}

inline std::size_t argmax(std::span<const double> p) {
  return static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
}

struct CalibrationBin {
  std::size_t count = 0;
  double confidence = 0.0;
  double accuracy = 0.0;
};

struct BinnedCalibration {
  std::vector<CalibrationBin> bins;
  double ece = 0.0;
};

/// Equal-width bins on max-probability confidence; bin m holds (m/B, (m+1)/B].
inline BinnedCalibration calibration_bins(const Matrix& probs,
                                          std::span<const std::size_t> labels,
                                          std::size_t n_bins = 15) {
  GAPA_REQUIRE(probs.rows() == labels.size() && !labels.empty(),
          ErrorCode::kDimensionMismatch, "ece rows vs labels");
  GAPA_REQUIRE(n_bins >= 1, ErrorCode::kInvalidArgument, "ece needs bins");
  BinnedCalibration out;
  out.bins.resize(n_bins);
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    const auto row = probs.row(i);
    const std::size_t pred = argmax(row);
    const double conf = row[pred];
    const double scaled = std::ceil(conf * static_cast<double>(n_bins));
    const std::size_t b = std::min<std::size_t>(
        n_bins - 1, scaled <= 1.0 ? 0 : static_cast<std::size_t>(scaled) - 1);
    auto& bin = out.bins[b];
    ++bin.count;
    bin.confidence += conf;
    bin.accuracy += pred == labels[i] ? 1.0 : 0.0;
  }
  const double n = static_cast<double>(labels.size());
  for (auto& bin : out.bins) {
    if (bin.count == 0) continue;
    bin.confidence /= static_cast<double>(bin.count);
    bin.accuracy /= static_cast<double>(bin.count);
    out.ece += static_cast<double>(bin.count) / n * std::abs(bin.accuracy - bin.confidence);
  }
  return out;
}

inline double ece(const Matrix& probs, std::span<const std::size_t> labels,
                  std::size_t n_bins = 15) {
  return calibration_bins(probs, labels, n_bins).ece;
}

/// Mann–Whitney AUROC with mid-ranks for ties. Label 1 is the positive class.
inline double auroc(std::span<const double> scores, std::span<const int> labels) {
  GAPA_REQUIRE(scores.size() == labels.size(), ErrorCode::kDimensionMismatch,
          "auroc " + dims(scores.size(), labels.size()));
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t t = i; t < j; ++t)
      if (labels[order[t]] == 1) {
        rank_sum += mid;
        ++pos;
      }
    i = j;
  }
  const std::size_t neg = n - pos;
  GAPA_REQUIRE(pos > 0 && neg > 0, ErrorCode::kSingleClass,
          "auroc needs both classes present");
  const double p = static_cast<double>(pos);
  const double u = rank_sum - p * (p + 1.0) / 2.0;
  return u / (p * static_cast<double>(neg));
}

inline double predictive_entropy(std::span<const double> p) { return entropy(p); }

/// Mean negative log-probability of the true label.
inline double classification_nll(const Matrix& probs,
                                 std::span<const std::size_t> labels) {
  GAPA_REQUIRE(probs.rows() == labels.size() && !labels.empty(),
          ErrorCode::kDimensionMismatch, "nll rows vs labels");
  double s = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    GAPA_REQUIRE(labels[i] < probs.cols(), ErrorCode::kInvalidArgument, "label out of range");
    s -= std::log(std::max(probs(i, labels[i]), std::numeric_limits<double>::min()));
  }
  return s / static_cast<double>(labels.size());
}

inline double accuracy(const Matrix& probs, std::span<const std::size_t> labels) {
  GAPA_REQUIRE(probs.rows() == labels.size() && !labels.empty(),
          ErrorCode::kDimensionMismatch, "accuracy rows vs labels");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (argmax(probs.row(i)) == labels[i]) ++hit;
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

}  // namespace gapa
