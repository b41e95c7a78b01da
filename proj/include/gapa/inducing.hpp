#pragma once

// Offline compression of an activation cache into M inducing inputs plus the
// empirical kernel hyperparameters (median-distance lengthscale, per-neuron
// pre-activation variance).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "gapa/activation_cache.hpp"
#include "gapa/io.hpp"
#include "gapa/kernel.hpp"
#include "gapa/random.hpp"
#include "gapa/tensor.hpp"

namespace gapa {

enum class InducingMethod : std::uint8_t { kKMeansPP = 0, kFarthestPoint = 1 };

inline std::string_view method_name(InducingMethod m) {
  return m == InducingMethod::kKMeansPP ? "kmeans" : "fps";
}

inline InducingMethod parse_method(std::string_view s) {
  if (s == "kmeans" || s == "kmeans++") return InducingMethod::kKMeansPP;
  if (s == "fps" || s == "farthest") return InducingMethod::kFarthestPoint;
  fail(ErrorCode::kInvalidArgument, "unknown inducing method '" + std::string(s) + "'");
}

struct InducingSet {
  std::size_t layer_index = 0;
  Matrix z;  // M × d inducing inputs
  KernelParams params;
  InducingMethod method = InducingMethod::kKMeansPP;
  Digest fingerprint{};

  std::size_t size() const noexcept { return z.rows(); }
  std::size_t width() const noexcept { return z.cols(); }
};

// ---------------------------------------------------------------------------
// k-means++ / Lloyd.

struct KMeansResult {
  Matrix centroids;
  std::vector<std::size_t> assignment;
  /// Objective (sum of squared distances to the assigned centroid) after the
  /// initial assignment and after every Lloyd iteration.
  std::vector<double> objective;
  std::size_t iterations = 0;
  bool converged = false;
};

namespace detail {

/// Nearest centroid with ties broken by lower index.
inline std::size_t nearest_centroid(std::span<const double> x,
                                    const Matrix& centroids, double* dist2) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centroids.rows(); ++c) {
    const double d = squared_distance(x, centroids.row(c));
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  if (dist2 != nullptr) *dist2 = best_d;
  return best;
}

inline std::vector<std::size_t> kmeanspp_seed(const Matrix& data,
                                              std::size_t m, Rng& rng) {
  const std::size_t n = data.rows();
  std::vector<std::size_t> chosen;
  chosen.reserve(m);
  std::vector<bool> taken(n, false);
  chosen.push_back(std::uniform_int_distribution<std::size_t>(0, n - 1)(rng));
  taken[chosen.back()] = true;
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i)
    d2[i] = squared_distance(data.row(i), data.row(chosen[0]));
  while (chosen.size() < m) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += d2[i];
    std::size_t pick = n;
    if (total > 0.0) {
      const double u = std::uniform_real_distribution<double>(0.0, total)(rng);
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (d2[i] <= 0.0) continue;
        acc += d2[i];
        pick = i;
        if (acc > u) break;
      }
    } else {
      // Every remaining row coincides with a chosen center.
      std::vector<std::size_t> free;
      for (std::size_t i = 0; i < n; ++i)
        if (!taken[i]) free.push_back(i);
      pick = free[std::uniform_int_distribution<std::size_t>(
          0, free.size() - 1)(rng)];
    }
    chosen.push_back(pick);
    taken[pick] = true;
    for (std::size_t i = 0; i < n; ++i)
      d2[i] = std::min(d2[i], squared_distance(data.row(i), data.row(pick)));
  }
  return chosen;
}

}  // namespace detail

inline KMeansResult kmeans(const Matrix& data, std::size_t m,
                           std::size_t max_iters, std::uint64_t seed) {
  const std::size_t n = data.rows();
  const std::size_t d = data.cols();
  GAPA_REQUIRE(n > 0, ErrorCode::kEmptyCache, "k-means on empty data");
  GAPA_REQUIRE(m >= 1 && m <= n, ErrorCode::kTooFewRows,
          "k-means needs 1 <= M <= rows, got M=" + std::to_string(m) +
              " rows=" + std::to_string(n));

  Rng rng(seed);
  KMeansResult res;
  res.centroids = Matrix(m, d);
  const auto seeds = detail::kmeanspp_seed(data, m, rng);
  for (std::size_t c = 0; c < m; ++c)
    std::copy_n(data.row(seeds[c]).begin(), d, res.centroids.row(c).begin());

  res.assignment.assign(n, 0);
  std::vector<double> dist2(n);
  auto assign = [&]() {
    bool changed = false;
    double obj = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c =
          detail::nearest_centroid(data.row(i), res.centroids, &dist2[i]);
      if (c != res.assignment[i]) changed = true;
      res.assignment[i] = c;
      obj += dist2[i];
    }
    res.objective.push_back(obj);
    return changed;
  };
  assign();

  std::vector<std::size_t> counts(m);
  for (std::size_t it = 0; it < max_iters; ++it) {
    // Update step.
    Matrix sums(m, d);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = res.assignment[i];
      ++counts[c];
      auto srow = sums.row(c);
      const auto x = data.row(i);
      for (std::size_t j = 0; j < d; ++j) srow[j] += x[j];
    }
    for (std::size_t c = 0; c < m; ++c) {
      if (counts[c] == 0) continue;
      auto crow = res.centroids.row(c);
      const auto srow = sums.row(c);
      for (std::size_t j = 0; j < d; ++j)
        crow[j] = srow[j] / static_cast<double>(counts[c]);
    }
    // Empty clusters take the point farthest from its own centroid.
    for (std::size_t c = 0; c < m; ++c) {
      if (counts[c] != 0) continue;
      std::size_t far = n;
      double far_d = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (counts[res.assignment[i]] <= 1) continue;
        const double di = squared_distance(
            data.row(i), res.centroids.row(res.assignment[i]));
        if (di > far_d) {
          far_d = di;
          far = i;
        }
      }
      if (far == n) continue;
      --counts[res.assignment[far]];
      res.assignment[far] = c;
      counts[c] = 1;
      std::copy_n(data.row(far).begin(), d, res.centroids.row(c).begin());
    }
    ++res.iterations;
    if (!assign()) {
      res.converged = true;
      break;
    }
  }
  return res;
}

/// k-means++ seeding followed by Lloyd iterations until the assignment is a
/// fixpoint or `max_iters` is reached. Returns the M × d centroids.
inline Matrix kmeans_pp(const Matrix& data, std::size_t m,
                        std::size_t max_iters, std::uint64_t seed) {
  return kmeans(data, m, max_iters, seed).centroids;
}

inline Matrix kmeans_pp(const ActivationCache& cache, std::size_t m,
                        std::size_t max_iters, std::uint64_t seed) {
  GAPA_REQUIRE(cache.rows() > 0, ErrorCode::kEmptyCache, "empty cache");
  return kmeans_pp(cache.load(), m, max_iters, seed);
}

// ---------------------------------------------------------------------------
// Farthest-point traversal.

/// Greedy farthest-first traversal starting at row `first`. Returns the
/// selected row indices in selection order.
inline std::vector<std::size_t> farthest_point_indices(const Matrix& data,
                                                       std::size_t m,
                                                       std::size_t first) {
  const std::size_t n = data.rows();
  GAPA_REQUIRE(n > 0, ErrorCode::kEmptyCache, "farthest-point on empty data");
  GAPA_REQUIRE(m >= 1 && m <= n, ErrorCode::kTooFewRows,
          "farthest-point needs 1 <= M <= rows");
  GAPA_REQUIRE(first < n, ErrorCode::kInvalidArgument, "first index out of range");
  std::vector<std::size_t> chosen{first};
  std::vector<double> min_d2(n);
  for (std::size_t i = 0; i < n; ++i)
    min_d2[i] = squared_distance(data.row(i), data.row(first));
  while (chosen.size() < m) {
    std::size_t best = 0;
    double best_d = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (min_d2[i] > best_d) {
        best_d = min_d2[i];
        best = i;
      }
    }
    chosen.push_back(best);
    for (std::size_t i = 0; i < n; ++i)
      min_d2[i] = std::min(min_d2[i], squared_distance(data.row(i), data.row(best)));
  }
  return chosen;
}

inline Matrix gather_rows(const Matrix& data, std::span<const std::size_t> ids) {
  Matrix out(ids.size(), data.cols());
  for (std::size_t r = 0; r < ids.size(); ++r)
    std::copy_n(data.row(ids[r]).begin(), data.cols(), out.row(r).begin());
  return out;
}

/// Farthest-point sampling with a seeded random first row.
inline Matrix farthest_point(const Matrix& data, std::size_t m,
                             std::uint64_t seed) {
  GAPA_REQUIRE(data.rows() > 0, ErrorCode::kEmptyCache, "farthest-point on empty data");
  Rng rng(seed);
  const std::size_t first =
      std::uniform_int_distribution<std::size_t>(0, data.rows() - 1)(rng);
  return gather_rows(data, farthest_point_indices(data, m, first));
}

inline Matrix farthest_point(const ActivationCache& cache, std::size_t m,
                             std::uint64_t seed) {
  GAPA_REQUIRE(cache.rows() > 0, ErrorCode::kEmptyCache, "empty cache");
  return farthest_point(cache.load(), m, seed);
}

// ---------------------------------------------------------------------------
// Hyperparameters.

inline constexpr std::size_t kDefaultPairBudget = 1'000'000;

/// Median pairwise Euclidean distance. Uses every pair when the budget covers
/// them, otherwise `pair_budget` pairs drawn uniformly with replacement.
inline double estimate_lengthscale(const Matrix& data,
                                   std::size_t pair_budget = kDefaultPairBudget,
                                   std::uint64_t seed = 0) {
  const std::size_t n = data.rows();
  GAPA_REQUIRE(n > 0, ErrorCode::kEmptyCache, "lengthscale of empty data");
  GAPA_REQUIRE(n >= 2, ErrorCode::kTooFewRows, "lengthscale needs at least 2 rows");
  const std::uint64_t all_pairs =
      static_cast<std::uint64_t>(n) * (n - 1) / 2;
  std::vector<double> dist;
  if (pair_budget >= all_pairs) {
    dist.reserve(all_pairs);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j)
        dist.push_back(std::sqrt(squared_distance(data.row(i), data.row(j))));
  } else {
    Rng rng(seed);
    std::uniform_int_distribution<std::size_t> first(0, n - 1);
    std::uniform_int_distribution<std::size_t> second(0, n - 2);
    dist.reserve(pair_budget);
    for (std::size_t p = 0; p < pair_budget; ++p) {
      const std::size_t i = first(rng);
      std::size_t j = second(rng);
      if (j >= i) ++j;
      dist.push_back(std::sqrt(squared_distance(data.row(i), data.row(j))));
    }
  }
  const std::size_t mid = dist.size() / 2;
  std::nth_element(dist.begin(), dist.begin() + mid, dist.end());
  double median = dist[mid];
  if (dist.size() % 2 == 0) {
    const double lower = *std::max_element(dist.begin(), dist.begin() + mid);
    median = 0.5 * (lower + median);
  }
  if (!(median > 0.0))
    fail(ErrorCode::kDegenerateScale, "median pairwise distance is zero");
  return median;
}

inline double estimate_lengthscale(const ActivationCache& cache,
                                   std::size_t pair_budget = kDefaultPairBudget,
                                   std::uint64_t seed = 0) {
  GAPA_REQUIRE(cache.rows() > 0, ErrorCode::kEmptyCache, "empty cache");
  return estimate_lengthscale(cache.load(), pair_budget, seed);
}

inline constexpr double kMinSignalStd = 1e-6;

namespace detail {

/// Welford accumulator over rows.
struct ColumnMoments {
  std::size_t n = 0;
  std::vector<double> mean, m2;

  explicit ColumnMoments(std::size_t d) : mean(d, 0.0), m2(d, 0.0) {}

  void add(std::span<const double> x) {
    ++n;
    for (std::size_t j = 0; j < x.size(); ++j) {
      const double delta = x[j] - mean[j];
      mean[j] += delta / static_cast<double>(n);
      m2[j] += delta * (x[j] - mean[j]);
    }
  }

  Vector clamped_variance() const {
    Vector v(mean.size());
    for (std::size_t j = 0; j < mean.size(); ++j) {
      const double sd = std::sqrt(m2[j] / static_cast<double>(n - 1));
      const double c = std::max(sd, kMinSignalStd);
      v[j] = c * c;
    }
    return v;
  }
};

}  // namespace detail

/// Per-neuron c_i²: the sample variance (n - 1 denominator) with the standard
/// deviation clamped at 1e-6.
inline Vector estimate_signal_var(const Matrix& data) {
  GAPA_REQUIRE(data.rows() >= 2, ErrorCode::kTooFewRows,
          "signal variance needs at least 2 rows");
  detail::ColumnMoments acc(data.cols());
  for (std::size_t i = 0; i < data.rows(); ++i) acc.add(data.row(i));
  return acc.clamped_variance();
}

inline Vector estimate_signal_var(const ActivationCache& cache) {
  GAPA_REQUIRE(cache.rows() > 0, ErrorCode::kEmptyCache, "empty cache");
  GAPA_REQUIRE(cache.rows() >= 2, ErrorCode::kTooFewRows,
          "signal variance needs at least 2 rows");
  detail::ColumnMoments acc(cache.width());
  for (const Matrix& block : cache.stream_rows(4096))
    for (std::size_t i = 0; i < block.rows(); ++i) acc.add(block.row(i));
  return acc.clamped_variance();
}

// ---------------------------------------------------------------------------
// Composition and persistence.

struct InducingOptions {
  double jitter = 1e-6;
  std::size_t pair_budget = kDefaultPairBudget;
  std::size_t max_iters = 100;
};

inline constexpr std::size_t kDefaultInducingPoints = 20000;

/// Builds an inducing set from pre-activation rows already in memory.
inline InducingSet build_inducing_set(const Matrix& data, std::size_t layer_index,
                                      std::size_t m, InducingMethod method,
                                      std::uint64_t seed,
                                      const InducingOptions& opts = {}) {
  GAPA_REQUIRE(data.rows() > 0, ErrorCode::kEmptyCache, "no pre-activation rows");
  GAPA_REQUIRE(m >= 1 && m <= data.rows(), ErrorCode::kTooFewRows,
          "M=" + std::to_string(m) + " exceeds available rows " +
              std::to_string(data.rows()));
  InducingSet set;
  set.layer_index = layer_index;
  set.method = method;
  set.z = method == InducingMethod::kKMeansPP
              ? kmeans_pp(data, m, opts.max_iters, split_seed(seed, "kmeans"))
              : farthest_point(data, m, split_seed(seed, "fps"));
  set.params.lengthscale = estimate_lengthscale(
      data, opts.pair_budget, split_seed(seed, "lengthscale"));
  set.params.signal_var = estimate_signal_var(data);
  set.params.jitter = opts.jitter;
  set.params.check();
  return set;
}

inline InducingSet build_inducing_set(const ActivationCache& cache,
                                      std::size_t m, InducingMethod method,
                                      std::uint64_t seed,
                                      const InducingOptions& opts = {}) {
  GAPA_REQUIRE(cache.rows() > 0, ErrorCode::kEmptyCache, "empty cache");
  InducingSet set = build_inducing_set(cache.load(), cache.layer_index(), m,
                                       method, seed, opts);
  set.fingerprint = cache.fingerprint();
  return set;
}

/// As above, but first checks that the cache was built from `expected`.
inline InducingSet build_inducing_set(const ActivationCache& cache,
                                      const Digest& expected, std::size_t m,
                                      InducingMethod method, std::uint64_t seed,
                                      const InducingOptions& opts = {}) {
  GAPA_REQUIRE(cache.fingerprint() == expected, ErrorCode::kFingerprintMismatch,
          "cache " + cache.path().string() +
              " was built from a different network or dataset");
  return build_inducing_set(cache, m, method, seed, opts);
}

inline constexpr std::string_view kInducingMagic = "GAPAINDC";
inline constexpr std::uint16_t kInducingVersion = 1;

inline void encode_inducing(ByteWriter& w, const InducingSet& s) {
  w.put_string(kInducingMagic);
  w.put(kInducingVersion);
  w.put(static_cast<std::uint32_t>(s.layer_index));
  w.put(static_cast<std::uint64_t>(s.size()));
  w.put(static_cast<std::uint32_t>(s.width()));
  w.put(static_cast<std::uint8_t>(s.method));
  w.put(s.params.lengthscale);
  w.put(s.params.jitter);
  w.put_doubles(s.params.signal_var.values());
  w.put_doubles(s.z.values());
  w.put_bytes(s.fingerprint);
}

inline InducingSet decode_inducing(ByteReader& r) {
  check_magic(r, kInducingMagic, "inducing set");
  const auto version = r.get<std::uint16_t>();
  if (version != kInducingVersion)
    fail(ErrorCode::kSchemaVersionUnsupported,
         "inducing set version " + std::to_string(version));
  InducingSet s;
  s.layer_index = r.get<std::uint32_t>();
  const auto m = r.get<std::uint64_t>();
  const auto d = r.get<std::uint32_t>();
  const auto method = r.get<std::uint8_t>();
  if (method > 1) fail(ErrorCode::kCorruptFile, "unknown inducing method tag");
  s.method = static_cast<InducingMethod>(method);
  s.params.lengthscale = r.get<double>();
  s.params.jitter = r.get<double>();
  s.params.signal_var = Vector(r.get_doubles(d));
  if (d != 0 && m > r.remaining() / (d * sizeof(double)))
    fail(ErrorCode::kCorruptFile, "inducing set truncated");
  s.z = Matrix(m, d, r.get_doubles(m * d));
  const auto fp = r.get_bytes(32);
  std::copy(fp.begin(), fp.end(), s.fingerprint.begin());
  if (m == 0 || !s.z.all_finite())
    fail(ErrorCode::kCorruptFile, "inducing set is empty or non-finite");
  try {
    s.params.check();
  } catch (const Error& e) {
    fail(ErrorCode::kCorruptFile, e.what());
  }
  return s;
}

}  // namespace gapa
