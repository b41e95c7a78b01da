#include "test_util.hpp"

#include <algorithm>
#include <numeric>

#include "gapa/activation_cache.hpp"
#include "gapa/inducing.hpp"
#include "gapa/neighbor_index.hpp"

using namespace gapa;
using namespace gapa::testing;

namespace {

Matrix blobs(Rng& rng, std::size_t per, const std::vector<std::pair<double, double>>& centers,
             double sd) {
  std::normal_distribution<double> n(0.0, sd);
  Matrix m(per * centers.size(), 2);
  for (std::size_t c = 0; c < centers.size(); ++c)
    for (std::size_t i = 0; i < per; ++i) {
      m(c * per + i, 0) = centers[c].first + n(rng);
      m(c * per + i, 1) = centers[c].second + n(rng);
    }
  return m;
}

double min_pairwise(const Matrix& m) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = i + 1; j < m.rows(); ++j)
      best = std::min(best, squared_distance(m.row(i), m.row(j)));
  return std::sqrt(best);
}

bool same_row(std::span<const double> a, std::span<const double> b, double tol) {
  for (std::size_t j = 0; j < a.size(); ++j)
    if (std::abs(a[j] - b[j]) > tol) return false;
  return true;
}

}  // namespace

TEST(KMeans, IdenticalRowsSingleCentroid) {
  Matrix data(10, 3, 2.5);
  const Matrix c = kmeans_pp(data, 1, 50, 1);
  EXPECT_EQ(c, Matrix(1, 3, 2.5));
}

TEST(KMeans, AllRowsAsCentroids) {
  Rng rng(1);
  const Matrix data = random_matrix(rng, 12, 2);
  const Matrix c = kmeans_pp(data, 12, 50, 3);
  std::vector<bool> used(12, false);
  for (std::size_t i = 0; i < 12; ++i) {
    bool found = false;
    for (std::size_t r = 0; r < 12 && !found; ++r)
      if (!used[r] && same_row(c.row(i), data.row(r), 1e-12)) used[r] = found = true;
    EXPECT_TRUE(found) << "centroid " << i << " is not a data row";
  }
}

TEST(KMeans, SeparatedBlobsAreLloydFixpoint) {
  Rng rng(2);
  const Matrix data = blobs(rng, 200, {{-5.0, 0.0}, {5.0, 1.0}}, 0.5);
  const auto res = kmeans(data, 2, 100, 9);
  ASSERT_TRUE(res.converged);
  // Blob means.
  double m[2][2] = {{0, 0}, {0, 0}};
  for (std::size_t i = 0; i < 400; ++i)
    for (std::size_t j = 0; j < 2; ++j) m[i / 200][j] += data(i, j) / 200.0;
  for (std::size_t b = 0; b < 2; ++b) {
    double best = 1e9;
    for (std::size_t c = 0; c < 2; ++c)
      best = std::min(best, std::hypot(res.centroids(c, 0) - m[b][0], res.centroids(c, 1) - m[b][1]));
    EXPECT_LT(best, 0.1);
  }
  // Exhaustive check: every point is assigned to its nearest centroid and
  // every centroid is the mean of its members.
  std::vector<std::array<double, 3>> acc(2, {0.0, 0.0, 0.0});
  for (std::size_t i = 0; i < 400; ++i) {
    const double d0 = squared_distance(data.row(i), res.centroids.row(0));
    const double d1 = squared_distance(data.row(i), res.centroids.row(1));
    const std::size_t nearest = d1 < d0 ? 1 : 0;
    EXPECT_EQ(res.assignment[i], nearest);
    acc[nearest][0] += data(i, 0);
    acc[nearest][1] += data(i, 1);
    acc[nearest][2] += 1.0;
  }
  for (std::size_t c = 0; c < 2; ++c) {
    EXPECT_NEAR(res.centroids(c, 0), acc[c][0] / acc[c][2], 1e-12);
    EXPECT_NEAR(res.centroids(c, 1), acc[c][1] / acc[c][2], 1e-12);
  }
}

TEST(KMeans, ObjectiveNonIncreasing) {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix data = random_matrix(rng, 300, 4);
    const auto res = kmeans(data, 17, 100, trial);
    for (std::size_t i = 1; i < res.objective.size(); ++i)
      EXPECT_LE(res.objective[i], res.objective[i - 1] * (1.0 + 1e-12));
  }
}

TEST(KMeans, DeterministicForSeed) {
  Rng rng(4);
  const Matrix data = random_matrix(rng, 200, 3);
  EXPECT_EQ(kmeans_pp(data, 9, 30, 5), kmeans_pp(data, 9, 30, 5));
}

TEST(KMeans, CentroidsInsideBoundingBox) {
  Rng rng(5);
  const Matrix data = random_matrix(rng, 150, 3);
  for (auto method : {InducingMethod::kKMeansPP, InducingMethod::kFarthestPoint}) {
    const auto set = build_inducing_set(data, 0, 20, method, 7);
    for (std::size_t j = 0; j < 3; ++j) {
      double lo = 1e9, hi = -1e9;
      for (std::size_t i = 0; i < 150; ++i) {
        lo = std::min(lo, data(i, j));
        hi = std::max(hi, data(i, j));
      }
      for (std::size_t i = 0; i < 20; ++i) {
        EXPECT_GE(set.z(i, j), lo - 1e-12);
        EXPECT_LE(set.z(i, j), hi + 1e-12);
      }
    }
  }
}

TEST(KMeans, Errors) {
  EXPECT_GAPA_ERROR(kmeans_pp(Matrix(0, 2), 1, 10, 0), ErrorCode::kEmptyCache);
  EXPECT_GAPA_ERROR(kmeans_pp(Matrix(3, 2), 4, 10, 0), ErrorCode::kTooFewRows);
}

TEST(Fps, SingleRowIsSeeded) {
  Rng rng(6);
  const Matrix data = random_matrix(rng, 20, 2);
  const Matrix a = farthest_point(data, 1, 11);
  bool found = false;
  for (std::size_t i = 0; i < 20; ++i) found |= same_row(a.row(0), data.row(i), 0.0);
  EXPECT_TRUE(found);
  EXPECT_EQ(a, farthest_point(data, 1, 11));
}

TEST(Fps, CollinearPicksExtreme) {
  const Matrix data{{0.0}, {1.0}, {3.0}};
  const auto ids = farthest_point_indices(data, 2, 0);
  EXPECT_EQ(ids, (std::vector<std::size_t>{0, 2}));
}

TEST(Fps, GreedyPropertyHolds) {
  Rng rng(7);
  const Matrix data = random_matrix(rng, 20, 3);
  const auto ids = farthest_point_indices(data, 4, 5);
  for (std::size_t step = 1; step < ids.size(); ++step) {
    auto min_to_chosen = [&](std::size_t i) {
      double d = 1e300;
      for (std::size_t s = 0; s < step; ++s) d = std::min(d, squared_distance(data.row(i), data.row(ids[s])));
      return d;
    };
    double best = 0.0;
    for (std::size_t i = 0; i < 20; ++i) best = std::max(best, min_to_chosen(i));
    EXPECT_EQ(min_to_chosen(ids[step]), best);
  }
}

TEST(Fps, BeatsRandomSubsetsOnCoverage) {
  Rng rng(8);
  int wins = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Matrix data = random_matrix(rng, 60, 2);
    const Matrix f = farthest_point(data, 8, trial);
    std::vector<std::size_t> perm(60);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    perm.resize(8);
    const Matrix r = gather_rows(data, perm);
    if (min_pairwise(f) >= min_pairwise(r)) ++wins;
  }
  EXPECT_GE(wins, 95);
}

TEST(Lengthscale, TwoRows) {
  const Matrix data{{0.0, 0.0}, {3.0, 4.0}};
  EXPECT_DOUBLE_EQ(estimate_lengthscale(data), 5.0);
}

TEST(Lengthscale, UnitGridMedianByEnumeration) {
  // Balanced 1-D grid {0,1}: pairs are 0 (within) or 1 (across).
  Matrix data(6, 1);
  for (std::size_t i = 0; i < 6; ++i) data(i, 0) = static_cast<double>(i % 2);
  std::vector<double> d;
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = i + 1; j < 6; ++j) d.push_back(std::abs(data(i, 0) - data(j, 0)));
  std::sort(d.begin(), d.end());
  const double oracle = d.size() % 2 ? d[d.size() / 2] : 0.5 * (d[d.size() / 2 - 1] + d[d.size() / 2]);
  EXPECT_DOUBLE_EQ(oracle, 1.0);
  EXPECT_DOUBLE_EQ(estimate_lengthscale(data), oracle);
}

TEST(Lengthscale, AllIdenticalIsDegenerate) {
  EXPECT_GAPA_ERROR(estimate_lengthscale(Matrix(5, 2, 1.0)), ErrorCode::kDegenerateScale);
  EXPECT_GAPA_ERROR(estimate_lengthscale(Matrix(1, 2, 1.0)), ErrorCode::kTooFewRows);
}

TEST(Lengthscale, PermutationInvariantWithFullBudget) {
  Rng rng(9);
  const Matrix data = random_matrix(rng, 40, 3);
  std::vector<std::size_t> perm(40);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  EXPECT_EQ(estimate_lengthscale(data), estimate_lengthscale(gather_rows(data, perm)));
}

TEST(Lengthscale, SampledBudgetApproximatesFull) {
  Rng rng(10);
  const Matrix data = random_matrix(rng, 400, 3);
  const double full = estimate_lengthscale(data);
  const double sampled = estimate_lengthscale(data, 20000, 3);
  EXPECT_NEAR(sampled, full, 0.03 * full);
}

TEST(SignalVar, ConstantColumnClamped) {
  const Vector v = estimate_signal_var(Matrix{{1.0, 0.0}, {1.0, 2.0}});
  EXPECT_DOUBLE_EQ(v[0], 1e-12);
  EXPECT_DOUBLE_EQ(v[1], 2.0);
}

TEST(SignalVar, MatchesTwoPassOracle) {
  Rng rng(11);
  const Matrix data = random_matrix(rng, 500, 4, 3.0);
  const Vector v = estimate_signal_var(data);
  for (std::size_t j = 0; j < 4; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < 500; ++i) mean += data(i, j);
    mean /= 500.0;
    double ss = 0.0;
    for (std::size_t i = 0; i < 500; ++i) ss += (data(i, j) - mean) * (data(i, j) - mean);
    EXPECT_NEAR(v[j], ss / 499.0, 1e-12 * ss / 499.0);
  }
}

TEST(InducingSet, SaveLoadRoundTrip) {
  Rng rng(12);
  const auto dir = temp_dir("induce_rt");
  const Matrix data = random_matrix(rng, 120, 3);
  auto set = build_inducing_set(data, 4, 30, InducingMethod::kFarthestPoint, 3);
  set.fingerprint[0] = 0xab;
  save_inducing_set(set, dir / "s.gapi");
  const InducingSet back = load_inducing_set(dir / "s.gapi");
  EXPECT_EQ(back.layer_index, 4u);
  EXPECT_EQ(back.z, set.z);
  EXPECT_EQ(back.params.lengthscale, set.params.lengthscale);
  EXPECT_EQ(back.params.signal_var, set.params.signal_var);
  EXPECT_EQ(back.params.jitter, set.params.jitter);
  EXPECT_EQ(back.method, set.method);
  EXPECT_EQ(back.fingerprint, set.fingerprint);
}

TEST(InducingSet, CacheFingerprintGuard) {
  Rng rng(13);
  const auto dir = temp_dir("induce_fp");
  const NetworkSpec net = random_mlp(rng, 2, {6}, 1, ActivationTag::kTanh);
  const NetworkSpec other = random_mlp(rng, 2, {6}, 1, ActivationTag::kTanh);
  std::vector<Vector> xs;
  for (int i = 0; i < 50; ++i) xs.push_back(random_vector(rng, 2));
  const auto cache = build_cache(net, std::span<const Vector>(xs), 1, dir / "c.gapc", "d");
  const auto ok = build_inducing_set(cache, cache_fingerprint(net, "d"), 10,
                                     InducingMethod::kKMeansPP, 1);
  EXPECT_EQ(ok.fingerprint, cache.fingerprint());
  EXPECT_EQ(ok.size(), 10u);
  EXPECT_GAPA_ERROR(build_inducing_set(cache, cache_fingerprint(other, "d"), 10,
                                       InducingMethod::kKMeansPP, 1),
                    ErrorCode::kFingerprintMismatch);
  EXPECT_GAPA_ERROR(build_inducing_set(cache, 51, InducingMethod::kKMeansPP, 1),
                    ErrorCode::kTooFewRows);
}

TEST(InducingSet, CorruptFile) {
  Rng rng(14);
  const auto dir = temp_dir("induce_bad");
  const auto set = build_inducing_set(random_matrix(rng, 20, 2), 0, 5, InducingMethod::kKMeansPP, 1);
  save_inducing_set(set, dir / "s.gapi");
  Bytes b = read_file(dir / "s.gapi");
  b.resize(b.size() / 2);
  write_file(dir / "t.gapi", b);
  EXPECT_GAPA_ERROR(load_inducing_set(dir / "t.gapi"), ErrorCode::kCorruptFile);
}

TEST(KernelParams, Validation) {
  KernelParams p{1.0, Vector{1.0}, 1e-6};
  EXPECT_NO_THROW(p.check());
  p.lengthscale = 0.0;
  EXPECT_GAPA_ERROR(p.check(), ErrorCode::kInvalidArgument);
  p = {1.0, Vector{1e-13}, 1e-6};
  EXPECT_GAPA_ERROR(p.check(), ErrorCode::kInvalidArgument);
  p = {1.0, Vector{1.0}, 0.0};
  EXPECT_GAPA_ERROR(p.check(), ErrorCode::kInvalidArgument);
}
