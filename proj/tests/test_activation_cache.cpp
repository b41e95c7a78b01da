#include "test_util.hpp"

#include "gapa/activation_cache.hpp"
#include "gapa/io.hpp"

using namespace gapa;
using namespace gapa::testing;

namespace {

NetworkSpec identity_net(std::size_t d) {
  NetworkSpec net;
  net.input_width = d;
  net.layers = {ActivationLayer{ActivationTag::kIdentity}};
  net.gapa_points = {0};
  return net;
}

std::vector<Vector> random_inputs(Rng& rng, std::size_t n, std::size_t d) {
  std::vector<Vector> xs;
  for (std::size_t i = 0; i < n; ++i) xs.push_back(random_vector(rng, d));
  return xs;
}

}  // namespace

TEST(Cache, IdentityNetworkStoresInputs) {
  const auto dir = temp_dir("cache_id");
  const std::vector<Vector> xs{{1.0, 2.0}, {3.0, 4.0}};
  const auto c = build_cache(identity_net(2), std::span<const Vector>(xs), 0, dir / "c.gapc");
  ASSERT_EQ(c.rows(), 2u);
  EXPECT_EQ(c.width(), 2u);
  EXPECT_EQ(c.layer_index(), 0u);
  EXPECT_EQ(c.row(0), xs[0]);
  EXPECT_EQ(c.row(1), xs[1]);
}

TEST(Cache, SingleLinearRowIsAffineMap) {
  const auto dir = temp_dir("cache_lin");
  NetworkSpec net;
  net.input_width = 2;
  net.layers = {LinearLayer{Matrix{{1.0, 2.0}, {-1.0, 0.5}}, Vector{0.25, -3.0}},
                ActivationLayer{ActivationTag::kTanh}};
  net.gapa_points = {1};
  const std::vector<Vector> xs{{2.0, -1.0}};
  const auto c = build_cache(net, std::span<const Vector>(xs), 1, dir / "c.gapc");
  const Vector r = c.row(0);
  EXPECT_FLOAT_EQ(r[0], 1.0 * 2.0 + 2.0 * -1.0 + 0.25);
  EXPECT_FLOAT_EQ(r[1], -2.0 - 0.5 - 3.0);
}

TEST(Cache, RowsMatchRecomputedPreactivations) {
  Rng rng(21);
  const auto dir = temp_dir("cache_mlp");
  const NetworkSpec net = random_mlp(rng, 4, {8, 6}, 2, ActivationTag::kTanh);
  const auto xs = random_inputs(rng, 100, 4);
  for (std::size_t layer : net.gapa_points) {
    const auto c = build_cache(net, std::span<const Vector>(xs), layer,
                               dir / ("c" + std::to_string(layer) + ".gapc"), "ds");
    ASSERT_EQ(c.rows(), 100u);
    for (std::size_t i = 0; i < xs.size(); ++i) {
      // Independent recomputation: explicit loop over linear/activation layers.
      std::vector<double> h(xs[i].begin(), xs[i].end());
      for (std::size_t l = 0; l < layer; ++l) {
        if (const auto* lin = std::get_if<LinearLayer>(&net.layers[l])) {
          std::vector<double> z(lin->weight.rows());
          for (std::size_t r = 0; r < z.size(); ++r) {
            z[r] = lin->bias[r];
            for (std::size_t k = 0; k < h.size(); ++k) z[r] += lin->weight(r, k) * h[k];
          }
          h = z;
        } else {
          for (double& v : h) v = std::tanh(v);
        }
      }
      const Vector row = c.row(i);
      for (std::size_t j = 0; j < h.size(); ++j) EXPECT_NEAR(row[j], h[j], 1e-6);
    }
  }
}

TEST(Cache, StreamBlocksCoverRowsInOrder) {
  Rng rng(22);
  const auto dir = temp_dir("cache_stream");
  const auto xs = random_inputs(rng, 37, 3);
  const auto c = build_cache(identity_net(3), std::span<const Vector>(xs), 0, dir / "c.gapc");
  const Matrix full = c.load();
  for (std::size_t batch : {std::size_t{1}, std::size_t{5}, std::size_t{37}, std::size_t{100}}) {
    std::size_t blocks = 0, at = 0;
    double sum = 0.0;
    for (const Matrix& b : c.stream_rows(batch)) {
      ++blocks;
      for (std::size_t i = 0; i < b.rows(); ++i, ++at)
        for (std::size_t j = 0; j < 3; ++j) {
          EXPECT_EQ(b(i, j), full(at, j));
          sum += b(i, j);
        }
    }
    EXPECT_EQ(at, 37u);
    EXPECT_EQ(blocks, (37 + batch - 1) / batch);
    double ref = 0.0;
    for (double v : full.values()) ref += v;
    EXPECT_DOUBLE_EQ(sum, ref);
  }
}

TEST(Cache, SequenceInputCachesEveryPosition) {
  Rng rng(23);
  const auto dir = temp_dir("cache_seq");
  const std::vector<Sequence> seqs{{random_vector(rng, 2), random_vector(rng, 2)},
                                   {random_vector(rng, 2)}};
  const auto c = build_cache(identity_net(2), std::span<const Sequence>(seqs), 0, dir / "c.gapc");
  EXPECT_EQ(c.rows(), 3u);
}

TEST(Cache, RebuildIsByteIdentical) {
  Rng rng(24);
  const auto dir = temp_dir("cache_idem");
  const NetworkSpec net = random_mlp(rng, 3, {5}, 1, ActivationTag::kSiLU);
  const auto xs = random_inputs(rng, 50, 3);
  build_cache(net, std::span<const Vector>(xs), 1, dir / "a.gapc", "id");
  build_cache(net, std::span<const Vector>(xs), 1, dir / "b.gapc", "id");
  EXPECT_EQ(read_file(dir / "a.gapc"), read_file(dir / "b.gapc"));
}

TEST(Cache, FingerprintTracksNetworkAndDataset) {
  Rng rng(25);
  const NetworkSpec a = random_mlp(rng, 3, {5}, 1, ActivationTag::kSiLU);
  const NetworkSpec b = random_mlp(rng, 3, {5}, 1, ActivationTag::kSiLU);
  EXPECT_EQ(cache_fingerprint(a, "x"), cache_fingerprint(a, "x"));
  EXPECT_NE(cache_fingerprint(a, "x"), cache_fingerprint(b, "x"));
  EXPECT_NE(cache_fingerprint(a, "x"), cache_fingerprint(a, "y"));
}

TEST(Cache, Errors) {
  Rng rng(26);
  const auto dir = temp_dir("cache_err");
  const NetworkSpec net = random_mlp(rng, 3, {5}, 1, ActivationTag::kTanh);
  const std::vector<Vector> empty;
  EXPECT_GAPA_ERROR(build_cache(net, std::span<const Vector>(empty), 1, dir / "e.gapc"),
                    ErrorCode::kEmptyCache);
  const std::vector<Vector> bad{Vector{1.0}};
  EXPECT_GAPA_ERROR(build_cache(net, std::span<const Vector>(bad), 1, dir / "e.gapc"),
                    ErrorCode::kDimensionMismatch);
  const std::vector<Vector> ok{Vector{1.0, 2.0, 3.0}};
  EXPECT_GAPA_ERROR(build_cache(net, std::span<const Vector>(ok), 0, dir / "e.gapc"),
                    ErrorCode::kInvalidArgument);
  EXPECT_GAPA_ERROR(ActivationCache::open(dir / "missing.gapc"), ErrorCode::kMissingArtifact);
}

TEST(Cache, TruncatedFileIsCorrupt) {
  Rng rng(27);
  const auto dir = temp_dir("cache_trunc");
  const auto xs = random_inputs(rng, 10, 3);
  build_cache(identity_net(3), std::span<const Vector>(xs), 0, dir / "c.gapc");
  Bytes bytes = read_file(dir / "c.gapc");
  bytes.resize(bytes.size() - 5);
  write_file(dir / "t.gapc", bytes);
  EXPECT_GAPA_ERROR(ActivationCache::open(dir / "t.gapc"), ErrorCode::kCorruptFile);
  bytes.resize(20);
  write_file(dir / "t.gapc", bytes);
  EXPECT_GAPA_ERROR(ActivationCache::open(dir / "t.gapc"), ErrorCode::kCorruptFile);
}
