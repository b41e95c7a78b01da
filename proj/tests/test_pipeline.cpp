#include "test_util.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "gapa/pipeline.hpp"

using namespace gapa;
using namespace gapa::testing;
namespace fs = std::filesystem;

namespace {

int run(const std::string& args) {
  const std::string cmd = std::string(GAPA_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::vector<std::string> lines_of(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) out.push_back(line);
  return out;
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

}  // namespace

TEST(Toy, GeneratorsAreSeeded) {
  const auto a = make_two_moons(100, 0.1, 5), b = make_two_moons(100, 0.1, 5), c = make_two_moons(100, 0.1, 6);
  EXPECT_EQ(a.x.values(), b.x.values());
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_NE(a.x.values(), c.x.values());
  EXPECT_EQ(a.size(), 100u);
  EXPECT_EQ(a.num_classes(), 2u);
}

TEST(Toy, GapRegressionLeavesGapEmpty) {
  const auto d = make_gap_regression(500, 3);
  ASSERT_EQ(d.size(), 500u);
  for (std::size_t i = 0; i < d.size(); ++i) {
    EXPECT_TRUE(d.x(i, 0) < -1.0 || d.x(i, 0) > 1.0) << d.x(i, 0);
    EXPECT_GE(d.x(i, 0), -3.0);
    EXPECT_LE(d.x(i, 0), 3.0);
  }
  GapParams p;
  p.fill_gap = true;
  const auto f = make_gap_regression(500, 3, p);
  std::size_t inside = 0;
  for (std::size_t i = 0; i < f.size(); ++i) inside += std::abs(f.x(i, 0)) < 1.0;
  EXPECT_GT(inside, 0u);
}

TEST(Toy, FarFieldIsOutsideData) {
  const auto d = make_two_moons(300, 0.1, 1);
  const auto [centre, radius] = data_radius(d.x);
  const Matrix far = far_field(d.x, 100, 2);
  ASSERT_EQ(far.rows(), 100u);
  for (std::size_t i = 0; i < far.rows(); ++i)
    EXPECT_GT(std::sqrt(squared_distance(far.row(i), centre.span())), 3.0 * radius);
}

TEST(Toy, CsvRoundTrip) {
  const auto dir = temp_dir("csv");
  const auto cls = make_two_moons(20, 0.1, 1);
  write_csv(cls, dir / "c.csv");
  const auto back = read_csv(dir / "c.csv");
  EXPECT_EQ(back.x.values(), cls.x.values());
  EXPECT_EQ(back.labels, cls.labels);
  const auto reg = make_gap_regression(20, 1);
  write_csv(reg, dir / "r.csv");
  const auto rb = read_csv(dir / "r.csv");
  EXPECT_EQ(rb.task, Task::kRegression);
  EXPECT_EQ(rb.y, reg.y);
}

TEST(Config, ParsesKeysAndRejectsBadValues) {
  const json j = {{"network", "n.gapn"}, {"train", "t.csv"}, {"m", 64}, {"k", 8},
                  {"variant", "b"}, {"index", "ivf"}, {"seed", 11}, {"noise_head", {{"epochs", 5}}}};
  const auto c = parse_config(j, "/base");
  EXPECT_EQ(c.network, fs::path("/base/n.gapn"));
  EXPECT_EQ(c.m, 64u);
  EXPECT_EQ(c.k, 8u);
  EXPECT_EQ(c.variant, AttentionVariant::kB);
  EXPECT_EQ(c.index, IndexKind::kCoarseIVF);
  EXPECT_EQ(c.seed, 11u);
  EXPECT_EQ(c.noise.epochs, 5u);
  EXPECT_GAPA_ERROR(parse_config(json{{"variant", "c"}}), ErrorCode::kInvalidArgument);
  EXPECT_GAPA_ERROR(parse_config(json{{"m", "lots"}}), ErrorCode::kInvalidArgument);
}

class CliPipeline : public ::testing::Test {
 protected:
  static fs::path dir;

  static void SetUpTestSuite() {
    dir = temp_dir("cli");
    ASSERT_EQ(run("gen-toy --kind two_moons --n 300 --out " + (dir / "train.csv").string() +
                  " --network " + (dir / "net.gapn").string() + " --seed 0"),
              0);
    ASSERT_EQ(run("gen-toy --kind two_moons --n 150 --seed 1 --out " + (dir / "test.csv").string() +
                  " --far-field 150 --far-out " + (dir / "ood.csv").string()),
              0);
    write_text(dir / "config.json", R"({"network": "net.gapn", "train": "train.csv",
      "test": "test.csv", "ood": "ood.csv", "out_dir": "out", "m": 100, "k": 20, "seed": 3})");
    const std::string cfg = "--config " + (dir / "config.json").string();
    ASSERT_EQ(run("cache " + cfg), 0);
    ASSERT_EQ(run("induce " + cfg), 0);
    ASSERT_EQ(run("attach " + cfg), 0);
    ASSERT_EQ(run("eval " + cfg), 0);
  }

  static std::string cfg() { return "--config " + (dir / "config.json").string(); }
  static fs::path out() { return dir / "out"; }
};
fs::path CliPipeline::dir;

TEST_F(CliPipeline, ArtifactsExist) {
  EXPECT_TRUE(fs::exists(out() / "cache_L1.gapc"));
  EXPECT_TRUE(fs::exists(out() / "cache_L3.gapc"));
  EXPECT_TRUE(fs::exists(out() / "inducing_L1.gapi"));
  EXPECT_TRUE(fs::exists(out() / "inducing_L3.gapi"));
  EXPECT_TRUE(fs::exists(out() / "network_gapa.gapn"));
  EXPECT_TRUE(fs::exists(out() / "metrics.json"));
}

TEST_F(CliPipeline, MetricsReportMeanPreservation) {
  const json m = read_json(out() / "metrics.json");
  EXPECT_EQ(m["mean_preservation"], "pass");
  EXPECT_EQ(m["task"], "classification");
  EXPECT_EQ(m["n_test"], 150);
  EXPECT_EQ(m["n_ood"], 150);
  EXPECT_GT(m["accuracy"].get<double>(), 0.9);
  EXPECT_EQ(m["seeds"]["root"], 3);
  for (const char* key : {"nll", "ece", "mean_TU", "mean_EU", "ood_auroc_TU", "ood_auroc_EU"})
    EXPECT_TRUE(m.contains(key)) << key;
}

TEST_F(CliPipeline, MapAccuracyMatchesBackbone) {
  const json m = read_json(out() / "metrics.json");
  const NetworkSpec net = load_network(dir / "net.gapn");
  const Dataset test = read_csv(dir / "test.csv");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const Vector logits = forward_deterministic(net, Vector(test.x.row(i)));
    hit += argmax(logits.span()) == test.labels[i];
  }
  EXPECT_DOUBLE_EQ(m["map_accuracy"].get<double>(), double(hit) / double(test.size()));
}

TEST_F(CliPipeline, AurocRecomputedFromPredictions) {
  const json m = read_json(out() / "metrics.json");
  const auto rows = lines_of(out() / "eval_predictions.jsonl");
  ASSERT_EQ(rows.size(), 300u);
  std::vector<double> eu;
  std::vector<int> lab;
  for (const auto& line : rows) {
    const json r = json::parse(line);
    eu.push_back(r["EU"].get<double>());
    lab.push_back(r["ood"].get<bool>() ? 1 : 0);
  }
  EXPECT_DOUBLE_EQ(auroc(eu, lab), m["ood_auroc_EU"].get<double>());
  EXPECT_GT(m["ood_auroc_EU"].get<double>(), 0.9);
}

TEST_F(CliPipeline, PredictionMeansEqualBackbone) {
  const NetworkSpec net = load_network(dir / "net.gapn");
  const Dataset test = read_csv(dir / "test.csv");
  ASSERT_EQ(run("infer " + cfg() + " --input " + (dir / "test.csv").string() + " --output " +
                (dir / "pred.jsonl").string()),
            0);
  const auto rows = lines_of(dir / "pred.jsonl");
  ASSERT_EQ(rows.size(), test.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const json r = json::parse(rows[i]);
    const Vector ref = forward_deterministic(net, Vector(test.x.row(i)));
    const auto mean = r["mean"].get<std::vector<double>>();
    EXPECT_EQ(mean, ref.values());
    for (double v : r["var"].get<std::vector<double>>()) EXPECT_GE(v, 0.0);
  }
}

TEST_F(CliPipeline, RerunIsByteIdentical) {
  const auto dir2 = dir / "again";
  const std::string c = cfg() + " --out-dir " + dir2.string();
  ASSERT_EQ(run("cache " + c), 0);
  ASSERT_EQ(run("induce " + c), 0);
  ASSERT_EQ(run("attach " + c), 0);
  for (const char* f : {"cache_L1.gapc", "inducing_L1.gapi", "inducing_L3.gapi", "network_gapa.gapn"})
    EXPECT_EQ(read_file(out() / f), read_file(dir2 / f)) << f;
}

TEST_F(CliPipeline, SeedOverrideChangesInducingSet) {
  const auto dir2 = dir / "seeded";
  const std::string c = cfg() + " --seed 4 --out-dir " + dir2.string();
  ASSERT_EQ(run("cache " + c), 0);
  ASSERT_EQ(run("induce " + c), 0);
  EXPECT_NE(read_file(out() / "inducing_L1.gapi"), read_file(dir2 / "inducing_L1.gapi"));
}

TEST_F(CliPipeline, SweepOverKWritesRows) {
  const auto dir2 = dir / "sweepk";
  ASSERT_EQ(run("sweep " + cfg() + " --out-dir " + dir2.string() + " --axis K --values 1,5,50"), 0);
  const auto rows = lines_of(dir2 / "sweep_K.csv");
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0].rfind("K,seed,nll", 0), 0u);
  for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_EQ(rows[i].back(), ',') << rows[i];
}

TEST_F(CliPipeline, SweepOverMRecordsPerRowErrors) {
  const auto dir2 = dir / "sweepm";
  ASSERT_EQ(run("sweep " + cfg() + " --out-dir " + dir2.string() + " --axis M --values 10,100,1000"), 0);
  const auto rows = lines_of(dir2 / "sweep_M.csv");
  ASSERT_EQ(rows.size(), 4u);
  // K = 20 exceeds M = 10: that run fails, the others complete.
  EXPECT_NE(rows[1].find("InvalidArgument"), std::string::npos) << rows[1];
  EXPECT_EQ(rows[2].back(), ',');
  EXPECT_EQ(rows[3].back(), ',');
}

TEST_F(CliPipeline, LayerSweepHasOneRowPerLayer) {
  const auto dir2 = dir / "sweepl";
  ASSERT_EQ(run("sweep " + cfg() + " --out-dir " + dir2.string() + " --axis layer --values 1,3 --seeds 2"), 0);
  const auto rows = lines_of(dir2 / "sweep_layer.csv");
  EXPECT_EQ(rows.size(), 5u);
}

TEST_F(CliPipeline, ExitCodes) {
  EXPECT_EQ(run("--help"), 0);
  EXPECT_EQ(run("cache"), 2);
  EXPECT_EQ(run("cache --config " + (dir / "missing.json").string()), 2);
  EXPECT_EQ(run("sweep " + cfg() + " --axis Q --values 1"), 2);
  EXPECT_EQ(run("induce " + cfg() + " --k 500 --out-dir " + (dir / "bigk").string()), 2);
  // Every training row identical: the lengthscale heuristic has no scale.
  std::string same = "x0,x1,label\n";
  for (int i = 0; i < 20; ++i) same += "0.5,0.5," + std::to_string(i % 2) + "\n";
  write_text(dir / "same.csv", same);
  write_text(dir / "same.json", R"({"network": "net.gapn", "train": "same.csv", "out_dir": "same_out",
                                   "m": 10, "k": 5})");
  const std::string sc = "--config " + (dir / "same.json").string();
  ASSERT_EQ(run("cache " + sc), 0);
  EXPECT_EQ(run("induce " + sc), 3);
}

TEST(Pipeline, NetworkWithoutGapaPointsHasZeroVariance) {
  const auto train = make_two_moons(200, 0.1, 1);
  MlpConfig mc;
  mc.hidden = {8};
  mc.epochs = 50;
  NetworkSpec net = train_mlp(train, mc);
  net.gapa_points.clear();
  AttachOptions o;
  o.m = 50;
  o.k = 10;
  const auto g = attach_gapa(net, train.x, o);
  EXPECT_TRUE(g.gapa.empty());
  const auto p = predict(g, Vector(train.x.row(0)), {}, 0);
  for (double v : p.var) EXPECT_EQ(v, 0.0);
  EXPECT_NEAR(p.u.epistemic, 0.0, 1e-12);
}

TEST(Pipeline, RegressionAttachFitsNoiseHead) {
  const auto dir = temp_dir("reg");
  write_csv(make_gap_regression(200, 1), dir / "train.csv");
  write_csv(make_gap_regression(100, 2), dir / "test.csv");
  MlpConfig mc;
  mc.hidden = {16};
  mc.epochs = 300;
  save_network(train_mlp(read_csv(dir / "train.csv"), mc), dir / "net.gapn");
  PipelineConfig c = parse_config(json{{"network", "net.gapn"}, {"train", "train.csv"}, {"test", "test.csv"},
                                       {"out_dir", "out"}, {"m", 50}, {"k", 10},
                                       {"noise_head", {{"epochs", 200}}}},
                                  dir);
  cmd_cache(c);
  cmd_induce(c);
  cmd_attach(c);
  const auto model = load_gapa_model(c.model_path());
  ASSERT_TRUE(model.noise.has_value());
  const json m = cmd_eval(c);
  EXPECT_EQ(m["mean_preservation"], "pass");
  for (const char* key : {"rmse", "gaussian_nll", "crps", "cqm"}) EXPECT_TRUE(m.contains(key)) << key;
}

TEST(Pipeline, AttachRejectsForeignInducingSet) {
  const auto dir = temp_dir("foreign");
  write_csv(make_two_moons(100, 0.1, 1), dir / "a.csv");
  write_csv(make_two_moons(100, 0.1, 2), dir / "b.csv");
  MlpConfig mc;
  mc.hidden = {8};
  mc.epochs = 20;
  save_network(train_mlp(read_csv(dir / "a.csv"), mc), dir / "net.gapn");
  PipelineConfig c = parse_config(json{{"network", "net.gapn"}, {"train", "a.csv"}, {"out_dir", "out"},
                                       {"m", 20}, {"k", 5}},
                                  dir);
  cmd_cache(c);
  cmd_induce(c);
  c.train = dir / "b.csv";
  EXPECT_GAPA_ERROR(cmd_attach(c), ErrorCode::kFingerprintMismatch);
}
