// gapa: pipeline driver. Exit codes: 0 success, 2 validation error,
// 3 numerical failure.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "gapa/network_io.hpp"
#include "gapa/pipeline.hpp"
#include "gapa/toy.hpp"

namespace {

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<double> jitter;
  std::optional<std::size_t> k;
  std::optional<std::size_t> m;
  std::optional<std::string> variant;
};

gapa::PipelineConfig load(const std::string& path, const Overrides& o) {
  auto cfg = gapa::load_config(path);
  if (o.seed) cfg.seed = *o.seed;
  if (o.out_dir) cfg.out_dir = *o.out_dir;
  if (o.jitter) cfg.jitter = *o.jitter;
  if (o.k) cfg.k = *o.k;
  if (o.m) cfg.m = *o.m;
  if (o.variant) cfg.variant = gapa::parse_variant(*o.variant);
  return cfg;
}

struct ToyArgs {
  std::string kind = "two_moons";
  std::size_t n = 500;
  double noise = 0.1;
  double angle = 0.0;
  bool fill_gap = false;
  std::string out;
  std::size_t far_field = 0;
  std::string far_out;
  std::string network;
  std::vector<std::size_t> hidden = {16, 16};
  std::size_t epochs = 200;
  double lr = 0.01;
};

void gen_toy(const ToyArgs& a, std::uint64_t seed) {
  using namespace gapa;
  const ToyKind kind = parse_toy(a.kind);
  Dataset d;
  switch (kind) {
    case ToyKind::kTwoMoons: d = make_two_moons(a.n, a.noise, seed); break;
    case ToyKind::kRotatedShift: d = make_rotated_shift(a.n, a.noise, a.angle, seed); break;
    case ToyKind::kGapRegression1D: {
      GapParams p;
      p.fill_gap = a.fill_gap;
      d = make_gap_regression(a.n, seed, p);
      break;
    }
  }
  write_csv(d, a.out);
  std::cout << a.out << "\n";
  if (a.far_field > 0) {
    GAPA_REQUIRE(!a.far_out.empty(), ErrorCode::kInvalidArgument,
                 "--far-field needs --far-out");
    Dataset far;
    far.x = far_field(d.x, a.far_field, split_seed(seed, "far"));
    far.labels.assign(a.far_field, 0);
    write_csv(far, a.far_out);
    std::cout << a.far_out << "\n";
  }
  if (!a.network.empty()) {
    MlpConfig mc;
    mc.hidden = a.hidden;
    mc.epochs = a.epochs;
    mc.lr = a.lr;
    mc.seed = split_seed(seed, "mlp");
    save_network(train_mlp(d, mc), a.network);
    std::cout << a.network << "\n";
  }
}

std::vector<double> parse_values(const std::string& s) {
  std::vector<double> out;
  std::size_t at = 0;
  while (at <= s.size()) {
    const auto comma = s.find(',', at);
    const auto cell = s.substr(at, comma == std::string::npos ? std::string::npos : comma - at);
    try {
      out.push_back(std::stod(cell));
    } catch (const std::exception&) {
      gapa::fail(gapa::ErrorCode::kInvalidArgument, "bad sweep value '" + cell + "'");
    }
    if (comma == std::string::npos) break;
    at = comma + 1;
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GAPA: Gaussian-process activations for frozen networks"};
  app.require_subcommand(1);
  Overrides o;
  std::string config;
  auto global = [&](CLI::App* sub) {
    sub->add_option("--config", config, "pipeline config (JSON)")->required();
    sub->add_option_function<std::uint64_t>("--seed", [&](const std::uint64_t& v) { o.seed = v; }, "root seed");
    sub->add_option_function<std::string>("--out-dir", [&](const std::string& v) { o.out_dir = v; }, "output directory");
    sub->add_option_function<double>("--jitter", [&](const double& v) { o.jitter = v; }, "relative jitter");
    sub->add_option_function<std::size_t>("--k", [&](const std::size_t& v) { o.k = v; }, "neighbours K");
    sub->add_option_function<std::size_t>("--m", [&](const std::size_t& v) { o.m = v; }, "inducing points M");
    sub->add_option_function<std::string>("--variant", [&](const std::string& v) { o.variant = v; }, "attention variant")
        ->check(CLI::IsMember({"a", "b"}));
  };

  auto* cache = app.add_subcommand("cache", "cache pre-activations at each gapa point");
  auto* induce = app.add_subcommand("induce", "build inducing sets and neighbour indices");
  auto* attach = app.add_subcommand("attach", "write the augmented network container");
  auto* infer = app.add_subcommand("infer", "per-sample predictions as JSON lines");
  auto* eval = app.add_subcommand("eval", "metrics report");
  auto* sweep = app.add_subcommand("sweep", "metric-vs-parameter CSV");
  for (auto* s : {cache, induce, attach, infer, eval, sweep}) global(s);

  std::string input, output;
  infer->add_option("--input", input, "input CSV")->required();
  infer->add_option("--output", output, "predictions path");

  std::string axis, values;
  std::size_t sweep_seeds = 1;
  sweep->add_option("--axis", axis, "M, K or layer")->required();
  sweep->add_option("--values", values, "comma-separated values")->required();
  sweep->add_option("--seeds", sweep_seeds, "seed replicates per value");

  ToyArgs toy;
  std::uint64_t toy_seed = 0;
  auto* gen = app.add_subcommand("gen-toy", "generate a toy dataset (optionally train an MLP)");
  gen->add_option("--kind", toy.kind, "two_moons, gap_regression or rotated_shift")
      ->check(CLI::IsMember({"two_moons", "gap_regression", "rotated_shift"}));
  gen->add_option("--n", toy.n, "rows");
  gen->add_option("--noise", toy.noise, "two-moons noise std");
  gen->add_option("--angle", toy.angle, "rotation in degrees (rotated_shift)");
  gen->add_flag("--fill-gap", toy.fill_gap, "sample the gap too (gap_regression)");
  gen->add_option("--out", toy.out, "output CSV")->required();
  gen->add_option("--far-field", toy.far_field, "also write this many far-field points");
  gen->add_option("--far-out", toy.far_out, "far-field CSV");
  gen->add_option("--network", toy.network, "train an MLP on the data and save it here");
  gen->add_option("--hidden", toy.hidden, "hidden widths")->delimiter(',');
  gen->add_option("--epochs", toy.epochs, "training epochs");
  gen->add_option("--lr", toy.lr, "Adam learning rate");
  gen->add_option("--seed", toy_seed, "seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      gen_toy(toy, toy_seed);
      return 0;
    }
    const auto cfg = load(config, o);
    if (cache->parsed()) {
      for (const auto& p : gapa::cmd_cache(cfg)) std::cout << p.string() << "\n";
    } else if (induce->parsed()) {
      for (const auto& p : gapa::cmd_induce(cfg)) std::cout << p.string() << "\n";
    } else if (attach->parsed()) {
      std::cout << gapa::cmd_attach(cfg).string() << "\n";
    } else if (infer->parsed()) {
      std::cout << gapa::cmd_infer(cfg, input, output).string() << "\n";
    } else if (eval->parsed()) {
      std::cout << gapa::cmd_eval(cfg).dump(2) << "\n";
    } else if (sweep->parsed()) {
      std::cout << gapa::cmd_sweep(cfg, gapa::parse_axis(axis), parse_values(values), sweep_seeds)
                       .string()
                << "\n";
    }
  } catch (const gapa::Error& e) {
    std::cerr << "error [" << gapa::error_code_name(e.code()) << "]: " << e.what() << "\n";
    return e.is_numerical() ? 3 : 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
