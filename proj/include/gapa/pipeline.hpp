#pragma once

// End-to-end driver: cache -> induce -> attach -> infer -> eval, plus the
// in-memory attachment used by sweeps and tests.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "gapa/activation_cache.hpp"
#include "gapa/heads.hpp"
#include "gapa/inducing.hpp"
#include "gapa/metrics.hpp"
#include "gapa/neighbor_index.hpp"
#include "gapa/network_io.hpp"
#include "gapa/propagation.hpp"
#include "gapa/random.hpp"
#include "gapa/toy.hpp"

namespace gapa {

using nlohmann::json;

// ---------------------------------------------------------------------------
// In-memory attachment.

struct AttachOptions {
  std::size_t m = kDefaultInducingPoints;  // capped at the available rows
  std::size_t k = kDefaultNeighbors;
  InducingMethod method = InducingMethod::kKMeansPP;
  IndexConfig index;
  double jitter = 1e-6;
  std::size_t pair_budget = kDefaultPairBudget;
  std::uint64_t seed = 0;
  std::vector<std::size_t> layers;  // empty: every gapa point of the network
  AttentionVariant variant = AttentionVariant::kA;
};

inline std::vector<std::size_t> resolve_layers(const NetworkSpec& net,
                                               const std::vector<std::size_t>& layers) {
  if (layers.empty()) return {net.gapa_points.begin(), net.gapa_points.end()};
  for (std::size_t l : layers)
    GAPA_REQUIRE(net.gapa_points.count(l) == 1, ErrorCode::kInvalidArgument,
            "layer " + std::to_string(l) + " is not a gapa point");
  return layers;
}

/// Pre-activations entering `layer`, one row per sequence position.
inline Matrix preactivations(const NetworkSpec& net, std::span<const Sequence> data,
                             std::size_t layer) {
  const std::size_t width = width_before(net, layer);
  std::vector<double> rows;
  std::size_t n = 0;
  for (const auto& seq : data)
    for (const auto& z : forward_until(net, seq, layer)) {
      rows.insert(rows.end(), z.begin(), z.end());
      ++n;
    }
  return Matrix(n, width, std::move(rows));
}

inline std::vector<Sequence> as_sequences(const Matrix& x) {
  std::vector<Sequence> out;
  out.reserve(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) out.push_back(Sequence{Vector(x.row(i))});
  return out;
}

inline std::uint64_t layer_seed(std::uint64_t root, std::string_view stage,
                                std::size_t layer) {
  return split_seed(split_seed(root, stage), static_cast<std::uint64_t>(layer));
}

inline GapaLayer make_gapa_layer(const NetworkSpec& net, std::size_t layer,
                                 NeighborIndex index, std::size_t k) {
  const auto& act = std::get<ActivationLayer>(net.layers[layer]);
  return GapaLayer(layer, act.fn, std::move(index), k);
}

/// Builds inducing sets and indices for the selected gapa points directly
/// from the training data and returns the attached network.
inline GapaNetwork attach_gapa(const NetworkSpec& net, std::span<const Sequence> data,
                               const AttachOptions& opts) {
  validate(net);
  GapaNetwork g;
  g.net = net;
  g.variant = opts.variant;
  const auto layers = resolve_layers(net, opts.layers);
  g.net.gapa_points = {layers.begin(), layers.end()};
  for (std::size_t l : layers) {
    const Matrix z = preactivations(net, data, l);
    const std::size_t m = std::min(opts.m, z.rows());
    GAPA_REQUIRE(opts.k <= m, ErrorCode::kInvalidArgument,
            "K=" + std::to_string(opts.k) + " exceeds M=" + std::to_string(m));
    InducingOptions io;
    io.jitter = opts.jitter;
    io.pair_budget = opts.pair_budget;
    auto set = std::make_shared<const InducingSet>(build_inducing_set(
        z, l, m, opts.method, layer_seed(opts.seed, "induce", l), io));
    IndexConfig ic = opts.index;
    ic.seed = layer_seed(opts.seed, "index", l);
    g.gapa.emplace(l, make_gapa_layer(net, l, NeighborIndex::build(set, ic), opts.k));
  }
  g.check();
  return g;
}

inline GapaNetwork attach_gapa(const NetworkSpec& net, const Matrix& x,
                               const AttachOptions& opts) {
  const auto seqs = as_sequences(x);
  return attach_gapa(net, seqs, opts);
}

inline std::size_t total_clamps(const GapaNetwork& g) {
  std::size_t n = 0;
  for (const auto& [_, layer] : g.gapa) n += layer.clamp_count();
  return n;
}

// ---------------------------------------------------------------------------
// Prediction.

enum class HeadKind { kLaplace, kMonteCarlo };

inline HeadKind parse_head(std::string_view s) {
  if (s == "laplace") return HeadKind::kLaplace;
  if (s == "mc") return HeadKind::kMonteCarlo;
  fail(ErrorCode::kInvalidArgument, "unknown head: " + std::string(s));
}

struct PredictOptions {
  HeadKind head = HeadKind::kLaplace;
  std::size_t samples = kDefaultSamples;
  std::size_t top_k = kDefaultTopK;
  std::uint64_t seed = 0;
};

struct Prediction {
  Vector mean;
  Vector var;
  Vector probs;  // classification only
  UncertaintyDecomposition u;
  double epistemic_se = 0.0;
  double aleatoric_var = 0.0;  // regression with a noise head
};

/// Input to the final linear layer: the representation the noise head reads.
inline Vector prelogit_features(const NetworkSpec& net, const Sequence& x) {
  std::size_t last = net.layers.size();
  for (std::size_t i = 0; i < net.layers.size(); ++i)
    if (std::holds_alternative<LinearLayer>(net.layers[i])) last = i;
  GAPA_REQUIRE(last < net.layers.size(), ErrorCode::kInvalidArgument,
          "network has no linear layer");
  return forward_until(net, x, last).back();
}

/// `sample_id` keys the Monte-Carlo stream so predictions do not depend on
/// evaluation order.
inline Prediction predict(const GapaNetwork& g, const Sequence& x,
                          const PredictOptions& opts, std::uint64_t sample_id,
                          const NoiseHead* noise = nullptr) {
  const GaussianVector out = propagate_network(g, x);
  Prediction p;
  p.mean = out.mean();
  p.var = out.var();
  if (g.net.task == Task::kRegression) {
    if (noise != nullptr) p.aleatoric_var = noise->variance(prelogit_features(g.net, x).span());
    p.u.epistemic = p.var[0];
    p.u.aleatoric = p.aleatoric_var;
    p.u.total = p.u.epistemic + p.u.aleatoric;
    return p;
  }
  const auto mc = mc_entropy_decomposition(p.mean, p.var, opts.samples, opts.top_k,
                                           split_seed(opts.seed, sample_id));
  p.u = mc.u;
  p.epistemic_se = mc.epistemic_se;
  if (opts.head == HeadKind::kLaplace) {
    p.probs = laplace_bridge(p.mean, p.var);
  } else {
    p.probs = Vector(p.mean.size(), 0.0);
    for (std::size_t j = 0; j < mc.classes.size(); ++j)
      p.probs[mc.classes[j]] = mc.mean_probs[j];
  }
  return p;
}

inline Prediction predict(const GapaNetwork& g, const Vector& x,
                          const PredictOptions& opts, std::uint64_t sample_id,
                          const NoiseHead* noise = nullptr) {
  return predict(g, Sequence{x}, opts, sample_id, noise);
}

/// Fits the regression noise head on training data with the GAPA output
/// variance as the fixed epistemic term.
inline NoiseHead fit_regression_noise_head(const GapaNetwork& g, const Dataset& train,
                                           const NoiseHeadConfig& cfg) {
  GAPA_REQUIRE(g.net.task == Task::kRegression, ErrorCode::kInvalidArgument,
          "noise head needs a regression network");
  const std::size_t n = train.size();
  std::vector<double> feats;
  Vector means(n), epi(n);
  std::size_t width = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Sequence x{Vector(train.x.row(i))};
    const auto f = prelogit_features(g.net, x);
    width = f.size();
    feats.insert(feats.end(), f.begin(), f.end());
    const auto out = propagate_network(g, x);
    means[i] = out.mean()[0];
    epi[i] = out.var()[0];
  }
  return fit_noise_head(Matrix(n, width, std::move(feats)), train.y, means, epi, cfg);
}

inline json prediction_json(std::size_t id, const Prediction& p,
                            std::optional<double> label = std::nullopt) {
  json j;
  j["id"] = id;
  j["mean"] = p.mean.values();
  j["var"] = p.var.values();
  if (!p.probs.empty()) j["probs"] = p.probs.values();
  j["TU"] = p.u.total;
  j["AU"] = p.u.aleatoric;
  j["EU"] = p.u.epistemic;
  if (label) j["label"] = *label;
  return j;
}

// ---------------------------------------------------------------------------
// Evaluation.

struct EvalResult {
  json metrics;
  std::vector<Prediction> test;
  std::vector<Prediction> ood;
};

inline EvalResult evaluate(const GapaNetwork& g, const Dataset& test, const Dataset* ood,
                           const PredictOptions& opts, const NoiseHead* noise = nullptr) {
  GAPA_REQUIRE(test.size() > 0, ErrorCode::kTooFewRows, "empty test set");
  EvalResult r;
  json& m = r.metrics;
  const bool cls = g.net.task != Task::kRegression;
  bool preserved = true;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const Vector x(test.x.row(i));
    r.test.push_back(predict(g, x, opts, i, noise));
    if (!(r.test.back().mean == forward_deterministic(g.net, x))) preserved = false;
  }
  if (ood != nullptr)
    for (std::size_t i = 0; i < ood->size(); ++i)
      r.ood.push_back(predict(g, Vector(ood->x.row(i)), opts, test.size() + i, noise));

  m["task"] = task_name(g.net.task);
  m["n_test"] = test.size();
  m["mean_preservation"] = preserved ? "pass" : "fail";
  if (cls) {
    const std::size_t c = r.test.front().probs.size();
    Matrix probs(test.size(), c), map_probs(test.size(), c);
    double tu = 0.0, eu = 0.0;
    for (std::size_t i = 0; i < test.size(); ++i) {
      std::copy(r.test[i].probs.begin(), r.test[i].probs.end(), probs.row(i).begin());
      const auto sm = softmax(r.test[i].mean.span());
      std::copy(sm.begin(), sm.end(), map_probs.row(i).begin());
      tu += r.test[i].u.total;
      eu += r.test[i].u.epistemic;
    }
    m["accuracy"] = accuracy(probs, test.labels);
    m["map_accuracy"] = accuracy(map_probs, test.labels);
    m["nll"] = classification_nll(probs, test.labels);
    m["ece"] = ece(probs, test.labels);
    m["mean_TU"] = tu / static_cast<double>(test.size());
    m["mean_EU"] = eu / static_cast<double>(test.size());
  } else {
    Vector mu(test.size()), s2(test.size()), sd(test.size());
    double se = 0.0;
    for (std::size_t i = 0; i < test.size(); ++i) {
      const auto& p = r.test[i];
      mu[i] = p.mean[0];
      s2[i] = p.var[0] + p.aleatoric_var;
      sd[i] = std::sqrt(s2[i]);
      se += (test.y[i] - mu[i]) * (test.y[i] - mu[i]);
    }
    m["rmse"] = std::sqrt(se / static_cast<double>(test.size()));
    m["gaussian_nll"] = gaussian_nll(test.y, mu, s2);
    m["crps"] = crps_gaussian(test.y, mu, sd);
    m["cqm"] = cqm(test.y, mu, sd);
  }
  if (!r.ood.empty()) {
    std::vector<double> tu, eu;
    std::vector<int> lab;
    for (const auto& p : r.test) { tu.push_back(p.u.total); eu.push_back(p.u.epistemic); lab.push_back(0); }
    for (const auto& p : r.ood) { tu.push_back(p.u.total); eu.push_back(p.u.epistemic); lab.push_back(1); }
    m["n_ood"] = r.ood.size();
    m["ood_auroc_TU"] = auroc(tu, lab);
    m["ood_auroc_EU"] = auroc(eu, lab);
  }
  m["clamped_variances"] = total_clamps(g);
  return r;
}

// ---------------------------------------------------------------------------
// File-based pipeline.

struct PipelineConfig {
  std::filesystem::path network;
  std::filesystem::path model;  // augmented container; default out_dir/network_gapa.gapn
  std::filesystem::path train, test, ood;
  std::filesystem::path out_dir = "gapa_out";
  std::vector<std::size_t> layers;
  std::size_t m = kDefaultInducingPoints;
  std::size_t k = kDefaultNeighbors;
  InducingMethod method = InducingMethod::kKMeansPP;
  IndexKind index = IndexKind::kExactFlat;
  std::size_t n_lists = 0;
  std::size_t n_probe = 8;
  double jitter = 1e-6;
  HeadKind head = HeadKind::kLaplace;
  std::size_t samples = kDefaultSamples;
  std::size_t top_k = kDefaultTopK;
  AttentionVariant variant = AttentionVariant::kA;
  std::uint64_t seed = 0;
  NoiseHeadConfig noise;

  std::filesystem::path model_path() const {
    return model.empty() ? out_dir / "network_gapa.gapn" : model;
  }
  std::filesystem::path cache_path(std::size_t l) const {
    return out_dir / ("cache_L" + std::to_string(l) + ".gapc");
  }
  std::filesystem::path inducing_path(std::size_t l) const {
    return out_dir / ("inducing_L" + std::to_string(l) + ".gapi");
  }

  std::uint64_t stage_seed(std::string_view stage) const { return split_seed(seed, stage); }

  PredictOptions predict_options() const {
    return {head, samples, top_k, stage_seed("mc")};
  }

  void check() const {
    GAPA_REQUIRE(k >= 1, ErrorCode::kInvalidArgument, "K must be positive");
    GAPA_REQUIRE(m >= k, ErrorCode::kInvalidArgument, "M must be at least K");
    GAPA_REQUIRE(jitter > 0.0, ErrorCode::kInvalidArgument, "jitter must be positive");
    GAPA_REQUIRE(samples >= 1 && top_k >= 1, ErrorCode::kInvalidArgument,
            "samples and top_k must be positive");
  }
};

inline AttentionVariant parse_variant(std::string_view s) {
  if (s == "a") return AttentionVariant::kA;
  if (s == "b") return AttentionVariant::kB;
  fail(ErrorCode::kInvalidArgument, "unknown attention variant: " + std::string(s));
}

inline IndexKind parse_index_kind(std::string_view s) {
  if (s == "flat") return IndexKind::kExactFlat;
  if (s == "ivf") return IndexKind::kCoarseIVF;
  fail(ErrorCode::kInvalidArgument, "unknown index kind: " + std::string(s));
}

/// Reads a JSON config; relative paths resolve against the config's directory.
inline PipelineConfig parse_config(const json& j, const std::filesystem::path& base = {}) {
  PipelineConfig c;
  auto path = [&](const char* key) -> std::filesystem::path {
    if (!j.contains(key)) return {};
    std::filesystem::path p = j.at(key).get<std::string>();
    return p.is_relative() && !base.empty() ? base / p : p;
  };
  try {
    c.network = path("network");
    c.model = path("model");
    c.train = path("train");
    c.test = path("test");
    c.ood = path("ood");
    if (j.contains("out_dir")) c.out_dir = path("out_dir");
    if (j.contains("layers")) c.layers = j.at("layers").get<std::vector<std::size_t>>();
    c.m = j.value("m", c.m);
    c.k = j.value("k", c.k);
    c.method = parse_method(j.value("method", std::string(method_name(c.method))));
    c.index = parse_index_kind(j.value("index", std::string("flat")));
    c.n_lists = j.value("n_lists", c.n_lists);
    c.n_probe = j.value("n_probe", c.n_probe);
    c.jitter = j.value("jitter", c.jitter);
    c.head = parse_head(j.value("head", std::string("laplace")));
    c.samples = j.value("samples", c.samples);
    c.top_k = j.value("top_k", c.top_k);
    c.variant = parse_variant(j.value("variant", std::string("a")));
    c.seed = j.value("seed", c.seed);
    if (j.contains("noise_head")) {
      const auto& n = j.at("noise_head");
      c.noise.epochs = n.value("epochs", c.noise.epochs);
      c.noise.lr = n.value("lr", c.noise.lr);
      c.noise.hidden = n.value("hidden", c.noise.hidden);
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::kInvalidArgument, std::string("bad config: ") + e.what());
  }
  return c;
}

inline PipelineConfig load_config(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  json j;
  try {
    j = json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    fail(ErrorCode::kInvalidArgument, "config " + path.string() + ": " + e.what());
  }
  return parse_config(j, path.parent_path());
}

inline std::string dataset_id(const std::filesystem::path& csv) {
  Sha256 h;
  h.update(read_file(csv));
  return to_hex(h.finish());
}

inline void require_path(const std::filesystem::path& p, const char* what) {
  GAPA_REQUIRE(!p.empty(), ErrorCode::kInvalidArgument, std::string("config lacks ") + what);
  GAPA_REQUIRE(std::filesystem::exists(p), ErrorCode::kMissingArtifact,
          std::string(what) + " not found: " + p.string());
}

inline std::vector<std::filesystem::path> cmd_cache(const PipelineConfig& cfg) {
  require_path(cfg.network, "network");
  require_path(cfg.train, "train");
  const NetworkSpec net = load_network(cfg.network);
  const Dataset train = read_csv(cfg.train);
  const auto seqs = as_sequences(train.x);
  const auto id = dataset_id(cfg.train);
  std::vector<std::filesystem::path> out;
  for (std::size_t l : resolve_layers(net, cfg.layers)) {
    build_cache(net, std::span<const Sequence>(seqs), l, cfg.cache_path(l), id);
    out.push_back(cfg.cache_path(l));
  }
  return out;
}

inline std::vector<std::filesystem::path> cmd_induce(const PipelineConfig& cfg) {
  cfg.check();
  require_path(cfg.network, "network");
  require_path(cfg.train, "train");
  const NetworkSpec net = load_network(cfg.network);
  const Digest expected = cache_fingerprint(net, dataset_id(cfg.train));
  std::vector<std::filesystem::path> out;
  for (std::size_t l : resolve_layers(net, cfg.layers)) {
    require_path(cfg.cache_path(l), "activation cache");
    const auto cache = ActivationCache::open(cfg.cache_path(l));
    GAPA_REQUIRE(cache.layer_index() == l, ErrorCode::kCorruptFile, "cache layer index");
    InducingOptions io;
    io.jitter = cfg.jitter;
    const std::size_t m = std::min(cfg.m, cache.rows());
    GAPA_REQUIRE(cfg.k <= m, ErrorCode::kInvalidArgument,
            "K=" + std::to_string(cfg.k) + " exceeds M=" + std::to_string(m));
    auto set = std::make_shared<const InducingSet>(build_inducing_set(
        cache, expected, m, cfg.method, layer_seed(cfg.seed, "induce", l), io));
    IndexConfig ic{cfg.index, cfg.n_lists, cfg.n_probe, layer_seed(cfg.seed, "index", l)};
    const auto index = NeighborIndex::build(set, ic);
    save_inducing_set(*set, cfg.inducing_path(l), &index);
    out.push_back(cfg.inducing_path(l));
  }
  return out;
}

inline std::string gapa_section(std::size_t l) { return "gapa/L" + std::to_string(l); }

/// A loaded augmented container.
struct GapaModel {
  GapaNetwork g;
  std::optional<NoiseHead> noise;
  const NoiseHead* noise_ptr() const { return noise ? &*noise : nullptr; }
};

inline GapaModel gapa_model(const NetworkContainer& c) {
  GapaModel model;
  model.g.net = c.net;
  const auto cfg_it = c.sections.find("gapa/config");
  if (cfg_it == c.sections.end()) {
    model.g.net.gapa_points.clear();
    model.g.check();
    return model;
  }
  json cfg;
  try {
    cfg = json::parse(cfg_it->second.begin(), cfg_it->second.end());
    model.g.variant = parse_variant(cfg.at("variant").get<std::string>());
    const auto k = cfg.at("k").get<std::size_t>();
    const auto layers = cfg.at("layers").get<std::vector<std::size_t>>();
    model.g.net.gapa_points = {layers.begin(), layers.end()};
    for (std::size_t l : layers) {
      const auto it = c.sections.find(gapa_section(l));
      GAPA_REQUIRE(it != c.sections.end(), ErrorCode::kMissingArtifact,
              "container lacks section " + gapa_section(l));
      auto file = decode_inducing_file(it->second);
      NeighborIndex index = file.index ? std::move(*file.index) : NeighborIndex::build(file.set);
      model.g.gapa.emplace(l, make_gapa_layer(c.net, l, std::move(index), k));
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::kCorruptFile, std::string("bad gapa config section: ") + e.what());
  }
  if (const auto it = c.sections.find("noise_head"); it != c.sections.end()) {
    ByteReader r(it->second);
    model.noise = decode_noise_head(r);
  }
  model.g.check();
  return model;
}

inline GapaModel load_gapa_model(const std::filesystem::path& path) {
  return gapa_model(load_container(path));
}

inline std::filesystem::path cmd_attach(const PipelineConfig& cfg) {
  cfg.check();
  require_path(cfg.network, "network");
  require_path(cfg.train, "train");
  NetworkContainer c = load_container(cfg.network);
  const auto layers = resolve_layers(c.net, cfg.layers);
  const Digest expected = cache_fingerprint(c.net, dataset_id(cfg.train));
  for (std::size_t l : layers) {
    require_path(cfg.inducing_path(l), "inducing set");
    Bytes bytes = read_file(cfg.inducing_path(l));
    const auto file = decode_inducing_file(bytes);
    GAPA_REQUIRE(file.set->fingerprint == expected, ErrorCode::kFingerprintMismatch,
            cfg.inducing_path(l).string() + " was built from a different network or dataset");
    GAPA_REQUIRE(file.set->layer_index == l, ErrorCode::kCorruptFile, "inducing layer index");
    c.sections[gapa_section(l)] = std::move(bytes);
  }
  const json gc = {{"k", cfg.k},
                   {"variant", cfg.variant == AttentionVariant::kA ? "a" : "b"},
                   {"layers", layers}};
  const std::string text = gc.dump();
  c.sections["gapa/config"] = Bytes(text.begin(), text.end());
  c.sections.erase("noise_head");
  c.net.gapa_points = {layers.begin(), layers.end()};
  if (c.net.task == Task::kRegression) {
    const GapaModel model = gapa_model(c);
    NoiseHeadConfig nc = cfg.noise;
    nc.seed = cfg.stage_seed("noise_head");
    const NoiseHead head = fit_regression_noise_head(model.g, read_csv(cfg.train), nc);
    ByteWriter w;
    encode_noise_head(w, head);
    c.sections["noise_head"] = w.take();
  }
  save_container(c, cfg.model_path());
  return cfg.model_path();
}

inline std::optional<double> label_of(const Dataset& d, std::size_t i) {
  if (d.task == Task::kRegression) return d.y[i];
  if (!d.labels.empty()) return static_cast<double>(d.labels[i]);
  return std::nullopt;
}

inline void write_jsonl(const std::filesystem::path& path, const std::vector<json>& rows) {
  std::string text;
  for (const auto& r : rows) text += r.dump() + "\n";
  write_file(path, Bytes(text.begin(), text.end()));
}

inline std::filesystem::path cmd_infer(const PipelineConfig& cfg,
                                       const std::filesystem::path& inputs,
                                       std::filesystem::path out = {}) {
  cfg.check();
  require_path(cfg.model_path(), "model");
  require_path(inputs, "inputs");
  const GapaModel model = load_gapa_model(cfg.model_path());
  const Dataset data = read_csv(inputs);
  const auto opts = cfg.predict_options();
  std::vector<json> rows;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto p = predict(model.g, Vector(data.x.row(i)), opts, i, model.noise_ptr());
    rows.push_back(prediction_json(i, p, label_of(data, i)));
  }
  if (out.empty()) out = cfg.out_dir / "predictions.jsonl";
  write_jsonl(out, rows);
  return out;
}

/// Writes metrics.json and eval_predictions.jsonl (test rows then OOD rows,
/// OOD rows flagged) and returns the metrics.
inline json cmd_eval(const PipelineConfig& cfg) {
  cfg.check();
  require_path(cfg.model_path(), "model");
  require_path(cfg.test, "test");
  const GapaModel model = load_gapa_model(cfg.model_path());
  const Dataset test = read_csv(cfg.test);
  std::optional<Dataset> ood;
  if (!cfg.ood.empty()) {
    require_path(cfg.ood, "ood");
    ood = read_csv(cfg.ood);
  }
  const auto r = evaluate(model.g, test, ood ? &*ood : nullptr, cfg.predict_options(),
                          model.noise_ptr());
  json metrics = r.metrics;
  metrics["seeds"] = {{"root", cfg.seed},
                      {"mc", cfg.stage_seed("mc")},
                      {"noise_head", cfg.stage_seed("noise_head")}};
  std::vector<json> rows;
  for (std::size_t i = 0; i < r.test.size(); ++i) {
    auto j = prediction_json(i, r.test[i], label_of(test, i));
    j["ood"] = false;
    rows.push_back(std::move(j));
  }
  for (std::size_t i = 0; i < r.ood.size(); ++i) {
    auto j = prediction_json(r.test.size() + i, r.ood[i]);
    j["ood"] = true;
    rows.push_back(std::move(j));
  }
  write_jsonl(cfg.out_dir / "eval_predictions.jsonl", rows);
  const std::string text = metrics.dump(2) + "\n";
  write_file(cfg.out_dir / "metrics.json", Bytes(text.begin(), text.end()));
  return metrics;
}

// ---------------------------------------------------------------------------
// Sweeps.

enum class SweepAxis { kM, kK, kLayer };

inline SweepAxis parse_axis(std::string_view s) {
  if (s == "M" || s == "m") return SweepAxis::kM;
  if (s == "K" || s == "k") return SweepAxis::kK;
  if (s == "layer" || s == "layer_placement") return SweepAxis::kLayer;
  fail(ErrorCode::kInvalidArgument, "unknown sweep axis: " + std::string(s));
}

struct SweepRow {
  double value = 0.0;
  std::uint64_t seed = 0;
  double nll = std::numeric_limits<double>::quiet_NaN();
  double ece = std::numeric_limits<double>::quiet_NaN();
  double ood_auroc = std::numeric_limits<double>::quiet_NaN();
  double bald_auroc = std::numeric_limits<double>::quiet_NaN();
  double setup_seconds = 0.0;
  double query_seconds = 0.0;  // mean per test row
  std::string error;
};

/// One in-memory pipeline run per (value, seed). Per-run failures are
/// recorded in the row and the sweep continues.
inline std::vector<SweepRow> run_sweep(const NetworkSpec& net, const Dataset& train,
                                       const Dataset& test, const Dataset* ood,
                                       const PipelineConfig& cfg, SweepAxis axis,
                                       const std::vector<double>& values,
                                       const std::vector<std::uint64_t>& seeds) {
  GAPA_REQUIRE(!values.empty(), ErrorCode::kInvalidArgument, "sweep needs values");
  using clock = std::chrono::steady_clock;
  std::vector<SweepRow> rows;
  const auto train_seqs = as_sequences(train.x);
  for (double v : values) {
    for (std::uint64_t seed : seeds) {
      SweepRow row;
      row.value = v;
      row.seed = seed;
      try {
        AttachOptions o;
        o.m = cfg.m;
        o.k = cfg.k;
        o.method = cfg.method;
        o.index = {cfg.index, cfg.n_lists, cfg.n_probe, 0};
        o.jitter = cfg.jitter;
        o.seed = seed;
        o.layers = cfg.layers;
        o.variant = cfg.variant;
        GAPA_REQUIRE(v >= 0.0 && v == std::floor(v), ErrorCode::kInvalidArgument,
                "sweep values must be non-negative integers");
        const auto iv = static_cast<std::size_t>(v);
        if (axis == SweepAxis::kM) o.m = iv;
        if (axis == SweepAxis::kK) o.k = iv;
        if (axis == SweepAxis::kLayer) o.layers = {iv};
        const auto t0 = clock::now();
        const GapaNetwork g = attach_gapa(net, train_seqs, o);
        std::optional<NoiseHead> noise;
        if (net.task == Task::kRegression) {
          NoiseHeadConfig nc = cfg.noise;
          nc.seed = split_seed(seed, "noise_head");
          noise = fit_regression_noise_head(g, train, nc);
        }
        const auto t1 = clock::now();
        PredictOptions po = cfg.predict_options();
        po.seed = split_seed(seed, "mc");
        const auto r = evaluate(g, test, ood, po, noise ? &*noise : nullptr);
        const auto t2 = clock::now();
        row.setup_seconds = std::chrono::duration<double>(t1 - t0).count();
        row.query_seconds = std::chrono::duration<double>(t2 - t1).count() /
                            static_cast<double>(test.size() + (ood ? ood->size() : 0));
        const auto& m = r.metrics;
        row.nll = m.contains("nll") ? m["nll"].get<double>() : m["gaussian_nll"].get<double>();
        if (m.contains("ece")) row.ece = m["ece"].get<double>();
        if (m.contains("ood_auroc_TU")) {
          row.ood_auroc = m["ood_auroc_TU"].get<double>();
          row.bald_auroc = m["ood_auroc_EU"].get<double>();
        }
      } catch (const Error& e) {
        row.error = std::string(error_code_name(e.code())) + ": " + e.what();
      }
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

inline std::string sweep_csv(SweepAxis axis, const std::vector<SweepRow>& rows) {
  const char* name = axis == SweepAxis::kM ? "M" : axis == SweepAxis::kK ? "K" : "layer";
  std::string out = std::string(name) +
                    ",seed,nll,ece,ood_auroc,bald_auroc,setup_seconds,query_seconds,error\n";
  auto num = [](double x) {
    if (std::isnan(x)) return std::string();
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", x);
    return std::string(buf);
  };
  for (const auto& r : rows) {
    std::string err = r.error;
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    out += num(r.value) + "," + std::to_string(r.seed) + "," + num(r.nll) + "," +
           num(r.ece) + "," + num(r.ood_auroc) + "," + num(r.bald_auroc) + "," +
           num(r.setup_seconds) + "," + num(r.query_seconds) + "," + err + "\n";
  }
  return out;
}

inline std::filesystem::path cmd_sweep(const PipelineConfig& cfg, SweepAxis axis,
                                       const std::vector<double>& values,
                                       std::size_t n_seeds = 1) {
  require_path(cfg.network, "network");
  require_path(cfg.train, "train");
  require_path(cfg.test, "test");
  GAPA_REQUIRE(n_seeds >= 1, ErrorCode::kInvalidArgument, "sweep needs at least one seed");
  const NetworkSpec net = load_network(cfg.network);
  const Dataset train = read_csv(cfg.train), test = read_csv(cfg.test);
  std::optional<Dataset> ood;
  if (!cfg.ood.empty()) {
    require_path(cfg.ood, "ood");
    ood = read_csv(cfg.ood);
  }
  std::vector<std::uint64_t> seeds;
  for (std::size_t s = 0; s < n_seeds; ++s) seeds.push_back(split_seed(cfg.seed, s));
  const auto rows = run_sweep(net, train, test, ood ? &*ood : nullptr, cfg, axis, values, seeds);
  const auto text = sweep_csv(axis, rows);
  const auto path = cfg.out_dir / (std::string("sweep_") +
                                   (axis == SweepAxis::kM ? "M" : axis == SweepAxis::kK ? "K" : "layer") +
                                   ".csv");
  write_file(path, Bytes(text.begin(), text.end()));
  return path;
}

}  // namespace gapa
