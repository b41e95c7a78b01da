#pragma once

// Network container file:
//
//   offset 0   "GAPANET1"                      8 bytes
//   offset 8   header length H                 u32 little-endian
//   offset 12  JSON header                     H bytes, UTF-8
//   then       weight blob                     f64 little-endian, layer order
//   then       auxiliary sections              raw bytes, header order
//   last 4     CRC32 of every preceding byte   u32 little-endian
//
// Weight order per layer: linear W (row-major) then b; rmsnorm gamma;
// attention Wq, Wk, Wv, Wo. The header records the topology, task, GAPA
// points, schema version, the blob length and its CRC32, and the name and
// byte length of each auxiliary section (attached inducing sets, noise head).

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <type_traits>
#include <variant>

#include "json.hpp"

#include "gapa/io.hpp"
#include "gapa/network.hpp"

namespace gapa {

inline constexpr std::string_view kNetworkMagic = "GAPANET1";
inline constexpr int kNetworkSchemaVersion = 1;

/// A network plus named opaque sections stored after its weights.
struct NetworkContainer {
  NetworkSpec net;
  std::map<std::string, Bytes> sections;
};

namespace detail {

inline nlohmann::json layer_header(const LayerSpec& layer) {
  using nlohmann::json;
  return std::visit(
      [](const auto& l) -> json {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, LinearLayer>) {
          return {{"kind", "linear"},
                  {"rows", l.weight.rows()},
                  {"cols", l.weight.cols()}};
        } else if constexpr (std::is_same_v<T, ActivationLayer>) {
          return {{"kind", "activation"},
                  {"fn", std::string(activation_name(l.fn))}};
        } else if constexpr (std::is_same_v<T, RMSNormLayer>) {
          return {{"kind", "rmsnorm"}, {"dim", l.gamma.size()}, {"eps", l.eps}};
        } else if constexpr (std::is_same_v<T, SelfAttentionLayer>) {
          return {{"kind", "self_attention"},
                  {"d_model", l.wq.cols()},
                  {"d_attn", l.wq.rows()},
                  {"d_out", l.wo.rows()},
                  {"heads", l.heads},
                  {"causal", l.causal}};
        } else {
          return {{"kind", "softmax_head"}};
        }
      },
      layer);
}

inline void write_weights(ByteWriter& w, const LayerSpec& layer) {
  std::visit(
      [&](const auto& l) {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, LinearLayer>) {
          w.put_doubles(l.weight.values());
          w.put_doubles(l.bias.values());
        } else if constexpr (std::is_same_v<T, RMSNormLayer>) {
          w.put_doubles(l.gamma.values());
        } else if constexpr (std::is_same_v<T, SelfAttentionLayer>) {
          w.put_doubles(l.wq.values());
          w.put_doubles(l.wk.values());
          w.put_doubles(l.wv.values());
          w.put_doubles(l.wo.values());
        }
      },
      layer);
}

inline std::size_t json_size(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || !j[key].is_number_unsigned())
    fail(ErrorCode::kCorruptFile,
         std::string("header field '") + key + "' missing or not a count");
  return j[key].get<std::size_t>();
}

inline LayerSpec read_layer(const nlohmann::json& h, ByteReader& blob) {
  const std::string kind = h.value("kind", "");
  auto matrix = [&](std::size_t r, std::size_t c) {
    return Matrix(r, c, blob.get_doubles(r * c));
  };
  if (kind == "linear") {
    const auto rows = json_size(h, "rows");
    const auto cols = json_size(h, "cols");
    LinearLayer l;
    l.weight = matrix(rows, cols);
    l.bias = Vector(blob.get_doubles(rows));
    return l;
  }
  if (kind == "activation") return ActivationLayer{parse_activation(h.value("fn", ""))};
  if (kind == "rmsnorm") {
    RMSNormLayer l;
    l.gamma = Vector(blob.get_doubles(json_size(h, "dim")));
    l.eps = h.value("eps", 0.0);
    return l;
  }
  if (kind == "self_attention") {
    const auto dm = json_size(h, "d_model");
    const auto da = json_size(h, "d_attn");
    const auto dout = json_size(h, "d_out");
    SelfAttentionLayer l;
    l.wq = matrix(da, dm);
    l.wk = matrix(da, dm);
    l.wv = matrix(da, dm);
    l.wo = matrix(dout, da);
    l.heads = json_size(h, "heads");
    l.causal = h.value("causal", true);
    return l;
  }
  if (kind == "softmax_head") return SoftmaxHeadLayer{};
  fail(ErrorCode::kCorruptFile, "unknown layer kind '" + kind + "'");
}

inline Bytes weight_blob(const NetworkSpec& net) {
  ByteWriter w;
  for (const auto& layer : net.layers) write_weights(w, layer);
  return w.take();
}

inline nlohmann::json topology_header(const NetworkSpec& net) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : net.layers) layers.push_back(layer_header(l));
  return {{"input_width", net.input_width},
          {"task", std::string(task_name(net.task))},
          {"gapa_points", net.gapa_points},
          {"layers", layers}};
}

}  // namespace detail

inline Bytes encode_network(const NetworkContainer& c) {
  validate(c.net);
  const Bytes blob = detail::weight_blob(c.net);
  nlohmann::json header = detail::topology_header(c.net);
  header["schema_version"] = kNetworkSchemaVersion;
  header["weights_bytes"] = blob.size();
  header["weights_crc32"] = crc32_of(blob);
  nlohmann::json sections = nlohmann::json::array();
  for (const auto& [name, bytes] : c.sections)
    sections.push_back({{"name", name}, {"bytes", bytes.size()}});
  header["sections"] = sections;
  const std::string text = header.dump();

  ByteWriter w;
  w.put_string(kNetworkMagic);
  w.put(static_cast<std::uint32_t>(text.size()));
  w.put_string(text);
  w.put_bytes(blob);
  for (const auto& [name, bytes] : c.sections) w.put_bytes(bytes);
  w.put(crc32_of(w.bytes()));
  return w.take();
}

inline NetworkContainer decode_network(std::span<const std::uint8_t> data) {
  if (data.size() < kNetworkMagic.size() + 8)
    fail(ErrorCode::kCorruptFile, "network file too short");
  ByteReader r(data);
  check_magic(r, kNetworkMagic, "network container");
  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, data.data() + data.size() - 4, 4);
  if (crc32_of(data.first(data.size() - 4)) != stored_crc)
    fail(ErrorCode::kCorruptFile, "network checksum mismatch");

  const auto header_len = r.get<std::uint32_t>();
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.get_string(header_len));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kCorruptFile, std::string("bad network header: ") + e.what());
  }
  const int version = header.value("schema_version", -1);
  if (version != kNetworkSchemaVersion)
    fail(ErrorCode::kSchemaVersionUnsupported,
         "network schema version " + std::to_string(version));

  NetworkContainer c;
  try {
    const auto blob_len = detail::json_size(header, "weights_bytes");
    const auto blob = r.get_bytes(blob_len);
    if (crc32_of(blob) != header.value("weights_crc32", 0u))
      fail(ErrorCode::kCorruptFile, "weight blob checksum mismatch");
    ByteReader blob_reader(blob);
    c.net.input_width = detail::json_size(header, "input_width");
    c.net.task = parse_task(header.value("task", ""));
    for (const auto& lh : header.at("layers"))
      c.net.layers.push_back(detail::read_layer(lh, blob_reader));
    if (blob_reader.remaining() != 0)
      fail(ErrorCode::kCorruptFile, "weight blob longer than topology");
    for (const auto& p : header.at("gapa_points"))
      c.net.gapa_points.insert(p.get<std::size_t>());
    for (const auto& s : header.value("sections", nlohmann::json::array())) {
      const auto bytes = r.get_bytes(detail::json_size(s, "bytes"));
      c.sections[s.at("name").get<std::string>()] =
          Bytes(bytes.begin(), bytes.end());
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kCorruptFile, std::string("bad network header: ") + e.what());
  }
  if (r.remaining() != 4)
    fail(ErrorCode::kCorruptFile, "trailing bytes in network container");
  validate(c.net);
  return c;
}

inline void save_container(const NetworkContainer& c,
                           const std::filesystem::path& path) {
  write_file(path, encode_network(c));
}

inline NetworkContainer load_container(const std::filesystem::path& path) {
  return decode_network(read_file(path));
}

inline void save_network(const NetworkSpec& net,
                         const std::filesystem::path& path) {
  save_container(NetworkContainer{net, {}}, path);
}

inline NetworkSpec load_network(const std::filesystem::path& path) {
  return load_container(path).net;
}

/// SHA-256 over the canonical topology and the raw weights. Auxiliary
/// sections and GAPA points do not contribute, so attaching GAPA layers keeps
/// the digest of the backbone.
inline Digest network_digest(const NetworkSpec& net) {
  auto topo = detail::topology_header(net);
  topo.erase("gapa_points");
  Sha256 h;
  h.update(topo.dump());
  h.update(detail::weight_blob(net));
  return h.finish();
}

}  // namespace gapa
