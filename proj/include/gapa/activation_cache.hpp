#pragma once

// Per-layer cache of pre-activations collected over a reference dataset.
//
// File layout (little-endian, no padding):
//   "GAPACACH" | version u16 | layer_index u32 | width u32 | rows u64 |
//   fingerprint 32 bytes | rows × width f32, row-major
//
// Readers map the file read-only; rows are widened to double on access.

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "gapa/io.hpp"
#include "gapa/network.hpp"
#include "gapa/network_io.hpp"

namespace gapa {

inline constexpr std::string_view kCacheMagic = "GAPACACH";
inline constexpr std::uint16_t kCacheVersion = 1;
inline constexpr std::size_t kCacheHeaderBytes = 8 + 2 + 4 + 4 + 8 + 32;

/// Identifies the (network, dataset) pair a cache was built from.
inline Digest cache_fingerprint(const NetworkSpec& net,
                                std::string_view dataset_id) {
  const Digest net_digest = network_digest(net);
  Sha256 h;
  h.update(net_digest);
  h.update(dataset_id);
  return h.finish();
}

/// Read-only memory mapping of a whole file.
class MappedFile {
 public:
  explicit MappedFile(const std::filesystem::path& path) {
    fd_ = ::open(path.c_str(), O_RDONLY);
    if (fd_ < 0) fail(ErrorCode::kMissingArtifact, "cannot open " + path.string());
    struct stat st {};
    if (::fstat(fd_, &st) != 0) {
      ::close(fd_);
      fail(ErrorCode::kIoError, "cannot stat " + path.string());
    }
    size_ = static_cast<std::size_t>(st.st_size);
    if (size_ > 0) {
      void* p = ::mmap(nullptr, size_, PROT_READ, MAP_PRIVATE, fd_, 0);
      if (p == MAP_FAILED) {
        ::close(fd_);
        fail(ErrorCode::kIoError, "cannot map " + path.string());
      }
      data_ = static_cast<const std::uint8_t*>(p);
    }
  }
  ~MappedFile() {
    if (data_ != nullptr)
      ::munmap(const_cast<std::uint8_t*>(data_), size_);
    if (fd_ >= 0) ::close(fd_);
  }
  MappedFile(const MappedFile&) = delete;
  MappedFile& operator=(const MappedFile&) = delete;

  std::span<const std::uint8_t> bytes() const noexcept { return {data_, size_}; }

 private:
  int fd_ = -1;
  const std::uint8_t* data_ = nullptr;
  std::size_t size_ = 0;
};

class ActivationCache {
 public:
  static ActivationCache open(const std::filesystem::path& path) {
    ActivationCache c;
    c.path_ = path;
    c.file_ = std::make_shared<MappedFile>(path);
    const auto bytes = c.file_->bytes();
    if (bytes.size() < kCacheHeaderBytes)
      fail(ErrorCode::kCorruptFile, "cache file too short: " + path.string());
    ByteReader r(bytes);
    check_magic(r, kCacheMagic, "activation cache");
    const auto version = r.get<std::uint16_t>();
    if (version != kCacheVersion)
      fail(ErrorCode::kSchemaVersionUnsupported,
           "cache version " + std::to_string(version));
    c.layer_index_ = r.get<std::uint32_t>();
    c.width_ = r.get<std::uint32_t>();
    c.rows_ = r.get<std::uint64_t>();
    const auto fp = r.get_bytes(32);
    std::copy(fp.begin(), fp.end(), c.fingerprint_.begin());
    if (c.width_ == 0)
      fail(ErrorCode::kCorruptFile, "cache width is zero");
    const std::size_t payload = bytes.size() - kCacheHeaderBytes;
    if (c.rows_ > payload / (c.width_ * sizeof(float)) ||
        payload != c.rows_ * c.width_ * sizeof(float))
      fail(ErrorCode::kCorruptFile,
           "cache payload size does not match header: " + path.string());
    return c;
  }

  std::size_t layer_index() const noexcept { return layer_index_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t rows() const noexcept { return rows_; }
  const Digest& fingerprint() const noexcept { return fingerprint_; }
  const std::filesystem::path& path() const noexcept { return path_; }

  /// Copies rows [begin, begin + count) into `out` (count × width doubles).
  void read_rows(std::size_t begin, std::size_t count,
                 std::span<double> out) const {
    GAPA_REQUIRE(begin + count <= rows_, ErrorCode::kInvalidArgument,
            "row range past end of cache");
    GAPA_REQUIRE(out.size() == count * width_, ErrorCode::kDimensionMismatch,
            "row buffer size");
    const auto bytes = file_->bytes();
    const std::uint8_t* src =
        bytes.data() + kCacheHeaderBytes + begin * width_ * sizeof(float);
    for (std::size_t i = 0; i < count * width_; ++i) {
      float f;
      std::memcpy(&f, src + i * sizeof(float), sizeof(float));
      if (!std::isfinite(f))
        fail(ErrorCode::kCorruptFile, "non-finite value in cache");
      out[i] = static_cast<double>(f);
    }
  }

  Vector row(std::size_t i) const {
    Vector v(width_);
    read_rows(i, 1, v.span());
    return v;
  }

  Matrix load() const {
    Matrix m(rows_, width_);
    read_rows(0, rows_, {m.data(), rows_ * width_});
    return m;
  }

  class BlockIterator;
  class Blocks;

  /// Yields consecutive row blocks of at most `batch` rows, in order.
  Blocks stream_rows(std::size_t batch) const;

 private:
  std::filesystem::path path_;
  std::shared_ptr<const MappedFile> file_;
  std::size_t layer_index_ = 0;
  std::size_t width_ = 0;
  std::size_t rows_ = 0;
  Digest fingerprint_{};
};

class ActivationCache::BlockIterator {
 public:
  using value_type = Matrix;
  using difference_type = std::ptrdiff_t;

  BlockIterator() = default;
  BlockIterator(const ActivationCache* cache, std::size_t batch,
                std::size_t begin)
      : cache_(cache), batch_(batch), begin_(begin) {}

  Matrix operator*() const {
    const std::size_t count = std::min(batch_, cache_->rows() - begin_);
    Matrix m(count, cache_->width());
    cache_->read_rows(begin_, count, {m.data(), count * cache_->width()});
    return m;
  }
  BlockIterator& operator++() {
    begin_ = std::min(begin_ + batch_, cache_->rows());
    return *this;
  }
  bool operator==(const BlockIterator& o) const { return begin_ == o.begin_; }

 private:
  const ActivationCache* cache_ = nullptr;
  std::size_t batch_ = 1;
  std::size_t begin_ = 0;
};

class ActivationCache::Blocks {
 public:
  Blocks(const ActivationCache* cache, std::size_t batch)
      : cache_(cache), batch_(batch) {}
  BlockIterator begin() const { return {cache_, batch_, 0}; }
  BlockIterator end() const { return {cache_, batch_, cache_->rows()}; }

 private:
  const ActivationCache* cache_;
  std::size_t batch_;
};

inline ActivationCache::Blocks ActivationCache::stream_rows(
    std::size_t batch) const {
  GAPA_REQUIRE(batch > 0, ErrorCode::kInvalidArgument, "batch must be positive");
  return Blocks(this, batch);
}

/// Incremental cache writer; rows are narrowed to f32.
class CacheWriter {
 public:
  CacheWriter(const std::filesystem::path& path, std::size_t layer_index,
              std::size_t width, std::size_t rows, const Digest& fingerprint)
      : width_(width), expected_rows_(rows) {
    if (path.has_parent_path())
      std::filesystem::create_directories(path.parent_path());
    out_.open(path, std::ios::binary | std::ios::trunc);
    if (!out_) fail(ErrorCode::kIoError, "cannot write " + path.string());
    ByteWriter h;
    h.put_string(kCacheMagic);
    h.put(kCacheVersion);
    h.put(static_cast<std::uint32_t>(layer_index));
    h.put(static_cast<std::uint32_t>(width));
    h.put(static_cast<std::uint64_t>(rows));
    h.put_bytes(fingerprint);
    write(h.bytes());
  }

  void append(std::span<const double> row) {
    GAPA_REQUIRE(row.size() == width_, ErrorCode::kDimensionMismatch,
            "cache row width " + dims(row.size(), width_));
    std::vector<float> narrow(row.size());
    for (std::size_t i = 0; i < row.size(); ++i) {
      GAPA_REQUIRE(std::isfinite(row[i]), ErrorCode::kInvalidArgument,
              "non-finite pre-activation");
      narrow[i] = static_cast<float>(row[i]);
    }
    out_.write(reinterpret_cast<const char*>(narrow.data()),
               static_cast<std::streamsize>(narrow.size() * sizeof(float)));
    ++written_;
  }

  void close() {
    GAPA_REQUIRE(written_ == expected_rows_, ErrorCode::kIoError,
            "cache row count " + dims(written_, expected_rows_));
    out_.close();
    if (!out_) fail(ErrorCode::kIoError, "cache write failed");
  }

 private:
  void write(std::span<const std::uint8_t> b) {
    out_.write(reinterpret_cast<const char*>(b.data()),
               static_cast<std::streamsize>(b.size()));
  }

  std::ofstream out_;
  std::size_t width_;
  std::size_t expected_rows_;
  std::size_t written_ = 0;
};

namespace detail {

inline void check_cache_layer(const NetworkSpec& net, std::size_t layer) {
  validate(net);
  GAPA_REQUIRE(net.gapa_points.count(layer) == 1, ErrorCode::kInvalidArgument,
          "layer " + std::to_string(layer) + " is not a gapa point");
}

}  // namespace detail

/// Runs every dataset item through the network and stores the pre-activation
/// entering `layer`.
inline ActivationCache build_cache(const NetworkSpec& net,
                                   std::span<const Vector> dataset,
                                   std::size_t layer,
                                   const std::filesystem::path& out_path,
                                   std::string_view dataset_id = "") {
  detail::check_cache_layer(net, layer);
  GAPA_REQUIRE(!dataset.empty(), ErrorCode::kEmptyCache, "dataset is empty");
  const std::size_t width = width_before(net, layer);
  {
    CacheWriter w(out_path, layer, width, dataset.size(),
                  cache_fingerprint(net, dataset_id));
    for (const auto& x : dataset)
      w.append(forward_until(net, Sequence{x}, layer).front().span());
    w.close();
  }
  return ActivationCache::open(out_path);
}

/// Sequence variant: every token position contributes one row.
inline ActivationCache build_cache(const NetworkSpec& net,
                                   std::span<const Sequence> dataset,
                                   std::size_t layer,
                                   const std::filesystem::path& out_path,
                                   std::string_view dataset_id = "") {
  detail::check_cache_layer(net, layer);
  GAPA_REQUIRE(!dataset.empty(), ErrorCode::kEmptyCache, "dataset is empty");
  std::size_t rows = 0;
  for (const auto& s : dataset) rows += s.size();
  GAPA_REQUIRE(rows > 0, ErrorCode::kEmptyCache, "dataset has no positions");
  const std::size_t width = width_before(net, layer);
  {
    CacheWriter w(out_path, layer, width, rows,
                  cache_fingerprint(net, dataset_id));
    for (const auto& s : dataset)
      for (const auto& z : forward_until(net, s, layer)) w.append(z.span());
    w.close();
  }
  return ActivationCache::open(out_path);
}

}  // namespace gapa
