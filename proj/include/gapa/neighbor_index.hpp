#pragma once

// K-nearest-neighbour retrieval over an inducing set.
//
// ExactFlat scans every inducing row. CoarseIVF partitions the rows with
// k-means into posting lists and scans only the n_probe lists whose coarse
// centroids are closest to the query. Distances are squared internally and
// square-rooted only in the returned results.
//
// Persisted as a "GAPAINDX" section appended to the inducing-set file:
//   "GAPAINDX" | kind u8 | n_lists u32 | n_probe u32 | d u32 |
//   coarse centroids n_lists × d f64 | per list: count u64, ids u64[count]

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <queue>
#include <string>
#include <utility>
#include <vector>

#include "gapa/inducing.hpp"
#include "gapa/io.hpp"
#include "gapa/tensor.hpp"

namespace gapa {

enum class IndexKind : std::uint8_t { kExactFlat = 0, kCoarseIVF = 1 };

struct IndexConfig {
  IndexKind kind = IndexKind::kExactFlat;
  std::size_t n_lists = 0;  // 0 selects ceil(sqrt(M))
  std::size_t n_probe = 8;
  std::uint64_t seed = 0;
  std::size_t train_iters = 25;
};

struct Neighbor {
  std::size_t id = 0;
  double distance = 0.0;

  friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

namespace detail {

/// Bounded max-heap keeping the K smallest (squared distance, id) pairs.
class TopK {
 public:
  explicit TopK(std::size_t k) : k_(k) { heap_.reserve(k + 1); }

  double bound() const {
    return heap_.size() < k_ ? std::numeric_limits<double>::infinity()
                             : heap_.front().first;
  }

  void push(double d2, std::size_t id) {
    if (heap_.size() < k_) {
      heap_.emplace_back(d2, id);
      std::push_heap(heap_.begin(), heap_.end());
    } else if (std::pair(d2, id) < heap_.front()) {
      std::pop_heap(heap_.begin(), heap_.end());
      heap_.back() = {d2, id};
      std::push_heap(heap_.begin(), heap_.end());
    }
  }

  std::vector<Neighbor> sorted() {
    std::sort(heap_.begin(), heap_.end());
    std::vector<Neighbor> out;
    out.reserve(heap_.size());
    for (const auto& [d2, id] : heap_) out.push_back({id, std::sqrt(d2)});
    return out;
  }

 private:
  std::size_t k_;
  std::vector<std::pair<double, std::size_t>> heap_;
};

}  // namespace detail

class NeighborIndex {
 public:
  /// Builds an index over every row of `inducing`.
  static NeighborIndex build(std::shared_ptr<const InducingSet> inducing,
                             const IndexConfig& config = {}) {
    GAPA_REQUIRE(inducing != nullptr && inducing->size() > 0,
            ErrorCode::kTooFewRows, "index over empty inducing set");
    NeighborIndex idx;
    idx.inducing_ = std::move(inducing);
    idx.kind_ = config.kind;
    const std::size_t m = idx.inducing_->size();
    if (config.kind == IndexKind::kCoarseIVF) {
      const std::size_t lists =
          config.n_lists == 0
              ? static_cast<std::size_t>(std::ceil(std::sqrt(double(m))))
              : config.n_lists;
      GAPA_REQUIRE(lists >= 1 && lists <= m, ErrorCode::kTooFewRows,
              "n_lists=" + std::to_string(lists) + " exceeds M=" +
                  std::to_string(m));
      GAPA_REQUIRE(config.n_probe >= 1, ErrorCode::kInvalidArgument,
              "n_probe must be positive");
      idx.n_probe_ = std::min(config.n_probe, lists);
      idx.coarse_ =
          kmeans_pp(idx.inducing_->z, lists, config.train_iters, config.seed);
      idx.lists_.assign(lists, {});
      for (std::size_t i = 0; i < m; ++i) {
        const std::size_t c =
            detail::nearest_centroid(idx.inducing_->z.row(i), idx.coarse_, nullptr);
        idx.lists_[c].push_back(i);
      }
      idx.pack_lists();
    }
    return idx;
  }

  IndexKind kind() const noexcept { return kind_; }
  std::size_t n_lists() const noexcept { return lists_.size(); }
  std::size_t n_probe() const noexcept { return n_probe_; }
  const std::vector<std::vector<std::size_t>>& posting_lists() const noexcept {
    return lists_;
  }
  const InducingSet& inducing() const noexcept { return *inducing_; }
  std::shared_ptr<const InducingSet> inducing_ptr() const noexcept {
    return inducing_;
  }

  /// K nearest inducing rows, ascending by distance, ties broken by row id.
  std::vector<Neighbor> query(std::span<const double> z, std::size_t k) const {
    const Matrix& rows = inducing_->z;
    GAPA_REQUIRE(z.size() == rows.cols(), ErrorCode::kDimensionMismatch,
            "query width " + dims(z.size(), rows.cols()));
    GAPA_REQUIRE(k >= 1 && k <= rows.rows(), ErrorCode::kInvalidArgument,
            "K=" + std::to_string(k) + " must lie in [1, M=" +
                std::to_string(rows.rows()) + "]");
    detail::TopK top(k);
    if (kind_ == IndexKind::kExactFlat) {
      double bound = top.bound();
      for (std::size_t i = 0; i < rows.rows(); ++i) {
        const double d2 = squared_distance(z, rows.row(i));
        if (d2 <= bound) {
          top.push(d2, i);
          bound = top.bound();
        }
      }
      return top.sorted();
    }
    // Rank coarse cells, then scan the closest n_probe posting lists.
    std::vector<std::pair<double, std::size_t>> cells(coarse_.rows());
    for (std::size_t c = 0; c < coarse_.rows(); ++c)
      cells[c] = {squared_distance(z, coarse_.row(c)), c};
    std::partial_sort(cells.begin(), cells.begin() + n_probe_, cells.end());
    const std::size_t d = rows.cols();
    for (std::size_t p = 0; p < n_probe_; ++p) {
      const std::size_t c = cells[p].second;
      const auto& ids = lists_[c];
      const double* vec = packed_.data() + offsets_[c] * d;
      double bound = top.bound();
      for (std::size_t j = 0; j < ids.size(); ++j) {
        const double d2 = squared_distance(z, {vec + j * d, d});
        if (d2 <= bound) {
          top.push(d2, ids[j]);
          bound = top.bound();
        }
      }
    }
    auto out = top.sorted();
    GAPA_REQUIRE(out.size() == k, ErrorCode::kTooFewRows,
            "probed lists hold fewer than K rows; raise n_probe");
    return out;
  }

  void encode(ByteWriter& w) const {
    w.put_string("GAPAINDX");
    w.put(static_cast<std::uint8_t>(kind_));
    w.put(static_cast<std::uint32_t>(lists_.size()));
    w.put(static_cast<std::uint32_t>(n_probe_));
    w.put(static_cast<std::uint32_t>(coarse_.cols()));
    w.put_doubles(coarse_.values());
    for (const auto& l : lists_) {
      w.put(static_cast<std::uint64_t>(l.size()));
      for (std::size_t id : l) w.put(static_cast<std::uint64_t>(id));
    }
  }

  static NeighborIndex decode(ByteReader& r,
                              std::shared_ptr<const InducingSet> inducing) {
    check_magic(r, "GAPAINDX", "neighbor index");
    NeighborIndex idx;
    idx.inducing_ = std::move(inducing);
    const auto kind = r.get<std::uint8_t>();
    if (kind > 1) fail(ErrorCode::kCorruptFile, "unknown index kind");
    idx.kind_ = static_cast<IndexKind>(kind);
    const auto lists = r.get<std::uint32_t>();
    idx.n_probe_ = r.get<std::uint32_t>();
    const auto d = r.get<std::uint32_t>();
    idx.coarse_ = Matrix(lists, d, r.get_doubles(std::size_t{lists} * d));
    idx.lists_.resize(lists);
    std::size_t total = 0;
    const std::size_t m = idx.inducing_->size();
    for (auto& l : idx.lists_) {
      const auto count = r.get<std::uint64_t>();
      if (count > r.remaining() / sizeof(std::uint64_t))
        fail(ErrorCode::kCorruptFile, "posting list truncated");
      l.resize(count);
      for (auto& id : l) {
        id = r.get<std::uint64_t>();
        if (id >= m) fail(ErrorCode::kCorruptFile, "posting id out of range");
      }
      total += count;
    }
    if (idx.kind_ == IndexKind::kCoarseIVF) {
      if (total != m || d != idx.inducing_->width() || lists == 0)
        fail(ErrorCode::kCorruptFile, "posting lists do not cover the inducing set");
      idx.pack_lists();
    }
    return idx;
  }

 private:
  void pack_lists() {
    const std::size_t d = inducing_->width();
    offsets_.assign(lists_.size(), 0);
    packed_.clear();
    packed_.reserve(inducing_->size() * d);
    std::size_t off = 0;
    for (std::size_t c = 0; c < lists_.size(); ++c) {
      offsets_[c] = off;
      for (std::size_t id : lists_[c]) {
        const auto row = inducing_->z.row(id);
        packed_.insert(packed_.end(), row.begin(), row.end());
      }
      off += lists_[c].size();
    }
  }

  std::shared_ptr<const InducingSet> inducing_;
  IndexKind kind_ = IndexKind::kExactFlat;
  std::size_t n_probe_ = 0;
  Matrix coarse_;
  std::vector<std::vector<std::size_t>> lists_;
  std::vector<std::size_t> offsets_;
  std::vector<double> packed_;  // list-major copies of the inducing rows
};

inline NeighborIndex build_index(std::shared_ptr<const InducingSet> inducing,
                                 const IndexConfig& config = {}) {
  return NeighborIndex::build(std::move(inducing), config);
}

inline std::vector<Neighbor> query_knn(const NeighborIndex& index,
                                       std::span<const double> z,
                                       std::size_t k) {
  return index.query(z, k);
}

// ---------------------------------------------------------------------------
// Inducing-set file with optional appended index section.

inline Bytes encode_inducing_file(const InducingSet& set,
                                  const NeighborIndex* index = nullptr) {
  ByteWriter w;
  encode_inducing(w, set);
  if (index != nullptr) index->encode(w);
  return w.take();
}

struct InducingFile {
  std::shared_ptr<const InducingSet> set;
  std::optional<NeighborIndex> index;
};

inline InducingFile decode_inducing_file(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  InducingFile f;
  f.set = std::make_shared<const InducingSet>(decode_inducing(r));
  if (r.remaining() > 0) f.index = NeighborIndex::decode(r, f.set);
  if (r.remaining() != 0)
    fail(ErrorCode::kCorruptFile, "trailing bytes after index section");
  return f;
}

inline void save_inducing_set(const InducingSet& set,
                              const std::filesystem::path& path,
                              const NeighborIndex* index = nullptr) {
  write_file(path, encode_inducing_file(set, index));
}

inline InducingFile load_inducing_file(const std::filesystem::path& path) {
  return decode_inducing_file(read_file(path));
}

inline InducingSet load_inducing_set(const std::filesystem::path& path) {
  return *load_inducing_file(path).set;
}

}  // namespace gapa
