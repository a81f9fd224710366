#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pykv/core_math.hpp"
#include "pykv/error.hpp"

namespace pykv {

// How rotary positions are assigned to cached keys.
//   kGather:   each key keeps its original token position; keys are stored rotated.
//   kReencode: keys are stored unrotated and re-encoded 0..n-1 at every attention call.
enum class PositionMode { kGather, kReencode };

// Retained keys/values of one layer plus the original token index of every entry.
struct LayerKvCache {
  HeadTensor keys;
  HeadTensor values;
  std::vector<std::size_t> positions;

  std::size_t size() const { return positions.size(); }
  bool empty() const { return positions.empty(); }

  friend bool operator==(const LayerKvCache&, const LayerKvCache&) = default;
};

// Per-layer attention statistics a policy keeps aligned with the cache entries.
struct AttentionHistory {
  Matrix recent_rows;                // head-mean rows of the most recent queries, oldest first
  std::vector<double> accumulated;   // column sums over every query seen so far
};

struct CacheSet {
  std::vector<LayerKvCache> layers;
  std::vector<AttentionHistory> history;
  PositionMode position_mode = PositionMode::kGather;
  std::size_t tokens_seen = 0;    // original position of the next token
  std::size_t recent_window = 0;  // recent window length fixed at prefill
  std::size_t decode_steps = 0;
};

inline LayerKvCache make_empty_cache(std::size_t heads, std::size_t head_dim) {
  LayerKvCache c;
  c.keys = HeadTensor(heads, 0, head_dim);
  c.values = HeadTensor(heads, 0, head_dim);
  return c;
}

namespace detail {

inline HeadTensor concat_seq(const HeadTensor& a, const HeadTensor& b) {
  HeadTensor out(a.heads, a.seq + b.seq, a.head_dim);
  for (std::size_t h = 0; h < a.heads; ++h) {
    auto dst = out.data.begin() + static_cast<std::ptrdiff_t>(h * out.seq * out.head_dim);
    const auto asz = static_cast<std::ptrdiff_t>(a.seq * a.head_dim);
    const auto bsz = static_cast<std::ptrdiff_t>(b.seq * b.head_dim);
    std::copy_n(a.data.begin() + static_cast<std::ptrdiff_t>(h) * asz, asz, dst);
    std::copy_n(b.data.begin() + static_cast<std::ptrdiff_t>(h) * bsz, bsz, dst + asz);
  }
  return out;
}

inline HeadTensor select_seq(const HeadTensor& t, std::span<const std::size_t> indices) {
  HeadTensor out(t.heads, indices.size(), t.head_dim);
  for (std::size_t h = 0; h < t.heads; ++h)
    for (std::size_t i = 0; i < indices.size(); ++i) {
      const auto src = t.vec(h, indices[i]);
      std::copy(src.begin(), src.end(), out.vec(h, i).begin());
    }
  return out;
}

inline void check_indices(std::span<const std::size_t> indices, std::size_t length) {
  for (std::size_t i = 0; i < indices.size(); ++i) {
    require(indices[i] < length, ErrorCode::kOutOfRange,
            "gather: index " + std::to_string(indices[i]) + " out of range for length " + std::to_string(length));
    if (i > 0)
      require(indices[i] > indices[i - 1], ErrorCode::kOrdering, "gather: indices must be strictly ascending");
  }
}

}  // namespace detail

// Appends k.seq entries at positions pos, pos+1, ...
inline LayerKvCache append(LayerKvCache cache, const HeadTensor& k, const HeadTensor& v, std::size_t pos) {
  using detail::require;
  require(k.seq == v.seq && k.heads == v.heads && k.head_dim == v.head_dim, ErrorCode::kShapeMismatch,
          "append: k/v shape mismatch");
  require(cache.keys.heads == k.heads && cache.keys.head_dim == k.head_dim, ErrorCode::kShapeMismatch,
          "append: cache/k shape mismatch");
  require(cache.empty() || pos > cache.positions.back(), ErrorCode::kOrdering,
          "append: position " + std::to_string(pos) + " not after last stored position");
  cache.keys = detail::concat_seq(cache.keys, k);
  cache.values = detail::concat_seq(cache.values, v);
  for (std::size_t i = 0; i < k.seq; ++i) cache.positions.push_back(pos + i);
  return cache;
}

inline LayerKvCache gather(const LayerKvCache& cache, std::span<const std::size_t> indices) {
  detail::check_indices(indices, cache.size());
  LayerKvCache out;
  out.keys = detail::select_seq(cache.keys, indices);
  out.values = detail::select_seq(cache.values, indices);
  out.positions.reserve(indices.size());
  for (std::size_t i : indices) out.positions.push_back(cache.positions[i]);
  return out;
}

inline std::uint64_t kv_entry_count(const CacheSet& caches) {
  std::uint64_t n = 0;
  for (const auto& layer : caches.layers) n += layer.size();
  return n;
}

inline std::uint64_t kv_bytes(const CacheSet& caches, std::size_t heads, std::size_t head_dim,
                              std::size_t bytes_per_element) {
  detail::require(bytes_per_element == 2 || bytes_per_element == 4, ErrorCode::kInvalidArgument,
                  "kv_bytes: bytes_per_element must be 2 or 4");
  return 2ULL * kv_entry_count(caches) * heads * head_dim * bytes_per_element;
}

}  // namespace pykv
