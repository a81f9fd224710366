#pragma once

// Per-layer, per-head causal attention matrices and the ATRC file format:
//
//   offset  size  field
//   0       4     magic "ATRC"
//   4       4     version (u32, = 1)
//   8       4     layers  (u32)
//   12      4     heads   (u32)
//   16      4     seq_len (u32)
//   20      ...   layers*heads matrices of seq_len*seq_len f32, row-major,
//                 layer-major then head-major
//
// All integers and floats are little-endian.

#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "pykv/core_math.hpp"
#include "pykv/error.hpp"
#include "pykv/model.hpp"

namespace pykv {

static_assert(std::endian::native == std::endian::little, "ATRC I/O assumes a little-endian host");

struct AttentionTrace {
  std::uint32_t layers = 0;
  std::uint32_t heads = 0;
  std::uint32_t seq_len = 0;
  std::vector<float> data;

  AttentionTrace() = default;
  AttentionTrace(std::uint32_t l, std::uint32_t h, std::uint32_t s)
      : layers(l), heads(h), seq_len(s), data(std::size_t{l} * h * s * s, 0.0f) {}

  std::size_t matrix_size() const { return std::size_t{seq_len} * seq_len; }
  std::size_t offset(std::size_t layer, std::size_t head) const { return (layer * heads + head) * matrix_size(); }

  float& at(std::size_t layer, std::size_t head, std::size_t i, std::size_t j) {
    return data[offset(layer, head) + i * seq_len + j];
  }
  float at(std::size_t layer, std::size_t head, std::size_t i, std::size_t j) const {
    return data[offset(layer, head) + i * seq_len + j];
  }

  Matrix matrix(std::size_t layer, std::size_t head) const {
    const auto first = data.begin() + static_cast<std::ptrdiff_t>(offset(layer, head));
    return Matrix(seq_len, seq_len, std::vector<float>(first, first + static_cast<std::ptrdiff_t>(matrix_size())));
  }

  Matrix layer_mean(std::size_t layer) const {
    std::vector<Matrix> hs;
    hs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) hs.push_back(matrix(layer, h));
    return head_mean(hs);
  }

  friend bool operator==(const AttentionTrace&, const AttentionTrace&) = default;
};

inline constexpr char kTraceMagic[4] = {'A', 'T', 'R', 'C'};
inline constexpr std::uint32_t kTraceVersion = 1;
inline constexpr std::size_t kTraceHeaderBytes = 20;
inline constexpr std::uint64_t kTraceMaxPayloadBytes = 1ULL << 40;

// Rows sum to 1 within `tol` and cells above the diagonal are exactly 0.
inline void validate_trace(const AttentionTrace& t, double tol = 1e-3) {
  detail::require(t.data.size() == std::size_t{t.layers} * t.heads * t.matrix_size(), ErrorCode::kShapeMismatch,
                  "trace: data length does not match dimensions");
  for (std::size_t l = 0; l < t.layers; ++l)
    for (std::size_t h = 0; h < t.heads; ++h)
      for (std::size_t i = 0; i < t.seq_len; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < t.seq_len; ++j) {
          const float v = t.at(l, h, i, j);
          detail::require(std::isfinite(v) && v >= 0.0f, ErrorCode::kNonFinite, "trace: invalid attention weight");
          if (j > i)
            detail::require(v == 0.0f, ErrorCode::kInvalidArgument, "trace: non-zero cell above causal diagonal");
          sum += v;
        }
        detail::require(std::abs(sum - 1.0) <= tol, ErrorCode::kInvalidArgument,
                        "trace: row does not sum to 1 (layer " + std::to_string(l) + ", head " + std::to_string(h) +
                            ", row " + std::to_string(i) + ")");
      }
}

inline std::vector<std::uint8_t> encode_trace(const AttentionTrace& t) {
  std::vector<std::uint8_t> out(kTraceHeaderBytes + t.data.size() * sizeof(float));
  const std::uint32_t header[4] = {kTraceVersion, t.layers, t.heads, t.seq_len};
  std::memcpy(out.data(), kTraceMagic, 4);
  std::memcpy(out.data() + 4, header, sizeof(header));
  if (!t.data.empty()) std::memcpy(out.data() + kTraceHeaderBytes, t.data.data(), t.data.size() * sizeof(float));
  return out;
}

inline AttentionTrace decode_trace(std::span<const std::uint8_t> bytes) {
  using detail::require;
  require(bytes.size() >= 4, ErrorCode::kTruncated, "truncated: file shorter than magic");
  require(std::memcmp(bytes.data(), kTraceMagic, 4) == 0, ErrorCode::kBadMagic, "bad magic");
  require(bytes.size() >= kTraceHeaderBytes, ErrorCode::kTruncated, "truncated: incomplete header");
  std::uint32_t header[4];
  std::memcpy(header, bytes.data() + 4, sizeof(header));
  require(header[0] == kTraceVersion, ErrorCode::kBadVersion, "bad version " + std::to_string(header[0]));

  const std::uint64_t l = header[1], h = header[2], s = header[3];
  std::uint64_t cells = 0;
  const bool overflow = __builtin_mul_overflow(l, h, &cells) || __builtin_mul_overflow(cells, s, &cells) ||
                        __builtin_mul_overflow(cells, s, &cells) || cells > kTraceMaxPayloadBytes / sizeof(float);
  require(!overflow, ErrorCode::kDimensionOverflow, "dimension overflow: declared sizes are too large");
  const std::uint64_t payload = cells * sizeof(float);
  require(bytes.size() - kTraceHeaderBytes >= payload, ErrorCode::kTruncated,
          "truncated: declared " + std::to_string(payload) + " payload bytes, found " +
              std::to_string(bytes.size() - kTraceHeaderBytes));
  require(bytes.size() - kTraceHeaderBytes == payload, ErrorCode::kTrailingData, "trailing data after payload");

  AttentionTrace t;
  t.layers = header[1];
  t.heads = header[2];
  t.seq_len = header[3];
  t.data.resize(cells);
  if (cells) std::memcpy(t.data.data(), bytes.data() + kTraceHeaderBytes, payload);
  return t;
}

inline void save_trace(const AttentionTrace& t, const std::string& path) {
  const auto bytes = encode_trace(t);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  detail::require(static_cast<bool>(f), ErrorCode::kIo, "cannot open '" + path + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  detail::require(static_cast<bool>(f), ErrorCode::kIo, "write to '" + path + "' failed");
}

inline AttentionTrace load_trace(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  detail::require(static_cast<bool>(f), ErrorCode::kIo, "cannot open '" + path + "'");
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_trace(bytes);
}

// Full-cache prefill over `tokens`, keeping every head's attention matrix.
inline AttentionTrace capture_trace(const Model& model, std::span<const TokenId> tokens) {
  const FullPolicy full;
  RunOptions opts;
  opts.keep_attention = true;
  const auto res = prefill(model, tokens, full, opts);
  const auto& cfg = model.config;
  AttentionTrace t(static_cast<std::uint32_t>(cfg.layers), static_cast<std::uint32_t>(cfg.heads),
                   static_cast<std::uint32_t>(tokens.size()));
  for (std::size_t l = 0; l < cfg.layers; ++l)
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      const Matrix& m = res.output.attn[l][h];
      std::copy(m.data.begin(), m.data.end(), t.data.begin() + static_cast<std::ptrdiff_t>(t.offset(l, h)));
    }
  return t;
}

}  // namespace pykv
