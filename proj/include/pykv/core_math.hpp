#pragma once

// Dense fp32 kernels used by the engine: row softmax, rotary encoding and a
// causal multi-head attention forward that also returns its weights.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "pykv/error.hpp"

namespace pykv {

inline constexpr double kRotaryBase = 10000.0;

// Row-major dense matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, float fill = 0.0f) : rows(r), cols(c), data(r * c, fill) {}
  Matrix(std::size_t r, std::size_t c, std::vector<float> values) : rows(r), cols(c), data(std::move(values)) {
    detail::require(data.size() == r * c, ErrorCode::kShapeMismatch, "matrix data length != rows*cols");
  }

  float& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  float operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<float> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const float> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  friend bool operator==(const Matrix&, const Matrix&) = default;
};

// [heads, seq, head_dim], head-major.
struct HeadTensor {
  std::size_t heads = 0;
  std::size_t seq = 0;
  std::size_t head_dim = 0;
  std::vector<float> data;

  HeadTensor() = default;
  HeadTensor(std::size_t h, std::size_t s, std::size_t d) : heads(h), seq(s), head_dim(d), data(h * s * d, 0.0f) {}

  float& at(std::size_t h, std::size_t s, std::size_t d) { return data[(h * seq + s) * head_dim + d]; }
  float at(std::size_t h, std::size_t s, std::size_t d) const { return data[(h * seq + s) * head_dim + d]; }

  std::span<float> vec(std::size_t h, std::size_t s) { return {data.data() + (h * seq + s) * head_dim, head_dim}; }
  std::span<const float> vec(std::size_t h, std::size_t s) const {
    return {data.data() + (h * seq + s) * head_dim, head_dim};
  }

  friend bool operator==(const HeadTensor&, const HeadTensor&) = default;
};

inline bool all_finite(std::span<const float> xs) {
  return std::all_of(xs.begin(), xs.end(), [](float x) { return std::isfinite(x); });
}

// Softmax of `logits` into `out` over the first `allowed` entries; the rest are 0.
inline void softmax_prefix(std::span<const float> logits, std::size_t allowed, std::span<float> out) {
  float mx = logits[0];
  for (std::size_t j = 1; j < allowed; ++j) mx = std::max(mx, logits[j]);
  float sum = 0.0f;
  for (std::size_t j = 0; j < allowed; ++j) {
    out[j] = std::exp(logits[j] - mx);
    sum += out[j];
  }
  const float inv = 1.0f / sum;
  for (std::size_t j = 0; j < allowed; ++j) out[j] *= inv;
  for (std::size_t j = allowed; j < out.size(); ++j) out[j] = 0.0f;
}

inline Matrix softmax_rows(const Matrix& m) {
  detail::require(all_finite(m.data), ErrorCode::kNonFinite, "non-finite logits");
  Matrix out(m.rows, m.cols);
  if (m.cols == 0) return out;
  for (std::size_t r = 0; r < m.rows; ++r) softmax_prefix(m.row(r), m.cols, out.row(r));
  return out;
}

// Rotates each adjacent pair (2j, 2j+1) of `v` by pos * base^(-2j/dim).
inline void rotate_pairs(std::span<float> v, std::size_t pos) {
  const std::size_t dim = v.size();
  for (std::size_t j = 0; j < dim / 2; ++j) {
    const double theta =
        static_cast<double>(pos) * std::pow(kRotaryBase, -2.0 * static_cast<double>(j) / static_cast<double>(dim));
    const double c = std::cos(theta);
    const double s = std::sin(theta);
    const double x0 = v[2 * j];
    const double x1 = v[2 * j + 1];
    v[2 * j] = static_cast<float>(x0 * c - x1 * s);
    v[2 * j + 1] = static_cast<float>(x0 * s + x1 * c);
  }
}

inline HeadTensor rotary_encode(const HeadTensor& vecs, std::span<const std::size_t> positions) {
  detail::require(vecs.head_dim % 2 == 0, ErrorCode::kInvalidArgument, "rotary_encode: head_dim must be even");
  detail::require(positions.size() == vecs.seq, ErrorCode::kShapeMismatch,
                  "rotary_encode: positions length != seq");
  for (std::size_t i = 1; i < positions.size(); ++i) {
    detail::require(positions[i] > positions[i - 1], ErrorCode::kOrdering,
                    "rotary_encode: positions must be strictly increasing");
  }
  HeadTensor out = vecs;
  for (std::size_t h = 0; h < out.heads; ++h)
    for (std::size_t s = 0; s < out.seq; ++s) rotate_pairs(out.vec(h, s), positions[s]);
  return out;
}

struct AttentionResult {
  HeadTensor out;
  std::vector<Matrix> weights;  // one [q.seq, k.seq] matrix per head
  std::uint64_t cells = 0;      // unmasked score cells evaluated, summed over heads
};

inline AttentionResult attention_forward(const HeadTensor& q, const HeadTensor& k, const HeadTensor& v,
                                         std::size_t causal_offset) {
  using detail::require;
  require(q.heads == k.heads && k.heads == v.heads, ErrorCode::kShapeMismatch, "attention: head count mismatch");
  require(q.head_dim == k.head_dim && k.head_dim == v.head_dim, ErrorCode::kShapeMismatch,
          "attention: head_dim mismatch");
  require(k.seq == v.seq, ErrorCode::kShapeMismatch, "attention: k.seq != v.seq");
  require(k.seq >= q.seq && q.seq >= 1, ErrorCode::kShapeMismatch, "attention: need k.seq >= q.seq >= 1");
  require(causal_offset == k.seq - q.seq, ErrorCode::kShapeMismatch, "attention: causal_offset != k.seq - q.seq");

  const std::size_t hd = q.head_dim;
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
  AttentionResult res;
  res.out = HeadTensor(q.heads, q.seq, hd);
  res.weights.assign(q.heads, Matrix(q.seq, k.seq));
  std::vector<float> scores(k.seq);

  for (std::size_t h = 0; h < q.heads; ++h) {
    Matrix& w = res.weights[h];
    for (std::size_t i = 0; i < q.seq; ++i) {
      const std::size_t allowed = i + causal_offset + 1;
      const auto qi = q.vec(h, i);
      for (std::size_t j = 0; j < allowed; ++j) {
        const auto kj = k.vec(h, j);
        float dot = 0.0f;
        for (std::size_t d = 0; d < hd; ++d) dot += qi[d] * kj[d];
        scores[j] = dot * scale;
      }
      auto wrow = w.row(i);
      softmax_prefix(scores, allowed, wrow);
      auto oi = res.out.vec(h, i);
      for (std::size_t j = 0; j < allowed; ++j) {
        const float a = wrow[j];
        const auto vj = v.vec(h, j);
        for (std::size_t d = 0; d < hd; ++d) oi[d] += a * vj[d];
      }
      res.cells += allowed;
    }
  }
  return res;
}

// Arithmetic mean over heads.
inline Matrix head_mean(std::span<const Matrix> per_head) {
  detail::require(!per_head.empty(), ErrorCode::kInvalidArgument, "head_mean: no heads");
  Matrix out(per_head[0].rows, per_head[0].cols);
  for (const Matrix& m : per_head) {
    detail::require(m.rows == out.rows && m.cols == out.cols, ErrorCode::kShapeMismatch, "head_mean: ragged heads");
    for (std::size_t i = 0; i < m.data.size(); ++i) out.data[i] += m.data[i];
  }
  const float inv = 1.0f / static_cast<float>(per_head.size());
  for (float& x : out.data) x *= inv;
  return out;
}

// out[n, w.cols] = a[n, w.rows] * w
inline Matrix matmul(const Matrix& a, const Matrix& w) {
  detail::require(a.cols == w.rows, ErrorCode::kShapeMismatch, "matmul: inner dimension mismatch");
  Matrix out(a.rows, w.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    float* o = out.data.data() + i * w.cols;
    for (std::size_t k = 0; k < a.cols; ++k) {
      const float aik = a(i, k);
      const float* wr = w.data.data() + k * w.cols;
      for (std::size_t j = 0; j < w.cols; ++j) o[j] += aik * wr[j];
    }
  }
  return out;
}

}  // namespace pykv
