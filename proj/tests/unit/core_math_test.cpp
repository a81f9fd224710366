#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "pykv/core_math.hpp"
#include "pykv/rng.hpp"

namespace pykv {
namespace {

HeadTensor random_heads(std::uint64_t seed, std::size_t heads, std::size_t seq, std::size_t dim) {
  const CounterRng rng(seed);
  HeadTensor t(heads, seq, dim);
  for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = static_cast<float>(rng.normal(i));
  return t;
}

TEST(Softmax, ZerosGiveHalves) {
  const Matrix out = softmax_rows(Matrix(1, 2, std::vector<float>{0.0f, 0.0f}));
  EXPECT_FLOAT_EQ(out(0, 0), 0.5f);
  EXPECT_FLOAT_EQ(out(0, 1), 0.5f);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
  const Matrix out = softmax_rows(Matrix(1, 3, std::vector<float>{1000.0f, 1000.0f, 1000.0f}));
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(out(0, j), 1.0 / 3.0, 1e-7);
}

TEST(Softmax, LogOneLogThree) {
  const Matrix out = softmax_rows(Matrix(1, 2, std::vector<float>{0.0f, static_cast<float>(std::log(3.0))}));
  EXPECT_NEAR(out(0, 0), 0.25, 1e-6);
  EXPECT_NEAR(out(0, 1), 0.75, 1e-6);
}

TEST(Softmax, RowsSumToOne) {
  const CounterRng rng(7);
  Matrix m(16, 33);
  for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = static_cast<float>(20.0 * rng.normal(i));
  const Matrix out = softmax_rows(m);
  for (std::size_t r = 0; r < out.rows; ++r) {
    double sum = 0.0;
    for (float v : out.row(r)) sum += v;
    EXPECT_NEAR(sum, 1.0, 1e-5);
  }
}

TEST(Softmax, RejectsNonFinite) {
  Matrix m(1, 2, std::vector<float>{0.0f, std::numeric_limits<float>::quiet_NaN()});
  try {
    softmax_rows(m);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNonFinite);
  }
  m.data[1] = std::numeric_limits<float>::infinity();
  EXPECT_THROW(softmax_rows(m), Error);
}

TEST(Rotary, PositionZeroIsIdentity) {
  const HeadTensor t = random_heads(1, 2, 1, 8);
  const std::vector<std::size_t> pos{0};
  EXPECT_EQ(rotary_encode(t, pos), t);
}

TEST(Rotary, UnitVectorAtPositionOne) {
  HeadTensor t(1, 1, 2);
  t.at(0, 0, 0) = 1.0f;
  const std::vector<std::size_t> pos{1};
  const HeadTensor out = rotary_encode(t, pos);
  EXPECT_NEAR(out.at(0, 0, 0), std::cos(1.0), 1e-7);
  EXPECT_NEAR(out.at(0, 0, 1), std::sin(1.0), 1e-7);
}

TEST(Rotary, PreservesPairNorms) {
  const HeadTensor t = random_heads(3, 3, 5, 16);
  const std::vector<std::size_t> pos{0, 3, 17, 400, 2047};
  const HeadTensor out = rotary_encode(t, pos);
  for (std::size_t h = 0; h < t.heads; ++h)
    for (std::size_t s = 0; s < t.seq; ++s)
      for (std::size_t j = 0; j < t.head_dim; j += 2) {
        const double a = std::hypot(t.at(h, s, j), t.at(h, s, j + 1));
        const double b = std::hypot(out.at(h, s, j), out.at(h, s, j + 1));
        EXPECT_NEAR(a, b, 1e-5);
      }
}

TEST(Rotary, DotProductDependsOnOffsetOnly) {
  const HeadTensor q = random_heads(4, 1, 1, 8);
  const HeadTensor k = random_heads(5, 1, 1, 8);
  auto dot_at = [&](std::size_t pq, std::size_t pk) {
    const std::vector<std::size_t> a{pq}, b{pk};
    const HeadTensor qr = rotary_encode(q, a), kr = rotary_encode(k, b);
    double d = 0.0;
    for (std::size_t i = 0; i < 8; ++i) d += qr.data[i] * kr.data[i];
    return d;
  };
  EXPECT_NEAR(dot_at(10, 7), dot_at(110, 107), 1e-4);
}

TEST(Rotary, Errors) {
  const HeadTensor odd(1, 1, 3);
  const std::vector<std::size_t> one{0};
  EXPECT_THROW(rotary_encode(odd, one), Error);
  const HeadTensor t(1, 2, 4);
  EXPECT_THROW(rotary_encode(t, one), Error);
  const std::vector<std::size_t> bad{3, 3};
  try {
    rotary_encode(t, bad);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kOrdering);
  }
}

TEST(Attention, SingleKeyHasUnitWeight) {
  const HeadTensor q = random_heads(1, 2, 1, 4), k = random_heads(2, 2, 1, 4), v = random_heads(3, 2, 1, 4);
  const auto res = attention_forward(q, k, v, 0);
  for (const auto& w : res.weights) EXPECT_FLOAT_EQ(w(0, 0), 1.0f);
  EXPECT_EQ(res.out, v);
  EXPECT_EQ(res.cells, 2u);
}

TEST(Attention, CausalMaskZeroesUpperTriangle) {
  const HeadTensor q = random_heads(1, 2, 3, 4), k = random_heads(2, 2, 3, 4), v = random_heads(3, 2, 3, 4);
  const auto res = attention_forward(q, k, v, 0);
  for (const auto& w : res.weights)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) {
        if (j > i) EXPECT_EQ(w(i, j), 0.0f);
        else EXPECT_GT(w(i, j), 0.0f);
      }
  EXPECT_EQ(res.cells, 2u * 6u);
}

TEST(Attention, OffsetMaskMatchesCacheLayout) {
  const HeadTensor q = random_heads(1, 1, 2, 4), k = random_heads(2, 1, 5, 4), v = random_heads(3, 1, 5, 4);
  const auto res = attention_forward(q, k, v, 3);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(res.weights[0](i, j) == 0.0f, j > i + 3);
  EXPECT_THROW(attention_forward(q, k, v, 2), Error);
}

TEST(Attention, IdenticalKeysAverageValues) {
  HeadTensor q = random_heads(1, 1, 1, 4);
  HeadTensor k(1, 2, 4);
  for (std::size_t d = 0; d < 4; ++d) k.at(0, 0, d) = k.at(0, 1, d) = 0.3f * static_cast<float>(d);
  const HeadTensor v = random_heads(4, 1, 2, 4);
  const auto res = attention_forward(q, k, v, 1);
  EXPECT_FLOAT_EQ(res.weights[0](0, 0), 0.5f);
  EXPECT_FLOAT_EQ(res.weights[0](0, 1), 0.5f);
  for (std::size_t d = 0; d < 4; ++d) EXPECT_NEAR(res.out.at(0, 0, d), 0.5f * (v.at(0, 0, d) + v.at(0, 1, d)), 1e-6);
}

TEST(Attention, MatchesPerQueryOracle) {
  const std::size_t heads = 3, seq = 9, dim = 8;
  const HeadTensor q = random_heads(11, heads, seq, dim), k = random_heads(12, heads, seq, dim),
                   v = random_heads(13, heads, seq, dim);
  const auto res = attention_forward(q, k, v, 0);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < seq; ++i) {
      std::vector<double> s(i + 1);
      double mx = -1e300;
      for (std::size_t j = 0; j <= i; ++j) {
        double dot = 0.0;
        for (std::size_t d = 0; d < dim; ++d) dot += static_cast<double>(q.at(h, i, d)) * k.at(h, j, d);
        s[j] = dot / std::sqrt(static_cast<double>(dim));
        mx = std::max(mx, s[j]);
      }
      double z = 0.0;
      for (double& x : s) z += (x = std::exp(x - mx));
      for (std::size_t d = 0; d < dim; ++d) {
        double o = 0.0;
        for (std::size_t j = 0; j <= i; ++j) o += s[j] / z * v.at(h, j, d);
        EXPECT_NEAR(res.out.at(h, i, d), o, 1e-5);
      }
      for (std::size_t j = 0; j <= i; ++j) EXPECT_NEAR(res.weights[h](i, j), s[j] / z, 1e-5);
    }
}

TEST(Attention, ShapeErrors) {
  const HeadTensor q(1, 2, 4), k(1, 1, 4), v(1, 1, 4);
  EXPECT_THROW(attention_forward(q, k, v, 0), Error);
  const HeadTensor k2(2, 2, 4), v2(2, 2, 4);
  EXPECT_THROW(attention_forward(q, k2, v2, 0), Error);
}

TEST(HeadMean, AveragesHeads) {
  const std::vector<Matrix> hs{Matrix(1, 2, std::vector<float>{1.0f, 0.0f}), Matrix(1, 2, std::vector<float>{0.0f, 1.0f})};
  const Matrix m = head_mean(hs);
  EXPECT_FLOAT_EQ(m(0, 0), 0.5f);
  EXPECT_FLOAT_EQ(m(0, 1), 0.5f);
  EXPECT_THROW(head_mean(std::span<const Matrix>{}), Error);
}

TEST(Matmul, SmallProduct) {
  const Matrix a(2, 2, std::vector<float>{1, 2, 3, 4});
  const Matrix b(2, 1, std::vector<float>{5, 6});
  const Matrix c = matmul(a, b);
  EXPECT_FLOAT_EQ(c(0, 0), 17.0f);
  EXPECT_FLOAT_EQ(c(1, 0), 39.0f);
  EXPECT_THROW(matmul(b, b), Error);
}

}  // namespace
}  // namespace pykv
