#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <vector>

#include "pykv/bench.hpp"
#include "pykv/rng.hpp"
#include "pykv/trace.hpp"

namespace pykv {
namespace {

AttentionTrace random_payload(std::uint64_t seed, std::uint32_t l, std::uint32_t h, std::uint32_t n) {
  const CounterRng rng(seed);
  AttentionTrace t(l, h, n);
  for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = static_cast<float>(rng.normal(i));
  return t;
}

ErrorCode decode_error(const std::vector<std::uint8_t>& bytes) {
  try {
    decode_trace(bytes);
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "decode_trace accepted malformed input";
  return ErrorCode::kInvalidArgument;
}

void put_u32(std::vector<std::uint8_t>& b, std::size_t off, std::uint32_t v) { std::memcpy(b.data() + off, &v, 4); }

TEST(TraceFormat, HeaderLayout) {
  const auto bytes = encode_trace(random_payload(1, 2, 3, 4));
  ASSERT_EQ(bytes.size(), 20u + 2 * 3 * 16 * 4);
  EXPECT_EQ(std::memcmp(bytes.data(), "ATRC", 4), 0);
  std::uint32_t fields[4];
  std::memcpy(fields, bytes.data() + 4, 16);
  EXPECT_EQ(fields[0], 1u);
  EXPECT_EQ(fields[1], 2u);
  EXPECT_EQ(fields[2], 3u);
  EXPECT_EQ(fields[3], 4u);
}

TEST(TraceFormat, RoundTripIsBitIdentical) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto t = random_payload(s, 1 + s % 3, 1 + s % 2, static_cast<std::uint32_t>(s % 7));
    const auto back = decode_trace(encode_trace(t));
    ASSERT_EQ(back.data.size(), t.data.size());
    EXPECT_EQ(std::memcmp(back.data.data(), t.data.data(), t.data.size() * sizeof(float)), 0);
    EXPECT_EQ(back, t);
  }
}

TEST(TraceFormat, FileRoundTrip) {
  const auto path = (std::filesystem::temp_directory_path() / "pykv_trace_test.atrc").string();
  const auto t = random_payload(9, 2, 2, 5);
  save_trace(t, path);
  EXPECT_EQ(load_trace(path), t);
  std::filesystem::remove(path);
  EXPECT_THROW(load_trace(path), Error);
}

TEST(TraceFormat, BadMagic) {
  auto bytes = encode_trace(random_payload(2, 1, 1, 3));
  bytes[0] = 'X';
  EXPECT_EQ(decode_error(bytes), ErrorCode::kBadMagic);
  try {
    decode_trace(bytes);
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "bad magic");
  }
}

TEST(TraceFormat, Truncated) {
  auto bytes = encode_trace(random_payload(3, 2, 2, 6));
  bytes.pop_back();
  EXPECT_EQ(decode_error(bytes), ErrorCode::kTruncated);
  bytes.resize(12);
  EXPECT_EQ(decode_error(bytes), ErrorCode::kTruncated);
  bytes.resize(2);
  EXPECT_EQ(decode_error(bytes), ErrorCode::kTruncated);
}

TEST(TraceFormat, DimensionOverflow) {
  auto bytes = encode_trace(random_payload(4, 1, 1, 2));
  put_u32(bytes, 8, 0xFFFFFFFFu);
  put_u32(bytes, 12, 0xFFFFFFFFu);
  put_u32(bytes, 16, 0xFFFFFFFFu);
  EXPECT_EQ(decode_error(bytes), ErrorCode::kDimensionOverflow);
  put_u32(bytes, 8, 1);
  put_u32(bytes, 12, 1);
  put_u32(bytes, 16, 1u << 20);  // 2^40 cells: over the payload cap
  EXPECT_EQ(decode_error(bytes), ErrorCode::kDimensionOverflow);
}

TEST(TraceFormat, VersionAndTrailingData) {
  auto bytes = encode_trace(random_payload(5, 1, 1, 2));
  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_EQ(decode_error(trailing), ErrorCode::kTrailingData);
  put_u32(bytes, 4, 2);
  EXPECT_EQ(decode_error(bytes), ErrorCode::kBadVersion);
}

TEST(TraceCapture, RowsAreCausalDistributions) {
  ModelConfig c;
  c.layers = 2;
  c.heads = 2;
  c.head_dim = 8;
  c.vocab = 16;
  const Model m = init_model(c);
  const auto t = capture_trace(m, random_tokens(1, 0, 12, c.vocab));
  EXPECT_EQ(t.layers, 2u);
  EXPECT_EQ(t.seq_len, 12u);
  EXPECT_NO_THROW(validate_trace(t, 1e-5));
  AttentionTrace bad = t;
  bad.at(0, 0, 0, 1) = 0.5f;
  EXPECT_THROW(validate_trace(bad), Error);
}

}  // namespace
}  // namespace pykv
