#include <gtest/gtest.h>

#include <algorithm>
#include <set>
#include <sstream>
#include <vector>

#include "pykv/analysis.hpp"
#include "pykv/bench.hpp"
#include "pykv/rng.hpp"

namespace pykv {
namespace {

// Row i spreads its mass over j <= i in proportion to profile(i, j).
template <typename F>
AttentionTrace causal_trace(std::uint32_t layers, std::uint32_t heads, std::uint32_t n, F profile) {
  AttentionTrace t(layers, heads, n);
  for (std::uint32_t l = 0; l < layers; ++l)
    for (std::uint32_t h = 0; h < heads; ++h)
      for (std::uint32_t i = 0; i < n; ++i) {
        double sum = 0.0;
        for (std::uint32_t j = 0; j <= i; ++j) sum += profile(l, h, i, j);
        for (std::uint32_t j = 0; j <= i; ++j) t.at(l, h, i, j) = static_cast<float>(profile(l, h, i, j) / sum);
      }
  return t;
}

AttentionTrace random_trace(std::uint64_t seed, std::uint32_t layers, std::uint32_t heads, std::uint32_t n) {
  const CounterRng rng(seed);
  return causal_trace(layers, heads, n, [&](auto l, auto h, auto i, auto j) {
    return rng.uniform(((static_cast<std::uint64_t>(l) * heads + h) * n + i) * n + j);
  });
}

// Same column profile on every row, so every row ranks context columns alike.
AttentionTrace uniform_profile_trace(std::uint32_t n) {
  return causal_trace(2, 2, n, [](auto, auto, auto, auto j) {
    return 1.0 + static_cast<double>((j * 7) % 13);
  });
}

TEST(Overlap, Examples) {
  const std::vector<std::size_t> a{1, 3, 5}, ref{3, 5, 7, 9}, other{2, 4};
  EXPECT_DOUBLE_EQ(overlap_ratio(ref, ref), 1.0);
  EXPECT_DOUBLE_EQ(overlap_ratio(other, ref), 0.0);
  EXPECT_DOUBLE_EQ(overlap_ratio(a, ref), 0.5);
  EXPECT_THROW(overlap_ratio(a, std::vector<std::size_t>{}), Error);
}

TEST(Overlap, OneIffReferenceIsSubset) {
  const CounterRng rng(17);
  std::uint64_t ctr = 0;
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<std::size_t> a, ref;
    for (std::size_t i = 0; i < 20; ++i) {
      if (rng.uniform(ctr++) < 0.6) a.push_back(i);
      if (rng.uniform(ctr++) < 0.3) ref.push_back(i);
    }
    if (ref.empty()) ref.push_back(3);
    const double r = overlap_ratio(a, ref);
    EXPECT_GE(r, 0.0);
    EXPECT_LE(r, 1.0);
    const bool subset = std::includes(a.begin(), a.end(), ref.begin(), ref.end());
    EXPECT_EQ(r == 1.0, subset);
  }
}

TEST(Rac, ProbeAtZeroIsReference) {
  const auto rep = rac_heatmap(random_trace(1, 3, 2, 80));
  ASSERT_EQ(rep.overlap.size(), 3u);
  for (const auto& row : rep.overlap) {
    ASSERT_EQ(row.size(), 6u);
    EXPECT_DOUBLE_EQ(row[0], 1.0);
    for (double v : row) EXPECT_TRUE(v >= 0.0 && v <= 1.0);
  }
}

TEST(Rac, FullTopPIsAllOnes) {
  for (auto mode : {OverlapMode::kSeparate, OverlapMode::kEnsemble}) {
    RacOptions opt;
    opt.top_p = 1.0;
    opt.mode = mode;
    for (const auto& row : rac_heatmap(random_trace(2, 2, 2, 64), opt).overlap)
      for (double v : row) EXPECT_DOUBLE_EQ(v, 1.0);
  }
}

TEST(Rac, EnsembleEqualsSeparateOnUniformProfile) {
  const auto trace = uniform_profile_trace(100);
  RacOptions sep;
  sep.top_p = 0.4;
  RacOptions ens = sep;
  ens.mode = OverlapMode::kEnsemble;
  const auto a = rac_heatmap(trace, sep);
  const auto b = rac_heatmap(trace, ens);
  EXPECT_EQ(a.overlap, b.overlap);
  for (const auto& row : a.overlap)
    for (double v : row) EXPECT_DOUBLE_EQ(v, 1.0);
}

TEST(Rac, PureAndDeterministic) {
  const auto trace = random_trace(3, 2, 2, 60);
  RacOptions opt;
  opt.mode = OverlapMode::kEnsemble;
  EXPECT_EQ(rac_heatmap(trace, opt).overlap, rac_heatmap(trace, opt).overlap);
}

TEST(Rac, EmptyBucketIsReported) {
  RacOptions opt;
  opt.d_grid = {0.0, 0.5};
  try {
    rac_heatmap(random_trace(4, 1, 1, 40), opt);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kEmptyPartition);
  }
}

TEST(Rac, CsvLayout) {
  std::ostringstream os;
  write_rac_csv(os, rac_heatmap(random_trace(5, 2, 1, 40)));
  const std::string s = os.str();
  EXPECT_EQ(s.substr(0, s.find('\n')), "layer,d_bucket,mode,overlap");
  EXPECT_EQ(std::count(s.begin(), s.end(), '\n'), 1 + 2 * 6);
}

TEST(Nonshared, FullTopPIsDegenerate) {
  NonsharedOptions opt;
  opt.top_p = 1.0;
  for (const auto& layer : nonshared_overlap(random_trace(6, 2, 2, 100), opt).layers) {
    EXPECT_TRUE(layer.degenerate);
    for (const auto& p : layer.probes) EXPECT_EQ(p.nonshared_size, 0u);
  }
}

TEST(Nonshared, IdenticalRowsOverlapFully) {
  const std::uint32_t n = 100;
  const auto trace = causal_trace(1, 1, n, [&](auto, auto, auto i, auto j) {
    const double up = 1.0 + static_cast<double>(j);
    return i + 1 == n ? 1.0 / up : up;
  });
  NonsharedOptions opt;
  opt.top_p = 0.5;
  const auto rep = nonshared_overlap(trace, opt);
  ASSERT_FALSE(rep.layers[0].degenerate);
  for (const auto& p : rep.layers[0].probes) {
    ASSERT_GT(p.nonshared_size, 0u);
    EXPECT_DOUBLE_EQ(p.overlap_nonshared, 1.0);
    EXPECT_DOUBLE_EQ(p.overlap_nonpvc, 0.0);
  }
}

TEST(Nonshared, PartitionBound) {
  NonsharedOptions opt;
  opt.top_p = 0.3;
  const auto rep = nonshared_overlap(random_trace(7, 3, 2, 120), opt);
  for (const auto& layer : rep.layers) {
    for (const auto& p : layer.probes) {
      EXPECT_LE(p.overlap_nonshared + p.overlap_nonpvc, 1.0 + 1e-12);
      EXPECT_GT(p.d, opt.split_ratio);
      EXPECT_LT(p.d, opt.context_ratio);
    }
  }
  std::ostringstream os;
  write_nonshared_csv(os, rep);
  EXPECT_EQ(os.str().substr(0, 6), "layer,");
}

TEST(Nonshared, TooShortForPartition) {
  EXPECT_THROW(nonshared_overlap(random_trace(8, 1, 1, 5)), Error);
}

ModelConfig icr_config() {
  ModelConfig c;
  c.layers = 3;
  c.heads = 2;
  c.head_dim = 8;
  c.vocab = 32;
  c.seed = 21;
  return c;
}

TEST(Icr, FullRetentionMatchesBaseline) {
  const Model m = init_model(icr_config());
  const auto tokens = random_tokens(3, 0, 40, m.config.vocab);
  const std::vector<double> grid{0.2, 0.5, 1.0};
  const auto rep = icr_report(m, tokens, grid);
  ASSERT_EQ(rep.perplexity.size(), 3u);
  for (const auto& curve : rep.perplexity) {
    ASSERT_EQ(curve.size(), grid.size());
    EXPECT_NEAR(curve.back(), rep.baseline, 1e-6);
    for (double v : curve) EXPECT_TRUE(std::isfinite(v) && v > 0.0);
  }
  std::ostringstream os;
  write_icr_csv(os, rep);
  const std::string s = os.str();
  EXPECT_EQ(std::count(s.begin(), s.end(), '\n'), 1 + 3 * 3);
}

TEST(Icr, SingleLayerPolicyOnlyTouchesItsLayer) {
  const Model m = init_model(icr_config());
  const SingleLayerPvcPolicy policy(3, 1, 0.2);
  const auto g = generate_greedy(m, random_tokens(4, 0, 30, m.config.vocab), 10, policy);
  const auto& last = g.cache_lengths.back();
  EXPECT_EQ(last[0], 40u);
  EXPECT_EQ(last[2], 40u);
  EXPECT_EQ(last[1], 1u + retained_count(0.2, 39));
  EXPECT_THROW(SingleLayerPvcPolicy(3, 3, 0.5), Error);
}

TEST(Icr, InflationIsZeroWhenLossless) {
  const Model m = init_model(icr_config());
  const auto tokens = random_tokens(5, 0, 30, m.config.vocab);
  EXPECT_EQ(perplexity_inflation(m, tokens, SingleLayerPvcPolicy(3, 0, 1.0)), 0.0);
  EXPECT_GT(perplexity_inflation(m, tokens, SingleLayerPvcPolicy(3, 0, 0.1)), 0.0);
  const std::vector<double> grid{0.1, 1.0};
  const auto rep = icr_report(m, tokens, grid);
  ASSERT_EQ(rep.inflation.size(), 3u);
  for (const auto& curve : rep.inflation) {
    EXPECT_GT(curve[0], 0.0);
    EXPECT_EQ(curve[1], 0.0);
  }
}

TEST(Kl, IdenticalAndShifted) {
  const std::vector<std::vector<float>> a{{0.0f, 1.0f, 2.0f}}, b{{5.0f, 6.0f, 7.0f}}, c{{2.0f, 1.0f, 0.0f}};
  EXPECT_NEAR(mean_kl(a, b), 0.0, 1e-12);
  EXPECT_GT(mean_kl(a, c), 0.0);
  EXPECT_THROW(mean_kl(a, std::vector<std::vector<float>>{}), Error);
}

TEST(IcrStd, PopulationStd) {
  IcrReport rep;
  rep.retention_grid = {0.2, 0.8};
  rep.perplexity = {{3.0, 3.0}, {2.0, 4.0}, {1.0, 1.0}};
  const auto s = icr_std(rep);
  ASSERT_EQ(s.size(), 3u);
  EXPECT_DOUBLE_EQ(s[0], 0.0);
  EXPECT_DOUBLE_EQ(s[1], 1.0);
  rep.perplexity.push_back({1.0});
  EXPECT_THROW(icr_std(rep), Error);
}

}  // namespace
}  // namespace pykv
