#pragma once

// Efficiency measurements for cache policies. KV entry counts and attention
// cells are hardware-independent and deterministic; wall-clock latency and
// throughput are reported alongside but vary from run to run.

#include <algorithm>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <iomanip>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "pykv/error.hpp"
#include "pykv/kv_store.hpp"
#include "pykv/model.hpp"
#include "pykv/policies.hpp"
#include "pykv/rng.hpp"

namespace pykv {

struct BenchRecord {
  std::string policy;
  std::size_t batch = 0;
  std::size_t prefill = 0;
  std::size_t gen = 0;
  std::uint64_t kv_entries_peak = 0;
  std::uint64_t kv_bytes_peak = 0;
  std::uint64_t attn_cells = 0;
  std::uint64_t sort_ops = 0;  // candidates ranked by top-k selection
  double lat_ms_per_token = 0.0;
  double thr_tok_s = 0.0;
};

struct BenchOptions {
  std::size_t bytes_per_element = 4;
  PositionMode position_mode = PositionMode::kGather;
  std::size_t workers = 0;  // 0 = hardware concurrency
};

inline std::vector<TokenId> random_tokens(std::uint64_t seed, std::uint64_t stream, std::size_t len,
                                          std::size_t vocab) {
  const CounterRng rng = CounterRng(seed).stream(stream);
  std::vector<TokenId> out(len);
  for (std::size_t i = 0; i < len; ++i) out[i] = static_cast<TokenId>(rng.below(i, vocab));
  return out;
}

// Attention cells of one full-cache sequence: causal prefill plus one query per
// decode step over a cache that grows by one each step.
inline std::uint64_t full_cache_attn_cells(std::size_t layers, std::size_t heads, std::size_t prefill_len,
                                           std::size_t gen_len) {
  const std::uint64_t p = prefill_len;
  const std::uint64_t g = gen_len;
  const std::uint64_t per_head = p * (p + 1) / 2 + g * p + g * (g + 1) / 2;
  return std::uint64_t{layers} * heads * per_head;
}

namespace detail {

struct SequenceRun {
  std::vector<std::uint64_t> entries;  // kv_entry_count after prefill and after each decode step
  ForwardStats stats;
};

inline SequenceRun run_sequence(const Model& model, const CachePolicy& policy, std::span<const TokenId> prompt,
                                std::size_t gen_len, PositionMode mode) {
  SequenceRun run;
  RunOptions opts;
  opts.position_mode = mode;
  auto pre = prefill(model, prompt, policy, opts);
  run.stats = pre.output.stats;
  run.entries.push_back(kv_entry_count(pre.caches));
  TokenId next = argmax(pre.output.logits);
  for (std::size_t s = 0; s < gen_len; ++s) {
    const auto out = decode_step(model, next, pre.caches, policy);
    run.stats.attn_cells += out.stats.attn_cells;
    run.stats.ranked += out.stats.ranked;
    run.entries.push_back(kv_entry_count(pre.caches));
    next = argmax(out.logits);
  }
  return run;
}

}  // namespace detail

// `batch` independent greedy sequences with random prompts drawn from `seed`.
inline BenchRecord run_bench(const Model& model, const CachePolicy& policy, std::size_t batch, std::size_t prefill_len,
                             std::size_t gen_len, std::uint64_t seed, const BenchOptions& opts = {}) {
  using detail::require;
  require(batch >= 1, ErrorCode::kInvalidArgument, "bench: batch must be >= 1");
  require(prefill_len >= 1, ErrorCode::kInvalidArgument, "bench: prefill length must be >= 1");
  require(prefill_len + gen_len <= model.config.max_seq, ErrorCode::kOutOfRange,
          "bench: prefill + gen exceeds max_seq " + std::to_string(model.config.max_seq));

  std::vector<detail::SequenceRun> runs(batch);
  std::vector<std::exception_ptr> errors(batch);
  std::size_t workers = opts.workers ? opts.workers : std::max(1u, std::thread::hardware_concurrency());
  workers = std::min(workers, batch);

  const auto t0 = std::chrono::steady_clock::now();
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t b = w; b < batch; b += workers) {
          try {
            const auto prompt = random_tokens(seed, b, prefill_len, model.config.vocab);
            runs[b] = detail::run_sequence(model, policy, prompt, gen_len, opts.position_mode);
          } catch (...) {
            errors[b] = std::current_exception();
          }
        }
      });
    }
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  BenchRecord rec;
  rec.policy = policy.name();
  rec.batch = batch;
  rec.prefill = prefill_len;
  rec.gen = gen_len;
  std::vector<std::uint64_t> total(gen_len + 1, 0);
  for (const auto& r : runs) {
    for (std::size_t t = 0; t < total.size(); ++t) total[t] += r.entries[t];
    rec.attn_cells += r.stats.attn_cells;
    rec.sort_ops += r.stats.ranked;
  }
  rec.kv_entries_peak = *std::max_element(total.begin(), total.end());
  rec.kv_bytes_peak =
      2ULL * rec.kv_entries_peak * model.config.heads * model.config.head_dim * opts.bytes_per_element;
  const double tokens = static_cast<double>(batch * (gen_len > 0 ? gen_len : prefill_len));
  rec.thr_tok_s = tokens / std::max(seconds, 1e-9);
  rec.lat_ms_per_token = 1000.0 / rec.thr_tok_s;
  return rec;
}

inline void write_bench_header(std::ostream& os) {
  os << "policy,batch,prefill,gen,kv_entries_peak,kv_bytes_peak,attn_cells,sort_ops,lat_ms_per_token,thr_tok_s\n";
}

inline void write_bench_row(std::ostream& os, const BenchRecord& r) {
  os << r.policy << ',' << r.batch << ',' << r.prefill << ',' << r.gen << ',' << r.kv_entries_peak << ','
     << r.kv_bytes_peak << ',' << r.attn_cells << ',' << r.sort_ops << ',' << std::setprecision(6)
     << r.lat_ms_per_token << ',' << r.thr_tok_s << '\n';
}

inline void write_bench_csv(std::ostream& os, std::span<const BenchRecord> rows) {
  write_bench_header(os);
  for (const auto& r : rows) write_bench_row(os, r);
}

struct RecentRatioRow {
  double recent_ratio = 0.0;
  double kv_ratio = 0.0;  // pyramid kv_entries_peak / full-cache kv_entries_peak
  double perplexity = 0.0;
  BenchRecord record;
};

struct RecentSweepOptions {
  std::size_t prefill_len = 512;
  std::size_t gen_len = 0;
  std::uint64_t seed = 0;
  std::size_t ppl_prefill_len = 0;  // prompt part of eval_tokens; 0 = half
};

// Pyramid runs over a grid of recent-window ratios, everything else fixed.
inline std::vector<RecentRatioRow> sweep_recent_ratio(const Model& model, std::span<const double> ratios,
                                                      const PyramidPolicyConfig& base,
                                                      std::span<const TokenId> eval_tokens,
                                                      const RecentSweepOptions& opt = {}) {
  const BenchRecord full = run_bench(model, FullPolicy{}, 1, opt.prefill_len, opt.gen_len, opt.seed);
  PerplexityOptions ppl;
  ppl.prefill_len = opt.ppl_prefill_len ? opt.ppl_prefill_len : eval_tokens.size() / 2;
  std::vector<RecentRatioRow> rows;
  for (double r : ratios) {
    detail::require(r > 0.0 && r < 1.0, ErrorCode::kInvalidArgument, "sweep: recent ratio must be in (0,1)");
    PyramidPolicyConfig cfg = base;
    cfg.recent_ratio = r;
    const PyramidPolicy policy(cfg, model.config.layers);
    RecentRatioRow row;
    row.recent_ratio = r;
    row.record = run_bench(model, policy, 1, opt.prefill_len, opt.gen_len, opt.seed);
    row.kv_ratio = static_cast<double>(row.record.kv_entries_peak) / static_cast<double>(full.kv_entries_peak);
    row.perplexity = perplexity(model, eval_tokens, policy, ppl);
    rows.push_back(row);
  }
  return rows;
}

inline void write_recent_sweep_csv(std::ostream& os, std::span<const RecentRatioRow> rows) {
  os << "recent_ratio,kv_ratio,perplexity\n" << std::setprecision(9);
  for (const auto& r : rows) os << r.recent_ratio << ',' << r.kv_ratio << ',' << r.perplexity << '\n';
}

struct BatchSweep {
  std::vector<BenchRecord> rows;          // per batch: baseline then candidate
  std::optional<std::size_t> crossover;   // smallest batch where the candidate's throughput is higher
};

inline BatchSweep sweep_batch(const Model& model, const CachePolicy& baseline, const CachePolicy& candidate,
                              std::span<const std::size_t> batches, std::size_t prefill_len, std::size_t gen_len,
                              std::uint64_t seed, const BenchOptions& opts = {}) {
  for (std::size_t i = 1; i < batches.size(); ++i)
    detail::require(batches[i] > batches[i - 1], ErrorCode::kInvalidArgument, "sweep: batches must be ascending");
  BatchSweep out;
  for (std::size_t b : batches) {
    const auto base = run_bench(model, baseline, b, prefill_len, gen_len, seed, opts);
    const auto cand = run_bench(model, candidate, b, prefill_len, gen_len, seed, opts);
    if (!out.crossover && cand.thr_tok_s > base.thr_tok_s) out.crossover = b;
    out.rows.push_back(base);
    out.rows.push_back(cand);
  }
  return out;
}

struct PositionAblationRow {
  PositionMode mode = PositionMode::kGather;
  double perplexity = 0.0;
  std::uint64_t kv_entries_peak = 0;
  double greedy_match_full = 0.0;  // share of greedy tokens equal to the full-cache run
};

inline std::string_view to_string(PositionMode m) { return m == PositionMode::kGather ? "gather" : "reencode"; }

// Same policy run with gathered original positions and with re-encoded positions.
inline std::vector<PositionAblationRow> position_ablation(const Model& model, const CachePolicy& policy,
                                                          std::span<const TokenId> eval_tokens,
                                                          std::span<const TokenId> prompt, std::size_t gen_len) {
  const auto reference = generate_greedy(model, prompt, gen_len, FullPolicy{});
  std::vector<PositionAblationRow> rows;
  for (PositionMode mode : {PositionMode::kGather, PositionMode::kReencode}) {
    PositionAblationRow row;
    row.mode = mode;
    PerplexityOptions ppl;
    ppl.prefill_len = eval_tokens.size() / 2;
    ppl.position_mode = mode;
    row.perplexity = perplexity(model, eval_tokens, policy, ppl);
    RunOptions run;
    run.position_mode = mode;
    const auto g = generate_greedy(model, prompt, gen_len, policy, run);
    for (const auto& lens : g.cache_lengths) {
      std::uint64_t total = 0;
      for (std::size_t n : lens) total += n;
      row.kv_entries_peak = std::max(row.kv_entries_peak, total);
    }
    std::size_t same = 0;
    for (std::size_t i = 0; i < g.tokens.size(); ++i) same += g.tokens[i] == reference.tokens[i];
    row.greedy_match_full = g.tokens.empty() ? 1.0 : static_cast<double>(same) / static_cast<double>(g.tokens.size());
    rows.push_back(row);
  }
  return rows;
}

inline void write_position_ablation_csv(std::ostream& os, std::span<const PositionAblationRow> rows) {
  os << "mode,perplexity,kv_entries_peak,greedy_match_full\n" << std::setprecision(9);
  for (const auto& r : rows)
    os << to_string(r.mode) << ',' << r.perplexity << ',' << r.kv_entries_peak << ',' << r.greedy_match_full << '\n';
}

}  // namespace pykv
