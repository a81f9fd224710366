#pragma once

// KV-cache compression policies.
//
// PyramidPolicy implements layer-wise pivotal-context (PvC) selection: the
// attention rows of the most recent queries are averaged with a recency ramp,
// the context entries with the largest ensemble weight are kept, and the
// recent window is always kept. Retention decays with depth, so deeper layers
// keep shorter caches. Full, local (first + recent tokens) and a simplified
// accumulated-attention heavy-hitter policy are the comparison baselines.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pykv/core_math.hpp"
#include "pykv/error.hpp"
#include "pykv/kv_store.hpp"

namespace pykv {

enum class RecencyRamp { kLinear, kExponential, kUniform };

inline RecencyRamp parse_ramp(std::string_view s) {
  if (s == "linear") return RecencyRamp::kLinear;
  if (s == "exponential") return RecencyRamp::kExponential;
  if (s == "uniform") return RecencyRamp::kUniform;
  detail::fail(ErrorCode::kInvalidArgument, "unknown recency ramp '" + std::string(s) + "'");
}

inline std::string_view to_string(RecencyRamp r) {
  switch (r) {
    case RecencyRamp::kLinear: return "linear";
    case RecencyRamp::kExponential: return "exponential";
    case RecencyRamp::kUniform: return "uniform";
  }
  return "linear";
}

// Normalized weights for `n` rows ordered oldest to newest.
inline std::vector<double> ramp_weights(std::size_t n, RecencyRamp ramp) {
  std::vector<double> w(n);
  for (std::size_t j = 0; j < n; ++j) {
    switch (ramp) {
      case RecencyRamp::kLinear: w[j] = static_cast<double>(j + 1); break;
      case RecencyRamp::kExponential: w[j] = std::ldexp(1.0, static_cast<int>(std::min<std::size_t>(j, 1000))); break;
      case RecencyRamp::kUniform: w[j] = 1.0; break;
    }
  }
  const double sum = std::accumulate(w.begin(), w.end(), 0.0);
  for (double& x : w) x /= sum;
  return w;
}

// Recency-weighted average of the last `window` rows of `rows`, restricted to
// columns [0, context_cols).
inline std::vector<double> ensemble_rows(const Matrix& rows, std::size_t window, std::size_t context_cols,
                                         RecencyRamp ramp) {
  detail::require(window >= 1 && window <= rows.rows, ErrorCode::kInvalidArgument,
                  "ensemble_weights: window " + std::to_string(window) + " exceeds available rows " +
                      std::to_string(rows.rows));
  detail::require(context_cols >= 1 && context_cols <= rows.cols, ErrorCode::kInvalidArgument,
                  "ensemble_weights: context columns out of range");
  const auto w = ramp_weights(window, ramp);
  std::vector<double> out(context_cols, 0.0);
  const std::size_t first = rows.rows - window;
  for (std::size_t j = 0; j < window; ++j) {
    const auto r = rows.row(first + j);
    for (std::size_t c = 0; c < context_cols; ++c) out[c] += w[j] * r[c];
  }
  return out;
}

inline std::vector<double> ensemble_weights(std::span<const Matrix> attn, std::size_t window, std::size_t context_cols,
                                            RecencyRamp ramp) {
  return ensemble_rows(head_mean(attn), window, context_cols, ramp);
}

// ceil(ratio * n) with a small guard against representation error (0.7 * 10 = 7.000000000000001).
inline std::size_t retained_count(double ratio, std::size_t n) {
  const double x = ratio * static_cast<double>(n);
  return static_cast<std::size_t>(std::ceil(x - 1e-9));
}

// Indices of the k largest weights, ties broken toward the larger index,
// returned in ascending order.
inline std::vector<std::size_t> top_k_indices(std::span<const double> weights, std::size_t k) {
  const std::size_t n = weights.size();
  k = std::min(k, n);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (k < n) {
    auto better = [&](std::size_t a, std::size_t b) {
      if (weights[a] != weights[b]) return weights[a] > weights[b];
      return a > b;
    };
    std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), better);
    idx.resize(k);
  }
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline std::vector<std::size_t> select_pvc(std::span<const double> weights, double retention, std::size_t min_len) {
  const std::size_t n = weights.size();
  const std::size_t k = std::min(n, std::max(min_len, retained_count(retention, n)));
  return top_k_indices(weights, k);
}

inline std::vector<double> layer_retention_schedule(double p0, double decay, std::size_t layers) {
  std::vector<double> s(layers);
  double p = p0;
  for (std::size_t l = 0; l < layers; ++l) {
    s[l] = std::min(1.0, p);
    p *= decay;
  }
  return s;
}

enum class SchedulePreset { kReduceMore, kReduceUniform, kReduceLess };

inline SchedulePreset parse_preset(std::string_view s) {
  if (s == "reduce_more") return SchedulePreset::kReduceMore;
  if (s == "reduce_uniform") return SchedulePreset::kReduceUniform;
  if (s == "reduce_less") return SchedulePreset::kReduceLess;
  detail::fail(ErrorCode::kInvalidArgument, "unknown schedule preset '" + std::string(s) + "'");
}

// Two-piece schedule at a fixed overall compression. The shallow half removes
// target * rate / 0.10 of its cache, with rate 15% / 10% / 7% for the three
// presets (10% is the even spread), and the deep half absorbs the rest so the
// mean retention is 1 - target.
inline std::vector<double> preset_schedule(SchedulePreset preset, std::size_t layers, double target_compression) {
  using detail::require;
  require(layers >= 1, ErrorCode::kInvalidArgument, "preset_schedule: layers must be >= 1");
  require(target_compression > 0.0 && target_compression < 1.0, ErrorCode::kInvalidArgument,
          "preset_schedule: target_compression must be in (0,1)");
  double rate = 0.10;
  if (preset == SchedulePreset::kReduceMore) rate = 0.15;
  if (preset == SchedulePreset::kReduceLess) rate = 0.07;
  const std::size_t shallow = layers / 2;
  const std::size_t deep = layers - shallow;
  const double shallow_keep = 1.0 - target_compression * rate / 0.10;
  const double deep_keep =
      ((1.0 - target_compression) * static_cast<double>(layers) - shallow_keep * static_cast<double>(shallow)) /
      static_cast<double>(deep);
  const bool ok = (shallow == 0 || (shallow_keep > 0.0 && shallow_keep <= 1.0)) && deep_keep > 0.0 &&
                  deep_keep <= 1.0 + 1e-12;
  require(ok, ErrorCode::kInvalidArgument, "preset_schedule: infeasible deep-layer retention for this target");
  std::vector<double> s(layers, std::min(1.0, deep_keep));
  std::fill_n(s.begin(), shallow, shallow_keep);
  return s;
}

inline constexpr std::size_t kDefaultMinPvcLen = 8;

struct PyramidPolicyConfig {
  double recent_ratio = 0.4;           // share of the prompt treated as the recent window
  std::size_t recent_window_min = 16;  // recent window floor
  double p0 = 0.25;                    // retention at layer 0
  double decay = 0.6;                  // per-layer multiplicative decay of retention
  std::vector<std::size_t> min_pvc_lens;  // per-layer floor; empty = kDefaultMinPvcLen everywhere
  RecencyRamp ramp = RecencyRamp::kLinear;
  std::optional<std::size_t> budget;   // per-layer cap on retained context entries
  std::size_t refresh_every = 1;       // decode steps between re-selections
  std::optional<std::vector<double>> schedule;  // overrides p0/decay when set
  bool prune_prefill = true;  // deeper prefill layers only process tokens the previous layer kept
};

inline void validate(const PyramidPolicyConfig& cfg, std::size_t layers) {
  using detail::require;
  constexpr auto E = ErrorCode::kInvalidArgument;
  require(cfg.p0 > 0.0 && cfg.p0 <= 1.0, E, "pyramid: p0 must be in (0,1]");
  require(cfg.decay > 0.0 && cfg.decay <= 1.0, E, "pyramid: decay must be in (0,1]");
  require(cfg.recent_ratio > 0.0 && cfg.recent_ratio < 1.0, E, "pyramid: recent_ratio must be in (0,1)");
  require(cfg.recent_window_min >= 1, E, "pyramid: recent_window_min must be >= 1");
  require(cfg.refresh_every >= 1, E, "pyramid: refresh_every must be >= 1");
  require(cfg.min_pvc_lens.empty() || cfg.min_pvc_lens.size() == layers, E,
          "pyramid: min_pvc_lens length must equal layer count");
  if (cfg.schedule) {
    require(cfg.schedule->size() == layers, E, "pyramid: schedule length must equal layer count");
    for (double r : *cfg.schedule) require(r > 0.0 && r <= 1.0, E, "pyramid: schedule entries must be in (0,1]");
  }
}

struct LayerPolicyDecision {
  std::vector<std::size_t> kept_indices;
  double retention_used = 1.0;
  std::uint64_t ranked = 0;  // candidates passed through top-k selection
};

enum class Phase { kPrefill, kDecode };

struct UpdateContext {
  Phase phase = Phase::kPrefill;
  std::size_t layer = 0;
  std::size_t tokens_seen = 0;    // tokens processed so far, current ones included
  std::size_t recent_window = 0;  // fixed at prefill
  std::size_t decode_step = 0;
};

class CachePolicy {
 public:
  virtual ~CachePolicy() = default;

  virtual std::string name() const = 0;
  virtual std::size_t recent_window(std::size_t prompt_len) const {
    (void)prompt_len;
    return 0;
  }
  virtual bool prunes_prefill() const { return false; }
  virtual bool keeps_recent_rows() const { return false; }
  virtual bool keeps_accumulated() const { return false; }

  // std::nullopt keeps the cache as is.
  virtual std::optional<LayerPolicyDecision> decide(const LayerKvCache& cache, const AttentionHistory& history,
                                                    const UpdateContext& ctx) const = 0;
};

// Keeps top-k context entries by ensemble weight plus the whole recent window.
// Returns std::nullopt when nothing would be evicted.
inline std::optional<LayerPolicyDecision> pvc_decision(const Matrix& recent_rows, std::size_t n, std::size_t window,
                                                       std::size_t keep_context, RecencyRamp ramp, double retention) {
  window = std::min(window, n);
  const std::size_t n_ctx = n - window;
  if (keep_context >= n_ctx) return std::nullopt;
  LayerPolicyDecision d;
  d.retention_used = retention;
  if (keep_context > 0) {
    const std::size_t rows = std::min(std::max<std::size_t>(window, 1), recent_rows.rows);
    detail::require(rows >= 1 && recent_rows.cols == n, ErrorCode::kShapeMismatch,
                    "pvc selection: attention history does not match cache");
    const auto weights = ensemble_rows(recent_rows, rows, n_ctx, ramp);
    d.kept_indices = top_k_indices(weights, keep_context);
    d.ranked = n_ctx;
  }
  for (std::size_t i = n_ctx; i < n; ++i) d.kept_indices.push_back(i);
  return d;
}

class FullPolicy final : public CachePolicy {
 public:
  std::string name() const override { return "full"; }
  std::optional<LayerPolicyDecision> decide(const LayerKvCache&, const AttentionHistory&,
                                            const UpdateContext&) const override {
    return std::nullopt;
  }
};

class PyramidPolicy final : public CachePolicy {
 public:
  PyramidPolicy(PyramidPolicyConfig cfg, std::size_t layers) : cfg_(std::move(cfg)) {
    validate(cfg_, layers);
    schedule_ = cfg_.schedule ? *cfg_.schedule : layer_retention_schedule(cfg_.p0, cfg_.decay, layers);
    if (cfg_.min_pvc_lens.empty()) cfg_.min_pvc_lens.assign(layers, kDefaultMinPvcLen);
  }

  std::string name() const override { return "pyramid"; }
  const PyramidPolicyConfig& config() const { return cfg_; }
  const std::vector<double>& schedule() const { return schedule_; }

  std::size_t recent_window(std::size_t prompt_len) const override {
    return std::min(prompt_len, std::max(cfg_.recent_window_min, retained_count(cfg_.recent_ratio, prompt_len)));
  }
  bool prunes_prefill() const override { return cfg_.prune_prefill; }
  bool keeps_recent_rows() const override { return true; }

  // Number of context entries layer `layer` keeps once `original_context`
  // tokens have slid out of the recent window; `available` is what is cached.
  std::size_t context_target(std::size_t layer, std::size_t original_context, std::size_t available) const {
    const std::size_t floor = cfg_.min_pvc_lens[layer];
    const bool over_budget = cfg_.budget && available > *cfg_.budget;
    if (available <= floor && !over_budget) return available;
    std::size_t k = std::max(floor, retained_count(schedule_[layer], original_context));
    if (cfg_.budget) k = std::min(k, *cfg_.budget);
    return std::min(k, available);
  }

  std::optional<LayerPolicyDecision> decide(const LayerKvCache& cache, const AttentionHistory& history,
                                            const UpdateContext& ctx) const override {
    if (ctx.phase == Phase::kDecode && ctx.decode_step % cfg_.refresh_every != 0) return std::nullopt;
    const std::size_t n = cache.size();
    const std::size_t window = std::min(ctx.recent_window, n);
    const std::size_t original_context = ctx.tokens_seen > window ? ctx.tokens_seen - window : 0;
    const std::size_t keep = context_target(ctx.layer, original_context, n - window);
    return pvc_decision(history.recent_rows, n, window, keep, cfg_.ramp, schedule_[ctx.layer]);
  }

 private:
  PyramidPolicyConfig cfg_;
  std::vector<double> schedule_;
};

// Compresses a single layer to a fixed retention using the last query's
// attention row; every other layer keeps its full cache.
class SingleLayerPvcPolicy final : public CachePolicy {
 public:
  SingleLayerPvcPolicy(std::size_t layers, std::size_t layer, double retention)
      : layer_(layer), retention_(retention) {
    detail::require(layer < layers, ErrorCode::kOutOfRange, "single-layer policy: layer out of range");
    detail::require(retention > 0.0 && retention <= 1.0, ErrorCode::kInvalidArgument,
                    "single-layer policy: retention must be in (0,1]");
  }

  std::string name() const override { return "pvc_layer" + std::to_string(layer_); }
  std::size_t recent_window(std::size_t prompt_len) const override { return std::min<std::size_t>(1, prompt_len); }
  bool keeps_recent_rows() const override { return true; }

  std::optional<LayerPolicyDecision> decide(const LayerKvCache& cache, const AttentionHistory& history,
                                            const UpdateContext& ctx) const override {
    if (ctx.layer != layer_) return std::nullopt;
    const std::size_t n = cache.size();
    const std::size_t original_context = ctx.tokens_seen > 1 ? ctx.tokens_seen - 1 : 0;
    const std::size_t keep = std::min(n - std::min<std::size_t>(1, n), retained_count(retention_, original_context));
    return pvc_decision(history.recent_rows, n, 1, keep, RecencyRamp::kLinear, retention_);
  }

 private:
  std::size_t layer_;
  double retention_;
};

inline std::vector<std::size_t> local_keep_indices(std::size_t n, std::size_t keep_first, std::size_t window) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < n; ++i)
    if (i < keep_first || i + window >= n) idx.push_back(i);
  return idx;
}

inline LayerKvCache local_policy_update(const LayerKvCache& cache, std::size_t keep_first, std::size_t window) {
  const auto idx = local_keep_indices(cache.size(), keep_first, window);
  if (idx.size() == cache.size()) return cache;
  return gather(cache, idx);
}

class LocalPolicy final : public CachePolicy {
 public:
  LocalPolicy(std::size_t keep_first, std::size_t window) : keep_first_(keep_first), window_(window) {}

  std::string name() const override { return "local"; }
  std::size_t recent_window(std::size_t prompt_len) const override { return std::min(window_, prompt_len); }

  std::optional<LayerPolicyDecision> decide(const LayerKvCache& cache, const AttentionHistory&,
                                            const UpdateContext&) const override {
    if (cache.size() <= keep_first_ + window_) return std::nullopt;
    LayerPolicyDecision d;
    d.kept_indices = local_keep_indices(cache.size(), keep_first_, window_);
    d.retention_used = static_cast<double>(d.kept_indices.size()) / static_cast<double>(cache.size());
    return d;
  }

 private:
  std::size_t keep_first_;
  std::size_t window_;
};

inline std::optional<LayerPolicyDecision> heavy_hitter_decision(std::span<const double> scores, std::size_t n,
                                                                std::size_t budget, std::size_t window) {
  detail::require(budget >= window, ErrorCode::kInvalidArgument, "heavy_hitter: budget < window");
  detail::require(scores.size() == n, ErrorCode::kShapeMismatch, "heavy_hitter: scores length != cache length");
  if (n <= budget) return std::nullopt;
  const std::size_t n_ctx = n - window;
  LayerPolicyDecision d;
  d.kept_indices = top_k_indices(scores.first(n_ctx), budget - window);
  d.ranked = n_ctx;
  for (std::size_t i = n_ctx; i < n; ++i) d.kept_indices.push_back(i);
  d.retention_used = static_cast<double>(budget) / static_cast<double>(n);
  return d;
}

inline LayerKvCache heavy_hitter_update(const LayerKvCache& cache, std::span<const double> accumulated_scores,
                                        std::size_t budget, std::size_t window) {
  const auto d = heavy_hitter_decision(accumulated_scores, cache.size(), budget, window);
  return d ? gather(cache, d->kept_indices) : cache;
}

class HeavyHitterPolicy final : public CachePolicy {
 public:
  HeavyHitterPolicy(std::size_t budget, std::size_t window) : budget_(budget), window_(window) {
    detail::require(budget >= window, ErrorCode::kInvalidArgument, "heavy_hitter: budget < window");
  }

  std::string name() const override { return "heavy_hitter"; }
  std::size_t recent_window(std::size_t prompt_len) const override { return std::min(window_, prompt_len); }
  bool keeps_accumulated() const override { return true; }

  std::optional<LayerPolicyDecision> decide(const LayerKvCache& cache, const AttentionHistory& history,
                                            const UpdateContext&) const override {
    return heavy_hitter_decision(history.accumulated, cache.size(), budget_, window_);
  }

 private:
  std::size_t budget_;
  std::size_t window_;
};

// Standalone prefill-style update of one layer: the recent window is
// max(recent_window_min, ceil(recent_ratio * length)) and retention applies to
// the remaining context.
inline LayerKvCache pyramid_update_layer(const LayerKvCache& cache, std::span<const Matrix> attn,
                                         const PyramidPolicyConfig& cfg, std::size_t layer, std::size_t layers) {
  const PyramidPolicy policy(cfg, layers);
  detail::require(layer < layers, ErrorCode::kOutOfRange, "pyramid_update_layer: layer out of range");
  const Matrix mean = head_mean(attn);
  detail::require(mean.cols == cache.size(), ErrorCode::kShapeMismatch,
                  "pyramid_update_layer: attention columns != cache length");
  AttentionHistory history;
  history.recent_rows = mean;
  UpdateContext ctx;
  ctx.layer = layer;
  ctx.tokens_seen = cache.size();
  ctx.recent_window = policy.recent_window(cache.size());
  const auto d = policy.decide(cache, history, ctx);
  return d ? gather(cache, d->kept_indices) : cache;
}

// --- bookkeeping shared by the model and tests ---------------------------------

// Adds the head-mean attention rows of the newest queries to `history`.
// `rows.cols` is the current cache length; older rows are zero-padded.
inline void record_attention(AttentionHistory& history, const Matrix& rows, std::size_t max_rows,
                             bool keep_rows, bool keep_accumulated) {
  const std::size_t n = rows.cols;
  if (keep_rows && max_rows > 0) {
    const std::size_t take_new = std::min(max_rows, rows.rows);
    const std::size_t keep_old = std::min(max_rows - take_new, history.recent_rows.rows);
    Matrix next(keep_old + take_new, n);
    const std::size_t old_first = history.recent_rows.rows - keep_old;
    for (std::size_t r = 0; r < keep_old; ++r) {
      const auto src = history.recent_rows.row(old_first + r);
      std::copy(src.begin(), src.end(), next.row(r).begin());
    }
    for (std::size_t r = 0; r < take_new; ++r) {
      const auto src = rows.row(rows.rows - take_new + r);
      std::copy(src.begin(), src.end(), next.row(keep_old + r).begin());
    }
    history.recent_rows = std::move(next);
  }
  if (keep_accumulated) {
    history.accumulated.resize(n, 0.0);
    for (std::size_t r = 0; r < rows.rows; ++r) {
      const auto src = rows.row(r);
      for (std::size_t c = 0; c < n; ++c) history.accumulated[c] += src[c];
    }
  }
}

inline void apply_decision(LayerKvCache& cache, AttentionHistory& history, std::span<const std::size_t> kept) {
  cache = gather(cache, kept);
  if (history.recent_rows.rows > 0) {
    Matrix next(history.recent_rows.rows, kept.size());
    for (std::size_t r = 0; r < next.rows; ++r)
      for (std::size_t c = 0; c < kept.size(); ++c) next(r, c) = history.recent_rows(r, kept[c]);
    history.recent_rows = std::move(next);
  }
  if (!history.accumulated.empty()) {
    std::vector<double> next(kept.size());
    for (std::size_t c = 0; c < kept.size(); ++c) next[c] = history.accumulated[kept[c]];
    history.accumulated = std::move(next);
  }
}

}  // namespace pykv
