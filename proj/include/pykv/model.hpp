#pragma once

// Seeded decoder-only transformer (pre-norm RMSNorm blocks, GELU MLP, rotary
// attention, output projection tied to the embedding). Every attention layer
// hands its keys, values and head-mean attention weights to a CachePolicy,
// which decides what stays in that layer's cache.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "pykv/core_math.hpp"
#include "pykv/error.hpp"
#include "pykv/kv_store.hpp"
#include "pykv/policies.hpp"
#include "pykv/rng.hpp"

namespace pykv {

using TokenId = std::uint32_t;

struct ModelConfig {
  std::size_t layers = 8;
  std::size_t heads = 4;
  std::size_t head_dim = 32;
  std::size_t vocab = 256;
  double mlp_ratio = 4.0;
  std::uint64_t seed = 0;
  std::size_t max_seq = 2048;

  std::size_t d_model() const { return heads * head_dim; }
  std::size_t mlp_hidden() const {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(mlp_ratio * static_cast<double>(d_model()))));
  }
};

inline void validate(const ModelConfig& c) {
  using detail::require;
  constexpr auto E = ErrorCode::kInvalidArgument;
  require(c.layers >= 1, E, "model: layers must be >= 1");
  require(c.heads >= 1, E, "model: heads must be >= 1");
  require(c.head_dim >= 2 && c.head_dim % 2 == 0, E, "model: head_dim must be even and >= 2");
  require(c.vocab >= 2, E, "model: vocab must be >= 2");
  require(c.mlp_ratio > 0.0 && std::isfinite(c.mlp_ratio), E, "model: mlp_ratio must be positive");
  require(c.max_seq >= 1, E, "model: max_seq must be >= 1");
}

struct LayerWeights {
  std::vector<float> attn_norm;
  Matrix wq, wk, wv, wo;  // [d_model, d_model], input-major
  std::vector<float> mlp_norm;
  Matrix mlp_in;   // [d_model, hidden]
  Matrix mlp_out;  // [hidden, d_model]
};

struct Model {
  ModelConfig config;
  Matrix embedding;  // [vocab, d_model]; also the output projection
  std::vector<LayerWeights> layers;
  std::vector<float> final_norm;
};

inline constexpr double kInitStd = 0.02;

// Weights are N(0, 0.02) draws from CounterRng(seed), consumed in this order:
// embedding, then for each layer ascending: mlp_in, mlp_out, wk, wo, wq, wv.
// Each matrix is filled row-major. Norm gains are 1.
inline Model init_model(const ModelConfig& config) {
  validate(config);
  const CounterRng rng(config.seed);
  std::uint64_t counter = 0;
  auto draw = [&](std::size_t rows, std::size_t cols) {
    Matrix m(rows, cols);
    for (float& x : m.data) x = static_cast<float>(kInitStd * rng.normal(counter++));
    return m;
  };
  const std::size_t d = config.d_model();
  const std::size_t hidden = config.mlp_hidden();
  Model model;
  model.config = config;
  model.embedding = draw(config.vocab, d);
  model.layers.resize(config.layers);
  for (auto& w : model.layers) {
    w.mlp_in = draw(d, hidden);
    w.mlp_out = draw(hidden, d);
    w.wk = draw(d, d);
    w.wo = draw(d, d);
    w.wq = draw(d, d);
    w.wv = draw(d, d);
    w.attn_norm.assign(d, 1.0f);
    w.mlp_norm.assign(d, 1.0f);
  }
  model.final_norm.assign(d, 1.0f);
  return model;
}

struct ForwardStats {
  std::uint64_t attn_cells = 0;  // unmasked attention score cells, all layers and heads
  std::uint64_t ranked = 0;      // candidates ranked by top-k selection
  std::uint64_t evicted = 0;     // cache entries dropped by the policy
};

struct StepOutput {
  std::vector<float> logits;               // next-token logits for the last position
  std::vector<std::vector<Matrix>> attn;   // [layer][head], filled when RunOptions::keep_attention
  ForwardStats stats;
};

struct RunOptions {
  PositionMode position_mode = PositionMode::kGather;
  bool keep_attention = false;
};

struct PrefillResult {
  StepOutput output;
  CacheSet caches;
};

namespace detail {

inline constexpr float kNormEps = 1e-5f;

inline Matrix rms_norm(const Matrix& x, std::span<const float> gain) {
  Matrix out(x.rows, x.cols);
  for (std::size_t r = 0; r < x.rows; ++r) {
    const auto xr = x.row(r);
    float ss = 0.0f;
    for (float v : xr) ss += v * v;
    const float inv = 1.0f / std::sqrt(ss / static_cast<float>(x.cols) + kNormEps);
    auto o = out.row(r);
    for (std::size_t c = 0; c < x.cols; ++c) o[c] = xr[c] * inv * gain[c];
  }
  return out;
}

inline float gelu(float x) {
  constexpr float k = 0.7978845608028654f;  // sqrt(2/pi)
  return 0.5f * x * (1.0f + std::tanh(k * (x + 0.044715f * x * x * x)));
}

inline HeadTensor split_heads(const Matrix& m, std::size_t heads, std::size_t head_dim) {
  HeadTensor t(heads, m.rows, head_dim);
  for (std::size_t s = 0; s < m.rows; ++s)
    for (std::size_t h = 0; h < heads; ++h)
      std::copy_n(m.data.begin() + static_cast<std::ptrdiff_t>(s * m.cols + h * head_dim), head_dim,
                  t.vec(h, s).begin());
  return t;
}

inline Matrix merge_heads(const HeadTensor& t) {
  Matrix m(t.seq, t.heads * t.head_dim);
  for (std::size_t s = 0; s < t.seq; ++s)
    for (std::size_t h = 0; h < t.heads; ++h) {
      const auto v = t.vec(h, s);
      std::copy(v.begin(), v.end(), m.data.begin() + static_cast<std::ptrdiff_t>(s * m.cols + h * t.head_dim));
    }
  return m;
}

inline void add_inplace(Matrix& x, const Matrix& y) {
  for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] += y.data[i];
}

inline void mlp_block(const LayerWeights& w, Matrix& x) {
  Matrix h = matmul(rms_norm(x, w.mlp_norm), w.mlp_in);
  for (float& v : h.data) v = gelu(v);
  add_inplace(x, matmul(h, w.mlp_out));
}

inline std::vector<float> output_logits(const Model& model, const Matrix& x) {
  const Matrix last(1, x.cols, std::vector<float>(x.row(x.rows - 1).begin(), x.row(x.rows - 1).end()));
  const Matrix h = rms_norm(last, model.final_norm);
  std::vector<float> logits(model.config.vocab);
  for (std::size_t v = 0; v < logits.size(); ++v) {
    const auto e = model.embedding.row(v);
    float dot = 0.0f;
    for (std::size_t c = 0; c < h.cols; ++c) dot += h.data[c] * e[c];
    logits[v] = dot;
  }
  return logits;
}

inline Matrix embed(const Model& model, std::span<const TokenId> tokens) {
  const std::size_t d = model.config.d_model();
  Matrix x(tokens.size(), d);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    require(tokens[i] < model.config.vocab, ErrorCode::kOutOfRange,
            "token id " + std::to_string(tokens[i]) + " out of range for vocab " + std::to_string(model.config.vocab));
    const auto e = model.embedding.row(tokens[i]);
    std::copy(e.begin(), e.end(), x.row(i).begin());
  }
  return x;
}

inline Matrix select_rows(const Matrix& x, std::span<const std::size_t> rows) {
  Matrix out(rows.size(), x.cols);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto src = x.row(rows[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

inline std::vector<std::size_t> iota_positions(std::size_t n) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  return p;
}

// Records attention, asks the policy, applies its decision. Returns kept indices
// when entries were evicted.
inline std::optional<std::vector<std::size_t>> run_policy(const CachePolicy& policy, CacheSet& cs, std::size_t layer,
                                                          const Matrix& mean_rows, Phase phase, ForwardStats& stats) {
  auto& cache = cs.layers[layer];
  auto& history = cs.history[layer];
  record_attention(history, mean_rows, cs.recent_window, policy.keeps_recent_rows(), policy.keeps_accumulated());
  UpdateContext ctx;
  ctx.phase = phase;
  ctx.layer = layer;
  ctx.tokens_seen = cs.tokens_seen;
  ctx.recent_window = cs.recent_window;
  ctx.decode_step = cs.decode_steps;
  auto decision = policy.decide(cache, history, ctx);
  if (!decision) return std::nullopt;
  stats.ranked += decision->ranked;
  stats.evicted += cache.size() - decision->kept_indices.size();
  apply_decision(cache, history, decision->kept_indices);
  return std::move(decision->kept_indices);
}

}  // namespace detail

inline PrefillResult prefill(const Model& model, std::span<const TokenId> tokens, const CachePolicy& policy,
                             const RunOptions& opts = {}) {
  using namespace detail;
  const auto& cfg = model.config;
  require(!tokens.empty(), ErrorCode::kInvalidArgument, "prefill: empty prompt");
  require(tokens.size() <= cfg.max_seq, ErrorCode::kOutOfRange,
          "prefill: prompt length " + std::to_string(tokens.size()) + " exceeds max_seq " + std::to_string(cfg.max_seq));

  PrefillResult res;
  CacheSet& cs = res.caches;
  cs.layers.resize(cfg.layers);
  cs.history.resize(cfg.layers);
  cs.position_mode = opts.position_mode;
  cs.tokens_seen = tokens.size();
  cs.recent_window = policy.recent_window(tokens.size());

  Matrix x = embed(model, tokens);
  std::vector<std::size_t> active = iota_positions(tokens.size());

  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const LayerWeights& w = model.layers[l];
    const Matrix xn = rms_norm(x, w.attn_norm);
    const HeadTensor q = split_heads(matmul(xn, w.wq), cfg.heads, cfg.head_dim);
    const HeadTensor k = split_heads(matmul(xn, w.wk), cfg.heads, cfg.head_dim);
    HeadTensor v = split_heads(matmul(xn, w.wv), cfg.heads, cfg.head_dim);

    const auto rope_pos = opts.position_mode == PositionMode::kGather ? active : iota_positions(active.size());
    const HeadTensor q_rot = rotary_encode(q, rope_pos);
    HeadTensor k_rot = rotary_encode(k, rope_pos);
    AttentionResult att = attention_forward(q_rot, k_rot, v, 0);
    res.output.stats.attn_cells += att.cells;

    add_inplace(x, matmul(merge_heads(att.out), w.wo));
    mlp_block(w, x);

    LayerKvCache& cache = cs.layers[l];
    cache.keys = opts.position_mode == PositionMode::kGather ? std::move(k_rot) : k;
    cache.values = std::move(v);
    cache.positions = active;

    const Matrix mean = head_mean(att.weights);
    if (opts.keep_attention) res.output.attn.push_back(std::move(att.weights));
    const auto kept = run_policy(policy, cs, l, mean, Phase::kPrefill, res.output.stats);
    if (kept && policy.prunes_prefill()) {
      require(!kept->empty() && kept->back() == active.size() - 1, ErrorCode::kInvalidArgument,
              "prefill: pruning policy must keep the last token");
      x = select_rows(x, *kept);
      std::vector<std::size_t> next(kept->size());
      for (std::size_t i = 0; i < kept->size(); ++i) next[i] = active[(*kept)[i]];
      active = std::move(next);
    }
  }
  res.output.logits = output_logits(model, x);
  return res;
}

inline StepOutput decode_step(const Model& model, TokenId token, CacheSet& cs, const CachePolicy& policy,
                              bool keep_attention = false) {
  using namespace detail;
  const auto& cfg = model.config;
  require(cs.layers.size() == cfg.layers && cs.history.size() == cfg.layers, ErrorCode::kShapeMismatch,
          "decode_step: cache layer count does not match model");
  for (const auto& layer : cs.layers)
    require(layer.keys.heads == cfg.heads && layer.keys.head_dim == cfg.head_dim, ErrorCode::kShapeMismatch,
            "decode_step: cache head shape does not match model");

  StepOutput out;
  const std::size_t pos = cs.tokens_seen;
  cs.tokens_seen += 1;
  cs.decode_steps += 1;
  const TokenId ids[1] = {token};
  Matrix x = embed(model, ids);

  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const LayerWeights& w = model.layers[l];
    const Matrix xn = rms_norm(x, w.attn_norm);
    HeadTensor q = split_heads(matmul(xn, w.wq), cfg.heads, cfg.head_dim);
    HeadTensor k = split_heads(matmul(xn, w.wk), cfg.heads, cfg.head_dim);
    const HeadTensor v = split_heads(matmul(xn, w.wv), cfg.heads, cfg.head_dim);

    LayerKvCache& cache = cs.layers[l];
    AttentionResult att;
    if (cs.position_mode == PositionMode::kGather) {
      for (std::size_t h = 0; h < cfg.heads; ++h) {
        rotate_pairs(q.vec(h, 0), pos);
        rotate_pairs(k.vec(h, 0), pos);
      }
      cache = append(std::move(cache), k, v, pos);
      att = attention_forward(q, cache.keys, cache.values, cache.size() - 1);
    } else {
      cache = append(std::move(cache), k, v, pos);
      const std::size_t n = cache.size();
      for (std::size_t h = 0; h < cfg.heads; ++h) rotate_pairs(q.vec(h, 0), n - 1);
      const HeadTensor keys = rotary_encode(cache.keys, iota_positions(n));
      att = attention_forward(q, keys, cache.values, n - 1);
    }
    out.stats.attn_cells += att.cells;
    add_inplace(x, matmul(merge_heads(att.out), w.wo));
    mlp_block(w, x);

    const Matrix mean = head_mean(att.weights);
    if (keep_attention) out.attn.push_back(std::move(att.weights));
    run_policy(policy, cs, l, mean, Phase::kDecode, out.stats);
  }
  out.logits = output_logits(model, x);
  return out;
}

// Lowest index wins ties.
inline TokenId argmax(std::span<const float> logits) {
  return static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

inline double log_softmax_at(std::span<const float> logits, std::size_t target) {
  double mx = logits[0];
  for (float v : logits) mx = std::max(mx, static_cast<double>(v));
  double sum = 0.0;
  for (float v : logits) sum += std::exp(static_cast<double>(v) - mx);
  return static_cast<double>(logits[target]) - mx - std::log(sum);
}

struct PerplexityOptions {
  std::size_t prefill_len = 1;  // tokens fed through prefill; the rest are teacher-forced decode steps
  PositionMode position_mode = PositionMode::kGather;
};

// Next-token logits for tokens[prefill_len..] under teacher forcing: entry t
// predicts tokens[prefill_len + t] from the policy-compressed cache.
inline std::vector<std::vector<float>> teacher_forced_logits(const Model& model, std::span<const TokenId> tokens,
                                                             const CachePolicy& policy,
                                                             const PerplexityOptions& opts = {}) {
  detail::require(tokens.size() >= 2, ErrorCode::kInvalidArgument, "perplexity: need at least 2 tokens");
  detail::require(opts.prefill_len >= 1 && opts.prefill_len < tokens.size(), ErrorCode::kInvalidArgument,
                  "perplexity: prefill_len must be in [1, tokens-1]");
  RunOptions run;
  run.position_mode = opts.position_mode;
  auto pre = prefill(model, tokens.first(opts.prefill_len), policy, run);
  std::vector<std::vector<float>> out;
  out.reserve(tokens.size() - opts.prefill_len);
  out.push_back(std::move(pre.output.logits));
  for (std::size_t t = opts.prefill_len; t + 1 < tokens.size(); ++t)
    out.push_back(decode_step(model, tokens[t], pre.caches, policy).logits);
  return out;
}

inline double perplexity_from_logits(std::span<const std::vector<float>> logits, std::span<const TokenId> targets) {
  detail::require(!logits.empty() && logits.size() == targets.size(), ErrorCode::kShapeMismatch,
                  "perplexity: logits/targets length mismatch");
  double nll = 0.0;
  for (std::size_t t = 0; t < logits.size(); ++t) nll -= log_softmax_at(logits[t], targets[t]);
  return std::exp(nll / static_cast<double>(logits.size()));
}

// exp(mean NLL) of tokens[prefill_len..] where every prediction sees only the
// policy-compressed cache.
inline double perplexity(const Model& model, std::span<const TokenId> tokens, const CachePolicy& policy,
                         const PerplexityOptions& opts = {}) {
  const auto logits = teacher_forced_logits(model, tokens, policy, opts);
  return perplexity_from_logits(logits, tokens.subspan(opts.prefill_len));
}

struct Generation {
  std::vector<TokenId> tokens;             // generated ids, prompt excluded
  std::vector<std::vector<std::size_t>> cache_lengths;  // per step (prefill first), per layer
  ForwardStats stats;
};

inline std::vector<std::size_t> layer_lengths(const CacheSet& cs) {
  std::vector<std::size_t> out;
  out.reserve(cs.layers.size());
  for (const auto& l : cs.layers) out.push_back(l.size());
  return out;
}

inline Generation generate_greedy(const Model& model, std::span<const TokenId> prompt, std::size_t steps,
                                  const CachePolicy& policy, const RunOptions& opts = {}) {
  Generation g;
  auto pre = prefill(model, prompt, policy, opts);
  g.stats = pre.output.stats;
  g.cache_lengths.push_back(layer_lengths(pre.caches));
  TokenId next = argmax(pre.output.logits);
  for (std::size_t s = 0; s < steps; ++s) {
    g.tokens.push_back(next);
    const auto out = decode_step(model, next, pre.caches, policy);
    g.stats.attn_cells += out.stats.attn_cells;
    g.stats.ranked += out.stats.ranked;
    g.stats.evicted += out.stats.evicted;
    g.cache_lengths.push_back(layer_lengths(pre.caches));
    next = argmax(out.logits);
  }
  return g;
}

}  // namespace pykv
