#pragma once

// Measurements behind layer-wise PvC selection:
//  - inference context redundancy (ICR): perplexity, and its inflation over
//    the full cache, when a single layer keeps only its top-p context, swept
//    over retention ratios;
//  - recent attention consistency (RAC): how much the PvC chosen by a recent
//    token (or an ensemble of recent tokens) overlaps the last token's PvC;
//  - where the non-shared part of a token's PvC ends up for later tokens.
//
// The recent ratio of token i in a length-n sequence is d = (n - 1 - i) / n,
// so the last token has d = 0.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <iomanip>
#include <iterator>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "pykv/error.hpp"
#include "pykv/model.hpp"
#include "pykv/policies.hpp"
#include "pykv/trace.hpp"

namespace pykv {

// |a ∩ ref| / |ref|. Inputs need not be sorted; duplicates are ignored.
inline double overlap_ratio(std::span<const std::size_t> pvc, std::span<const std::size_t> pvc_ref) {
  detail::require(!pvc_ref.empty(), ErrorCode::kInvalidArgument, "overlap_ratio: empty reference PvC");
  std::vector<std::size_t> a(pvc.begin(), pvc.end());
  std::vector<std::size_t> r(pvc_ref.begin(), pvc_ref.end());
  std::sort(a.begin(), a.end());
  a.erase(std::unique(a.begin(), a.end()), a.end());
  std::sort(r.begin(), r.end());
  r.erase(std::unique(r.begin(), r.end()), r.end());
  std::vector<std::size_t> both;
  std::set_intersection(a.begin(), a.end(), r.begin(), r.end(), std::back_inserter(both));
  return static_cast<double>(both.size()) / static_cast<double>(r.size());
}

namespace detail {

inline constexpr double kRatioEps = 1e-9;

// d_i >= ratio
inline bool at_least_ratio(std::size_t i, std::size_t n, double ratio) {
  return static_cast<double>(n - 1 - i) + kRatioEps >= ratio * static_cast<double>(n);
}

// d_i < ratio
inline bool below_ratio(std::size_t i, std::size_t n, double ratio) { return !at_least_ratio(i, n, ratio); }

inline double recent_ratio_of(std::size_t i, std::size_t n) {
  return static_cast<double>(n - 1 - i) / static_cast<double>(n);
}

// Tokens with d >= ratio are the context; they are always a prefix.
inline std::size_t context_columns(std::size_t n, double ratio) {
  std::size_t c = 0;
  while (c < n && at_least_ratio(c, n, ratio)) ++c;
  return c;
}

inline std::vector<double> row_prefix(const Matrix& m, std::size_t row, std::size_t cols) {
  const auto r = m.row(row);
  return {r.begin(), r.begin() + static_cast<std::ptrdiff_t>(cols)};
}

}  // namespace detail

enum class OverlapMode { kSeparate, kEnsemble };

inline std::string_view to_string(OverlapMode m) { return m == OverlapMode::kSeparate ? "separate" : "ensemble"; }

struct RacOptions {
  std::vector<double> d_grid = {0.0, 0.05, 0.10, 0.15, 0.20, 0.25};
  double bucket_width = 0.05;
  double top_p = 0.8;
  OverlapMode mode = OverlapMode::kSeparate;
  double ensemble_span = 0.10;
  double context_ratio = 0.30;  // tokens with d >= this form the context
};

struct OverlapReport {
  OverlapMode mode = OverlapMode::kSeparate;
  std::vector<double> d_grid;
  std::vector<std::vector<double>> overlap;  // [layer][bucket]
};

inline OverlapReport rac_heatmap(const AttentionTrace& trace, const RacOptions& opt = {}) {
  using detail::require;
  require(opt.top_p > 0.0 && opt.top_p <= 1.0, ErrorCode::kInvalidArgument, "rac_heatmap: top_p must be in (0,1]");
  const std::size_t n = trace.seq_len;
  require(n >= 2, ErrorCode::kInvalidArgument, "rac_heatmap: trace too short");
  const std::size_t n_ctx = detail::context_columns(n, opt.context_ratio);
  require(n_ctx >= 1, ErrorCode::kEmptyPartition, "rac_heatmap: no context tokens");

  // Token sets per bucket, resolved once.
  std::vector<std::size_t> probes;
  std::vector<std::vector<std::size_t>> ensembles;
  for (double d : opt.d_grid) {
    std::size_t probe = n;
    for (std::size_t i = n; i-- > n_ctx;) {
      if (detail::at_least_ratio(i, n, d) && detail::below_ratio(i, n, d + opt.bucket_width)) {
        probe = i;
        break;
      }
    }
    require(probe < n, ErrorCode::kEmptyPartition, "rac_heatmap: empty bucket d=" + std::to_string(d));
    probes.push_back(probe);
    std::vector<std::size_t> rows;  // d <= d_i <= d + span, oldest first
    for (std::size_t i = n_ctx; i < n; ++i) {
      const double di = detail::recent_ratio_of(i, n);
      if (di + detail::kRatioEps >= d && di <= d + opt.ensemble_span + detail::kRatioEps) rows.push_back(i);
    }
    ensembles.push_back(std::move(rows));
  }

  OverlapReport rep;
  rep.mode = opt.mode;
  rep.d_grid = opt.d_grid;
  for (std::size_t l = 0; l < trace.layers; ++l) {
    const Matrix a = trace.layer_mean(l);
    const auto ref = select_pvc(detail::row_prefix(a, n - 1, n_ctx), opt.top_p, 0);
    std::vector<double> row;
    for (std::size_t b = 0; b < opt.d_grid.size(); ++b) {
      std::vector<double> w;
      if (opt.mode == OverlapMode::kSeparate) {
        w = detail::row_prefix(a, probes[b], n_ctx);
      } else {
        const auto& rows = ensembles[b];
        const auto rw = ramp_weights(rows.size(), RecencyRamp::kLinear);
        w.assign(n_ctx, 0.0);
        for (std::size_t j = 0; j < rows.size(); ++j)
          for (std::size_t c = 0; c < n_ctx; ++c) w[c] += rw[j] * a(rows[j], c);
      }
      row.push_back(overlap_ratio(select_pvc(w, opt.top_p, 0), ref));
    }
    rep.overlap.push_back(std::move(row));
  }
  return rep;
}

struct NonsharedOptions {
  double top_p = 0.8;
  double context_ratio = 0.20;  // recent sequence ratio used to pick shared PvCs
  double split_ratio = 0.10;    // probes: split < d < context_ratio; later tokens: 0 < d < split
};

struct ProbeOverlap {
  std::size_t index = 0;
  double d = 0.0;
  std::size_t nonshared_size = 0;
  double overlap_nonshared = 0.0;  // share of this probe's non-shared PvC in later tokens' non-shared PvCs
  double overlap_nonpvc = 0.0;     // share of it in later tokens' non-PvC
};

struct NonsharedLayer {
  std::vector<ProbeOverlap> probes;
  double mean_nonshared = 0.0;
  double mean_nonpvc = 0.0;
  bool degenerate = false;  // no probe had a non-empty non-shared PvC
};

struct NonsharedReport {
  std::vector<NonsharedLayer> layers;
};

inline NonsharedReport nonshared_overlap(const AttentionTrace& trace, const NonsharedOptions& opt = {}) {
  using detail::require;
  require(opt.top_p > 0.0 && opt.top_p <= 1.0, ErrorCode::kInvalidArgument, "nonshared: top_p must be in (0,1]");
  const std::size_t n = trace.seq_len;
  require(n >= 2, ErrorCode::kInvalidArgument, "nonshared: trace too short");
  const std::size_t n_ctx = detail::context_columns(n, opt.context_ratio);
  require(n_ctx >= 1, ErrorCode::kEmptyPartition, "nonshared: no context tokens");

  std::vector<std::size_t> probes, later;
  for (std::size_t i = n_ctx; i + 1 < n; ++i) {
    const double di = detail::recent_ratio_of(i, n);
    if (di < opt.split_ratio - detail::kRatioEps) {
      later.push_back(i);
    } else if (di > opt.split_ratio + detail::kRatioEps) {
      probes.push_back(i);
    }
  }
  require(!probes.empty(), ErrorCode::kEmptyPartition, "nonshared: no probe tokens with split < d < context ratio");
  require(!later.empty(), ErrorCode::kEmptyPartition, "nonshared: no later tokens with 0 < d < split");

  auto minus = [](const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
    std::vector<std::size_t> out;
    std::set_difference(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
    return out;
  };
  auto common = [](const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
    std::vector<std::size_t> out;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
    return out.size();
  };
  std::vector<std::size_t> all_ctx(n_ctx);
  std::iota(all_ctx.begin(), all_ctx.end(), std::size_t{0});

  NonsharedReport rep;
  for (std::size_t l = 0; l < trace.layers; ++l) {
    const Matrix a = trace.layer_mean(l);
    auto pvc_of = [&](std::size_t i) { return select_pvc(detail::row_prefix(a, i, n_ctx), opt.top_p, 0); };
    const auto ref = pvc_of(n - 1);
    std::vector<std::vector<std::size_t>> later_ns, later_non;
    for (std::size_t q : later) {
      const auto pvc = pvc_of(q);
      later_ns.push_back(minus(pvc, ref));
      later_non.push_back(minus(all_ctx, pvc));
    }
    NonsharedLayer layer;
    std::size_t counted = 0;
    for (std::size_t p : probes) {
      const auto ns = minus(pvc_of(p), ref);
      ProbeOverlap po;
      po.index = p;
      po.d = detail::recent_ratio_of(p, n);
      po.nonshared_size = ns.size();
      if (!ns.empty()) {
        for (std::size_t k = 0; k < later.size(); ++k) {
          po.overlap_nonshared += static_cast<double>(common(ns, later_ns[k])) / static_cast<double>(ns.size());
          po.overlap_nonpvc += static_cast<double>(common(ns, later_non[k])) / static_cast<double>(ns.size());
        }
        po.overlap_nonshared /= static_cast<double>(later.size());
        po.overlap_nonpvc /= static_cast<double>(later.size());
        layer.mean_nonshared += po.overlap_nonshared;
        layer.mean_nonpvc += po.overlap_nonpvc;
        ++counted;
      }
      layer.probes.push_back(po);
    }
    layer.degenerate = counted == 0;
    if (counted) {
      layer.mean_nonshared /= static_cast<double>(counted);
      layer.mean_nonpvc /= static_cast<double>(counted);
    }
    rep.layers.push_back(std::move(layer));
  }
  return rep;
}

// Mean over positions of KL(softmax(ref) || softmax(cmp)).
inline double mean_kl(std::span<const std::vector<float>> ref, std::span<const std::vector<float>> cmp) {
  detail::require(!ref.empty() && ref.size() == cmp.size(), ErrorCode::kShapeMismatch,
                  "mean_kl: logit sequences differ in length");
  auto log_probs = [](std::span<const float> z) {
    double mx = z[0];
    for (float v : z) mx = std::max(mx, static_cast<double>(v));
    double sum = 0.0;
    for (float v : z) sum += std::exp(static_cast<double>(v) - mx);
    const double lse = mx + std::log(sum);
    std::vector<double> out(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) out[i] = static_cast<double>(z[i]) - lse;
    return out;
  };
  double total = 0.0;
  for (std::size_t t = 0; t < ref.size(); ++t) {
    detail::require(ref[t].size() == cmp[t].size(), ErrorCode::kShapeMismatch, "mean_kl: vocab mismatch");
    const auto a = log_probs(ref[t]);
    const auto b = log_probs(cmp[t]);
    for (std::size_t v = 0; v < a.size(); ++v) total += std::exp(a[v]) * (a[v] - b[v]);
  }
  return std::max(0.0, total / static_cast<double>(ref.size()));
}

// Expected perplexity ratio minus one on text drawn from the full-cache model:
// exp(mean KL(full || policy)) - 1 along the teacher-forced `tokens`.
inline double perplexity_inflation(const Model& model, std::span<const TokenId> tokens, const CachePolicy& policy,
                                   const PerplexityOptions& opts = {}) {
  const auto full = teacher_forced_logits(model, tokens, FullPolicy{}, opts);
  return std::expm1(mean_kl(full, teacher_forced_logits(model, tokens, policy, opts)));
}

struct IcrReport {
  std::vector<double> retention_grid;
  double baseline = 0.0;                        // full-cache perplexity
  std::vector<std::vector<double>> perplexity;  // [layer][grid]
  std::vector<std::vector<double>> inflation;   // [layer][grid], see perplexity_inflation
};

// Perplexity with only `layer` reduced to each retention in the grid.
inline std::vector<double> icr_sweep(const Model& model, std::span<const TokenId> tokens, std::size_t layer,
                                     std::span<const double> retention_grid, const PerplexityOptions& opts = {}) {
  std::vector<double> curve;
  curve.reserve(retention_grid.size());
  for (double r : retention_grid) {
    const SingleLayerPvcPolicy policy(model.config.layers, layer, r);
    curve.push_back(perplexity(model, tokens, policy, opts));
  }
  return curve;
}

inline IcrReport icr_report(const Model& model, std::span<const TokenId> tokens, std::span<const double> retention_grid,
                            const PerplexityOptions& opts = {}) {
  IcrReport rep;
  rep.retention_grid.assign(retention_grid.begin(), retention_grid.end());
  const auto targets = tokens.subspan(opts.prefill_len);
  const auto full = teacher_forced_logits(model, tokens, FullPolicy{}, opts);
  rep.baseline = perplexity_from_logits(full, targets);
  for (std::size_t l = 0; l < model.config.layers; ++l) {
    std::vector<double> ppl, infl;
    for (double r : retention_grid) {
      const auto logits = teacher_forced_logits(model, tokens, SingleLayerPvcPolicy(model.config.layers, l, r), opts);
      ppl.push_back(perplexity_from_logits(logits, targets));
      infl.push_back(std::expm1(mean_kl(full, logits)));
    }
    rep.perplexity.push_back(std::move(ppl));
    rep.inflation.push_back(std::move(infl));
  }
  return rep;
}

// Population standard deviation of each layer's perplexity curve.
inline std::vector<double> icr_std(const IcrReport& rep) {
  std::vector<double> out;
  for (const auto& curve : rep.perplexity) {
    detail::require(curve.size() == rep.retention_grid.size(), ErrorCode::kShapeMismatch,
                    "icr_std: layer curve length differs from the retention grid");
    if (curve.empty()) {
      out.push_back(0.0);
      continue;
    }
    double mean = 0.0;
    for (double v : curve) mean += v;
    mean /= static_cast<double>(curve.size());
    double var = 0.0;
    for (double v : curve) var += (v - mean) * (v - mean);
    out.push_back(std::sqrt(var / static_cast<double>(curve.size())));
  }
  return out;
}

// --- CSV -----------------------------------------------------------------------

inline void write_rac_csv(std::ostream& os, const OverlapReport& rep, bool header = true) {
  if (header) os << "layer,d_bucket,mode,overlap\n";
  os << std::setprecision(9);
  for (std::size_t l = 0; l < rep.overlap.size(); ++l)
    for (std::size_t b = 0; b < rep.d_grid.size(); ++b)
      os << l << ',' << rep.d_grid[b] << ',' << to_string(rep.mode) << ',' << rep.overlap[l][b] << '\n';
}

inline void write_icr_csv(std::ostream& os, const IcrReport& rep) {
  os << "layer,retention,perplexity,inflation\n" << std::setprecision(9);
  for (std::size_t l = 0; l < rep.perplexity.size(); ++l)
    for (std::size_t g = 0; g < rep.retention_grid.size(); ++g) {
      os << l << ',' << rep.retention_grid[g] << ',' << rep.perplexity[l][g] << ',';
      if (l < rep.inflation.size()) os << rep.inflation[l][g];
      os << '\n';
    }
}

inline void write_nonshared_csv(std::ostream& os, const NonsharedReport& rep) {
  os << "layer,probe,d,nonshared_size,overlap_nonshared,overlap_nonpvc,degenerate\n" << std::setprecision(9);
  for (std::size_t l = 0; l < rep.layers.size(); ++l) {
    const auto& layer = rep.layers[l];
    for (const auto& p : layer.probes)
      os << l << ',' << p.index << ',' << p.d << ',' << p.nonshared_size << ',' << p.overlap_nonshared << ','
         << p.overlap_nonpvc << ',' << (layer.degenerate ? 1 : 0) << '\n';
  }
}

}  // namespace pykv
