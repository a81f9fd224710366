#pragma once

// Engine configuration: a flat text file of `section.key = value` lines.
// `#` starts a comment. Unknown keys and malformed values are rejected with
// the offending line number.

#include <charconv>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "pykv/error.hpp"
#include "pykv/kv_store.hpp"
#include "pykv/model.hpp"
#include "pykv/policies.hpp"

namespace pykv {

struct PolicySpec {
  std::string name = "pyramid";
  PyramidPolicyConfig pyramid;
  std::optional<SchedulePreset> preset;
  double target_compression = 0.6;
  std::size_t keep_first = 4;   // local
  std::size_t window = 16;      // local, heavy_hitter
  std::size_t hh_budget = 128;  // heavy_hitter
  std::optional<std::size_t> min_pvc_len;  // uniform floor, expanded to every layer
  PositionMode position_mode = PositionMode::kGather;
};

struct RunSection {
  std::uint64_t seed = 0;
  std::string csv;
  std::string trace;
  std::size_t bytes_per_element = 4;
};

struct EngineConfig {
  ModelConfig model;
  PolicySpec policy;
  RunSection run;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(std::string_view v, std::size_t line, std::string_view key) {
  T out{};
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc{} || ptr != end)
    fail(ErrorCode::kConfig, "line " + std::to_string(line) + ": invalid value '" + std::string(v) + "' for " +
                                 std::string(key));
  return out;
}

inline bool parse_bool(std::string_view v, std::size_t line, std::string_view key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  fail(ErrorCode::kConfig, "line " + std::to_string(line) + ": invalid boolean '" + std::string(v) + "' for " +
                               std::string(key));
}

}  // namespace detail

inline PositionMode parse_position_mode(std::string_view s) {
  if (s == "gather") return PositionMode::kGather;
  if (s == "reencode" || s == "re-encode") return PositionMode::kReencode;
  detail::fail(ErrorCode::kInvalidArgument, "unknown position mode '" + std::string(s) + "'");
}

inline EngineConfig parse_config(std::istream& in) {
  using Setter = std::function<void(EngineConfig&, std::string_view, std::size_t, std::string_view)>;

#define PYKV_NUM(KEY, FIELD, TYPE) \
  {KEY, [](EngineConfig& c, std::string_view v, std::size_t ln, std::string_view k) { c.FIELD = detail::parse_number<TYPE>(v, ln, k); }}
  static const std::map<std::string, Setter, std::less<>> setters = {
      PYKV_NUM("model.layers", model.layers, std::size_t),
      PYKV_NUM("model.heads", model.heads, std::size_t),
      PYKV_NUM("model.head_dim", model.head_dim, std::size_t),
      PYKV_NUM("model.vocab", model.vocab, std::size_t),
      PYKV_NUM("model.seed", model.seed, std::uint64_t),
      PYKV_NUM("model.max_seq", model.max_seq, std::size_t),
      PYKV_NUM("model.mlp_ratio", model.mlp_ratio, double),
      {"policy.name", [](EngineConfig& c, std::string_view v, std::size_t, std::string_view) { c.policy.name = v; }},
      PYKV_NUM("policy.recent_ratio", policy.pyramid.recent_ratio, double),
      PYKV_NUM("policy.recent_window_min", policy.pyramid.recent_window_min, std::size_t),
      PYKV_NUM("policy.p0", policy.pyramid.p0, double),
      PYKV_NUM("policy.decay", policy.pyramid.decay, double),
      PYKV_NUM("policy.refresh_every", policy.pyramid.refresh_every, std::size_t),
      PYKV_NUM("policy.target_compression", policy.target_compression, double),
      PYKV_NUM("policy.keep_first", policy.keep_first, std::size_t),
      PYKV_NUM("policy.window", policy.window, std::size_t),
      PYKV_NUM("policy.hh_budget", policy.hh_budget, std::size_t),
      {"policy.budget",
       [](EngineConfig& c, std::string_view v, std::size_t ln, std::string_view k) {
         if (v == "none") c.policy.pyramid.budget.reset();
         else c.policy.pyramid.budget = detail::parse_number<std::size_t>(v, ln, k);
       }},
      {"policy.min_pvc_len",
       [](EngineConfig& c, std::string_view v, std::size_t ln, std::string_view k) {
         c.policy.min_pvc_len = detail::parse_number<std::size_t>(v, ln, k);
       }},
      {"policy.min_pvc_lens",
       [](EngineConfig& c, std::string_view v, std::size_t ln, std::string_view k) {
         c.policy.pyramid.min_pvc_lens.clear();
         std::size_t start = 0;
         while (start <= v.size()) {
           const auto comma = v.find(',', start);
           const auto part = detail::trim(v.substr(start, comma == std::string_view::npos ? v.npos : comma - start));
           c.policy.pyramid.min_pvc_lens.push_back(detail::parse_number<std::size_t>(part, ln, k));
           if (comma == std::string_view::npos) break;
           start = comma + 1;
         }
       }},
      {"policy.recency_ramp",
       [](EngineConfig& c, std::string_view v, std::size_t ln, std::string_view) {
         try {
           c.policy.pyramid.ramp = parse_ramp(v);
         } catch (const Error& e) {
           detail::fail(ErrorCode::kConfig, "line " + std::to_string(ln) + ": " + e.what());
         }
       }},
      {"policy.preset",
       [](EngineConfig& c, std::string_view v, std::size_t ln, std::string_view) {
         try {
           c.policy.preset = parse_preset(v);
         } catch (const Error& e) {
           detail::fail(ErrorCode::kConfig, "line " + std::to_string(ln) + ": " + e.what());
         }
       }},
      {"policy.prune_prefill",
       [](EngineConfig& c, std::string_view v, std::size_t ln, std::string_view k) {
         c.policy.pyramid.prune_prefill = detail::parse_bool(v, ln, k);
       }},
      {"policy.position_mode",
       [](EngineConfig& c, std::string_view v, std::size_t ln, std::string_view) {
         try {
           c.policy.position_mode = parse_position_mode(v);
         } catch (const Error& e) {
           detail::fail(ErrorCode::kConfig, "line " + std::to_string(ln) + ": " + e.what());
         }
       }},
      PYKV_NUM("run.seed", run.seed, std::uint64_t),
      {"run.csv", [](EngineConfig& c, std::string_view v, std::size_t, std::string_view) { c.run.csv = v; }},
      {"run.trace", [](EngineConfig& c, std::string_view v, std::size_t, std::string_view) { c.run.trace = v; }},
      PYKV_NUM("run.bytes_per_element", run.bytes_per_element, std::size_t),
  };
#undef PYKV_NUM

  EngineConfig cfg;
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string_view line = raw;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      detail::fail(ErrorCode::kConfig, "line " + std::to_string(line_no) + ": expected 'section.key = value'");
    const auto key = detail::trim(line.substr(0, eq));
    const auto value = detail::trim(line.substr(eq + 1));
    const auto it = setters.find(key);
    if (it == setters.end())
      detail::fail(ErrorCode::kConfig, "line " + std::to_string(line_no) + ": unknown key '" + std::string(key) + "'");
    if (value.empty())
      detail::fail(ErrorCode::kConfig, "line " + std::to_string(line_no) + ": empty value for '" + std::string(key) + "'");
    it->second(cfg, value, line_no, key);
  }
  try {
    validate(cfg.model);
  } catch (const Error& e) {
    detail::fail(ErrorCode::kConfig, e.what());
  }
  if (cfg.run.bytes_per_element != 2 && cfg.run.bytes_per_element != 4)
    detail::fail(ErrorCode::kConfig, "run.bytes_per_element must be 2 or 4");
  return cfg;
}

inline EngineConfig parse_config_string(std::string_view text) {
  std::istringstream in{std::string(text)};
  return parse_config(in);
}

inline EngineConfig load_config(const std::string& path) {
  std::ifstream in(path);
  detail::require(static_cast<bool>(in), ErrorCode::kConfig, "cannot open config '" + path + "'");
  return parse_config(in);
}

// Policy names: full, pyramid, local, heavy_hitter.
inline std::unique_ptr<CachePolicy> make_policy(const PolicySpec& spec, std::size_t layers,
                                                std::optional<std::string_view> name = std::nullopt) {
  const std::string_view which = name ? *name : std::string_view(spec.name);
  if (which == "full") return std::make_unique<FullPolicy>();
  if (which == "pyramid") {
    PyramidPolicyConfig cfg = spec.pyramid;
    if (spec.min_pvc_len) cfg.min_pvc_lens.assign(layers, *spec.min_pvc_len);
    if (spec.preset) cfg.schedule = preset_schedule(*spec.preset, layers, spec.target_compression);
    return std::make_unique<PyramidPolicy>(std::move(cfg), layers);
  }
  if (which == "local") return std::make_unique<LocalPolicy>(spec.keep_first, spec.window);
  if (which == "heavy_hitter") return std::make_unique<HeavyHitterPolicy>(spec.hh_budget, spec.window);
  detail::fail(ErrorCode::kInvalidArgument, "unknown policy '" + std::string(which) + "'");
}

}  // namespace pykv
