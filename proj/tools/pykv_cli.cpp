// pykv command line: generate, bench, analyze, trace, sweep, posenc.
//
// Exit codes: 0 success, 2 usage or configuration error, 3 runtime error.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <iterator>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "pykv/pykv.hpp"

namespace {

using namespace pykv;

constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct PromptFlags {
  std::string bytes_path;
  std::size_t random_len = 0;

  void add(CLI::App* app, const std::string& what) {
    auto* b = app->add_option("--prompt-bytes", bytes_path, what + " from a file, one token per byte");
    auto* r = app->add_option("--prompt-random", random_len, what + " of N random tokens drawn from the run seed");
    b->excludes(r);
  }

  std::vector<TokenId> load(const EngineConfig& cfg, std::size_t fallback_len = 0) const {
    if (!bytes_path.empty()) {
      std::ifstream in(bytes_path, std::ios::binary);
      detail::require(static_cast<bool>(in), ErrorCode::kIo, "cannot open '" + bytes_path + "'");
      const std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
      std::vector<TokenId> out;
      out.reserve(raw.size());
      for (char c : raw) out.push_back(static_cast<unsigned char>(c) % static_cast<TokenId>(cfg.model.vocab));
      return out;
    }
    const std::size_t len = random_len ? random_len : fallback_len;
    if (len == 0) throw UsageError("one of --prompt-bytes or --prompt-random is required");
    return random_tokens(cfg.run.seed, 0, len, cfg.model.vocab);
  }
};

EngineConfig load_engine_config(const std::string& path) {
  EngineConfig cfg = load_config(path);
  if (const char* env = std::getenv("PYKV_SEED")) {
    try {
      std::size_t used = 0;
      cfg.run.seed = std::stoull(env, &used);
      if (env[used] != '\0') throw std::invalid_argument(env);
    } catch (const std::exception&) {
      detail::fail(ErrorCode::kConfig, std::string("PYKV_SEED is not an unsigned integer: '") + env + "'");
    }
  }
  return cfg;
}

class CsvSink {
 public:
  explicit CsvSink(const std::string& path) {
    if (path.empty() || path == "-") return;
    file_ = std::make_unique<std::ofstream>(path, std::ios::trunc);
    detail::require(static_cast<bool>(*file_), ErrorCode::kIo, "cannot open '" + path + "' for writing");
  }
  std::ostream& stream() { return file_ ? *file_ : std::cout; }

 private:
  std::unique_ptr<std::ofstream> file_;
};

std::string join_lengths(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

// --- generate --------------------------------------------------------------------

struct GenerateArgs {
  std::string config;
  PromptFlags prompt;
  std::size_t steps = 16;
  std::string policy;
  bool verbose = false;
};

int run_generate(const GenerateArgs& a) {
  const EngineConfig cfg = load_engine_config(a.config);
  const Model model = init_model(cfg.model);
  const auto policy = make_policy(cfg.policy, cfg.model.layers,
                                  a.policy.empty() ? std::nullopt : std::optional<std::string_view>(a.policy));
  const auto prompt = a.prompt.load(cfg);
  RunOptions opts;
  opts.position_mode = cfg.policy.position_mode;
  const Generation g = generate_greedy(model, prompt, a.steps, *policy, opts);

  std::cout << "policy " << policy->name() << "\n";
  std::cout << "prompt_tokens " << prompt.size() << "\n";
  std::cout << "prefill_cache_lengths " << join_lengths(g.cache_lengths.front()) << "\n";
  if (a.verbose)
    for (std::size_t s = 1; s < g.cache_lengths.size(); ++s)
      std::cout << "step " << s << " token " << g.tokens[s - 1] << " cache_lengths "
                << join_lengths(g.cache_lengths[s]) << "\n";
  std::cout << "tokens";
  for (TokenId t : g.tokens) std::cout << ' ' << t;
  std::cout << "\n";
  std::uint64_t final_entries = 0;
  for (std::size_t n : g.cache_lengths.back()) final_entries += n;
  std::cout << "kv_entries " << final_entries << "\n";
  std::cout << "kv_bytes " << 2 * final_entries * cfg.model.heads * cfg.model.head_dim * cfg.run.bytes_per_element
            << "\n";
  std::cout << "attn_cells " << g.stats.attn_cells << "\n";
  std::cout << "sort_ops " << g.stats.ranked << "\n";
  return 0;
}

// --- bench -----------------------------------------------------------------------

struct BenchArgs {
  std::string config;
  std::vector<std::size_t> batches;
  std::size_t prefill = 512;
  std::size_t gen = 128;
  std::vector<std::string> policies;
  std::string csv;
  std::size_t workers = 0;
};

int run_bench_cmd(const BenchArgs& a) {
  const EngineConfig cfg = load_engine_config(a.config);
  const Model model = init_model(cfg.model);
  std::vector<std::unique_ptr<CachePolicy>> policies;
  if (a.policies.empty()) policies.push_back(make_policy(cfg.policy, cfg.model.layers));
  for (const auto& name : a.policies) policies.push_back(make_policy(cfg.policy, cfg.model.layers, name));
  BenchOptions opts;
  opts.bytes_per_element = cfg.run.bytes_per_element;
  opts.position_mode = cfg.policy.position_mode;
  opts.workers = a.workers;

  CsvSink sink(a.csv.empty() ? cfg.run.csv : a.csv);
  write_bench_header(sink.stream());
  for (std::size_t b : a.batches)
    for (const auto& p : policies)
      write_bench_row(sink.stream(), run_bench(model, *p, b, a.prefill, a.gen, cfg.run.seed, opts));
  return 0;
}

// --- analyze ---------------------------------------------------------------------

struct AnalyzeArgs {
  std::string trace;
  std::string model_config;
  PromptFlags prompt;
  std::string csv;
  double top_p = 0.8;
  std::vector<double> grid = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  std::size_t prefill_len = 1;
  std::vector<double> d_grid = {0.0, 0.05, 0.10, 0.15, 0.20, 0.25};
  double bucket_width = 0.05;
  std::string mode = "separate";
  double span = 0.10;
  double context_ratio = 0.30;
  double split_ratio = 0.10;
};

void require_one_source(const AnalyzeArgs& a) {
  if (a.trace.empty() == a.model_config.empty())
    throw UsageError("exactly one of --trace or --model-config is required");
}

AttentionTrace analysis_trace(const AnalyzeArgs& a) {
  require_one_source(a);
  if (!a.trace.empty()) return load_trace(a.trace);
  const EngineConfig cfg = load_engine_config(a.model_config);
  return capture_trace(init_model(cfg.model), a.prompt.load(cfg, 128));
}

int run_icr(const AnalyzeArgs& a) {
  require_one_source(a);
  if (a.model_config.empty()) throw UsageError("icr needs --model-config: perplexity requires a model");
  const EngineConfig cfg = load_engine_config(a.model_config);
  const Model model = init_model(cfg.model);
  const auto tokens = a.prompt.load(cfg, 128);
  PerplexityOptions opts;
  opts.prefill_len = a.prefill_len;
  opts.position_mode = cfg.policy.position_mode;
  CsvSink sink(a.csv);
  write_icr_csv(sink.stream(), icr_report(model, tokens, a.grid, opts));
  return 0;
}

int run_rac(const AnalyzeArgs& a) {
  RacOptions opt;
  opt.d_grid = a.d_grid;
  opt.bucket_width = a.bucket_width;
  opt.top_p = a.top_p;
  opt.mode = a.mode == "ensemble" ? OverlapMode::kEnsemble : OverlapMode::kSeparate;
  opt.ensemble_span = a.span;
  opt.context_ratio = a.context_ratio;
  const auto trace = analysis_trace(a);
  CsvSink sink(a.csv);
  write_rac_csv(sink.stream(), rac_heatmap(trace, opt));
  return 0;
}

int run_nonshared(const AnalyzeArgs& a) {
  NonsharedOptions opt;
  opt.top_p = a.top_p;
  opt.context_ratio = a.context_ratio;
  opt.split_ratio = a.split_ratio;
  const auto trace = analysis_trace(a);
  CsvSink sink(a.csv);
  write_nonshared_csv(sink.stream(), nonshared_overlap(trace, opt));
  return 0;
}

// --- trace / sweep / posenc --------------------------------------------------------

struct TraceArgs {
  std::string config;
  PromptFlags prompt;
  std::string out;
};

int run_trace(const TraceArgs& a) {
  const EngineConfig cfg = load_engine_config(a.config);
  const std::string out = a.out.empty() ? cfg.run.trace : a.out;
  if (out.empty()) throw UsageError("trace capture needs --out or run.trace in the config");
  const auto t = capture_trace(init_model(cfg.model), a.prompt.load(cfg));
  save_trace(t, out);
  std::cout << "wrote " << out << " (" << t.layers << " layers, " << t.heads << " heads, " << t.seq_len
            << " tokens)\n";
  return 0;
}

struct SweepArgs {
  std::string config;
  std::vector<double> ratios = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  std::vector<std::size_t> batches = {1, 2, 4, 8};
  std::size_t prefill = 512;
  std::size_t gen = 0;
  std::size_t eval_len = 256;
  std::string csv;
};

int run_sweep_recent(const SweepArgs& a) {
  const EngineConfig cfg = load_engine_config(a.config);
  const Model model = init_model(cfg.model);
  RecentSweepOptions opt;
  opt.prefill_len = a.prefill;
  opt.gen_len = a.gen;
  opt.seed = cfg.run.seed;
  PyramidPolicyConfig base = cfg.policy.pyramid;
  if (cfg.policy.min_pvc_len) base.min_pvc_lens.assign(cfg.model.layers, *cfg.policy.min_pvc_len);
  const auto eval = random_tokens(cfg.run.seed, 1, a.eval_len, cfg.model.vocab);
  CsvSink sink(a.csv);
  write_recent_sweep_csv(sink.stream(), sweep_recent_ratio(model, a.ratios, base, eval, opt));
  return 0;
}

int run_sweep_batch(const SweepArgs& a) {
  const EngineConfig cfg = load_engine_config(a.config);
  const Model model = init_model(cfg.model);
  const auto candidate = make_policy(cfg.policy, cfg.model.layers);
  BenchOptions opts;
  opts.bytes_per_element = cfg.run.bytes_per_element;
  opts.position_mode = cfg.policy.position_mode;
  const auto sweep = sweep_batch(model, FullPolicy{}, *candidate, a.batches, a.prefill, a.gen, cfg.run.seed, opts);
  CsvSink sink(a.csv);
  write_bench_csv(sink.stream(), sweep.rows);
  if (sweep.crossover) std::cerr << "throughput crossover at batch " << *sweep.crossover << "\n";
  else std::cerr << "no throughput crossover in the swept batches\n";
  return 0;
}

struct PosencArgs {
  std::string config;
  PromptFlags prompt;
  std::size_t eval_len = 256;
  std::size_t gen = 32;
  std::string csv;
};

int run_posenc(const PosencArgs& a) {
  const EngineConfig cfg = load_engine_config(a.config);
  const Model model = init_model(cfg.model);
  const auto policy = make_policy(cfg.policy, cfg.model.layers);
  const auto prompt = a.prompt.load(cfg, 256);
  const auto eval = random_tokens(cfg.run.seed, 1, a.eval_len, cfg.model.vocab);
  CsvSink sink(a.csv);
  write_position_ablation_csv(sink.stream(), position_ablation(model, *policy, eval, prompt, a.gen));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pykv: layer-wise KV cache compression engine"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* generate = app.add_subcommand("generate", "Greedy generation with a cache policy");
  generate->add_option("--config", gen.config, "Engine config file")->required();
  gen.prompt.add(generate, "Prompt");
  generate->add_option("--steps", gen.steps, "Decode steps after prefill")->capture_default_str();
  generate->add_option("--policy", gen.policy, "Override policy.name (full, pyramid, local, heavy_hitter)");
  generate->add_flag("--verbose", gen.verbose, "Print per-step cache lengths");

  BenchArgs bench;
  auto* bench_cmd = app.add_subcommand("bench", "Efficiency records as CSV");
  bench_cmd->add_option("--config", bench.config, "Engine config file")->required();
  bench_cmd->add_option("--batch", bench.batches, "Batch sizes, comma separated")->required()->delimiter(',');
  bench_cmd->add_option("--prefill", bench.prefill, "Prompt length")->capture_default_str();
  bench_cmd->add_option("--gen", bench.gen, "Generated tokens per sequence")->capture_default_str();
  bench_cmd->add_option("--policy", bench.policies, "Policies, comma separated (default: config)")->delimiter(',');
  bench_cmd->add_option("--csv", bench.csv, "Output CSV (default: run.csv, else stdout)");
  bench_cmd->add_option("--workers", bench.workers, "Worker threads (0 = hardware concurrency)");

  AnalyzeArgs an;
  auto* analyze = app.add_subcommand("analyze", "ICR / RAC / non-shared PvC analyses");
  analyze->require_subcommand(1);
  auto add_common = [&](CLI::App* sub) {
    auto* t = sub->add_option("--trace", an.trace, "ATRC attention trace");
    auto* m = sub->add_option("--model-config", an.model_config, "Engine config of a model to run");
    t->excludes(m);
    an.prompt.add(sub, "Evaluation tokens");
    sub->add_option("--csv", an.csv, "Output CSV (default stdout)");
  };
  auto* icr = analyze->add_subcommand("icr", "Single-layer retention sweep");
  add_common(icr);
  icr->add_option("--grid", an.grid, "Retention ratios, comma separated")->delimiter(',');
  icr->add_option("--prefill-len", an.prefill_len, "Tokens fed through prefill")->capture_default_str();
  auto* rac = analyze->add_subcommand("rac", "Recent attention consistency heatmap");
  add_common(rac);
  rac->add_option("--top-p", an.top_p, "Retention ratio of each PvC")->capture_default_str();
  rac->add_option("--d-grid", an.d_grid, "Recent-ratio bucket starts, comma separated")->delimiter(',');
  rac->add_option("--bucket-width", an.bucket_width)->capture_default_str();
  rac->add_option("--mode", an.mode)->check(CLI::IsMember({"separate", "ensemble"}))->capture_default_str();
  rac->add_option("--span", an.span, "Ensemble recent-ratio span")->capture_default_str();
  rac->add_option("--context-ratio", an.context_ratio)->capture_default_str();
  auto* ns = analyze->add_subcommand("nonshared", "Fate of non-shared PvC entries");
  add_common(ns);
  ns->add_option("--top-p", an.top_p)->capture_default_str();
  ns->add_option("--context-ratio", an.context_ratio)->capture_default_str();
  ns->add_option("--split-ratio", an.split_ratio)->capture_default_str();

  TraceArgs tr;
  auto* trace = app.add_subcommand("trace", "Capture a full-cache attention trace");
  trace->add_option("--config", tr.config, "Engine config file")->required();
  tr.prompt.add(trace, "Prompt");
  trace->add_option("--out", tr.out, "Output ATRC file (default run.trace)");

  SweepArgs sw;
  auto* sweep = app.add_subcommand("sweep", "Parameter sweeps");
  sweep->require_subcommand(1);
  auto* recent = sweep->add_subcommand("recent", "Recent-window ratio sweep");
  recent->add_option("--config", sw.config, "Engine config file")->required();
  recent->add_option("--ratios", sw.ratios, "Recent ratios, comma separated")->delimiter(',');
  recent->add_option("--prefill", sw.prefill)->capture_default_str();
  recent->add_option("--gen", sw.gen)->capture_default_str();
  recent->add_option("--eval-len", sw.eval_len, "Random evaluation tokens for perplexity")->capture_default_str();
  recent->add_option("--csv", sw.csv);
  auto* batch = sweep->add_subcommand("batch", "Full cache vs configured policy across batch sizes");
  batch->add_option("--config", sw.config, "Engine config file")->required();
  batch->add_option("--batches", sw.batches, "Batch sizes, ascending, comma separated")->delimiter(',');
  batch->add_option("--prefill", sw.prefill)->capture_default_str();
  batch->add_option("--gen", sw.gen)->capture_default_str();
  batch->add_option("--csv", sw.csv);

  PosencArgs pe;
  auto* posenc = app.add_subcommand("posenc", "Gather vs re-encode position ablation");
  posenc->add_option("--config", pe.config, "Engine config file")->required();
  pe.prompt.add(posenc, "Generation prompt");
  posenc->add_option("--eval-len", pe.eval_len)->capture_default_str();
  posenc->add_option("--gen", pe.gen)->capture_default_str();
  posenc->add_option("--csv", pe.csv);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  try {
    if (generate->parsed()) return run_generate(gen);
    if (bench_cmd->parsed()) return run_bench_cmd(bench);
    if (icr->parsed()) return run_icr(an);
    if (rac->parsed()) return run_rac(an);
    if (ns->parsed()) return run_nonshared(an);
    if (trace->parsed()) return run_trace(tr);
    if (recent->parsed()) return run_sweep_recent(sw);
    if (batch->parsed()) return run_sweep_batch(sw);
    if (posenc->parsed()) return run_posenc(pe);
  } catch (const UsageError& e) {
    std::cerr << "pykv: usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    std::cerr << "pykv: error (" << to_string(e.code()) << "): " << e.what() << "\n";
    return e.code() == ErrorCode::kConfig ? kExitUsage : kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "pykv: error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
