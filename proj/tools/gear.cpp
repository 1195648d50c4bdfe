// gear: dataset preparation, index building, generation, evaluation runs,
// one-shot lookup and the KNN benchmark.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "gear/gear.hpp"

namespace fs = std::filesystem;

namespace {

/// "1..5" or "1,3,5".
std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  if (auto dots = s.find(".."); dots != std::string::npos) {
    const int lo = std::stoi(s.substr(0, dots));
    const int hi = std::stoi(s.substr(dots + 2));
    if (hi < lo) throw gear::ConfigError("empty range '" + s + "'");
    for (int i = lo; i <= hi; ++i) out.push_back(i);
    return out;
  }
  for (const auto& part : gear::text::split(s, ',')) {
    if (gear::text::trim_view(part).empty()) continue;
    try {
      out.push_back(std::stoi(part));
    } catch (const std::exception&) {
      throw gear::ConfigError("'" + part + "' is not an integer");
    }
  }
  return out;
}

struct RunOverrides {
  std::string mode, pooling, prompt, out_dir, cache_dir, sweep_m, k_list, p_at, acc_at, trace, rank_spread;
  std::optional<int> m, threads;
  std::optional<std::size_t> topk;
  std::optional<std::uint64_t> seed;
  std::optional<bool> per_source;
};

void add_override_flags(CLI::App* cmd, RunOverrides& o) {
  cmd->add_option("--mode", o.mode, "embedding_only, llm_only or gear");
  cmd->add_option("--pooling", o.pooling, "mean, max or first");
  cmd->add_option("--prompt", o.prompt, "bp1, bp2 or rp");
  cmd->add_option("--m", o.m, "Candidate count");
  cmd->add_option("--sweep-m", o.sweep_m, "Candidate counts to sweep, e.g. 1..5");
  cmd->add_option("--seed", o.seed, "Split seed");
  cmd->add_option("--topk", o.topk, "Ranked terms kept per query");
  cmd->add_option("--k-list", o.k_list, "Cutoffs for both P@k and acc@k");
  cmd->add_option("--p-at", o.p_at, "P@k cutoffs");
  cmd->add_option("--acc-at", o.acc_at, "acc@k cutoffs");
  cmd->add_option("--per-source", o.per_source, "Per-source breakdown (true/false)");
  cmd->add_option("--rank-spread", o.rank_spread, "std or variance");
  cmd->add_option("--threads", o.threads, "Evaluation threads");
  cmd->add_option("--trace", o.trace, "auto, on or off");
  cmd->add_option("--out-dir", o.out_dir, "Output directory");
  cmd->add_option("--cache-dir", o.cache_dir, "Cache directory (default $GEAR_CACHE_DIR)");
}

gear::RunConfig load_config(const std::string& path, const RunOverrides& o) {
  auto c = gear::load_run_config(path);
  if (!o.mode.empty()) c.mode = gear::parse_mode(o.mode);
  if (!o.pooling.empty()) c.pooling = gear::parse_pooling(o.pooling);
  if (!o.prompt.empty()) c.prompt.variant = gear::parse_prompt_variant(o.prompt);
  if (o.m) c.m = *o.m;
  if (!o.sweep_m.empty()) c.sweep_m = parse_int_list(o.sweep_m);
  if (o.seed) c.split.seed = *o.seed;
  if (o.topk) c.eval.topk = *o.topk;
  if (!o.k_list.empty()) c.eval.p_at = c.eval.acc_at = parse_int_list(o.k_list);
  if (!o.p_at.empty()) c.eval.p_at = parse_int_list(o.p_at);
  if (!o.acc_at.empty()) c.eval.acc_at = parse_int_list(o.acc_at);
  if (o.per_source) c.eval.per_source = *o.per_source;
  if (!o.rank_spread.empty()) c.eval.rank_spread = o.rank_spread;
  if (o.threads) c.eval.threads = *o.threads;
  if (!o.trace.empty()) c.trace = o.trace;
  if (!o.out_dir.empty()) c.out_dir = o.out_dir;
  if (!o.cache_dir.empty()) c.cache_dir = o.cache_dir;
  gear::validate(c);
  return c;
}

fs::path index_dir_of(const gear::RunConfig& c, const std::string& flag) {
  return flag.empty() ? fs::path(c.out_dir) / "index" : fs::path(flag);
}

int cmd_ingest(const std::string& input, const std::string& format, const std::string& out, const std::string& name,
               const std::string& description) {
  const auto corpus = gear::load_corpus(input, gear::parse_corpus_format(format), name, description);
  gear::save_corpus(corpus, out);
  std::printf("%zu entries, %zu terms -> %s\n", corpus.size(), corpus.term_count(), out.c_str());
  return 0;
}

int cmd_split(const gear::RunConfig& c, const std::string& out) {
  const auto corpus = gear::load_corpus(gear::load_manifest(c.resolve(c.corpus)));
  nlohmann::json j;
  if (c.split.kind == "random") {
    const auto s = gear::random_split(corpus, c.split.seed, c.split.ratios);
    j = gear::to_json(s);
    std::printf("train %zu, valid %zu, test %zu\n", s.train.size(), s.valid.size(), s.test.size());
  } else {
    j = nlohmann::json::object();
    for (const auto& [label, s] : gear::source_split(corpus, c.split.seed, c.split.ratios)) {
      j[label] = gear::to_json(s);
      std::printf("%s: train %zu, valid %zu, test %zu\n", label.c_str(), s.train.size(), s.valid.size(),
                  s.test.size());
    }
  }
  const fs::path path = out.empty() ? fs::path(c.out_dir) / "split.json" : fs::path(out);
  gear::write_text(path, j.dump() + "\n");
  std::printf("wrote %s\n", path.string().c_str());
  return 0;
}

int cmd_build_index(const gear::RunConfig& c, const std::string& index_dir) {
  if (!c.embedding) throw gear::ConfigError("build-index needs an 'embedding' section");
  const auto corpus = gear::load_corpus(gear::load_manifest(c.resolve(c.corpus)));
  auto cfg = c;
  cfg.mode = gear::Mode::embedding_only;
  auto providers = gear::make_providers(cfg, corpus);
  const auto root = gear::cache_root(c);
  const auto emb_dir = root / "embeddings" / gear::path_safe(providers.embedder->model_id());
  auto cache = fs::exists(emb_dir / "manifest.json")
                   ? gear::EmbeddingCache::load(emb_dir)
                   : gear::EmbeddingCache(providers.embedder->model_id(), providers.embedder->dimension());
  std::vector<gear::Corpus> corpora{corpus};
  for (const auto& extra : c.extra_vocabulary)
    corpora.push_back(gear::load_corpus(gear::load_manifest(c.resolve(extra))));
  const auto vocab = corpora.size() == 1 ? gear::vocabulary(corpus) : gear::merged_vocabulary(corpora);
  const auto index = gear::VectorIndex::build(vocab, *providers.embedder, gear::instruction_of(*c.embedding), &cache,
                                              {c.embedding->batch_size, c.embedding->concurrency});
  cache.save(emb_dir);
  const auto dir = index_dir_of(c, index_dir);
  index.save(dir);
  std::printf("%zu terms x %zu dims -> %s\n", index.size(), index.dimension(), dir.string().c_str());
  return 0;
}

int cmd_generate(const gear::RunConfig& c) {
  if (!c.generation) throw gear::ConfigError("generate needs a 'generation' section");
  const auto corpus = gear::load_corpus(gear::load_manifest(c.resolve(c.corpus)));
  const auto plan = gear::plan_evaluation(corpus, c);
  auto cfg = c;
  cfg.mode = gear::Mode::llm_only;
  auto providers = gear::make_providers(cfg, corpus);
  const auto& g = *c.generation;
  gear::GenerationConfig gc;
  gc.endpoint = g.endpoint;
  gc.model_id = g.model_id;
  gc.temperature = g.temperature;
  gc.max_retries = g.max_retries;
  gc.timeout = std::chrono::milliseconds(g.timeout_ms);
  gc.concurrency_limit = g.concurrency_limit;
  gc.retry_base = std::chrono::milliseconds(g.retry_base_ms);
  gear::GenerationCache cache(gear::cache_root(c) / "generations");
  gear::Generator generator(gc, *providers.transport, &cache);
  const int k = c.sweep_m.empty() ? c.m : *std::max_element(c.sweep_m.begin(), c.sweep_m.end());
  std::vector<gear::GenerationRequest> requests;
  for (auto id : plan.query_ids) {
    const auto& d = corpus.entries[id].definition;
    requests.push_back({gear::prompt_spec_for(c, corpus, plan.fewshot_pool, k, d), d});
  }
  std::vector<std::optional<std::string>> errors;
  const auto records = generator.generate_batch(requests, &errors);
  std::string out;
  std::size_t failed = 0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    nlohmann::json j{{"query_id", plan.query_ids[i]}, {"definition", requests[i].definition}};
    if (errors[i]) {
      ++failed;
      j["error"] = *errors[i];
    } else {
      j["cache_key"] = records[i].cache_key;
      j["raw"] = records[i].raw_response;
      j["candidates"] = records[i].candidates.candidates;
      j["degraded"] = records[i].candidates.degraded;
    }
    out += j.dump() + "\n";
  }
  const auto path = fs::path(c.out_dir) / "generations.jsonl";
  gear::write_text(path, out);
  const auto st = generator.stats();
  std::printf("%zu definitions: %zu cache hits, %zu requests, %zu retries, %zu degraded, %zu failed -> %s\n",
              records.size(), st.cache_hits, st.transport_calls, st.retries, st.degraded, failed,
              path.string().c_str());
  return 0;
}

int cmd_run(const gear::RunConfig& c) {
  const auto outcome = gear::execute(c);
  const auto files = gear::write_outputs(c, outcome);
  for (std::size_t i = 0; i < outcome.reports.size(); ++i) {
    if (outcome.reports.size() > 1) std::printf("m = %d\n", outcome.reports[i].m);
    std::fputs(gear::report_table(outcome.reports[i].report).c_str(), stdout);
    std::printf("wrote %s\n", files.reports[i].string().c_str());
  }
  std::fprintf(stderr, "generation: %zu requests, %zu cache hits; embedding: %zu calls, %zu texts\n",
               outcome.stats.generation_calls, outcome.stats.generation_cache_hits, outcome.stats.embedding_calls,
               outcome.stats.embedding_texts);
  return 0;
}

int cmd_eval(const std::string& trace_path, const RunOverrides& o, const std::string& metrics, const std::string& out) {
  auto trace = gear::read_trace(trace_path);
  gear::MetricOptions opt;
  if (!o.k_list.empty()) opt.p_at = opt.acc_at = parse_int_list(o.k_list);
  if (!o.p_at.empty()) opt.p_at = parse_int_list(o.p_at);
  if (!o.acc_at.empty()) opt.acc_at = parse_int_list(o.acc_at);
  opt.rank_metrics = trace.mode != gear::Mode::llm_only;
  opt.spread = o.rank_spread == "variance" ? gear::RankSpread::variance : gear::RankSpread::std_dev;
  if (!metrics.empty()) {
    const auto want = gear::text::split(metrics, ',');
    auto has = [&](const char* m) { return std::find(want.begin(), want.end(), m) != want.end(); };
    if (!has("p_at")) opt.p_at.clear();
    if (!has("acc_at")) opt.acc_at.clear();
    if (!has("rank")) opt.rank_metrics = false;
  }
  for (int k : opt.p_at)
    for (const auto& r : trace.results)
      if (trace.mode != gear::Mode::llm_only && !r.top_k_terms.empty() && r.relevance.size() < static_cast<std::size_t>(k))
        throw gear::ConfigError("trace keeps " + std::to_string(r.relevance.size()) + " ranked terms; P@" +
                                std::to_string(k) + " needs more");
  gear::EvalReport report;
  report.config = {{"mode", gear::to_string(trace.mode)}, {"m", trace.m}, {"trace", trace_path}};
  report.provenance = nlohmann::json::object();
  report.options = opt;
  report.aggregate = gear::compute_metrics(trace.results, opt);
  if (o.per_source.value_or(true)) {
    std::map<std::string, std::vector<gear::QueryResult>> by_source;
    for (const auto& r : trace.results)
      for (const auto& s : r.sources) by_source[s].push_back(r);
    for (const auto& [s, rs] : by_source) report.per_source[s] = gear::compute_metrics(rs, opt);
  }
  std::fputs(gear::report_table(report).c_str(), stdout);
  if (!out.empty()) gear::write_text(out, gear::report_jsonl(report));
  return 0;
}

int cmd_report(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw gear::ConfigError("cannot open report " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  std::fputs(gear::report_table(gear::parse_report_jsonl(ss.str())).c_str(), stdout);
  return 0;
}

int cmd_query(const gear::RunConfig& c, const std::string& definition, int k, const std::string& index_dir) {
  if (k < 1) throw gear::ConfigError("-k must be >= 1");
  const auto index = gear::VectorIndex::load(index_dir_of(c, index_dir));
  const auto res = gear::lookup(c, index, definition, static_cast<std::size_t>(k));
  if (!res.candidates.empty())
    std::printf("candidates: %s%s\n", gear::text::join(res.candidates, ", ").c_str(),
                res.degraded ? " (degraded)" : "");
  for (std::size_t i = 0; i < res.terms.size(); ++i)
    std::printf("%2zu  %-30s %.6f\n", i + 1, res.terms[i].c_str(), res.scores[i]);
  return 0;
}

int cmd_bench(const gear::BenchOptions& opt) {
  const auto r = gear::run_benchmark(opt);
  const bool single_ok = r.single_query_ms <= 250.0;
  const bool scale_ok = r.speedup >= 5.0;
  std::printf("hardware threads: %u\n", r.hardware_threads);
  std::printf("index: %zu terms x %zu dims (built in %.1f ms)\n", opt.terms, opt.dimension, r.build_ms);
  std::printf("single query, 1 thread: %.2f ms (target <= 250 ms) %s\n", r.single_query_ms,
              single_ok ? "PASS" : "FAIL");
  std::printf("batch of %zu queries: %.1f ms on 1 thread, %.1f ms on %d threads, speedup %.2fx (target >= 5x) %s\n",
              opt.batch, r.batch_ms_1, r.batch_ms_n, opt.threads, r.speedup, scale_ok ? "PASS" : "FAIL");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gear: generate, embed, average, rank"};
  app.require_subcommand(1);

  std::string config_path, index_dir;
  RunOverrides ov;

  auto* ingest = app.add_subcommand("ingest", "Normalize a dictionary file into the canonical corpus format");
  std::string in_path, format = "jsonl", out_path, name, description;
  ingest->add_option("input", in_path, "Input file")->required();
  ingest->add_option("--format", format, "jsonl, csv or tsv")
      ->check(CLI::IsMember({"jsonl", "csv", "tsv"}));
  ingest->add_option("--out,-o", out_path, "Canonical corpus output")->required();
  ingest->add_option("--name", name, "Dictionary name (default: file stem)");
  ingest->add_option("--description", description, "Dictionary description");

  auto* split = app.add_subcommand("split", "Write the configured split");
  std::string split_out;
  split->add_option("--config,-c", config_path, "Run config")->required();
  split->add_option("--out,-o", split_out, "Output file (default: <out-dir>/split.json)");
  add_override_flags(split, ov);

  auto* build = app.add_subcommand("build-index", "Embed the vocabulary and save the index");
  build->add_option("--config,-c", config_path, "Run config")->required();
  build->add_option("--index-dir", index_dir, "Index directory (default: <out-dir>/index)");
  add_override_flags(build, ov);

  auto* generate = app.add_subcommand("generate", "Generate candidates for the evaluation set");
  generate->add_option("--config,-c", config_path, "Run config")->required();
  add_override_flags(generate, ov);

  auto* run = app.add_subcommand("run", "Run an evaluation end to end");
  run->add_option("--config,-c", config_path, "Run config")->required();
  add_override_flags(run, ov);

  auto* eval = app.add_subcommand("eval", "Recompute metrics from a trace file");
  std::string trace_path, metrics, eval_out;
  eval->add_option("trace", trace_path, "trace.jsonl from a run")->required();
  eval->add_option("--metrics", metrics, "Subset of p_at,acc_at,rank (MRR is always reported)");
  eval->add_option("--k-list", ov.k_list, "Cutoffs for both P@k and acc@k");
  eval->add_option("--p-at", ov.p_at, "P@k cutoffs");
  eval->add_option("--acc-at", ov.acc_at, "acc@k cutoffs");
  eval->add_option("--per-source", ov.per_source, "Per-source breakdown (true/false)");
  eval->add_option("--rank-spread", ov.rank_spread, "std or variance")->check(CLI::IsMember({"std", "variance"}));
  eval->add_option("--out,-o", eval_out, "Write the report here as well");

  auto* report = app.add_subcommand("report", "Print a report file as a table");
  std::string report_path;
  report->add_option("report", report_path, "report.jsonl")->required();

  auto* query = app.add_subcommand("query", "Look up terms for one definition");
  std::string definition;
  int k = 10;
  query->add_option("--config,-c", config_path, "Run config")->required();
  query->add_option("definition", definition, "Definition text")->required();
  query->add_option("-k", k, "Number of terms")->check(CLI::PositiveNumber);
  query->add_option("--index-dir", index_dir, "Index directory (default: <out-dir>/index)");
  add_override_flags(query, ov);

  auto* bench = app.add_subcommand("bench", "Time exact KNN on a synthetic index");
  gear::BenchOptions bopt;
  bench->add_option("--terms", bopt.terms, "Index rows");
  bench->add_option("--dim", bopt.dimension, "Dimension");
  bench->add_option("--batch", bopt.batch, "Queries in the scaling batch");
  bench->add_option("--threads", bopt.threads, "Threads for the scaling batch");
  bench->add_option("--repeats", bopt.repeats, "Single-query repetitions");
  bench->add_option("--seed", bopt.seed, "Seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*ingest) return cmd_ingest(in_path, format, out_path, name, description);
    if (*split) return cmd_split(load_config(config_path, ov), split_out);
    if (*build) return cmd_build_index(load_config(config_path, ov), index_dir);
    if (*generate) return cmd_generate(load_config(config_path, ov));
    if (*run) return cmd_run(load_config(config_path, ov));
    if (*eval) return cmd_eval(trace_path, ov, metrics, eval_out);
    if (*report) return cmd_report(report_path);
    if (*query) return cmd_query(load_config(config_path, ov), definition, k, index_dir);
    if (*bench) return cmd_bench(bopt);
  } catch (const gear::ConfigError& e) {
    std::fprintf(stderr, "gear: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "gear: %s\n", e.what());
    return 1;
  }
  return 2;
}
