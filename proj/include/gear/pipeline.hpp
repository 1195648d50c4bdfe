#pragma once

// Run configuration and orchestration: split, index, generate, evaluate,
// and the files a run leaves behind.

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "gear/corpus.hpp"
#include "gear/embed.hpp"
#include "gear/error.hpp"
#include "gear/eval.hpp"
#include "gear/hash.hpp"
#include "gear/http.hpp"
#include "gear/index.hpp"
#include "gear/llmgen.hpp"
#include "gear/prompt.hpp"

namespace gear {

enum class Mode { embedding_only, llm_only, gear };

inline std::string_view to_string(Mode m) noexcept {
  switch (m) {
    case Mode::embedding_only: return "embedding_only";
    case Mode::llm_only: return "llm_only";
    case Mode::gear: return "gear";
  }
  return "gear";
}

inline Mode parse_mode(std::string_view s) {
  if (s == "embedding_only") return Mode::embedding_only;
  if (s == "llm_only") return Mode::llm_only;
  if (s == "gear") return Mode::gear;
  throw ConfigError("unknown mode '" + std::string(s) + "' (expected embedding_only, llm_only or gear)");
}

inline bool uses_generation(Mode m) noexcept { return m != Mode::embedding_only; }
inline bool uses_embedding(Mode m) noexcept { return m != Mode::llm_only; }

struct SplitConfig {
  /// "random" or "source".
  std::string kind = "random";
  std::uint64_t seed = 0;
  SplitRatios ratios;
  /// "train", "valid", "test" or "all".
  std::string eval_set = "test";
};

struct PromptConfig {
  PromptVariant variant = PromptVariant::bp1;
  int fewshot_n = 5;
  /// Defaults to the split seed.
  std::optional<std::uint64_t> fewshot_seed;
};

struct GenerationSettings {
  /// "mock" or "http".
  std::string provider = "mock";
  std::string endpoint;
  std::string model_id = "gpt-4o-mini";
  double temperature = 0.0;
  int max_retries = 3;
  int timeout_ms = 60'000;
  int concurrency_limit = 4;
  int retry_base_ms = 1'000;
  /// Mock only: a JSON file {definition: [terms]}, "gold" for the corpus'
  /// own terms, or empty for distractors only.
  std::string mock_table;
  std::uint64_t mock_noise_seed = 0;
};

struct EmbeddingSettings {
  std::string provider = "mock";
  std::string endpoint;
  std::string model_id = "mock-embed";
  std::size_t dimension = 64;
  std::uint64_t mock_seed = 0;
  std::size_t batch_size = 64;
  int concurrency = 1;
  int max_retries = 3;
  int timeout_ms = 60'000;
  std::string query_instruction = "none";
  std::string doc_instruction = "none";
  /// Mock only: each definition embeds to its first gold term's vector.
  bool plant_definitions_as_gold = false;
};

struct EvalSettings {
  std::vector<int> p_at{1, 3, 5};
  std::vector<int> acc_at{1, 5, 10, 100, 1000};
  bool per_source = true;
  /// "std" or "variance".
  std::string rank_spread = "std";
  std::size_t topk = 10;
  int threads = 1;
};

struct RunConfig {
  /// Corpus manifest path as written; resolved against base_dir.
  std::string corpus;
  std::filesystem::path base_dir;
  SplitConfig split;
  Mode mode = Mode::gear;
  PromptConfig prompt;
  int m = 5;
  /// When set, one generation of max(sweep_m) candidates is truncated to
  /// each listed m in turn.
  std::vector<int> sweep_m;
  Pooling pooling = Pooling::mean;
  bool normalize_before_pool = false;
  EmbedRole candidate_role = EmbedRole::document;
  std::optional<GenerationSettings> generation;
  std::optional<EmbeddingSettings> embedding;
  EvalSettings eval;
  /// Further corpus manifests whose terms join the ranked vocabulary.
  std::vector<std::string> extra_vocabulary;
  std::string cache_dir;
  std::string out_dir = "out";
  /// "auto" (on up to 10,000 queries), "on" or "off".
  std::string trace = "auto";

  std::filesystem::path resolve(const std::string& p) const {
    std::filesystem::path path(p);
    return path.is_relative() && !base_dir.empty() ? base_dir / path : path;
  }
};

// ---------------------------------------------------------------------------
// JSON form

namespace detail {

inline void check_keys(const nlohmann::json& j, std::string_view where, std::initializer_list<std::string_view> keys) {
  if (!j.is_object()) throw ConfigError(std::string(where) + " must be an object");
  for (const auto& [k, v] : j.items())
    if (std::find(keys.begin(), keys.end(), k) == keys.end())
      throw ConfigError("unknown key '" + k + "' in " + std::string(where));
}

template <class T>
void read(const nlohmann::json& j, const char* key, T& out, std::string_view where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("bad value for '" + std::string(key) + "' in " + std::string(where));
  }
}

}  // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& j, std::filesystem::path base_dir = {}) {
  using detail::read;
  detail::check_keys(j, "run config",
                     {"corpus", "split", "mode", "prompt", "m", "sweep_m", "pooling", "normalize_before_pool",
                      "candidate_role", "generation", "embedding", "eval", "extra_vocabulary", "cache_dir", "out_dir",
                      "trace"});
  RunConfig c;
  c.base_dir = std::move(base_dir);
  read(j, "corpus", c.corpus, "run config");
  if (j.contains("split")) {
    const auto& s = j["split"];
    detail::check_keys(s, "split", {"kind", "seed", "ratios", "eval_set"});
    read(s, "kind", c.split.kind, "split");
    read(s, "seed", c.split.seed, "split");
    read(s, "eval_set", c.split.eval_set, "split");
    if (s.contains("ratios")) {
      std::vector<double> r;
      read(s, "ratios", r, "split");
      if (r.size() != 3) throw ConfigError("split.ratios must list three fractions");
      c.split.ratios = {r[0], r[1], r[2]};
    }
  }
  if (j.contains("mode")) c.mode = parse_mode(j["mode"].get<std::string>());
  if (j.contains("prompt")) {
    const auto& p = j["prompt"];
    detail::check_keys(p, "prompt", {"variant", "fewshot_n", "fewshot_seed"});
    if (p.contains("variant")) c.prompt.variant = parse_prompt_variant(p["variant"].get<std::string>());
    read(p, "fewshot_n", c.prompt.fewshot_n, "prompt");
    if (p.contains("fewshot_seed") && !p["fewshot_seed"].is_null())
      c.prompt.fewshot_seed = p["fewshot_seed"].get<std::uint64_t>();
  }
  read(j, "m", c.m, "run config");
  read(j, "sweep_m", c.sweep_m, "run config");
  if (j.contains("pooling")) c.pooling = parse_pooling(j["pooling"].get<std::string>());
  read(j, "normalize_before_pool", c.normalize_before_pool, "run config");
  if (j.contains("candidate_role")) {
    const auto role = j["candidate_role"].get<std::string>();
    if (role == "document") c.candidate_role = EmbedRole::document;
    else if (role == "query") c.candidate_role = EmbedRole::query;
    else throw ConfigError("candidate_role must be 'document' or 'query'");
  }
  if (j.contains("generation") && !j["generation"].is_null()) {
    const auto& g = j["generation"];
    detail::check_keys(g, "generation",
                       {"provider", "endpoint", "model_id", "temperature", "max_retries", "timeout_ms",
                        "concurrency_limit", "retry_base_ms", "mock_table", "mock_noise_seed"});
    GenerationSettings s;
    read(g, "provider", s.provider, "generation");
    read(g, "endpoint", s.endpoint, "generation");
    read(g, "model_id", s.model_id, "generation");
    read(g, "temperature", s.temperature, "generation");
    read(g, "max_retries", s.max_retries, "generation");
    read(g, "timeout_ms", s.timeout_ms, "generation");
    read(g, "concurrency_limit", s.concurrency_limit, "generation");
    read(g, "retry_base_ms", s.retry_base_ms, "generation");
    read(g, "mock_table", s.mock_table, "generation");
    read(g, "mock_noise_seed", s.mock_noise_seed, "generation");
    c.generation = s;
  }
  if (j.contains("embedding") && !j["embedding"].is_null()) {
    const auto& e = j["embedding"];
    detail::check_keys(e, "embedding",
                       {"provider", "endpoint", "model_id", "dimension", "mock_seed", "batch_size", "concurrency",
                        "max_retries", "timeout_ms", "query_instruction", "doc_instruction",
                        "plant_definitions_as_gold"});
    EmbeddingSettings s;
    read(e, "provider", s.provider, "embedding");
    read(e, "endpoint", s.endpoint, "embedding");
    read(e, "model_id", s.model_id, "embedding");
    read(e, "dimension", s.dimension, "embedding");
    read(e, "mock_seed", s.mock_seed, "embedding");
    read(e, "batch_size", s.batch_size, "embedding");
    read(e, "concurrency", s.concurrency, "embedding");
    read(e, "max_retries", s.max_retries, "embedding");
    read(e, "timeout_ms", s.timeout_ms, "embedding");
    read(e, "query_instruction", s.query_instruction, "embedding");
    read(e, "doc_instruction", s.doc_instruction, "embedding");
    read(e, "plant_definitions_as_gold", s.plant_definitions_as_gold, "embedding");
    c.embedding = s;
  }
  if (j.contains("eval")) {
    const auto& e = j["eval"];
    detail::check_keys(e, "eval", {"p_at", "acc_at", "per_source", "rank_spread", "topk", "threads"});
    read(e, "p_at", c.eval.p_at, "eval");
    read(e, "acc_at", c.eval.acc_at, "eval");
    read(e, "per_source", c.eval.per_source, "eval");
    read(e, "rank_spread", c.eval.rank_spread, "eval");
    read(e, "topk", c.eval.topk, "eval");
    read(e, "threads", c.eval.threads, "eval");
  }
  read(j, "extra_vocabulary", c.extra_vocabulary, "run config");
  read(j, "cache_dir", c.cache_dir, "run config");
  read(j, "out_dir", c.out_dir, "run config");
  read(j, "trace", c.trace, "run config");
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open run config " + path.string());
  auto j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("run config " + path.string() + " is not valid JSON");
  return run_config_from_json(j, path.parent_path());
}

/// Resolved form embedded in reports. Output and cache locations are left
/// out: they do not change any number.
inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j{
      {"corpus", c.corpus},
      {"split",
       {{"kind", c.split.kind},
        {"seed", c.split.seed},
        {"ratios", {c.split.ratios.train, c.split.ratios.valid, c.split.ratios.test}},
        {"eval_set", c.split.eval_set}}},
      {"mode", to_string(c.mode)},
      {"prompt",
       {{"variant", to_string(c.prompt.variant)},
        {"fewshot_n", c.prompt.fewshot_n},
        {"fewshot_seed", c.prompt.fewshot_seed.value_or(c.split.seed)}}},
      {"m", c.m},
      {"sweep_m", c.sweep_m},
      {"pooling", to_string(c.pooling)},
      {"normalize_before_pool", c.normalize_before_pool},
      {"candidate_role", c.candidate_role == EmbedRole::document ? "document" : "query"},
      {"eval",
       {{"p_at", c.eval.p_at},
        {"acc_at", c.eval.acc_at},
        {"per_source", c.eval.per_source},
        {"rank_spread", c.eval.rank_spread},
        {"topk", c.eval.topk},
        {"threads", c.eval.threads}}},
      {"extra_vocabulary", c.extra_vocabulary},
      {"trace", c.trace}};
  if (c.generation) {
    const auto& g = *c.generation;
    j["generation"] = {{"provider", g.provider},
                       {"endpoint", g.endpoint},
                       {"model_id", g.model_id},
                       {"temperature", g.temperature},
                       {"max_retries", g.max_retries},
                       {"timeout_ms", g.timeout_ms},
                       {"concurrency_limit", g.concurrency_limit},
                       {"retry_base_ms", g.retry_base_ms},
                       {"mock_table", g.mock_table},
                       {"mock_noise_seed", g.mock_noise_seed}};
  }
  if (c.embedding) {
    const auto& e = *c.embedding;
    j["embedding"] = {{"provider", e.provider},
                      {"endpoint", e.endpoint},
                      {"model_id", e.model_id},
                      {"dimension", e.dimension},
                      {"mock_seed", e.mock_seed},
                      {"batch_size", e.batch_size},
                      {"concurrency", e.concurrency},
                      {"max_retries", e.max_retries},
                      {"timeout_ms", e.timeout_ms},
                      {"query_instruction", e.query_instruction},
                      {"doc_instruction", e.doc_instruction},
                      {"plant_definitions_as_gold", e.plant_definitions_as_gold}};
  }
  return j;
}

/// Everything checkable without touching a provider. Mode requirements come
/// first so a mismatched config fails before any request is made.
inline void validate(const RunConfig& c) {
  if (uses_generation(c.mode) && !c.generation)
    throw ConfigError(std::string("mode ") + std::string(to_string(c.mode)) + " needs a 'generation' section");
  if (uses_embedding(c.mode) && !c.embedding)
    throw ConfigError(std::string("mode ") + std::string(to_string(c.mode)) + " needs an 'embedding' section");
  if (c.corpus.empty()) throw ConfigError("run config names no corpus manifest");
  if (c.split.kind != "random" && c.split.kind != "source")
    throw ConfigError("split.kind must be 'random' or 'source'");
  if (c.split.eval_set != "train" && c.split.eval_set != "valid" && c.split.eval_set != "test" &&
      c.split.eval_set != "all")
    throw ConfigError("split.eval_set must be train, valid, test or all");
  validate(c.split.ratios);
  if (c.m < 1) throw ConfigError("m must be >= 1");
  for (int m : c.sweep_m)
    if (m < 1) throw ConfigError("sweep_m values must be >= 1");
  if (c.prompt.variant != PromptVariant::bp1 && c.prompt.fewshot_n < 1)
    throw ConfigError("prompt.fewshot_n must be >= 1 for bp2 and rp");
  for (int k : c.eval.p_at)
    if (k < 1) throw ConfigError("eval.p_at values must be >= 1");
  for (int k : c.eval.acc_at)
    if (k < 1) throw ConfigError("eval.acc_at values must be >= 1");
  if (c.eval.topk < 1) throw ConfigError("eval.topk must be >= 1");
  if (c.eval.threads < 1) throw ConfigError("eval.threads must be >= 1");
  if (c.eval.rank_spread != "std" && c.eval.rank_spread != "variance")
    throw ConfigError("eval.rank_spread must be 'std' or 'variance'");
  if (c.trace != "auto" && c.trace != "on" && c.trace != "off") throw ConfigError("trace must be auto, on or off");
  if (c.generation) {
    const auto& g = *c.generation;
    if (g.provider != "mock" && g.provider != "http") throw ConfigError("generation.provider must be mock or http");
    if (g.provider == "http" && g.endpoint.empty()) throw ConfigError("generation.endpoint is required for http");
    if (g.max_retries < 0) throw ConfigError("generation.max_retries must be >= 0");
    if (g.concurrency_limit < 1) throw ConfigError("generation.concurrency_limit must be >= 1");
  }
  if (c.embedding) {
    const auto& e = *c.embedding;
    if (e.provider != "mock" && e.provider != "http") throw ConfigError("embedding.provider must be mock or http");
    if (e.provider == "http" && e.endpoint.empty()) throw ConfigError("embedding.endpoint is required for http");
    if (e.dimension == 0) throw ConfigError("embedding.dimension must be > 0");
    if (e.batch_size == 0) throw ConfigError("embedding.batch_size must be > 0");
    parse_instruction_variant(e.query_instruction);
    parse_instruction_variant(e.doc_instruction);
    if (e.plant_definitions_as_gold && e.provider != "mock")
      throw ConfigError("plant_definitions_as_gold needs the mock embedding provider");
  }
}

inline InstructionConfig instruction_of(const EmbeddingSettings& e) {
  return InstructionConfig::combine(parse_instruction_variant(e.query_instruction),
                                    parse_instruction_variant(e.doc_instruction));
}

inline std::filesystem::path cache_root(const RunConfig& c) {
  if (!c.cache_dir.empty()) return c.cache_dir;
  if (const char* env = std::getenv("GEAR_CACHE_DIR"); env && *env) return env;
  return std::filesystem::path(c.out_dir) / "cache";
}

inline std::string env_or_empty(const char* name) {
  const char* v = std::getenv(name);
  return v ? v : "";
}

/// Model ids become directory names.
inline std::string path_safe(std::string_view s) {
  std::string out;
  for (char ch : s) out.push_back(std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '.' ? ch : '_');
  return out.empty() ? "_" : out;
}

// ---------------------------------------------------------------------------
// Providers

/// Forwards to another provider, counting calls and texts.
class CountingEmbeddingProvider : public EmbeddingProvider {
 public:
  explicit CountingEmbeddingProvider(EmbeddingProvider& inner) : inner_(inner) {}
  const std::string& model_id() const override { return inner_.model_id(); }
  std::size_t dimension() const override { return inner_.dimension(); }
  Matrix embed(std::span<const std::string> inputs) override {
    ++calls_;
    texts_ += inputs.size();
    return inner_.embed(inputs);
  }
  std::size_t calls() const noexcept { return calls_.load(); }
  std::size_t texts() const noexcept { return texts_.load(); }

 private:
  EmbeddingProvider& inner_;
  std::atomic<std::size_t> calls_{0};
  std::atomic<std::size_t> texts_{0};
};

class CountingChatTransport : public ChatTransport {
 public:
  explicit CountingChatTransport(ChatTransport& inner) : inner_(inner) {}
  std::string complete(const ChatRequest& r) override {
    ++calls_;
    return inner_.complete(r);
  }
  std::size_t calls() const noexcept { return calls_.load(); }

 private:
  ChatTransport& inner_;
  std::atomic<std::size_t> calls_{0};
};

inline MockGenerator::Table load_mock_table(const RunConfig& c, const Corpus& corpus) {
  MockGenerator::Table table;
  const auto& spec = c.generation->mock_table;
  if (spec.empty()) return table;
  if (spec == "gold") {
    for (const auto& e : corpus.entries) table[e.definition] = e.terms;
    return table;
  }
  const auto path = c.resolve(spec);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open mock table " + path.string());
  auto j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw ConfigError("mock table " + path.string() + " must be a JSON object");
  for (const auto& [d, terms] : j.items()) table[d] = terms.get<std::vector<std::string>>();
  return table;
}

/// Owns the transports and providers a run uses. Tests may inject their
/// own; otherwise they are built from the config.
struct Providers {
  std::unique_ptr<ChatTransport> owned_transport;
  std::unique_ptr<EmbeddingProvider> owned_embedder;
  ChatTransport* transport = nullptr;
  EmbeddingProvider* embedder = nullptr;
};

inline Providers make_providers(const RunConfig& c, const Corpus& corpus) {
  Providers p;
  if (uses_generation(c.mode)) {
    const auto& g = *c.generation;
    if (g.provider == "mock") {
      p.owned_transport =
          std::make_unique<MockChatTransport>(MockGenerator(load_mock_table(c, corpus), g.mock_noise_seed));
    } else {
      p.owned_transport = std::make_unique<HttpChatTransport>(g.endpoint, env_or_empty("GEAR_API_KEY"),
                                                              std::chrono::milliseconds(g.timeout_ms));
    }
    p.transport = p.owned_transport.get();
  }
  if (uses_embedding(c.mode)) {
    const auto& e = *c.embedding;
    if (e.provider == "mock") {
      auto mock = std::make_unique<MockEmbeddingProvider>(e.mock_seed, e.dimension, e.model_id);
      if (e.plant_definitions_as_gold) {
        const auto ins = instruction_of(e);
        for (const auto& entry : corpus.entries)
          mock->plant(ins.query_prefix + entry.definition,
                      mock_embed(e.mock_seed, entry.terms.front(), ins.doc_prefix, e.dimension));
      }
      p.owned_embedder = std::move(mock);
    } else {
      p.owned_embedder = std::make_unique<HttpEmbeddingProvider>(
          e.endpoint, e.model_id, e.dimension, env_or_empty("GEAR_EMBED_API_KEY"), e.max_retries,
          std::chrono::milliseconds(e.timeout_ms));
    }
    p.embedder = p.owned_embedder.get();
  }
  return p;
}

// ---------------------------------------------------------------------------
// Run

/// Which entries are evaluated, which may serve as few-shot exemplars, and
/// the per-source query sets for the breakdown.
struct EvalPlan {
  std::vector<std::size_t> query_ids;
  std::vector<std::size_t> fewshot_pool;
  std::map<std::string, std::vector<std::size_t>> per_source;
};

namespace detail {

inline const std::vector<std::size_t>& part_of(const CorpusSplit& s, const std::string& set) {
  if (set == "train") return s.train;
  if (set == "valid") return s.valid;
  return s.test;
}

inline std::vector<std::size_t> sorted_union(std::vector<std::size_t> v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

}  // namespace detail

inline EvalPlan plan_evaluation(const Corpus& corpus, const RunConfig& c) {
  EvalPlan plan;
  std::vector<std::size_t> all(corpus.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;

  if (c.split.kind == "random") {
    if (c.split.eval_set == "all") {
      plan.query_ids = all;
      plan.fewshot_pool = all;
    } else {
      const auto split = random_split(corpus, c.split.seed, c.split.ratios);
      plan.query_ids = detail::part_of(split, c.split.eval_set);
      plan.fewshot_pool = split.train;
    }
    for (auto id : plan.query_ids)
      for (const auto& l : corpus.entries[id].source_labels()) plan.per_source[l].push_back(id);
  } else {
    const auto splits = source_split(corpus, c.split.seed, c.split.ratios);
    std::vector<std::size_t> queries, pool;
    for (const auto& [label, s] : splits) {
      if (c.split.eval_set == "all") {
        std::vector<std::size_t> members = s.train;
        members.insert(members.end(), s.valid.begin(), s.valid.end());
        members.insert(members.end(), s.test.begin(), s.test.end());
        plan.per_source[label] = detail::sorted_union(std::move(members));
      } else {
        plan.per_source[label] = detail::part_of(s, c.split.eval_set);
      }
      queries.insert(queries.end(), plan.per_source[label].begin(), plan.per_source[label].end());
      pool.insert(pool.end(), s.train.begin(), s.train.end());
    }
    plan.query_ids = detail::sorted_union(std::move(queries));
    plan.fewshot_pool = c.split.eval_set == "all" ? all : detail::sorted_union(std::move(pool));
  }
  if (plan.query_ids.empty()) throw ConfigError("the configured evaluation set is empty");
  return plan;
}

inline PromptSpec prompt_spec_for(const RunConfig& c, const Corpus& corpus, std::span<const std::size_t> pool,
                                  int k, std::string_view definition) {
  PromptSpec spec;
  spec.variant = c.prompt.variant;
  spec.k = k;
  spec.dictionary_name = corpus.name;
  spec.dictionary_description = corpus.description;
  if (spec.variant != PromptVariant::bp1)
    spec.fewshot = sample_fewshot(corpus, pool, c.prompt.fewshot_n, c.prompt.fewshot_seed.value_or(c.split.seed),
                                  definition);
  return spec;
}

struct RunStats {
  std::size_t generation_calls = 0;
  std::size_t generation_cache_hits = 0;
  std::size_t embedding_calls = 0;
  std::size_t embedding_texts = 0;
};

struct MReport {
  int m = 0;
  EvalReport report;
  std::vector<QueryResult> results;
};

struct RunOutcome {
  std::vector<MReport> reports;
  RunStats stats;
};

template <class F>
void parallel_for(std::size_t n, int threads, F&& f) {
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) f(i);
  };
  const auto t = std::min<std::size_t>(static_cast<std::size_t>(std::max(1, threads)), n);
  std::vector<std::jthread> pool;
  for (std::size_t w = 1; w < t; ++w) pool.emplace_back(worker);
  worker();
}

namespace detail {

inline void fill_ranking(QueryResult& r, const VectorIndex& index, std::span<const float> query, std::size_t list_len) {
  const auto scores = score_all(index, query);
  const auto top = top_k_from_scores(scores, list_len);
  for (std::size_t i = 0; i < top.term_ids.size(); ++i) {
    r.top_k_terms.push_back(index.vocabulary().term(top.term_ids[i]));
    r.top_k_scores.push_back(top.scores[i]);
  }
  r.relevance = relevance_flags(r.top_k_terms, r.gold_terms);
  const auto gold = gold_ids(index.vocabulary(), r.gold_terms);
  if (gold.empty()) r.missing_gold = true;
  else r.best_rank = rank_from_scores(scores, gold);
}

inline void digest_floats(Sha256& h, std::span<const float> v) {
  std::ostringstream ss;
  write_f32le(ss, v);
  h.update(ss.str());
}

}  // namespace detail

/// The whole run in memory: nothing is written except cache updates.
inline RunOutcome execute(const RunConfig& c, Providers* injected = nullptr) {
  validate(c);
  const auto manifest = load_manifest(c.resolve(c.corpus));
  const Corpus corpus = load_corpus(manifest);
  const auto plan = plan_evaluation(corpus, c);

  std::vector<int> ms = c.sweep_m.empty() ? std::vector<int>{c.m} : c.sweep_m;
  const int k_generate = *std::max_element(ms.begin(), ms.end());

  if (uses_generation(c.mode)) {
    if (text::trim_view(corpus.description).empty())
      throw ConfigError("corpus '" + corpus.name + "' has no description; prompts need one");
    if (c.prompt.variant != PromptVariant::bp1 && plan.fewshot_pool.size() < static_cast<std::size_t>(c.prompt.fewshot_n) + 1)
      throw ConfigError("few-shot pool has " + std::to_string(plan.fewshot_pool.size()) + " entries; " +
                        std::to_string(c.prompt.fewshot_n) + " exemplars per prompt need at least " +
                        std::to_string(c.prompt.fewshot_n + 1));
  }

  Providers built;
  Providers& prov = injected ? *injected : built;
  if (!injected) built = make_providers(c, corpus);
  const auto root = cache_root(c);
  RunStats stats;

  // Vocabulary and index.
  std::optional<VectorIndex> index;
  std::optional<EmbeddingCache> emb_cache;
  std::optional<CountingEmbeddingProvider> embedder;
  InstructionConfig instruction;
  EmbedOptions emb_options;
  std::filesystem::path emb_dir;
  if (uses_embedding(c.mode)) {
    if (!prov.embedder) throw ConfigError("no embedding provider configured");
    embedder.emplace(*prov.embedder);
    instruction = instruction_of(*c.embedding);
    emb_options = {c.embedding->batch_size, c.embedding->concurrency};
    emb_dir = root / "embeddings" / path_safe(embedder->model_id());
    if (std::filesystem::exists(emb_dir / "manifest.json")) emb_cache = EmbeddingCache::load(emb_dir);
    else emb_cache.emplace(embedder->model_id(), embedder->dimension());

    std::vector<Corpus> corpora{corpus};
    for (const auto& extra : c.extra_vocabulary) corpora.push_back(load_corpus(load_manifest(c.resolve(extra))));
    auto vocab = corpora.size() == 1 ? vocabulary(corpus) : merged_vocabulary(corpora);
    index = VectorIndex::build(vocab, *embedder, instruction, &*emb_cache, emb_options);
  }

  // Generation.
  std::vector<GenerationRecord> generations;
  std::vector<std::optional<std::string>> gen_errors;
  if (uses_generation(c.mode)) {
    if (!prov.transport) throw ConfigError("no generation transport configured");
    CountingChatTransport transport(*prov.transport);
    const auto& g = *c.generation;
    GenerationConfig gc;
    gc.endpoint = g.endpoint;
    gc.model_id = g.model_id;
    gc.temperature = g.temperature;
    gc.max_retries = g.max_retries;
    gc.timeout = std::chrono::milliseconds(g.timeout_ms);
    gc.concurrency_limit = g.concurrency_limit;
    gc.retry_base = std::chrono::milliseconds(g.retry_base_ms);
    GenerationCache gen_cache(root / "generations");
    Generator generator(gc, transport, &gen_cache);
    std::vector<GenerationRequest> requests;
    for (auto id : plan.query_ids) {
      const auto& d = corpus.entries[id].definition;
      requests.push_back({prompt_spec_for(c, corpus, plan.fewshot_pool, k_generate, d), d});
    }
    generations = generator.generate_batch(requests, &gen_errors);
    stats.generation_calls = transport.calls();
    stats.generation_cache_hits = generator.stats().cache_hits;
  }

  const std::size_t max_p = c.eval.p_at.empty() ? 0 : static_cast<std::size_t>(*std::max_element(c.eval.p_at.begin(), c.eval.p_at.end()));
  const std::size_t list_len = std::max(c.eval.topk, max_p);

  // Definition embeddings are shared by every m.
  Matrix definition_rows;
  if (c.mode == Mode::embedding_only) {
    std::vector<std::string> defs;
    for (auto id : plan.query_ids) defs.push_back(corpus.entries[id].definition);
    definition_rows = embed_texts(*embedder, defs, EmbedRole::query, instruction, &*emb_cache, emb_options);
  }

  // Candidate embeddings, also shared by every m (truncation only drops rows).
  std::map<std::string, EmbeddingVector> candidate_vectors;
  std::vector<std::string> candidate_errors(plan.query_ids.size());
  if (c.mode == Mode::gear) {
    auto embed_all = [&](const std::vector<std::string>& texts) {
      const auto rows = embed_texts(*embedder, texts, c.candidate_role, instruction, &*emb_cache, emb_options);
      for (std::size_t i = 0; i < texts.size(); ++i) {
        auto r = rows.row(i);
        candidate_vectors.emplace(texts[i], EmbeddingVector(r.begin(), r.end()));
      }
    };
    std::vector<std::string> unique;
    {
      std::set<std::string> seen;
      for (std::size_t q = 0; q < generations.size(); ++q) {
        if (gen_errors[q]) continue;
        for (const auto& t : generations[q].candidates.candidates)
          if (seen.insert(t).second) unique.push_back(t);
      }
    }
    if (!unique.empty()) {
      try {
        embed_all(unique);
      } catch (const EmbeddingError&) {
        // Retry query by query so one bad batch costs only its own queries.
        for (std::size_t q = 0; q < generations.size(); ++q) {
          if (gen_errors[q]) continue;
          std::vector<std::string> mine;
          for (const auto& t : generations[q].candidates.candidates)
            if (!candidate_vectors.count(t)) mine.push_back(t);
          if (mine.empty()) continue;
          try {
            embed_all(mine);
          } catch (const EmbeddingError& e) {
            candidate_errors[q] = e.what();
          }
        }
      }
    }
  }

  const auto spread = c.eval.rank_spread == "variance" ? RankSpread::variance : RankSpread::std_dev;
  RunOutcome outcome;
  for (int m : ms) {
    std::vector<QueryResult> results(plan.query_ids.size());
    std::vector<EmbeddingVector> query_vectors(plan.query_ids.size());
    parallel_for(plan.query_ids.size(), c.eval.threads, [&](std::size_t q) {
      const auto id = plan.query_ids[q];
      const auto& entry = corpus.entries[id];
      QueryResult& r = results[q];
      r.query_id = id;
      r.definition = entry.definition;
      r.gold_terms = entry.terms;
      r.sources = entry.source_labels();

      if (c.mode == Mode::embedding_only) {
        auto row = definition_rows.row(q);
        query_vectors[q].assign(row.begin(), row.end());
        detail::fill_ranking(r, *index, row, list_len);
        return;
      }

      if (gen_errors[q]) {
        r.degraded = true;
        r.error = *gen_errors[q];
        r.relevance.clear();
        if (c.mode == Mode::gear) {
          if (gold_ids(index->vocabulary(), r.gold_terms).empty()) r.missing_gold = true;
          else r.best_rank = index->size();
        }
        return;
      }
      const auto& cs = generations[q].candidates;
      r.degraded = cs.degraded;
      const auto take = std::min(cs.candidates.size(), static_cast<std::size_t>(m));
      r.candidates.assign(cs.candidates.begin(), cs.candidates.begin() + static_cast<std::ptrdiff_t>(take));

      if (c.mode == Mode::llm_only) {
        r.top_k_terms = r.candidates;
        r.relevance = relevance_flags(r.top_k_terms, r.gold_terms);
        for (std::size_t i = 0; i < r.relevance.size(); ++i)
          if (r.relevance[i]) {
            r.best_rank = i;
            break;
          }
        return;
      }

      if (!candidate_errors[q].empty() || r.candidates.empty()) {
        r.degraded = true;
        r.error = r.candidates.empty() ? "no candidates" : candidate_errors[q];
        if (gold_ids(index->vocabulary(), r.gold_terms).empty()) r.missing_gold = true;
        else r.best_rank = index->size();
        return;
      }
      Matrix rows;
      for (const auto& t : r.candidates) rows.append_row(candidate_vectors.at(t));
      auto pooled = pool(rows, c.pooling, c.normalize_before_pool);
      query_vectors[q] = pooled.vector;
      try {
        detail::fill_ranking(r, *index, pooled.vector, list_len);
      } catch (const Error& e) {
        // A pooled vector can cancel to zero.
        r.degraded = true;
        r.error = e.what();
        r.top_k_terms.clear();
        r.top_k_scores.clear();
        r.relevance.clear();
        if (gold_ids(index->vocabulary(), r.gold_terms).empty()) r.missing_gold = true;
        else r.best_rank = index->size();
      }
    });

    MetricOptions options;
    options.p_at = c.eval.p_at;
    options.acc_at = c.eval.acc_at;
    options.rank_metrics = c.mode != Mode::llm_only;
    options.spread = spread;

    EvalReport report;
    RunConfig with_m = c;
    with_m.m = m;
    report.config = to_json(with_m);
    report.options = options;
    report.aggregate = compute_metrics(results, options);
    if (c.eval.per_source) {
      for (const auto& [label, ids] : plan.per_source) {
        std::vector<QueryResult> subset;
        for (const auto& r : results)
          if (std::binary_search(ids.begin(), ids.end(), r.query_id)) subset.push_back(r);
        if (!subset.empty()) report.per_source[label] = compute_metrics(subset, options);
      }
    }

    Sha256 corpus_h;
    for (const auto& e : corpus.entries) corpus_h.update(to_record(e).dump()).update("\n", 1);
    nlohmann::json prov_j{{"corpus_sha256", corpus_h.hex()},
                          {"entries", corpus.size()},
                          {"queries", results.size()}};
    if (index) {
      prov_j["vocabulary_size"] = index->size();
      prov_j["index_sha256"] = detail::f32le_digest(index->matrix().data());
      Sha256 qh;
      for (const auto& v : query_vectors) detail::digest_floats(qh, v);
      prov_j["query_vectors_sha256"] = qh.hex();
    }
    if (uses_generation(c.mode)) {
      Sha256 gh;
      for (std::size_t q = 0; q < generations.size(); ++q) {
        if (gen_errors[q]) gh.update("!error\n");
        else gh.update(generations[q].cache_key).update("\n", 1).update(generations[q].raw_response).update("\n", 1);
      }
      prov_j["generations_sha256"] = gh.hex();
    }
    report.provenance = std::move(prov_j);
    outcome.reports.push_back({m, std::move(report), std::move(results)});
  }

  if (embedder) {
    stats.embedding_calls = embedder->calls();
    stats.embedding_texts = embedder->texts();
    emb_cache->save(emb_dir);
  }
  outcome.stats = stats;
  return outcome;
}

// ---------------------------------------------------------------------------
// Trace

inline nlohmann::json trace_record(const QueryResult& r) {
  nlohmann::json j{{"query_id", r.query_id},
                   {"definition", r.definition},
                   {"gold", r.gold_terms},
                   {"sources", r.sources},
                   {"candidates", r.candidates},
                   {"degraded", r.degraded},
                   {"missing_gold", r.missing_gold},
                   {"best_rank", r.best_rank ? nlohmann::json(*r.best_rank) : nlohmann::json(nullptr)},
                   {"top_k_terms", r.top_k_terms},
                   {"top_k_scores", r.top_k_scores},
                   {"relevance", r.relevance}};
  if (!r.error.empty()) j["error"] = r.error;
  return j;
}

inline QueryResult query_result_from_trace(const nlohmann::json& j) {
  QueryResult r;
  r.query_id = j.at("query_id").get<std::size_t>();
  r.definition = j.at("definition").get<std::string>();
  r.gold_terms = j.at("gold").get<std::vector<std::string>>();
  r.sources = j.value("sources", std::vector<std::string>{});
  r.candidates = j.value("candidates", std::vector<std::string>{});
  r.degraded = j.value("degraded", false);
  r.missing_gold = j.value("missing_gold", false);
  if (j.contains("best_rank") && !j["best_rank"].is_null()) r.best_rank = j["best_rank"].get<std::size_t>();
  r.top_k_terms = j.value("top_k_terms", std::vector<std::string>{});
  r.top_k_scores = j.value("top_k_scores", std::vector<double>{});
  r.relevance = j.value("relevance", std::vector<bool>{});
  r.error = j.value("error", std::string{});
  return r;
}

inline std::string trace_jsonl(const RunConfig& c, int m, std::span<const QueryResult> results) {
  std::string out = nlohmann::json{{"record", "header"}, {"mode", to_string(c.mode)}, {"m", m}}.dump() + "\n";
  for (const auto& r : results) out += trace_record(r).dump() + "\n";
  return out;
}

struct TraceFile {
  Mode mode = Mode::gear;
  int m = 0;
  std::vector<QueryResult> results;
};

inline TraceFile read_trace(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open trace " + path.string());
  TraceFile t;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (text::trim_view(line).empty()) continue;
    auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) throw CorpusError("malformed trace record", n);
    if (j.value("record", std::string{}) == "header") {
      t.mode = parse_mode(j.value("mode", std::string{"gear"}));
      t.m = j.value("m", 0);
      continue;
    }
    try {
      t.results.push_back(query_result_from_trace(j));
    } catch (const nlohmann::json::exception& e) {
      throw CorpusError(std::string("bad trace record: ") + e.what(), n);
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// Files

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << s;
  if (!out) throw Error("cannot write " + p.string());
}

struct RunFiles {
  std::vector<std::filesystem::path> reports;
  std::vector<std::filesystem::path> tables;
  std::vector<std::filesystem::path> traces;
};

/// Writes report.jsonl / report.txt / trace.jsonl under out_dir, with an
/// `_m{m}` suffix per sweep point.
inline RunFiles write_outputs(const RunConfig& c, const RunOutcome& outcome) {
  RunFiles files;
  const std::filesystem::path dir(c.out_dir);
  const bool sweep = !c.sweep_m.empty();
  for (const auto& mr : outcome.reports) {
    const std::string suffix = sweep ? "_m" + std::to_string(mr.m) : "";
    files.reports.push_back(dir / ("report" + suffix + ".jsonl"));
    write_text(files.reports.back(), report_jsonl(mr.report));
    files.tables.push_back(dir / ("report" + suffix + ".txt"));
    write_text(files.tables.back(), report_table(mr.report));
    const bool trace = c.trace == "on" || (c.trace == "auto" && mr.results.size() <= 10'000);
    if (trace) {
      files.traces.push_back(dir / ("trace" + suffix + ".jsonl"));
      write_text(files.traces.back(), trace_jsonl(c, mr.m, mr.results));
    }
  }
  return files;
}

inline RunOutcome run(const RunConfig& c, Providers* injected = nullptr) {
  auto outcome = execute(c, injected);
  write_outputs(c, outcome);
  return outcome;
}

// ---------------------------------------------------------------------------
// One-shot lookup

struct LookupResult {
  std::vector<std::string> candidates;
  bool degraded = false;
  std::vector<std::string> terms;
  std::vector<double> scores;
};

/// Ranks `index` for a free-text definition under the configured mode:
/// the definition itself (embedding_only) or its pooled candidates (gear).
inline LookupResult lookup(const RunConfig& c, const VectorIndex& index, std::string_view definition, std::size_t k,
                           Providers* injected = nullptr) {
  if (k == 0) throw ConfigError("k must be >= 1");
  if (c.mode == Mode::llm_only) throw ConfigError("query needs mode gear or embedding_only");
  validate(c);
  const auto manifest = load_manifest(c.resolve(c.corpus));
  const Corpus corpus = load_corpus(manifest);
  Providers built;
  Providers& prov = injected ? *injected : built;
  if (!injected) built = make_providers(c, corpus);
  if (prov.embedder->model_id() != index.model_id())
    throw ConfigError("index was built with '" + index.model_id() + "', config embeds with '" +
                      prov.embedder->model_id() + "'");

  const auto root = cache_root(c);
  const auto emb_dir = root / "embeddings" / path_safe(prov.embedder->model_id());
  auto cache = std::filesystem::exists(emb_dir / "manifest.json")
                   ? EmbeddingCache::load(emb_dir)
                   : EmbeddingCache(prov.embedder->model_id(), prov.embedder->dimension());
  const auto instruction = instruction_of(*c.embedding);
  const EmbedOptions options{c.embedding->batch_size, c.embedding->concurrency};

  LookupResult out;
  EmbeddingVector query;
  if (c.mode == Mode::embedding_only) {
    const std::vector<std::string> texts{std::string(definition)};
    auto rows = embed_texts(*prov.embedder, texts, EmbedRole::query, instruction, &cache, options);
    query.assign(rows.row(0).begin(), rows.row(0).end());
  } else {
    const auto& g = *c.generation;
    GenerationConfig gc;
    gc.endpoint = g.endpoint;
    gc.model_id = g.model_id;
    gc.temperature = g.temperature;
    gc.max_retries = g.max_retries;
    gc.timeout = std::chrono::milliseconds(g.timeout_ms);
    gc.concurrency_limit = g.concurrency_limit;
    gc.retry_base = std::chrono::milliseconds(g.retry_base_ms);
    GenerationCache gen_cache(root / "generations");
    Generator generator(gc, *prov.transport, &gen_cache);
    std::vector<std::size_t> all_ids(corpus.size());
    for (std::size_t i = 0; i < all_ids.size(); ++i) all_ids[i] = i;
    const auto spec = prompt_spec_for(c, corpus, all_ids, c.m, definition);
    const auto cs = generator.generate_candidates(spec, definition);
    out.candidates = cs.candidates;
    out.degraded = cs.degraded;
    if (out.candidates.empty()) throw GenerationError(std::string(definition), "no candidates");
    auto rows = embed_texts(*prov.embedder, out.candidates, c.candidate_role, instruction, &cache, options);
    query = pool(rows, c.pooling, c.normalize_before_pool).vector;
  }
  cache.save(emb_dir);
  const auto ranked = knn(index, query, k);
  for (std::size_t i = 0; i < ranked.term_ids.size(); ++i) {
    out.terms.push_back(index.vocabulary().term(ranked.term_ids[i]));
    out.scores.push_back(ranked.scores[i]);
  }
  return out;
}

}  // namespace gear
