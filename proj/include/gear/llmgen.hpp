#pragma once

// The generate step: prompt an LLM for candidate terms, with retries, a
// bound on in-flight requests, and an append-only on-disk response cache.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <semaphore>
#include <shared_mutex>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "gear/error.hpp"
#include "gear/hash.hpp"
#include "gear/prompt.hpp"
#include "gear/text.hpp"

namespace gear {

struct GenerationConfig {
  std::string endpoint;
  std::string model_id = "gpt-4o-mini";
  double temperature = 0.0;
  int max_retries = 3;
  std::chrono::milliseconds timeout{60'000};
  int concurrency_limit = 4;
  /// First retry delay; doubles per attempt with +/-50% jitter.
  std::chrono::milliseconds retry_base{1'000};
  std::string api_key;
};

inline void validate(const GenerationConfig& c) {
  if (c.max_retries < 0) throw ConfigError("max_retries must be >= 0");
  if (c.concurrency_limit < 1) throw ConfigError("concurrency_limit must be >= 1");
  if (c.model_id.empty()) throw ConfigError("generation model_id is empty");
}

struct ChatRequest {
  std::string model;
  std::string prompt;
  double temperature = 0.0;
};

/// Anything that turns a single-user-message chat request into response text.
/// Implementations throw TransportError on failure and must be callable
/// from several threads at once.
class ChatTransport {
 public:
  virtual ~ChatTransport() = default;
  virtual std::string complete(const ChatRequest& request) = 0;
};

/// Cache key: SHA-256 over model id and prompt.
inline std::string generation_cache_key(std::string_view model_id, std::string_view prompt) {
  return Sha256().update(model_id).update("\x1f", 1).update(prompt).hex();
}

// ---------------------------------------------------------------------------
// Deterministic mock

/// Offline stand-in for an LLM. Definitions found in the table answer with
/// their listed terms followed by pseudo-word distractors; unknown
/// definitions get distractors only. Output depends only on
/// (table, noise_seed, definition, k, variant).
class MockGenerator {
 public:
  using Table = std::map<std::string, std::vector<std::string>>;

  MockGenerator(Table table, std::uint64_t noise_seed) : table_(std::move(table)), seed_(noise_seed) {
    for (const auto& [d, terms] : table_)
      for (const auto& t : terms) reserved_.insert(text::casefold(t));
  }

  const Table& table() const noexcept { return table_; }

  std::vector<std::string> terms_for(std::string_view definition, int k) const {
    std::vector<std::string> out;
    std::unordered_set<std::string> used;
    if (auto it = table_.find(std::string(definition)); it != table_.end()) {
      for (const auto& t : it->second) {
        if (out.size() == static_cast<std::size_t>(k)) break;
        if (used.insert(text::casefold(t)).second) out.push_back(text::casefold(t));
      }
    }
    SplitMix64 rng(mix_seed(seed_, definition));
    while (out.size() < static_cast<std::size_t>(k)) {
      auto word = distractor(rng);
      if (reserved_.count(word) || !used.insert(word).second) continue;
      out.push_back(std::move(word));
    }
    return out;
  }

  std::string operator()(std::string_view definition, int k = 5, PromptVariant variant = PromptVariant::bp1) const {
    const auto terms = terms_for(definition, k);
    nlohmann::json list = nlohmann::json::array();
    for (const auto& t : terms) {
      if (variant == PromptVariant::rp) list.push_back({{"term", t}, {"example", "we talked about the " + t + "."}});
      else list.push_back(t);
    }
    return nlohmann::json{{"terms", std::move(list)}}.dump();
  }

  static std::string distractor(SplitMix64& rng) {
    static constexpr std::string_view syllables[] = {"ka", "lo", "mi", "ru", "ve", "zan", "tor", "bel",
                                                     "quo", "dri", "sen", "pla", "gri", "fon", "ush", "yel"};
    const auto n = 2 + rng.bounded(2);
    std::string w;
    for (std::uint64_t i = 0; i < n; ++i) w += syllables[rng.bounded(16)];
    return w;
  }

 private:
  Table table_;
  std::uint64_t seed_;
  std::unordered_set<std::string> reserved_;
};

/// Pulls definition, k and variant back out of a rendered prompt.
struct PromptFields {
  std::string definition;
  int k = 0;
  PromptVariant variant = PromptVariant::bp1;
};

inline std::optional<PromptFields> scan_prompt(std::string_view prompt) {
  static constexpr std::string_view head = "Given the definition ";
  static constexpr std::string_view marker = ", generate a list of ";
  static constexpr std::string_view tail = " terms defined by that definition";
  if (!text::starts_with(prompt, head)) return std::nullopt;
  for (auto pos = prompt.find(marker, head.size()); pos != std::string_view::npos;
       pos = prompt.find(marker, pos + 1)) {
    auto p = pos + marker.size();
    int k = 0;
    std::size_t digits = 0;
    while (p + digits < prompt.size() && prompt[p + digits] >= '0' && prompt[p + digits] <= '9')
      k = k * 10 + (prompt[p + digits++] - '0');
    if (digits == 0 || prompt.compare(p + digits, tail.size(), tail) != 0) continue;
    PromptFields f;
    f.definition = std::string(prompt.substr(head.size(), pos - head.size()));
    f.k = k;
    if (prompt.find("provide an example usage in a sentence") != std::string_view::npos) f.variant = PromptVariant::rp;
    else if (prompt.find("These are some examples of definitions") != std::string_view::npos)
      f.variant = PromptVariant::bp2;
    return f;
  }
  return std::nullopt;
}

/// ChatTransport over MockGenerator with an audit log, an in-flight gauge
/// and optional fault injection.
class MockChatTransport : public ChatTransport {
 public:
  explicit MockChatTransport(MockGenerator generator) : generator_(std::move(generator)) {}

  /// Sleep per call so overlapping calls are observable.
  void set_latency(std::chrono::milliseconds d) { latency_ = d; }
  /// The next `n` calls throw a retryable TransportError.
  void fail_next(int n) { transport_failures_ = n; }
  /// The next `n` calls answer with prose that holds no JSON.
  void garble_next(int n) { garbled_ = n; }

  std::string complete(const ChatRequest& request) override {
    const int now = ++in_flight_;
    int prev = max_in_flight_.load();
    while (now > prev && !max_in_flight_.compare_exchange_weak(prev, now)) {
    }
    struct Leave {
      std::atomic<int>& n;
      ~Leave() { --n; }
    } leave{in_flight_};

    {
      std::lock_guard lock(mu_);
      log_.push_back(request.prompt);
    }
    ++calls_;
    if (latency_.count() > 0) std::this_thread::sleep_for(latency_);
    if (transport_failures_.load() > 0 && transport_failures_.fetch_sub(1) > 0) throw TransportError("injected transport failure");
    if (garbled_.load() > 0 && garbled_.fetch_sub(1) > 0) return "I am not sure.\nperhaps\nsomething";

    auto fields = scan_prompt(request.prompt);
    if (!fields) return generator_("", 5, PromptVariant::bp1);
    return generator_(fields->definition, fields->k, fields->variant);
  }

  std::size_t calls() const noexcept { return calls_.load(); }
  int max_in_flight() const noexcept { return max_in_flight_.load(); }
  std::vector<std::string> call_log() const {
    std::lock_guard lock(mu_);
    return log_;
  }
  const MockGenerator& generator() const noexcept { return generator_; }

 private:
  MockGenerator generator_;
  std::chrono::milliseconds latency_{0};
  std::atomic<int> transport_failures_{0};
  std::atomic<int> garbled_{0};
  std::atomic<int> in_flight_{0};
  std::atomic<int> max_in_flight_{0};
  std::atomic<std::size_t> calls_{0};
  mutable std::mutex mu_;
  std::vector<std::string> log_;
};

// ---------------------------------------------------------------------------
// Cache

struct GenerationRecord {
  std::string cache_key;
  std::string prompt;
  std::string raw_response;
  CandidateSet candidates;
  std::int64_t created_at = 0;
  bool from_cache = false;
};

/// Append-only response store (`generations.jsonl`) keyed by
/// generation_cache_key. An empty directory path keeps it in memory only.
class GenerationCache {
 public:
  GenerationCache() = default;

  explicit GenerationCache(std::filesystem::path dir) : dir_(std::move(dir)) {
    if (dir_.empty()) return;
    std::filesystem::create_directories(dir_);
    std::ifstream in(file());
    std::string line;
    while (std::getline(in, line)) {
      auto j = nlohmann::json::parse(line, nullptr, false);
      // A torn final line from an interrupted write is skipped.
      if (j.is_discarded() || !j.contains("key") || !j.contains("raw")) {
        ++skipped_;
        continue;
      }
      entries_[j["key"].get<std::string>()] = Entry{j.value("prompt", std::string{}), j["raw"].get<std::string>(),
                                                     j.value("created_at", std::int64_t{0})};
    }
  }

  std::optional<std::string> lookup(const std::string& key) const {
    std::shared_lock lock(mu_);
    auto it = entries_.find(key);
    if (it == entries_.end()) return std::nullopt;
    return it->second.raw;
  }

  void store(const std::string& key, const std::string& model, const std::string& prompt, const std::string& raw,
             std::int64_t created_at) {
    std::unique_lock lock(mu_);
    entries_[key] = Entry{prompt, raw, created_at};
    if (dir_.empty()) return;
    std::ofstream out(file(), std::ios::app | std::ios::binary);
    out << nlohmann::json{{"key", key}, {"model", model}, {"prompt", prompt}, {"raw", raw}, {"created_at", created_at}}
               .dump()
        << '\n';
    out.flush();
    if (!out) throw Error("cannot append to generation cache " + file().string());
  }

  std::size_t size() const {
    std::shared_lock lock(mu_);
    return entries_.size();
  }
  std::size_t skipped_lines() const noexcept { return skipped_; }
  std::filesystem::path file() const { return dir_ / "generations.jsonl"; }

 private:
  struct Entry {
    std::string prompt;
    std::string raw;
    std::int64_t created_at = 0;
  };
  std::filesystem::path dir_;
  mutable std::shared_mutex mu_;
  std::unordered_map<std::string, Entry> entries_;
  std::size_t skipped_ = 0;
};

// ---------------------------------------------------------------------------
// Generator

struct GenerationRequest {
  PromptSpec spec;
  std::string definition;
};

struct GenerationStats {
  std::size_t requests = 0;
  std::size_t cache_hits = 0;
  std::size_t transport_calls = 0;
  std::size_t retries = 0;
  std::size_t degraded = 0;
};

class Generator {
 public:
  Generator(GenerationConfig config, ChatTransport& transport, GenerationCache* cache = nullptr)
      : config_(std::move(config)),
        transport_(transport),
        cache_(cache),
        slots_(std::clamp(config_.concurrency_limit, 1, 1024)) {
    validate(config_);
  }

  const GenerationConfig& config() const noexcept { return config_; }

  /// Cache first; otherwise render, call, parse. A ParseFailure is retried
  /// with the identical prompt; when retries run out the last response is
  /// read line by line and the result is flagged degraded.
  GenerationRecord generate(const PromptSpec& spec, std::string_view definition) {
    ++requests_;
    GenerationRecord rec;
    rec.prompt = render_prompt(spec, definition);
    rec.cache_key = generation_cache_key(config_.model_id, rec.prompt);

    if (cache_) {
      if (auto hit = cache_->lookup(rec.cache_key)) {
        ++cache_hits_;
        rec.raw_response = *hit;
        rec.from_cache = true;
        rec.candidates = interpret(*hit, spec, definition);
        return rec;
      }
    }

    std::string last_raw;
    std::string last_error;
    bool have_raw = false;
    for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
      if (attempt > 0) ++retries_;
      std::string raw;
      try {
        raw = call(rec.prompt);
      } catch (const TransportError& e) {
        last_error = e.what();
        if (!e.retryable() || attempt == config_.max_retries) break;
        backoff(attempt);
        continue;
      }
      last_raw = std::move(raw);
      have_raw = true;
      try {
        rec.candidates = parse_candidates(last_raw, spec.variant, spec.k);
        rec.candidates.definition = std::string(definition);
        rec.raw_response = last_raw;
        finish(rec);
        return rec;
      } catch (const ParseFailure& e) {
        last_error = e.what();
      }
    }
    if (!have_raw) throw GenerationError(std::string(definition), last_error);

    rec.raw_response = last_raw;
    rec.candidates = fallback_candidates(last_raw, spec.variant, spec.k);
    rec.candidates.definition = std::string(definition);
    finish(rec);
    return rec;
  }

  CandidateSet generate_candidates(const PromptSpec& spec, std::string_view definition) {
    return generate(spec, definition).candidates;
  }

  /// Runs every request with at most `concurrency_limit` transport calls in
  /// flight. Results are positionally aligned with `requests`. Failures are
  /// reported per request through `errors` when given, rethrown otherwise.
  std::vector<GenerationRecord> generate_batch(std::span<const GenerationRequest> requests,
                                               std::vector<std::optional<std::string>>* errors = nullptr) {
    std::vector<GenerationRecord> out(requests.size());
    std::vector<std::optional<std::string>> errs(requests.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
      for (std::size_t i = next++; i < requests.size(); i = next++) {
        try {
          out[i] = generate(requests[i].spec, requests[i].definition);
        } catch (const Error& e) {
          errs[i] = e.what();
        }
      }
    };
    const auto n_threads = std::min<std::size_t>(static_cast<std::size_t>(config_.concurrency_limit), requests.size());
    std::vector<std::jthread> pool;
    for (std::size_t t = 1; t < n_threads; ++t) pool.emplace_back(worker);
    worker();
    pool.clear();
    if (errors) {
      *errors = std::move(errs);
    } else {
      for (std::size_t i = 0; i < errs.size(); ++i)
        if (errs[i]) throw GenerationError(requests[i].definition, *errs[i]);
    }
    return out;
  }

  GenerationStats stats() const {
    return {requests_.load(), cache_hits_.load(), transport_calls_.load(), retries_.load(), degraded_.load()};
  }

 private:
  static std::int64_t now_seconds() {
    return std::chrono::duration_cast<std::chrono::seconds>(std::chrono::system_clock::now().time_since_epoch())
        .count();
  }

  CandidateSet interpret(const std::string& raw, const PromptSpec& spec, std::string_view definition) {
    CandidateSet cs;
    try {
      cs = parse_candidates(raw, spec.variant, spec.k);
    } catch (const ParseFailure&) {
      cs = fallback_candidates(raw, spec.variant, spec.k);
      ++degraded_;
    }
    cs.definition = std::string(definition);
    return cs;
  }

  void finish(GenerationRecord& rec) {
    rec.created_at = now_seconds();
    if (rec.candidates.degraded) ++degraded_;
    if (cache_) cache_->store(rec.cache_key, config_.model_id, rec.prompt, rec.raw_response, rec.created_at);
  }

  std::string call(const std::string& prompt) {
    slots_.acquire();
    struct Release {
      std::counting_semaphore<1024>& s;
      ~Release() { s.release(); }
    } release{slots_};
    ++transport_calls_;
    return transport_.complete(ChatRequest{config_.model_id, prompt, config_.temperature});
  }

  void backoff(int attempt) {
    if (config_.retry_base.count() <= 0) return;
    thread_local std::minstd_rand jitter_rng{std::random_device{}()};
    std::uniform_real_distribution<double> jitter(0.5, 1.5);
    const double ms = static_cast<double>(config_.retry_base.count()) * static_cast<double>(1u << std::min(attempt, 10)) *
                      jitter(jitter_rng);
    std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(ms));
  }

  GenerationConfig config_;
  ChatTransport& transport_;
  GenerationCache* cache_;
  std::counting_semaphore<1024> slots_;
  std::atomic<std::size_t> requests_{0};
  std::atomic<std::size_t> cache_hits_{0};
  std::atomic<std::size_t> transport_calls_{0};
  std::atomic<std::size_t> retries_{0};
  std::atomic<std::size_t> degraded_{0};
};

}  // namespace gear
