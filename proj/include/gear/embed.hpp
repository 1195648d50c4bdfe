#pragma once

// The embed step: text -> vector through a provider, with instruction
// prefixes and a packed on-disk cache.

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <iterator>
#include <shared_mutex>
#include <sstream>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "gear/error.hpp"
#include "gear/hash.hpp"
#include "gear/matrix.hpp"
#include "gear/text.hpp"

namespace gear {

enum class EmbedRole { query, document };

enum class InstructionVariant { none, generic, dictionary, custom };

inline std::string_view to_string(InstructionVariant v) noexcept {
  switch (v) {
    case InstructionVariant::none: return "none";
    case InstructionVariant::generic: return "generic";
    case InstructionVariant::dictionary: return "dictionary";
    case InstructionVariant::custom: return "custom";
  }
  return "none";
}

inline InstructionVariant parse_instruction_variant(std::string_view s) {
  if (s == "none" || s == "no") return InstructionVariant::none;
  if (s == "generic" || s == "gen") return InstructionVariant::generic;
  if (s == "dictionary" || s == "dict") return InstructionVariant::dictionary;
  if (s == "custom") return InstructionVariant::custom;
  throw ConfigError("unknown instruction variant '" + std::string(s) + "' (expected none, generic or dictionary)");
}

/// Text prepended before embedding. Queries are definitions (or the
/// candidate terms pooled into a query); documents are vocabulary terms.
struct InstructionConfig {
  InstructionVariant variant = InstructionVariant::none;
  std::string query_prefix;
  std::string doc_prefix;

  static std::string query_prefix_for(InstructionVariant v) {
    switch (v) {
      case InstructionVariant::generic: return "Represent the sentence: ";
      case InstructionVariant::dictionary: return "Represent the dictionary definition: ";
      default: return "";
    }
  }
  static std::string doc_prefix_for(InstructionVariant v) {
    switch (v) {
      case InstructionVariant::generic: return "Represent the word: ";
      case InstructionVariant::dictionary: return "Represent the sentence: the dictionary entry: ";
      default: return "";
    }
  }

  static InstructionConfig make(InstructionVariant v) { return combine(v, v); }

  /// Independent variants for the two sides, e.g. generic queries against
  /// dictionary-style documents.
  static InstructionConfig combine(InstructionVariant query, InstructionVariant doc) {
    InstructionConfig c;
    c.variant = query == doc ? query : InstructionVariant::custom;
    c.query_prefix = query_prefix_for(query);
    c.doc_prefix = doc_prefix_for(doc);
    return c;
  }

  const std::string& prefix(EmbedRole role) const noexcept {
    return role == EmbedRole::query ? query_prefix : doc_prefix;
  }

  std::string label() const {
    if (variant != InstructionVariant::custom) return std::string(to_string(variant));
    return "custom(" + query_prefix + "|" + doc_prefix + ")";
  }
};

inline void validate(const InstructionConfig& c) {
  if (c.variant == InstructionVariant::none && (!c.query_prefix.empty() || !c.doc_prefix.empty()))
    throw ConfigError("instruction variant 'none' must not carry prefixes");
}

/// Maps already-prefixed input texts to one row each.
class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual const std::string& model_id() const = 0;
  virtual std::size_t dimension() const = 0;
  /// Must be callable from several threads at once.
  virtual Matrix embed(std::span<const std::string> inputs) = 0;
};

/// Deterministic unit vector for `input`: components uniform in [-1, 1)
/// from a SplitMix64 stream seeded by (seed, input), normalized in double
/// precision, then rounded to float.
inline EmbeddingVector mock_embed(std::uint64_t seed, std::string_view input, std::size_t dimension) {
  SplitMix64 rng(mix_seed(seed, input));
  std::vector<double> v(dimension);
  double sq = 0.0;
  for (auto& x : v) {
    x = 2.0 * rng.uniform() - 1.0;
    sq += x * x;
  }
  const double norm = std::sqrt(sq);
  EmbeddingVector out(dimension);
  for (std::size_t i = 0; i < dimension; ++i) out[i] = static_cast<float>(v[i] / norm);
  return out;
}

inline EmbeddingVector mock_embed(std::uint64_t seed, std::string_view text, std::string_view prefix,
                                  std::size_t dimension) {
  std::string input(prefix);
  input.append(text);
  return mock_embed(seed, input, dimension);
}

class MockEmbeddingProvider : public EmbeddingProvider {
 public:
  MockEmbeddingProvider(std::uint64_t seed, std::size_t dimension, std::string model_id = "mock-embed")
      : seed_(seed), dimension_(dimension), model_id_(std::move(model_id)) {
    if (dimension_ == 0) throw ConfigError("mock embedding dimension must be > 0");
  }

  const std::string& model_id() const override { return model_id_; }
  std::size_t dimension() const override { return dimension_; }

  /// Fixes the vector returned for one exact input string.
  void plant(std::string input, EmbeddingVector v) {
    if (v.size() != dimension_) throw DimensionMismatch("planted vector has the wrong dimension");
    std::unique_lock lock(mu_);
    planted_[std::move(input)] = std::move(v);
  }

  /// The next `n` calls throw a TransportError.
  void fail_next(int n) { failures_ = n; }

  Matrix embed(std::span<const std::string> inputs) override {
    ++calls_;
    if (failures_.load() > 0 && failures_.fetch_sub(1) > 0) throw TransportError("injected embedding failure");
    texts_ += inputs.size();
    Matrix out;
    std::shared_lock lock(mu_);
    for (const auto& s : inputs) {
      if (auto it = planted_.find(s); it != planted_.end()) out.append_row(it->second);
      else out.append_row(mock_embed(seed_, s, dimension_));
    }
    return out;
  }

  std::size_t calls() const noexcept { return calls_.load(); }
  std::size_t texts_embedded() const noexcept { return texts_.load(); }
  void reset_counters() noexcept {
    calls_ = 0;
    texts_ = 0;
  }

 private:
  std::uint64_t seed_;
  std::size_t dimension_;
  std::string model_id_;
  mutable std::shared_mutex mu_;
  std::unordered_map<std::string, EmbeddingVector> planted_;
  std::atomic<int> failures_{0};
  std::atomic<std::size_t> calls_{0};
  std::atomic<std::size_t> texts_{0};
};

// ---------------------------------------------------------------------------
// Packed cache: manifest.json + vectors.f32le + rows.txt

namespace detail {

inline void write_f32le(std::ostream& out, std::span<const float> values) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
  } else {
    for (float f : values) {
      auto u = std::bit_cast<std::uint32_t>(f);
      const char b[4] = {char(u & 0xff), char((u >> 8) & 0xff), char((u >> 16) & 0xff), char(u >> 24)};
      out.write(b, 4);
    }
  }
}

inline std::vector<float> read_f32le(const std::string& bytes) {
  std::vector<float> out(bytes.size() / 4);
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(out.data(), bytes.data(), out.size() * 4);
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) {
      std::uint32_t u = 0;
      for (int b = 3; b >= 0; --b) u = (u << 8) | static_cast<unsigned char>(bytes[i * 4 + static_cast<std::size_t>(b)]);
      out[i] = std::bit_cast<float>(u);
    }
  }
  return out;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw CorruptCacheError("missing cache file " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::string f32le_digest(std::span<const float> values) {
  Sha256 h;
  if constexpr (std::endian::native == std::endian::little) {
    h.update(values.data(), values.size_bytes());
  } else {
    std::ostringstream ss;
    write_f32le(ss, values);
    h.update(ss.str());
  }
  return h.hex();
}

}  // namespace detail

/// Text -> vector store for one model. Keys are the exact provider inputs
/// (instruction prefix included), so one cache serves every variant.
class EmbeddingCache {
 public:
  EmbeddingCache(std::string model_id, std::size_t dimension, std::string instruction = {})
      : model_id_(std::move(model_id)), dimension_(dimension), instruction_(std::move(instruction)) {}

  EmbeddingCache(const EmbeddingCache& other) {
    std::shared_lock lock(other.mu_);
    model_id_ = other.model_id_;
    dimension_ = other.dimension_;
    instruction_ = other.instruction_;
    texts_ = other.texts_;
    rows_ = other.rows_;
    values_ = other.values_;
  }

  EmbeddingCache(EmbeddingCache&& other) noexcept {
    std::unique_lock lock(other.mu_);
    model_id_ = std::move(other.model_id_);
    dimension_ = other.dimension_;
    instruction_ = std::move(other.instruction_);
    texts_ = std::move(other.texts_);
    rows_ = std::move(other.rows_);
    values_ = std::move(other.values_);
  }

  EmbeddingCache& operator=(EmbeddingCache other) {
    std::unique_lock lock(mu_);
    model_id_ = std::move(other.model_id_);
    dimension_ = other.dimension_;
    instruction_ = std::move(other.instruction_);
    texts_ = std::move(other.texts_);
    rows_ = std::move(other.rows_);
    values_ = std::move(other.values_);
    return *this;
  }

  const std::string& model_id() const noexcept { return model_id_; }
  std::size_t dimension() const noexcept { return dimension_; }
  const std::string& instruction() const noexcept { return instruction_; }

  std::size_t size() const {
    std::shared_lock lock(mu_);
    return texts_.size();
  }

  std::optional<EmbeddingVector> find(const std::string& text) const {
    std::shared_lock lock(mu_);
    auto it = rows_.find(text);
    if (it == rows_.end()) return std::nullopt;
    auto b = values_.begin() + static_cast<std::ptrdiff_t>(it->second * dimension_);
    return EmbeddingVector(b, b + static_cast<std::ptrdiff_t>(dimension_));
  }

  bool contains(const std::string& text) const {
    std::shared_lock lock(mu_);
    return rows_.count(text) != 0;
  }

  /// Existing keys keep their first value.
  void insert(const std::string& text, std::span<const float> v) {
    if (v.size() != dimension_)
      throw DimensionMismatch("vector of dimension " + std::to_string(v.size()) + " for a cache of dimension " +
                              std::to_string(dimension_));
    std::unique_lock lock(mu_);
    if (rows_.count(text)) return;
    rows_.emplace(text, texts_.size());
    texts_.push_back(text);
    values_.insert(values_.end(), v.begin(), v.end());
  }

  std::vector<std::string> texts() const {
    std::shared_lock lock(mu_);
    return texts_;
  }

  void save(const std::filesystem::path& dir) const {
    std::shared_lock lock(mu_);
    std::filesystem::create_directories(dir);
    {
      std::ofstream out(dir / "vectors.f32le", std::ios::binary | std::ios::trunc);
      detail::write_f32le(out, values_);
      if (!out) throw Error("cannot write " + (dir / "vectors.f32le").string());
    }
    {
      std::ofstream out(dir / "rows.txt", std::ios::binary | std::ios::trunc);
      for (const auto& t : texts_) out << nlohmann::json(t).dump() << '\n';
    }
    nlohmann::json manifest{{"format", "gear-embeddings/1"},
                            {"model_id", model_id_},
                            {"dimension", dimension_},
                            {"count", texts_.size()},
                            {"instruction", instruction_},
                            {"sha256", detail::f32le_digest(values_)}};
    std::ofstream out(dir / "manifest.json", std::ios::binary | std::ios::trunc);
    out << manifest.dump(2) << '\n';
  }

  /// Verifies row count, dimension, file length and checksum.
  static EmbeddingCache load(const std::filesystem::path& dir) {
    auto manifest = nlohmann::json::parse(detail::slurp(dir / "manifest.json"), nullptr, false);
    if (manifest.is_discarded() || !manifest.is_object()) throw CorruptCacheError("unreadable cache manifest in " + dir.string());
    std::size_t dim = 0, count = 0;
    try {
      dim = manifest.at("dimension").get<std::size_t>();
      count = manifest.at("count").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
      throw CorruptCacheError("cache manifest lacks dimension/count: " + std::string(e.what()));
    }
    EmbeddingCache cache(manifest.value("model_id", std::string{}), dim, manifest.value("instruction", std::string{}));

    std::vector<std::string> texts;
    {
      std::ifstream in(dir / "rows.txt", std::ios::binary);
      if (!in) throw CorruptCacheError("missing rows.txt in " + dir.string());
      std::string line;
      while (std::getline(in, line)) {
        auto j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_string()) throw CorruptCacheError("bad row label in " + dir.string());
        texts.push_back(j.get<std::string>());
      }
    }
    const auto bytes = detail::slurp(dir / "vectors.f32le");
    if (texts.size() != count)
      throw CorruptCacheError("manifest lists " + std::to_string(count) + " rows but rows.txt has " +
                              std::to_string(texts.size()));
    if (bytes.size() != count * dim * 4)
      throw CorruptCacheError("vectors.f32le holds " + std::to_string(bytes.size()) + " bytes, expected " +
                              std::to_string(count * dim * 4) + " for " + std::to_string(count) + " x " +
                              std::to_string(dim));
    auto values = detail::read_f32le(bytes);
    if (manifest.contains("sha256") && manifest["sha256"].get<std::string>() != detail::f32le_digest(values))
      throw CorruptCacheError("vectors.f32le checksum mismatch in " + dir.string());

    for (std::size_t i = 0; i < texts.size(); ++i) {
      if (cache.rows_.count(texts[i])) throw CorruptCacheError("duplicate row label in " + dir.string());
      cache.rows_.emplace(texts[i], i);
    }
    cache.texts_ = std::move(texts);
    cache.values_ = std::move(values);
    return cache;
  }

 private:
  std::string model_id_;
  std::size_t dimension_ = 0;
  std::string instruction_;
  mutable std::shared_mutex mu_;
  std::vector<std::string> texts_;
  std::unordered_map<std::string, std::size_t> rows_;
  std::vector<float> values_;
};

struct EmbedOptions {
  std::size_t batch_size = 64;
  int concurrency = 1;
};

/// Row i is the embedding of prefix(role) + texts[i]. Only inputs missing
/// from `cache` reach the provider, each once, in batches.
inline Matrix embed_texts(EmbeddingProvider& provider, std::span<const std::string> texts, EmbedRole role,
                          const InstructionConfig& instruction, EmbeddingCache* cache = nullptr,
                          const EmbedOptions& options = {}) {
  validate(instruction);
  if (texts.empty()) throw ConfigError("embed_texts needs at least one text");
  if (options.batch_size == 0) throw ConfigError("embedding batch size must be > 0");
  for (const auto& t : texts)
    if (t.empty()) throw ConfigError("cannot embed an empty text");

  const std::size_t dim = provider.dimension();
  std::optional<EmbeddingCache> local;
  if (!cache) {
    local.emplace(provider.model_id(), dim);
    cache = &*local;
  }
  if (cache->dimension() != dim)
    throw DimensionMismatch("cache dimension " + std::to_string(cache->dimension()) + " differs from provider " +
                            provider.model_id() + " dimension " + std::to_string(dim));
  if (!cache->model_id().empty() && cache->model_id() != provider.model_id())
    throw ConfigError("cache belongs to model '" + cache->model_id() + "', not '" + provider.model_id() + "'");

  const auto& prefix = instruction.prefix(role);
  std::vector<std::string> inputs;
  inputs.reserve(texts.size());
  for (const auto& t : texts) inputs.push_back(prefix + t);

  std::vector<std::string> misses;
  {
    std::unordered_map<std::string_view, bool> queued;
    for (const auto& in : inputs)
      if (!cache->contains(in) && queued.emplace(in, true).second) misses.push_back(in);
  }

  const std::size_t n_batches = (misses.size() + options.batch_size - 1) / options.batch_size;
  std::vector<std::optional<EmbeddingError>> failures(n_batches);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t b = next++; b < n_batches; b = next++) {
      const auto lo = b * options.batch_size;
      const auto hi = std::min(misses.size(), lo + options.batch_size);
      std::span<const std::string> batch(misses.data() + lo, hi - lo);
      Matrix rows;
      try {
        rows = provider.embed(batch);
      } catch (const Error& e) {
        failures[b].emplace(std::string("embedding provider failed: ") + e.what(),
                            std::vector<std::string>(batch.begin(), batch.end()));
        continue;
      }
      if (rows.rows() != batch.size() || rows.cols() != dim) {
        failures[b].emplace("provider returned " + std::to_string(rows.rows()) + " x " + std::to_string(rows.cols()) +
                                " for a batch of " + std::to_string(batch.size()) + " at dimension " +
                                std::to_string(dim),
                            std::vector<std::string>(batch.begin(), batch.end()));
        continue;
      }
      for (std::size_t i = 0; i < batch.size(); ++i) {
        auto r = rows.row(i);
        if (!std::all_of(r.begin(), r.end(), [](float x) { return std::isfinite(x); })) {
          failures[b].emplace("non-finite embedding for '" + batch[i] + "'", std::vector<std::string>{batch[i]});
          break;
        }
        cache->insert(batch[i], r);
      }
    }
  };
  {
    const auto n_threads = std::min<std::size_t>(static_cast<std::size_t>(std::max(1, options.concurrency)), n_batches);
    std::vector<std::jthread> pool;
    for (std::size_t t = 1; t < n_threads; ++t) pool.emplace_back(worker);
    worker();
  }
  std::vector<std::string> failed;
  std::string first_message;
  for (auto& f : failures) {
    if (!f) continue;
    if (first_message.empty()) first_message = f->what();
    failed.insert(failed.end(), f->texts().begin(), f->texts().end());
  }
  if (!failed.empty())
    throw EmbeddingError(first_message + " (" + std::to_string(failed.size()) + " texts failed)", std::move(failed));

  Matrix out(inputs.size(), dim);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto v = cache->find(inputs[i]);
    std::copy(v->begin(), v->end(), out.row(i).begin());
  }
  return out;
}

}  // namespace gear
