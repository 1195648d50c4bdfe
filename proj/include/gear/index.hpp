#pragma once

// The average and rank steps: pool candidate embeddings into one query
// vector and run exact cosine KNN over the embedded vocabulary.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <json.hpp>

#include "gear/corpus.hpp"
#include "gear/embed.hpp"
#include "gear/error.hpp"
#include "gear/matrix.hpp"

namespace gear {

namespace detail {

/// Dot product with double accumulation in eight fixed lanes. The lane
/// layout is part of the contract: cosine() and the index scan both use
/// it, so a score never depends on which path computed it.
inline double dot(const float* a, const float* b, std::size_t n) noexcept {
  double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t j = 0; j < 8; ++j) acc[j] += static_cast<double>(a[i + j]) * static_cast<double>(b[i + j]);
  double tail = 0.0;
  for (; i < n; ++i) tail += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

inline double cosine_from_parts(double dot_ab, double sq_a, double sq_b) noexcept {
  return std::clamp(dot_ab / std::sqrt(sq_a * sq_b), -1.0, 1.0);
}

}  // namespace detail

inline double cosine(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size())
    throw DimensionMismatch("cosine of vectors with dimensions " + std::to_string(a.size()) + " and " +
                            std::to_string(b.size()));
  const double sq_a = detail::dot(a.data(), a.data(), a.size());
  const double sq_b = detail::dot(b.data(), b.data(), b.size());
  if (sq_a == 0.0 || sq_b == 0.0) throw Error("cosine is undefined for a zero vector");
  return detail::cosine_from_parts(detail::dot(a.data(), b.data(), a.size()), sq_a, sq_b);
}

// ---------------------------------------------------------------------------
// Pooling

enum class Pooling { mean, max, first };

inline std::string_view to_string(Pooling p) noexcept {
  switch (p) {
    case Pooling::mean: return "mean";
    case Pooling::max: return "max";
    case Pooling::first: return "first";
  }
  return "mean";
}

inline Pooling parse_pooling(std::string_view s) {
  if (s == "mean") return Pooling::mean;
  if (s == "max") return Pooling::max;
  if (s == "first") return Pooling::first;
  throw ConfigError("unknown pooling '" + std::string(s) + "' (expected mean, max or first)");
}

/// Componentwise mean, summed in double and rounded once.
inline EmbeddingVector mean_pool(const Matrix& rows) {
  if (rows.rows() == 0) throw Error("cannot pool zero rows");
  std::vector<double> sum(rows.cols(), 0.0);
  for (std::size_t r = 0; r < rows.rows(); ++r) {
    auto row = rows.row(r);
    for (std::size_t c = 0; c < rows.cols(); ++c) sum[c] += static_cast<double>(row[c]);
  }
  EmbeddingVector out(rows.cols());
  const auto m = static_cast<double>(rows.rows());
  for (std::size_t c = 0; c < rows.cols(); ++c) out[c] = static_cast<float>(sum[c] / m);
  return out;
}

inline EmbeddingVector max_pool(const Matrix& rows) {
  if (rows.rows() == 0) throw Error("cannot pool zero rows");
  auto first = rows.row(0);
  EmbeddingVector out(first.begin(), first.end());
  for (std::size_t r = 1; r < rows.rows(); ++r) {
    auto row = rows.row(r);
    for (std::size_t c = 0; c < rows.cols(); ++c) out[c] = std::max(out[c], row[c]);
  }
  return out;
}

struct PooledQuery {
  EmbeddingVector vector;
  Pooling pooling = Pooling::mean;
  /// Number of candidate rows that went into `vector`.
  std::size_t m = 0;
};

inline Matrix normalize_rows(const Matrix& rows) {
  Matrix out = rows;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    const double sq = detail::dot(row.data(), row.data(), row.size());
    if (sq == 0.0) continue;
    const double inv = 1.0 / std::sqrt(sq);
    for (auto& x : row) x = static_cast<float>(static_cast<double>(x) * inv);
  }
  return out;
}

/// Reduces candidate embeddings to one query. `normalize_first` rescales
/// each row to unit length before pooling.
inline PooledQuery pool(const Matrix& rows, Pooling pooling, bool normalize_first = false) {
  if (rows.rows() == 0) throw Error("cannot pool zero rows");
  const Matrix& src = rows;
  Matrix normalized;
  if (normalize_first) normalized = normalize_rows(rows);
  const Matrix& in = normalize_first ? normalized : src;
  PooledQuery q;
  q.pooling = pooling;
  switch (pooling) {
    case Pooling::mean:
      q.vector = mean_pool(in);
      q.m = in.rows();
      break;
    case Pooling::max:
      q.vector = max_pool(in);
      q.m = in.rows();
      break;
    case Pooling::first: {
      auto r = in.row(0);
      q.vector.assign(r.begin(), r.end());
      q.m = 1;
      break;
    }
  }
  return q;
}

// ---------------------------------------------------------------------------
// Index

/// Vocabulary terms with one embedding row each. Immutable once built.
class VectorIndex {
 public:
  VectorIndex(Vocabulary vocabulary, Matrix matrix, std::string model_id, InstructionConfig instruction = {})
      : vocabulary_(std::move(vocabulary)),
        matrix_(std::move(matrix)),
        model_id_(std::move(model_id)),
        instruction_(std::move(instruction)) {
    if (vocabulary_.empty()) throw ConfigError("cannot index an empty vocabulary");
    if (matrix_.rows() != vocabulary_.size())
      throw DimensionMismatch("index has " + std::to_string(matrix_.rows()) + " rows for " +
                              std::to_string(vocabulary_.size()) + " terms");
    sq_norms_.resize(matrix_.rows());
    for (std::size_t i = 0; i < matrix_.rows(); ++i) {
      auto r = matrix_.row(i);
      sq_norms_[i] = detail::dot(r.data(), r.data(), r.size());
      if (sq_norms_[i] == 0.0) throw Error("zero embedding for term '" + vocabulary_.term(i) + "'");
    }
  }

  /// One document-role row per term, in vocabulary order.
  static VectorIndex build(const Vocabulary& vocabulary, EmbeddingProvider& provider,
                           const InstructionConfig& instruction, EmbeddingCache* cache = nullptr,
                           const EmbedOptions& options = {}) {
    if (vocabulary.empty()) throw ConfigError("cannot index an empty vocabulary");
    Matrix m = embed_texts(provider, vocabulary.terms(), EmbedRole::document, instruction, cache, options);
    return VectorIndex(vocabulary, std::move(m), provider.model_id(), instruction);
  }

  std::size_t size() const noexcept { return matrix_.rows(); }
  std::size_t dimension() const noexcept { return matrix_.cols(); }
  const Vocabulary& vocabulary() const noexcept { return vocabulary_; }
  const Matrix& matrix() const noexcept { return matrix_; }
  const std::string& model_id() const noexcept { return model_id_; }
  const InstructionConfig& instruction() const noexcept { return instruction_; }
  double sq_norm(std::size_t i) const noexcept { return sq_norms_[i]; }

  /// Packed embedding layout plus vocabulary.txt and index.json.
  void save(const std::filesystem::path& dir) const {
    EmbeddingCache cache(model_id_, dimension(), instruction_.label());
    for (std::size_t i = 0; i < size(); ++i) cache.insert(vocabulary_.term(i), matrix_.row(i));
    cache.save(dir);
    {
      std::ofstream out(dir / "vocabulary.txt", std::ios::binary | std::ios::trunc);
      for (const auto& t : vocabulary_.terms()) out << nlohmann::json(t).dump() << '\n';
    }
    nlohmann::json meta{{"model_id", model_id_},
                        {"instruction",
                         {{"variant", to_string(instruction_.variant)},
                          {"query_prefix", instruction_.query_prefix},
                          {"doc_prefix", instruction_.doc_prefix}}}};
    std::ofstream out(dir / "index.json", std::ios::binary | std::ios::trunc);
    out << meta.dump(2) << '\n';
  }

  static VectorIndex load(const std::filesystem::path& dir) {
    if (!std::filesystem::exists(dir / "index.json"))
      throw ConfigError("no index at " + dir.string() + "; run `gear build-index` first");
    auto meta = nlohmann::json::parse(detail::slurp(dir / "index.json"), nullptr, false);
    if (meta.is_discarded()) throw CorruptCacheError("unreadable index.json in " + dir.string());
    auto cache = EmbeddingCache::load(dir);

    std::vector<std::string> terms;
    {
      std::ifstream in(dir / "vocabulary.txt", std::ios::binary);
      std::string line;
      while (std::getline(in, line)) {
        auto j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_string()) throw CorruptCacheError("bad vocabulary line in " + dir.string());
        terms.push_back(j.get<std::string>());
      }
    }
    Vocabulary vocab(terms);
    if (vocab.size() != terms.size() || vocab.size() != cache.size())
      throw CorruptCacheError("vocabulary.txt does not match the stored rows in " + dir.string());
    Matrix m(vocab.size(), cache.dimension());
    for (std::size_t i = 0; i < vocab.size(); ++i) {
      auto v = cache.find(vocab.term(i));
      if (!v) throw CorruptCacheError("no stored row for term '" + vocab.term(i) + "'");
      std::copy(v->begin(), v->end(), m.row(i).begin());
    }
    InstructionConfig ins;
    if (meta.contains("instruction")) {
      const auto& j = meta["instruction"];
      ins.variant = parse_instruction_variant(j.value("variant", std::string{"none"}));
      ins.query_prefix = j.value("query_prefix", std::string{});
      ins.doc_prefix = j.value("doc_prefix", std::string{});
    }
    return VectorIndex(std::move(vocab), std::move(m), meta.value("model_id", cache.model_id()), std::move(ins));
  }

 private:
  Vocabulary vocabulary_;
  Matrix matrix_;
  std::string model_id_;
  InstructionConfig instruction_;
  std::vector<double> sq_norms_;
};

/// Best first; scores non-increasing; equal scores by ascending term id.
struct RankedResult {
  std::vector<std::size_t> term_ids;
  std::vector<double> scores;
};

/// Cosine of `query` against every row. The scan runs over fixed blocks
/// of rows; with `threads` > 1 blocks are dealt out to workers, and every
/// score is computed identically either way.
inline std::vector<double> score_all(const VectorIndex& index, std::span<const float> query, int threads = 1) {
  if (query.size() != index.dimension())
    throw DimensionMismatch("query dimension " + std::to_string(query.size()) + " differs from index dimension " +
                            std::to_string(index.dimension()));
  const double sq_q = detail::dot(query.data(), query.data(), query.size());
  if (sq_q == 0.0) throw Error("cannot search with a zero query vector");

  constexpr std::size_t block = 256;
  const std::size_t n = index.size();
  const std::size_t dim = index.dimension();
  const float* base = index.matrix().data().data();
  std::vector<double> scores(n);
  const std::size_t n_blocks = (n + block - 1) / block;
  auto scan = [&](std::size_t first_block, std::size_t stride) {
    for (std::size_t b = first_block; b < n_blocks; b += stride) {
      const std::size_t hi = std::min(n, (b + 1) * block);
      for (std::size_t i = b * block; i < hi; ++i)
        scores[i] = detail::cosine_from_parts(detail::dot(query.data(), base + i * dim, dim), sq_q, index.sq_norm(i));
    }
  };
  const auto t = static_cast<std::size_t>(std::clamp(threads, 1, 256));
  if (t == 1 || n_blocks < 2) {
    scan(0, 1);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 1; w < t; ++w) pool.emplace_back(scan, w, t);
    scan(0, t);
  }
  return scores;
}

inline RankedResult top_k_from_scores(std::span<const double> scores, std::size_t k) {
  if (k == 0) throw ConfigError("k must be >= 1");
  k = std::min(k, scores.size());
  std::vector<std::size_t> ids(scores.size());
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  auto better = [&](std::size_t a, std::size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); };
  if (k < ids.size()) {
    std::nth_element(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k - 1), ids.end(), better);
    ids.resize(k);
  }
  std::sort(ids.begin(), ids.end(), better);
  RankedResult out;
  out.term_ids = std::move(ids);
  out.scores.reserve(k);
  for (auto id : out.term_ids) out.scores.push_back(scores[id]);
  return out;
}

inline RankedResult knn(const VectorIndex& index, std::span<const float> query, std::size_t k, int threads = 1) {
  if (k == 0) throw ConfigError("k must be >= 1");
  auto scores = score_all(index, query, threads);
  return top_k_from_scores(scores, k);
}

inline RankedResult knn(const VectorIndex& index, const PooledQuery& query, std::size_t k, int threads = 1) {
  return knn(index, query.vector, k, threads);
}

/// Vocabulary ids matching any gold term case-insensitively.
inline std::vector<std::size_t> gold_ids(const Vocabulary& vocabulary, std::span<const std::string> gold) {
  std::vector<std::size_t> ids;
  for (const auto& g : gold)
    for (auto id : vocabulary.find_casefolded(g)) ids.push_back(id);
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

/// 0-indexed position of the best-placed gold id in the full ranking.
inline std::size_t rank_from_scores(std::span<const double> scores, std::span<const std::size_t> gold) {
  if (gold.empty()) throw MissingGold("no gold term is in the vocabulary");
  std::size_t best = gold.front();
  for (auto g : gold)
    if (scores[g] > scores[best] || (scores[g] == scores[best] && g < best)) best = g;
  std::size_t rank = 0;
  const double s = scores[best];
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (scores[i] > s || (scores[i] == s && i < best)) ++rank;
  return rank;
}

inline std::size_t rank_of(const VectorIndex& index, const PooledQuery& query, std::span<const std::string> gold) {
  const auto ids = gold_ids(index.vocabulary(), gold);
  if (ids.empty()) throw MissingGold("no gold term is in the vocabulary");
  const auto scores = score_all(index, query.vector);
  return rank_from_scores(scores, ids);
}

}  // namespace gear
