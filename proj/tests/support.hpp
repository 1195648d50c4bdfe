#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "gear/gear.hpp"

namespace gear::support {

inline std::filesystem::path fixture(const std::string& name) { return std::filesystem::path(GEAR_FIXTURE_DIR) / name; }
inline std::filesystem::path golden(const std::string& name) { return std::filesystem::path(GEAR_GOLDEN_DIR) / name; }
inline std::filesystem::path prompts_dir() { return GEAR_PROMPTS_DIR; }

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
    path_ = std::filesystem::temp_directory_path() /
            ("gear-test-" + std::to_string(stamp) + "-" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const noexcept { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

inline void write_file(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << s;
}

/// Cosine of q against every row, recomputed with the index's eight-lane
/// accumulation order so that scores compare exactly.
inline std::vector<double> naive_scores(const Matrix& rows, std::span<const float> q) {
  auto dot = [](std::span<const float> a, std::span<const float> b) {
    double lanes[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    std::size_t n8 = a.size() / 8 * 8;
    for (std::size_t i = 0; i < n8; ++i) lanes[i % 8] += double(a[i]) * double(b[i]);
    double tail = 0;
    for (std::size_t i = n8; i < a.size(); ++i) tail += double(a[i]) * double(b[i]);
    return ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7])) + tail;
  };
  std::vector<double> out;
  const double qq = dot(q, q);
  for (std::size_t i = 0; i < rows.rows(); ++i) {
    const double c = dot(q, rows.row(i)) / std::sqrt(qq * dot(rows.row(i), rows.row(i)));
    out.push_back(std::min(1.0, std::max(-1.0, c)));
  }
  return out;
}

inline std::vector<std::size_t> naive_order(const std::vector<double>& scores) {
  std::vector<std::size_t> ids(scores.size());
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  std::stable_sort(ids.begin(), ids.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return ids;
}

inline Matrix random_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols) {
  std::normal_distribution<float> nd(0.0f, 1.0f);
  Matrix m(rows, cols);
  for (auto& x : m.data()) x = nd(rng);
  return m;
}

inline Vocabulary numbered_vocabulary(std::size_t n) {
  std::vector<std::string> t;
  for (std::size_t i = 0; i < n; ++i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "w%06zu", i);
    t.push_back(buf);
  }
  return Vocabulary(std::move(t));
}

/// Direct-formula metric oracles over (best rank, relevance) pairs.
struct OracleQuery {
  std::optional<std::size_t> rank;
  std::vector<bool> rel;
};

inline double oracle_mrr(const std::vector<OracleQuery>& qs) {
  long double s = 0;
  for (const auto& q : qs) s += q.rank ? 1.0L / (long double)(*q.rank + 1) : 0.0L;
  return double(s / qs.size());
}

inline double oracle_p_at(const std::vector<OracleQuery>& qs, int k) {
  long double s = 0;
  for (const auto& q : qs) {
    int hits = 0;
    for (int i = 0; i < k && i < (int)q.rel.size(); ++i) hits += q.rel[i];
    s += (long double)hits / k;
  }
  return double(s / qs.size());
}

inline std::size_t oracle_acc_hits(const std::vector<OracleQuery>& qs, int k) {
  std::size_t hits = 0;
  for (const auto& q : qs)
    if (q.rank && *q.rank < (std::size_t)k) ++hits;
  return hits;
}

inline double oracle_median(std::vector<double> r) {
  std::sort(r.begin(), r.end());
  return r.size() % 2 ? r[r.size() / 2] : 0.5 * (r[r.size() / 2 - 1] + r[r.size() / 2]);
}

inline double oracle_std(const std::vector<double>& r) {
  long double mean = 0;
  for (double x : r) mean += x;
  mean /= r.size();
  long double ss = 0;
  for (double x : r) ss += (x - mean) * (x - mean);
  return double(std::sqrt(ss / r.size()));
}

inline QueryResult to_result(const OracleQuery& q) {
  QueryResult r;
  r.best_rank = q.rank;
  r.relevance = q.rel;
  r.gold_terms = {"g"};
  return r;
}

/// Random result set: mostly-small ranks with a long tail, several gold
/// terms possible per query.
inline std::vector<OracleQuery> random_results(std::mt19937_64& rng, std::size_t n_queries, std::size_t max_rank,
                                               std::size_t list_len) {
  std::vector<OracleQuery> out;
  std::uniform_int_distribution<std::size_t> rank_d(0, max_rank);
  std::uniform_int_distribution<int> gold_d(1, 4);
  std::geometric_distribution<std::size_t> small(0.3);
  for (std::size_t i = 0; i < n_queries; ++i) {
    OracleQuery q;
    const int golds = gold_d(rng);
    std::vector<std::size_t> positions;
    for (int g = 0; g < golds; ++g)
      positions.push_back(rng() % 2 ? std::min(small(rng), max_rank) : rank_d(rng));
    std::sort(positions.begin(), positions.end());
    q.rank = positions.front();
    q.rel.assign(list_len, false);
    for (auto p : positions)
      if (p < list_len) q.rel[p] = true;
    out.push_back(std::move(q));
  }
  return out;
}

}  // namespace gear::support
