#pragma once

// Timing harness for the exact KNN scan.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <string>
#include <thread>
#include <vector>

#include "gear/hash.hpp"
#include "gear/index.hpp"
#include "gear/pipeline.hpp"

namespace gear {

struct BenchOptions {
  std::size_t terms = 100'000;
  std::size_t dimension = 768;
  std::size_t k = 10;
  /// Timed single-query repetitions; the median is reported.
  int repeats = 7;
  /// Queries per batch in the scaling measurement.
  std::size_t batch = 64;
  int threads = 8;
  std::uint64_t seed = 1;
};

struct BenchResult {
  BenchOptions options;
  unsigned hardware_threads = 0;
  double build_ms = 0;
  double single_query_ms = 0;
  double batch_ms_1 = 0;
  double batch_ms_n = 0;
  double speedup = 0;
};

inline VectorIndex random_index(std::size_t terms, std::size_t dim, std::uint64_t seed) {
  std::vector<std::string> names(terms);
  const int width = static_cast<int>(std::to_string(terms).size());
  for (std::size_t i = 0; i < terms; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "t%0*zu", width, i);
    names[i] = buf;
  }
  SplitMix64 rng(seed);
  Matrix m(terms, dim);
  for (auto& x : m.data()) x = static_cast<float>(2.0 * rng.uniform() - 1.0);
  return VectorIndex(Vocabulary(std::move(names)), std::move(m), "bench-random");
}

inline std::vector<EmbeddingVector> random_queries(std::size_t n, std::size_t dim, std::uint64_t seed) {
  SplitMix64 rng(seed);
  std::vector<EmbeddingVector> out(n, EmbeddingVector(dim));
  for (auto& q : out)
    for (auto& x : q) x = static_cast<float>(2.0 * rng.uniform() - 1.0);
  return out;
}

inline BenchResult run_benchmark(const BenchOptions& opt) {
  using clock = std::chrono::steady_clock;
  auto ms_since = [](clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(clock::now() - t0).count();
  };
  BenchResult r;
  r.options = opt;
  r.hardware_threads = std::thread::hardware_concurrency();

  auto t0 = clock::now();
  const auto index = random_index(opt.terms, opt.dimension, opt.seed);
  r.build_ms = ms_since(t0);

  const auto queries = random_queries(std::max<std::size_t>(opt.batch, 1), opt.dimension, mix_seed(opt.seed, "queries"));
  volatile std::size_t sink = knn(index, queries[0], opt.k).term_ids[0];

  std::vector<double> times;
  for (int i = 0; i < std::max(1, opt.repeats); ++i) {
    t0 = clock::now();
    sink = sink + knn(index, queries[static_cast<std::size_t>(i) % queries.size()], opt.k).term_ids[0];
    times.push_back(ms_since(t0));
  }
  std::sort(times.begin(), times.end());
  r.single_query_ms = times[times.size() / 2];

  auto batch_time = [&](int threads) {
    std::vector<std::size_t> firsts(queries.size());
    const auto start = clock::now();
    parallel_for(queries.size(), threads, [&](std::size_t q) { firsts[q] = knn(index, queries[q], opt.k).term_ids[0]; });
    const double t = ms_since(start);
    sink = sink + firsts[0];
    return t;
  };
  r.batch_ms_1 = batch_time(1);
  r.batch_ms_n = batch_time(opt.threads);
  r.speedup = r.batch_ms_n > 0 ? r.batch_ms_1 / r.batch_ms_n : 0.0;
  return r;
}

}  // namespace gear
