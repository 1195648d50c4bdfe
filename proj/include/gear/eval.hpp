#pragma once

// Retrieval metrics over per-query results and the report they roll up into.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "gear/error.hpp"
#include "gear/text.hpp"

namespace gear {

struct QueryResult {
  /// Entry id in the evaluated corpus.
  std::size_t query_id = 0;
  std::string definition;
  std::vector<std::string> gold_terms;
  std::vector<std::string> sources;
  /// 0-indexed position of the first gold term. Empty when the ranked list
  /// is truncated (LLM-only) and no gold term made it in.
  std::optional<std::size_t> best_rank;
  /// No gold term exists in the vocabulary; excluded from every metric.
  bool missing_gold = false;
  std::vector<std::string> top_k_terms;
  std::vector<double> top_k_scores;
  /// relevance[i] is true iff top_k_terms[i] case-folds to a gold term.
  std::vector<bool> relevance;
  std::vector<std::string> candidates;
  bool degraded = false;
  std::string error;
};

inline std::vector<bool> relevance_flags(std::span<const std::string> ranked, std::span<const std::string> gold) {
  std::vector<std::string> folded;
  for (const auto& g : gold) folded.push_back(text::casefold(g));
  std::vector<bool> out;
  out.reserve(ranked.size());
  for (const auto& t : ranked)
    out.push_back(std::find(folded.begin(), folded.end(), text::casefold(t)) != folded.end());
  return out;
}

namespace detail {

inline std::vector<const QueryResult*> scored(std::span<const QueryResult> results) {
  std::vector<const QueryResult*> out;
  for (const auto& r : results)
    if (!r.missing_gold) out.push_back(&r);
  if (out.empty()) throw UndefinedMetric("no scorable queries (all results empty or missing gold)");
  return out;
}

inline std::vector<double> ranks(std::span<const QueryResult> results) {
  std::vector<double> out;
  for (const auto* r : scored(results)) {
    if (!r->best_rank) throw UndefinedMetric("rank metrics need a full ranking for every query");
    out.push_back(static_cast<double>(*r->best_rank));
  }
  return out;
}

}  // namespace detail

/// Mean of 1/(best_rank + 1); a query whose gold never appears adds 0.
inline double mrr(std::span<const QueryResult> results) {
  const auto qs = detail::scored(results);
  double sum = 0.0;
  for (const auto* r : qs)
    if (r->best_rank) sum += 1.0 / static_cast<double>(*r->best_rank + 1);
  return sum / static_cast<double>(qs.size());
}

/// Mean over queries of (relevant items among the first k) / k; short
/// lists count as padded with non-relevant items.
inline double precision_at_k(std::span<const QueryResult> results, int k) {
  if (k < 1) throw ConfigError("precision@k needs k >= 1");
  const auto qs = detail::scored(results);
  double sum = 0.0;
  for (const auto* r : qs) {
    const auto n = std::min(r->relevance.size(), static_cast<std::size_t>(k));
    sum += static_cast<double>(std::count(r->relevance.begin(), r->relevance.begin() + static_cast<std::ptrdiff_t>(n),
                                          true)) /
           static_cast<double>(k);
  }
  return sum / static_cast<double>(qs.size());
}

/// Fraction of queries with a gold term among the first k.
inline double accuracy_at_k(std::span<const QueryResult> results, int k) {
  if (k < 1) throw ConfigError("accuracy@k needs k >= 1");
  const auto qs = detail::scored(results);
  std::size_t hits = 0;
  for (const auto* r : qs)
    if (r->best_rank && *r->best_rank < static_cast<std::size_t>(k)) ++hits;
  return static_cast<double>(hits) / static_cast<double>(qs.size());
}

/// Median of 0-indexed best ranks; mean of the middle two for even counts.
inline double median_rank(std::span<const QueryResult> results) {
  auto r = detail::ranks(results);
  std::sort(r.begin(), r.end());
  const auto n = r.size();
  return n % 2 ? r[n / 2] : (r[n / 2 - 1] + r[n / 2]) / 2.0;
}

enum class RankSpread { std_dev, variance };

/// Population standard deviation (or variance) of 0-indexed best ranks.
inline double rank_std(std::span<const QueryResult> results, RankSpread spread = RankSpread::std_dev) {
  const auto r = detail::ranks(results);
  double mean = 0.0;
  for (double x : r) mean += x;
  mean /= static_cast<double>(r.size());
  double ss = 0.0;
  for (double x : r) ss += (x - mean) * (x - mean);
  const double var = ss / static_cast<double>(r.size());
  return spread == RankSpread::variance ? var : std::sqrt(var);
}

// ---------------------------------------------------------------------------
// Report

struct MetricOptions {
  std::vector<int> p_at{1, 3, 5};
  std::vector<int> acc_at{1, 5, 10, 100, 1000};
  /// Off for LLM-only runs: candidate lists are no full ranking.
  bool rank_metrics = true;
  RankSpread spread = RankSpread::std_dev;
};

struct MetricBlock {
  std::size_t queries = 0;
  std::size_t missing_gold = 0;
  std::size_t degraded = 0;
  std::optional<double> mrr;
  std::map<int, double> p_at;
  std::map<int, double> acc_at;
  std::optional<double> median_rank;
  std::optional<double> rank_spread;
};

inline MetricBlock compute_metrics(std::span<const QueryResult> results, const MetricOptions& opt) {
  MetricBlock b;
  b.queries = results.size();
  for (const auto& r : results) {
    if (r.missing_gold) ++b.missing_gold;
    if (r.degraded) ++b.degraded;
  }
  if (b.queries == b.missing_gold) return b;
  b.mrr = mrr(results);
  for (int k : opt.p_at) b.p_at[k] = precision_at_k(results, k);
  for (int k : opt.acc_at) b.acc_at[k] = accuracy_at_k(results, k);
  if (opt.rank_metrics) {
    b.median_rank = median_rank(results);
    b.rank_spread = rank_std(results, opt.spread);
  }
  return b;
}

inline nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline nlohmann::json to_json(const MetricBlock& b, RankSpread spread) {
  nlohmann::json p = nlohmann::json::object(), a = nlohmann::json::object();
  for (const auto& [k, v] : b.p_at) p[std::to_string(k)] = v;
  for (const auto& [k, v] : b.acc_at) a[std::to_string(k)] = v;
  return nlohmann::json{{"queries", b.queries},
                        {"scored", b.queries - b.missing_gold},
                        {"missing_gold", b.missing_gold},
                        {"degraded", b.degraded},
                        {"mrr", optional_json(b.mrr)},
                        {"p_at", std::move(p)},
                        {"acc_at", std::move(a)},
                        {"median_rank", optional_json(b.median_rank)},
                        {spread == RankSpread::variance ? "rank_variance" : "rank_std", optional_json(b.rank_spread)}};
}

struct EvalReport {
  /// Configuration descriptor, embedded verbatim.
  nlohmann::json config;
  /// Content digests of every input that shaped the numbers.
  nlohmann::json provenance;
  MetricOptions options;
  MetricBlock aggregate;
  std::map<std::string, MetricBlock> per_source;
};

/// Machine-readable form: one JSON object per line.
inline std::string report_jsonl(const EvalReport& r) {
  std::string out;
  out += nlohmann::json{{"record", "config"}, {"config", r.config}, {"provenance", r.provenance}}.dump() + "\n";
  auto agg = to_json(r.aggregate, r.options.spread);
  agg["record"] = "metrics";
  agg["scope"] = "all";
  out += agg.dump() + "\n";
  for (const auto& [source, block] : r.per_source) {
    auto j = to_json(block, r.options.spread);
    j["record"] = "metrics";
    j["scope"] = "source";
    j["source"] = source;
    out += j.dump() + "\n";
  }
  return out;
}

namespace detail {

inline std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

inline std::string pad(std::string s, std::size_t w, bool left = false) {
  if (s.size() >= w) return s;
  return left ? s + std::string(w - s.size(), ' ') : std::string(w - s.size(), ' ') + s;
}

}  // namespace detail

/// Aligned plain-text table, one row per scope.
inline std::string report_table(const EvalReport& r) {
  std::vector<std::string> header{"scope", "queries", "MRR"};
  for (int k : r.options.p_at) header.push_back("P@" + std::to_string(k));
  for (int k : r.options.acc_at) header.push_back("acc@" + std::to_string(k));
  if (r.options.rank_metrics) {
    header.push_back("mr");
    header.push_back(r.options.spread == RankSpread::variance ? "rvar" : "rstd");
  }

  auto row_of = [&](const std::string& name, const MetricBlock& b) {
    std::vector<std::string> row{name, std::to_string(b.queries - b.missing_gold)};
    row.push_back(b.mrr ? detail::fmt("%.4f", *b.mrr) : "-");
    for (int k : r.options.p_at) row.push_back(b.p_at.count(k) ? detail::fmt("%.4f", b.p_at.at(k)) : "-");
    for (int k : r.options.acc_at) row.push_back(b.acc_at.count(k) ? detail::fmt("%.4f", b.acc_at.at(k)) : "-");
    if (r.options.rank_metrics) {
      row.push_back(b.median_rank ? detail::fmt("%.1f", *b.median_rank) : "-");
      row.push_back(b.rank_spread ? detail::fmt("%.3f", *b.rank_spread) : "-");
    }
    return row;
  };

  std::vector<std::vector<std::string>> rows{header, row_of("all", r.aggregate)};
  for (const auto& [source, block] : r.per_source) rows.push_back(row_of(source, block));

  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& row : rows)
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());

  std::string out;
  for (const auto& [key, value] : {std::pair<std::string, std::string>{"mode", r.config.value("mode", "")},
                                  {"prompt", r.config.contains("prompt") ? r.config["prompt"].value("variant", "") : ""},
                                  {"pooling", r.config.value("pooling", "")}}) {
    if (!value.empty()) out += key + ": " + value + "\n";
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::string line;
    for (std::size_t c = 0; c < rows[i].size(); ++c) {
      if (c) line += "  ";
      line += detail::pad(rows[i][c], width[c], c == 0);
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    out += line + "\n";
    if (i == 0) out += std::string(line.size(), '-') + "\n";
  }
  if (r.aggregate.degraded || r.aggregate.missing_gold)
    out += "degraded: " + std::to_string(r.aggregate.degraded) +
           ", missing gold: " + std::to_string(r.aggregate.missing_gold) + "\n";
  return out;
}

inline MetricBlock metric_block_from_json(const nlohmann::json& j) {
  MetricBlock b;
  b.queries = j.value("queries", std::size_t{0});
  b.missing_gold = j.value("missing_gold", std::size_t{0});
  b.degraded = j.value("degraded", std::size_t{0});
  auto opt = [&](const char* key) -> std::optional<double> {
    if (!j.contains(key) || j[key].is_null()) return std::nullopt;
    return j[key].get<double>();
  };
  b.mrr = opt("mrr");
  b.median_rank = opt("median_rank");
  b.rank_spread = j.contains("rank_variance") ? opt("rank_variance") : opt("rank_std");
  if (j.contains("p_at"))
    for (const auto& [k, v] : j["p_at"].items()) b.p_at[std::stoi(k)] = v.get<double>();
  if (j.contains("acc_at"))
    for (const auto& [k, v] : j["acc_at"].items()) b.acc_at[std::stoi(k)] = v.get<double>();
  return b;
}

/// Inverse of report_jsonl.
inline EvalReport parse_report_jsonl(std::string_view data) {
  EvalReport r;
  bool have_config = false, have_all = false;
  for (const auto& line : text::split(data, '\n')) {
    if (text::trim_view(line).empty()) continue;
    auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) throw Error("malformed report line");
    const auto kind = j.value("record", std::string{});
    if (kind == "config") {
      r.config = j.value("config", nlohmann::json::object());
      r.provenance = j.value("provenance", nlohmann::json::object());
      have_config = true;
    } else if (kind == "metrics") {
      auto b = metric_block_from_json(j);
      if (j.value("scope", std::string{}) == "all") {
        r.aggregate = b;
        r.options.p_at.clear();
        r.options.acc_at.clear();
        for (const auto& [k, v] : b.p_at) r.options.p_at.push_back(k);
        for (const auto& [k, v] : b.acc_at) r.options.acc_at.push_back(k);
        r.options.rank_metrics = j.contains("median_rank") && !j["median_rank"].is_null();
        r.options.spread = j.contains("rank_variance") ? RankSpread::variance : RankSpread::std_dev;
        have_all = true;
      } else {
        r.per_source[j.value("source", std::string{})] = b;
      }
    }
  }
  if (!have_config || !have_all) throw Error("report lacks its config or aggregate line");
  return r;
}

}  // namespace gear
