#pragma once

// Dictionary corpora in the reverse-dictionary shape <definition, list of terms>,
// their train/valid/test splits, and the derived search vocabulary.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "gear/error.hpp"
#include "gear/hash.hpp"
#include "gear/text.hpp"

namespace gear {

struct DictionaryEntry {
  std::string definition;
  std::vector<std::string> terms;
  /// Parallel to `terms`: the source labels each term was seen under.
  std::vector<std::vector<std::string>> sources;

  /// Union of all term labels, in order of first appearance.
  std::vector<std::string> source_labels() const {
    std::vector<std::string> out;
    for (const auto& labels : sources)
      for (const auto& l : labels)
        if (std::find(out.begin(), out.end(), l) == out.end()) out.push_back(l);
    return out;
  }

  bool has_source(std::string_view label) const {
    for (const auto& labels : sources)
      if (std::find(labels.begin(), labels.end(), label) != labels.end()) return true;
    return false;
  }
};

inline void validate(const DictionaryEntry& e) {
  if (text::trim_view(e.definition).empty()) throw CorpusError("entry has an empty definition");
  if (e.terms.empty()) throw CorpusError("entry \"" + e.definition + "\" has no terms");
  if (e.sources.size() != e.terms.size())
    throw CorpusError("entry \"" + e.definition + "\" has sources not parallel to terms");
  std::vector<std::string> folded;
  for (const auto& t : e.terms) {
    if (text::trim_view(t).empty()) throw CorpusError("entry \"" + e.definition + "\" has an empty term");
    folded.push_back(text::casefold(t));
  }
  std::sort(folded.begin(), folded.end());
  if (std::adjacent_find(folded.begin(), folded.end()) != folded.end())
    throw CorpusError("entry \"" + e.definition + "\" has duplicate terms");
}

struct Corpus {
  std::string name;
  /// Free-text description slotted into generation prompts.
  std::string description;
  std::vector<DictionaryEntry> entries;

  std::size_t size() const noexcept { return entries.size(); }
  bool empty() const noexcept { return entries.empty(); }

  /// Sum of k_i over all entries.
  std::size_t term_count() const noexcept {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.terms.size();
    return n;
  }
};

/// One (term, definition, source) row as found in flat dictionary dumps.
struct RdPair {
  std::string term;
  std::string definition;
  std::string source;
};

/// Groups pairs by whitespace-normalized definition text. Terms keep the
/// order and casing of their first appearance; repeated terms (compared
/// case-insensitively) merge their source labels.
inline Corpus aggregate_rd(std::span<const RdPair> pairs, std::string name = {}, std::string description = {}) {
  Corpus corpus{std::move(name), std::move(description), {}};
  std::unordered_map<std::string, std::size_t> by_definition;
  std::vector<std::unordered_map<std::string, std::size_t>> term_index;

  for (const auto& p : pairs) {
    auto definition = text::collapse_whitespace(p.definition);
    auto term = text::collapse_whitespace(p.term);
    if (definition.empty() || term.empty()) continue;
    const std::string& source = p.source.empty() ? corpus.name : p.source;

    auto [it, inserted] = by_definition.try_emplace(definition, corpus.entries.size());
    if (inserted) {
      corpus.entries.push_back(DictionaryEntry{definition, {}, {}});
      term_index.emplace_back();
    }
    auto& entry = corpus.entries[it->second];
    auto& terms_of = term_index[it->second];
    auto [tit, new_term] = terms_of.try_emplace(text::casefold(term), entry.terms.size());
    if (new_term) {
      entry.terms.push_back(term);
      entry.sources.emplace_back();
    }
    auto& labels = entry.sources[tit->second];
    if (!source.empty() && std::find(labels.begin(), labels.end(), source) == labels.end())
      labels.push_back(source);
  }
  return corpus;
}

enum class CorpusFormat { jsonl, csv, tsv };

inline CorpusFormat parse_corpus_format(std::string_view s) {
  if (s == "jsonl") return CorpusFormat::jsonl;
  if (s == "csv") return CorpusFormat::csv;
  if (s == "tsv") return CorpusFormat::tsv;
  throw ConfigError("unknown corpus format '" + std::string(s) + "' (expected jsonl, csv or tsv)");
}

namespace detail {

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CorpusError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct DelimitedRecord {
  std::vector<std::string> fields;
  std::size_t line = 0;
};

/// RFC 4180 style reader: quoted fields may contain separators, doubled
/// quotes and newlines.
inline std::vector<DelimitedRecord> read_delimited(std::string_view data, char sep) {
  std::vector<DelimitedRecord> records;
  DelimitedRecord current;
  std::string field;
  bool in_quotes = false;
  bool field_started = false;
  std::size_t line = 1;
  current.line = 1;

  auto end_field = [&] {
    current.fields.push_back(std::move(field));
    field.clear();
    field_started = false;
  };
  auto end_record = [&] {
    end_field();
    bool blank = current.fields.size() == 1 && text::trim_view(current.fields[0]).empty();
    if (!blank) records.push_back(std::move(current));
    current = DelimitedRecord{};
    current.line = line;
  };

  for (std::size_t i = 0; i < data.size(); ++i) {
    const char c = data[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < data.size() && data[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        if (c == '\n') ++line;
        field.push_back(c);
      }
      continue;
    }
    if (c == '"' && !field_started) {
      in_quotes = true;
      field_started = true;
    } else if (c == sep) {
      end_field();
    } else if (c == '\n') {
      ++line;
      if (!field.empty() && field.back() == '\r') field.pop_back();
      end_record();
    } else {
      field.push_back(c);
      field_started = true;
    }
  }
  if (in_quotes) throw CorpusError("unterminated quoted field", current.line);
  if (!field.empty() || !current.fields.empty()) {
    if (!field.empty() && field.back() == '\r') field.pop_back();
    end_record();
  }
  return records;
}

inline std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  for (auto& part : text::split(s, '|')) {
    auto t = text::trim(part);
    if (!t.empty()) out.push_back(std::move(t));
  }
  return out;
}

/// Expands one record into pairs. `sources` may be empty (default label),
/// a single label (applies to every term), or parallel to `terms`; a
/// parallel element may itself hold several labels.
inline void append_pairs(std::vector<RdPair>& out, const std::string& definition,
                         const std::vector<std::string>& terms,
                         const std::vector<std::vector<std::string>>& sources, std::size_t line) {
  if (text::collapse_whitespace(definition).empty()) throw CorpusError("record has an empty definition", line);
  if (terms.empty()) throw CorpusError("record has no terms", line);
  if (!sources.empty() && sources.size() != 1 && sources.size() != terms.size())
    throw CorpusError("record has " + std::to_string(sources.size()) + " sources for " +
                          std::to_string(terms.size()) + " terms",
                      line);
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (text::trim_view(terms[i]).empty()) throw CorpusError("record has an empty term", line);
    if (sources.empty()) {
      out.push_back({terms[i], definition, {}});
      continue;
    }
    const auto& labels = sources.size() == 1 ? sources[0] : sources[i];
    if (labels.empty()) out.push_back({terms[i], definition, {}});
    for (const auto& l : labels) out.push_back({terms[i], definition, l});
  }
}

inline std::vector<RdPair> parse_jsonl_pairs(std::string_view data) {
  std::vector<RdPair> pairs;
  std::size_t line_no = 0;
  for (const auto& raw_line : text::split(data, '\n')) {
    ++line_no;
    auto line = text::trim_view(raw_line);
    if (line.empty()) continue;
    nlohmann::json record;
    try {
      record = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw CorpusError(std::string("malformed JSON record: ") + e.what(), line_no);
    }
    if (!record.is_object() || !record.contains("definition") || !record["definition"].is_string())
      throw CorpusError("record lacks a string 'definition'", line_no);
    if (!record.contains("terms") || !record["terms"].is_array())
      throw CorpusError("record lacks a 'terms' list", line_no);

    std::vector<std::string> terms;
    for (const auto& t : record["terms"]) {
      if (!t.is_string()) throw CorpusError("non-string term", line_no);
      terms.push_back(t.get<std::string>());
    }
    std::vector<std::vector<std::string>> sources;
    if (record.contains("sources")) {
      const auto& s = record["sources"];
      if (!s.is_array()) throw CorpusError("'sources' must be a list", line_no);
      for (const auto& item : s) {
        if (item.is_string()) {
          sources.push_back({item.get<std::string>()});
        } else if (item.is_array()) {
          std::vector<std::string> labels;
          for (const auto& l : item) {
            if (!l.is_string()) throw CorpusError("non-string source label", line_no);
            labels.push_back(l.get<std::string>());
          }
          sources.push_back(std::move(labels));
        } else {
          throw CorpusError("source must be a label or list of labels", line_no);
        }
      }
    }
    append_pairs(pairs, record["definition"].get<std::string>(), terms, sources, line_no);
  }
  return pairs;
}

inline std::vector<RdPair> parse_delimited_pairs(std::string_view data, char sep) {
  auto records = read_delimited(data, sep);
  if (records.empty()) throw CorpusError("empty corpus file");
  const auto& header = records.front().fields;
  std::optional<std::size_t> def_col, terms_col, sources_col;
  for (std::size_t i = 0; i < header.size(); ++i) {
    auto name = text::casefold(text::trim(header[i]));
    if (name == "definition") def_col = i;
    else if (name == "terms" || name == "term") terms_col = i;
    else if (name == "sources" || name == "source") sources_col = i;
  }
  if (!def_col || !terms_col)
    throw CorpusError("header must name 'definition' and 'terms' columns", records.front().line);

  std::vector<RdPair> pairs;
  for (std::size_t r = 1; r < records.size(); ++r) {
    const auto& rec = records[r];
    auto need = std::max(*def_col, *terms_col);
    if (rec.fields.size() <= need)
      throw CorpusError("record has " + std::to_string(rec.fields.size()) + " fields, expected " +
                            std::to_string(header.size()),
                        rec.line);
    auto terms = split_list(rec.fields[*terms_col]);
    std::vector<std::vector<std::string>> sources;
    if (sources_col && *sources_col < rec.fields.size())
      for (auto& l : split_list(rec.fields[*sources_col])) sources.push_back({std::move(l)});
    append_pairs(pairs, rec.fields[*def_col], terms, sources, rec.line);
  }
  return pairs;
}

}  // namespace detail

/// Loads and aggregates a corpus file. `name` defaults to the file stem and
/// is the source label for records that carry none.
inline Corpus load_corpus(const std::filesystem::path& path, CorpusFormat format, std::string name = {},
                          std::string description = {}) {
  auto data = detail::read_file(path);
  if (text::trim_view(data).empty()) throw CorpusError("empty corpus file " + path.string());
  if (name.empty()) name = path.stem().string();

  std::vector<RdPair> pairs;
  switch (format) {
    case CorpusFormat::jsonl: pairs = detail::parse_jsonl_pairs(data); break;
    case CorpusFormat::csv: pairs = detail::parse_delimited_pairs(data, ','); break;
    case CorpusFormat::tsv: pairs = detail::parse_delimited_pairs(data, '\t'); break;
  }
  if (pairs.empty()) throw CorpusError("no records in " + path.string());
  return aggregate_rd(pairs, std::move(name), std::move(description));
}

inline nlohmann::json to_record(const DictionaryEntry& e) {
  nlohmann::json sources = nlohmann::json::array();
  for (const auto& labels : e.sources) {
    if (labels.size() == 1) sources.push_back(labels.front());
    else sources.push_back(labels);
  }
  return nlohmann::json{{"definition", e.definition}, {"terms", e.terms}, {"sources", std::move(sources)}};
}

/// Writes the canonical line-delimited form. Reloading it reproduces the
/// corpus exactly.
inline void save_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CorpusError("cannot write " + path.string());
  for (const auto& e : corpus.entries) out << to_record(e).dump() << '\n';
  if (!out) throw CorpusError("write failed for " + path.string());
}

struct CorpusManifest {
  std::string name;
  std::string description;
  std::filesystem::path path;
  CorpusFormat format = CorpusFormat::jsonl;
};

/// Reads `{"name", "description", "path"[, "format"]}`; a relative path is
/// resolved against the manifest's directory.
inline CorpusManifest load_manifest(const std::filesystem::path& manifest_path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::read_file(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw CorpusError("malformed corpus manifest " + manifest_path.string() + ": " + e.what());
  }
  CorpusManifest m;
  m.name = j.value("name", std::string{});
  m.description = j.value("description", std::string{});
  if (!j.contains("path")) throw CorpusError("corpus manifest " + manifest_path.string() + " has no 'path'");
  m.path = j["path"].get<std::string>();
  if (m.path.is_relative()) m.path = manifest_path.parent_path() / m.path;
  m.format = parse_corpus_format(j.value("format", std::string{"jsonl"}));
  return m;
}

inline Corpus load_corpus(const CorpusManifest& m) { return load_corpus(m.path, m.format, m.name, m.description); }

// ---------------------------------------------------------------------------
// Splits

struct SplitRatios {
  double train = 0.6;
  double valid = 0.2;
  double test = 0.2;
};

inline void validate(const SplitRatios& r) {
  if (r.train < 0 || r.valid < 0 || r.test < 0) throw ConfigError("split ratios must be non-negative");
  if (std::abs(r.train + r.valid + r.test - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");
}

struct CorpusSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> valid;
  std::vector<std::size_t> test;
  std::uint64_t seed = 0;

  friend bool operator==(const CorpusSplit&, const CorpusSplit&) = default;
};

/// Shuffles `ids` under `seed` and cuts it into train/valid/test:
/// floor for train and valid, remainder to test. Each part is returned in
/// ascending id order.
inline CorpusSplit partition_ids(std::vector<std::size_t> ids, std::uint64_t seed, const SplitRatios& ratios) {
  validate(ratios);
  const std::size_t n = ids.size();
  // The epsilon keeps products such as 0.6 * 1000 from flooring one short.
  const auto n_train = static_cast<std::size_t>(std::floor(ratios.train * static_cast<double>(n) + 1e-9));
  const auto n_valid = std::min(n - n_train,
                                static_cast<std::size_t>(std::floor(ratios.valid * static_cast<double>(n) + 1e-9)));
  deterministic_shuffle(ids, seed);
  CorpusSplit split;
  split.seed = seed;
  split.train.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
  split.valid.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train),
                     ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid));
  split.test.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid), ids.end());
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.valid.begin(), split.valid.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

inline CorpusSplit random_split(const Corpus& corpus, std::uint64_t seed, const SplitRatios& ratios = {}) {
  validate(ratios);
  if (corpus.size() < 3) throw ConfigError("random_split needs at least 3 entries");
  std::vector<std::size_t> ids(corpus.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
  return partition_ids(std::move(ids), seed, ratios);
}

/// Per-source splits. Ids refer to the full corpus; an entry carrying
/// several labels lands in every matching sub-corpus.
inline std::map<std::string, CorpusSplit> source_split(const Corpus& corpus, std::uint64_t seed,
                                                       const SplitRatios& ratios = {}) {
  validate(ratios);
  std::map<std::string, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto labels = corpus.entries[i].source_labels();
    if (labels.empty())
      throw CorpusError("entry \"" + corpus.entries[i].definition + "\" has no source label");
    for (const auto& l : labels) members[l].push_back(i);
  }
  std::map<std::string, CorpusSplit> out;
  for (auto& [label, ids] : members) out.emplace(label, partition_ids(std::move(ids), seed, ratios));
  return out;
}

inline nlohmann::json to_json(const CorpusSplit& s) {
  return nlohmann::json{{"seed", s.seed}, {"train", s.train}, {"valid", s.valid}, {"test", s.test}};
}

inline CorpusSplit split_from_json(const nlohmann::json& j) {
  CorpusSplit s;
  s.seed = j.at("seed").get<std::uint64_t>();
  s.train = j.at("train").get<std::vector<std::size_t>>();
  s.valid = j.at("valid").get<std::vector<std::size_t>>();
  s.test = j.at("test").get<std::vector<std::size_t>>();
  return s;
}

// ---------------------------------------------------------------------------
// Vocabulary

/// Sorted (byte order), deduplicated term list. Ids are positions.
class Vocabulary {
 public:
  Vocabulary() = default;

  explicit Vocabulary(std::vector<std::string> terms) : terms_(std::move(terms)) {
    std::sort(terms_.begin(), terms_.end());
    terms_.erase(std::unique(terms_.begin(), terms_.end()), terms_.end());
    for (std::size_t i = 0; i < terms_.size(); ++i) folded_[text::casefold(terms_[i])].push_back(i);
  }

  std::size_t size() const noexcept { return terms_.size(); }
  bool empty() const noexcept { return terms_.empty(); }
  const std::string& term(std::size_t id) const { return terms_.at(id); }
  const std::vector<std::string>& terms() const noexcept { return terms_; }

  std::optional<std::size_t> find(std::string_view term) const {
    auto it = std::lower_bound(terms_.begin(), terms_.end(), term);
    if (it == terms_.end() || *it != term) return std::nullopt;
    return static_cast<std::size_t>(it - terms_.begin());
  }

  /// Ids whose case-folded spelling equals case-folded `term`.
  std::span<const std::size_t> find_casefolded(std::string_view term) const {
    auto it = folded_.find(text::casefold(term));
    if (it == folded_.end()) return {};
    return it->second;
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.terms_ == b.terms_; }

 private:
  std::vector<std::string> terms_;
  std::unordered_map<std::string, std::vector<std::size_t>> folded_;
};

inline Vocabulary vocabulary(const Corpus& corpus) {
  std::vector<std::string> all;
  all.reserve(corpus.term_count());
  for (const auto& e : corpus.entries) all.insert(all.end(), e.terms.begin(), e.terms.end());
  return Vocabulary(std::move(all));
}

/// One shared vocabulary over several corpora.
inline Vocabulary merged_vocabulary(std::span<const Corpus> corpora) {
  std::vector<std::string> all;
  for (const auto& c : corpora)
    for (const auto& e : c.entries) all.insert(all.end(), e.terms.begin(), e.terms.end());
  return Vocabulary(std::move(all));
}

}  // namespace gear
