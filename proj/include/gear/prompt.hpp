#pragma once

// Prompt rendering for the generate step, few-shot exemplar sampling, and
// tolerant parsing of model responses into candidate term lists.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "gear/corpus.hpp"
#include "gear/error.hpp"
#include "gear/hash.hpp"
#include "gear/prompt_templates.hpp"
#include "gear/text.hpp"

namespace gear {

enum class PromptVariant { bp1, bp2, rp };

inline std::string_view to_string(PromptVariant v) noexcept {
  switch (v) {
    case PromptVariant::bp1: return "bp1";
    case PromptVariant::bp2: return "bp2";
    case PromptVariant::rp: return "rp";
  }
  return "bp1";
}

inline PromptVariant parse_prompt_variant(std::string_view s) {
  if (s == "bp1") return PromptVariant::bp1;
  if (s == "bp2") return PromptVariant::bp2;
  if (s == "rp") return PromptVariant::rp;
  throw ConfigError("unknown prompt variant '" + std::string(s) + "' (expected bp1, bp2 or rp)");
}

inline std::string_view template_for(PromptVariant v) noexcept {
  switch (v) {
    case PromptVariant::bp1: return templates::bp1_template;
    case PromptVariant::bp2: return templates::bp2_template;
    case PromptVariant::rp: return templates::rp_template;
  }
  return templates::bp1_template;
}

struct FewShotExample {
  std::string definition;
  std::string term;
  friend bool operator==(const FewShotExample&, const FewShotExample&) = default;
};

struct PromptSpec {
  PromptVariant variant = PromptVariant::bp1;
  /// Requested candidate count.
  int k = 5;
  std::string dictionary_name;
  std::string dictionary_description;
  /// Empty for bp1; required for bp2 and rp.
  std::vector<FewShotExample> fewshot;
};

inline void validate(const PromptSpec& spec) {
  if (spec.k < 1) throw ConfigError("prompt k must be >= 1");
  if (spec.dictionary_name.empty()) throw ConfigError("prompt needs a dictionary name");
  if (text::trim_view(spec.dictionary_description).empty())
    throw ConfigError("prompt needs a dictionary description");
  if (spec.variant == PromptVariant::bp1 && !spec.fewshot.empty())
    throw ConfigError("bp1 prompts take no few-shot examples");
  if (spec.variant != PromptVariant::bp1 && spec.fewshot.empty())
    throw ConfigError(std::string(to_string(spec.variant)) + " prompts need few-shot examples");
}

/// One exemplar per line: definition: "<d>" -> term: "<t>"
inline std::string serialize_examples(std::span<const FewShotExample> examples) {
  std::string out;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    if (i) out.push_back('\n');
    out += "definition: \"" + examples[i].definition + "\" -> term: \"" + examples[i].term + "\"";
  }
  return out;
}

/// Single left-to-right pass substituting the known `{name}` slots;
/// substituted text is never rescanned, and other braces are left alone.
inline std::string fill_template(std::string_view tpl,
                                 std::span<const std::pair<std::string_view, std::string_view>> slots) {
  std::string out;
  out.reserve(tpl.size() + 256);
  std::size_t i = 0;
  while (i < tpl.size()) {
    if (tpl[i] == '{') {
      bool matched = false;
      for (const auto& [name, value] : slots) {
        if (tpl.compare(i + 1, name.size(), name) == 0 && i + 1 + name.size() < tpl.size() &&
            tpl[i + 1 + name.size()] == '}') {
          out.append(value);
          i += name.size() + 2;
          matched = true;
          break;
        }
      }
      if (matched) continue;
    }
    out.push_back(tpl[i++]);
  }
  return out;
}

inline std::string render_prompt(const PromptSpec& spec, std::string_view definition) {
  if (text::trim_view(definition).empty()) throw ConfigError("cannot render a prompt for an empty definition");
  validate(spec);
  const std::string k = std::to_string(spec.k);
  const std::string examples = serialize_examples(spec.fewshot);
  const std::pair<std::string_view, std::string_view> slots[] = {
      {"definition", definition},
      {"k", k},
      {"dictionary", spec.dictionary_name},
      {"description", spec.dictionary_description},
      {"examples", examples},
  };
  return fill_template(template_for(spec.variant), slots);
}

/// Deterministic exemplar sample from `pool` (entry ids into `corpus`).
/// The pool is shuffled under `seed` and the first `n` entries whose
/// definition differs from `exclude` are taken, so every query of a run
/// sees the same exemplars unless one of them is the query itself.
inline std::vector<FewShotExample> sample_fewshot(const Corpus& corpus, std::span<const std::size_t> pool, int n,
                                                  std::uint64_t seed, std::string_view exclude) {
  if (n < 1) throw ConfigError("few-shot count must be >= 1");
  std::vector<std::size_t> order(pool.begin(), pool.end());
  deterministic_shuffle(order, seed);
  std::vector<FewShotExample> out;
  for (auto id : order) {
    if (out.size() == static_cast<std::size_t>(n)) break;
    const auto& e = corpus.entries.at(id);
    if (e.definition == exclude) continue;
    out.push_back({e.definition, e.terms.front()});
  }
  if (out.size() < static_cast<std::size_t>(n))
    throw ConfigError("corpus has only " + std::to_string(out.size()) + " entries available for " +
                      std::to_string(n) + " few-shot examples");
  return out;
}

inline std::vector<FewShotExample> sample_fewshot(const Corpus& corpus, int n, std::uint64_t seed,
                                                  std::string_view exclude) {
  std::vector<std::size_t> all(corpus.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return sample_fewshot(corpus, all, n, seed, exclude);
}

// ---------------------------------------------------------------------------
// Response parsing

struct CandidateSet {
  std::string definition;
  /// Lowercase, trimmed, deduplicated, at most k.
  std::vector<std::string> candidates;
  std::string raw_response;
  PromptVariant variant = PromptVariant::bp1;
  /// Usage sentences, parallel to `candidates` when the response had them.
  std::optional<std::vector<std::string>> examples;
  /// Set when no JSON object could be parsed and the line fallback was used.
  bool degraded = false;
};

namespace detail {

/// End (one past) of the brace-balanced object starting at `start`, or npos.
/// Both quote styles delimit strings.
inline std::size_t balanced_object_end(std::string_view s, std::size_t start) {
  int depth = 0;
  char quote = 0;
  for (std::size_t i = start; i < s.size(); ++i) {
    const char c = s[i];
    if (quote) {
      if (c == '\\') ++i;
      else if (c == quote) quote = 0;
      continue;
    }
    if (c == '"' || c == '\'') quote = c;
    else if (c == '{') ++depth;
    else if (c == '}' && --depth == 0) return i + 1;
  }
  return std::string_view::npos;
}

/// Rewrites single-quoted strings to double-quoted ones and drops trailing
/// commas before a closing bracket.
inline std::string relax_json(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  char quote = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const char c = s[i];
    if (quote) {
      if (c == '\\' && i + 1 < s.size()) {
        if (quote == '\'' && s[i + 1] == '\'') {
          out.push_back('\'');
        } else {
          out.push_back(c);
          out.push_back(s[i + 1]);
        }
        ++i;
      } else if (c == quote) {
        out.push_back('"');
        quote = 0;
      } else if (c == '"' && quote == '\'') {
        out += "\\\"";
      } else {
        out.push_back(c);
      }
      continue;
    }
    if (c == '"' || c == '\'') {
      quote = c;
      out.push_back('"');
    } else if (c == ']' || c == '}') {
      auto last = out.find_last_not_of(" \t\r\n");
      if (last != std::string::npos && out[last] == ',') out.erase(last, 1);
      out.push_back(c);
    } else {
      out.push_back(c);
    }
  }
  return out;
}

inline std::optional<nlohmann::json> first_json_object(std::string_view raw) {
  for (std::size_t pos = raw.find('{'); pos != std::string_view::npos; pos = raw.find('{', pos + 1)) {
    const auto end = balanced_object_end(raw, pos);
    if (end == std::string_view::npos) continue;
    const auto candidate = raw.substr(pos, end - pos);
    auto parsed = nlohmann::json::parse(candidate, nullptr, false);
    if (parsed.is_discarded()) parsed = nlohmann::json::parse(relax_json(candidate), nullptr, false);
    if (!parsed.is_discarded() && parsed.is_object()) return parsed;
  }
  return std::nullopt;
}

inline std::string clean_candidate(std::string_view s) { return text::casefold(text::collapse_whitespace(s)); }

}  // namespace detail

/// Extracts the first well-formed JSON object in `raw` (code fences and
/// surrounding prose are skipped) and reads its `terms` list. Flat string
/// lists and lists of {"term", "example"} objects are both accepted for any
/// variant.
inline CandidateSet parse_candidates(std::string_view raw, PromptVariant variant, int k) {
  if (k < 1) throw ConfigError("candidate count k must be >= 1");
  if (text::trim_view(raw).empty()) throw ParseFailure("empty response");
  auto obj = detail::first_json_object(raw);
  if (!obj) throw ParseFailure("no JSON object in response");
  if (!obj->contains("terms") || !(*obj)["terms"].is_array() || (*obj)["terms"].empty())
    throw ParseFailure("response has no non-empty 'terms' list");

  CandidateSet out;
  out.raw_response = std::string(raw);
  out.variant = variant;
  std::vector<std::string> examples;
  bool any_example = false;
  std::unordered_set<std::string> seen;
  for (const auto& item : (*obj)["terms"]) {
    std::string term, example;
    if (item.is_string()) {
      term = item.get<std::string>();
    } else if (item.is_object() && item.contains("term") && item["term"].is_string()) {
      term = item["term"].get<std::string>();
      if (item.contains("example") && item["example"].is_string()) {
        example = item["example"].get<std::string>();
        any_example = true;
      }
    } else {
      continue;
    }
    auto cleaned = detail::clean_candidate(term);
    if (cleaned.empty() || !seen.insert(cleaned).second) continue;
    out.candidates.push_back(std::move(cleaned));
    examples.push_back(text::collapse_whitespace(example));
    if (out.candidates.size() == static_cast<std::size_t>(k)) break;
  }
  if (out.candidates.empty()) throw ParseFailure("response 'terms' list holds no usable terms");
  if (any_example) out.examples = std::move(examples);
  return out;
}

/// Best-effort reading of a non-JSON response: every non-empty line is a
/// candidate once list markers and quotes are stripped. Marked degraded.
inline CandidateSet fallback_candidates(std::string_view raw, PromptVariant variant, int k) {
  CandidateSet out;
  out.raw_response = std::string(raw);
  out.variant = variant;
  out.degraded = true;
  std::unordered_set<std::string> seen;
  for (const auto& line : text::split(raw, '\n')) {
    std::string_view s = text::trim_view(line);
    while (!s.empty() && (s.front() == '-' || s.front() == '*' || s.front() == '#')) s = text::trim_view(s.substr(1));
    std::size_t digits = 0;
    while (digits < s.size() && s[digits] >= '0' && s[digits] <= '9') ++digits;
    if (digits > 0 && digits < s.size() && (s[digits] == '.' || s[digits] == ')')) s = text::trim_view(s.substr(digits + 1));
    while (!s.empty() && (s.back() == ',' || s.back() == '"' || s.back() == '\'')) s.remove_suffix(1);
    while (!s.empty() && (s.front() == '"' || s.front() == '\'')) s.remove_prefix(1);
    if (s.starts_with("```")) continue;
    auto cleaned = detail::clean_candidate(s);
    if (cleaned.empty() || !seen.insert(cleaned).second) continue;
    out.candidates.push_back(std::move(cleaned));
    if (out.candidates.size() == static_cast<std::size_t>(k)) break;
  }
  return out;
}

}  // namespace gear
