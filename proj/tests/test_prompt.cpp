#include <gtest/gtest.h>

#include <set>

#include "support.hpp"

using namespace gear;
using gear::support::fixture;
using gear::support::golden;
using gear::support::prompts_dir;
using gear::support::slurp;

namespace {

PromptSpec golden_spec(PromptVariant v) {
  PromptSpec s;
  s.variant = v;
  s.k = 5;
  s.dictionary_name = "MiniDict";
  s.dictionary_description = "A small general-purpose English dictionary with informal slang entries.";
  if (v != PromptVariant::bp1) s.fewshot = {{"frozen water", "ice"}, {"the season after summer", "autumn"}};
  return s;
}

}  // namespace

TEST(Templates, EmbeddedCopiesMatchPromptFiles) {
  for (auto v : {PromptVariant::bp1, PromptVariant::bp2, PromptVariant::rp}) {
    const auto file = prompts_dir() / (std::string(to_string(v)) + ".txt");
    EXPECT_EQ(std::string(template_for(v)), slurp(file)) << file;
  }
}

TEST(Render, ByteIdenticalToGoldens) {
  for (auto v : {PromptVariant::bp1, PromptVariant::bp2, PromptVariant::rp}) {
    const auto file = golden("render_" + std::string(to_string(v)) + ".txt");
    EXPECT_EQ(render_prompt(golden_spec(v), "a young dog"), slurp(file)) << file;
  }
}

TEST(Render, Anchors) {
  const auto bp1 = render_prompt(golden_spec(PromptVariant::bp1), "a young dog");
  const auto bp2 = render_prompt(golden_spec(PromptVariant::bp2), "a young dog");
  const auto rp = render_prompt(golden_spec(PromptVariant::rp), "a young dog");
  for (const auto* p : {&bp1, &bp2, &rp}) EXPECT_NE(p->find("Only give me a list back"), std::string::npos);
  EXPECT_EQ(bp1.find("These are some examples of definitions"), std::string::npos);
  EXPECT_NE(bp2.find("These are some examples of definitions"), std::string::npos);
  EXPECT_NE(rp.find("These are some examples of definitions"), std::string::npos);
  EXPECT_NE(rp.find("provide an example usage in a sentence"), std::string::npos);
  EXPECT_EQ(bp2.find("provide an example usage in a sentence"), std::string::npos);
  EXPECT_NE(bp2.find("definition: \"frozen water\" -> term: \"ice\"\ndefinition: \"the season after summer\""),
            std::string::npos);
}

TEST(Render, NoUnfilledSlots) {
  for (auto v : {PromptVariant::bp1, PromptVariant::bp2, PromptVariant::rp}) {
    const auto p = render_prompt(golden_spec(v), "a young dog");
    for (const char* slot : {"{definition}", "{k}", "{dictionary}", "{description}", "{examples}"})
      EXPECT_EQ(p.find(slot), std::string::npos) << slot;
  }
}

TEST(Render, SubstitutedTextIsNotRescanned) {
  const auto p = render_prompt(golden_spec(PromptVariant::bp1), "the {k} of {dictionary}");
  EXPECT_NE(p.find("Given the definition the {k} of {dictionary}, generate"), std::string::npos);
}

TEST(Render, DistinctDefinitionsGiveDistinctPrompts) {
  const auto c = load_corpus(fixture("corpus50.jsonl"), CorpusFormat::jsonl);
  for (auto v : {PromptVariant::bp1, PromptVariant::bp2, PromptVariant::rp}) {
    std::set<std::string> seen;
    for (const auto& e : c.entries) EXPECT_TRUE(seen.insert(render_prompt(golden_spec(v), e.definition)).second);
  }
}

TEST(Render, SpecErrors) {
  auto s = golden_spec(PromptVariant::bp2);
  EXPECT_THROW(render_prompt(s, "   "), ConfigError);
  s.k = 0;
  EXPECT_THROW(render_prompt(s, "x"), ConfigError);
  s = golden_spec(PromptVariant::bp2);
  s.fewshot.clear();
  EXPECT_THROW(render_prompt(s, "x"), ConfigError);
  s = golden_spec(PromptVariant::bp1);
  s.fewshot = {{"a", "b"}};
  EXPECT_THROW(render_prompt(s, "x"), ConfigError);
  s = golden_spec(PromptVariant::rp);
  s.dictionary_description = " ";
  EXPECT_THROW(render_prompt(s, "x"), ConfigError);
  EXPECT_THROW(parse_prompt_variant("bp3"), ConfigError);
}

TEST(FewShot, DeterministicAndExcludesQuery) {
  const auto c = load_corpus(fixture("corpus50.jsonl"), CorpusFormat::jsonl);
  const auto& query = c.entries[3].definition;
  EXPECT_EQ(sample_fewshot(c, 5, 99, query), sample_fewshot(c, 5, 99, query));
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto shots = sample_fewshot(c, 5, seed, query);
    ASSERT_EQ(shots.size(), 5u);
    std::set<std::string> defs;
    for (const auto& s : shots) {
      EXPECT_NE(s.definition, query);
      defs.insert(s.definition);
    }
    EXPECT_EQ(defs.size(), 5u);
  }
}

TEST(FewShot, PoolRestrictsSamples) {
  const auto c = load_corpus(fixture("corpus50.jsonl"), CorpusFormat::jsonl);
  const std::vector<std::size_t> pool{4, 9, 16, 25, 36, 49};
  std::set<std::string> allowed;
  for (auto id : pool) allowed.insert(c.entries[id].definition);
  for (std::uint64_t seed = 0; seed < 100; ++seed)
    for (const auto& s : sample_fewshot(c, pool, 5, seed, c.entries[9].definition)) {
      EXPECT_TRUE(allowed.count(s.definition));
      EXPECT_NE(s.definition, c.entries[9].definition);
    }
}

TEST(FewShot, TooSmallPool) {
  const auto c = load_corpus(fixture("table1.jsonl"), CorpusFormat::jsonl);
  EXPECT_THROW(sample_fewshot(c, 8, 1, c.entries[0].definition), ConfigError);
  EXPECT_NO_THROW(sample_fewshot(c, 7, 1, c.entries[0].definition));
  EXPECT_THROW(sample_fewshot(c, 0, 1, ""), ConfigError);
}

TEST(Parse, PlainObject) {
  const auto c = parse_candidates(R"({"terms": ["puppy", "whelp", "pup"]})", PromptVariant::bp1, 5);
  EXPECT_EQ(c.candidates, (std::vector<std::string>{"puppy", "whelp", "pup"}));
  EXPECT_FALSE(c.degraded);
  EXPECT_FALSE(c.examples.has_value());
}

TEST(Parse, FencedWithProseLowercasedAndDeduplicated) {
  const auto c = parse_candidates("Sure! ```json {\"terms\":[\"Chair\",\"chair\",\"stool\"]}``` hope that helps",
                                  PromptVariant::bp1, 5);
  EXPECT_EQ(c.candidates, (std::vector<std::string>{"chair", "stool"}));
}

TEST(Parse, TruncatesToK) {
  const auto c = parse_candidates(R"({"terms": ["a", "b", "c", "d"]})", PromptVariant::bp2, 2);
  EXPECT_EQ(c.candidates, (std::vector<std::string>{"a", "b"}));
}

TEST(Parse, SingleQuotesAndTrailingComma) {
  const auto c = parse_candidates("{'terms': ['ice', 'frost',]}", PromptVariant::bp1, 5);
  EXPECT_EQ(c.candidates, (std::vector<std::string>{"ice", "frost"}));
}

TEST(Parse, SkipsUnbalancedPrefix) {
  const auto c = parse_candidates("{ oops\n{\"terms\": [\"  Ocean  \"]}", PromptVariant::bp1, 5);
  EXPECT_EQ(c.candidates, std::vector<std::string>{"ocean"});
}

TEST(Parse, RpObjectsKeepExamples) {
  const auto c = parse_candidates(
      R"({"terms": [{"term": "Puppy", "example": "the puppy  slept"}, {"term": "pup", "example": "a pup"}]})",
      PromptVariant::rp, 5);
  EXPECT_EQ(c.candidates, (std::vector<std::string>{"puppy", "pup"}));
  ASSERT_TRUE(c.examples.has_value());
  EXPECT_EQ(*c.examples, (std::vector<std::string>{"the puppy slept", "a pup"}));
}

TEST(Parse, Failures) {
  EXPECT_THROW(parse_candidates("", PromptVariant::bp1, 5), ParseFailure);
  EXPECT_THROW(parse_candidates("chair, stool", PromptVariant::bp1, 5), ParseFailure);
  EXPECT_THROW(parse_candidates(R"({"words": ["a"]})", PromptVariant::bp1, 5), ParseFailure);
  EXPECT_THROW(parse_candidates(R"({"terms": []})", PromptVariant::bp1, 5), ParseFailure);
  EXPECT_THROW(parse_candidates(R"({"terms": [" ", 3]})", PromptVariant::bp1, 5), ParseFailure);
  EXPECT_THROW(parse_candidates(R"({"terms": ["a"]})", PromptVariant::bp1, 0), ConfigError);
}

TEST(Parse, LineFallback) {
  const auto c = fallback_candidates("Here you go:\n1. Puppy\n- \"whelp\",\n```\n* pup\npuppy", PromptVariant::bp1, 5);
  EXPECT_TRUE(c.degraded);
  EXPECT_EQ(c.candidates, (std::vector<std::string>{"here you go:", "puppy", "whelp", "pup"}));
}
