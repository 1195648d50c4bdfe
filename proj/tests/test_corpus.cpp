#include <gtest/gtest.h>

#include <map>
#include <random>
#include <set>

#include "support.hpp"

using namespace gear;
using gear::support::TempDir;
using gear::support::fixture;

TEST(Aggregate, GroupsPairsSharingADefinition) {
  const std::vector<RdPair> pairs{{"knowing", "alert and fully informed", "WN"},
                                  {"knowledgeable", "alert and fully informed", "WN"}};
  const auto c = aggregate_rd(pairs);
  ASSERT_EQ(c.size(), 1u);
  EXPECT_EQ(c.entries[0].terms, (std::vector<std::string>{"knowing", "knowledgeable"}));
  EXPECT_EQ(c.entries[0].source_labels(), std::vector<std::string>{"WN"});
}

TEST(Aggregate, SinglePair) {
  const std::vector<RdPair> pairs{{"x", "d", "s"}};
  const auto c = aggregate_rd(pairs);
  ASSERT_EQ(c.size(), 1u);
  EXPECT_EQ(c.entries[0].terms, std::vector<std::string>{"x"});
}

TEST(Aggregate, RepeatedTermMergesSources) {
  const std::vector<RdPair> pairs{{"midweek", "In the middle of the week", "Wik"},
                                  {"Midweek", "In the middle of the week", "CHA"}};
  const auto c = aggregate_rd(pairs);
  ASSERT_EQ(c.size(), 1u);
  const auto& e = c.entries[0];
  EXPECT_EQ(e.terms, std::vector<std::string>{"midweek"});
  ASSERT_EQ(e.sources.size(), 1u);
  EXPECT_EQ(e.sources[0], (std::vector<std::string>{"Wik", "CHA"}));
}

TEST(Aggregate, CollapsesWhitespaceBeforeGrouping) {
  const std::vector<RdPair> pairs{{"puppy", "a young dog", "WN"}, {"whelp", "  a young\t dog ", "Wik"}};
  const auto c = aggregate_rd(pairs);
  ASSERT_EQ(c.size(), 1u);
  EXPECT_EQ(c.entries[0].definition, "a young dog");
}

TEST(Aggregate, EmptySourceDefaultsToCorpusName) {
  const std::vector<RdPair> pairs{{"ice", "frozen water", ""}};
  const auto c = aggregate_rd(pairs, "MiniDict");
  EXPECT_EQ(c.entries[0].source_labels(), std::vector<std::string>{"MiniDict"});
}

TEST(Aggregate, HundredPairsOverFortyDefinitions) {
  std::mt19937_64 rng(11);
  std::vector<RdPair> pairs;
  for (int i = 0; i < 100; ++i) {
    const int d = i < 40 ? i : static_cast<int>(rng() % 40);
    pairs.push_back({"t" + std::to_string(rng() % 500), "definition number " + std::to_string(d), "S"});
  }
  std::map<std::string, std::set<std::string>> oracle;
  for (const auto& p : pairs) oracle[p.definition].insert(p.term);

  const auto c = aggregate_rd(pairs);
  ASSERT_EQ(c.size(), 40u);
  ASSERT_EQ(c.size(), oracle.size());
  for (const auto& e : c.entries) {
    const std::set<std::string> got(e.terms.begin(), e.terms.end());
    EXPECT_EQ(got, oracle.at(e.definition));
    EXPECT_EQ(got.size(), e.terms.size());
  }
}

TEST(LoadCorpus, TableOneFixture) {
  const auto c = load_corpus(fixture("table1.jsonl"), CorpusFormat::jsonl, "T");
  ASSERT_EQ(c.size(), 8u);
  const auto& midweek = c.entries[2];
  EXPECT_EQ(midweek.definition, "In the middle of the week");
  EXPECT_EQ(midweek.terms, std::vector<std::string>{"midweek"});
  EXPECT_EQ(midweek.sources[0], (std::vector<std::string>{"Wik", "CHA"}));
  // Hand count of the printed term column: 2+2+1+2+3+2+1+1.
  EXPECT_EQ(vocabulary(c).size(), 14u);
}

TEST(LoadCorpus, TenRecordsThreeSharingADefinition) {
  const auto c = load_corpus(fixture("ten_records.jsonl"), CorpusFormat::jsonl);
  EXPECT_EQ(c.size(), 8u);
  EXPECT_EQ(c.name, "ten_records");
  EXPECT_EQ(c.entries[0].terms, (std::vector<std::string>{"chair", "stool"}));
  EXPECT_EQ(c.entries[0].sources[0], (std::vector<std::string>{"WN", "Urban"}));
}

TEST(LoadCorpus, SingleRecord) {
  TempDir tmp;
  support::write_file(tmp / "one.jsonl", R"({"definition": "a piece of furniture for sitting", "terms": ["chair"]})" "\n");
  const auto c = load_corpus(tmp / "one.jsonl", CorpusFormat::jsonl);
  ASSERT_EQ(c.size(), 1u);
  EXPECT_EQ(c.entries[0].terms.size(), 1u);
  EXPECT_EQ(c.entries[0].source_labels(), std::vector<std::string>{"one"});
}

TEST(LoadCorpus, CsvWithQuotedFieldsAndLists) {
  const auto c = load_corpus(fixture("ten_records.csv"), CorpusFormat::csv, "Mini");
  ASSERT_EQ(c.size(), 3u);
  EXPECT_EQ(c.entries[0].terms, (std::vector<std::string>{"chair", "stool"}));
  EXPECT_EQ(c.entries[0].sources[1], std::vector<std::string>{"Wik"});
  EXPECT_EQ(c.entries[1].definition, "a young dog, not yet grown");
  EXPECT_EQ(c.entries[2].source_labels(), std::vector<std::string>{"Mini"});
}

TEST(LoadCorpus, TsvImporter) {
  TempDir tmp;
  support::write_file(tmp / "d.tsv", "definition\tterms\tsources\nfrozen water\tice|Ice\tWN\nhot\tWarm\tWik\n");
  const auto c = load_corpus(tmp / "d.tsv", CorpusFormat::tsv);
  ASSERT_EQ(c.size(), 2u);
  EXPECT_EQ(c.entries[0].terms, std::vector<std::string>{"ice"});
}

TEST(LoadCorpus, MalformedRecordNamesItsLine) {
  TempDir tmp;
  support::write_file(tmp / "bad.jsonl",
                      "{\"definition\": \"a\", \"terms\": [\"x\"]}\n\n{\"definition\": \"b\", \"terms\": []}\n");
  try {
    load_corpus(tmp / "bad.jsonl", CorpusFormat::jsonl);
    FAIL() << "expected CorpusError";
  } catch (const CorpusError& e) {
    EXPECT_EQ(e.line(), 3u);
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos);
  }
  support::write_file(tmp / "bad2.jsonl", "{\"definition\": \"a\", \"terms\": [\"x\"]}\nnot json\n");
  try {
    load_corpus(tmp / "bad2.jsonl", CorpusFormat::jsonl);
    FAIL() << "expected CorpusError";
  } catch (const CorpusError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
}

TEST(LoadCorpus, EmptyFileIsAnError) {
  TempDir tmp;
  support::write_file(tmp / "empty.jsonl", "\n  \n");
  EXPECT_THROW(load_corpus(tmp / "empty.jsonl", CorpusFormat::jsonl), CorpusError);
  EXPECT_THROW(load_corpus(tmp / "missing.jsonl", CorpusFormat::jsonl), CorpusError);
}

TEST(LoadCorpus, UnknownFormat) { EXPECT_THROW(parse_corpus_format("xml"), ConfigError); }

TEST(SaveCorpus, RoundTripIsIdentity) {
  TempDir tmp;
  const auto a = load_corpus(fixture("table1.jsonl"), CorpusFormat::jsonl, "T");
  save_corpus(a, tmp / "a.jsonl");
  const auto b = load_corpus(tmp / "a.jsonl", CorpusFormat::jsonl, "T");
  save_corpus(b, tmp / "b.jsonl");
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.entries[i].definition, b.entries[i].definition);
    EXPECT_EQ(a.entries[i].terms, b.entries[i].terms);
    EXPECT_EQ(a.entries[i].sources, b.entries[i].sources);
  }
  EXPECT_EQ(support::slurp(tmp / "a.jsonl"), support::slurp(tmp / "b.jsonl"));
}

TEST(SaveCorpus, RandomCorporaRoundTrip) {
  std::mt19937_64 rng(5);
  TempDir tmp;
  for (int round = 0; round < 20; ++round) {
    std::vector<RdPair> pairs;
    const int n = 1 + static_cast<int>(rng() % 60);
    for (int i = 0; i < n; ++i)
      pairs.push_back({"term \"" + std::to_string(rng() % 30) + "\"", "def\t" + std::to_string(rng() % 15),
                       std::string(1, static_cast<char>('A' + rng() % 4))});
    const auto a = aggregate_rd(pairs, "R");
    save_corpus(a, tmp / "r.jsonl");
    const auto b = load_corpus(tmp / "r.jsonl", CorpusFormat::jsonl, "R");
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_EQ(a.entries[i].definition, b.entries[i].definition);
      EXPECT_EQ(a.entries[i].terms, b.entries[i].terms);
      EXPECT_EQ(a.entries[i].sources, b.entries[i].sources);
    }
  }
}

TEST(Manifest, ResolvesRelativePath) {
  const auto m = load_manifest(fixture("corpus50.manifest.json"));
  EXPECT_EQ(m.name, "MiniDict");
  EXPECT_FALSE(m.description.empty());
  const auto c = load_corpus(m);
  EXPECT_EQ(c.size(), 50u);
  EXPECT_EQ(c.description, m.description);
}

TEST(Validate, EntryInvariants) {
  EXPECT_NO_THROW(validate(DictionaryEntry{"d", {"a", "b"}, {{"S"}, {"S"}}}));
  EXPECT_THROW(validate(DictionaryEntry{"  ", {"a"}, {{"S"}}}), CorpusError);
  EXPECT_THROW(validate(DictionaryEntry{"d", {}, {}}), CorpusError);
  EXPECT_THROW(validate(DictionaryEntry{"d", {"a", "A"}, {{"S"}, {"S"}}}), CorpusError);
  EXPECT_THROW(validate(DictionaryEntry{"d", {"a"}, {}}), CorpusError);
}

namespace {

Corpus synthetic(std::size_t n) {
  std::vector<RdPair> pairs;
  const char* labels[] = {"WN", "Wik", "Urban"};
  for (std::size_t i = 0; i < n; ++i) {
    pairs.push_back({"t" + std::to_string(i), "d" + std::to_string(i), labels[i % 3]});
    if (i % 7 == 0) pairs.push_back({"t" + std::to_string(i), "d" + std::to_string(i), labels[(i + 1) % 3]});
  }
  return aggregate_rd(pairs, "Syn");
}

void expect_partition(const CorpusSplit& s, std::vector<std::size_t> universe) {
  std::vector<std::size_t> all = s.train;
  all.insert(all.end(), s.valid.begin(), s.valid.end());
  all.insert(all.end(), s.test.begin(), s.test.end());
  std::sort(all.begin(), all.end());
  std::sort(universe.begin(), universe.end());
  EXPECT_EQ(all, universe);
  EXPECT_EQ(std::adjacent_find(all.begin(), all.end()), all.end());
}

}  // namespace

TEST(RandomSplit, Sizes) {
  auto s10 = random_split(synthetic(10), 3);
  EXPECT_EQ(s10.train.size(), 6u);
  EXPECT_EQ(s10.valid.size(), 2u);
  EXPECT_EQ(s10.test.size(), 2u);
  auto s7 = random_split(synthetic(7), 3);
  EXPECT_EQ(s7.train.size(), 4u);
  EXPECT_EQ(s7.valid.size(), 1u);
  EXPECT_EQ(s7.test.size(), 2u);
}

TEST(RandomSplit, DeterministicPerSeed) {
  const auto c = synthetic(100);
  EXPECT_EQ(random_split(c, 42), random_split(c, 42));
  EXPECT_NE(random_split(c, 42).train, random_split(c, 43).train);
}

TEST(RandomSplit, PartitionPropertyOverSeedsAndRatios) {
  std::mt19937_64 rng(17);
  for (int i = 0; i < 200; ++i) {
    const auto n = 3 + rng() % 300;
    double a = double(rng() % 1000), b = double(rng() % 1000), c = double(rng() % 1000) + 1;
    const double sum = a + b + c;
    SplitRatios r{a / sum, b / sum, 0};
    r.test = 1.0 - r.train - r.valid;
    const auto s = random_split(synthetic(n), rng(), r);
    std::vector<std::size_t> u(n);
    std::iota(u.begin(), u.end(), std::size_t{0});
    expect_partition(s, u);
    EXPECT_EQ(s.train.size(), static_cast<std::size_t>(std::floor(r.train * double(n) + 1e-9)));
  }
}

TEST(RandomSplit, Errors) {
  EXPECT_THROW(random_split(synthetic(10), 1, {0.5, 0.5, 0.5}), ConfigError);
  EXPECT_THROW(random_split(synthetic(2), 1), ConfigError);
}

TEST(RandomSplit, JsonRoundTrip) {
  const auto s = random_split(synthetic(30), 9);
  EXPECT_EQ(split_from_json(to_json(s)), s);
}

TEST(SourceSplit, TwoSources) {
  const std::vector<RdPair> pairs{{"a", "d1", "WN"}, {"b", "d2", "Urban"}, {"c", "d3", "WN"}};
  const auto m = source_split(aggregate_rd(pairs), 1);
  ASSERT_EQ(m.size(), 2u);
  EXPECT_TRUE(m.count("WN"));
  EXPECT_TRUE(m.count("Urban"));
}

TEST(SourceSplit, MultiSourceEntryJoinsEverySubCorpus) {
  const auto c = load_corpus(fixture("table1.jsonl"), CorpusFormat::jsonl);
  const auto m = source_split(c, 1);
  std::size_t arsonist = 0;
  for (std::size_t i = 0; i < c.size(); ++i)
    if (c.entries[i].definition == "An arsonist") arsonist = i;
  int appearances = 0;
  for (const auto& [label, s] : m) {
    for (const auto* part : {&s.train, &s.valid, &s.test})
      appearances += static_cast<int>(std::count(part->begin(), part->end(), arsonist));
  }
  EXPECT_EQ(appearances, 3);
}

TEST(SourceSplit, MatchesBruteForceFilter) {
  const auto c = load_corpus(fixture("corpus50.jsonl"), CorpusFormat::jsonl);
  // Hand tally of the fixture's source labels.
  const std::map<std::string, std::size_t> tally{{"Urban", 6}, {"WN", 33}, {"Wik", 21}};
  const auto m = source_split(c, 7);
  ASSERT_EQ(m.size(), tally.size());
  for (const auto& [label, s] : m) {
    std::vector<std::size_t> expected;
    for (std::size_t i = 0; i < c.size(); ++i)
      if (c.entries[i].has_source(label)) expected.push_back(i);
    EXPECT_EQ(expected.size(), tally.at(label)) << label;
    expect_partition(s, expected);
  }
}

TEST(Vocabulary, UnionSortedAndDeduplicated) {
  const std::vector<RdPair> pairs{{"a", "d1", "S"}, {"b", "d1", "S"}, {"b", "d2", "S"}, {"c", "d2", "S"}};
  const auto v = vocabulary(aggregate_rd(pairs));
  EXPECT_EQ(v.terms(), (std::vector<std::string>{"a", "b", "c"}));
  EXPECT_EQ(v.find("b"), std::optional<std::size_t>{1});
  EXPECT_EQ(v.find("z"), std::nullopt);
}

TEST(Vocabulary, SingleEntry) {
  const std::vector<RdPair> pairs{{"chair", "d", "S"}};
  EXPECT_EQ(vocabulary(aggregate_rd(pairs)).terms(), std::vector<std::string>{"chair"});
}

TEST(Vocabulary, ByteOrderAndCaseInsensitiveLookup) {
  const Vocabulary v({"apple", "Zebra", "Apple", "banana"});
  EXPECT_EQ(v.terms(), (std::vector<std::string>{"Apple", "Zebra", "apple", "banana"}));
  const auto ids = v.find_casefolded("APPLE");
  EXPECT_EQ(std::vector<std::size_t>(ids.begin(), ids.end()), (std::vector<std::size_t>{0, 2}));
}

TEST(Vocabulary, SizeBoundedByTermCount) {
  std::mt19937_64 rng(23);
  for (int round = 0; round < 50; ++round) {
    std::vector<RdPair> pairs;
    for (int i = 0; i < 40; ++i)
      pairs.push_back({"t" + std::to_string(rng() % 25), "d" + std::to_string(rng() % 12), "S"});
    const auto c = aggregate_rd(pairs);
    const auto v = vocabulary(c);
    std::set<std::string> distinct;
    bool repeats = false;
    for (const auto& e : c.entries)
      for (const auto& t : e.terms) repeats |= !distinct.insert(t).second;
    EXPECT_LE(v.size(), c.term_count());
    EXPECT_EQ(v.size() == c.term_count(), !repeats);
    for (const auto& e : c.entries)
      for (const auto& t : e.terms) EXPECT_TRUE(v.find(t).has_value());
  }
}

TEST(Vocabulary, MergedAcrossCorpora) {
  const std::vector<RdPair> a{{"x", "d", "S"}}, b{{"y", "d", "S"}, {"x", "e", "S"}};
  const std::vector<Corpus> both{aggregate_rd(a), aggregate_rd(b)};
  EXPECT_EQ(merged_vocabulary(both).terms(), (std::vector<std::string>{"x", "y"}));
}
