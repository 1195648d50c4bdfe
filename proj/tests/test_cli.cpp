#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <sys/wait.h>

#include "support.hpp"

using gear::support::TempDir;
using gear::support::fixture;

namespace {

struct Outcome {
  int code = -1;
  std::string out;
};

std::string quote(const std::string& s) {
  std::string q = "'";
  for (char c : s) q += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return q + "'";
}

Outcome gear_cli(const std::vector<std::string>& args) {
  std::string cmd = quote(GEAR_CLI);
  for (const auto& a : args) cmd += " " + quote(a);
  cmd += " 2>&1";
  Outcome o;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return o;
  std::array<char, 4096> buf{};
  while (auto n = std::fread(buf.data(), 1, buf.size(), p)) o.out.append(buf.data(), n);
  const int status = pclose(p);
  o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return o;
}

}  // namespace

TEST(Cli, HelpExitsZero) {
  const auto r = gear_cli({"--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("build-index"), std::string::npos);
  EXPECT_EQ(gear_cli({}).code, 2);
  EXPECT_EQ(gear_cli({"frobnicate"}).code, 2);
}

TEST(Cli, IngestIsIdempotent) {
  TempDir tmp;
  const auto a = tmp / "a.jsonl", b = tmp / "b.jsonl";
  auto r = gear_cli({"ingest", fixture("ten_records.jsonl").string(), "--format", "jsonl", "--out", a.string()});
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("8 entries"), std::string::npos);
  r = gear_cli({"ingest", a.string(), "--format", "jsonl", "--out", b.string(), "--name", "ten_records"});
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(gear::support::slurp(a), gear::support::slurp(b));
}

TEST(Cli, IngestCsv) {
  TempDir tmp;
  const auto r = gear_cli({"ingest", fixture("ten_records.csv").string(), "--format", "csv", "--out",
                           (tmp / "c.jsonl").string()});
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(gear::load_corpus(tmp / "c.jsonl", gear::CorpusFormat::jsonl).size(), 3u);
}

TEST(Cli, IngestErrors) {
  TempDir tmp;
  EXPECT_EQ(gear_cli({"ingest", fixture("ten_records.jsonl").string(), "--format", "xml", "--out",
                      (tmp / "x").string()})
                .code,
            2);
  gear::support::write_file(tmp / "bad.jsonl", "{\"definition\": \"a\", \"terms\": [\"x\"]}\nnope\n");
  const auto r = gear_cli({"ingest", (tmp / "bad.jsonl").string(), "--format", "jsonl", "--out", (tmp / "y").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("line 2"), std::string::npos);
}

TEST(Cli, QueryRequiresAnIndexAndPositiveK) {
  TempDir tmp;
  const auto cfg = fixture("run_query_planted.json").string();
  auto r = gear_cli({"query", "--config", cfg, "--out-dir", (tmp / "out").string(), "--cache-dir",
                     (tmp / "cache").string(), "a piece of furniture for sitting"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("build-index"), std::string::npos);
  r = gear_cli({"query", "--config", cfg, "-k", "0", "a piece of furniture for sitting"});
  EXPECT_EQ(r.code, 2);
}

TEST(Cli, BuildIndexThenQuery) {
  TempDir tmp;
  const auto cfg = fixture("run_query_planted.json").string();
  const std::vector<std::string> dirs{"--out-dir", (tmp / "out").string(), "--cache-dir", (tmp / "cache").string()};
  auto with = [&](std::vector<std::string> args) {
    args.insert(args.end(), dirs.begin(), dirs.end());
    return gear_cli(args);
  };
  auto r = with({"build-index", "--config", cfg});
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(std::filesystem::exists(tmp / "out/index/index.json"));

  const auto first = with({"query", "--config", cfg, "-k", "5", "a piece of furniture for sitting"});
  ASSERT_EQ(first.code, 0) << first.out;
  EXPECT_NE(first.out.find("candidates: chair\n"), std::string::npos);
  EXPECT_NE(first.out.find(" 1  chair "), std::string::npos) << first.out;
  const auto second = with({"query", "--config", cfg, "-k", "5", "a piece of furniture for sitting"});
  EXPECT_EQ(first.out, second.out);
}

TEST(Cli, RunEvalAndReport) {
  TempDir tmp;
  const auto out = (tmp / "out").string();
  auto r = gear_cli({"run", "--config", fixture("run_gear_seed7.json").string(), "--out-dir", out, "--cache-dir",
                     (tmp / "cache").string()});
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(gear::support::slurp(tmp / "out/report.jsonl"),
            gear::support::slurp(gear::support::golden("gear_seed7.report.jsonl")));

  r = gear_cli({"report", (tmp / "out/report.jsonl").string()});
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(r.out, gear::support::slurp(tmp / "out/report.txt"));

  r = gear_cli({"eval", (tmp / "out/trace.jsonl").string(), "--k-list", "1,5", "--out", (tmp / "e.jsonl").string()});
  ASSERT_EQ(r.code, 0) << r.out;
  const auto re = gear::parse_report_jsonl(gear::support::slurp(tmp / "e.jsonl"));
  const auto golden = gear::parse_report_jsonl(gear::support::slurp(gear::support::golden("gear_seed7.report.jsonl")));
  EXPECT_EQ(re.aggregate.mrr, golden.aggregate.mrr);
  EXPECT_EQ(re.aggregate.p_at.at(1), golden.aggregate.p_at.at(1));
  EXPECT_EQ(re.aggregate.acc_at.at(5), golden.aggregate.acc_at.at(5));
  EXPECT_EQ(re.aggregate.median_rank, golden.aggregate.median_rank);

  EXPECT_EQ(gear_cli({"eval", (tmp / "out/trace.jsonl").string(), "--p-at", "50"}).code, 2);
}

TEST(Cli, SweepAndSplit) {
  TempDir tmp;
  const auto cfg = fixture("run_llm_gold.json").string();
  auto r = gear_cli({"run", "--config", cfg, "--sweep-m", "1..3", "--out-dir", (tmp / "out").string(), "--cache-dir",
                     (tmp / "cache").string()});
  ASSERT_EQ(r.code, 0) << r.out;
  for (int m = 1; m <= 3; ++m)
    EXPECT_TRUE(std::filesystem::exists(tmp / ("out/report_m" + std::to_string(m) + ".jsonl")));
  r = gear_cli({"split", "--config", cfg, "--out", (tmp / "s.json").string()});
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("train 30, valid 10, test 10"), std::string::npos);
  EXPECT_EQ(gear_cli({"run", "--config", cfg, "--mode", "gear"}).code, 2);
}
