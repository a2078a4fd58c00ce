#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <regex>
#include <sstream>

#include <sys/wait.h>
#include <unistd.h>

#include "leafi/bench.hpp"

namespace leafi {
namespace {

namespace fs = std::filesystem;

struct Run {
  int code = -1;
  std::string out;  ///< stdout and stderr, interleaved
};

Run Cli(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " " + LEAFI_CLI_PATH + " " + args + " 2>&1";
  Run r;
  FILE* p = ::popen(cmd.c_str(), "r");
  if (p == nullptr) return r;
  std::array<char, 4096> buf;
  while (std::size_t n = std::fread(buf.data(), 1, buf.size(), p)) r.out.append(buf.data(), n);
  const int status = ::pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("leafi_cli_" + std::to_string(::getpid()) + "_" +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string P(const std::string& name) const { return (dir_ / name).string(); }

  void BuildSmall() {
    ASSERT_EQ(Cli("gen --n 4000 --len 32 --seed 3 --out " + P("d.bin")).code, 0);
    ASSERT_EQ(Cli("build --dataset " + P("d.bin") + " --out " + P("idx.json") + " --leaf-size 150").code, 0);
    const auto r = Cli("enhance --index " + P("idx.json") + " --out " + P("enh") +
                       " --global 250 --local 60 --calibration 60 --max-epochs 15 --t-s 1e-7 --t-f 4e-6");
    ASSERT_EQ(r.code, 0) << r.out;
    ASSERT_EQ(Cli("queries --dataset " + P("d.bin") + " --count 30 --noise 0.3 --seed 9 --out " + P("q.bin")).code, 0);
  }

  fs::path dir_;
};

TEST_F(CliTest, GenIsDeterministic) {
  ASSERT_EQ(Cli("gen --n 1000 --len 64 --seed 7 --out " + P("a.bin")).code, 0);
  ASSERT_EQ(Cli("gen --n 1000 --len 64 --seed 7 --out " + P("b.bin")).code, 0);
  ASSERT_EQ(Cli("gen --n 1000 --len 64 --seed 8 --out " + P("c.bin")).code, 0);
  EXPECT_EQ(detail::read_file(P("a.bin")), detail::read_file(P("b.bin")));
  EXPECT_NE(detail::read_file(P("a.bin")), detail::read_file(P("c.bin")));
  EXPECT_EQ(load_dataset(P("a.bin")), generate_randwalk(1000, 64, 7));
}

TEST_F(CliTest, SeedComesFromEnvironment) {
  ASSERT_EQ(Cli("gen --n 50 --len 16 --out " + P("a.bin"), "LEAFI_SEED=99").code, 0);
  EXPECT_EQ(load_dataset(P("a.bin")), generate_randwalk(50, 16, 99));
  ASSERT_EQ(Cli("gen --n 50 --len 16 --out " + P("b.bin")).code == 0, true);
  EXPECT_EQ(load_dataset(P("b.bin")), generate_randwalk(50, 16, kDefaultSeed));
  const auto bad = Cli("gen --n 50 --len 16 --out " + P("c.bin"), "LEAFI_SEED=abc");
  EXPECT_NE(bad.code, 0);
  EXPECT_NE(bad.out.find("error: invalid-input:"), std::string::npos);
}

TEST_F(CliTest, ErrorsAreOneParsableLine) {
  const std::regex line(R"(error: [a-z-]+: .+\n?)");
  for (const std::string args : {"", "gen --out", "gen --n 10 --len 8 --bogus 1 --out x",
                                 "build --dataset /nonexistent --out x.json",
                                 "query --index /nonexistent --queries /nonexistent --exact"}) {
    const auto r = Cli(args);
    EXPECT_NE(r.code, 0) << args;
    EXPECT_TRUE(std::regex_match(r.out, line)) << args << " -> " << r.out;
  }
  detail::write_file(P("junk.bin"), "not a dataset");
  const auto r = Cli("build --dataset " + P("junk.bin") + " --out " + P("i.json"));
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.out.rfind("error: format:", 0), 0u) << r.out;
}

TEST_F(CliTest, TargetModeNeverBeatsExact) {
  BuildSmall();
  const auto ex = Cli("query --enhanced " + P("enh") + " --queries " + P("q.bin") + " --exact --out " + P("ex.jsonl"));
  const auto tg = Cli("query --enhanced " + P("enh") + " --queries " + P("q.bin") + " --target 0.99 --out " + P("tg.jsonl"));
  ASSERT_EQ(ex.code, 0) << ex.out;
  ASSERT_EQ(tg.code, 0) << tg.out;
  std::istringstream a(detail::read_file(P("ex.jsonl"))), b(detail::read_file(P("tg.jsonl")));
  std::string la, lb;
  std::size_t n = 0;
  while (std::getline(a, la) && std::getline(b, lb)) {
    const auto ja = nlohmann::json::parse(la), jb = nlohmann::json::parse(lb);
    EXPECT_GE(jb["neighbors"][0]["distance"].get<double>(), ja["neighbors"][0]["distance"].get<double>());
    EXPECT_EQ(ja["stats"]["filter_inferences"].get<int>(), 0);
    ++n;
  }
  EXPECT_EQ(n, 30u);
  const auto both = Cli("query --enhanced " + P("enh") + " --queries " + P("q.bin") + " --exact --target 0.9");
  EXPECT_EQ(both.code, 1);
}

TEST_F(CliTest, ZeroBudgetWarnsAndHasNoFilters) {
  BuildSmall();
  const auto r = Cli("enhance --index " + P("idx.json") + " --out " + P("enh0") + " --budget-mb 0 --t-s 1e-7 --t-f 4e-6");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("warning:"), std::string::npos);
  EXPECT_EQ(load_enhanced(P("enh0")).num_filters(), 0u);
}

TEST_F(CliTest, EnhanceArtifactsAndBench) {
  BuildSmall();
  for (const char* f : {"index.json", "selection.json", "curves.json", "manifest.json", "trainset/meta.json"})
    EXPECT_TRUE(fs::exists(dir_ / "enh" / f)) << f;
  const auto sel = nlohmann::json::parse(detail::read_file(P("enh/selection.json")));
  for (const char* key : {"t_S", "t_F", "w", "a", "th", "capacity", "selected"}) EXPECT_TRUE(sel.contains(key));
  EXPECT_EQ(sel["th"].get<int>(), 80);  // 2 * 4e-6 / 1e-7

  const auto r = Cli("bench --enhanced " + P("enh") + " --count 20 --validation 20 --noise 0.1,0.3 --csv " +
                     P("b.csv") + " --json " + P("b.json") + " --name rw");
  ASSERT_EQ(r.code, 0) << r.out;
  const auto rows = parse_bench_csv(detail::read_file(P("b.csv")));
  EXPECT_EQ(rows.size(), 2u * 3u * 3u);
  EXPECT_EQ(rows, bench_rows_from_json(nlohmann::json::parse(detail::read_file(P("b.json")))));
  for (const auto& row : rows) {
    EXPECT_EQ(row.dataset, "rw");
    if (row.method == "exact") EXPECT_EQ(row.mean_recall, 1.0);
  }
  const auto missing = Cli("bench --index " + P("idx.json") + " --count 5 --methods leafi");
  EXPECT_EQ(missing.code, 1);
  EXPECT_NE(missing.out.find("error: missing-artifact:"), std::string::npos);
}

TEST_F(CliTest, CorruptEnhancementIsRejected) {
  BuildSmall();
  std::string curves = detail::read_file(P("enh/curves.json"));
  curves[curves.size() / 2] = curves[curves.size() / 2] == '1' ? '2' : '1';
  detail::write_file(P("enh/curves.json"), curves);
  const auto r = Cli("query --enhanced " + P("enh") + " --queries " + P("q.bin") + " --target 0.9");
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.out.rfind("error: checksum:", 0), 0u) << r.out;
}

}  // namespace
}  // namespace leafi
