#include <gtest/gtest.h>

#include "leafi/bench.hpp"

namespace leafi {
namespace {

const Index& SmallIndex() {
  static const Index index = build_index(generate_randwalk(5000, 64, 8), 150, SegmentConfig(64, 8));
  return index;
}

const EnhancedIndex& SmallEnhanced() {
  static const EnhancedIndex eidx = [] {
    EnhanceOptions opt;
    opt.plan = {300, 100, 100, 5};
    opt.constants = RuntimeConstants{1e-7, 1e-5, model_bytes(64)};
    opt.threshold = 50;
    opt.train.max_epochs = 20;
    opt.seed = 5;
    return enhance(SmallIndex(), opt);
  }();
  return eidx;
}

Dataset Queries(double noise, std::uint64_t seed, std::size_t n = 40) {
  return make_queries(SmallIndex().dataset(), n, noise, seed).queries;
}

TEST(EpsilonSearchTest, ZeroEpsilonIsExact) {
  const auto qs = Queries(0.3, 1);
  for (std::size_t q = 0; q < qs.size(); ++q) {
    const auto a = epsilon_search(SmallIndex(), qs[q], 3, {0});
    const auto b = exact_search(SmallIndex(), qs[q], 3);
    EXPECT_EQ(a.neighbors, b.neighbors);
    EXPECT_EQ(a.trace, b.trace);
    EXPECT_EQ(a.stats.series_scanned, b.stats.series_scanned);
  }
  EXPECT_THROW(epsilon_search(SmallIndex(), qs[0], 1, {-1}), InvalidInput);
  EXPECT_THROW(epsilon_search(SmallIndex(), qs[0], 1, {kInf}), InvalidInput);
}

TEST(EpsilonSearchTest, AnswerWithinFactorOfExact) {
  for (double noise : {0.1, 0.4}) {
    const auto qs = Queries(noise, 2, 60);
    for (std::size_t q = 0; q < qs.size(); ++q) {
      const double exact = exact_search(SmallIndex(), qs[q], 1).neighbors[0].distance;
      for (double eps : {0.0, 0.5, 1.0, 3.0, 7.0})
        EXPECT_LE(epsilon_search(SmallIndex(), qs[q], 1, {eps}).neighbors[0].distance,
                  (1 + eps) * exact);
    }
  }
}

TEST(EpsilonSearchTest, LargerEpsilonPrunesAtLeastAsMuch) {
  const auto qs = Queries(0.2, 3, 60);
  for (std::size_t q = 0; q < qs.size(); ++q) {
    double prev = -1;
    for (double eps : {0.0, 0.5, 1.0, 2.0, 3.0, 7.0}) {
      const double pr = pruning_ratio(epsilon_search(SmallIndex(), qs[q], 1, {eps}).stats);
      EXPECT_GE(pr, prev) << "query " << q << " eps " << eps;
      prev = pr;
    }
  }
}

TEST(TuneEpsilonTest, PicksLargestPassingGridValue) {
  const auto val = Queries(0.25, 4, 50);
  const auto t = tune_epsilon(SmallIndex(), val, 0.9);
  ASSERT_EQ(t.trials.size(), 13u);
  EXPECT_EQ(t.trials.front().first, 1.0);
  EXPECT_EQ(t.trials.back().first, 7.0);
  double best = -1;
  for (const auto& [eps, recall] : t.trials)
    if (recall >= 0.9) best = std::max(best, eps);
  if (best < 0) {
    EXPECT_TRUE(t.fallback);
    EXPECT_EQ(t.epsilon, 1.0);
  } else {
    EXPECT_FALSE(t.fallback);
    EXPECT_EQ(t.epsilon, best);
  }
  const auto none = tune_epsilon(SmallIndex(), val, 1.01);
  EXPECT_TRUE(none.fallback);
  EXPECT_EQ(none.epsilon, 1.0);
}

BenchConfig SmallConfig() {
  BenchConfig cfg;
  cfg.dataset = "randwalk-small";
  cfg.sets = {{0.1, Queries(0.1, 10, 25)}, {0.3, Queries(0.3, 11, 25)}};
  cfg.epsilon = {2.0};
  return cfg;
}

TEST(BenchTest, ExactRowsHaveFullRecall) {
  auto cfg = SmallConfig();
  cfg.methods = {Method::exact};
  const auto r = run_bench(SmallIndex(), nullptr, cfg);
  ASSERT_EQ(r.rows.size(), cfg.sets.size() * cfg.targets.size());
  for (const auto& row : r.rows) {
    EXPECT_EQ(row.mean_recall, 1.0);
    EXPECT_EQ(row.method, "exact");
    EXPECT_EQ(row.queries, 25u);
  }
}

TEST(BenchTest, RowsAreOrderedAndBounded) {
  const auto cfg = SmallConfig();
  const auto r = run_bench(SmallIndex(), &SmallEnhanced(), cfg);
  ASSERT_EQ(r.rows.size(), cfg.sets.size() * cfg.methods.size() * cfg.targets.size());
  std::size_t i = 0;
  for (const auto& set : cfg.sets)
    for (Method m : cfg.methods)
      for (double t : cfg.targets) {
        const auto& row = r.rows[i++];
        EXPECT_EQ(row.noise, set.noise);
        EXPECT_EQ(row.method, method_name(m));
        EXPECT_EQ(row.target, t);
        EXPECT_GE(row.mean_recall, 0.0);
        EXPECT_LE(row.mean_recall, 1.0);
        EXPECT_GE(row.mean_pruning_ratio, 0.0);
        EXPECT_LE(row.mean_pruning_ratio, 1.0);
        EXPECT_GE(row.mean_time_us, 0.0);
      }
  EXPECT_EQ(r.config.at("filters").get<std::size_t>(), SmallEnhanced().num_filters());
}

TEST(BenchTest, NonTimingColumnsAreReproducible) {
  auto cfg = SmallConfig();
  auto a = run_bench(SmallIndex(), &SmallEnhanced(), cfg).rows;
  cfg.parallel = true;
  cfg.threads = 3;
  auto b = run_bench(SmallIndex(), &SmallEnhanced(), cfg).rows;
  ASSERT_EQ(a.size(), b.size());
  for (auto* rows : {&a, &b})
    for (auto& row : *rows) row.mean_time_us = row.median_time_us = 0;
  EXPECT_EQ(a, b);
}

TEST(BenchTest, CsvMatchesJson) {
  const auto r = run_bench(SmallIndex(), &SmallEnhanced(), SmallConfig());
  const auto csv = bench_to_csv(r);
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "dataset,method,target,noise,queries,mean_recall,mean_pruning_ratio,"
            "mean_leaves_searched,mean_time_us,median_time_us");
  const auto json = nlohmann::json::parse(bench_to_json(r).dump());
  EXPECT_EQ(parse_bench_csv(csv), bench_rows_from_json(json));
  EXPECT_EQ(parse_bench_csv(csv), r.rows);
  EXPECT_TRUE(json.at("config").contains("epsilon"));
  EXPECT_THROW(parse_bench_csv("bogus\n"), FormatError);
}

TEST(BenchTest, RejectsBadConfigs) {
  auto cfg = SmallConfig();
  EXPECT_THROW(run_bench(SmallIndex(), nullptr, cfg), MissingArtifact);
  cfg.methods = {Method::exact};
  cfg.dataset = "a,b";
  EXPECT_THROW(run_bench(SmallIndex(), nullptr, cfg), InvalidInput);
  cfg.dataset = "ok";
  cfg.targets = {1.2};
  EXPECT_THROW(run_bench(SmallIndex(), nullptr, cfg), InvalidInput);
  EXPECT_EQ(parse_method("leafi"), Method::leafi);
  EXPECT_THROW(parse_method("lsh"), InvalidInput);
}

}  // namespace
}  // namespace leafi
