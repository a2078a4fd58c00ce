#include <gtest/gtest.h>

#include <filesystem>
#include <numeric>
#include <random>
#include <set>

#include <unistd.h>

#include "leafi/index.hpp"

namespace leafi {
namespace {

std::filesystem::path TempDir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() /
           ("leafi_index_" + std::to_string(::getpid()) + "_" + name);
  std::filesystem::create_directories(p);
  return p;
}

Index BuildRandWalk(std::size_t n, std::size_t m, std::size_t max_leaf, std::uint64_t seed = 1) {
  return build_index(generate_randwalk(n, m, seed), max_leaf, SegmentConfig(m, 8));
}

void ExpectStructurallyValid(const Index& index) {
  const auto& data = index.dataset();
  std::vector<int> seen(data.size(), 0);
  std::size_t total = 0;
  for (const auto& node : index.nodes()) {
    if (node.is_leaf()) {
      EXPECT_EQ(node.size, node.members.size());
      total += node.size;
      for (SeriesId id : node.members) {
        ++seen[id];
        const auto summ = summarize_series(data[id], index.segments());
        // Every ancestor envelope contains the member and every split rule
        // on the path routes it here.
        NodeId child = node.id;
        for (NodeId cur = node.id; cur != kNoNode; child = cur, cur = index.node(cur).parent) {
          const auto& anc = index.node(cur);
          for (std::size_t s = 0; s < summ.means.size(); ++s) {
            EXPECT_LE(anc.envelope.mean_min[s], summ.means[s]);
            EXPECT_GE(anc.envelope.mean_max[s], summ.means[s]);
          }
          if (cur != node.id) {
            const bool goes_left = summ.means[anc.split->segment] <= anc.split->threshold;
            EXPECT_EQ(goes_left ? anc.left : anc.right, child);
          }
        }
      }
    } else {
      EXPECT_EQ(node.size, index.node(node.left).size + index.node(node.right).size);
      EXPECT_TRUE(node.members.empty());
    }
  }
  EXPECT_EQ(total, data.size());
  for (int c : seen) EXPECT_EQ(c, 1);
}

TEST(BuildIndexTest, SmallDatasetIsASingleLeaf) {
  const auto index = BuildRandWalk(10, 32, 16);
  EXPECT_EQ(index.nodes().size(), 1u);
  EXPECT_TRUE(index.root().is_leaf());
  EXPECT_EQ(index.leaves(), std::vector<NodeId>{0});
}

TEST(BuildIndexTest, LeavesRespectCapacityAndPartitionIds) {
  const auto index = BuildRandWalk(100, 64, 32);
  std::size_t sum = 0;
  for (NodeId leaf : index.leaves()) {
    EXPECT_LE(index.node(leaf).size, 32u);
    sum += index.node(leaf).size;
  }
  EXPECT_EQ(sum, 100u);
  EXPECT_GT(index.leaves().size(), 2u);
  EXPECT_FALSE(index.has_oversized_leaf());
  ExpectStructurallyValid(index);
}

TEST(BuildIndexTest, LargerTreeIsValid) {
  const auto index = BuildRandWalk(3000, 64, 50, 4);
  for (NodeId leaf : index.leaves()) EXPECT_LE(index.node(leaf).size, 50u);
  ExpectStructurallyValid(index);
}

TEST(BuildIndexTest, Deterministic) {
  const auto a = BuildRandWalk(500, 32, 20, 9);
  const auto b = BuildRandWalk(500, 32, 20, 9);
  EXPECT_EQ(a.nodes(), b.nodes());
}

TEST(BuildIndexTest, IdenticalSeriesProduceAnOversizedLeaf) {
  std::vector<float> values;
  for (int i = 0; i < 10; ++i)
    for (int t = 0; t < 8; ++t) values.push_back(float(t));
  const auto index = build_index(Dataset(10, 8, values), 4, SegmentConfig(8, 4));
  EXPECT_TRUE(index.has_oversized_leaf());
  EXPECT_EQ(index.root().size, 10u);
}

TEST(BuildIndexTest, RejectsBadArguments) {
  EXPECT_THROW(build_index(generate_randwalk(10, 8, 1), 1, SegmentConfig(8, 2)), InvalidInput);
  EXPECT_THROW(build_index(generate_randwalk(10, 8, 1), 4, SegmentConfig(16, 2)), InvalidInput);
  EXPECT_THROW(build_index(std::make_shared<const Dataset>(), 4, SegmentConfig(8, 2)),
               InvalidInput);
}

TEST(ExactSearchTest, SelfQueryFindsItself) {
  const auto index = BuildRandWalk(2000, 64, 100);
  for (SeriesId j : {0u, 17u, 1999u}) {
    const auto res = exact_search(index, index.dataset()[j], 1);
    ASSERT_EQ(res.neighbors.size(), 1u);
    EXPECT_EQ(res.neighbors[0].id, j);
    EXPECT_EQ(res.neighbors[0].distance, 0.0);
  }
}

TEST(ExactSearchTest, MatchesLinearScan) {
  const auto index = BuildRandWalk(5000, 64, 100, 21);
  for (double noise : {0.1, 0.4}) {
    const auto qs = make_queries(index.dataset(), 50, noise, 5);
    for (std::size_t q = 0; q < qs.queries.size(); ++q) {
      for (std::size_t k : {1u, 5u}) {
        const auto got = exact_search(index, qs.queries[q], k).neighbors;
        const auto want = linear_scan(index.dataset(), qs.queries[q], k);
        ASSERT_EQ(got.size(), want.size());
        for (std::size_t i = 0; i < k; ++i) {
          EXPECT_EQ(got[i].id, want[i].id);
          EXPECT_NEAR(got[i].distance, want[i].distance, 1e-6 * want[i].distance);
        }
      }
    }
  }
}

TEST(ExactSearchTest, FullRecallWhenKEqualsN) {
  const auto index = BuildRandWalk(300, 32, 40);
  const auto qs = make_queries(index.dataset(), 1, 0.2, 1);
  const auto res = exact_search(index, qs.queries[0], 300);
  std::set<SeriesId> ids;
  for (std::size_t i = 0; i < res.neighbors.size(); ++i) {
    ids.insert(res.neighbors[i].id);
    if (i > 0) EXPECT_LE(res.neighbors[i - 1].distance, res.neighbors[i].distance);
  }
  EXPECT_EQ(ids.size(), 300u);
  EXPECT_EQ(pruning_ratio(res.stats), 0.0);
  EXPECT_THROW(exact_search(index, qs.queries[0], 301), InvalidInput);
  EXPECT_THROW(exact_search(index, qs.queries[0], 0), InvalidInput);
  EXPECT_THROW(exact_search(index, Series(31, 0.f), 1), InvalidInput);
}

TEST(ExactSearchTest, TiesBreakBySmallerId) {
  std::vector<float> values;
  for (int i = 0; i < 6; ++i)
    for (int t = 0; t < 4; ++t) values.push_back(i % 2 == 0 ? 1.f : -1.f);
  const auto index = build_index(Dataset(6, 4, values), 2, SegmentConfig(4, 2));
  const auto res = exact_search(index, Series{1, 1, 1, 1}, 3);
  EXPECT_EQ(res.neighbors[0].id, 0u);
  EXPECT_EQ(res.neighbors[1].id, 2u);
  EXPECT_EQ(res.neighbors[2].id, 4u);
}

TEST(PruningRatioTest, SingleLeafPrunesNothing) {
  const auto index = BuildRandWalk(50, 32, 64);
  const auto qs = make_queries(index.dataset(), 5, 0.3, 2);
  for (std::size_t q = 0; q < 5; ++q)
    EXPECT_EQ(pruning_ratio(exact_search(index, qs.queries[q]).stats), 0.0);
}

TEST(PruningRatioTest, CraftedTwoLeafIndex) {
  // Two well separated clusters; a query near the first prunes the second.
  std::vector<float> values;
  for (int i = 0; i < 8; ++i)
    for (int t = 0; t < 8; ++t) values.push_back((i < 4 ? 0.f : 10.f) + 0.01f * float(t));
  const auto index = build_index(Dataset(8, 8, values), 4, SegmentConfig(8, 2));
  ASSERT_EQ(index.leaves().size(), 2u);
  const auto res = exact_search(index, Series(8, 0.f));
  const double ratio = pruning_ratio(res.stats);
  EXPECT_GT(ratio, 0.0);
  EXPECT_LT(ratio, 1.0);
  EXPECT_EQ(ratio, 1.0 - double(res.stats.series_scanned) / 8.0);
  EXPECT_EQ(res.stats.series_scanned, 4u);
}

TEST(ExactSearchTest, TraceInvariantsAndPruningSafety) {
  const auto index = BuildRandWalk(4000, 64, 80, 33);
  const auto qs = make_queries(index.dataset(), 30, 0.3, 6);
  for (std::size_t q = 0; q < qs.queries.size(); ++q) {
    const auto res = exact_search(index, qs.queries[q], 3);
    const auto& st = res.stats;
    EXPECT_EQ(st.leaves_visited, st.leaves_searched + st.summarization_prunes + st.filter_prunes);
    EXPECT_EQ(st.filter_prunes, 0u);
    const double kth = res.neighbors.back().distance;

    // Trace bsf never increases; its leaves appear in visit order.
    const auto order = leaf_visit_order(index, qs.queries[q]);
    ASSERT_EQ(order.size(), index.leaves().size());
    for (std::size_t i = 1; i < order.size(); ++i)
      EXPECT_LE(order[i - 1].lower_bound, order[i].lower_bound);
    std::size_t pos = 0;
    for (std::size_t i = 0; i < res.trace.size(); ++i) {
      if (i > 0) EXPECT_LE(res.trace[i].bsf_before, res.trace[i - 1].bsf_before);
      while (pos < order.size() && order[pos].leaf != res.trace[i].leaf) ++pos;
      ASSERT_LT(pos, order.size());
      EXPECT_EQ(order[pos].lower_bound, res.trace[i].lower_bound);
    }

    // Every leaf that was not searched holds nothing closer than the k-th.
    std::set<NodeId> searched;
    for (const auto& v : res.trace)
      if (v.searched) searched.insert(v.leaf);
    for (NodeId leaf : index.leaves())
      if (!searched.count(leaf)) EXPECT_GE(leaf_nn_distance(index, leaf, qs.queries[q]), kth);
  }
}

TEST(IndexFileTest, RoundTripPreservesSearch) {
  const auto dir = TempDir("rt");
  const auto data = generate_randwalk(1500, 32, 3);
  save_dataset(data, dir / "data.bin");
  const auto index = build_index(data, 60, SegmentConfig(32, 8));
  save_index(index, dir / "index.json", "data.bin");
  const auto loaded = load_index(dir / "index.json");
  EXPECT_EQ(loaded.nodes(), index.nodes());
  EXPECT_EQ(loaded.leaves(), index.leaves());
  const auto qs = make_queries(data, 20, 0.2, 8);
  for (std::size_t q = 0; q < 20; ++q) {
    const auto a = exact_search(index, qs.queries[q], 2);
    const auto b = exact_search(loaded, qs.queries[q], 2);
    EXPECT_EQ(a.neighbors, b.neighbors);
    EXPECT_EQ(a.trace, b.trace);
  }
  std::filesystem::remove_all(dir);
}

TEST(IndexFileTest, DatasetHashMismatchIsRejected) {
  const auto dir = TempDir("hash");
  const auto data = generate_randwalk(200, 16, 3);
  save_dataset(data, dir / "data.bin");
  save_index(build_index(data, 20, SegmentConfig(16, 4)), dir / "index.json", "data.bin");
  save_dataset(generate_randwalk(200, 16, 4), dir / "data.bin");
  EXPECT_THROW(load_index(dir / "index.json"), ChecksumError);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace leafi
