#pragma once

// Summarization tree over a Dataset: insertion-based build with median
// splits, best-first k-NN search parameterized by a leaf gate, and the JSON
// node-table persistence format.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <limits>
#include <memory>
#include <optional>
#include <queue>
#include <string>
#include <utility>
#include <vector>

#include "leafi/core.hpp"
#include "leafi/hash.hpp"
#include "leafi/summarize.hpp"

namespace leafi {

using NodeId = std::uint32_t;
inline constexpr NodeId kNoNode = std::numeric_limits<NodeId>::max();
inline constexpr std::size_t kDefaultMaxLeafSize = 1000;
inline constexpr double kInf = std::numeric_limits<double>::infinity();

enum class NodeKind { internal, leaf };

/// Series whose mean on `segment` is <= `threshold` go to the left child.
struct SplitRule {
  std::size_t segment = 0;
  double threshold = 0;

  friend bool operator==(const SplitRule&, const SplitRule&) = default;
};

struct TreeNode {
  NodeId id = 0;
  NodeKind kind = NodeKind::leaf;
  NodeId parent = kNoNode;
  NodeEnvelope envelope;
  std::optional<SplitRule> split;
  NodeId left = kNoNode;
  NodeId right = kNoNode;
  std::vector<SeriesId> members;
  std::size_t size = 0;

  bool is_leaf() const noexcept { return kind == NodeKind::leaf; }

  friend bool operator==(const TreeNode&, const TreeNode&) = default;
};

class Index {
 public:
  Index(std::shared_ptr<const Dataset> data, SegmentConfig cfg, std::size_t max_leaf_size,
        std::vector<TreeNode> nodes, bool oversized = false)
      : data_(std::move(data)),
        cfg_(std::move(cfg)),
        max_leaf_size_(max_leaf_size),
        nodes_(std::move(nodes)),
        oversized_(oversized) {
    for (const auto& n : nodes_)
      if (n.is_leaf()) leaves_.push_back(n.id);
    leaf_ordinal_.assign(nodes_.size(), kNoNode);
    for (std::size_t i = 0; i < leaves_.size(); ++i)
      leaf_ordinal_[leaves_[i]] = static_cast<NodeId>(i);
  }

  const Dataset& dataset() const noexcept { return *data_; }
  std::shared_ptr<const Dataset> dataset_ptr() const noexcept { return data_; }
  const SegmentConfig& segments() const noexcept { return cfg_; }
  std::size_t max_leaf_size() const noexcept { return max_leaf_size_; }
  const std::vector<TreeNode>& nodes() const noexcept { return nodes_; }
  const TreeNode& node(NodeId id) const { return nodes_.at(id); }
  const TreeNode& root() const { return nodes_.front(); }

  /// Leaf node ids in ascending order.
  const std::vector<NodeId>& leaves() const noexcept { return leaves_; }
  /// Position of a leaf within `leaves()`, or kNoNode for internal nodes.
  NodeId leaf_ordinal(NodeId id) const { return leaf_ordinal_.at(id); }
  bool is_leaf(NodeId id) const { return id < nodes_.size() && nodes_[id].is_leaf(); }

  /// True when some leaf could not be split below max_leaf_size because all
  /// of its members share identical segment means.
  bool has_oversized_leaf() const noexcept { return oversized_; }

 private:
  std::shared_ptr<const Dataset> data_;
  SegmentConfig cfg_;
  std::size_t max_leaf_size_;
  std::vector<TreeNode> nodes_;
  std::vector<NodeId> leaves_;
  std::vector<NodeId> leaf_ordinal_;
  bool oversized_;
};

namespace detail {

class TreeBuilder {
 public:
  TreeBuilder(const Dataset& data, const SegmentConfig& cfg, std::size_t max_leaf)
      : data_(data), cfg_(cfg), max_leaf_(max_leaf) {
    summaries_.reserve(data.size());
    for (std::size_t i = 0; i < data.size(); ++i)
      summaries_.push_back(summarize_series(data.series(i), cfg));
    nodes_.push_back(make_node(kNoNode));
  }

  void insert(SeriesId id) {
    const auto& summ = summaries_[id];
    NodeId cur = 0;
    for (;;) {
      auto& node = nodes_[cur];
      envelope_insert_inplace(node.envelope, summ);
      ++node.size;
      if (node.is_leaf()) break;
      cur = summ.means[node.split->segment] <= node.split->threshold ? node.left : node.right;
    }
    nodes_[cur].members.push_back(id);
    if (nodes_[cur].members.size() > max_leaf_) split(cur);
  }

  std::vector<TreeNode> take_nodes() { return std::move(nodes_); }
  bool oversized() const noexcept { return oversized_; }

 private:
  TreeNode make_node(NodeId parent) {
    TreeNode n;
    n.id = static_cast<NodeId>(nodes_.size());
    n.parent = parent;
    return n;
  }

  void split(NodeId id) {
    const NodeEnvelope& env = nodes_[id].envelope;
    std::size_t seg = 0;
    double widest = -1;
    for (std::size_t i = 0; i < env.mean_min.size(); ++i) {
      const double w = env.mean_max[i] - env.mean_min[i];
      if (w > widest) {
        widest = w;
        seg = i;
      }
    }
    if (!(widest > 0)) {
      oversized_ = true;
      return;
    }

    std::vector<double> vals;
    vals.reserve(nodes_[id].members.size());
    for (SeriesId m : nodes_[id].members) vals.push_back(summaries_[m].means[seg]);
    std::sort(vals.begin(), vals.end());
    double threshold = vals[(vals.size() - 1) / 2];
    if (threshold >= vals.back()) {
      // Median ties with the maximum; split off the maximal values instead.
      threshold = *std::prev(std::lower_bound(vals.begin(), vals.end(), vals.back()));
    }

    TreeNode left = make_node(id);
    TreeNode right = make_node(id);
    right.id = left.id + 1;
    for (SeriesId m : nodes_[id].members) {
      TreeNode& child = summaries_[m].means[seg] <= threshold ? left : right;
      child.members.push_back(m);
      envelope_insert_inplace(child.envelope, summaries_[m]);
      ++child.size;
    }
    auto& parent = nodes_[id];
    parent.kind = NodeKind::internal;
    parent.split = SplitRule{seg, threshold};
    parent.left = left.id;
    parent.right = right.id;
    parent.members.clear();
    parent.members.shrink_to_fit();
    const NodeId l = left.id, r = right.id;
    nodes_.push_back(std::move(left));
    nodes_.push_back(std::move(right));
    if (nodes_[l].members.size() > max_leaf_) split(l);
    if (nodes_[r].members.size() > max_leaf_) split(r);
  }

  const Dataset& data_;
  const SegmentConfig& cfg_;
  std::size_t max_leaf_;
  std::vector<SeriesSummary> summaries_;
  std::vector<TreeNode> nodes_;
  bool oversized_ = false;
};

}  // namespace detail

/// Inserts series in id order; an overflowing leaf splits on the segment
/// with the widest mean envelope, at the median member mean.
inline Index build_index(std::shared_ptr<const Dataset> data, std::size_t max_leaf_size,
                         const SegmentConfig& cfg) {
  if (!data || data->empty()) throw InvalidInput("cannot index an empty dataset");
  if (max_leaf_size < 2) throw InvalidInput("max_leaf_size must be >= 2");
  if (cfg.length() != data->length())
    throw InvalidInput("segment config length does not match the dataset");
  detail::TreeBuilder builder(*data, cfg, max_leaf_size);
  for (std::size_t i = 0; i < data->size(); ++i) builder.insert(static_cast<SeriesId>(i));
  const bool oversized = builder.oversized();
  return Index(std::move(data), cfg, max_leaf_size, builder.take_nodes(), oversized);
}

inline Index build_index(Dataset data, std::size_t max_leaf_size, const SegmentConfig& cfg) {
  return build_index(std::make_shared<const Dataset>(std::move(data)), max_leaf_size, cfg);
}

// ---------------------------------------------------------------------------
// Search

struct Neighbor {
  SeriesId id = 0;
  double distance = 0;

  friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

struct LeafVisit {
  NodeId leaf = 0;
  double lower_bound = 0;
  bool searched = false;
  /// Smallest accepted member distance when searched; +inf when the leaf was
  /// pruned or every member was abandoned against the running cap.
  double leaf_nn = kInf;
  double bsf_before = kInf;

  friend bool operator==(const LeafVisit&, const LeafVisit&) = default;
};

using LeafVisitTrace = std::vector<LeafVisit>;

struct SearchStats {
  std::size_t dataset_size = 0;
  std::size_t leaves_visited = 0;
  std::size_t leaves_searched = 0;
  std::size_t summarization_prunes = 0;
  std::size_t filter_prunes = 0;
  std::size_t filter_inferences = 0;
  std::size_t internal_prunes = 0;
  std::size_t series_scanned = 0;
  double wall_time_us = 0;
};

struct SearchResult {
  std::vector<Neighbor> neighbors;
  LeafVisitTrace trace;
  SearchStats stats;
};

/// Fraction of the collection whose distance was never computed; abandoned
/// computations count as computed.
inline double pruning_ratio(const SearchStats& stats) {
  if (stats.dataset_size == 0) return 0;
  return 1.0 - double(stats.series_scanned) / double(stats.dataset_size);
}

namespace detail {

/// Bounded max-heap on (squared distance, id); the k-th best is the cap.
class KnnCollector {
 public:
  explicit KnnCollector(std::size_t k) : k_(k) { heap_.reserve(k); }

  double cap_sq() const noexcept { return heap_.size() < k_ ? kInf : heap_.front().first; }
  double bsf() const noexcept { return std::sqrt(cap_sq()); }

  void offer(double sq, SeriesId id) {
    const Entry e{sq, id};
    if (heap_.size() < k_) {
      heap_.push_back(e);
      std::push_heap(heap_.begin(), heap_.end());
    } else if (e < heap_.front()) {
      std::pop_heap(heap_.begin(), heap_.end());
      heap_.back() = e;
      std::push_heap(heap_.begin(), heap_.end());
    }
  }

  std::vector<Neighbor> sorted() const {
    auto tmp = heap_;
    std::sort(tmp.begin(), tmp.end());
    std::vector<Neighbor> out;
    out.reserve(tmp.size());
    for (const auto& [sq, id] : tmp) out.push_back({id, std::sqrt(sq)});
    return out;
  }

 private:
  using Entry = std::pair<double, SeriesId>;
  std::size_t k_;
  std::vector<Entry> heap_;
};

using QueueEntry = std::pair<double, NodeId>;
using NodeQueue =
    std::priority_queue<QueueEntry, std::vector<QueueEntry>, std::greater<QueueEntry>>;

inline void check_search_args(const Index& index, SeriesView q, std::size_t k) {
  if (q.size() != index.dataset().length())
    throw InvalidInput("query length does not match the dataset");
  if (k < 1 || k > index.dataset().size()) throw InvalidInput("k must be within [1, n]");
}

}  // namespace detail

/// Node-wise nearest-neighbor distance: full scan of the leaf, no abandoning.
inline double leaf_nn_distance(const Index& index, NodeId leaf, SeriesView q) {
  double best = kInf;
  const auto& data = index.dataset();
  for (SeriesId id : index.node(leaf).members)
    best = std::min(best, detail::squared_distance(q.data(), data.series(id).data(), q.size(), kInf));
  return std::sqrt(best);
}

/// The gate decides, per popped node, whether the node is pruned by its
/// lower bound and, for leaves, whether a learned filter prunes it.
template <class G>
concept LeafGate = requires(G g, double lb, double bsf, NodeId leaf, SeriesView q,
                            SearchStats& stats) {
  { g.prune_by_bound(lb, bsf) } -> std::convertible_to<bool>;
  { g.prune_by_filter(leaf, q, bsf, stats) } -> std::convertible_to<bool>;
};

struct ExactGate {
  bool prune_by_bound(double lb, double bsf) const noexcept { return lb > bsf; }
  bool prune_by_filter(NodeId, SeriesView, double, SearchStats&) const noexcept { return false; }
};

/// Best-first traversal ordered by (lower bound, node id). Child envelopes
/// are subsets of their parent's, so bounds never decrease along a path and
/// leaves pop in ascending (lower bound, leaf id) order whatever is pruned.
template <LeafGate Gate>
SearchResult best_first_search(const Index& index, SeriesView q, std::size_t k, Gate& gate,
                               bool record_trace = true) {
  detail::check_search_args(index, q, k);
  const auto t0 = std::chrono::steady_clock::now();
  const auto& cfg = index.segments();
  const auto& data = index.dataset();
  const auto qsum = summarize_series(q, cfg);

  SearchResult out;
  out.stats.dataset_size = data.size();
  detail::KnnCollector knn(k);
  detail::NodeQueue queue;
  queue.emplace(lower_bound(qsum, index.root().envelope, cfg), index.root().id);

  while (!queue.empty()) {
    const auto [lb, id] = queue.top();
    queue.pop();
    const TreeNode& node = index.node(id);
    const double bsf = knn.bsf();
    if (!node.is_leaf()) {
      if (gate.prune_by_bound(lb, bsf)) {
        ++out.stats.internal_prunes;
        continue;
      }
      for (NodeId child : {node.left, node.right})
        queue.emplace(lower_bound(qsum, index.node(child).envelope, cfg), child);
      continue;
    }

    ++out.stats.leaves_visited;
    LeafVisit visit{id, lb, false, kInf, bsf};
    if (gate.prune_by_bound(lb, bsf)) {
      ++out.stats.summarization_prunes;
    } else if (gate.prune_by_filter(id, q, bsf, out.stats)) {
      ++out.stats.filter_prunes;
    } else {
      double leaf_best = kInf;
      for (SeriesId member : node.members) {
        const double cap = knn.cap_sq();
        const double sq =
            detail::squared_distance(q.data(), data.series(member).data(), q.size(), cap);
        ++out.stats.series_scanned;
        if (sq <= cap) {
          knn.offer(sq, member);
          leaf_best = std::min(leaf_best, sq);
        }
      }
      ++out.stats.leaves_searched;
      visit.searched = true;
      visit.leaf_nn = std::sqrt(leaf_best);
    }
    if (record_trace) out.trace.push_back(visit);
  }

  out.neighbors = knn.sorted();
  out.stats.wall_time_us =
      std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

inline SearchResult exact_search(const Index& index, SeriesView q, std::size_t k = 1,
                                 bool record_trace = true) {
  ExactGate gate;
  return best_first_search(index, q, k, gate, record_trace);
}

struct LeafOrderEntry {
  NodeId leaf = 0;
  double lower_bound = 0;
};

/// Every leaf in the order best-first search pops them for this query.
inline std::vector<LeafOrderEntry> leaf_visit_order(const Index& index, SeriesView q) {
  if (q.size() != index.dataset().length())
    throw InvalidInput("query length does not match the dataset");
  const auto& cfg = index.segments();
  const auto qsum = summarize_series(q, cfg);
  std::vector<LeafOrderEntry> order;
  order.reserve(index.leaves().size());
  detail::NodeQueue queue;
  queue.emplace(lower_bound(qsum, index.root().envelope, cfg), index.root().id);
  while (!queue.empty()) {
    const auto [lb, id] = queue.top();
    queue.pop();
    const TreeNode& node = index.node(id);
    if (node.is_leaf()) {
      order.push_back({id, lb});
      continue;
    }
    for (NodeId child : {node.left, node.right})
      queue.emplace(lower_bound(qsum, index.node(child).envelope, cfg), child);
  }
  return order;
}

/// Brute-force top-k with the same (distance, id) ordering as the index.
inline std::vector<Neighbor> linear_scan(const Dataset& data, SeriesView q, std::size_t k) {
  if (q.size() != data.length()) throw InvalidInput("query length does not match the dataset");
  if (k < 1 || k > data.size()) throw InvalidInput("k must be within [1, n]");
  detail::KnnCollector knn(k);
  for (std::size_t i = 0; i < data.size(); ++i)
    knn.offer(detail::squared_distance(q.data(), data.series(i).data(), q.size(), kInf),
              static_cast<SeriesId>(i));
  return knn.sorted();
}

// ---------------------------------------------------------------------------
// Persistence: JSON node table plus a pointer to the dataset file.

inline constexpr int kIndexFormatVersion = 1;

inline nlohmann::json index_to_json(const Index& index, const std::string& dataset_path,
                                    const std::string& dataset_sha256) {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& n : index.nodes()) {
    nlohmann::json j;
    j["id"] = n.id;
    j["kind"] = n.is_leaf() ? "leaf" : "internal";
    j["parent"] = n.parent == kNoNode ? nlohmann::json(nullptr) : nlohmann::json(n.parent);
    j["split"] = n.split ? nlohmann::json{{"segment", n.split->segment},
                                          {"threshold", n.split->threshold}}
                         : nlohmann::json(nullptr);
    j["envelope"] = {{"mean_min", n.envelope.mean_min}, {"mean_max", n.envelope.mean_max}};
    j["members"] = n.is_leaf() ? nlohmann::json(n.members) : nlohmann::json(nullptr);
    nodes.push_back(std::move(j));
  }
  return {{"version", kIndexFormatVersion},
          {"dataset_path", dataset_path},
          {"dataset_sha256", dataset_sha256},
          {"max_leaf_size", index.max_leaf_size()},
          {"num_segments", index.segments().num_segments()},
          {"oversized_leaf", index.has_oversized_leaf()},
          {"nodes", std::move(nodes)}};
}

inline Index index_from_json(const nlohmann::json& j, std::shared_ptr<const Dataset> data) {
  try {
    if (j.at("version").get<int>() != kIndexFormatVersion)
      throw InvalidInput("unsupported index version");
    SegmentConfig cfg(data->length(), j.at("num_segments").get<std::size_t>());
    std::vector<TreeNode> nodes;
    for (const auto& jn : j.at("nodes")) {
      TreeNode n;
      n.id = jn.at("id").get<NodeId>();
      if (n.id != nodes.size()) throw InvalidInput("node ids must be dense and ordered");
      n.kind = jn.at("kind").get<std::string>() == "leaf" ? NodeKind::leaf : NodeKind::internal;
      n.parent = jn.at("parent").is_null() ? kNoNode : jn.at("parent").get<NodeId>();
      if (!jn.at("split").is_null())
        n.split = SplitRule{jn["split"].at("segment").get<std::size_t>(),
                            jn["split"].at("threshold").get<double>()};
      n.envelope.mean_min = jn.at("envelope").at("mean_min").get<std::vector<double>>();
      n.envelope.mean_max = jn.at("envelope").at("mean_max").get<std::vector<double>>();
      if (n.is_leaf()) n.members = jn.at("members").get<std::vector<SeriesId>>();
      nodes.push_back(std::move(n));
    }
    if (nodes.empty()) throw InvalidInput("index has no nodes");
    for (auto& n : nodes) {
      if (n.parent == kNoNode) continue;
      if (n.parent >= nodes.size()) throw InvalidInput("dangling parent id");
      auto& p = nodes[n.parent];
      (p.left == kNoNode ? p.left : p.right) = n.id;
    }
    // Sizes bottom-up: children always carry larger ids than their parent.
    std::vector<char> seen(data->size(), 0);
    for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
      if (it->is_leaf()) {
        it->size = it->members.size();
        for (SeriesId m : it->members) {
          if (m >= data->size() || seen[m]) throw InvalidInput("leaf membership is not a partition");
          seen[m] = 1;
        }
      } else {
        if (it->left == kNoNode || it->right == kNoNode || !it->split)
          throw InvalidInput("internal node missing children or split");
        it->size = nodes[it->left].size + nodes[it->right].size;
      }
    }
    if (nodes.front().size != data->size()) throw InvalidInput("index does not cover the dataset");
    return Index(std::move(data), cfg, j.at("max_leaf_size").get<std::size_t>(),
                 std::move(nodes), j.value("oversized_leaf", false));
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(std::string("malformed index document: ") + e.what());
  }
}

/// Writes the node table; `dataset_path` is stored verbatim and resolved
/// relative to the index file's directory on load when not absolute.
inline void save_index(const Index& index, const std::filesystem::path& index_path,
                       const std::filesystem::path& dataset_path) {
  const auto resolved = dataset_path.is_absolute() || !index_path.has_parent_path()
                            ? dataset_path
                            : index_path.parent_path() / dataset_path;
  detail::write_file(index_path,
                     index_to_json(index, dataset_path.generic_string(), sha256_file(resolved))
                         .dump(1));
}

inline Index load_index(const std::filesystem::path& index_path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::read_file(index_path));
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput("cannot parse " + index_path.string() + ": " + e.what());
  }
  std::filesystem::path dpath = j.at("dataset_path").get<std::string>();
  if (dpath.is_relative() && index_path.has_parent_path()) dpath = index_path.parent_path() / dpath;
  const auto bytes = detail::read_file(dpath);
  if (sha256_hex(bytes) != j.at("dataset_sha256").get<std::string>())
    throw ChecksumError("dataset " + dpath.string() + " does not match the index's sha256");
  return index_from_json(j, std::make_shared<const Dataset>(decode_dataset(bytes)));
}

}  // namespace leafi
