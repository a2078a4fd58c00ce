#pragma once

// Training data for the learned filters: global queries sampled from the
// whole collection, local queries sampled from each selected leaf, and their
// node-wise nearest-neighbor distances collected in two passes.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "leafi/core.hpp"
#include "leafi/index.hpp"
#include "leafi/parallel.hpp"

namespace leafi {

struct NoiseRange {
  double lo = 0.1;
  double hi = 0.4;

  void validate() const {
    if (!(lo >= 0 && lo <= hi && hi <= 1)) throw InvalidInput("noise range must satisfy 0 <= lo <= hi <= 1");
  }
};

/// Query budget per filter. n_q(l) counts queries per selected leaf.
struct SplitPlan {
  std::size_t global_count = 1500;
  std::size_t local_count = 500;
  std::size_t calibration_count = 300;
  /// Every `val_stride`-th combined example goes to validation (4:1 at 5).
  std::size_t val_stride = 5;

  std::size_t total() const noexcept { return global_count + local_count; }
  double ratio() const noexcept { return double(global_count) / double(local_count); }
  std::size_t training_global() const noexcept { return global_count - calibration_count; }

  void validate() const {
    if (calibration_count == 0) throw InvalidPlan("calibration set is empty");
    if (calibration_count >= global_count)
      throw InvalidPlan("calibration count must be smaller than the global query count");
    if (val_stride < 2) throw InvalidPlan("validation stride must be >= 2");
  }
};

struct GeneratedQueries {
  Dataset queries;
  std::vector<double> noise_levels;
  std::vector<SeriesId> source_ids;
};

namespace detail {

// An empty pool samples from the whole collection.
inline GeneratedQueries noisy_samples(const Dataset& data, std::span<const SeriesId> pool,
                                      std::size_t n, NoiseRange range, std::uint64_t seed) {
  range.validate();
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, (pool.empty() ? data.size() : pool.size()) - 1);
  std::uniform_real_distribution<double> level(range.lo, range.hi);
  GeneratedQueries out;
  std::vector<float> values;
  values.reserve(n * data.length());
  for (std::size_t q = 0; q < n; ++q) {
    const SeriesId id = pool.empty() ? static_cast<SeriesId>(pick(rng)) : pool[pick(rng)];
    const double lv = range.lo == range.hi ? range.lo : level(rng);
    out.source_ids.push_back(id);
    out.noise_levels.push_back(lv);
    append_noisy(data.series(id), lv, rng, values);
  }
  out.queries = Dataset(n, data.length(), std::move(values));
  return out;
}

}  // namespace detail

/// Uniform sources from the whole collection, each with its own noise level
/// drawn uniformly from `range`.
inline GeneratedQueries generate_global_queries(const Dataset& data, std::size_t n,
                                                NoiseRange range, std::uint64_t seed) {
  if (data.empty()) throw InvalidInput("cannot sample queries from an empty dataset");
  if (n < 1) throw InvalidInput("query count must be >= 1");
  return detail::noisy_samples(data, {}, n, range, seed);
}

/// Sources drawn with replacement from the leaf's members.
inline GeneratedQueries generate_local_queries(const Index& index, NodeId leaf, std::size_t n,
                                               NoiseRange range, std::uint64_t seed) {
  if (!index.is_leaf(leaf)) throw InvalidInput("unknown leaf id " + std::to_string(leaf));
  const auto& members = index.node(leaf).members;
  if (members.empty()) throw InvalidInput("leaf " + std::to_string(leaf) + " is empty");
  if (n < 1) throw InvalidInput("query count must be >= 1");
  return detail::noisy_samples(index.dataset(), members, n, range, seed);
}

/// Global queries with their node-wise nearest-neighbor distances.
///
/// Rows [calibration_begin, size) are the calibration queries. For those,
/// d^L is known for every leaf so searches can be replayed exactly; for
/// training rows it is known for every selected leaf and for the
/// non-selected leaves exact search had to scan.
struct GlobalTrainSet {
  GeneratedQueries generated;
  std::size_t calibration_begin = 0;
  std::vector<NodeId> selected;
  std::vector<NodeId> leaves;
  /// Row-major [query][leaf ordinal]; NaN where not collected.
  std::vector<double> leaf_nn;
  std::vector<double> nn_distance;
  /// Every leaf in best-first pop order, with its lower bound.
  std::vector<std::vector<LeafOrderEntry>> skeletons;

  std::size_t size() const noexcept { return nn_distance.size(); }
  std::size_t calibration_size() const noexcept { return size() - calibration_begin; }
  bool is_calibration(std::size_t q) const noexcept { return q >= calibration_begin; }
  const Dataset& queries() const noexcept { return generated.queries; }

  double d_L(std::size_t q, std::size_t leaf_ordinal) const {
    return leaf_nn[q * leaves.size() + leaf_ordinal];
  }
  bool has_d_L(std::size_t q, std::size_t leaf_ordinal) const {
    return !std::isnan(d_L(q, leaf_ordinal));
  }
};

struct LocalTrainSet {
  NodeId leaf = 0;
  GeneratedQueries generated;
  std::vector<double> leaf_nn;

  const Dataset& queries() const noexcept { return generated.queries; }
};

namespace detail {

inline std::vector<NodeId> checked_selection(const Index& index, std::vector<NodeId> selected) {
  std::sort(selected.begin(), selected.end());
  if (std::adjacent_find(selected.begin(), selected.end()) != selected.end())
    throw InvalidInput("selected leaves contain duplicates");
  for (NodeId leaf : selected)
    if (!index.is_leaf(leaf)) throw InvalidInput("selected id " + std::to_string(leaf) + " is not a leaf");
  return selected;
}

}  // namespace detail

/// Two-pass target collection.
///
/// Pass 1 scans every selected leaf against every global query. Pass 2
/// replays exact best-first search per query: pruning by bound against the
/// running best, reusing pass-1 distances and scanning only non-selected
/// leaves that survive. Calibration queries additionally get d^L for every
/// leaf so that any filtered search can later be simulated offline.
inline GlobalTrainSet collect_targets(const Index& index, std::vector<NodeId> selected,
                                      GeneratedQueries global, std::size_t calibration_count,
                                      std::size_t threads = 0) {
  if (global.queries.length() != index.dataset().length())
    throw InvalidInput("global query length does not match the dataset");
  const std::size_t nq = global.queries.size();
  if (calibration_count > nq) throw InvalidPlan("calibration count exceeds the global query count");

  GlobalTrainSet set;
  set.selected = detail::checked_selection(index, std::move(selected));
  set.leaves = index.leaves();
  set.calibration_begin = nq - calibration_count;
  const std::size_t nl = set.leaves.size();
  set.leaf_nn.assign(nq * nl, std::numeric_limits<double>::quiet_NaN());
  set.nn_distance.assign(nq, kInf);
  set.skeletons.resize(nq);
  const Dataset& qs = global.queries;

  // Pass 1: per selected leaf; each leaf writes its own column.
  parallel_for(set.selected.size(), threads, [&](std::size_t s) {
    const NodeId leaf = set.selected[s];
    const std::size_t col = index.leaf_ordinal(leaf);
    for (std::size_t q = 0; q < nq; ++q)
      set.leaf_nn[q * nl + col] = leaf_nn_distance(index, leaf, qs[q]);
  });

  // Pass 2: per query; each query writes its own row.
  parallel_for(nq, threads, [&](std::size_t q) {
    auto& skeleton = set.skeletons[q];
    skeleton = leaf_visit_order(index, qs[q]);
    double* row = set.leaf_nn.data() + q * nl;
    const bool full = set.is_calibration(q);
    double bsf = kInf;
    for (const auto& step : skeleton) {
      const std::size_t col = index.leaf_ordinal(step.leaf);
      if (!full && step.lower_bound > bsf) continue;
      if (std::isnan(row[col])) row[col] = leaf_nn_distance(index, step.leaf, qs[q]);
      if (step.lower_bound <= bsf) bsf = std::min(bsf, row[col]);
    }
    set.nn_distance[q] = bsf;
  });

  set.generated = std::move(global);
  return set;
}

inline LocalTrainSet collect_local(const Index& index, NodeId leaf, std::size_t n,
                                   NoiseRange range, std::uint64_t seed) {
  LocalTrainSet local;
  local.leaf = leaf;
  local.generated = generate_local_queries(index, leaf, n, range, seed);
  local.leaf_nn.reserve(n);
  for (std::size_t q = 0; q < n; ++q)
    local.leaf_nn.push_back(leaf_nn_distance(index, leaf, local.queries()[q]));
  return local;
}

/// Inputs and targets for one filter. Views point into the query sets the
/// data was assembled from, which must outlive it.
struct FilterTrainingData {
  std::vector<SeriesView> train_inputs, val_inputs, cal_inputs;
  std::vector<double> train_targets, val_targets, cal_targets;
  /// Global query rows of the calibration examples.
  std::vector<std::size_t> cal_rows;
};

/// Training global queries followed by the leaf's local queries; every
/// `plan.val_stride`-th example of that sequence is held out for validation.
/// Calibration examples are the calibration global queries, in row order.
inline FilterTrainingData assemble_filter_training(const Index& index, NodeId leaf,
                                                   const GlobalTrainSet& global,
                                                   const LocalTrainSet& local,
                                                   const SplitPlan& plan) {
  plan.validate();
  if (global.calibration_size() == 0) throw InvalidPlan("calibration set is empty");
  if (local.leaf != leaf) throw InvalidInput("local queries belong to a different leaf");
  if (!std::binary_search(global.selected.begin(), global.selected.end(), leaf))
    throw InvalidInput("leaf " + std::to_string(leaf) + " was not selected");
  const std::size_t col = index.leaf_ordinal(leaf);

  FilterTrainingData out;
  std::size_t k = 0;
  auto add = [&](SeriesView x, double target) {
    const bool val = (k++ % plan.val_stride) == plan.val_stride - 1;
    (val ? out.val_inputs : out.train_inputs).push_back(x);
    (val ? out.val_targets : out.train_targets).push_back(target);
  };
  for (std::size_t q = 0; q < global.calibration_begin; ++q) add(global.queries()[q], global.d_L(q, col));
  for (std::size_t q = 0; q < local.queries().size(); ++q) add(local.queries()[q], local.leaf_nn[q]);
  for (std::size_t q = global.calibration_begin; q < global.size(); ++q) {
    out.cal_inputs.push_back(global.queries()[q]);
    out.cal_targets.push_back(global.d_L(q, col));
    out.cal_rows.push_back(q);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Persistence

namespace detail {

inline nlohmann::json nullable(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

inline double from_nullable(const nlohmann::json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

inline void write_lines(const std::filesystem::path& path, const std::vector<nlohmann::json>& rows) {
  std::string text;
  for (const auto& r : rows) {
    text += r.dump();
    text += '\n';
  }
  write_file(path, text);
}

inline std::vector<nlohmann::json> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<nlohmann::json> rows;
  std::string line;
  std::uint64_t offset = 0;
  while (std::getline(in, line)) {
    if (!line.empty()) {
      try {
        rows.push_back(nlohmann::json::parse(line));
      } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.filename().string() + ": " + e.what(), offset);
      }
    }
    offset += line.size() + 1;
  }
  return rows;
}

}  // namespace detail

/// Writes the training artifacts under `dir`:
///   global_queries.bin, local/{leaf_id}.bin   dataset format
///   global_targets.jsonl   {query_idx, leaf_id, d_lb, d_L}
///   local_targets.jsonl    {query_idx, leaf_id, d_lb, d_L} (query_idx within the leaf file)
///   traces.jsonl           {query_idx, nn_distance, visit_order:[leaf ids]}
///   meta.json              calibration split, selection, sources and noise levels
inline void save_trainset(const std::filesystem::path& dir, const Index& index,
                          const GlobalTrainSet& global, const std::vector<LocalTrainSet>& locals) {
  save_dataset(global.queries(), dir / "global_queries.bin");
  std::vector<nlohmann::json> targets, traces, local_rows;
  for (std::size_t q = 0; q < global.size(); ++q) {
    nlohmann::json order = nlohmann::json::array();
    for (const auto& step : global.skeletons[q]) {
      order.push_back(step.leaf);
      const std::size_t col = index.leaf_ordinal(step.leaf);
      if (global.has_d_L(q, col))
        targets.push_back({{"query_idx", q}, {"leaf_id", step.leaf},
                           {"d_lb", step.lower_bound}, {"d_L", global.d_L(q, col)}});
    }
    traces.push_back({{"query_idx", q}, {"nn_distance", global.nn_distance[q]},
                      {"visit_order", std::move(order)}});
  }
  for (const auto& local : locals) {
    save_dataset(local.queries(), dir / "local" / (std::to_string(local.leaf) + ".bin"));
    const auto& env = index.node(local.leaf).envelope;
    for (std::size_t q = 0; q < local.leaf_nn.size(); ++q)
      local_rows.push_back({{"query_idx", q}, {"leaf_id", local.leaf},
                            {"d_lb", lower_bound(local.queries()[q], env, index.segments())},
                            {"d_L", local.leaf_nn[q]}});
  }
  detail::write_lines(dir / "global_targets.jsonl", targets);
  detail::write_lines(dir / "traces.jsonl", traces);
  detail::write_lines(dir / "local_targets.jsonl", local_rows);

  nlohmann::json meta;
  meta["calibration_begin"] = global.calibration_begin;
  meta["selected"] = global.selected;
  meta["global_noise_levels"] = global.generated.noise_levels;
  meta["global_source_ids"] = global.generated.source_ids;
  nlohmann::json lm = nlohmann::json::array();
  for (const auto& local : locals)
    lm.push_back({{"leaf_id", local.leaf}, {"noise_levels", local.generated.noise_levels},
                  {"source_ids", local.generated.source_ids}});
  meta["local"] = std::move(lm);
  detail::write_file(dir / "meta.json", meta.dump(1));
}

struct LoadedTrainset {
  GlobalTrainSet global;
  std::vector<LocalTrainSet> locals;
};

inline LoadedTrainset load_trainset(const std::filesystem::path& dir, const Index& index) {
  LoadedTrainset out;
  auto& g = out.global;
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(detail::read_file(dir / "meta.json"));
    g.generated.queries = load_dataset(dir / "global_queries.bin");
    g.calibration_begin = meta.at("calibration_begin").get<std::size_t>();
    g.selected = meta.at("selected").get<std::vector<NodeId>>();
    g.generated.noise_levels = meta.at("global_noise_levels").get<std::vector<double>>();
    g.generated.source_ids = meta.at("global_source_ids").get<std::vector<SeriesId>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("trainset meta.json: ") + e.what(), 0);
  }
  const std::size_t nq = g.generated.queries.size();
  g.leaves = index.leaves();
  const std::size_t nl = g.leaves.size();
  g.leaf_nn.assign(nq * nl, std::numeric_limits<double>::quiet_NaN());
  g.nn_distance.assign(nq, kInf);
  g.skeletons.assign(nq, {});
  std::map<std::pair<std::size_t, NodeId>, double> lbs;
  try {
    for (const auto& row : detail::read_lines(dir / "global_targets.jsonl")) {
      const auto q = row.at("query_idx").get<std::size_t>();
      const auto leaf = row.at("leaf_id").get<NodeId>();
      if (q >= nq || !index.is_leaf(leaf)) throw InvalidInput("global target row out of range");
      g.leaf_nn[q * nl + index.leaf_ordinal(leaf)] = detail::from_nullable(row.at("d_L"));
    }
    for (const auto& row : detail::read_lines(dir / "traces.jsonl")) {
      const auto q = row.at("query_idx").get<std::size_t>();
      if (q >= nq) throw InvalidInput("trace row out of range");
      g.nn_distance[q] = row.at("nn_distance").get<double>();
      for (NodeId leaf : row.at("visit_order").get<std::vector<NodeId>>())
        g.skeletons[q].push_back({leaf, 0.0});
    }
    // Lower bounds are recomputed rather than parsed so replay stays bit-exact.
    for (std::size_t q = 0; q < nq; ++q) {
      const auto summ = summarize_series(g.generated.queries[q], index.segments());
      for (auto& step : g.skeletons[q])
        step.lower_bound = lower_bound(summ, index.node(step.leaf).envelope, index.segments());
    }
    for (const auto& lm : meta.at("local")) {
      LocalTrainSet local;
      local.leaf = lm.at("leaf_id").get<NodeId>();
      local.generated.queries = load_dataset(dir / "local" / (std::to_string(local.leaf) + ".bin"));
      local.generated.noise_levels = lm.at("noise_levels").get<std::vector<double>>();
      local.generated.source_ids = lm.at("source_ids").get<std::vector<SeriesId>>();
      local.leaf_nn.assign(local.generated.queries.size(), std::numeric_limits<double>::quiet_NaN());
      out.locals.push_back(std::move(local));
    }
    std::map<NodeId, std::size_t> pos;
    for (std::size_t i = 0; i < out.locals.size(); ++i) pos[out.locals[i].leaf] = i;
    for (const auto& row : detail::read_lines(dir / "local_targets.jsonl")) {
      const auto leaf = row.at("leaf_id").get<NodeId>();
      const auto q = row.at("query_idx").get<std::size_t>();
      auto it = pos.find(leaf);
      if (it == pos.end() || q >= out.locals[it->second].leaf_nn.size())
        throw InvalidInput("local target row out of range");
      out.locals[it->second].leaf_nn[q] = row.at("d_L").get<double>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("trainset: ") + e.what(), 0);
  }
  return out;
}

}  // namespace leafi
