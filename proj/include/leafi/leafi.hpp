#pragma once

// Enhanced index: leaf filters plus auto-tuners on top of a base index, the
// enhancement pipeline, filtered search and the artifact directory.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "leafi/conformal.hpp"
#include "leafi/hash.hpp"
#include "leafi/index.hpp"
#include "leafi/mlp.hpp"
#include "leafi/parallel.hpp"
#include "leafi/select.hpp"
#include "leafi/traingen.hpp"

namespace leafi {

inline constexpr std::uint64_t kDefaultBudgetBytes = std::uint64_t(64) << 20;
inline constexpr int kEnhancementFormatVersion = 1;

struct FilterSummary {
  NodeId leaf_id = 0;
  std::size_t train_examples = 0;
  std::size_t val_examples = 0;
  TrainReport report;
  /// Mean |d^L - d^f| on the calibration queries.
  double calibration_mae = 0;
};

struct EnhancementInfo {
  SplitPlan plan;
  NoiseRange noise;
  TrainConfig train;
  std::uint64_t seed = 0;
  SelectionReport selection;
  std::vector<FilterSummary> filters;
  /// Mean calibration recall at each sorted score position.
  std::vector<double> position_quality;
};

/// Immutable after construction; safe to search from many threads.
class EnhancedIndex {
 public:
  EnhancedIndex(Index base, std::vector<NodeId> filter_leaves, std::vector<MlpModel> models,
                std::vector<QualityOffsetCurve> curves, EnhancementInfo info)
      : base_(std::move(base)),
        leaves_(std::move(filter_leaves)),
        models_(std::move(models)),
        tuner_(std::move(curves)),
        info_(std::move(info)) {
    if (models_.size() != leaves_.size())
      throw InvalidInput("one model per filter leaf is required");
    if (!std::is_sorted(leaves_.begin(), leaves_.end()) ||
        std::adjacent_find(leaves_.begin(), leaves_.end()) != leaves_.end())
      throw InvalidInput("filter leaves must be sorted and unique");
    std::vector<NodeId> selected;
    for (const auto& s : info_.selection.selected) selected.push_back(s.leaf_id);
    std::sort(selected.begin(), selected.end());
    filter_of_.assign(base_.nodes().size(), kNoFilter);
    for (std::size_t i = 0; i < leaves_.size(); ++i) {
      const NodeId leaf = leaves_[i];
      if (!base_.is_leaf(leaf)) throw InvalidInput("filter on unknown leaf " + std::to_string(leaf));
      if (!std::binary_search(selected.begin(), selected.end(), leaf))
        throw InvalidInput("filter leaf " + std::to_string(leaf) + " is not in the selection report");
      if (models_[i].input_dim != base_.dataset().length())
        throw InvalidInput("filter for leaf " + std::to_string(leaf) + " has the wrong input size");
      filter_of_[leaf] = static_cast<std::int32_t>(i);
    }
    const auto& curves_ = tuner_.curves();
    if (curves_.size() != leaves_.size())
      throw InvalidInput("every filter needs a fitted curve");
    for (std::size_t i = 0; i < leaves_.size(); ++i)
      if (curves_[i].leaf_id() != leaves_[i])
        throw InvalidInput("curve order does not match filter leaf " + std::to_string(leaves_[i]));
  }

  const Index& base() const noexcept { return base_; }
  std::size_t num_filters() const noexcept { return leaves_.size(); }
  const std::vector<NodeId>& filter_leaves() const noexcept { return leaves_; }
  const MlpModel& model(std::size_t i) const { return models_.at(i); }
  const std::vector<MlpModel>& models() const noexcept { return models_; }
  std::int32_t filter_of(NodeId node) const { return filter_of_.at(node); }
  const AutoTuner& tuner() const noexcept { return tuner_; }
  const EnhancementInfo& info() const noexcept { return info_; }

 private:
  Index base_;
  std::vector<NodeId> leaves_;
  std::vector<MlpModel> models_;
  AutoTuner tuner_;
  EnhancementInfo info_;
  std::vector<std::int32_t> filter_of_;
};

// ---------------------------------------------------------------------------
// Search

struct SearchRequest {
  SeriesView query;
  std::size_t k = 1;
  std::optional<double> target;
  bool exact = false;
};

using SearchOutcome = SearchResult;

/// d^f from the trained model, in the precision search and calibration share.
struct ModelPredictor {
  const EnhancedIndex* eidx;
  double operator()(std::size_t filter, NodeId, SeriesView q) const {
    return double(forward(eidx->model(filter), q));
  }
};

/// Test harness predictor: the true node-wise nearest-neighbor distance.
struct OraclePredictor {
  const Index* index;
  double operator()(std::size_t, NodeId leaf, SeriesView q) const {
    return leaf_nn_distance(*index, leaf, q);
  }
};

template <class Predict>
class FilterGate {
 public:
  FilterGate(const EnhancedIndex& eidx, std::span<const double> offsets, Predict predict)
      : eidx_(eidx), offsets_(offsets), predict_(std::move(predict)) {}

  bool prune_by_bound(double lb, double bsf) const noexcept { return lb > bsf; }

  bool prune_by_filter(NodeId leaf, SeriesView q, double bsf, SearchStats& stats) {
    const std::int32_t f = eidx_.filter_of(leaf);
    // Nothing can exceed an infinite bsf, so the inference would be wasted.
    if (f == kNoFilter || bsf == kInf) return false;
    ++stats.filter_inferences;
    return predict_(std::size_t(f), leaf, q) - offsets_[f] > bsf;
  }

 private:
  const EnhancedIndex& eidx_;
  std::span<const double> offsets_;
  Predict predict_;
};

template <class Predict>
SearchOutcome search_with_offsets(const EnhancedIndex& eidx, SeriesView q, std::size_t k,
                                  std::span<const double> offsets, Predict predict,
                                  bool record_trace = true) {
  if (offsets.size() != eidx.num_filters())
    throw InvalidInput("need one offset per filter (" + std::to_string(eidx.num_filters()) + ")");
  FilterGate<Predict> gate(eidx, offsets, std::move(predict));
  return best_first_search(eidx.base(), q, k, gate, record_trace);
}

/// Offsets come from the memoized auto-tuners; exact mode skips the filters
/// entirely and is the same traversal as exact_search.
inline SearchOutcome search(const EnhancedIndex& eidx, const SearchRequest& req,
                            bool record_trace = true) {
  if (req.exact) return exact_search(eidx.base(), req.query, req.k, record_trace);
  if (!req.target) throw InvalidInput("a recall target is required unless exact mode is set");
  const auto offsets = eidx.tuner().offsets(*req.target);
  return search_with_offsets(eidx, req.query, req.k, *offsets, ModelPredictor{&eidx},
                             record_trace);
}

// ---------------------------------------------------------------------------
// JSON for metadata

namespace detail {

inline nlohmann::json plan_to_json(const SplitPlan& p) {
  return {{"global_count", p.global_count}, {"local_count", p.local_count},
          {"calibration_count", p.calibration_count}, {"val_stride", p.val_stride}};
}

inline SplitPlan plan_from_json(const nlohmann::json& j) {
  return {j.at("global_count").get<std::size_t>(), j.at("local_count").get<std::size_t>(),
          j.at("calibration_count").get<std::size_t>(), j.at("val_stride").get<std::size_t>()};
}

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  return {{"initial_lr", c.initial_lr},       {"lr_decay_factor", c.lr_decay_factor},
          {"min_lr", c.min_lr},               {"max_epochs", c.max_epochs},
          {"batch_size", c.batch_size},       {"plateau_patience", c.plateau_patience},
          {"plateau_min_delta", c.plateau_min_delta}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.initial_lr = j.at("initial_lr").get<double>();
  c.lr_decay_factor = j.at("lr_decay_factor").get<double>();
  c.min_lr = j.at("min_lr").get<double>();
  c.max_epochs = j.at("max_epochs").get<std::size_t>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.plateau_patience = j.at("plateau_patience").get<std::size_t>();
  c.plateau_min_delta = j.at("plateau_min_delta").get<double>();
  return c;
}

inline nlohmann::json info_to_json(const EnhancementInfo& info,
                                   const std::vector<NodeId>& filter_leaves) {
  nlohmann::json filters = nlohmann::json::array();
  for (const auto& f : info.filters)
    filters.push_back({{"leaf_id", f.leaf_id},
                       {"train_examples", f.train_examples},
                       {"val_examples", f.val_examples},
                       {"epochs_run", f.report.epochs_run},
                       {"final_train_loss", f.report.final_train_loss},
                       {"final_val_loss", f.report.final_val_loss},
                       {"lr_trajectory", f.report.lr_trajectory},
                       {"calibration_mae", f.calibration_mae}});
  return {{"version", kEnhancementFormatVersion},
          {"seed", info.seed},
          {"plan", plan_to_json(info.plan)},
          {"noise", {{"lo", info.noise.lo}, {"hi", info.noise.hi}}},
          {"train", train_config_to_json(info.train)},
          {"filter_leaves", filter_leaves},
          {"filters", std::move(filters)},
          {"position_quality", info.position_quality}};
}

inline EnhancementInfo info_from_json(const nlohmann::json& j, SelectionReport selection) {
  if (j.at("version").get<int>() != kEnhancementFormatVersion)
    throw InvalidInput("unsupported enhancement version");
  EnhancementInfo info;
  info.seed = j.at("seed").get<std::uint64_t>();
  info.plan = plan_from_json(j.at("plan"));
  info.noise = {j.at("noise").at("lo").get<double>(), j.at("noise").at("hi").get<double>()};
  info.train = train_config_from_json(j.at("train"));
  info.selection = std::move(selection);
  for (const auto& f : j.at("filters")) {
    FilterSummary s;
    s.leaf_id = f.at("leaf_id").get<NodeId>();
    s.train_examples = f.at("train_examples").get<std::size_t>();
    s.val_examples = f.at("val_examples").get<std::size_t>();
    s.report.epochs_run = f.at("epochs_run").get<std::size_t>();
    s.report.final_train_loss = f.at("final_train_loss").get<double>();
    s.report.final_val_loss = f.at("final_val_loss").get<double>();
    s.report.lr_trajectory = f.at("lr_trajectory").get<std::vector<double>>();
    s.calibration_mae = f.at("calibration_mae").get<double>();
    info.filters.push_back(std::move(s));
  }
  info.position_quality = j.at("position_quality").get<std::vector<double>>();
  return info;
}

inline std::string filter_file(NodeId leaf) { return "filters/" + std::to_string(leaf) + ".bin"; }

inline constexpr const char* kIncompleteMarker = "INCOMPLETE";

}  // namespace detail

// ---------------------------------------------------------------------------
// Persistence
//
//   index.json       base index (points at the dataset)
//   selection.json   constants, threshold and selected leaves
//   filters/{id}.bin model weights
//   curves.json      quality-offset curves
//   enhancement.json plan, seeds, per-filter training summaries
//   trainset/        training queries and targets (when enhanced here)
//   manifest.json    sha256 of the dataset and every file above

/// Hashes every file under `dir` except the manifest and the marker.
inline void write_manifest(const std::filesystem::path& dir, const std::filesystem::path& dataset) {
  namespace fs = std::filesystem;
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), dir).generic_string();
    if (rel == "manifest.json" || rel == detail::kIncompleteMarker) continue;
    files[rel] = sha256_file(e.path());
  }
  const nlohmann::json m = {{"version", kEnhancementFormatVersion},
                            {"dataset", {{"path", dataset.generic_string()},
                                         {"sha256", sha256_file(dataset)}}},
                            {"artifacts", files}};
  detail::write_file(dir / "manifest.json", m.dump(1));
}

/// Writes the enhanced index under `dir`. With an empty `dataset_path` the
/// dataset is copied into the directory as dataset.bin; otherwise index.json
/// refers to `dataset_path` (made absolute).
inline void save_enhanced(const EnhancedIndex& eidx, const std::filesystem::path& dir,
                          std::filesystem::path dataset_path = {}) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  if (dataset_path.empty()) {
    save_dataset(eidx.base().dataset(), dir / "dataset.bin");
    save_index(eidx.base(), dir / "index.json", "dataset.bin");
    dataset_path = dir / "dataset.bin";
  } else {
    dataset_path = fs::absolute(dataset_path);
    save_index(eidx.base(), dir / "index.json", dataset_path);
  }
  detail::write_file(dir / "selection.json", selection_to_json(eidx.info().selection).dump(1));
  fs::remove_all(dir / "filters");
  for (std::size_t i = 0; i < eidx.num_filters(); ++i)
    detail::write_file(dir / detail::filter_file(eidx.filter_leaves()[i]), encode_model(eidx.model(i)));
  detail::write_file(dir / "curves.json", curves_to_json(eidx.tuner().curves()).dump(1));
  detail::write_file(dir / "enhancement.json",
                     detail::info_to_json(eidx.info(), eidx.filter_leaves()).dump(1));
  write_manifest(dir, dataset_path);
}

inline EnhancedIndex load_enhanced(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (fs::exists(dir / detail::kIncompleteMarker))
    throw IncompleteError(dir.string() + " holds an unfinished enhancement (" +
                          detail::read_file(dir / detail::kIncompleteMarker) + ")");
  if (!fs::exists(dir / "manifest.json"))
    throw MissingArtifact("no manifest.json in " + dir.string());
  try {
    const auto manifest = nlohmann::json::parse(detail::read_file(dir / "manifest.json"));
    const auto& artifacts = manifest.at("artifacts");
    auto read_checked = [&](const std::string& rel) {
      if (!artifacts.contains(rel)) throw MissingArtifact(rel + " is not in the manifest");
      if (!fs::exists(dir / rel)) throw MissingArtifact("missing " + rel);
      auto bytes = detail::read_file(dir / rel);
      if (sha256_hex(bytes) != artifacts.at(rel).get<std::string>())
        throw ChecksumError(rel + " does not match its manifest sha256");
      return bytes;
    };

    const auto enh = nlohmann::json::parse(read_checked("enhancement.json"));
    const auto leaves = enh.at("filter_leaves").get<std::vector<NodeId>>();
    // Completeness first so a missing file is reported by leaf.
    for (NodeId leaf : leaves)
      if (!fs::exists(dir / detail::filter_file(leaf)))
        throw MissingArtifact("missing filter weights for leaf " + std::to_string(leaf));
    if (!leaves.empty() && !fs::exists(dir / "curves.json"))
      throw MissingArtifact("missing curve for leaf " + std::to_string(leaves.front()) +
                            ": curves.json not found");
    for (const auto& [rel, sha] : artifacts.items()) {
      if (!fs::exists(dir / rel)) throw MissingArtifact("missing " + rel);
      if (sha256_file(dir / rel) != sha.get<std::string>())
        throw ChecksumError(rel + " does not match its manifest sha256");
    }

    const auto index_doc = nlohmann::json::parse(read_checked("index.json"));
    fs::path dpath = index_doc.at("dataset_path").get<std::string>();
    if (dpath.is_relative()) dpath = dir / dpath;
    const auto data_bytes = detail::read_file(dpath);
    const auto data_sha = sha256_hex(data_bytes);
    if (data_sha != manifest.at("dataset").at("sha256").get<std::string>() ||
        data_sha != index_doc.at("dataset_sha256").get<std::string>())
      throw ChecksumError("dataset " + dpath.string() + " does not match the recorded sha256");
    Index base = index_from_json(index_doc, std::make_shared<const Dataset>(decode_dataset(data_bytes)));

    auto selection = selection_from_json(nlohmann::json::parse(read_checked("selection.json")));
    std::vector<MlpModel> models;
    for (NodeId leaf : leaves) models.push_back(decode_model(read_checked(detail::filter_file(leaf))));
    std::vector<QualityOffsetCurve> all =
        leaves.empty() && !fs::exists(dir / "curves.json")
            ? std::vector<QualityOffsetCurve>{}
            : curves_from_json(nlohmann::json::parse(read_checked("curves.json")));
    std::map<NodeId, QualityOffsetCurve> by_leaf;
    for (auto& c : all) by_leaf.emplace(c.leaf_id(), std::move(c));
    std::vector<QualityOffsetCurve> curves;
    for (NodeId leaf : leaves) {
      auto it = by_leaf.find(leaf);
      if (it == by_leaf.end()) throw MissingArtifact("missing curve for leaf " + std::to_string(leaf));
      curves.push_back(it->second);
    }
    auto info = detail::info_from_json(enh, std::move(selection));
    return EnhancedIndex(std::move(base), leaves, std::move(models), std::move(curves),
                         std::move(info));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("enhancement metadata: ") + e.what(), 0);
  }
}

// ---------------------------------------------------------------------------
// Enhancement pipeline

struct EnhanceOptions {
  SplitPlan plan;
  NoiseRange noise;
  SelectionBudget budget{kDefaultBudgetBytes, 2.0};
  TrainConfig train;
  std::uint64_t seed = kDefaultSeed;
  /// Skips timing; needed for reproducible selections.
  std::optional<RuntimeConstants> constants;
  /// Overrides the threshold derived from the constants.
  std::optional<std::size_t> threshold;
  std::size_t measure_queries = 20;
  std::size_t measure_trials = 101;
  std::size_t threads = 0;
  /// Artifact directory; empty keeps everything in memory.
  std::filesystem::path out_dir;
  /// Dataset file for index.json; empty copies the dataset into out_dir.
  std::filesystem::path dataset_path;
  std::function<void(const std::string&)> log;
};

/// Seed streams; each per-leaf stream is indexed by the leaf id.
enum class SeedStream : std::uint64_t {
  measure = 1,
  global_queries = 2,
  local_queries = 3,
  model_init = 4,
  train_shuffle = 5,
};

inline std::uint64_t stream_seed(std::uint64_t base, SeedStream s, std::uint64_t index = 0) {
  return derive_seed(base, static_cast<std::uint64_t>(s), index);
}

namespace detail {

class StageRunner {
 public:
  StageRunner(const EnhanceOptions& opt) : opt_(opt) {
    if (!opt_.out_dir.empty()) {
      std::filesystem::create_directories(opt_.out_dir);
      for (const char* stale : {"filters", "trainset", "manifest.json", "curves.json",
                                "selection.json", "enhancement.json", "index.json"})
        std::filesystem::remove_all(opt_.out_dir / stale);
    }
  }

  template <class Fn>
  auto run(const std::string& stage, Fn&& fn) {
    if (!opt_.out_dir.empty()) write_file(opt_.out_dir / kIncompleteMarker, "stage " + stage);
    if (opt_.log) opt_.log(stage);
    const auto t0 = std::chrono::steady_clock::now();
    try {
      if constexpr (std::is_void_v<decltype(fn())>) {
        fn();
        finish(stage, t0);
      } else {
        auto out = fn();
        finish(stage, t0);
        return out;
      }
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(stage, e.what());
    }
  }

  void done() {
    if (!opt_.out_dir.empty()) std::filesystem::remove(opt_.out_dir / kIncompleteMarker);
  }

 private:
  void finish(const std::string& stage, std::chrono::steady_clock::time_point t0) {
    if (!opt_.log) return;
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    opt_.log(stage + " done in " + std::to_string(s) + " s");
  }

  const EnhanceOptions& opt_;
};

}  // namespace detail

/// select -> collect -> local -> train -> calibrate -> persist. Every stage
/// that fails raises StageError naming it; with an output directory the
/// INCOMPLETE marker stays behind.
inline EnhancedIndex enhance(const Index& index, const EnhanceOptions& opt) {
  opt.plan.validate();
  opt.noise.validate();
  opt.train.validate();
  if (!(opt.budget.a >= 1)) throw InvalidInput("threshold factor a must be >= 1");
  const std::size_t m = index.dataset().length();
  detail::StageRunner runner(opt);

  EnhancementInfo info;
  info.plan = opt.plan;
  info.noise = opt.noise;
  info.train = opt.train;
  info.seed = opt.seed;

  info.selection = runner.run("select", [&] {
    SelectionReport r;
    r.a = opt.budget.a;
    r.capacity = opt.budget.capacity;
    if (opt.constants) {
      opt.constants->validate();
      r.constants = *opt.constants;
    } else {
      const auto qs = make_queries(index.dataset(), opt.measure_queries, 0.2,
                                   stream_seed(opt.seed, SeedStream::measure));
      r.constants = measure_constants(index, qs.queries, init_model(m, opt.seed), opt.measure_trials);
    }
    r.th = opt.threshold.value_or(compute_threshold(r.constants, r.a));
    const auto sizes = leaf_sizes(index);
    for (NodeId leaf : select_greedy(sizes, r.th, opt.budget, r.constants.w))
      r.selected.push_back({leaf, index.node(leaf).size});
    if (!opt.out_dir.empty())
      detail::write_file(opt.out_dir / "selection.json", selection_to_json(r).dump(1));
    return r;
  });

  std::vector<NodeId> leaves;
  for (const auto& s : info.selection.selected) leaves.push_back(s.leaf_id);
  std::sort(leaves.begin(), leaves.end());
  if (leaves.empty() && opt.log) opt.log("warning: no leaf selected; the index behaves exactly");

  std::vector<MlpModel> models;
  std::vector<QualityOffsetCurve> curves;
  if (!leaves.empty()) {
    auto global = runner.run("collect", [&] {
      auto qs = generate_global_queries(index.dataset(), opt.plan.global_count, opt.noise,
                                        stream_seed(opt.seed, SeedStream::global_queries));
      return collect_targets(index, leaves, std::move(qs), opt.plan.calibration_count, opt.threads);
    });

    auto locals = runner.run("local", [&] {
      std::vector<LocalTrainSet> out(leaves.size());
      parallel_for(leaves.size(), opt.threads, [&](std::size_t i) {
        out[i] = collect_local(index, leaves[i], opt.plan.local_count, opt.noise,
                               stream_seed(opt.seed, SeedStream::local_queries, leaves[i]));
      });
      if (!opt.out_dir.empty()) save_trainset(opt.out_dir / "trainset", index, global, out);
      return out;
    });

    runner.run("train", [&] {
      models.resize(leaves.size());
      info.filters.resize(leaves.size());
      parallel_for(leaves.size(), opt.threads, [&](std::size_t i) {
        const NodeId leaf = leaves[i];
        const auto data = assemble_filter_training(index, leaf, global, locals[i], opt.plan);
        TrainConfig cfg = opt.train;
        cfg.seed = stream_seed(opt.seed, SeedStream::train_shuffle, leaf);
        auto [model, report] =
            train(init_model(m, stream_seed(opt.seed, SeedStream::model_init, leaf)),
                  data.train_inputs, data.train_targets, data.val_inputs, data.val_targets, cfg);
        models[i] = std::move(model);
        info.filters[i] = {leaf, data.train_inputs.size(), data.val_inputs.size(), std::move(report), 0};
        if (!opt.out_dir.empty())
          detail::write_file(opt.out_dir / detail::filter_file(leaf), encode_model(models[i]));
      });
    });

    curves = runner.run("calibrate", [&] {
      std::vector<std::vector<double>> preds(leaves.size()), alphas(leaves.size());
      parallel_for(leaves.size(), opt.threads, [&](std::size_t i) {
        const std::size_t col = index.leaf_ordinal(leaves[i]);
        std::vector<double> targets;
        double abs_sum = 0;
        for (std::size_t q = global.calibration_begin; q < global.size(); ++q) {
          preds[i].push_back(double(forward(models[i], global.queries()[q])));
          targets.push_back(global.d_L(q, col));
          abs_sum += std::abs(targets.back() - preds[i].back());
        }
        info.filters[i].calibration_mae = abs_sum / double(targets.size());
        alphas[i] = compute_alphas(preds[i], targets);
      });
      const auto cal = make_calibration(index, global, leaves, preds);
      auto fit = fit_auto_tuners(leaves, alphas, cal, opt.threads);
      info.position_quality = std::move(fit.position_quality);
      if (!opt.out_dir.empty())
        detail::write_file(opt.out_dir / "curves.json", curves_to_json(fit.curves).dump(1));
      return std::move(fit.curves);
    });
  }

  EnhancedIndex eidx(index, leaves, std::move(models), std::move(curves), std::move(info));
  if (!opt.out_dir.empty()) {
    runner.run("persist", [&] { save_enhanced(eidx, opt.out_dir, opt.dataset_path); });
    runner.done();
  }
  return eidx;
}

}  // namespace leafi
