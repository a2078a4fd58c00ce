#pragma once

// Conformal auto-tuners: sorted non-conformity scores per filter, offline
// replay of filtered search on calibration queries, and a monotone
// quality -> offset curve per filter.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "leafi/index.hpp"
#include "leafi/parallel.hpp"
#include "leafi/traingen.hpp"

namespace leafi {

inline constexpr double kRecallTolerance = 1e-6;
inline constexpr std::int32_t kNoFilter = -1;

/// Recall-at-1 by distance: the achieved distance equals the exact one
/// within a relative tolerance.
inline bool recalled(double achieved, double exact) {
  return achieved <= exact + kRecallTolerance * std::abs(exact);
}

/// |d^L - d^f| per calibration example, sorted non-increasing.
inline std::vector<double> compute_alphas(std::span<const double> predictions,
                                          std::span<const double> targets) {
  if (predictions.size() != targets.size())
    throw InvalidInput("predictions and targets must be aligned");
  std::vector<double> alphas(predictions.size());
  for (std::size_t k = 0; k < alphas.size(); ++k) alphas[k] = std::abs(targets[k] - predictions[k]);
  std::sort(alphas.begin(), alphas.end(), std::greater<>());
  return alphas;
}

/// One leaf of a calibration query's visit order. `filter` indexes the
/// filter set, or is kNoFilter.
struct CalibrationStep {
  NodeId leaf = 0;
  double lower_bound = 0;
  double d_L = 0;
  std::int32_t filter = kNoFilter;
  double prediction = 0;
};

struct CalibrationData {
  std::size_t num_filters = 0;
  std::vector<std::vector<CalibrationStep>> skeletons;
  std::vector<double> nn_distance;

  std::size_t size() const noexcept { return skeletons.size(); }
};

/// Calibration skeletons from collected targets. `filter_leaves` is the
/// filter set in filter-index order; predictions[i][k] is filter i's output
/// on the k-th calibration query.
inline CalibrationData make_calibration(const Index& index, const GlobalTrainSet& global,
                                        const std::vector<NodeId>& filter_leaves,
                                        const std::vector<std::vector<double>>& predictions) {
  if (predictions.size() != filter_leaves.size())
    throw InvalidInput("one prediction list per filter is required");
  std::vector<std::int32_t> filter_of(index.nodes().size(), kNoFilter);
  for (std::size_t i = 0; i < filter_leaves.size(); ++i) {
    if (!index.is_leaf(filter_leaves[i])) throw InvalidInput("filter on a non-leaf node");
    if (predictions[i].size() != global.calibration_size())
      throw InvalidInput("predictions must cover every calibration query");
    filter_of[filter_leaves[i]] = static_cast<std::int32_t>(i);
  }
  CalibrationData cal;
  cal.num_filters = filter_leaves.size();
  for (std::size_t q = global.calibration_begin; q < global.size(); ++q) {
    const std::size_t k = q - global.calibration_begin;
    std::vector<CalibrationStep> steps;
    steps.reserve(global.skeletons[q].size());
    for (const auto& e : global.skeletons[q]) {
      const std::int32_t f = filter_of[e.leaf];
      steps.push_back({e.leaf, e.lower_bound, global.d_L(q, index.leaf_ordinal(e.leaf)), f,
                       f == kNoFilter ? 0.0 : predictions[f][k]});
    }
    cal.skeletons.push_back(std::move(steps));
    cal.nn_distance.push_back(global.nn_distance[q]);
  }
  return cal;
}

/// Replays filtered best-first search on a skeleton: prune by bound, then by
/// filter (prediction - offset > bsf), else take the leaf's d^L.
inline double simulate_search(std::span<const CalibrationStep> skeleton,
                              std::span<const double> offsets) {
  double bsf = kInf;
  for (const auto& s : skeleton) {
    if (s.lower_bound > bsf) continue;
    if (s.filter != kNoFilter) {
      if (std::size_t(s.filter) >= offsets.size())
        throw InvalidInput("no offset for the filter on leaf " + std::to_string(s.leaf));
      if (s.prediction - offsets[s.filter] > bsf) continue;
    }
    bsf = std::min(bsf, s.d_L);
  }
  return bsf;
}

inline double calibration_recall(const CalibrationData& cal, std::span<const double> offsets) {
  if (cal.size() == 0) return 1.0;
  std::size_t hits = 0;
  for (std::size_t q = 0; q < cal.size(); ++q)
    hits += recalled(simulate_search(cal.skeletons[q], offsets), cal.nn_distance[q]);
  return double(hits) / double(cal.size());
}

// ---------------------------------------------------------------------------
// Monotone cubic interpolation with Steffen's slopes.

namespace detail {

inline double sign(double x) { return (x > 0) - (x < 0); }

/// Steffen slopes at the knots; end slopes are the end secants.
inline std::vector<double> steffen_slopes(std::span<const double> x, std::span<const double> y) {
  const std::size_t n = x.size();
  std::vector<double> d(n, 0.0);
  if (n < 2) return d;
  d[0] = (y[1] - y[0]) / (x[1] - x[0]);
  d[n - 1] = (y[n - 1] - y[n - 2]) / (x[n - 1] - x[n - 2]);
  for (std::size_t i = 1; i + 1 < n; ++i) {
    const double h0 = x[i] - x[i - 1], h1 = x[i + 1] - x[i];
    const double s0 = (y[i] - y[i - 1]) / h0, s1 = (y[i + 1] - y[i]) / h1;
    const double p = (s0 * h1 + s1 * h0) / (h0 + h1);
    d[i] = (sign(s0) + sign(s1)) * std::min({std::abs(s0), std::abs(s1), 0.5 * std::abs(p)});
  }
  return d;
}

inline double hermite(double x0, double x1, double y0, double y1, double d0, double d1, double x) {
  const double h = x1 - x0, t = x - x0;
  const double s = (y1 - y0) / h;
  const double a = (d0 + d1 - 2 * s) / (h * h);
  const double b = (3 * s - 2 * d0 - d1) / h;
  return ((a * t + b) * t + d0) * t + y0;
}

}  // namespace detail

class SteffenInterpolator {
 public:
  SteffenInterpolator() = default;
  /// `x` strictly increasing, at least two knots.
  SteffenInterpolator(std::vector<double> x, std::vector<double> y) : x_(std::move(x)), y_(std::move(y)) {
    if (x_.size() < 2 || x_.size() != y_.size())
      throw InvalidInput("interpolation needs at least two aligned knots");
    for (std::size_t i = 1; i < x_.size(); ++i)
      if (!(x_[i] > x_[i - 1])) throw InvalidInput("knot abscissae must be strictly increasing");
    d_ = detail::steffen_slopes(x_, y_);
  }

  /// Defined on [x.front(), x.back()]; clamps outside.
  double operator()(double x) const {
    if (x <= x_.front()) return y_.front();
    if (x >= x_.back()) return y_.back();
    const std::size_t i = std::size_t(std::upper_bound(x_.begin(), x_.end(), x) - x_.begin()) - 1;
    return detail::hermite(x_[i], x_[i + 1], y_[i], y_[i + 1], d_[i], d_[i + 1], x);
  }

 private:
  std::vector<double> x_, y_, d_;
};

// ---------------------------------------------------------------------------
// Auto-tuners

struct Knot {
  double quality = 0;
  double offset = 0;

  friend bool operator==(const Knot&, const Knot&) = default;
};

/// Monotone map from a recall target to one filter's offset. Knots are
/// ascending in quality with non-decreasing offsets. Below the first knot
/// the offset is 0; above the last it is the largest calibration score.
class QualityOffsetCurve {
 public:
  QualityOffsetCurve() = default;
  QualityOffsetCurve(NodeId leaf_id, std::vector<double> alphas_desc, std::vector<Knot> knots)
      : leaf_id_(leaf_id), alphas_(std::move(alphas_desc)), knots_(std::move(knots)) {
    if (alphas_.empty()) throw InvalidInput("curve needs at least one calibration score");
    for (std::size_t i = 1; i < knots_.size(); ++i)
      if (!(knots_[i].quality > knots_[i - 1].quality && knots_[i].offset >= knots_[i - 1].offset))
        throw InvalidInput("curve knots must be strictly increasing in quality and monotone in offset");
    if (!degenerate()) {
      std::vector<double> x, y;
      for (const auto& k : knots_) {
        x.push_back(k.quality);
        y.push_back(k.offset);
      }
      interp_ = SteffenInterpolator(std::move(x), std::move(y));
    }
  }

  NodeId leaf_id() const noexcept { return leaf_id_; }
  const std::vector<double>& alphas_desc() const noexcept { return alphas_; }
  const std::vector<Knot>& knots() const noexcept { return knots_; }
  double max_offset() const noexcept { return alphas_.front(); }
  /// Fewer than two distinct qualities: the curve is constant at max_offset.
  bool degenerate() const noexcept { return knots_.size() < 2; }

  double operator()(double target) const {
    if (degenerate() || target > knots_.back().quality) return max_offset();
    if (target < knots_.front().quality) return 0.0;
    return std::clamp(interp_(target), 0.0, max_offset());
  }

  friend bool operator==(const QualityOffsetCurve& a, const QualityOffsetCurve& b) {
    return a.leaf_id_ == b.leaf_id_ && a.alphas_ == b.alphas_ && a.knots_ == b.knots_;
  }

 private:
  NodeId leaf_id_ = 0;
  std::vector<double> alphas_;
  std::vector<Knot> knots_;
  SteffenInterpolator interp_;
};

/// Turns raw (quality, offset) pairs into curve knots: duplicate qualities
/// keep the largest offset, then a running maximum makes offsets
/// non-decreasing in quality.
inline std::vector<Knot> monotone_knots(std::vector<Knot> raw) {
  std::sort(raw.begin(), raw.end(), [](const Knot& a, const Knot& b) {
    return a.quality != b.quality ? a.quality < b.quality : a.offset > b.offset;
  });
  std::vector<Knot> out;
  for (const auto& k : raw) {
    if (!out.empty() && out.back().quality == k.quality) continue;
    out.push_back(k);
  }
  for (std::size_t i = 1; i < out.size(); ++i) out[i].offset = std::max(out[i].offset, out[i - 1].offset);
  return out;
}

struct FitResult {
  std::vector<QualityOffsetCurve> curves;
  /// Mean calibration recall with every filter at its j-th largest score.
  std::vector<double> position_quality;
};

/// For each sorted position j every filter takes its j-th largest score as
/// offset; all calibration queries are replayed and the mean recall becomes
/// the quality of that position. Filter i's knots are (quality_j, alpha_i(j)).
inline FitResult fit_auto_tuners(const std::vector<NodeId>& filter_leaves,
                                 const std::vector<std::vector<double>>& alphas_desc,
                                 const CalibrationData& cal, std::size_t threads = 0) {
  const std::size_t nf = filter_leaves.size();
  if (alphas_desc.size() != nf || cal.num_filters != nf)
    throw InvalidInput("one score list per filter is required");
  FitResult out;
  if (nf == 0) return out;
  const std::size_t c = alphas_desc.front().size();
  if (c < 20) throw InvalidInput("auto-tuners need at least 20 calibration queries");
  for (const auto& a : alphas_desc)
    if (a.size() != c) throw InvalidInput("score lists must share the calibration count");
  if (cal.size() != c) throw InvalidInput("calibration skeletons do not match the score lists");

  out.position_quality.assign(c, 0.0);
  parallel_for(c, threads, [&](std::size_t j) {
    std::vector<double> offsets(nf);
    for (std::size_t i = 0; i < nf; ++i) offsets[i] = alphas_desc[i][j];
    out.position_quality[j] = calibration_recall(cal, offsets);
  });

  for (std::size_t i = 0; i < nf; ++i) {
    std::vector<Knot> raw(c);
    for (std::size_t j = 0; j < c; ++j) raw[j] = {out.position_quality[j], alphas_desc[i][j]};
    out.curves.emplace_back(filter_leaves[i], alphas_desc[i], monotone_knots(std::move(raw)));
  }
  return out;
}

/// Maps recall targets to per-filter offsets; results are memoized per
/// exact target value. Safe for concurrent use.
class AutoTuner {
 public:
  AutoTuner() = default;
  explicit AutoTuner(std::vector<QualityOffsetCurve> curves) : curves_(std::move(curves)) {}
  AutoTuner(const AutoTuner& o) : curves_(o.curves_) {}
  AutoTuner& operator=(const AutoTuner& o) {
    if (this != &o) {
      curves_ = o.curves_;
      std::unique_lock lock(mu_);
      memo_.clear();
    }
    return *this;
  }

  const std::vector<QualityOffsetCurve>& curves() const noexcept { return curves_; }
  std::size_t size() const noexcept { return curves_.size(); }

  std::shared_ptr<const std::vector<double>> offsets(double target) const {
    if (!(target >= 0 && target <= 1)) throw InvalidInput("recall target must be within [0, 1]");
    const std::uint64_t key = std::bit_cast<std::uint64_t>(target);
    {
      std::shared_lock lock(mu_);
      if (auto it = memo_.find(key); it != memo_.end()) return it->second;
    }
    auto fresh = std::make_shared<std::vector<double>>(curves_.size());
    for (std::size_t i = 0; i < curves_.size(); ++i) (*fresh)[i] = curves_[i](target);
    std::unique_lock lock(mu_);
    return memo_.emplace(key, std::move(fresh)).first->second;
  }

  std::size_t memo_size() const {
    std::shared_lock lock(mu_);
    return memo_.size();
  }

 private:
  std::vector<QualityOffsetCurve> curves_;
  mutable std::shared_mutex mu_;
  mutable std::unordered_map<std::uint64_t, std::shared_ptr<const std::vector<double>>> memo_;
};

inline nlohmann::json curves_to_json(const std::vector<QualityOffsetCurve>& curves) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& c : curves) {
    nlohmann::json knots = nlohmann::json::array();
    for (const auto& k : c.knots()) knots.push_back({{"quality", k.quality}, {"offset", k.offset}});
    arr.push_back({{"leaf_id", c.leaf_id()}, {"alphas_desc", c.alphas_desc()}, {"knots", std::move(knots)}});
  }
  return arr;
}

inline std::vector<QualityOffsetCurve> curves_from_json(const nlohmann::json& j) {
  std::vector<QualityOffsetCurve> out;
  try {
    for (const auto& c : j) {
      std::vector<Knot> knots;
      for (const auto& k : c.at("knots")) knots.push_back({k.at("quality").get<double>(), k.at("offset").get<double>()});
      out.emplace_back(c.at("leaf_id").get<NodeId>(), c.at("alphas_desc").get<std::vector<double>>(),
                       std::move(knots));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("curves: ") + e.what(), 0);
  } catch (const InvalidInput& e) {
    throw FormatError(std::string("curves: ") + e.what(), 0);
  }
  return out;
}

}  // namespace leafi
