#pragma once

// Which leaves get filters: measured runtime constants, the node-size
// threshold, greedy selection by size, the benefit model and an exact 0/1
// knapsack over it.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "leafi/index.hpp"
#include "leafi/mlp.hpp"

namespace leafi {

struct RuntimeConstants {
  double t_S = 0;  ///< seconds per series distance
  double t_F = 0;  ///< seconds per filter inference
  std::size_t w = 0;  ///< bytes per filter

  void validate() const {
    if (!(t_S > 0 && std::isfinite(t_S) && t_F > 0 && std::isfinite(t_F) && w > 0))
      throw InvalidInput("runtime constants must be positive and finite");
  }
};

struct SelectionBudget {
  std::uint64_t capacity = 0;  ///< bytes available for filters
  double a = 2.0;

  void validate() const {
    if (!(a >= 1 && std::isfinite(a))) throw InvalidInput("threshold hyperparameter a must be >= 1");
  }
};

struct LeafSize {
  NodeId leaf_id = 0;
  std::size_t size = 0;

  friend bool operator==(const LeafSize&, const LeafSize&) = default;
};

inline std::vector<LeafSize> leaf_sizes(const Index& index) {
  std::vector<LeafSize> out;
  for (NodeId leaf : index.leaves()) out.push_back({leaf, index.node(leaf).size});
  return out;
}

namespace detail {

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Median over `trials` of (time of `batch` calls) / (batch * per_call_units).
// The batch grows tenfold while the median is zero.
template <class Fn>
double timed_median(std::size_t trials, std::size_t units, Fn&& fn) {
  using clock = std::chrono::steady_clock;
  for (std::size_t batch = 1; batch <= 1'000'000; batch *= 10) {
    fn();  // warm caches
    std::vector<double> samples;
    samples.reserve(trials);
    for (std::size_t t = 0; t < trials; ++t) {
      const auto t0 = clock::now();
      for (std::size_t b = 0; b < batch; ++b) fn();
      const auto t1 = clock::now();
      samples.push_back(std::chrono::duration<double>(t1 - t0).count() / double(batch * units));
    }
    const double med = median(std::move(samples));
    if (med > 0) return med;
  }
  throw MeasurementError("timer resolution too coarse to measure");
}

}  // namespace detail

/// t_S: median per-series time of a full scan of the largest leaf.
/// t_F: median single-inference time of `trial_model`.
/// w: serialized filter size.
inline RuntimeConstants measure_constants(const Index& index, const Dataset& sample_queries,
                                          const MlpModel& trial_model, std::size_t trials = 101) {
  if (trials < 100) throw InvalidInput("need at least 100 timing trials");
  if (sample_queries.empty() || sample_queries.length() != index.dataset().length())
    throw InvalidInput("sample queries must be non-empty and match the dataset length");
  if (trial_model.input_dim != index.dataset().length())
    throw InvalidInput("trial model does not match the series length");

  NodeId largest = index.leaves().front();
  for (NodeId leaf : index.leaves())
    if (index.node(leaf).size > index.node(largest).size) largest = leaf;
  const auto& members = index.node(largest).members;
  const auto& data = index.dataset();
  const std::size_t m = data.length();

  volatile double sink = 0;
  std::size_t qi = 0;
  RuntimeConstants c;
  c.t_S = detail::timed_median(trials, members.size(), [&] {
    const float* q = sample_queries.series(qi++ % sample_queries.size()).data();
    double acc = 0;
    for (SeriesId id : members) acc += detail::squared_distance(q, data.series(id).data(), m, kInf);
    sink = sink + acc;
  });
  c.t_F = detail::timed_median(trials, 1, [&] {
    sink = sink + forward(trial_model, sample_queries.series(qi++ % sample_queries.size()));
  });
  c.w = model_bytes(m);
  return c;
}

/// th = ceil(a * t_F / t_S). A relative slack of 1e-9 absorbs the rounding
/// of the quotient, so exactly integral ratios stay integral.
inline std::size_t compute_threshold(const RuntimeConstants& c, double a) {
  if (!(c.t_S > 0 && c.t_F > 0)) throw InvalidInput("runtime constants must be positive");
  if (!(a >= 0 && std::isfinite(a))) throw InvalidInput("a must be finite and >= 0");
  const double x = a * (c.t_F / c.t_S);
  if (!(x < 1e18)) return std::numeric_limits<std::size_t>::max();
  return static_cast<std::size_t>(std::max(0.0, std::ceil(x * (1 - 1e-9))));
}

/// Largest leaves first (ties by ascending id) while size >= th and the
/// next filter still fits in the budget.
inline std::vector<NodeId> select_greedy(std::vector<LeafSize> leaves, std::size_t th,
                                         const SelectionBudget& budget, std::size_t w) {
  budget.validate();
  std::sort(leaves.begin(), leaves.end(), [](const LeafSize& x, const LeafSize& y) {
    return x.size != y.size ? x.size > y.size : x.leaf_id < y.leaf_id;
  });
  std::vector<NodeId> out;
  std::uint64_t used = 0;
  for (const auto& l : leaves) {
    if (l.size < th || used + w > budget.capacity) break;
    used += w;
    out.push_back(l.leaf_id);
  }
  return out;
}

/// Expected seconds saved per query by a filter on a leaf of `size` series:
/// (1 - p_lb) * (p_F * t_S * size - t_F).
inline double estimate_benefit(std::size_t size, double p_lb, double p_F, const RuntimeConstants& c) {
  if (!(p_lb >= 0 && p_lb <= 1 && p_F >= 0 && p_F <= 1))
    throw InvalidInput("probabilities must be within [0, 1]");
  return (1 - p_lb) * (p_F * c.t_S * double(size) - c.t_F);
}

struct KnapsackOptions {
  std::uint64_t unit = 1024;  ///< weights and capacity are quantized to this many bytes
  std::size_t cell_limit = 200'000'000;
};

struct KnapsackSolution {
  std::vector<std::size_t> items;  ///< ascending
  double value = 0;
};

/// Exact 0/1 knapsack by dynamic programming over quantized capacity.
/// The quantum is the gcd of the weights when that is at least `opt.unit`
/// (then quantization is lossless); otherwise `opt.unit`, with weights
/// rounded up and capacity down so any returned set fits the byte budget. Items with value <= 0 are never taken. Returns nullopt when
/// the table would exceed `cell_limit`; callers fall back to greedy.
inline std::optional<KnapsackSolution> solve_knapsack(std::span<const double> values,
                                                      std::span<const std::uint64_t> weights,
                                                      std::uint64_t capacity,
                                                      const KnapsackOptions& opt = {}) {
  if (values.size() != weights.size()) throw InvalidInput("values and weights must be aligned");
  if (opt.unit == 0) throw InvalidInput("knapsack unit must be positive");
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) throw InvalidInput("knapsack values must be finite");
    if (weights[i] == 0) throw InvalidInput("knapsack weights must be positive");
  }
  std::uint64_t unit = 0;
  for (std::uint64_t w : weights) unit = std::gcd(unit, w);
  if (unit < opt.unit) unit = opt.unit;
  const std::uint64_t cap = capacity / unit;
  std::vector<std::size_t> items;
  std::vector<std::uint64_t> wq;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::uint64_t q = (weights[i] + unit - 1) / unit;
    if (values[i] > 0 && q <= cap) {
      items.push_back(i);
      wq.push_back(q);
    }
  }
  const std::size_t cols = static_cast<std::size_t>(std::min<std::uint64_t>(cap, 1ULL << 40)) + 1;
  if (!items.empty() && cols > opt.cell_limit / items.size()) return std::nullopt;

  // best[c]: best value with capacity c over items seen so far; take[i][c]
  // records whether item i is in that optimum.
  std::vector<double> best(cols, 0.0);
  std::vector<std::vector<bool>> take(items.size(), std::vector<bool>(cols, false));
  for (std::size_t i = 0; i < items.size(); ++i) {
    const double v = values[items[i]];
    const std::size_t wi = wq[i];
    for (std::size_t c = cols; c-- > wi;) {
      const double with = best[c - wi] + v;
      if (with > best[c]) {
        best[c] = with;
        take[i][c] = true;
      }
    }
  }
  KnapsackSolution sol;
  std::size_t c = cols - 1;
  for (std::size_t i = items.size(); i-- > 0;) {
    if (take[i][c]) {
      sol.items.push_back(items[i]);
      sol.value += values[items[i]];
      c -= wq[i];
    }
  }
  std::sort(sol.items.begin(), sol.items.end());
  return sol;
}

struct SelectionReport {
  RuntimeConstants constants;
  double a = 2.0;
  std::size_t th = 0;
  std::uint64_t capacity = 0;
  std::vector<LeafSize> selected;
};

inline nlohmann::json selection_to_json(const SelectionReport& r) {
  nlohmann::json sel = nlohmann::json::array();
  for (const auto& s : r.selected) sel.push_back({{"leaf_id", s.leaf_id}, {"size", s.size}});
  return {{"t_S", r.constants.t_S}, {"t_F", r.constants.t_F}, {"w", r.constants.w},
          {"a", r.a},             {"th", r.th},               {"capacity", r.capacity},
          {"selected", std::move(sel)}};
}

inline SelectionReport selection_from_json(const nlohmann::json& j) {
  try {
    SelectionReport r;
    r.constants.t_S = j.at("t_S").get<double>();
    r.constants.t_F = j.at("t_F").get<double>();
    r.constants.w = j.at("w").get<std::size_t>();
    r.a = j.at("a").get<double>();
    r.th = j.at("th").get<std::size_t>();
    r.capacity = j.at("capacity").get<std::uint64_t>();
    for (const auto& s : j.at("selected"))
      r.selected.push_back({s.at("leaf_id").get<NodeId>(), s.at("size").get<std::size_t>()});
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("selection report: ") + e.what(), 0);
  }
}

}  // namespace leafi
