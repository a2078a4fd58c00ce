#pragma once

// Piecewise segment means, per-node min/max envelopes over those means, and
// the envelope lower bound on Euclidean distance.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "leafi/core.hpp"

namespace leafi {

inline constexpr std::size_t kDefaultSegments = 8;

/// Equal-width split of [0, m) into `num_segments` contiguous ranges; the
/// first m % num_segments segments are one point wider.
class SegmentConfig {
 public:
  SegmentConfig() = default;

  SegmentConfig(std::size_t length, std::size_t num_segments) : length_(length) {
    if (num_segments < 1 || num_segments > length)
      throw InvalidInput("segment count must be within [1, m]");
    const std::size_t base = length / num_segments;
    const std::size_t extra = length % num_segments;
    std::size_t start = 0;
    for (std::size_t i = 0; i < num_segments; ++i) {
      const std::size_t width = base + (i < extra ? 1 : 0);
      starts_.push_back(start);
      start += width;
    }
    starts_.push_back(start);
  }

  std::size_t num_segments() const noexcept { return starts_.empty() ? 0 : starts_.size() - 1; }
  std::size_t length() const noexcept { return length_; }
  std::size_t begin(std::size_t seg) const noexcept { return starts_[seg]; }
  std::size_t end(std::size_t seg) const noexcept { return starts_[seg + 1]; }
  std::size_t width(std::size_t seg) const noexcept { return end(seg) - begin(seg); }

  friend bool operator==(const SegmentConfig&, const SegmentConfig&) = default;

 private:
  std::size_t length_ = 0;
  std::vector<std::size_t> starts_;
};

struct SeriesSummary {
  std::vector<double> means;
};

struct NodeEnvelope {
  std::vector<double> mean_min;
  std::vector<double> mean_max;

  bool empty() const noexcept { return mean_min.empty(); }

  friend bool operator==(const NodeEnvelope&, const NodeEnvelope&) = default;
};

inline SeriesSummary summarize_series(SeriesView s, const SegmentConfig& cfg) {
  if (s.size() != cfg.length())
    throw InvalidInput("series length does not match segment config");
  SeriesSummary out;
  out.means.resize(cfg.num_segments());
  for (std::size_t seg = 0; seg < cfg.num_segments(); ++seg) {
    double sum = 0;
    for (std::size_t t = cfg.begin(seg); t < cfg.end(seg); ++t) sum += s[t];
    out.means[seg] = sum / double(cfg.width(seg));
  }
  return out;
}

inline void envelope_insert_inplace(NodeEnvelope& env, const SeriesSummary& summ) {
  if (env.empty()) {
    env.mean_min = summ.means;
    env.mean_max = summ.means;
    return;
  }
  if (env.mean_min.size() != summ.means.size())
    throw InvalidInput("summary segment count does not match envelope");
  for (std::size_t i = 0; i < summ.means.size(); ++i) {
    env.mean_min[i] = std::min(env.mean_min[i], summ.means[i]);
    env.mean_max[i] = std::max(env.mean_max[i], summ.means[i]);
  }
}

inline NodeEnvelope envelope_insert(NodeEnvelope env, const SeriesSummary& summ) {
  envelope_insert_inplace(env, summ);
  return env;
}

/// Lower bound from a precomputed query summary. Each segment contributes
/// width * (distance from the query mean to [min, max])^2.
inline double lower_bound(const SeriesSummary& query, const NodeEnvelope& env,
                          const SegmentConfig& cfg) {
  double sum = 0;
  for (std::size_t i = 0; i < cfg.num_segments(); ++i) {
    const double x = query.means[i];
    const double gap = std::max({env.mean_min[i] - x, x - env.mean_max[i], 0.0});
    sum += double(cfg.width(i)) * gap * gap;
  }
  return std::sqrt(sum);
}

inline double lower_bound(SeriesView q, const NodeEnvelope& env, const SegmentConfig& cfg) {
  return lower_bound(summarize_series(q, cfg), env, cfg);
}

}  // namespace leafi
