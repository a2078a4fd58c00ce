#pragma once

// Epsilon-approximate search baseline and the benchmark harness that compares
// exact search, tuned epsilon-search and filtered search at recall targets.

#include <nlohmann/json.hpp>

#include <charconv>
#include <sstream>
#include <string>
#include <vector>

#include "leafi/leafi.hpp"

namespace leafi {

struct EpsilonConfig {
  double epsilon = 0;

  void validate() const {
    if (!(std::isfinite(epsilon) && epsilon >= 0)) throw InvalidInput("epsilon must be finite and >= 0");
  }
};

/// Prunes a node once its bound exceeds bsf / (1 + eps), so the answer is
/// within a factor (1 + eps) of the nearest neighbor.
struct EpsilonGate {
  double scale = 1;
  bool prune_by_bound(double lb, double bsf) const noexcept { return lb > bsf / scale; }
  bool prune_by_filter(NodeId, SeriesView, double, SearchStats&) const noexcept { return false; }
};

inline SearchOutcome epsilon_search(const Index& index, SeriesView q, std::size_t k,
                                    EpsilonConfig eps, bool record_trace = true) {
  eps.validate();
  EpsilonGate gate{1 + eps.epsilon};
  return best_first_search(index, q, k, gate, record_trace);
}

/// Recall-at-1 against the exact answer: same id, or a distance tie.
inline bool hit_at_1(const Neighbor& got, const Neighbor& exact) {
  return got.id == exact.id || recalled(got.distance, exact.distance);
}

inline std::vector<double> epsilon_grid() {
  std::vector<double> g;
  for (int i = 0; i <= 12; ++i) g.push_back(1.0 + 0.5 * i);
  return g;
}

struct EpsilonTuning {
  double epsilon = 1;
  bool fallback = false;
  /// (epsilon, validation recall) for every grid point tried.
  std::vector<std::pair<double, double>> trials;
};

/// Largest grid value whose validation recall-at-1 reaches `min_recall`;
/// falls back to 1 when none does.
inline EpsilonTuning tune_epsilon(const Index& index, const Dataset& validation,
                                  double min_recall = 0.99,
                                  const std::vector<double>& grid = epsilon_grid()) {
  if (validation.empty()) throw InvalidInput("epsilon tuning needs validation queries");
  std::vector<Neighbor> exact;
  for (std::size_t q = 0; q < validation.size(); ++q)
    exact.push_back(exact_search(index, validation[q], 1, false).neighbors[0]);
  EpsilonTuning out;
  out.fallback = true;
  for (double eps : grid) {
    std::size_t hits = 0;
    for (std::size_t q = 0; q < validation.size(); ++q)
      hits += hit_at_1(epsilon_search(index, validation[q], 1, {eps}, false).neighbors[0], exact[q]);
    const double recall = double(hits) / double(validation.size());
    out.trials.emplace_back(eps, recall);
    if (recall >= min_recall && (out.fallback || eps > out.epsilon)) {
      out.epsilon = eps;
      out.fallback = false;
    }
  }
  if (out.fallback) out.epsilon = 1;
  return out;
}

// ---------------------------------------------------------------------------
// Benchmark

enum class Method { exact, epsilon, leafi };

inline std::string method_name(Method m) {
  switch (m) {
    case Method::exact: return "exact";
    case Method::epsilon: return "epsilon";
    case Method::leafi: return "leafi";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  if (s == "exact") return Method::exact;
  if (s == "epsilon") return Method::epsilon;
  if (s == "leafi") return Method::leafi;
  throw InvalidInput("unknown method '" + s + "' (exact, epsilon, leafi)");
}

struct QuerySetSpec {
  double noise = 0;
  Dataset queries;
};

struct BenchConfig {
  std::string dataset;
  std::vector<QuerySetSpec> sets;
  std::vector<double> targets = {0.9, 0.95, 0.99};
  std::vector<Method> methods = {Method::exact, Method::epsilon, Method::leafi};
  std::size_t k = 1;
  EpsilonConfig epsilon{1};
  /// Runs queries concurrently; timing columns are then unreliable.
  bool parallel = false;
  std::size_t threads = 0;
  /// Echoed verbatim into the JSON report.
  nlohmann::json extra;
};

struct QueryRecord {
  Neighbor nearest;
  bool hit = false;
  double pruning_ratio = 0;
  std::size_t leaves_searched = 0;
  double time_us = 0;
};

struct BenchRow {
  std::string dataset;
  std::string method;
  double target = 0;
  double noise = 0;
  std::size_t queries = 0;
  double mean_recall = 0;
  double mean_pruning_ratio = 0;
  double mean_leaves_searched = 0;
  double mean_time_us = 0;
  double median_time_us = 0;

  friend bool operator==(const BenchRow&, const BenchRow&) = default;
};

struct BenchReport {
  nlohmann::json config;
  std::vector<BenchRow> rows;
  /// Per-query details aligned with `rows`; not serialized.
  std::vector<std::vector<QueryRecord>> records;
};

inline constexpr const char* kBenchCsvHeader =
    "dataset,method,target,noise,queries,mean_recall,mean_pruning_ratio,mean_leaves_searched,"
    "mean_time_us,median_time_us";

namespace detail {

inline BenchRow summarize_rows(const std::string& dataset, Method m, double target, double noise,
                               const std::vector<QueryRecord>& recs) {
  BenchRow row{dataset, method_name(m), target, noise, recs.size()};
  std::vector<double> times;
  for (const auto& r : recs) {
    row.mean_recall += r.hit;
    row.mean_pruning_ratio += r.pruning_ratio;
    row.mean_leaves_searched += double(r.leaves_searched);
    row.mean_time_us += r.time_us;
    times.push_back(r.time_us);
  }
  if (!recs.empty()) {
    const double n = double(recs.size());
    row.mean_recall /= n;
    row.mean_pruning_ratio /= n;
    row.mean_leaves_searched /= n;
    row.mean_time_us /= n;
    row.median_time_us = median(times);
  }
  return row;
}

inline std::string fmt_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

inline double parse_double(const std::string& s) {
  double v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw InvalidInput("bad number '" + s + "'");
  return v;
}

}  // namespace detail

inline constexpr std::uint64_t kTestQueryStream = 100;
inline constexpr std::uint64_t kValidationQueryStream = 101;

/// One held-out query set per noise level, seeded per level.
inline std::vector<QuerySetSpec> make_test_sets(const Dataset& data, const std::vector<double>& noises,
                                                std::size_t count, std::uint64_t seed) {
  std::vector<QuerySetSpec> sets;
  for (std::size_t i = 0; i < noises.size(); ++i)
    sets.push_back({noises[i],
                    make_queries(data, count, noises[i], derive_seed(seed, kTestQueryStream, i)).queries});
  return sets;
}

/// Epsilon validation queries, noise drawn per query from `range`.
inline Dataset make_validation_queries(const Dataset& data, std::size_t count, NoiseRange range,
                                       std::uint64_t seed) {
  return generate_global_queries(data, count, range, derive_seed(seed, kValidationQueryStream)).queries;
}

/// Rows are ordered by query set, then method, then target. Exact and
/// epsilon rows ignore the target and repeat one measurement per target.
inline BenchReport run_bench(const Index& index, const EnhancedIndex* eidx, const BenchConfig& cfg) {
  if (cfg.dataset.find_first_of(",\"\n") != std::string::npos)
    throw InvalidInput("dataset name must not contain commas, quotes or newlines");
  cfg.epsilon.validate();
  for (double t : cfg.targets)
    if (!(t >= 0 && t <= 1)) throw InvalidInput("recall target must be within [0, 1]");
  const bool needs_eidx =
      std::find(cfg.methods.begin(), cfg.methods.end(), Method::leafi) != cfg.methods.end();
  if (needs_eidx && eidx == nullptr) throw MissingArtifact("the leafi method needs an enhanced index");
  const std::size_t threads = cfg.parallel ? cfg.threads : 1;

  BenchReport report;
  for (const auto& set : cfg.sets) {
    const auto& qs = set.queries;
    if (qs.length() != index.dataset().length())
      throw InvalidInput("query length does not match the dataset");
    std::vector<Neighbor> oracle(qs.size());
    parallel_for(qs.size(), threads, [&](std::size_t q) {
      oracle[q] = exact_search(index, qs[q], cfg.k, false).neighbors[0];
    });
    auto measure = [&](auto&& run) {
      std::vector<QueryRecord> recs(qs.size());
      parallel_for(qs.size(), threads, [&](std::size_t q) {
        const SearchOutcome out = run(qs[q]);
        recs[q] = {out.neighbors[0], hit_at_1(out.neighbors[0], oracle[q]), pruning_ratio(out.stats),
                   out.stats.leaves_searched, out.stats.wall_time_us};
      });
      return recs;
    };
    for (Method m : cfg.methods) {
      std::vector<QueryRecord> fixed;
      if (m == Method::exact)
        fixed = measure([&](SeriesView q) { return exact_search(index, q, cfg.k, false); });
      else if (m == Method::epsilon)
        fixed = measure([&](SeriesView q) { return epsilon_search(index, q, cfg.k, cfg.epsilon, false); });
      for (double t : cfg.targets) {
        auto recs = m == Method::leafi ? measure([&](SeriesView q) {
          return search(*eidx, {q, cfg.k, t, false}, false);
        })
                                       : fixed;
        report.rows.push_back(detail::summarize_rows(cfg.dataset, m, t, set.noise, recs));
        report.records.push_back(std::move(recs));
      }
    }
  }

  nlohmann::json methods = nlohmann::json::array();
  for (Method m : cfg.methods) methods.push_back(method_name(m));
  nlohmann::json noises = nlohmann::json::array();
  for (const auto& s : cfg.sets) noises.push_back({{"noise", s.noise}, {"queries", s.queries.size()}});
  report.config = {{"dataset", cfg.dataset},
                   {"n", index.dataset().size()},
                   {"m", index.dataset().length()},
                   {"leaves", index.leaves().size()},
                   {"filters", eidx ? eidx->num_filters() : 0},
                   {"k", cfg.k},
                   {"targets", cfg.targets},
                   {"methods", std::move(methods)},
                   {"query_sets", std::move(noises)},
                   {"epsilon", cfg.epsilon.epsilon},
                   {"parallel", cfg.parallel},
                   {"timing_reliable", !cfg.parallel},
                   {"extra", cfg.extra}};
  return report;
}

inline std::string bench_to_csv(const BenchReport& r) {
  std::ostringstream out;
  out << kBenchCsvHeader << '\n';
  for (const auto& row : r.rows)
    out << row.dataset << ',' << row.method << ',' << detail::fmt_double(row.target) << ','
        << detail::fmt_double(row.noise) << ',' << row.queries << ','
        << detail::fmt_double(row.mean_recall) << ',' << detail::fmt_double(row.mean_pruning_ratio)
        << ',' << detail::fmt_double(row.mean_leaves_searched) << ','
        << detail::fmt_double(row.mean_time_us) << ',' << detail::fmt_double(row.median_time_us)
        << '\n';
  return out.str();
}

inline nlohmann::json bench_row_to_json(const BenchRow& row) {
  return {{"dataset", row.dataset},
          {"method", row.method},
          {"target", row.target},
          {"noise", row.noise},
          {"queries", row.queries},
          {"mean_recall", row.mean_recall},
          {"mean_pruning_ratio", row.mean_pruning_ratio},
          {"mean_leaves_searched", row.mean_leaves_searched},
          {"mean_time_us", row.mean_time_us},
          {"median_time_us", row.median_time_us}};
}

inline nlohmann::json bench_to_json(const BenchReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) rows.push_back(bench_row_to_json(row));
  return {{"config", r.config}, {"rows", std::move(rows)}};
}

inline std::vector<BenchRow> bench_rows_from_json(const nlohmann::json& j) {
  std::vector<BenchRow> rows;
  try {
    for (const auto& r : j.at("rows"))
      rows.push_back({r.at("dataset").get<std::string>(), r.at("method").get<std::string>(),
                      r.at("target").get<double>(), r.at("noise").get<double>(),
                      r.at("queries").get<std::size_t>(), r.at("mean_recall").get<double>(),
                      r.at("mean_pruning_ratio").get<double>(),
                      r.at("mean_leaves_searched").get<double>(), r.at("mean_time_us").get<double>(),
                      r.at("median_time_us").get<double>()});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bench json: ") + e.what(), 0);
  }
  return rows;
}

inline std::vector<BenchRow> parse_bench_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kBenchCsvHeader)
    throw FormatError("bench csv header mismatch", 0);
  std::vector<BenchRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    if (f.size() != 10) throw FormatError("bench csv row has " + std::to_string(f.size()) + " fields", 0);
    rows.push_back({f[0], f[1], detail::parse_double(f[2]), detail::parse_double(f[3]),
                    std::size_t(detail::parse_double(f[4])), detail::parse_double(f[5]),
                    detail::parse_double(f[6]), detail::parse_double(f[7]),
                    detail::parse_double(f[8]), detail::parse_double(f[9])});
  }
  return rows;
}

}  // namespace leafi
