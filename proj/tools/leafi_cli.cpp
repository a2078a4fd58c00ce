// leafi: gen / queries / build / enhance / query / bench.
//
// Errors go to stderr as one line "error: <kind>: <message>"; usage errors
// exit 2, everything else 1.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "leafi/bench.hpp"
#include "leafi/leafi.hpp"

namespace fs = std::filesystem;
using namespace leafi;

namespace {

void log_line(const std::string& line) { std::cerr << line << '\n'; }

/// The dataset file an index.json points at, resolved like load_index does.
fs::path dataset_of(const fs::path& index_path) {
  const auto j = nlohmann::json::parse(detail::read_file(index_path));
  fs::path p = j.at("dataset_path").get<std::string>();
  if (p.is_relative() && index_path.has_parent_path()) p = index_path.parent_path() / p;
  return p;
}

struct GenArgs {
  std::size_t n = 1000, len = 128;
  std::uint64_t seed = 0;
  std::string out;
};

struct QueriesArgs {
  std::string dataset, out;
  std::size_t count = 200;
  double noise = 0.1;
  std::uint64_t seed = 0;
};

struct BuildArgs {
  std::string dataset, out;
  std::size_t leaf_size = kDefaultMaxLeafSize, segments = kDefaultSegments;
};

struct EnhanceArgs {
  std::string index, out;
  double budget_mb = double(kDefaultBudgetBytes) / (1 << 20);
  double a = 2;
  std::size_t global = 1500, local = 500, calibration = 300, max_epochs = 1000, threads = 0;
  double noise_lo = 0.1, noise_hi = 0.4;
  std::uint64_t seed = 0;
  std::optional<double> t_s, t_f;
  std::optional<std::size_t> threshold;
};

struct QueryArgs {
  std::string enhanced, index, queries, out;
  std::size_t k = 1;
  bool exact = false;
  std::optional<double> target;
};

struct BenchArgs {
  std::string enhanced, index, csv, json, name = "dataset";
  std::vector<double> noises = {0.1, 0.2, 0.3, 0.4};
  std::vector<double> targets = {0.9, 0.95, 0.99};
  std::vector<std::string> methods = {"exact", "epsilon", "leafi"};
  std::vector<std::string> query_sets;
  std::size_t count = 200, validation = 100, threads = 0;
  std::optional<double> epsilon;
  std::uint64_t seed = 0;
  bool parallel = false;
};

void cmd_gen(const GenArgs& a) {
  save_dataset(generate_randwalk(a.n, a.len, a.seed), a.out);
}

void cmd_queries(const QueriesArgs& a) {
  save_dataset(make_queries(load_dataset(a.dataset), a.count, a.noise, a.seed).queries, a.out);
}

void cmd_build(const BuildArgs& a) {
  auto data = std::make_shared<const Dataset>(load_dataset(a.dataset));
  const auto index = build_index(data, a.leaf_size, SegmentConfig(data->length(), a.segments));
  if (index.has_oversized_leaf()) log_line("warning: some leaves exceed the size limit (duplicate summaries)");
  save_index(index, a.out, fs::absolute(a.dataset));
  log_line("built " + std::to_string(index.leaves().size()) + " leaves");
}

void cmd_enhance(const EnhanceArgs& a) {
  const auto index = load_index(a.index);
  EnhanceOptions opt;
  opt.plan = {a.global, a.local, a.calibration, 5};
  opt.noise = {a.noise_lo, a.noise_hi};
  if (!(a.budget_mb >= 0)) throw InvalidInput("--budget-mb must be >= 0");
  opt.budget = {std::uint64_t(a.budget_mb * double(1 << 20)), a.a};
  opt.train.max_epochs = a.max_epochs;
  opt.seed = a.seed;
  opt.threads = a.threads;
  if (a.t_s.has_value() != a.t_f.has_value()) throw InvalidInput("--t-s and --t-f go together");
  if (a.t_s) opt.constants = RuntimeConstants{*a.t_s, *a.t_f, model_bytes(index.dataset().length())};
  opt.threshold = a.threshold;
  opt.out_dir = a.out;
  opt.dataset_path = fs::absolute(dataset_of(a.index));
  opt.log = log_line;
  const auto eidx = enhance(index, opt);
  log_line("enhanced with " + std::to_string(eidx.num_filters()) + " filters (th " +
           std::to_string(eidx.info().selection.th) + ")");
}

nlohmann::json stats_json(const SearchStats& s) {
  return {{"leaves_visited", s.leaves_visited},
          {"leaves_searched", s.leaves_searched},
          {"summarization_prunes", s.summarization_prunes},
          {"filter_prunes", s.filter_prunes},
          {"filter_inferences", s.filter_inferences},
          {"series_scanned", s.series_scanned},
          {"pruning_ratio", pruning_ratio(s)},
          {"wall_time_us", s.wall_time_us}};
}

void cmd_query(const QueryArgs& a) {
  if (a.exact == a.target.has_value()) throw InvalidInput("give exactly one of --exact or --target");
  std::optional<EnhancedIndex> eidx;
  std::optional<Index> index;
  if (!a.enhanced.empty()) {
    eidx.emplace(load_enhanced(a.enhanced));
  } else {
    if (!a.exact) throw InvalidInput("--target needs --enhanced");
    index.emplace(load_index(a.index));
  }
  const auto qs = load_dataset(a.queries);
  std::ofstream file;
  if (!a.out.empty()) {
    file.open(a.out);
    if (!file) throw IoError("cannot write " + a.out);
  }
  std::ostream& out = a.out.empty() ? std::cout : file;
  for (std::size_t q = 0; q < qs.size(); ++q) {
    const auto res = eidx ? search(*eidx, {qs[q], a.k, a.target, a.exact}, false)
                          : exact_search(*index, qs[q], a.k, false);
    nlohmann::json nb = nlohmann::json::array();
    for (const auto& n : res.neighbors) nb.push_back({{"id", n.id}, {"distance", n.distance}});
    out << nlohmann::json{{"query", q}, {"neighbors", std::move(nb)}, {"stats", stats_json(res.stats)}}.dump()
        << '\n';
  }
}

std::vector<QuerySetSpec> parse_query_sets(const std::vector<std::string>& specs) {
  std::vector<QuerySetSpec> sets;
  for (const auto& s : specs) {
    const auto colon = s.rfind(':');
    if (colon == std::string::npos) throw InvalidInput("--query-set expects PATH:NOISE, got " + s);
    sets.push_back({detail::parse_double(s.substr(colon + 1)), load_dataset(s.substr(0, colon))});
  }
  return sets;
}

void cmd_bench(const BenchArgs& a) {
  std::optional<EnhancedIndex> eidx;
  std::optional<Index> plain;
  if (!a.enhanced.empty()) eidx.emplace(load_enhanced(a.enhanced));
  else plain.emplace(load_index(a.index));
  const Index& index = eidx ? eidx->base() : *plain;

  BenchConfig cfg;
  cfg.dataset = a.name;
  cfg.targets = a.targets;
  cfg.methods.clear();
  for (const auto& m : a.methods) cfg.methods.push_back(parse_method(m));
  cfg.parallel = a.parallel;
  cfg.threads = a.threads;
  cfg.sets = a.query_sets.empty() ? make_test_sets(index.dataset(), a.noises, a.count, a.seed)
                                  : parse_query_sets(a.query_sets);
  nlohmann::json eps_echo;
  if (a.epsilon) {
    cfg.epsilon = {*a.epsilon};
    eps_echo = {{"source", "fixed"}};
  } else if (std::find(cfg.methods.begin(), cfg.methods.end(), Method::epsilon) != cfg.methods.end()) {
    const auto val = make_validation_queries(index.dataset(), a.validation, {}, a.seed);
    const auto t = tune_epsilon(index, val);
    cfg.epsilon = {t.epsilon};
    eps_echo = {{"source", "tuned"}, {"fallback", t.fallback}, {"validation_queries", a.validation},
                {"trials", t.trials}};
    log_line("epsilon " + detail::fmt_double(t.epsilon) + (t.fallback ? " (fallback)" : ""));
  }
  cfg.extra = {{"seed", a.seed}, {"epsilon_tuning", eps_echo}};
  const auto report = run_bench(index, eidx ? &*eidx : nullptr, cfg);
  const auto csv = bench_to_csv(report);
  if (!a.csv.empty()) detail::write_file(a.csv, csv);
  if (!a.json.empty()) detail::write_file(a.json, bench_to_json(report).dump(1));
  if (a.csv.empty()) std::cout << csv;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"leafi: summarization-tree similarity search with learned leaf filters"};
  app.require_subcommand(1);

  GenArgs gen;
  QueriesArgs queries;
  BuildArgs build;
  EnhanceArgs enh;
  QueryArgs query;
  BenchArgs bench;
  try {
    const std::uint64_t seed = default_seed();
    gen.seed = queries.seed = enh.seed = bench.seed = seed;
  } catch (const Error& e) {
    std::cerr << "error: " << e.kind() << ": " << e.what() << '\n';
    return 2;
  }

  auto* g = app.add_subcommand("gen", "Generate a RandWalk dataset");
  g->add_option("--n", gen.n, "Number of series")->check(CLI::PositiveNumber);
  g->add_option("--len", gen.len, "Series length")->check(CLI::Range(2, 1 << 20));
  g->add_option("--seed", gen.seed, "Seed (default LEAFI_SEED or 42)");
  g->add_option("--out", gen.out, "Output dataset file")->required();

  auto* qg = app.add_subcommand("queries", "Sample noisy queries from a dataset");
  qg->add_option("--dataset", queries.dataset)->required()->check(CLI::ExistingFile);
  qg->add_option("--count", queries.count)->check(CLI::PositiveNumber);
  qg->add_option("--noise", queries.noise, "Gaussian noise level")->check(CLI::Range(0.0, 1.0));
  qg->add_option("--seed", queries.seed);
  qg->add_option("--out", queries.out)->required();

  auto* b = app.add_subcommand("build", "Build the summarization tree");
  b->add_option("--dataset", build.dataset)->required()->check(CLI::ExistingFile);
  b->add_option("--out", build.out, "Index JSON path")->required();
  b->add_option("--leaf-size", build.leaf_size)->check(CLI::PositiveNumber);
  b->add_option("--segments", build.segments)->check(CLI::PositiveNumber);

  auto* e = app.add_subcommand("enhance", "Select leaves, train filters, fit auto-tuners");
  e->add_option("--index", enh.index)->required()->check(CLI::ExistingFile);
  e->add_option("--out", enh.out, "Enhancement directory")->required();
  e->add_option("--budget-mb", enh.budget_mb, "Filter memory budget in MiB");
  e->add_option("--a", enh.a, "Threshold factor a (th = a t_F / t_S)");
  e->add_option("--global", enh.global, "Global queries (calibration included)");
  e->add_option("--local", enh.local, "Local queries per selected leaf");
  e->add_option("--calibration", enh.calibration, "Calibration queries");
  e->add_option("--noise-lo", enh.noise_lo);
  e->add_option("--noise-hi", enh.noise_hi);
  e->add_option("--max-epochs", enh.max_epochs)->check(CLI::PositiveNumber);
  e->add_option("--seed", enh.seed);
  e->add_option("--threads", enh.threads, "Worker threads (0 = all cores)");
  e->add_option("--t-s", enh.t_s, "Seconds per distance; skips measurement");
  e->add_option("--t-f", enh.t_f, "Seconds per filter inference; skips measurement");
  e->add_option("--threshold", enh.threshold, "Override the leaf-size threshold");

  auto* q = app.add_subcommand("query", "Answer k-NN queries");
  auto* src = q->add_option("--enhanced", query.enhanced)->check(CLI::ExistingDirectory);
  q->add_option("--index", query.index)->check(CLI::ExistingFile)->excludes(src);
  q->add_option("--queries", query.queries)->required()->check(CLI::ExistingFile);
  q->add_option("--k", query.k)->check(CLI::PositiveNumber);
  q->add_flag("--exact", query.exact, "Disable filter pruning");
  q->add_option("--target", query.target, "Recall target in [0, 1]");
  q->add_option("--out", query.out, "JSON lines output (default stdout)");

  auto* be = app.add_subcommand("bench", "Compare exact, epsilon and leafi search");
  auto* bsrc = be->add_option("--enhanced", bench.enhanced)->check(CLI::ExistingDirectory);
  be->add_option("--index", bench.index)->check(CLI::ExistingFile)->excludes(bsrc);
  be->add_option("--name", bench.name, "Dataset column value");
  be->add_option("--noise", bench.noises, "Noise levels of generated query sets")->delimiter(',');
  be->add_option("--count", bench.count, "Queries per generated set")->check(CLI::PositiveNumber);
  be->add_option("--query-set", bench.query_sets, "PATH:NOISE query file (repeatable)");
  be->add_option("--targets", bench.targets)->delimiter(',');
  be->add_option("--methods", bench.methods)->delimiter(',');
  be->add_option("--validation", bench.validation, "Epsilon validation queries")->check(CLI::PositiveNumber);
  be->add_option("--epsilon", bench.epsilon, "Fixed epsilon; skips tuning");
  be->add_option("--seed", bench.seed);
  be->add_flag("--parallel", bench.parallel, "Run queries concurrently (timings unreliable)");
  be->add_option("--threads", bench.threads);
  be->add_option("--csv", bench.csv, "CSV output (default stdout)");
  be->add_option("--json", bench.json, "JSON output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    std::cerr << "error: usage: " << ex.what() << '\n';
    return 2;
  }

  try {
    if (*g) cmd_gen(gen);
    else if (*qg) cmd_queries(queries);
    else if (*b) cmd_build(build);
    else if (*e) cmd_enhance(enh);
    else if (*q) {
      if (query.enhanced.empty() && query.index.empty())
        throw InvalidInput("query needs --enhanced or --index");
      cmd_query(query);
    } else if (*be) {
      if (bench.enhanced.empty() && bench.index.empty())
        throw InvalidInput("bench needs --enhanced or --index");
      cmd_bench(bench);
    }
  } catch (const Error& ex) {
    std::cerr << "error: " << ex.kind() << ": " << ex.what() << '\n';
    return 1;
  } catch (const std::exception& ex) {
    std::cerr << "error: internal: " << ex.what() << '\n';
    return 1;
  }
  return 0;
}
