#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include <gsl/gsl_errno.h>
#include <gsl/gsl_interp.h>

#include "leafi/conformal.hpp"

namespace leafi {
namespace {

TEST(ComputeAlphasTest, PerfectAndBiasedPredictors) {
  const std::vector<double> t = {1.0, 2.5, 0.3, 4.0};
  for (double a : compute_alphas(t, t)) EXPECT_EQ(a, 0.0);
  std::vector<double> biased = t;
  for (auto& v : biased) v -= 0.75;
  for (double a : compute_alphas(biased, t)) EXPECT_DOUBLE_EQ(a, 0.75);
  EXPECT_THROW(compute_alphas(t, std::vector<double>{1.0}), InvalidInput);
}

TEST(ComputeAlphasTest, SortedPermutationOfErrors) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g(5, 2);
  std::vector<double> p(200), t(200), errs(200);
  for (std::size_t k = 0; k < 200; ++k) {
    p[k] = g(rng);
    t[k] = g(rng);
    errs[k] = std::abs(t[k] - p[k]);
  }
  const auto a = compute_alphas(p, t);
  EXPECT_TRUE(std::is_sorted(a.rbegin(), a.rend()));
  std::sort(errs.begin(), errs.end(), std::greater<>());
  EXPECT_EQ(a, errs);
}

// Calibration data from a real small index with synthetic predictors:
// d^f = d^L * (1 + noise) so scores are realistic but independent of training.
// Heavy query noise keeps the answer leaf from always being visited first.
struct Fixture {
  Index index;
  GlobalTrainSet global;
  std::vector<NodeId> filters;
  std::vector<std::vector<double>> predictions;
  CalibrationData cal;
  std::vector<std::vector<double>> alphas;

  static Fixture Make(double rel_noise, std::uint64_t seed = 1) {
    auto index = build_index(generate_randwalk(4000, 64, seed), 100, SegmentConfig(64, 8));
    std::vector<NodeId> filters;
    for (NodeId leaf : index.leaves())
      if (index.node(leaf).size >= 40) filters.push_back(leaf);
    auto global = collect_targets(index, filters,
                                  generate_global_queries(index.dataset(), 160, {0.5, 1.0}, seed + 1), 100, 2);
    std::mt19937_64 rng(seed + 2);
    std::normal_distribution<double> g(0.0, rel_noise);
    std::vector<std::vector<double>> preds(filters.size());
    std::vector<std::vector<double>> alphas;
    for (std::size_t i = 0; i < filters.size(); ++i) {
      std::vector<double> targets;
      for (std::size_t q = global.calibration_begin; q < global.size(); ++q) {
        const double dl = global.d_L(q, index.leaf_ordinal(filters[i]));
        preds[i].push_back(dl * (1 + g(rng)));
        targets.push_back(dl);
      }
      alphas.push_back(compute_alphas(preds[i], targets));
    }
    auto cal = make_calibration(index, global, filters, preds);
    return {std::move(index), std::move(global), filters, std::move(preds), std::move(cal),
            std::move(alphas)};
  }
};

const Fixture& Noisy() {
  static const Fixture f = Fixture::Make(0.3);
  return f;
}

std::vector<double> MaxOffsets(const Fixture& f) {
  std::vector<double> o;
  for (const auto& a : f.alphas) o.push_back(a.front());
  return o;
}

TEST(SimulateSearchTest, InfiniteOffsetsGiveExactDistances) {
  const auto& f = Noisy();
  ASSERT_GT(f.filters.size(), 5u);
  const std::vector<double> inf(f.filters.size(), kInf);
  for (std::size_t q = 0; q < f.cal.size(); ++q)
    EXPECT_EQ(simulate_search(f.cal.skeletons[q], inf), f.cal.nn_distance[q]);
}

TEST(SimulateSearchTest, PerfectPredictorAtZeroOffsetIsExact) {
  const auto& f = Noisy();
  auto cal = f.cal;
  for (auto& sk : cal.skeletons)
    for (auto& s : sk) s.prediction = s.d_L;
  const std::vector<double> zero(f.filters.size(), 0.0);
  for (std::size_t q = 0; q < cal.size(); ++q)
    EXPECT_EQ(simulate_search(cal.skeletons[q], zero), cal.nn_distance[q]);
}

TEST(SimulateSearchTest, MaxScoreOffsetsCoverEveryCalibrationQuery) {
  const auto& f = Noisy();
  const auto o = MaxOffsets(f);
  for (std::size_t q = 0; q < f.cal.size(); ++q)
    EXPECT_EQ(simulate_search(f.cal.skeletons[q], o), f.cal.nn_distance[q]);
  EXPECT_EQ(calibration_recall(f.cal, o), 1.0);
}

TEST(SimulateSearchTest, ZeroOffsetsWithNoisyFiltersLoseRecall) {
  const auto& f = Noisy();
  const std::vector<double> zero(f.filters.size(), 0.0);
  EXPECT_LT(calibration_recall(f.cal, zero), 1.0);
  EXPECT_THROW(simulate_search(f.cal.skeletons[0], std::vector<double>{}), InvalidInput);
}

// Raising one filter's offset can stop it from pruning an early leaf; the
// tighter best-so-far then lets a later filter prune the leaf that held the
// answer. Per-query recall is therefore not monotone in offsets in general.
TEST(SimulateSearchTest, LargerOffsetsCanLowerPerQueryRecall) {
  const std::vector<CalibrationStep> sk = {
      {0, 0.0, 8.0, kNoFilter, 0.0},  // first leaf sets bsf = 8
      {1, 0.0, 5.0, 0, 9.0},          // filter 0
      {2, 0.0, 3.0, 1, 10.0},         // filter 1 holds the answer
  };
  EXPECT_EQ(simulate_search(sk, std::vector<double>{0.0, 4.0}), 3.0);
  EXPECT_EQ(simulate_search(sk, std::vector<double>{2.0, 4.0}), 5.0);
}

TEST(SteffenTest, MatchesGslOracle) {
  gsl_set_error_handler_off();
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> step(0.01, 0.3), rise(0.0, 2.0);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 3 + trial % 12;
    std::vector<double> x(n), y(n);
    x[0] = 0.1;
    y[0] = rise(rng);
    for (std::size_t i = 1; i < n; ++i) {
      x[i] = x[i - 1] + step(rng);
      y[i] = y[i - 1] + (trial % 3 == 0 ? rise(rng) - 1.0 : rise(rng));  // some non-monotone
    }
    gsl_interp* gi = gsl_interp_alloc(gsl_interp_steffen, n);
    gsl_interp_accel* acc = gsl_interp_accel_alloc();
    ASSERT_EQ(gsl_interp_init(gi, x.data(), y.data(), n), GSL_SUCCESS);
    const SteffenInterpolator mine(x, y);
    for (int s = 0; s <= 200; ++s) {
      const double xv = std::min(x.back(), x.front() + (x.back() - x.front()) * s / 200.0);
      const double want = gsl_interp_eval(gi, x.data(), y.data(), xv, acc);
      EXPECT_NEAR(mine(xv), want, 1e-12 * (1 + std::abs(want))) << "trial " << trial << " x " << xv;
    }
    gsl_interp_accel_free(acc);
    gsl_interp_free(gi);
  }
}

TEST(SteffenTest, MonotoneDataGivesMonotoneInterpolant) {
  const SteffenInterpolator f({0.0, 0.1, 0.5, 0.55, 0.9, 1.0}, {0.0, 0.0, 0.2, 1.5, 1.6, 4.0});
  double prev = f(0.0);
  for (int s = 1; s <= 1000; ++s) {
    const double v = f(s / 1000.0);
    EXPECT_GE(v, prev - 1e-15);
    prev = v;
  }
}

TEST(MonotoneKnotsTest, DuplicatesTakeMaxAndOffsetsBecomeMonotone) {
  const auto k = monotone_knots({{0.5, 1.0}, {0.9, 0.5}, {0.5, 2.0}, {1.0, 3.0}, {0.7, 1.0}});
  ASSERT_EQ(k.size(), 4u);
  EXPECT_EQ(k[0], (Knot{0.5, 2.0}));
  EXPECT_EQ(k[1], (Knot{0.7, 2.0}));
  EXPECT_EQ(k[2], (Knot{0.9, 2.0}));
  EXPECT_EQ(k[3], (Knot{1.0, 3.0}));
}

TEST(FitAutoTunersTest, TopPositionIsFullRecallAndCurvesAreMonotone) {
  const auto& f = Noisy();
  const auto fit = fit_auto_tuners(f.filters, f.alphas, f.cal, 2);
  EXPECT_EQ(fit.position_quality.front(), 1.0);
  ASSERT_EQ(fit.curves.size(), f.filters.size());
  for (const auto& c : fit.curves) {
    EXPECT_FALSE(c.degenerate());
    double prev = c(0.0);
    EXPECT_EQ(prev, 0.0);
    for (int s = 1; s <= 2000; ++s) {
      const double v = c(s / 2000.0);
      EXPECT_GE(v, prev);
      EXPECT_LE(v, c.max_offset());
      prev = v;
    }
    EXPECT_EQ(c(1.0), c.max_offset());
  }
  // The raw position qualities after isotonic repair are non-increasing in j.
  auto q = fit.position_quality;
  for (std::size_t j = 1; j < q.size(); ++j) q[j] = std::min(q[j], q[j - 1]);
  for (std::size_t j = 1; j < q.size(); ++j) EXPECT_LE(q[j], q[j - 1]);
}

TEST(FitAutoTunersTest, PerfectPredictorsGiveZeroOffsets) {
  auto f = Fixture::Make(0.0, 3);
  const auto fit = fit_auto_tuners(f.filters, f.alphas, f.cal, 1);
  for (double q : fit.position_quality) EXPECT_EQ(q, 1.0);
  AutoTuner tuner(fit.curves);
  for (double t : {0.0, 0.5, 0.99, 1.0})
    for (double o : *tuner.offsets(t)) EXPECT_EQ(o, 0.0);
  for (const auto& c : fit.curves) EXPECT_TRUE(c.degenerate());
}

TEST(FitAutoTunersTest, RejectsSmallCalibrationSets) {
  const auto& f = Noisy();
  auto cal = f.cal;
  cal.skeletons.resize(10);
  cal.nn_distance.resize(10);
  std::vector<std::vector<double>> alphas;
  for (const auto& a : f.alphas) alphas.emplace_back(a.begin(), a.begin() + 10);
  EXPECT_THROW(fit_auto_tuners(f.filters, alphas, cal), InvalidInput);
}

TEST(AutoTunerTest, ClampsMonotoneAndMemoized) {
  const auto& f = Noisy();
  AutoTuner tuner(fit_auto_tuners(f.filters, f.alphas, f.cal).curves);
  const auto lo = tuner.offsets(0.0), hi = tuner.offsets(1.0);
  for (std::size_t i = 0; i < tuner.size(); ++i) {
    EXPECT_EQ((*lo)[i], 0.0);
    EXPECT_EQ((*hi)[i], f.alphas[i].front());
  }
  const auto a = tuner.offsets(0.9), b = tuner.offsets(0.95), c = tuner.offsets(0.99);
  for (std::size_t i = 0; i < tuner.size(); ++i) {
    EXPECT_LE((*a)[i], (*b)[i]);
    EXPECT_LE((*b)[i], (*c)[i]);
  }
  EXPECT_EQ(tuner.offsets(0.95).get(), b.get());
  EXPECT_EQ(tuner.memo_size(), 5u);
  EXPECT_THROW(tuner.offsets(1.5), InvalidInput);
  EXPECT_THROW(tuner.offsets(std::nan("")), InvalidInput);
}

TEST(AutoTunerTest, ConcurrentLookupsAgree) {
  const auto& f = Noisy();
  AutoTuner tuner(fit_auto_tuners(f.filters, f.alphas, f.cal).curves);
  std::vector<std::vector<double>> seen(64);
  parallel_for(64, 8, [&](std::size_t i) { seen[i] = *tuner.offsets(0.9 + 0.001 * double(i % 4)); });
  for (std::size_t i = 0; i < 64; ++i) EXPECT_EQ(seen[i], *tuner.offsets(0.9 + 0.001 * double(i % 4)));
}

TEST(CurveTest, DegenerateCurveIsMaximallyConservative) {
  const QualityOffsetCurve c(3, {2.0, 1.0, 0.5}, {{0.8, 0.5}});
  EXPECT_TRUE(c.degenerate());
  EXPECT_EQ(c(0.0), 2.0);
  EXPECT_EQ(c(0.99), 2.0);
}

TEST(CurveTest, JsonRoundTrip) {
  const auto& f = Noisy();
  const auto curves = fit_auto_tuners(f.filters, f.alphas, f.cal).curves;
  const auto back = curves_from_json(nlohmann::json::parse(curves_to_json(curves).dump()));
  ASSERT_EQ(back.size(), curves.size());
  for (std::size_t i = 0; i < curves.size(); ++i) {
    EXPECT_EQ(back[i], curves[i]);
    for (double t : {0.5, 0.9, 0.97, 0.99}) EXPECT_EQ(back[i](t), curves[i](t));
  }
}

}  // namespace
}  // namespace leafi
