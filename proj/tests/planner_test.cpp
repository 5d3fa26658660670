#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "pcmoe/planner.hpp"
#include "pcmoe/workload.hpp"
#include "planner_oracle.hpp"
#include "test_support.hpp"

namespace pcmoe {
namespace {

ModelShape tiny_shape() {
  ModelShape s;
  s.experts_per_layer = {4, 4};
  s.interval_domain = {1, 2};
  return s;
}

ProfileRecord record_from(const PCConfig& c, const Vector& wa, const Vector& wm, const Vector& wl) {
  const Vector f = featurize(c);
  auto dot = [&](const Vector& w) {
    double s = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i) s += w[i] * f[i];
    return s;
  };
  return {c, dot(wa), 0.0, dot(wm), dot(wl)};
}

double rss(const std::vector<ProfileRecord>& recs, const Vector& w) {
  double s = 0.0;
  for (const auto& r : recs) {
    const Vector f = featurize(r.config);
    double p = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i) p += w[i] * f[i];
    s += (r.accuracy - p) * (r.accuracy - p);
  }
  return s;
}

TEST(Featurize, Examples) {
  EXPECT_EQ(featurize(PCConfig{4, {2, 3}, {Strategy::Skip, Strategy::Exchange}}),
            (Vector{1, 2, 3, 0, 1, 0.25}));
  EXPECT_EQ(featurize(PCConfig{1, {1}, {Strategy::Skip}}).back(), 1.0);
}

TEST(Featurize, InjectiveOnSmallSpace) {
  ModelShape s;
  s.experts_per_layer = {3, 2};
  const auto configs = testing::enumerate_configs(s);
  std::set<Vector> seen;
  for (const auto& c : configs) seen.insert(featurize(c));
  EXPECT_EQ(seen.size(), configs.size());
  EXPECT_EQ(configs.size(), 6u * 6 * 4);
}

TEST(Fit, RecoversAffineGroundTruth) {
  const Vector wa{0.2, 0.05, 0.07, -0.01, 0.02, -0.1};
  const Vector wm{1000, 300, 500, 0, 0, 0};
  const Vector wl{3, 0.5, 0.25, 0.1, -0.2, 2};
  ModelShape shape;
  shape.experts_per_layer = {6, 6};
  std::vector<ProfileRecord> recs;
  for (const auto& c : random_configs(shape, 64, 1)) recs.push_back(record_from(c, wa, wm, wl));
  const auto pm = fit_perf_models(recs);
  EXPECT_FALSE(pm.ridge_fallback);
  for (std::size_t i = 0; i < wa.size(); ++i) {
    EXPECT_NEAR(pm.accuracy[i], wa[i], 1e-6);
    EXPECT_NEAR(pm.memory[i], wm[i], 1e-6);
    EXPECT_NEAR(pm.latency[i], wl[i], 1e-6);
  }
  EXPECT_LT(rss(recs, pm.accuracy), 1e-18);
}

TEST(Fit, UniformDuplicationLeavesPredictionsUnchanged) {
  testing::Rng rng(2);
  ModelShape shape;
  shape.experts_per_layer = {4, 5};
  std::vector<ProfileRecord> recs;
  std::normal_distribution<double> noise(0.0, 0.1);
  for (const auto& c : random_configs(shape, 30, 3)) {
    recs.push_back({c, noise(rng), 0.0, 1000 + noise(rng), 5 + noise(rng)});
  }
  auto doubled = recs;
  doubled.insert(doubled.end(), recs.begin(), recs.end());
  const auto a = fit_perf_models(recs);
  const auto b = fit_perf_models(doubled);
  for (const auto& c : random_configs(shape, 10, 4)) {
    const auto pa = predict_metrics(a, c);
    const auto pb = predict_metrics(b, c);
    EXPECT_NEAR(pa.accuracy, pb.accuracy, 1e-9);
    EXPECT_NEAR(pa.memory, pb.memory, 1e-7);
    EXPECT_NEAR(pa.latency, pb.latency, 1e-9);
  }
}

TEST(Fit, OlsBeatsPerturbedWeights) {
  testing::Rng rng(5);
  ModelShape shape;
  shape.experts_per_layer = {4, 4};
  std::vector<ProfileRecord> recs;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (const auto& c : random_configs(shape, 40, 6)) recs.push_back({c, u(rng), 0.0, u(rng), u(rng)});
  const auto pm = fit_perf_models(recs);
  const double best = rss(recs, pm.accuracy);
  for (int t = 0; t < 50; ++t) {
    Vector w = pm.accuracy;
    w[static_cast<std::size_t>(t) % w.size()] += (t % 2 ? 1e-3 : -1e-3) * (1 + t / 10);
    EXPECT_GE(rss(recs, w), best);
  }
}

TEST(Fit, SingularDesignUsesRidge) {
  // every config has the same interval, so the 1/interval column duplicates the bias
  ModelShape shape;
  shape.experts_per_layer = {4};
  shape.interval_domain = {1};
  std::vector<ProfileRecord> recs;
  for (const auto& c : random_configs(shape, 20, 7)) recs.push_back({c, 0.5, 0.0, 10.0, 1.0});
  const auto pm = fit_perf_models(recs);
  EXPECT_TRUE(pm.ridge_fallback);
  EXPECT_NEAR(predict_metrics(pm, recs[0].config).memory, 10.0, 1e-6);
}

TEST(Fit, NeedsTwoRecords) {
  const std::vector<ProfileRecord> one{{PCConfig{1, {1}, {Strategy::Skip}}, 1, 0, 1, 1}};
  EXPECT_THROW(fit_perf_models(one), std::invalid_argument);
}

TEST(Predict, Examples) {
  const PCConfig c{2, {3, 1}, {Strategy::Exchange, Strategy::Skip}};
  PerfModel zero{Vector(6, 0.0), Vector(6, 0.0), Vector(6, 0.0), 6, false};
  const auto z = predict_metrics(zero, c);
  EXPECT_EQ(z.accuracy, 0.0);
  EXPECT_EQ(z.memory, 0.0);
  EXPECT_EQ(z.latency, 0.0);
  PerfModel bias{{0.7, 0, 0, 0, 0, 0}, {99, 0, 0, 0, 0, 0}, {4, 0, 0, 0, 0, 0}, 6, false};
  const auto b = predict_metrics(bias, c);
  EXPECT_EQ(b.accuracy, 0.7);
  EXPECT_EQ(b.memory, 99.0);
  EXPECT_EQ(b.latency, 4.0);
  PerfModel w{{1, 2, 3, 4, 5, 6}, {0, 1, 1, 0, 0, 0}, {1, 0, 0, 0, 0, 8}, 6, false};
  const auto p = predict_metrics(w, c);
  EXPECT_DOUBLE_EQ(p.accuracy, 1 + 2 * 3 + 3 * 1 + 4 * 1 + 5 * 0 + 6 * 0.5);
  EXPECT_DOUBLE_EQ(p.memory, 4.0);
  EXPECT_DOUBLE_EQ(p.latency, 5.0);
  EXPECT_THROW(predict_metrics(w, PCConfig{1, {1}, {Strategy::Skip}}), std::invalid_argument);
}

PerfModel monotone_model() {
  // accuracy and memory grow with committee size, latency falls with interval
  return {{0.1, 0.1, 0.1, 0.01, 0.01, -0.05}, {100, 50, 50, 0, 0, 0}, {1, 0.1, 0.1, 0, 0, 2}, 6, false};
}

GaParams quick_ga(std::uint64_t seed, std::size_t generations = 200) {
  GaParams ga;
  ga.generations = generations;
  ga.seed = seed;
  return ga;
}

TEST(GeneticSearch, InfeasibleEverywhereReturnsNone) {
  const auto r = genetic_search(monotone_model(), {199.0, 100.0, 0.0}, tiny_shape(), quick_ga(1));
  EXPECT_FALSE(r.config.has_value());
  EXPECT_EQ(r.generations_run, 200u);
}

TEST(GeneticSearch, MonotoneAccuracyPicksFullCommittees) {
  const auto r = genetic_search(monotone_model(), {1e9, 1e9, 0.0}, tiny_shape(), quick_ga(2));
  ASSERT_TRUE(r.config.has_value());
  EXPECT_EQ(r.config->num_experts, (std::vector<std::size_t>{4, 4}));
}

TEST(GeneticSearch, MatchesExhaustiveOracle) {
  const auto shape = tiny_shape();
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    testing::Rng rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    PerfModel pm{{u(rng), u(rng), u(rng), u(rng) - 0.5, u(rng) - 0.5, u(rng)},
                 {100, 40 + 20 * u(rng), 40 + 20 * u(rng), 0, 0, 0},
                 {1, u(rng), u(rng), 0.1, 0.2, 2 * u(rng)},
                 6, false};
    const Constraints c{250.0, 1.0 + 5.0 * u(rng), 0.0};
    const auto oracle = testing::exhaustive_best(pm, c, shape);
    const auto r = genetic_search(pm, c, shape, quick_ga(seed, 300));
    ASSERT_EQ(r.config.has_value(), oracle.config.has_value());
    if (!oracle.config) continue;
    EXPECT_TRUE(feasible(r.predicted, c));
    EXPECT_GE(r.predicted.accuracy, oracle.accuracy - 0.01 * std::abs(oracle.accuracy));
  }
}

TEST(GeneticSearch, DeterministicAndWithinDomain) {
  const auto shape = tiny_shape();
  bool in_domain = true;
  auto ga = quick_ga(9);
  ga.on_generation = [&](std::size_t, std::span<const PCConfig> pop) {
    for (const auto& c : pop) in_domain = in_domain && shape.contains(c);
  };
  const Constraints c{300.0, 3.0, 0.1};
  const auto a = genetic_search(monotone_model(), c, shape, ga);
  const auto b = genetic_search(monotone_model(), c, shape, quick_ga(9));
  EXPECT_TRUE(in_domain);
  ASSERT_TRUE(a.config.has_value());
  EXPECT_EQ(*a.config, *b.config);
  EXPECT_TRUE(feasible(a.predicted, c));
  EXPECT_LE(a.predicted.memory, 270.0);
}

TEST(GeneticSearch, RejectsBadConstraints) {
  EXPECT_THROW(genetic_search(monotone_model(), {0.0, 1.0, 0.0}, tiny_shape(), quick_ga(1)),
               std::invalid_argument);
  EXPECT_THROW(genetic_search(monotone_model(), {1.0, 1.0, 1.0}, tiny_shape(), quick_ga(1)),
               std::invalid_argument);
}

class Profile : public ::testing::Test {
 protected:
  static std::shared_ptr<const MoEModelSpec> model() {
    ModelGenParams p;
    p.d = 6;
    p.h = 8;
    p.layers = 2;
    p.experts = 4;
    p.k = 2;
    p.num_classes = 4;
    p.seed = 3;
    return std::make_shared<const MoEModelSpec>(gen_model(p));
  }
  static Trace trace(const MoEModelSpec& m) {
    TraceSpec s;
    s.num_samples = 40;
    s.tokens_per_sample = 3;
    s.num_clusters = 2;
    s.drift_period = 8;
    s.seed = 4;
    return gen_trace(s, &m);
  }
  CostModelParams cost{1000.0, 2000.0, 1.0, SwapMode::Async};
};

TEST_F(Profile, FullCommitteesAreExactAndDeterministic) {
  const auto m = model();
  const auto t = trace(*m);
  const std::vector<PCConfig> configs{
      {4, {4, 4}, {Strategy::Skip, Strategy::Exchange}},
      {1, {4, 4}, {Strategy::Exchange, Strategy::Exchange}},
      {2, {2, 3}, {Strategy::Skip, Strategy::Skip}},
      {2, {3, 4}, {Strategy::Skip, Strategy::Skip}},
  };
  const auto a = run_profile(m, t, configs, cost, 2);
  const auto b = run_profile(m, t, configs, cost, 1);
  for (std::size_t i = 0; i < configs.size(); ++i) {
    EXPECT_EQ(a[i].accuracy, b[i].accuracy);
    EXPECT_EQ(a[i].mean_latency, b[i].mean_latency);
    EXPECT_EQ(a[i].peak_memory, b[i].peak_memory);
  }
  EXPECT_EQ(a[0].accuracy, 1.0);
  EXPECT_EQ(a[1].accuracy, 1.0);
  EXPECT_GE(a[3].peak_memory, a[2].peak_memory);
  Trace empty;
  EXPECT_THROW(run_profile(m, empty, configs, cost), std::invalid_argument);
}

TEST_F(Profile, TraceCoversLargestInterval) {
  const auto m = model();
  const auto t = trace(*m);
  ModelShape shape = ModelShape::of(*m);
  const auto p = make_profiling_trace(t, shape);
  EXPECT_GE(p.samples.size(), 32u * 20u);
  EXPECT_EQ(p.samples[4].tokens, t.samples[0].tokens);
}

TEST_F(Profile, MemoryModelIsExact) {
  const auto m = model();
  const auto t = profiling_trace(trace(*m), 0.25, 10);
  const ModelShape shape = ModelShape::of(*m);
  const auto train = run_profile(m, t, random_configs(shape, 24, 5), cost);
  const auto pm = fit_perf_models(train);
  std::vector<double> actual, predicted;
  for (const auto& r : run_profile(m, t, random_configs(shape, 16, 6), cost)) {
    actual.push_back(r.peak_memory);
    predicted.push_back(predict_metrics(pm, r.config).memory);
  }
  EXPECT_GE(r_squared(actual, predicted), 0.999);
}

TEST(RSquared, Basics) {
  EXPECT_EQ(r_squared(std::vector<double>{1, 2, 3}, std::vector<double>{1, 2, 3}), 1.0);
  EXPECT_EQ(r_squared(std::vector<double>{1, 2, 3}, std::vector<double>{2, 2, 2}), 0.0);
  EXPECT_THROW(r_squared(std::vector<double>{1}, std::vector<double>{}), std::invalid_argument);
}

}  // namespace
}  // namespace pcmoe
