#include "pcmoe/planner.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <random>
#include <stdexcept>
#include <thread>

namespace pcmoe {

void Constraints::validate() const {
  if (!(limit_memory > 0.0) || !(limit_latency > 0.0)) {
    throw std::invalid_argument("constraints: limits must be positive");
  }
  if (!(margin >= 0.0 && margin < 1.0)) {
    throw std::invalid_argument("constraints: margin must be in [0, 1)");
  }
}

ModelShape ModelShape::of(const MoEModelSpec& model) {
  ModelShape s;
  s.experts_per_layer = model.experts_per_layer();
  return s;
}

void ModelShape::validate() const {
  if (experts_per_layer.empty()) throw std::invalid_argument("model shape: no layers");
  if (interval_domain.empty()) throw std::invalid_argument("model shape: empty interval domain");
  for (std::size_t n : experts_per_layer) {
    if (n < 1) throw std::invalid_argument("model shape: layer without experts");
  }
  for (std::size_t i : interval_domain) {
    if (i < 1) throw std::invalid_argument("model shape: interval must be >= 1");
  }
}

bool ModelShape::contains(const PCConfig& c) const {
  if (std::find(interval_domain.begin(), interval_domain.end(), c.interval) ==
      interval_domain.end()) {
    return false;
  }
  if (c.num_experts.size() != num_layers() || c.strategies.size() != num_layers()) return false;
  for (std::size_t l = 0; l < num_layers(); ++l) {
    if (c.num_experts[l] < 1 || c.num_experts[l] > experts_per_layer[l]) return false;
  }
  return true;
}

Vector featurize(const PCConfig& config) {
  Vector f;
  f.reserve(2 * config.num_experts.size() + 2);
  f.push_back(1.0);
  for (std::size_t n : config.num_experts) f.push_back(static_cast<double>(n));
  for (Strategy s : config.strategies) f.push_back(s == Strategy::Exchange ? 1.0 : 0.0);
  f.push_back(1.0 / static_cast<double>(config.interval));
  return f;
}

namespace {

using Rng = std::mt19937_64;

std::size_t uniform_index(Rng& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

PCConfig random_config(const ModelShape& shape, Rng& rng) {
  PCConfig c;
  c.interval = shape.interval_domain[uniform_index(rng, shape.interval_domain.size())];
  for (std::size_t n : shape.experts_per_layer) c.num_experts.push_back(1 + uniform_index(rng, n));
  for (std::size_t l = 0; l < shape.num_layers(); ++l) {
    c.strategies.push_back(uniform_index(rng, 2) == 0 ? Strategy::Skip : Strategy::Exchange);
  }
  return c;
}

}  // namespace

std::vector<PCConfig> random_configs(const ModelShape& shape, std::size_t count,
                                     std::uint64_t seed) {
  shape.validate();
  Rng rng(seed);
  std::vector<PCConfig> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(random_config(shape, rng));
  return out;
}

Trace make_profiling_trace(const Trace& trace, const ModelShape& shape) {
  const std::size_t max_interval =
      *std::max_element(shape.interval_domain.begin(), shape.interval_domain.end());
  return profiling_trace(trace, 0.1, max_interval * 20);
}

std::vector<ProfileRecord> run_profile(std::shared_ptr<const MoEModelSpec> model,
                                       const Trace& trace, const std::vector<PCConfig>& configs,
                                       const CostModelParams& cost, std::size_t threads) {
  if (trace.samples.empty()) throw std::invalid_argument("run_profile: empty trace");
  std::vector<ProfileRecord> records(configs.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < configs.size(); i = next++) {
      const auto rep = serve_trace(model, trace, ServePolicy::pc(configs[i]), cost);
      records[i] = {configs[i], rep.accuracy, rep.fidelity,
                    static_cast<double>(rep.metrics.peak_resident_bytes),
                    rep.metrics.mean_latency_ms};
    }
  };
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, std::max<std::size_t>(configs.size(), 1));
  if (threads <= 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work);
  }
  return records;
}

PerfModel fit_perf_models(std::span<const ProfileRecord> records) {
  if (records.size() < 2) throw std::invalid_argument("fit_perf_models: need at least 2 records");
  const std::size_t p = featurize(records.front().config).size();
  const auto m = static_cast<Eigen::Index>(records.size());
  Eigen::MatrixXd x(m, static_cast<Eigen::Index>(p));
  Eigen::MatrixXd y(m, 3);
  for (Eigen::Index r = 0; r < m; ++r) {
    const auto& rec = records[static_cast<std::size_t>(r)];
    const Vector f = featurize(rec.config);
    if (f.size() != p) throw std::invalid_argument("fit_perf_models: mixed layer counts");
    for (std::size_t c = 0; c < p; ++c) x(r, static_cast<Eigen::Index>(c)) = f[c];
    y(r, 0) = rec.accuracy;
    y(r, 1) = rec.peak_memory;
    y(r, 2) = rec.mean_latency;
  }

  PerfModel pm;
  pm.feature_dim = p;
  Eigen::MatrixXd w;
  const auto qr = x.colPivHouseholderQr();
  if (qr.rank() == static_cast<Eigen::Index>(p)) {
    w = qr.solve(y);
  } else {
    pm.ridge_fallback = true;
    Eigen::MatrixXd gram = x.transpose() * x;
    gram.diagonal().array() += 1e-8;
    w = gram.ldlt().solve(x.transpose() * y);
  }
  auto column = [&](Eigen::Index j) {
    Vector v(p);
    for (std::size_t c = 0; c < p; ++c) v[c] = w(static_cast<Eigen::Index>(c), j);
    return v;
  };
  pm.accuracy = column(0);
  pm.memory = column(1);
  pm.latency = column(2);
  return pm;
}

PredictedMetrics predict_metrics(const PerfModel& pm, const PCConfig& config) {
  const Vector f = featurize(config);
  auto dot = [&](const Vector& w) {
    if (w.size() != f.size()) {
      throw std::invalid_argument("predict_metrics: model has " + std::to_string(w.size()) +
                                  " weights, config has " + std::to_string(f.size()) +
                                  " features");
    }
    double s = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i) s += w[i] * f[i];
    return s;
  };
  return {dot(pm.accuracy), dot(pm.memory), dot(pm.latency)};
}

double r_squared(std::span<const double> actual, std::span<const double> predicted) {
  if (actual.size() != predicted.size() || actual.empty()) {
    throw std::invalid_argument("r_squared: size mismatch");
  }
  double mean = 0.0;
  for (double a : actual) mean += a;
  mean /= static_cast<double>(actual.size());
  double ss_res = 0.0;
  double ss_tot = 0.0;
  for (std::size_t i = 0; i < actual.size(); ++i) {
    ss_res += (actual[i] - predicted[i]) * (actual[i] - predicted[i]);
    ss_tot += (actual[i] - mean) * (actual[i] - mean);
  }
  if (ss_tot == 0.0) return ss_res == 0.0 ? 1.0 : 0.0;
  return 1.0 - ss_res / ss_tot;
}

bool feasible(const PredictedMetrics& m, const Constraints& c) {
  const double scale = 1.0 - c.margin;
  return m.memory <= c.limit_memory * scale && m.latency <= c.limit_latency * scale;
}

namespace {

struct Individual {
  PCConfig config;
  PredictedMetrics predicted;
};

void mutate(PCConfig& c, const ModelShape& shape, Rng& rng) {
  const std::size_t layers = shape.num_layers();
  const std::size_t field = uniform_index(rng, 1 + 2 * layers);
  if (field == 0) {
    c.interval = shape.interval_domain[uniform_index(rng, shape.interval_domain.size())];
  } else if (field <= layers) {
    c.num_experts[field - 1] = 1 + uniform_index(rng, shape.experts_per_layer[field - 1]);
  } else {
    auto& s = c.strategies[field - 1 - layers];
    s = s == Strategy::Skip ? Strategy::Exchange : Strategy::Skip;
  }
}

PCConfig crossover(const PCConfig& a, const PCConfig& b, Rng& rng) {
  PCConfig child = a;
  if (uniform_index(rng, 2) == 0) {
    // Field-wise exchange.
    if (uniform_index(rng, 2)) child.interval = b.interval;
    for (std::size_t l = 0; l < child.num_experts.size(); ++l) {
      if (uniform_index(rng, 2)) child.num_experts[l] = b.num_experts[l];
      if (uniform_index(rng, 2)) child.strategies[l] = b.strategies[l];
    }
  } else {
    // Per-layer averaging of committee sizes, rounded half up.
    for (std::size_t l = 0; l < child.num_experts.size(); ++l) {
      child.num_experts[l] = (a.num_experts[l] + b.num_experts[l] + 1) / 2;
    }
  }
  return child;
}

// Total order used for deterministic truncation: accuracy first, then the
// feature vector.
bool better(const Individual& a, const Individual& b) {
  if (a.predicted.accuracy != b.predicted.accuracy) {
    return a.predicted.accuracy > b.predicted.accuracy;
  }
  return featurize(a.config) < featurize(b.config);
}

}  // namespace

SearchResult genetic_search(const PerfModel& pm, const Constraints& constraints,
                            const ModelShape& shape, const GaParams& ga) {
  constraints.validate();
  shape.validate();
  if (ga.population < 1) throw std::invalid_argument("genetic_search: population must be >= 1");
  Rng rng(ga.seed);
  std::bernoulli_distribution do_mutate(ga.mutation_rate);
  std::bernoulli_distribution do_crossover(ga.crossover_rate);

  auto evaluate = [&](PCConfig c) { return Individual{c, predict_metrics(pm, c)}; };

  std::vector<Individual> population;
  for (std::size_t i = 0; i < ga.population; ++i) population.push_back(evaluate(random_config(shape, rng)));

  SearchResult result;
  result.seed = ga.seed;
  auto consider = [&](const Individual& ind) {
    if (!feasible(ind.predicted, constraints)) return;
    if (!result.config || better(ind, Individual{*result.config, result.predicted})) {
      result.config = ind.config;
      result.predicted = ind.predicted;
    }
  };
  for (const auto& ind : population) consider(ind);

  for (std::size_t gen = 0; gen < ga.generations; ++gen) {
    std::vector<Individual> pool = population;
    for (const auto& parent : population) {
      if (do_mutate(rng)) {
        PCConfig child = parent.config;
        mutate(child, shape, rng);
        pool.push_back(evaluate(std::move(child)));
      }
      if (do_crossover(rng)) {
        const auto& mate = population[uniform_index(rng, population.size())];
        pool.push_back(evaluate(crossover(parent.config, mate.config, rng)));
      }
    }

    std::erase_if(pool, [&](const Individual& ind) { return !feasible(ind.predicted, constraints); });
    std::sort(pool.begin(), pool.end(), better);
    pool.erase(std::unique(pool.begin(), pool.end(),
                           [](const Individual& a, const Individual& b) { return a.config == b.config; }),
               pool.end());
    if (pool.size() > ga.population) pool.resize(ga.population);
    if (!pool.empty()) consider(pool.front());
    // Refill with random immigrants; infeasible ones are culled next round.
    while (pool.size() < ga.population) pool.push_back(evaluate(random_config(shape, rng)));
    population = std::move(pool);
    result.generations_run = gen + 1;

    if (ga.on_generation) {
      std::vector<PCConfig> configs;
      configs.reserve(population.size());
      for (const auto& ind : population) configs.push_back(ind.config);
      ga.on_generation(gen, configs);
    }
  }
  return result;
}

}  // namespace pcmoe
