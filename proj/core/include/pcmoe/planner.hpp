// Offline committee planner: profile random configurations, fit linear
// performance models, and search for the most accurate configuration that
// the models predict to fit the memory and latency limits.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "pcmoe/committee.hpp"
#include "pcmoe/serve.hpp"

namespace pcmoe {

struct Constraints {
  double limit_memory = 0.0;   // bytes
  double limit_latency = 0.0;  // virtual ms
  /// Fractional safety margin applied to both limits; 0 disables it.
  double margin = 0.0;

  void validate() const;
};

struct ModelShape {
  std::vector<std::size_t> experts_per_layer;
  std::vector<std::size_t> interval_domain{1, 2, 4, 8, 16, 32};

  static ModelShape of(const MoEModelSpec& model);
  std::size_t num_layers() const noexcept { return experts_per_layer.size(); }
  void validate() const;
  /// Field-domain check used by the search: interval in the domain and every
  /// num_experts within [1, n_l].
  bool contains(const PCConfig& config) const;
};

struct ProfileRecord {
  PCConfig config;
  double accuracy = 0.0;
  double fidelity = 0.0;
  double peak_memory = 0.0;
  double mean_latency = 0.0;
};

struct PredictedMetrics {
  double accuracy = 0.0;
  double memory = 0.0;
  double latency = 0.0;
};

struct PerfModel {
  Vector accuracy;
  Vector memory;
  Vector latency;
  std::size_t feature_dim = 0;
  /// Set when the normal equations were singular and ridge was used.
  bool ridge_fallback = false;
};

/// [1, num_experts..., exchange indicators..., 1/interval]; length 2L + 2.
Vector featurize(const PCConfig& config);

/// Uniform random configurations over the bounded space.
std::vector<PCConfig> random_configs(const ModelShape& shape, std::size_t count,
                                     std::uint64_t seed);

/// First 10% of the trace tiled to at least max(interval_domain) * 20 samples.
Trace make_profiling_trace(const Trace& trace, const ModelShape& shape);

/// Replays the trace under each config. Throws on an empty trace.
std::vector<ProfileRecord> run_profile(std::shared_ptr<const MoEModelSpec> model,
                                       const Trace& trace, const std::vector<PCConfig>& configs,
                                       const CostModelParams& cost, std::size_t threads = 0);

/// Ordinary least squares per metric; ridge (1e-8) when X^T X is singular.
PerfModel fit_perf_models(std::span<const ProfileRecord> records);

PredictedMetrics predict_metrics(const PerfModel& pm, const PCConfig& config);

/// Coefficient of determination of `predicted` against `actual`.
double r_squared(std::span<const double> actual, std::span<const double> predicted);

struct GaParams {
  std::size_t population = 50;
  double mutation_rate = 0.5;
  double crossover_rate = 0.01;
  std::size_t generations = 5000;
  std::uint64_t seed = 0;
  /// Observer called with every generation's surviving population.
  std::function<void(std::size_t generation, std::span<const PCConfig>)> on_generation;
};

struct SearchResult {
  std::optional<PCConfig> config;
  PredictedMetrics predicted;
  std::size_t generations_run = 0;
  std::uint64_t seed = 0;
};

bool feasible(const PredictedMetrics& m, const Constraints& c);

/// Genetic search maximizing predicted accuracy under predicted memory and
/// latency limits. `config` is empty if no feasible individual was seen.
SearchResult genetic_search(const PerfModel& pm, const Constraints& constraints,
                            const ModelShape& shape, const GaParams& ga);

}  // namespace pcmoe
