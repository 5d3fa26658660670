// Trace replay under a serving policy: the full reference model, the
// committee runtime, or one of the fixed-subset / on-demand baselines.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "pcmoe/committee.hpp"
#include "pcmoe/moe.hpp"
#include "pcmoe/swap.hpp"
#include "pcmoe/workload.hpp"

namespace pcmoe {

struct ServePolicy {
  enum class Kind { Reference, PC, RandomKeep, MagnitudeKeep, OnDemand };

  Kind kind = Kind::Reference;
  PCConfig config;     // PC only
  double ratio = 1.0;  // keep / on-demand baselines
  std::uint64_t seed = 0;

  static ServePolicy reference();
  static ServePolicy pc(PCConfig config);
  static ServePolicy random_keep(double ratio, std::uint64_t seed);
  static ServePolicy magnitude_keep(double ratio);
  static ServePolicy on_demand(double ratio);

  /// "reference", "pc", "random-keep", "magnitude-keep" or "on-demand".
  std::string_view name() const noexcept;
};

/// Experts kept per layer for a ratio: ceil(ratio * n) clamped to [1, n].
std::size_t keep_count(double ratio, std::size_t n);

/// Uniform-ratio committee configuration, used for ratio sweeps.
PCConfig uniform_config(const MoEModelSpec& model, double ratio, std::size_t interval,
                        Strategy strategy);

struct ServeOptions {
  ExecutionMode exec = ExecutionMode::Virtual;
  /// Keep per-sample logits in the report.
  bool keep_logits = false;
};

struct ServeReport {
  std::string policy;
  double expert_ratio = 1.0;
  double accuracy = 0.0;
  double fidelity = 0.0;  // mean relative L2 distance to reference logits
  RunMetrics metrics;
  std::vector<std::vector<std::size_t>> final_resident;
  std::vector<Vector> logits;
};

ServeReport serve_trace(std::shared_ptr<const MoEModelSpec> model, const Trace& trace,
                        const ServePolicy& policy, const CostModelParams& cost,
                        const ServeOptions& options = {});

ServeReport serve_trace(const MoEModelSpec& model, const Trace& trace, const ServePolicy& policy,
                        const CostModelParams& cost, const ServeOptions& options = {});

struct TradeoffRow {
  std::string policy;
  double expert_ratio = 0.0;
  double accuracy = 0.0;
  double fidelity = 0.0;
  double peak_memory = 0.0;
  double mean_latency = 0.0;
  double mean_io = 0.0;

  friend bool operator==(const TradeoffRow&, const TradeoffRow&) = default;
};

/// One row per report, sorted by (policy, expert_ratio). Throws on empty input.
std::vector<TradeoffRow> tradeoff_rows(const std::vector<ServeReport>& reports);

std::string tradeoff_csv(const std::vector<TradeoffRow>& rows);
std::vector<TradeoffRow> parse_tradeoff_csv(std::string_view csv);

/// Writes the tradeoff table as CSV; throws std::runtime_error on IO failure.
std::vector<TradeoffRow> report(const std::vector<ServeReport>& reports,
                                const std::filesystem::path& out_path);

/// sample_id,compute_ms,stall_ms,io_bytes,resident_bytes
std::string metrics_csv(const RunMetrics& metrics);

}  // namespace pcmoe
