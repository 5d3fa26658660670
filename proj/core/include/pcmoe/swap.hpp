// Two-tier expert storage and amortized swapping.
//
// The warehouse holds every expert. The resident store holds one slot per
// committee seat; a slot always points at a complete parameter set. Loads are
// staged into private buffers and only become visible through
// commit_completed(), which swaps the slot pointer under the store mutex.
//
// Time is virtual: IO and compute durations come from CostModelParams so
// latency accounting is deterministic. ExecutionMode::Threaded additionally
// performs the copies on a loader thread.

#pragma once

#include <atomic>
#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <span>
#include <string_view>
#include <thread>
#include <vector>

#include "pcmoe/committee.hpp"
#include "pcmoe/moe.hpp"

namespace pcmoe {

enum class SwapMode { Sync, Async };

std::string_view to_string(SwapMode m) noexcept;
SwapMode parse_swap_mode(std::string_view s);

struct CostModelParams {
  double compute_throughput = 1.0;  // flops per virtual ms
  double io_bandwidth = 1.0;        // bytes per virtual ms
  double base_latency = 0.0;        // virtual ms per sample
  SwapMode mode = SwapMode::Async;

  void validate() const;
};

inline constexpr std::uint64_t kBytesPerParam = sizeof(double);

class ParameterWarehouse {
 public:
  explicit ParameterWarehouse(std::shared_ptr<const MoEModelSpec> model);

  const MoEModelSpec& model() const noexcept { return *model_; }
  std::size_t num_layers() const noexcept { return flat_.size(); }
  std::size_t num_experts(std::size_t layer) const { return flat_.at(layer).size(); }

  const ExpertParams& expert(std::size_t layer, std::size_t i) const;
  /// Flattened parameters, the unit of transfer.
  std::span<const double> flat(std::size_t layer, std::size_t i) const;
  std::uint64_t expert_bytes(std::size_t layer, std::size_t i) const;
  /// Bytes that are always resident: gates and the classifier head.
  std::uint64_t overhead_bytes() const noexcept { return overhead_bytes_; }

 private:
  std::shared_ptr<const MoEModelSpec> model_;
  std::vector<std::vector<std::vector<double>>> flat_;
  std::uint64_t overhead_bytes_ = 0;
};

struct SwapPlan {
  struct Eviction {
    std::size_t incoming = 0;
    std::size_t outgoing = 0;
  };

  std::vector<std::vector<std::size_t>> subsets;
  std::size_t cursor = 0;
  std::vector<Eviction> evictions;

  bool finished() const noexcept { return cursor >= subsets.size(); }
  std::size_t total_loads() const noexcept;
  /// Resident expert replaced by `incoming`. Throws if not part of the plan.
  std::size_t outgoing_for(std::size_t incoming) const;
};

/// Splits target \ resident (kept in the given importance order) into
/// `interval` near-equal subsets, larger ones first. Each incoming expert
/// evicts the next lowest-scored member of resident \ target; `scores` may be
/// empty, in which case evictions go by ascending index.
SwapPlan plan_swap(std::span<const std::size_t> resident, std::span<const std::size_t> target,
                   std::span<const double> scores, std::size_t interval);

/// Staging buffer for one expert transfer.
struct LoadJob {
  std::size_t layer = 0;
  std::size_t expert = 0;
  std::size_t outgoing = 0;
  std::span<const double> source;
  std::vector<double> staged;
  std::size_t copied = 0;
  std::atomic<bool> done{false};

  /// Copies up to max_values more values; returns how many were copied.
  std::size_t fill(std::size_t max_values);
};

class ResidentStore {
 public:
  struct Slot {
    std::size_t expert = 0;
    std::shared_ptr<const ExpertParams> params;
    std::uint64_t version = 0;
  };

  /// Snapshot of one layer. Holding it keeps the viewed parameters alive
  /// even if a commit replaces them.
  struct LayerView {
    std::vector<std::shared_ptr<const ExpertParams>> hold;
    ExpertTable table;
    std::vector<std::size_t> slot_experts;
  };

  ResidentStore(std::shared_ptr<const ParameterWarehouse> warehouse, const CommitteeState& initial);

  const ParameterWarehouse& warehouse() const noexcept { return *warehouse_; }
  std::size_t num_layers() const noexcept { return slots_.size(); }

  LayerView view(std::size_t layer) const;
  std::vector<Slot> slots(std::size_t layer) const;
  std::uint64_t resident_bytes() const;

  /// Queues transfers for the plan's cursor subset and advances the cursor.
  /// Returns the queued jobs; nothing is visible until commit_completed().
  std::vector<std::shared_ptr<LoadJob>> begin_subset(std::size_t layer, SwapPlan& plan);
  /// Drops every queued transfer of a layer, finished or not.
  void cancel_layer(std::size_t layer);
  /// Advances queued transfers in FIFO order by up to max_values values.
  std::size_t progress(std::size_t max_values);
  void drain();
  std::size_t in_flight() const;

  /// Installs every finished transfer into the slot of the expert it evicts
  /// and mirrors the change into `state`. Returns the number installed.
  std::size_t commit_completed(CommitteeState& state);

 private:
  std::shared_ptr<const ParameterWarehouse> warehouse_;
  mutable std::mutex mutex_;
  std::vector<std::vector<Slot>> slots_;
  std::deque<std::shared_ptr<LoadJob>> jobs_;
};

struct SampleMetrics {
  std::uint64_t sample_id = 0;
  double compute_ms = 0.0;
  double stall_ms = 0.0;
  double latency_ms = 0.0;
  std::uint64_t io_bytes = 0;
  std::uint64_t resident_bytes = 0;
  std::size_t loaded_experts = 0;
};

/// Virtual clock for one IO channel. In Async mode transfer time overlaps
/// compute across samples and is only charged as stall when an update
/// boundary arrives before the backlog clears.
class IoTimeline {
 public:
  explicit IoTimeline(CostModelParams cost);

  SampleMetrics charge(std::uint64_t io_bytes, std::uint64_t compute_ops,
                       bool update_boundary_next);
  double backlog_ms() const noexcept { return backlog_ms_; }
  const CostModelParams& cost() const noexcept { return cost_; }

 private:
  CostModelParams cost_;
  double backlog_ms_ = 0.0;
};

/// Single-layer step: stages and completes the cursor subset, then charges it.
SampleMetrics advance(ResidentStore& store, std::size_t layer, SwapPlan& plan,
                      IoTimeline& timeline, std::uint64_t compute_ops,
                      bool update_boundary_next = true);

struct RunMetrics {
  std::vector<SampleMetrics> samples;
  std::uint64_t peak_resident_bytes = 0;
  double mean_latency_ms = 0.0;
  double mean_compute_ms = 0.0;
  double mean_io_bytes = 0.0;
  double mean_io_rate = 0.0;  // bytes per virtual ms
  double peak_io_rate = 0.0;
  double total_compute_ms = 0.0;
  double total_stall_ms = 0.0;
  std::uint64_t total_io_bytes = 0;
};

RunMetrics summarize(std::vector<SampleMetrics> samples);

enum class ExecutionMode { Virtual, Threaded };

/// Copies staged loads on a background thread.
class AsyncLoader {
 public:
  AsyncLoader();
  ~AsyncLoader();
  AsyncLoader(const AsyncLoader&) = delete;
  AsyncLoader& operator=(const AsyncLoader&) = delete;

  void enqueue(std::shared_ptr<LoadJob> job);
  void wait_idle();

 private:
  void run(std::stop_token stop);

  std::mutex mutex_;
  std::condition_variable_any cv_;
  std::condition_variable idle_cv_;
  std::deque<std::shared_ptr<LoadJob>> queue_;
  bool busy_ = false;
  std::jthread worker_;
};

/// Multi-layer swap orchestration for a running committee.
class SwapEngine {
 public:
  SwapEngine(std::shared_ptr<const ParameterWarehouse> warehouse, const CommitteeState& initial,
             CostModelParams cost, ExecutionMode exec = ExecutionMode::Virtual);

  /// Replaces the layer's plan with one for `request` (importance order).
  /// Unloaded subsets of the previous plan are discarded.
  void submit(std::size_t layer, const LayerCommittee& committee,
              std::span<const std::size_t> request, std::span<const double> scores,
              std::size_t interval);

  /// Loads each layer's next subset during one sample and charges the time.
  SampleMetrics advance(std::uint64_t sample_id, std::uint64_t compute_ops,
                        bool update_boundary_next);

  /// Installs finished loads. In threaded mode waits for this sample's
  /// transfers first so the commit schedule matches virtual mode.
  std::size_t commit(CommitteeState& state);

  const ResidentStore& store() const noexcept { return store_; }
  ResidentStore& store() noexcept { return store_; }
  const SwapPlan& plan(std::size_t layer) const { return plans_.at(layer); }

 private:
  ResidentStore store_;
  std::vector<SwapPlan> plans_;
  IoTimeline timeline_;
  ExecutionMode exec_;
  std::unique_ptr<AsyncLoader> loader_;
};

}  // namespace pcmoe
