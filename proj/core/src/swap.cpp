#include "pcmoe/swap.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace pcmoe {

std::string_view to_string(SwapMode m) noexcept { return m == SwapMode::Sync ? "sync" : "async"; }

SwapMode parse_swap_mode(std::string_view s) {
  if (s == "sync") return SwapMode::Sync;
  if (s == "async") return SwapMode::Async;
  throw std::invalid_argument("unknown swap mode '" + std::string(s) + "'");
}

void CostModelParams::validate() const {
  if (!(compute_throughput > 0.0) || !(io_bandwidth > 0.0) || !(base_latency > 0.0)) {
    throw std::invalid_argument(
        "cost model: compute_throughput, io_bandwidth and base_latency must be positive");
  }
}

// ---------------------------------------------------------------------------

ParameterWarehouse::ParameterWarehouse(std::shared_ptr<const MoEModelSpec> model)
    : model_(std::move(model)) {
  if (!model_) throw std::invalid_argument("warehouse: null model");
  model_->validate();
  flat_.resize(model_->layers.size());
  for (std::size_t l = 0; l < model_->layers.size(); ++l) {
    const auto& layer = model_->layers[l];
    for (const auto& e : layer.experts) flat_[l].push_back(e.flatten());
    overhead_bytes_ += layer.gate.wg.size() * kBytesPerParam;
  }
  overhead_bytes_ += model_->head.size() * kBytesPerParam;
}

const ExpertParams& ParameterWarehouse::expert(std::size_t layer, std::size_t i) const {
  return model_->layers.at(layer).experts.at(i);
}

std::span<const double> ParameterWarehouse::flat(std::size_t layer, std::size_t i) const {
  return flat_.at(layer).at(i);
}

std::uint64_t ParameterWarehouse::expert_bytes(std::size_t layer, std::size_t i) const {
  return flat_.at(layer).at(i).size() * kBytesPerParam;
}

// ---------------------------------------------------------------------------

std::size_t SwapPlan::total_loads() const noexcept {
  std::size_t n = 0;
  for (const auto& s : subsets) n += s.size();
  return n;
}

std::size_t SwapPlan::outgoing_for(std::size_t incoming) const {
  for (const auto& e : evictions) {
    if (e.incoming == incoming) return e.outgoing;
  }
  throw std::out_of_range("expert " + std::to_string(incoming) + " is not part of the swap plan");
}

SwapPlan plan_swap(std::span<const std::size_t> resident, std::span<const std::size_t> target,
                   std::span<const double> scores, std::size_t interval) {
  if (resident.size() != target.size()) {
    throw std::invalid_argument("plan_swap: resident has " + std::to_string(resident.size()) +
                                " experts, target " + std::to_string(target.size()));
  }
  if (interval < 1) throw std::invalid_argument("plan_swap: interval must be >= 1");
  auto in = [](std::span<const std::size_t> set, std::size_t x) {
    return std::find(set.begin(), set.end(), x) != set.end();
  };

  std::vector<std::size_t> pending;
  for (std::size_t t : target) {
    if (!in(resident, t)) pending.push_back(t);
  }
  std::vector<std::size_t> leaving;
  for (std::size_t r : resident) {
    if (!in(target, r)) leaving.push_back(r);
  }
  std::stable_sort(leaving.begin(), leaving.end(), [&](std::size_t a, std::size_t b) {
    const double sa = scores.empty() ? 0.0 : scores[a];
    const double sb = scores.empty() ? 0.0 : scores[b];
    if (sa != sb) return sa < sb;
    return a < b;
  });

  SwapPlan plan;
  if (pending.empty()) return plan;
  for (std::size_t i = 0; i < pending.size(); ++i) plan.evictions.push_back({pending[i], leaving[i]});

  const std::size_t base = pending.size() / interval;
  const std::size_t extra = pending.size() % interval;
  auto it = pending.begin();
  for (std::size_t s = 0; s < interval; ++s) {
    const std::size_t size = base + (s < extra ? 1 : 0);
    plan.subsets.emplace_back(it, it + static_cast<std::ptrdiff_t>(size));
    it += static_cast<std::ptrdiff_t>(size);
  }
  return plan;
}

// ---------------------------------------------------------------------------

std::size_t LoadJob::fill(std::size_t max_values) {
  if (done.load(std::memory_order_acquire)) return 0;
  const std::size_t n = std::min(max_values, source.size() - copied);
  std::copy_n(source.begin() + static_cast<std::ptrdiff_t>(copied), n,
              staged.begin() + static_cast<std::ptrdiff_t>(copied));
  copied += n;
  if (copied == source.size()) done.store(true, std::memory_order_release);
  return n;
}

ResidentStore::ResidentStore(std::shared_ptr<const ParameterWarehouse> warehouse,
                             const CommitteeState& initial)
    : warehouse_(std::move(warehouse)) {
  if (initial.layers.size() != warehouse_->num_layers()) {
    throw std::invalid_argument("resident store: committee has wrong layer count");
  }
  slots_.resize(initial.layers.size());
  for (std::size_t l = 0; l < initial.layers.size(); ++l) {
    for (std::size_t e : initial.layers[l].resident) {
      slots_[l].push_back(
          {e, std::make_shared<const ExpertParams>(warehouse_->expert(l, e)), 0});
    }
  }
}

ResidentStore::LayerView ResidentStore::view(std::size_t layer) const {
  std::lock_guard lock(mutex_);
  const auto& slots = slots_.at(layer);
  LayerView v;
  v.table.assign(warehouse_->num_experts(layer), nullptr);
  for (const auto& s : slots) {
    v.hold.push_back(s.params);
    v.table[s.expert] = s.params.get();
    v.slot_experts.push_back(s.expert);
  }
  return v;
}

std::vector<ResidentStore::Slot> ResidentStore::slots(std::size_t layer) const {
  std::lock_guard lock(mutex_);
  return slots_.at(layer);
}

std::uint64_t ResidentStore::resident_bytes() const {
  std::lock_guard lock(mutex_);
  std::uint64_t bytes = warehouse_->overhead_bytes();
  for (std::size_t l = 0; l < slots_.size(); ++l) {
    for (const auto& s : slots_[l]) bytes += warehouse_->expert_bytes(l, s.expert);
  }
  return bytes;
}

std::vector<std::shared_ptr<LoadJob>> ResidentStore::begin_subset(std::size_t layer,
                                                                  SwapPlan& plan) {
  std::vector<std::shared_ptr<LoadJob>> started;
  if (plan.finished()) return started;
  std::lock_guard lock(mutex_);
  for (std::size_t e : plan.subsets[plan.cursor]) {
    auto job = std::make_shared<LoadJob>();
    job->layer = layer;
    job->expert = e;
    job->outgoing = plan.outgoing_for(e);
    job->source = warehouse_->flat(layer, e);
    job->staged.assign(job->source.size(), 0.0);
    jobs_.push_back(job);
    started.push_back(std::move(job));
  }
  ++plan.cursor;
  return started;
}

void ResidentStore::cancel_layer(std::size_t layer) {
  std::lock_guard lock(mutex_);
  std::erase_if(jobs_, [layer](const auto& j) { return j->layer == layer; });
}

std::size_t ResidentStore::progress(std::size_t max_values) {
  std::lock_guard lock(mutex_);
  std::size_t moved = 0;
  for (auto& job : jobs_) {
    if (moved == max_values) break;
    moved += job->fill(max_values - moved);
  }
  return moved;
}

void ResidentStore::drain() {
  std::lock_guard lock(mutex_);
  for (auto& job : jobs_) job->fill(job->source.size());
}

std::size_t ResidentStore::in_flight() const {
  std::lock_guard lock(mutex_);
  return jobs_.size();
}

std::size_t ResidentStore::commit_completed(CommitteeState& state) {
  std::lock_guard lock(mutex_);
  std::size_t installed = 0;
  std::deque<std::shared_ptr<LoadJob>> remaining;
  for (auto& job : jobs_) {
    if (!job->done.load(std::memory_order_acquire)) {
      remaining.push_back(std::move(job));
      continue;
    }
    auto& slots = slots_.at(job->layer);
    auto slot = std::find_if(slots.begin(), slots.end(),
                             [&](const Slot& s) { return s.expert == job->outgoing; });
    if (slot == slots.end()) {
      throw std::logic_error("commit: evicted expert " + std::to_string(job->outgoing) +
                             " is not resident in layer " + std::to_string(job->layer));
    }
    const auto& shape = warehouse_->expert(job->layer, job->expert);
    slot->params = std::make_shared<const ExpertParams>(
        ExpertParams::unflatten(job->staged, shape.d(), shape.h()));
    slot->expert = job->expert;
    ++slot->version;

    auto& committee = state.layers.at(job->layer);
    std::replace(committee.resident.begin(), committee.resident.end(), job->outgoing, job->expert);
    std::sort(committee.resident.begin(), committee.resident.end());
    std::erase(committee.pending, job->expert);
    ++committee.version;
    ++installed;
  }
  jobs_ = std::move(remaining);
  return installed;
}

// ---------------------------------------------------------------------------

IoTimeline::IoTimeline(CostModelParams cost) : cost_(cost) { cost_.validate(); }

SampleMetrics IoTimeline::charge(std::uint64_t io_bytes, std::uint64_t compute_ops,
                                 bool update_boundary_next) {
  SampleMetrics m;
  m.io_bytes = io_bytes;
  m.compute_ms = static_cast<double>(compute_ops) / cost_.compute_throughput;
  const double io_ms = static_cast<double>(io_bytes) / cost_.io_bandwidth;
  if (cost_.mode == SwapMode::Sync) {
    m.stall_ms = io_ms;
  } else {
    backlog_ms_ = std::max(0.0, backlog_ms_ + io_ms - m.compute_ms);
    if (update_boundary_next) {
      m.stall_ms = backlog_ms_;
      backlog_ms_ = 0.0;
    }
  }
  m.latency_ms = cost_.base_latency + m.compute_ms + m.stall_ms;
  return m;
}

SampleMetrics advance(ResidentStore& store, std::size_t layer, SwapPlan& plan,
                      IoTimeline& timeline, std::uint64_t compute_ops, bool update_boundary_next) {
  std::uint64_t bytes = 0;
  const auto jobs = store.begin_subset(layer, plan);
  for (const auto& job : jobs) {
    job->fill(job->source.size());
    bytes += job->source.size() * kBytesPerParam;
  }
  SampleMetrics m = timeline.charge(bytes, compute_ops, update_boundary_next);
  m.loaded_experts = jobs.size();
  m.resident_bytes = store.resident_bytes();
  return m;
}

RunMetrics summarize(std::vector<SampleMetrics> samples) {
  RunMetrics r;
  r.samples = std::move(samples);
  if (r.samples.empty()) return r;
  double rate_sum = 0.0;
  for (const auto& s : r.samples) {
    r.peak_resident_bytes = std::max(r.peak_resident_bytes, s.resident_bytes);
    r.total_compute_ms += s.compute_ms;
    r.total_stall_ms += s.stall_ms;
    r.total_io_bytes += s.io_bytes;
    r.mean_latency_ms += s.latency_ms;
    const double rate = s.latency_ms > 0.0 ? static_cast<double>(s.io_bytes) / s.latency_ms : 0.0;
    rate_sum += rate;
    r.peak_io_rate = std::max(r.peak_io_rate, rate);
  }
  const auto n = static_cast<double>(r.samples.size());
  r.mean_latency_ms /= n;
  r.mean_compute_ms = r.total_compute_ms / n;
  r.mean_io_bytes = static_cast<double>(r.total_io_bytes) / n;
  r.mean_io_rate = rate_sum / n;
  return r;
}

// ---------------------------------------------------------------------------

AsyncLoader::AsyncLoader() : worker_([this](std::stop_token st) { run(st); }) {}

AsyncLoader::~AsyncLoader() {
  worker_.request_stop();
  cv_.notify_all();
}

void AsyncLoader::enqueue(std::shared_ptr<LoadJob> job) {
  {
    std::lock_guard lock(mutex_);
    queue_.push_back(std::move(job));
  }
  cv_.notify_one();
}

void AsyncLoader::wait_idle() {
  std::unique_lock lock(mutex_);
  idle_cv_.wait(lock, [this] { return queue_.empty() && !busy_; });
}

void AsyncLoader::run(std::stop_token stop) {
  // Small chunks so the copy genuinely interleaves with readers.
  constexpr std::size_t kChunk = 64;
  while (true) {
    std::shared_ptr<LoadJob> job;
    {
      std::unique_lock lock(mutex_);
      if (!cv_.wait(lock, stop, [this] { return !queue_.empty(); })) return;
      job = std::move(queue_.front());
      queue_.pop_front();
      busy_ = true;
    }
    while (job->fill(kChunk) > 0) {
    }
    {
      std::lock_guard lock(mutex_);
      busy_ = false;
    }
    idle_cv_.notify_all();
  }
}

// ---------------------------------------------------------------------------

SwapEngine::SwapEngine(std::shared_ptr<const ParameterWarehouse> warehouse,
                       const CommitteeState& initial, CostModelParams cost, ExecutionMode exec)
    : store_(std::move(warehouse), initial),
      plans_(initial.layers.size()),
      timeline_(cost),
      exec_(exec) {
  if (exec_ == ExecutionMode::Threaded) loader_ = std::make_unique<AsyncLoader>();
}

void SwapEngine::submit(std::size_t layer, const LayerCommittee& committee,
                        std::span<const std::size_t> request, std::span<const double> scores,
                        std::size_t interval) {
  std::vector<std::size_t> target(request.begin(), request.end());
  std::vector<std::size_t> kept;
  for (std::size_t r : committee.resident) {
    if (std::find(request.begin(), request.end(), r) == request.end()) kept.push_back(r);
  }
  // Target = request plus the highest-scored residents that stay.
  std::stable_sort(kept.begin(), kept.end(), [&](std::size_t a, std::size_t b) {
    const double sa = scores.empty() ? 0.0 : scores[a];
    const double sb = scores.empty() ? 0.0 : scores[b];
    if (sa != sb) return sa > sb;
    return a < b;
  });
  kept.resize(committee.resident.size() - std::min(request.size(), committee.resident.size()));
  target.insert(target.end(), kept.begin(), kept.end());

  store_.cancel_layer(layer);
  plans_.at(layer) = plan_swap(committee.resident, target, scores, interval);
}

SampleMetrics SwapEngine::advance(std::uint64_t sample_id, std::uint64_t compute_ops,
                                  bool update_boundary_next) {
  std::uint64_t bytes = 0;
  std::size_t loads = 0;
  for (std::size_t l = 0; l < plans_.size(); ++l) {
    for (auto& job : store_.begin_subset(l, plans_[l])) {
      bytes += job->source.size() * kBytesPerParam;
      ++loads;
      if (loader_) {
        loader_->enqueue(std::move(job));
      } else {
        job->fill(job->source.size());
      }
    }
  }
  SampleMetrics m = timeline_.charge(bytes, compute_ops, update_boundary_next);
  m.sample_id = sample_id;
  m.loaded_experts = loads;
  m.resident_bytes = store_.resident_bytes();
  return m;
}

std::size_t SwapEngine::commit(CommitteeState& state) {
  if (loader_) loader_->wait_idle();
  return store_.commit_completed(state);
}

}  // namespace pcmoe
