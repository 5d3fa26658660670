// Synthetic models and traces with controllable temporal locality.

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "pcmoe/moe.hpp"

namespace pcmoe {

struct ModelGenParams {
  std::size_t d = 16;
  std::size_t h = 32;
  std::size_t layers = 2;
  std::size_t experts = 8;
  std::size_t k = 2;
  std::size_t num_classes = 8;
  std::uint64_t seed = 0;
  /// Length of each gate row; larger values sharpen routing.
  double gate_scale = 6.0;
};

/// Gate rows are unit anchor directions times gate_scale (orthonormal when
/// experts <= d), so a token along anchor i routes first to expert i. Expert
/// weights are N(0, 1/d).
MoEModelSpec gen_model(const ModelGenParams& p);

/// Unit anchor direction of every expert in a layer (normalized gate rows).
std::vector<Vector> expert_anchors(const MoELayerSpec& layer);

enum class TraceOrder { Sequential, Speedup, Shuffled };

struct TraceSpec {
  std::size_t num_samples = 64;
  std::size_t tokens_per_sample = 8;
  std::size_t num_clusters = 4;
  std::size_t drift_period = 16;
  double noise_sigma = 0.05;
  TraceOrder order = TraceOrder::Sequential;
  std::size_t speedup_factor = 1;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Trace {
  TraceSpec spec;
  std::vector<Sample> samples;
  bool labeled = false;
};

/// Each cluster owns a subset of first-layer experts; its tokens sit on
/// those experts' anchors plus Gaussian noise. Without a model the anchors
/// are random unit vectors of dimension `d`. Labels are the reference
/// model's argmax class when a model is given.
Trace gen_trace(const TraceSpec& spec, const MoEModelSpec* model, std::size_t d = 0);

/// Cluster id of every sample position under the trace's ordering rule,
/// before any shuffling.
std::vector<std::size_t> cluster_schedule(const TraceSpec& spec);

/// Mean Jaccard similarity of consecutive samples' activated expert sets,
/// averaged over layers.
double locality_index(const Trace& trace, const MoEModelSpec& model);

/// Activated (unmasked top-k) expert set per layer for one sample.
std::vector<std::vector<std::size_t>> activated_experts(const MoEModelSpec& model,
                                                        const Sample& sample);

/// First `fraction` of the trace tiled end-to-start until it has at least
/// min_samples samples.
Trace profiling_trace(const Trace& trace, double fraction, std::size_t min_samples);

}  // namespace pcmoe
