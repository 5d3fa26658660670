// Toy mixture-of-experts model and its dense reference forward pass.
//
// A layer is a softmax gate over n experts; each expert is a two-layer relu
// MLP. The reference path evaluates every selected expert with the full
// (unmasked) gate and never renormalizes the top-k weights.

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pcmoe/numkit.hpp"

namespace pcmoe {

struct ExpertParams {
  Matrix w1;  // h x d
  Vector b1;  // h
  Matrix w2;  // d x h
  Vector b2;  // d
  double cached_magnitude = 0.0;

  std::size_t d() const noexcept { return w1.cols(); }
  std::size_t h() const noexcept { return w1.rows(); }
  std::size_t parameter_count() const noexcept {
    return w1.size() + b1.size() + w2.size() + b2.size();
  }

  /// w1, b1, w2, b2 concatenated in that order.
  std::vector<double> flatten() const;
  /// Inverse of flatten() for the given shape.
  static ExpertParams unflatten(std::span<const double> flat, std::size_t d, std::size_t h);

  void refresh_magnitude();

  friend bool operator==(const ExpertParams&, const ExpertParams&) = default;
};

struct GateParams {
  Matrix wg;  // n x d, no bias
};

struct MoELayerSpec {
  GateParams gate;
  std::vector<ExpertParams> experts;
  std::size_t k = 1;

  std::size_t num_experts() const noexcept { return experts.size(); }
};

struct MoEModelSpec {
  std::size_t d = 0;
  std::size_t h = 0;
  std::size_t num_classes = 0;
  std::vector<MoELayerSpec> layers;
  Matrix head;  // num_classes x d
  std::string model_id;
  std::uint64_t seed = 0;

  std::size_t num_layers() const noexcept { return layers.size(); }
  std::vector<std::size_t> experts_per_layer() const;

  /// Throws std::invalid_argument describing the first broken shape invariant.
  void validate() const;
};

struct Sample {
  std::vector<Vector> tokens;
  std::optional<std::size_t> label;
};

struct Route {
  std::size_t expert = 0;
  double weight = 0.0;

  friend bool operator==(const Route&, const Route&) = default;
};

using Routing = std::vector<Route>;
/// routing[layer][token] -> selected experts
using RoutingRecord = std::vector<std::vector<Routing>>;

struct ForwardResult {
  Vector logits;
  RoutingRecord routing;
};

/// w2 * relu(w1 * x + b1) + b2
Vector expert_forward(const ExpertParams& e, std::span<const double> x);

/// softmax(wg * x)
Vector gate_forward(const GateParams& g, std::span<const double> x);

/// Top-k (index, weight) pairs from a gate output, weights left as-is.
Routing route_topk(std::span<const double> gate_out, std::size_t k);

std::vector<Vector> layer_forward_reference(const MoELayerSpec& layer,
                                            const std::vector<Vector>& tokens);

/// Mean-pools the token sequence and applies the linear head.
Vector classify(const Matrix& head, const std::vector<Vector>& tokens);

ForwardResult model_forward_reference(const MoEModelSpec& model, const Sample& sample);

/// Per-layer expert magnitudes. Recomputes every cache and throws
/// std::runtime_error if a cached value is off by more than 1e-9.
std::vector<std::vector<double>> expert_magnitudes(const MoEModelSpec& model);

/// Sum of two vectors scaled: acc += w * v.
void axpy(double w, std::span<const double> v, Vector& acc);

/// Floating point work of one expert evaluation.
std::uint64_t expert_flops(std::size_t d, std::size_t h);
/// Floating point work of one gate evaluation.
std::uint64_t gate_flops(std::size_t d, std::size_t n);

}  // namespace pcmoe
