// Parameter committee: the per-layer subset of experts kept resident and
// used for inference, plus importance scoring and request handling for
// experts outside the committee.

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "pcmoe/moe.hpp"

namespace pcmoe {

enum class Strategy { Skip, Exchange };

std::string_view to_string(Strategy s) noexcept;
/// Accepts "skip" or "exchange".
Strategy parse_strategy(std::string_view s);

struct PCConfig {
  std::size_t interval = 1;
  std::vector<std::size_t> num_experts;
  std::vector<Strategy> strategies;

  /// Checks list lengths and 1 <= num_experts[l] <= experts_per_layer[l].
  void validate(std::span<const std::size_t> experts_per_layer) const;

  friend bool operator==(const PCConfig&, const PCConfig&) = default;
};

/// Committee of one layer. `resident` is kept sorted ascending; `pending`
/// holds the latest swap request in descending-importance order.
struct LayerCommittee {
  std::vector<std::size_t> resident;
  std::vector<std::size_t> pending;
  std::uint64_t version = 0;

  bool contains(std::size_t expert) const;
};

struct CommitteeState {
  std::vector<LayerCommittee> layers;
  std::uint64_t sample_counter = 0;
};

/// Cold start: each layer keeps its num_experts[l] largest-magnitude experts.
CommitteeState initial_committee(const MoEModelSpec& model, const PCConfig& config);

/// Parameters visible to a layer forward, indexed by expert id. Entries for
/// experts outside the committee are null.
using ExpertTable = std::vector<const ExpertParams*>;

ExpertTable make_expert_table(const MoELayerSpec& layer, std::span<const std::size_t> resident);

struct ImportanceReport {
  Vector scores;
  std::vector<std::size_t> assigned_tokens;
};

/// Importance of every expert for one token sequence: the sum, over tokens
/// whose unmasked top-k includes expert i, of ||x|| * G(x)_i * ||E_i||.
ImportanceReport importance_report(const MoELayerSpec& layer, const std::vector<Vector>& tokens,
                                   std::span<const double> magnitudes, std::size_t k);

Vector importance_scores(const MoELayerSpec& layer, const std::vector<Vector>& tokens,
                         std::span<const double> magnitudes, std::size_t k);

/// Indices of the `count` highest scores, returned sorted ascending.
std::vector<std::size_t> select_committee(std::span<const double> scores, std::size_t count);

/// Masks non-resident logits, renormalizes over the residents and takes the
/// top min(k, |resident|).
Routing masked_selection(std::span<const double> logits, std::span<const std::size_t> resident,
                         std::size_t k);

/// Skip handling: selected non-resident experts contribute G(x)_j * x.
std::vector<Vector> handle_skip(const MoELayerSpec& layer, const std::vector<Vector>& tokens,
                                const ExpertTable& table, std::uint64_t* flops = nullptr);
std::vector<Vector> handle_skip(const MoELayerSpec& layer, const std::vector<Vector>& tokens,
                                std::span<const std::size_t> resident);

/// Exchange handling: routing restricted to the committee.
std::vector<Vector> handle_exchange(const MoELayerSpec& layer, const std::vector<Vector>& tokens,
                                    const ExpertTable& table, std::uint64_t* flops = nullptr);
std::vector<Vector> handle_exchange(const MoELayerSpec& layer, const std::vector<Vector>& tokens,
                                    std::span<const std::size_t> resident);

struct PcLayerResult {
  std::vector<Vector> outputs;
  /// Present only on update samples: experts to load, most important first.
  std::optional<std::vector<std::size_t>> swap_request;
  /// Importance scores backing swap_request (empty otherwise).
  Vector scores;
  std::uint64_t flops = 0;
};

/// One layer of committee-managed inference. Outputs use the resident set
/// captured by `table`; on update samples the layer's pending list is
/// replaced by the new swap request.
PcLayerResult layer_forward_pc(const MoELayerSpec& layer, std::size_t layer_index,
                               const std::vector<Vector>& tokens, CommitteeState& state,
                               const PCConfig& config, std::span<const double> magnitudes,
                               const ExpertTable& table);

/// Convenience overload reading expert parameters straight from the model.
PcLayerResult layer_forward_pc(const MoELayerSpec& layer, std::size_t layer_index,
                               const std::vector<Vector>& tokens, CommitteeState& state,
                               const PCConfig& config, std::span<const double> magnitudes);

}  // namespace pcmoe
