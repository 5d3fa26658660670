#include "pcmoe/committee.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace pcmoe {

std::string_view to_string(Strategy s) noexcept {
  return s == Strategy::Skip ? "skip" : "exchange";
}

Strategy parse_strategy(std::string_view s) {
  if (s == "skip") return Strategy::Skip;
  if (s == "exchange") return Strategy::Exchange;
  throw std::invalid_argument("unknown strategy '" + std::string(s) + "'");
}

void PCConfig::validate(std::span<const std::size_t> experts_per_layer) const {
  const std::size_t layers = experts_per_layer.size();
  if (interval < 1) throw std::invalid_argument("config: interval must be >= 1");
  if (num_experts.size() != layers || strategies.size() != layers) {
    throw std::invalid_argument("config: expected " + std::to_string(layers) +
                                " layers, got num_experts=" + std::to_string(num_experts.size()) +
                                " strategies=" + std::to_string(strategies.size()));
  }
  for (std::size_t l = 0; l < layers; ++l) {
    if (num_experts[l] < 1 || num_experts[l] > experts_per_layer[l]) {
      throw std::invalid_argument("config: num_experts[" + std::to_string(l) + "]=" +
                                  std::to_string(num_experts[l]) + " outside [1, " +
                                  std::to_string(experts_per_layer[l]) + "]");
    }
  }
}

bool LayerCommittee::contains(std::size_t expert) const {
  return std::binary_search(resident.begin(), resident.end(), expert);
}

CommitteeState initial_committee(const MoEModelSpec& model, const PCConfig& config) {
  config.validate(model.experts_per_layer());
  const auto mags = expert_magnitudes(model);
  CommitteeState state;
  state.layers.resize(model.layers.size());
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    state.layers[l].resident = select_committee(mags[l], config.num_experts[l]);
  }
  return state;
}

ExpertTable make_expert_table(const MoELayerSpec& layer, std::span<const std::size_t> resident) {
  ExpertTable table(layer.num_experts(), nullptr);
  for (std::size_t i : resident) {
    if (i >= table.size()) throw std::out_of_range("resident expert index out of range");
    table[i] = &layer.experts[i];
  }
  return table;
}

ImportanceReport importance_report(const MoELayerSpec& layer, const std::vector<Vector>& tokens,
                                   std::span<const double> magnitudes, std::size_t k) {
  const std::size_t n = layer.num_experts();
  if (magnitudes.size() != n) {
    throw std::invalid_argument("importance: expected " + std::to_string(n) + " magnitudes, got " +
                                std::to_string(magnitudes.size()));
  }
  ImportanceReport report{Vector(n, 0.0), std::vector<std::size_t>(n, 0)};
  for (const auto& x : tokens) {
    const double token_norm = magnitude(x);
    for (const auto& [i, w] : route_topk(gate_forward(layer.gate, x), k)) {
      report.scores[i] += token_norm * w * magnitudes[i];
      ++report.assigned_tokens[i];
    }
  }
  return report;
}

Vector importance_scores(const MoELayerSpec& layer, const std::vector<Vector>& tokens,
                         std::span<const double> magnitudes, std::size_t k) {
  return importance_report(layer, tokens, magnitudes, k).scores;
}

std::vector<std::size_t> select_committee(std::span<const double> scores, std::size_t count) {
  auto chosen = top_k_indices(scores, count);
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

Routing masked_selection(std::span<const double> logits, std::span<const std::size_t> resident,
                         std::size_t k) {
  if (resident.empty()) throw std::invalid_argument("masked_selection: empty committee");
  Vector masked(logits.size(), kMaskedLogit);
  for (std::size_t i : resident) masked.at(i) = logits[i];
  const Vector probs = softmax(masked);
  return route_topk(probs, std::min(k, resident.size()));
}

namespace {

std::vector<std::size_t> resident_of(const ExpertTable& table) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < table.size(); ++i) {
    if (table[i]) out.push_back(i);
  }
  return out;
}

void check_table(const MoELayerSpec& layer, const ExpertTable& table) {
  if (table.size() != layer.num_experts()) {
    throw std::invalid_argument("expert table has " + std::to_string(table.size()) +
                                " entries for a layer of " + std::to_string(layer.num_experts()));
  }
}

}  // namespace

std::vector<Vector> handle_skip(const MoELayerSpec& layer, const std::vector<Vector>& tokens,
                                const ExpertTable& table, std::uint64_t* flops) {
  check_table(layer, table);
  const std::size_t d = layer.gate.wg.cols();
  const std::size_t n = layer.num_experts();
  std::uint64_t work = 0;
  std::vector<Vector> out;
  out.reserve(tokens.size());
  for (const auto& x : tokens) {
    const Vector g = gate_forward(layer.gate, x);
    work += gate_flops(d, n);
    Vector y(x.size(), 0.0);
    for (const auto& [i, w] : route_topk(g, layer.k)) {
      if (const ExpertParams* e = table[i]) {
        axpy(w, expert_forward(*e, x), y);
        work += expert_flops(e->d(), e->h());
      } else {
        axpy(w, x, y);
      }
    }
    out.push_back(std::move(y));
  }
  if (flops) *flops += work;
  return out;
}

std::vector<Vector> handle_skip(const MoELayerSpec& layer, const std::vector<Vector>& tokens,
                                std::span<const std::size_t> resident) {
  return handle_skip(layer, tokens, make_expert_table(layer, resident));
}

std::vector<Vector> handle_exchange(const MoELayerSpec& layer, const std::vector<Vector>& tokens,
                                    const ExpertTable& table, std::uint64_t* flops) {
  check_table(layer, table);
  const auto resident = resident_of(table);
  const std::size_t d = layer.gate.wg.cols();
  const std::size_t n = layer.num_experts();
  std::uint64_t work = 0;
  std::vector<Vector> out;
  out.reserve(tokens.size());
  for (const auto& x : tokens) {
    const Vector logits = matvec(layer.gate.wg, x);
    work += gate_flops(d, n);
    Vector y(x.size(), 0.0);
    for (const auto& [i, w] : masked_selection(logits, resident, layer.k)) {
      axpy(w, expert_forward(*table[i], x), y);
      work += expert_flops(table[i]->d(), table[i]->h());
    }
    out.push_back(std::move(y));
  }
  if (flops) *flops += work;
  return out;
}

std::vector<Vector> handle_exchange(const MoELayerSpec& layer, const std::vector<Vector>& tokens,
                                    std::span<const std::size_t> resident) {
  return handle_exchange(layer, tokens, make_expert_table(layer, resident));
}

PcLayerResult layer_forward_pc(const MoELayerSpec& layer, std::size_t layer_index,
                               const std::vector<Vector>& tokens, CommitteeState& state,
                               const PCConfig& config, std::span<const double> magnitudes,
                               const ExpertTable& table) {
  if (layer_index >= state.layers.size() || layer_index >= config.num_experts.size()) {
    throw std::out_of_range("layer_forward_pc: layer index out of range");
  }
  LayerCommittee& committee = state.layers[layer_index];
  if (resident_of(table) != committee.resident) {
    throw std::logic_error("layer_forward_pc: expert table disagrees with committee state");
  }

  PcLayerResult result;
  result.outputs = config.strategies[layer_index] == Strategy::Skip
                       ? handle_skip(layer, tokens, table, &result.flops)
                       : handle_exchange(layer, tokens, table, &result.flops);

  if (state.sample_counter % config.interval == 0) {
    result.scores = importance_scores(layer, tokens, magnitudes, layer.k);
    std::vector<std::size_t> request;
    for (std::size_t i : top_k_indices(result.scores, config.num_experts[layer_index])) {
      if (!committee.contains(i)) request.push_back(i);
    }
    committee.pending = request;
    result.swap_request = std::move(request);
  }
  return result;
}

PcLayerResult layer_forward_pc(const MoELayerSpec& layer, std::size_t layer_index,
                               const std::vector<Vector>& tokens, CommitteeState& state,
                               const PCConfig& config, std::span<const double> magnitudes) {
  return layer_forward_pc(layer, layer_index, tokens, state, config, magnitudes,
                          make_expert_table(layer, state.layers.at(layer_index).resident));
}

}  // namespace pcmoe
