#include "pcmoe/moe.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace pcmoe {

std::vector<double> ExpertParams::flatten() const {
  std::vector<double> flat;
  flat.reserve(parameter_count());
  flat.insert(flat.end(), w1.data().begin(), w1.data().end());
  flat.insert(flat.end(), b1.begin(), b1.end());
  flat.insert(flat.end(), w2.data().begin(), w2.data().end());
  flat.insert(flat.end(), b2.begin(), b2.end());
  return flat;
}

ExpertParams ExpertParams::unflatten(std::span<const double> flat, std::size_t d, std::size_t h) {
  if (flat.size() != 2 * h * d + h + d) {
    throw std::invalid_argument("unflatten: expected " + std::to_string(2 * h * d + h + d) +
                                " parameters, got " + std::to_string(flat.size()));
  }
  ExpertParams e;
  auto it = flat.begin();
  auto take = [&it](std::size_t n) {
    std::vector<double> out(it, it + static_cast<std::ptrdiff_t>(n));
    it += static_cast<std::ptrdiff_t>(n);
    return out;
  };
  e.w1 = Matrix(h, d, take(h * d));
  e.b1 = take(h);
  e.w2 = Matrix(d, h, take(d * h));
  e.b2 = take(d);
  e.refresh_magnitude();
  return e;
}

void ExpertParams::refresh_magnitude() { cached_magnitude = magnitude(flatten()); }

std::vector<std::size_t> MoEModelSpec::experts_per_layer() const {
  std::vector<std::size_t> n;
  n.reserve(layers.size());
  for (const auto& l : layers) n.push_back(l.num_experts());
  return n;
}

void MoEModelSpec::validate() const {
  if (d == 0 || h == 0) throw std::invalid_argument("model: d and h must be positive");
  if (layers.empty()) throw std::invalid_argument("model: needs at least one layer");
  if (num_classes == 0) throw std::invalid_argument("model: num_classes must be positive");
  if (head.rows() != num_classes || head.cols() != d) {
    throw std::invalid_argument("model: head shape " + head.shape_string() + " expected (" +
                                std::to_string(num_classes) + "x" + std::to_string(d) + ")");
  }
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& layer = layers[l];
    const std::string where = "layer " + std::to_string(l) + ": ";
    const std::size_t n = layer.num_experts();
    if (n == 0) throw std::invalid_argument(where + "no experts");
    if (layer.k < 1 || layer.k > n) throw std::invalid_argument(where + "k out of range");
    if (layer.gate.wg.rows() != n || layer.gate.wg.cols() != d) {
      throw std::invalid_argument(where + "gate shape " + layer.gate.wg.shape_string());
    }
    for (std::size_t i = 0; i < n; ++i) {
      const auto& e = layer.experts[i];
      if (e.w1.rows() != h || e.w1.cols() != d || e.b1.size() != h || e.w2.rows() != d ||
          e.w2.cols() != h || e.b2.size() != d) {
        throw std::invalid_argument(where + "expert " + std::to_string(i) +
                                    " has inconsistent shapes");
      }
    }
  }
}

Vector expert_forward(const ExpertParams& e, std::span<const double> x) {
  Vector hidden = matvec(e.w1, x);
  for (std::size_t i = 0; i < hidden.size(); ++i) hidden[i] = std::max(0.0, hidden[i] + e.b1[i]);
  Vector out = matvec(e.w2, hidden);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += e.b2[i];
  return out;
}

Vector gate_forward(const GateParams& g, std::span<const double> x) {
  return softmax(matvec(g.wg, x));
}

Routing route_topk(std::span<const double> gate_out, std::size_t k) {
  Routing r;
  for (std::size_t i : top_k_indices(gate_out, k)) r.push_back({i, gate_out[i]});
  return r;
}

void axpy(double w, std::span<const double> v, Vector& acc) {
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += w * v[i];
}

namespace {

Vector layer_token_reference(const MoELayerSpec& layer, const Vector& x, Routing* record) {
  const Vector g = gate_forward(layer.gate, x);
  Routing sel = route_topk(g, layer.k);
  Vector y(x.size(), 0.0);
  for (const auto& [i, w] : sel) axpy(w, expert_forward(layer.experts[i], x), y);
  if (record) *record = std::move(sel);
  return y;
}

}  // namespace

std::vector<Vector> layer_forward_reference(const MoELayerSpec& layer,
                                            const std::vector<Vector>& tokens) {
  std::vector<Vector> out;
  out.reserve(tokens.size());
  for (const auto& x : tokens) out.push_back(layer_token_reference(layer, x, nullptr));
  return out;
}

Vector classify(const Matrix& head, const std::vector<Vector>& tokens) {
  if (tokens.empty()) throw std::invalid_argument("classify: empty token list");
  Vector mean(tokens.front().size(), 0.0);
  for (const auto& t : tokens) axpy(1.0, t, mean);
  for (double& v : mean) v /= static_cast<double>(tokens.size());
  return matvec(head, mean);
}

ForwardResult model_forward_reference(const MoEModelSpec& model, const Sample& sample) {
  if (sample.tokens.empty()) throw std::invalid_argument("sample has no tokens");
  ForwardResult result;
  result.routing.resize(model.layers.size());
  std::vector<Vector> tokens = sample.tokens;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    auto& rec = result.routing[l];
    rec.resize(tokens.size());
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      tokens[t] = layer_token_reference(model.layers[l], tokens[t], &rec[t]);
    }
  }
  result.logits = classify(model.head, tokens);
  return result;
}

std::vector<std::vector<double>> expert_magnitudes(const MoEModelSpec& model) {
  std::vector<std::vector<double>> out;
  out.reserve(model.layers.size());
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    auto& mags = out.emplace_back();
    for (std::size_t i = 0; i < model.layers[l].experts.size(); ++i) {
      const auto& e = model.layers[l].experts[i];
      const double fresh = magnitude(e.flatten());
      if (std::abs(fresh - e.cached_magnitude) > 1e-9) {
        throw std::runtime_error("corrupt model: cached magnitude of layer " + std::to_string(l) +
                                 " expert " + std::to_string(i) + " is " +
                                 std::to_string(e.cached_magnitude) + ", recomputed " +
                                 std::to_string(fresh));
      }
      mags.push_back(e.cached_magnitude);
    }
  }
  return out;
}

std::uint64_t expert_flops(std::size_t d, std::size_t h) {
  // two matvecs plus bias adds and relu
  return 4ULL * d * h + 2ULL * h + d;
}

std::uint64_t gate_flops(std::size_t d, std::size_t n) { return 2ULL * d * n + 3ULL * n; }

}  // namespace pcmoe
