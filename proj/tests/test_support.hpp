// Random model builders and hand-rolled oracles shared by the test suites.
// Nothing here calls into the code paths it is used to check.

#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <vector>

#include "pcmoe/moe.hpp"

namespace pcmoe::testing {

using Rng = std::mt19937_64;

inline Vector random_vector(Rng& rng, std::size_t n, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  Vector v(n);
  for (double& x : v) x = dist(rng);
  return v;
}

inline Matrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
  return Matrix(rows, cols, random_vector(rng, rows * cols, scale));
}

inline ExpertParams random_expert(Rng& rng, std::size_t d, std::size_t h) {
  ExpertParams e;
  e.w1 = random_matrix(rng, h, d, 0.5);
  e.b1 = random_vector(rng, h, 0.5);
  e.w2 = random_matrix(rng, d, h, 0.5);
  e.b2 = random_vector(rng, d, 0.5);
  e.refresh_magnitude();
  return e;
}

inline MoELayerSpec random_layer(Rng& rng, std::size_t d, std::size_t h, std::size_t n,
                                 std::size_t k) {
  MoELayerSpec layer;
  layer.k = k;
  layer.gate.wg = random_matrix(rng, n, d, 1.0);
  for (std::size_t i = 0; i < n; ++i) layer.experts.push_back(random_expert(rng, d, h));
  return layer;
}

inline MoEModelSpec random_model(Rng& rng, std::size_t layers, std::size_t n, std::size_t d,
                                 std::size_t h, std::size_t classes = 4) {
  std::uniform_int_distribution<std::size_t> pick_k(1, n);
  MoEModelSpec m;
  m.d = d;
  m.h = h;
  m.num_classes = classes;
  m.model_id = "test";
  for (std::size_t l = 0; l < layers; ++l) m.layers.push_back(random_layer(rng, d, h, n, pick_k(rng)));
  m.head = random_matrix(rng, classes, d, 1.0);
  return m;
}

inline std::vector<Vector> random_tokens(Rng& rng, std::size_t count, std::size_t d) {
  std::vector<Vector> t;
  for (std::size_t i = 0; i < count; ++i) t.push_back(random_vector(rng, d));
  return t;
}

/// d = 1 expert computing E(x) = a * x exactly: relu(x) * a + relu(-x) * -a.
inline ExpertParams scalar_expert(double a) {
  ExpertParams e;
  e.w1 = Matrix(2, 1, {1.0, -1.0});
  e.b1 = {0.0, 0.0};
  e.w2 = Matrix(1, 2, {a, -a});
  e.b2 = {0.0};
  e.refresh_magnitude();
  return e;
}

/// d = 1 layer with gate logits w_i * x and scalar experts a_i.
inline MoELayerSpec scalar_layer(const std::vector<double>& gate_w, const std::vector<double>& a,
                                 std::size_t k) {
  MoELayerSpec layer;
  layer.k = k;
  layer.gate.wg = Matrix(gate_w.size(), 1, gate_w);
  for (double ai : a) layer.experts.push_back(scalar_expert(ai));
  return layer;
}

/// Plain-loop softmax restricted to `allowed` (others get probability 0).
inline std::vector<double> oracle_softmax(const std::vector<double>& logits,
                                          const std::vector<bool>& allowed) {
  double mx = -INFINITY;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (allowed[i] && logits[i] > mx) mx = logits[i];
  }
  std::vector<double> p(logits.size(), 0.0);
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (allowed[i]) z += std::exp(logits[i] - mx);
  }
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (allowed[i]) p[i] = std::exp(logits[i] - mx) / z;
  }
  return p;
}

/// Selection by repeated linear scans for the best remaining entry.
inline std::vector<std::size_t> oracle_topk(const std::vector<double>& p, std::size_t k,
                                            const std::vector<bool>& allowed) {
  std::vector<bool> taken(p.size(), false);
  std::vector<std::size_t> out;
  for (std::size_t round = 0; round < k; ++round) {
    std::size_t best = p.size();
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (!allowed[i] || taken[i]) continue;
      if (best == p.size() || p[i] > p[best]) best = i;
    }
    if (best == p.size()) break;
    taken[best] = true;
    out.push_back(best);
  }
  return out;
}

}  // namespace pcmoe::testing
