#include "pcmoe/workload.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>
#include <string>

namespace pcmoe {

namespace {

using Rng = std::mt19937_64;

Vector gaussian(Rng& rng, std::size_t n, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  Vector v(n);
  for (double& x : v) x = dist(rng);
  return v;
}

Matrix gaussian_matrix(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
  return Matrix(rows, cols, gaussian(rng, rows * cols, stddev));
}

void normalize(Vector& v) {
  const double norm = magnitude(v);
  if (norm > 0.0) {
    for (double& x : v) x /= norm;
  }
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Orthonormal when count <= d (Gram-Schmidt), otherwise independent unit vectors.
std::vector<Vector> unit_directions(Rng& rng, std::size_t count, std::size_t d) {
  std::vector<Vector> dirs;
  while (dirs.size() < count) {
    Vector v = gaussian(rng, d, 1.0);
    if (count <= d) {
      for (const auto& u : dirs) axpy(-dot(u, v), u, v);
    }
    if (magnitude(v) < 1e-6) continue;
    normalize(v);
    dirs.push_back(std::move(v));
  }
  return dirs;
}

}  // namespace

MoEModelSpec gen_model(const ModelGenParams& p) {
  if (p.d == 0 || p.h == 0 || p.layers == 0 || p.num_classes == 0) {
    throw std::invalid_argument("gen_model: dimensions must be positive");
  }
  if (p.k < 1 || p.k > p.experts) throw std::invalid_argument("gen_model: need experts >= k >= 1");

  Rng rng(p.seed);
  const double scale = 1.0 / std::sqrt(static_cast<double>(p.d));
  MoEModelSpec m;
  m.d = p.d;
  m.h = p.h;
  m.num_classes = p.num_classes;
  m.seed = p.seed;
  m.model_id = "synthetic-d" + std::to_string(p.d) + "-h" + std::to_string(p.h) + "-L" +
               std::to_string(p.layers) + "-n" + std::to_string(p.experts) + "-k" +
               std::to_string(p.k) + "-s" + std::to_string(p.seed);
  for (std::size_t l = 0; l < p.layers; ++l) {
    MoELayerSpec layer;
    layer.k = p.k;
    std::vector<Vector> rows = unit_directions(rng, p.experts, p.d);
    for (auto& r : rows) {
      for (double& x : r) x *= p.gate_scale;
    }
    layer.gate.wg = Matrix::from_rows(rows);
    for (std::size_t i = 0; i < p.experts; ++i) {
      ExpertParams e;
      e.w1 = gaussian_matrix(rng, p.h, p.d, scale);
      e.b1 = gaussian(rng, p.h, scale);
      e.w2 = gaussian_matrix(rng, p.d, p.h, scale);
      e.b2 = gaussian(rng, p.d, scale);
      e.refresh_magnitude();
      layer.experts.push_back(std::move(e));
    }
    m.layers.push_back(std::move(layer));
  }
  m.head = gaussian_matrix(rng, p.num_classes, p.d, scale);
  return m;
}

std::vector<Vector> expert_anchors(const MoELayerSpec& layer) {
  std::vector<Vector> anchors;
  for (std::size_t i = 0; i < layer.gate.wg.rows(); ++i) {
    const auto row = layer.gate.wg.row(i);
    Vector v(row.begin(), row.end());
    normalize(v);
    anchors.push_back(std::move(v));
  }
  return anchors;
}

void TraceSpec::validate() const {
  if (drift_period < 1) throw std::invalid_argument("trace: drift_period must be >= 1");
  if (num_samples < 1 || tokens_per_sample < 1 || num_clusters < 1) {
    throw std::invalid_argument("trace: num_samples, tokens_per_sample and num_clusters must be >= 1");
  }
  if (speedup_factor < 1) throw std::invalid_argument("trace: speedup factor must be >= 1");
  if (!(noise_sigma >= 0.0)) throw std::invalid_argument("trace: noise_sigma must be >= 0");
}

std::vector<std::size_t> cluster_schedule(const TraceSpec& spec) {
  spec.validate();
  std::size_t period = spec.drift_period;
  if (spec.order == TraceOrder::Speedup) period = std::max<std::size_t>(1, period / spec.speedup_factor);
  // Regime order is its own stream so every ordering sees the same regimes.
  Rng rng(spec.seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_int_distribution<std::size_t> pick(0, spec.num_clusters - 1);
  std::vector<std::size_t> schedule(spec.num_samples);
  std::size_t current = pick(rng);
  for (std::size_t i = 0; i < spec.num_samples; ++i) {
    if (i > 0 && i % period == 0 && spec.num_clusters > 1) {
      std::size_t next = pick(rng);
      while (next == current) next = pick(rng);
      current = next;
    }
    schedule[i] = current;
  }
  return schedule;
}

Trace gen_trace(const TraceSpec& spec, const MoEModelSpec* model, std::size_t d) {
  spec.validate();
  if (model) d = model->d;
  if (d == 0) throw std::invalid_argument("gen_trace: token dimension unknown");

  Rng rng(spec.seed);
  const std::size_t T = spec.tokens_per_sample;

  // Anchors the clusters draw their tokens from.
  std::vector<Vector> anchors;
  std::size_t k = 1;
  if (model) {
    anchors = expert_anchors(model->layers.front());
    k = model->layers.front().k;
  } else {
    anchors = unit_directions(rng, std::max<std::size_t>(2 * spec.num_clusters, 2), d);
  }
  const std::size_t n = anchors.size();
  const std::size_t per_cluster =
      std::clamp<std::size_t>((n + spec.num_clusters - 1) / spec.num_clusters, std::min(k, n), n);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), rng);

  // Fixed token prototypes per cluster: anchor plus a small fixed offset.
  std::vector<std::vector<Vector>> prototypes(spec.num_clusters);
  for (std::size_t c = 0; c < spec.num_clusters; ++c) {
    for (std::size_t j = 0; j < T; ++j) {
      const std::size_t expert = perm[(c * per_cluster + j % per_cluster) % n];
      Vector proto = anchors[expert];
      axpy(1.0, gaussian(rng, d, 0.1 / std::sqrt(static_cast<double>(d))), proto);
      prototypes[c].push_back(std::move(proto));
    }
  }

  Trace trace;
  trace.spec = spec;
  TraceSpec base = spec;
  if (base.order == TraceOrder::Shuffled) base.order = TraceOrder::Sequential;
  const auto schedule = cluster_schedule(base);
  std::normal_distribution<double> noise(0.0, spec.noise_sigma);
  for (std::size_t i = 0; i < spec.num_samples; ++i) {
    Sample s;
    for (const auto& proto : prototypes[schedule[i]]) {
      Vector x = proto;
      if (spec.noise_sigma > 0.0) {
        for (double& v : x) v += noise(rng);
      }
      s.tokens.push_back(std::move(x));
    }
    trace.samples.push_back(std::move(s));
  }
  if (spec.order == TraceOrder::Shuffled) {
    Rng shuffle_rng(spec.seed ^ 0x5851f42d4c957f2dULL);
    std::shuffle(trace.samples.begin(), trace.samples.end(), shuffle_rng);
  }
  if (model) {
    for (auto& s : trace.samples) s.label = argmax(model_forward_reference(*model, s).logits);
    trace.labeled = true;
  }
  return trace;
}

std::vector<std::vector<std::size_t>> activated_experts(const MoEModelSpec& model,
                                                        const Sample& sample) {
  const auto fwd = model_forward_reference(model, sample);
  std::vector<std::vector<std::size_t>> sets;
  for (const auto& layer : fwd.routing) {
    std::set<std::size_t> active;
    for (const auto& token : layer) {
      for (const auto& r : token) active.insert(r.expert);
    }
    sets.emplace_back(active.begin(), active.end());
  }
  return sets;
}

double locality_index(const Trace& trace, const MoEModelSpec& model) {
  if (trace.samples.size() < 2) throw std::invalid_argument("locality_index: need >= 2 samples");
  std::vector<std::vector<std::vector<std::size_t>>> sets;
  sets.reserve(trace.samples.size());
  for (const auto& s : trace.samples) sets.push_back(activated_experts(model, s));

  double total = 0.0;
  for (std::size_t i = 1; i < sets.size(); ++i) {
    double pair = 0.0;
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
      const auto& a = sets[i - 1][l];
      const auto& b = sets[i][l];
      std::vector<std::size_t> inter;
      std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(inter));
      const double uni = static_cast<double>(a.size() + b.size() - inter.size());
      pair += uni > 0.0 ? static_cast<double>(inter.size()) / uni : 1.0;
    }
    total += pair / static_cast<double>(model.layers.size());
  }
  return total / static_cast<double>(sets.size() - 1);
}

Trace profiling_trace(const Trace& trace, double fraction, std::size_t min_samples) {
  if (trace.samples.empty()) throw std::invalid_argument("profiling_trace: empty trace");
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw std::invalid_argument("profiling_trace: fraction must be in (0, 1]");
  }
  const auto head = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(trace.samples.size()))));
  Trace out;
  out.spec = trace.spec;
  out.labeled = trace.labeled;
  while (out.samples.size() < std::max(min_samples, head)) {
    out.samples.insert(out.samples.end(), trace.samples.begin(),
                       trace.samples.begin() + static_cast<std::ptrdiff_t>(head));
  }
  out.spec.num_samples = out.samples.size();
  return out;
}

}  // namespace pcmoe
