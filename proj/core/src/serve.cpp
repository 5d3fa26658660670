#include "pcmoe/serve.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

namespace pcmoe {

ServePolicy ServePolicy::reference() { return {}; }

ServePolicy ServePolicy::pc(PCConfig config) {
  ServePolicy p;
  p.kind = Kind::PC;
  p.config = std::move(config);
  return p;
}

namespace {

void check_ratio(double r) {
  if (!(r > 0.0 && r <= 1.0)) throw std::invalid_argument("policy ratio must be in (0, 1]");
}

}  // namespace

ServePolicy ServePolicy::random_keep(double ratio, std::uint64_t seed) {
  check_ratio(ratio);
  ServePolicy p;
  p.kind = Kind::RandomKeep;
  p.ratio = ratio;
  p.seed = seed;
  return p;
}

ServePolicy ServePolicy::magnitude_keep(double ratio) {
  check_ratio(ratio);
  ServePolicy p;
  p.kind = Kind::MagnitudeKeep;
  p.ratio = ratio;
  return p;
}

ServePolicy ServePolicy::on_demand(double ratio) {
  check_ratio(ratio);
  ServePolicy p;
  p.kind = Kind::OnDemand;
  p.ratio = ratio;
  return p;
}

std::string_view ServePolicy::name() const noexcept {
  switch (kind) {
    case Kind::Reference: return "reference";
    case Kind::PC: return "pc";
    case Kind::RandomKeep: return "random-keep";
    case Kind::MagnitudeKeep: return "magnitude-keep";
    case Kind::OnDemand: return "on-demand";
  }
  return "unknown";
}

std::size_t keep_count(double ratio, std::size_t n) {
  check_ratio(ratio);
  const auto c = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(n) - 1e-9));
  return std::clamp<std::size_t>(c, 1, n);
}

PCConfig uniform_config(const MoEModelSpec& model, double ratio, std::size_t interval,
                        Strategy strategy) {
  PCConfig c;
  c.interval = interval;
  for (const auto& layer : model.layers) {
    c.num_experts.push_back(keep_count(ratio, layer.num_experts()));
    c.strategies.push_back(strategy);
  }
  return c;
}

namespace {

std::uint64_t reference_flops(const MoEModelSpec& model, std::size_t tokens) {
  std::uint64_t f = 0;
  for (const auto& layer : model.layers) {
    f += tokens * (gate_flops(model.d, layer.num_experts()) + layer.k * expert_flops(model.d, model.h));
  }
  return f + tokens * model.d + 2ULL * model.num_classes * model.d;
}

std::uint64_t head_flops(const MoEModelSpec& model, std::size_t tokens) {
  return tokens * model.d + 2ULL * model.num_classes * model.d;
}

std::uint64_t all_expert_bytes(const ParameterWarehouse& wh) {
  std::uint64_t b = 0;
  for (std::size_t l = 0; l < wh.num_layers(); ++l) {
    for (std::size_t i = 0; i < wh.num_experts(l); ++i) b += wh.expert_bytes(l, i);
  }
  return b;
}

double relative_distance(const Vector& a, const Vector& ref) {
  double diff = 0.0;
  double norm = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    diff += (a[i] - ref[i]) * (a[i] - ref[i]);
    norm += ref[i] * ref[i];
  }
  return norm > 0.0 ? std::sqrt(diff / norm) : std::sqrt(diff);
}

std::vector<std::size_t> random_subset(std::mt19937_64& rng, std::size_t n, std::size_t count) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

struct Replay {
  std::vector<Vector> logits;
  std::vector<SampleMetrics> samples;
  std::vector<std::vector<std::size_t>> final_resident;
  double expert_ratio = 1.0;
};

Replay replay_reference(const MoEModelSpec& model, const ParameterWarehouse& wh,
                        const Trace& trace, const CostModelParams& cost) {
  Replay r;
  IoTimeline timeline(cost);
  const std::uint64_t resident = wh.overhead_bytes() + all_expert_bytes(wh);
  for (std::size_t i = 0; i < trace.samples.size(); ++i) {
    const auto& s = trace.samples[i];
    r.logits.push_back(model_forward_reference(model, s).logits);
    SampleMetrics m = timeline.charge(0, reference_flops(model, s.tokens.size()), true);
    m.sample_id = i;
    m.resident_bytes = resident;
    r.samples.push_back(m);
  }
  for (const auto& layer : model.layers) {
    std::vector<std::size_t> all(layer.num_experts());
    std::iota(all.begin(), all.end(), std::size_t{0});
    r.final_resident.push_back(std::move(all));
  }
  return r;
}

Replay replay_pc(std::shared_ptr<const MoEModelSpec> model,
                 std::shared_ptr<const ParameterWarehouse> wh, const Trace& trace,
                 const PCConfig& config, const CostModelParams& cost, ExecutionMode exec) {
  CommitteeState state = initial_committee(*model, config);
  SwapEngine engine(wh, state, cost, exec);
  const auto mags = expert_magnitudes(*model);
  Replay r;
  for (std::size_t i = 0; i < trace.samples.size(); ++i) {
    std::vector<Vector> tokens = trace.samples[i].tokens;
    std::uint64_t flops = 0;
    for (std::size_t l = 0; l < model->layers.size(); ++l) {
      const auto view = engine.store().view(l);
      auto res = layer_forward_pc(model->layers[l], l, tokens, state, config, mags[l], view.table);
      flops += res.flops;
      if (res.swap_request) {
        engine.submit(l, state.layers[l], *res.swap_request, res.scores, config.interval);
      }
      tokens = std::move(res.outputs);
    }
    r.logits.push_back(classify(model->head, tokens));
    flops += head_flops(*model, tokens.size());
    const bool boundary_next = (state.sample_counter + 1) % config.interval == 0;
    r.samples.push_back(engine.advance(i, flops, boundary_next));
    engine.commit(state);
    ++state.sample_counter;
  }
  for (const auto& lc : state.layers) r.final_resident.push_back(lc.resident);
  return r;
}

Replay replay_keep(const MoEModelSpec& model, const ParameterWarehouse& wh, const Trace& trace,
                   const std::vector<std::vector<std::size_t>>& resident,
                   const CostModelParams& cost) {
  Replay r;
  IoTimeline timeline(cost);
  std::vector<ExpertTable> tables;
  std::uint64_t bytes = wh.overhead_bytes();
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    tables.push_back(make_expert_table(model.layers[l], resident[l]));
    for (std::size_t e : resident[l]) bytes += wh.expert_bytes(l, e);
  }
  for (std::size_t i = 0; i < trace.samples.size(); ++i) {
    std::vector<Vector> tokens = trace.samples[i].tokens;
    std::uint64_t flops = 0;
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
      tokens = handle_exchange(model.layers[l], tokens, tables[l], &flops);
    }
    r.logits.push_back(classify(model.head, tokens));
    flops += head_flops(model, tokens.size());
    SampleMetrics m = timeline.charge(0, flops, true);
    m.sample_id = i;
    m.resident_bytes = bytes;
    r.samples.push_back(m);
  }
  r.final_resident = resident;
  return r;
}

Replay replay_on_demand(const MoEModelSpec& model, const ParameterWarehouse& wh,
                        const Trace& trace, const std::vector<std::vector<std::size_t>>& resident,
                        CostModelParams cost) {
  cost.mode = SwapMode::Sync;
  IoTimeline timeline(cost);
  Replay r;
  std::uint64_t base_bytes = wh.overhead_bytes();
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    for (std::size_t e : resident[l]) base_bytes += wh.expert_bytes(l, e);
  }
  for (std::size_t i = 0; i < trace.samples.size(); ++i) {
    const auto& s = trace.samples[i];
    const auto fwd = model_forward_reference(model, s);
    std::uint64_t io = 0;
    std::uint64_t peak = base_bytes;
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
      std::set<std::size_t> missing;
      for (const auto& token : fwd.routing[l]) {
        for (const auto& route : token) {
          if (!std::binary_search(resident[l].begin(), resident[l].end(), route.expert)) {
            missing.insert(route.expert);
          }
        }
      }
      std::uint64_t layer_io = 0;
      for (std::size_t e : missing) layer_io += wh.expert_bytes(l, e);
      io += layer_io;
      // Fetched experts live only for the duration of their layer.
      peak = std::max(peak, base_bytes + layer_io);
    }
    r.logits.push_back(fwd.logits);
    SampleMetrics m = timeline.charge(io, reference_flops(model, s.tokens.size()), true);
    m.sample_id = i;
    m.resident_bytes = peak;
    m.loaded_experts = 0;
    r.samples.push_back(m);
  }
  r.final_resident = resident;
  return r;
}

}  // namespace

ServeReport serve_trace(std::shared_ptr<const MoEModelSpec> model, const Trace& trace,
                        const ServePolicy& policy, const CostModelParams& cost,
                        const ServeOptions& options) {
  if (!model) throw std::invalid_argument("serve_trace: null model");
  if (trace.samples.empty()) throw std::invalid_argument("serve_trace: empty trace");
  cost.validate();
  auto wh = std::make_shared<const ParameterWarehouse>(model);
  const auto n_per_layer = model->experts_per_layer();
  const double total_experts =
      static_cast<double>(std::accumulate(n_per_layer.begin(), n_per_layer.end(), std::size_t{0}));

  auto fixed_subsets = [&](bool random) {
    std::mt19937_64 rng(policy.seed);
    const auto mags = expert_magnitudes(*model);
    std::vector<std::vector<std::size_t>> res;
    for (std::size_t l = 0; l < model->layers.size(); ++l) {
      const std::size_t c = keep_count(policy.ratio, n_per_layer[l]);
      res.push_back(random ? random_subset(rng, n_per_layer[l], c) : select_committee(mags[l], c));
    }
    return res;
  };

  Replay replay;
  switch (policy.kind) {
    case ServePolicy::Kind::Reference:
      replay = replay_reference(*model, *wh, trace, cost);
      break;
    case ServePolicy::Kind::PC:
      policy.config.validate(n_per_layer);
      replay = replay_pc(model, wh, trace, policy.config, cost, options.exec);
      break;
    case ServePolicy::Kind::RandomKeep:
      replay = replay_keep(*model, *wh, trace, fixed_subsets(true), cost);
      break;
    case ServePolicy::Kind::MagnitudeKeep:
      replay = replay_keep(*model, *wh, trace, fixed_subsets(false), cost);
      break;
    case ServePolicy::Kind::OnDemand:
      replay = replay_on_demand(*model, *wh, trace, fixed_subsets(false), cost);
      break;
  }

  ServeReport rep;
  rep.policy = std::string(policy.name());
  std::size_t kept = 0;
  for (const auto& r : replay.final_resident) kept += r.size();
  rep.expert_ratio = static_cast<double>(kept) / total_experts;

  std::size_t correct = 0;
  double fidelity = 0.0;
  for (std::size_t i = 0; i < trace.samples.size(); ++i) {
    const auto& s = trace.samples[i];
    const Vector ref = policy.kind == ServePolicy::Kind::Reference
                           ? replay.logits[i]
                           : model_forward_reference(*model, s).logits;
    const std::size_t label = s.label ? *s.label : argmax(ref);
    if (argmax(replay.logits[i]) == label) ++correct;
    fidelity += relative_distance(replay.logits[i], ref);
  }
  const auto n = static_cast<double>(trace.samples.size());
  rep.accuracy = static_cast<double>(correct) / n;
  rep.fidelity = fidelity / n;
  rep.metrics = summarize(std::move(replay.samples));
  rep.final_resident = std::move(replay.final_resident);
  if (options.keep_logits) rep.logits = std::move(replay.logits);
  return rep;
}

ServeReport serve_trace(const MoEModelSpec& model, const Trace& trace, const ServePolicy& policy,
                        const CostModelParams& cost, const ServeOptions& options) {
  return serve_trace(std::make_shared<const MoEModelSpec>(model), trace, policy, cost, options);
}

// ---------------------------------------------------------------------------

namespace {

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(std::string_view s) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw std::invalid_argument("bad number '" + std::string(s) + "' in CSV");
  }
  return v;
}

}  // namespace

std::vector<TradeoffRow> tradeoff_rows(const std::vector<ServeReport>& reports) {
  if (reports.empty()) throw std::invalid_argument("report: no serve reports");
  std::vector<TradeoffRow> rows;
  for (const auto& r : reports) {
    rows.push_back({r.policy, r.expert_ratio, r.accuracy, r.fidelity,
                    static_cast<double>(r.metrics.peak_resident_bytes), r.metrics.mean_latency_ms,
                    r.metrics.mean_io_bytes});
  }
  std::stable_sort(rows.begin(), rows.end(), [](const TradeoffRow& a, const TradeoffRow& b) {
    if (a.policy != b.policy) return a.policy < b.policy;
    return a.expert_ratio < b.expert_ratio;
  });
  return rows;
}

std::string tradeoff_csv(const std::vector<TradeoffRow>& rows) {
  std::string out = "policy,expert_ratio,accuracy,fidelity,peak_memory,mean_latency,mean_io\n";
  for (const auto& r : rows) {
    out += r.policy;
    for (double v : {r.expert_ratio, r.accuracy, r.fidelity, r.peak_memory, r.mean_latency,
                     r.mean_io}) {
      out += ',';
      out += format_double(v);
    }
    out += '\n';
  }
  return out;
}

std::vector<TradeoffRow> parse_tradeoff_csv(std::string_view csv) {
  std::vector<TradeoffRow> rows;
  std::istringstream in{std::string(csv)};
  std::string line;
  if (!std::getline(in, line) || line.rfind("policy,", 0) != 0) {
    throw std::invalid_argument("tradeoff CSV: missing header");
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() != 7) throw std::invalid_argument("tradeoff CSV: expected 7 columns");
    rows.push_back({cells[0], parse_double(cells[1]), parse_double(cells[2]),
                    parse_double(cells[3]), parse_double(cells[4]), parse_double(cells[5]),
                    parse_double(cells[6])});
  }
  return rows;
}

std::vector<TradeoffRow> report(const std::vector<ServeReport>& reports,
                                const std::filesystem::path& out_path) {
  auto rows = tradeoff_rows(reports);
  std::ofstream out(out_path);
  if (!out) throw std::runtime_error("cannot open " + out_path.string() + " for writing");
  out << tradeoff_csv(rows);
  if (!out) throw std::runtime_error("failed writing " + out_path.string());
  return rows;
}

std::string metrics_csv(const RunMetrics& metrics) {
  std::string out = "sample_id,compute_ms,stall_ms,io_bytes,resident_bytes\n";
  for (const auto& s : metrics.samples) {
    out += std::to_string(s.sample_id) + ',' + format_double(s.compute_ms) + ',' +
           format_double(s.stall_ms) + ',' + std::to_string(s.io_bytes) + ',' +
           std::to_string(s.resident_bytes) + '\n';
  }
  return out;
}

}  // namespace pcmoe
