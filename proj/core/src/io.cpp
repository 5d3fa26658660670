#include "pcmoe/io.hpp"

#include <nlohmann/json.hpp>

#include <charconv>
#include <fstream>
#include <sstream>

namespace pcmoe {

using nlohmann::json;

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view contents) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << contents;
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

namespace {

json parse(std::string_view text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("invalid JSON: ") + e.what());
  }
}

template <typename F>
auto guarded(std::string_view what, F&& f) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw FormatError(std::string(what) + ": " + e.what());
  }
}

json matrix_json(const Matrix& m) {
  json rows = json::array();
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const auto row = m.row(r);
    rows.push_back(std::vector<double>(row.begin(), row.end()));
  }
  return rows;
}

Matrix matrix_from(const json& j) {
  return Matrix::from_rows(j.get<std::vector<Vector>>());
}

}  // namespace

std::string model_to_json(const MoEModelSpec& model) {
  json j;
  j["model_id"] = model.model_id;
  j["seed"] = model.seed;
  j["d"] = model.d;
  j["h"] = model.h;
  j["num_classes"] = model.num_classes;
  json layers = json::array();
  for (const auto& layer : model.layers) {
    json experts = json::array();
    for (const auto& e : layer.experts) {
      experts.push_back({{"w1", matrix_json(e.w1)},
                         {"b1", e.b1},
                         {"w2", matrix_json(e.w2)},
                         {"b2", e.b2},
                         {"magnitude", e.cached_magnitude}});
    }
    layers.push_back({{"k", layer.k}, {"gate", {{"wg", matrix_json(layer.gate.wg)}}},
                      {"experts", std::move(experts)}});
  }
  j["layers"] = std::move(layers);
  j["head"] = matrix_json(model.head);
  return j.dump();
}

MoEModelSpec model_from_json(std::string_view text) {
  const json j = parse(text);
  MoEModelSpec m = guarded("model file", [&] {
    MoEModelSpec m;
    m.model_id = j.at("model_id").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.d = j.at("d").get<std::size_t>();
    m.h = j.at("h").get<std::size_t>();
    m.num_classes = j.at("num_classes").get<std::size_t>();
    for (const auto& jl : j.at("layers")) {
      MoELayerSpec layer;
      layer.k = jl.at("k").get<std::size_t>();
      layer.gate.wg = matrix_from(jl.at("gate").at("wg"));
      for (const auto& je : jl.at("experts")) {
        ExpertParams e;
        e.w1 = matrix_from(je.at("w1"));
        e.b1 = je.at("b1").get<Vector>();
        e.w2 = matrix_from(je.at("w2"));
        e.b2 = je.at("b2").get<Vector>();
        if (je.contains("magnitude")) {
          e.cached_magnitude = je.at("magnitude").get<double>();
        } else {
          e.refresh_magnitude();
        }
        layer.experts.push_back(std::move(e));
      }
      m.layers.push_back(std::move(layer));
    }
    m.head = matrix_from(j.at("head"));
    return m;
  });
  try {
    m.validate();
    expert_magnitudes(m);
  } catch (const std::exception& e) {
    throw FormatError(std::string("model file: ") + e.what());
  }
  return m;
}

std::string order_to_string(TraceOrder order, std::size_t factor) {
  switch (order) {
    case TraceOrder::Sequential: return "sequential";
    case TraceOrder::Shuffled: return "shuffled";
    case TraceOrder::Speedup: return "speedup:" + std::to_string(factor);
  }
  return "sequential";
}

void parse_order(std::string_view s, TraceOrder& order, std::size_t& factor) {
  factor = 1;
  if (s == "sequential") {
    order = TraceOrder::Sequential;
  } else if (s == "shuffled") {
    order = TraceOrder::Shuffled;
  } else if (s.rfind("speedup:", 0) == 0) {
    const auto num = s.substr(8);
    const auto res = std::from_chars(num.data(), num.data() + num.size(), factor);
    if (res.ec != std::errc() || res.ptr != num.data() + num.size() || factor < 1) {
      throw std::invalid_argument("bad speedup factor in '" + std::string(s) + "'");
    }
    order = TraceOrder::Speedup;
  } else {
    throw std::invalid_argument("unknown trace order '" + std::string(s) + "'");
  }
}

std::string trace_to_json(const Trace& trace) {
  const auto& s = trace.spec;
  json j;
  j["spec"] = {{"num_samples", s.num_samples},
               {"tokens_per_sample", s.tokens_per_sample},
               {"num_clusters", s.num_clusters},
               {"drift_period", s.drift_period},
               {"noise_sigma", s.noise_sigma},
               {"order", order_to_string(s.order, s.speedup_factor)},
               {"seed", s.seed}};
  json samples = json::array();
  for (const auto& sample : trace.samples) {
    json js;
    js["tokens"] = sample.tokens;
    js["label"] = sample.label ? json(*sample.label) : json(nullptr);
    samples.push_back(std::move(js));
  }
  j["samples"] = std::move(samples);
  return j.dump();
}

Trace trace_from_json(std::string_view text) {
  const json j = parse(text);
  return guarded("trace file", [&] {
    Trace t;
    const auto& js = j.at("spec");
    t.spec.num_samples = js.at("num_samples").get<std::size_t>();
    t.spec.tokens_per_sample = js.at("tokens_per_sample").get<std::size_t>();
    t.spec.num_clusters = js.at("num_clusters").get<std::size_t>();
    t.spec.drift_period = js.at("drift_period").get<std::size_t>();
    t.spec.noise_sigma = js.at("noise_sigma").get<double>();
    parse_order(js.at("order").get<std::string>(), t.spec.order, t.spec.speedup_factor);
    t.spec.seed = js.at("seed").get<std::uint64_t>();
    bool all_labeled = true;
    for (const auto& jsample : j.at("samples")) {
      Sample s;
      s.tokens = jsample.at("tokens").get<std::vector<Vector>>();
      if (s.tokens.empty()) throw FormatError("trace file: sample without tokens");
      if (jsample.contains("label") && !jsample.at("label").is_null()) {
        s.label = jsample.at("label").get<std::size_t>();
      } else {
        all_labeled = false;
      }
      t.samples.push_back(std::move(s));
    }
    t.labeled = all_labeled && !t.samples.empty();
    return t;
  });
}

namespace {

json config_json(const PCConfig& c) {
  std::vector<std::string> strategies;
  for (Strategy s : c.strategies) strategies.emplace_back(to_string(s));
  return {{"interval", c.interval}, {"num_experts", c.num_experts}, {"strategies", strategies}};
}

PCConfig config_from(const json& j) {
  PCConfig c;
  c.interval = j.at("interval").get<std::size_t>();
  c.num_experts = j.at("num_experts").get<std::vector<std::size_t>>();
  for (const auto& s : j.at("strategies")) c.strategies.push_back(parse_strategy(s.get<std::string>()));
  if (c.interval < 1) throw FormatError("config: interval must be >= 1");
  return c;
}

}  // namespace

std::string config_to_json(const PCConfig& config) { return config_json(config).dump(); }

PCConfig config_from_json(std::string_view text) {
  const json j = parse(text);
  return guarded("config file", [&] { return config_from(j); });
}

std::string cost_to_json(const CostModelParams& cost) {
  return json{{"compute_throughput", cost.compute_throughput},
              {"io_bandwidth", cost.io_bandwidth},
              {"base_latency", cost.base_latency},
              {"mode", std::string(to_string(cost.mode))}}
      .dump();
}

CostModelParams cost_from_json(std::string_view text) {
  const json j = parse(text);
  CostModelParams c = guarded("cost file", [&] {
    CostModelParams c;
    c.compute_throughput = j.at("compute_throughput").get<double>();
    c.io_bandwidth = j.at("io_bandwidth").get<double>();
    c.base_latency = j.at("base_latency").get<double>();
    c.mode = parse_swap_mode(j.value("mode", std::string("async")));
    return c;
  });
  c.validate();
  return c;
}

std::string constraints_to_json(const Constraints& c) {
  return json{{"limit_memory_bytes", c.limit_memory},
              {"limit_latency_ms", c.limit_latency},
              {"margin", c.margin}}
      .dump();
}

Constraints constraints_from_json(std::string_view text) {
  const json j = parse(text);
  Constraints c = guarded("constraints file", [&] {
    Constraints c;
    c.limit_memory = j.at("limit_memory_bytes").get<double>();
    c.limit_latency = j.at("limit_latency_ms").get<double>();
    c.margin = j.value("margin", 0.0);
    return c;
  });
  c.validate();
  return c;
}

std::string profile_to_json(const ProfileFile& file) {
  json records = json::array();
  for (const auto& r : file.records) {
    records.push_back({{"config", config_json(r.config)},
                       {"accuracy", r.accuracy},
                       {"fidelity", r.fidelity},
                       {"peak_memory", r.peak_memory},
                       {"mean_latency", r.mean_latency}});
  }
  return json{{"model_shape",
               {{"experts_per_layer", file.shape.experts_per_layer},
                {"interval_domain", file.shape.interval_domain}}},
              {"records", std::move(records)}}
      .dump();
}

ProfileFile profile_from_json(std::string_view text) {
  const json j = parse(text);
  return guarded("records file", [&] {
    ProfileFile f;
    const auto& shape = j.at("model_shape");
    f.shape.experts_per_layer = shape.at("experts_per_layer").get<std::vector<std::size_t>>();
    f.shape.interval_domain = shape.at("interval_domain").get<std::vector<std::size_t>>();
    for (const auto& jr : j.at("records")) {
      f.records.push_back({config_from(jr.at("config")), jr.at("accuracy").get<double>(),
                           jr.value("fidelity", 0.0), jr.at("peak_memory").get<double>(),
                           jr.at("mean_latency").get<double>()});
    }
    return f;
  });
}

std::string serve_report_to_json(const ServeReport& r) {
  const auto& m = r.metrics;
  return json{{"policy", r.policy},
              {"expert_ratio", r.expert_ratio},
              {"accuracy", r.accuracy},
              {"fidelity", r.fidelity},
              {"peak_resident_bytes", m.peak_resident_bytes},
              {"mean_latency_ms", m.mean_latency_ms},
              {"mean_compute_ms", m.mean_compute_ms},
              {"mean_io_bytes", m.mean_io_bytes},
              {"mean_io_rate", m.mean_io_rate},
              {"peak_io_rate", m.peak_io_rate},
              {"total_compute_ms", m.total_compute_ms},
              {"total_stall_ms", m.total_stall_ms},
              {"total_io_bytes", m.total_io_bytes},
              {"num_samples", m.samples.size()},
              {"final_resident", r.final_resident}}
      .dump(2);
}

ServeReport serve_report_from_json(std::string_view text) {
  const json j = parse(text);
  return guarded("serve report", [&] {
    ServeReport r;
    r.policy = j.at("policy").get<std::string>();
    r.expert_ratio = j.at("expert_ratio").get<double>();
    r.accuracy = j.at("accuracy").get<double>();
    r.fidelity = j.at("fidelity").get<double>();
    auto& m = r.metrics;
    m.peak_resident_bytes = j.at("peak_resident_bytes").get<std::uint64_t>();
    m.mean_latency_ms = j.at("mean_latency_ms").get<double>();
    m.mean_compute_ms = j.value("mean_compute_ms", 0.0);
    m.mean_io_bytes = j.at("mean_io_bytes").get<double>();
    m.mean_io_rate = j.value("mean_io_rate", 0.0);
    m.peak_io_rate = j.value("peak_io_rate", 0.0);
    m.total_compute_ms = j.value("total_compute_ms", 0.0);
    m.total_stall_ms = j.value("total_stall_ms", 0.0);
    m.total_io_bytes = j.value("total_io_bytes", std::uint64_t{0});
    r.final_resident = j.value("final_resident", std::vector<std::vector<std::size_t>>{});
    return r;
  });
}

std::string plan_report_to_json(const SearchResult& result) {
  return json{{"predicted",
               {{"acc", result.predicted.accuracy},
                {"mem", result.predicted.memory},
                {"lat", result.predicted.latency}}},
              {"feasible", result.config.has_value()},
              {"generations_run", result.generations_run},
              {"seed", result.seed}}
      .dump(2);
}

}  // namespace pcmoe
