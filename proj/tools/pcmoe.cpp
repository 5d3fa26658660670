// pcmoe: generate synthetic workloads, replay them under serving policies,
// profile committee configurations and plan one under resource limits.
//
// Exit codes: 0 success, 2 infeasible plan, 1 any error.

#include <CLI11.hpp>

#include <charconv>
#include <cstdint>
#include <exception>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "pcmoe/io.hpp"
#include "pcmoe/planner.hpp"
#include "pcmoe/serve.hpp"
#include "pcmoe/workload.hpp"

namespace {

using namespace pcmoe;

constexpr int kExitInfeasible = 2;

double parse_ratio(const std::string& s) {
  std::size_t used = 0;
  const double r = std::stod(s, &used);
  if (used != s.size()) throw std::invalid_argument("bad ratio '" + s + "'");
  return r;
}

// reference | pc:<config.json> | random-keep:<r>:<seed> | magnitude-keep:<r> | on-demand:<r>
ServePolicy parse_policy(const std::string& text) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const auto colon = text.find(':', start);
    parts.push_back(text.substr(start, colon - start));
    if (colon == std::string::npos) break;
    start = colon + 1;
  }
  const std::string& kind = parts.front();
  if (kind == "reference" && parts.size() == 1) return ServePolicy::reference();
  if (kind == "pc" && parts.size() >= 2) {
    // Paths may contain ':'; everything after the first one is the path.
    return ServePolicy::pc(config_from_json(read_file(text.substr(3))));
  }
  if (kind == "random-keep" && parts.size() == 3) {
    return ServePolicy::random_keep(parse_ratio(parts[1]), std::stoull(parts[2]));
  }
  if (kind == "magnitude-keep" && parts.size() == 2) {
    return ServePolicy::magnitude_keep(parse_ratio(parts[1]));
  }
  if (kind == "on-demand" && parts.size() == 2) return ServePolicy::on_demand(parse_ratio(parts[1]));
  throw std::invalid_argument("unrecognized policy '" + text + "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Parameter-committee MoE serving runtime and planner"};
  app.require_subcommand(1);

  // gen-model
  ModelGenParams gm;
  std::string gm_out;
  auto* gen_model_cmd = app.add_subcommand("gen-model", "Generate a synthetic MoE model");
  gen_model_cmd->set_help_flag("--help", "Print this help message and exit");  // -h is taken by --h
  gen_model_cmd->add_option("--d", gm.d, "Token dimension")->required();
  gen_model_cmd->add_option("--h", gm.h, "Expert hidden dimension")->required();
  gen_model_cmd->add_option("--layers", gm.layers, "Number of MoE layers")->required();
  gen_model_cmd->add_option("--experts", gm.experts, "Experts per layer")->required();
  gen_model_cmd->add_option("--k", gm.k, "Experts selected per token")->required();
  gen_model_cmd->add_option("--classes", gm.num_classes, "Classifier classes")->required();
  gen_model_cmd->add_option("--seed", gm.seed, "RNG seed")->required();
  gen_model_cmd->add_option("--out", gm_out, "Output model JSON")->required();

  // gen-trace
  TraceSpec ts;
  std::string gt_model, gt_order = "sequential", gt_out;
  auto* gen_trace_cmd = app.add_subcommand("gen-trace", "Generate a labeled sample trace");
  gen_trace_cmd->add_option("--model", gt_model, "Model JSON used for anchors and labels")->required();
  gen_trace_cmd->add_option("--samples", ts.num_samples)->required();
  gen_trace_cmd->add_option("--tokens", ts.tokens_per_sample)->required();
  gen_trace_cmd->add_option("--clusters", ts.num_clusters)->required();
  gen_trace_cmd->add_option("--drift", ts.drift_period, "Samples per regime")->required();
  gen_trace_cmd->add_option("--noise", ts.noise_sigma)->required();
  gen_trace_cmd->add_option("--order", gt_order, "sequential | speedup:<f> | shuffled");
  gen_trace_cmd->add_option("--seed", ts.seed)->required();
  gen_trace_cmd->add_option("--out", gt_out)->required();

  // serve
  std::string sv_model, sv_trace, sv_policy, sv_cost, sv_metrics, sv_report;
  bool sv_threaded = false;
  auto* serve_cmd = app.add_subcommand("serve", "Replay a trace under a serving policy");
  serve_cmd->add_option("--model", sv_model)->required();
  serve_cmd->add_option("--trace", sv_trace)->required();
  serve_cmd->add_option("--policy", sv_policy,
                        "reference | pc:<config.json> | random-keep:<r>:<seed> | "
                        "magnitude-keep:<r> | on-demand:<r>")
      ->required();
  serve_cmd->add_option("--cost", sv_cost, "Cost model JSON")->required();
  serve_cmd->add_option("--metrics", sv_metrics, "Per-sample metrics CSV");
  serve_cmd->add_option("--report", sv_report, "Serve report JSON");
  serve_cmd->add_flag("--threaded", sv_threaded, "Copy expert loads on a background thread");

  // profile
  std::string pf_model, pf_trace, pf_cost, pf_out;
  std::size_t pf_num = 64;
  std::uint64_t pf_seed = 0;
  auto* profile_cmd = app.add_subcommand("profile", "Profile random committee configurations");
  profile_cmd->add_option("--model", pf_model)->required();
  profile_cmd->add_option("--trace", pf_trace)->required();
  profile_cmd->add_option("--num-configs", pf_num)->capture_default_str();
  profile_cmd->add_option("--cost", pf_cost)->required();
  profile_cmd->add_option("--seed", pf_seed)->capture_default_str();
  profile_cmd->add_option("--out", pf_out)->required();

  // plan
  std::string pl_records, pl_constraints, pl_out, pl_report;
  GaParams ga;
  auto* plan_cmd = app.add_subcommand("plan", "Search a committee configuration");
  plan_cmd->add_option("--records", pl_records)->required();
  plan_cmd->add_option("--constraints", pl_constraints)->required();
  plan_cmd->add_option("--ga-seed", ga.seed)->capture_default_str();
  plan_cmd->add_option("--generations", ga.generations)->capture_default_str();
  plan_cmd->add_option("--out", pl_out)->required();
  plan_cmd->add_option("--report", pl_report);

  // report
  std::vector<std::string> rp_in;
  std::string rp_out;
  auto* report_cmd = app.add_subcommand("report", "Merge serve reports into a tradeoff table");
  report_cmd->add_option("--in", rp_in, "Serve report JSON files")->required();
  report_cmd->add_option("--out", rp_out, "Tradeoff CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*gen_model_cmd) {
      write_file(gm_out, model_to_json(gen_model(gm)));
    } else if (*gen_trace_cmd) {
      parse_order(gt_order, ts.order, ts.speedup_factor);
      const auto model = model_from_json(read_file(gt_model));
      write_file(gt_out, trace_to_json(gen_trace(ts, &model)));
    } else if (*serve_cmd) {
      auto model = std::make_shared<const MoEModelSpec>(model_from_json(read_file(sv_model)));
      const auto trace = trace_from_json(read_file(sv_trace));
      const auto cost = cost_from_json(read_file(sv_cost));
      ServeOptions opts;
      opts.exec = sv_threaded ? ExecutionMode::Threaded : ExecutionMode::Virtual;
      const auto rep = serve_trace(model, trace, parse_policy(sv_policy), cost, opts);
      if (!sv_metrics.empty()) write_file(sv_metrics, metrics_csv(rep.metrics));
      const auto json = serve_report_to_json(rep);
      if (!sv_report.empty()) {
        write_file(sv_report, json);
      } else {
        std::cout << json << '\n';
      }
    } else if (*profile_cmd) {
      auto model = std::make_shared<const MoEModelSpec>(model_from_json(read_file(pf_model)));
      const auto trace = trace_from_json(read_file(pf_trace));
      const auto cost = cost_from_json(read_file(pf_cost));
      ProfileFile file;
      file.shape = ModelShape::of(*model);
      const auto configs = random_configs(file.shape, pf_num, pf_seed);
      file.records = run_profile(model, make_profiling_trace(trace, file.shape), configs, cost);
      write_file(pf_out, profile_to_json(file));
    } else if (*plan_cmd) {
      const auto file = profile_from_json(read_file(pl_records));
      const auto constraints = constraints_from_json(read_file(pl_constraints));
      const auto pm = fit_perf_models(file.records);
      if (pm.ridge_fallback) {
        std::cerr << "warning: singular profiling design, used ridge regression\n";
      }
      const auto result = genetic_search(pm, constraints, file.shape, ga);
      if (!pl_report.empty()) write_file(pl_report, plan_report_to_json(result));
      if (!result.config) {
        std::cerr << "no configuration satisfies the constraints\n";
        return kExitInfeasible;
      }
      write_file(pl_out, config_to_json(*result.config));
    } else if (*report_cmd) {
      std::vector<ServeReport> reports;
      for (const auto& path : rp_in) reports.push_back(serve_report_from_json(read_file(path)));
      report(reports, rp_out);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
