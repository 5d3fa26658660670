// JSON file formats. Doubles are written with shortest round-trip decimal
// representation, so save/load preserves every weight bit for bit.

#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "pcmoe/committee.hpp"
#include "pcmoe/moe.hpp"
#include "pcmoe/planner.hpp"
#include "pcmoe/serve.hpp"
#include "pcmoe/swap.hpp"
#include "pcmoe/workload.hpp"

namespace pcmoe {

/// Malformed or inconsistent input file.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view contents);

std::string model_to_json(const MoEModelSpec& model);
/// Validates shapes and magnitude caches.
MoEModelSpec model_from_json(std::string_view json);

std::string trace_to_json(const Trace& trace);
Trace trace_from_json(std::string_view json);

/// "sequential", "shuffled" or "speedup:<factor>".
std::string order_to_string(TraceOrder order, std::size_t factor);
void parse_order(std::string_view s, TraceOrder& order, std::size_t& factor);

std::string config_to_json(const PCConfig& config);
PCConfig config_from_json(std::string_view json);

std::string cost_to_json(const CostModelParams& cost);
CostModelParams cost_from_json(std::string_view json);

std::string constraints_to_json(const Constraints& c);
Constraints constraints_from_json(std::string_view json);

struct ProfileFile {
  ModelShape shape;
  std::vector<ProfileRecord> records;
};

std::string profile_to_json(const ProfileFile& file);
ProfileFile profile_from_json(std::string_view json);

std::string serve_report_to_json(const ServeReport& report);
ServeReport serve_report_from_json(std::string_view json);

/// {predicted:{acc,mem,lat}, feasible, generations_run, seed}
std::string plan_report_to_json(const SearchResult& result);

}  // namespace pcmoe
